#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "s3seg/common.hpp"

namespace s3seg {

/// Decoded 8-bit image, row-major, interleaved channels (1 = gray, 3 = RGB).
struct ImageU8 {
    std::int64_t h = 0;
    std::int64_t w = 0;
    std::int64_t channels = 0;
    std::vector<std::uint8_t> pixels;

    std::uint8_t at(std::int64_t r, std::int64_t c, std::int64_t ch) const {
        return pixels[static_cast<std::size_t>((r * w + c) * channels + ch)];
    }
};

/// Reads PNG (8-bit gray, RGB, or indexed; no interlace), BMP (8-bit palette
/// or 24-bit, uncompressed), or PGM/PPM (ASCII or binary, maxval <= 255).
/// The format is detected from the file's magic bytes; palette and sub-255
/// maxval inputs are expanded/rescaled to plain 8-bit gray or RGB.
ImageU8 read_image(const std::string& path);

/// Writes 8-bit PNG: grayscale for 1-channel input, truecolor for 3-channel.
void write_png(const std::string& path, const ImageU8& image);

/// Writes a label map as an indexed-color PNG, one fixed palette color per
/// cluster id. Ids must lie in [0, 255].
void write_label_png(const std::string& path, const LabelMap& labels);

/// Reads an indexed-color PNG back to the exact label map (palette indices).
LabelMap read_label_png(const std::string& path);

/// Deterministic palette color for a cluster id (golden-angle hue walk).
std::array<std::uint8_t, 3> palette_color(std::int64_t id);

}  // namespace s3seg
