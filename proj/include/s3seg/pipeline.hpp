#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "s3seg/affine.hpp"
#include "s3seg/common.hpp"
#include "s3seg/losses.hpp"
#include "s3seg/metrics.hpp"
#include "s3seg/model.hpp"
#include "s3seg/tensor.hpp"
#include "s3seg/trainer.hpp"

namespace s3seg {

/// One decoded input image: intensities in [0,1], interleaved row-major,
/// plus the ground-truth mask when a sibling mask file exists.
struct ImageSample {
    std::string id;  // file stem
    std::string source_path;
    std::int64_t h = 0;
    std::int64_t w = 0;
    std::int64_t channels = 1;  // 1 or 3
    std::vector<double> pixels;
    std::optional<Mask> gt;

    double at(std::int64_t r, std::int64_t c, std::int64_t ch) const {
        return pixels[static_cast<std::size_t>((r * w + c) * channels + ch)];
    }
};

/// Decodes `path` (PNG, BMP, or PGM/PPM) to [0,1] intensities. When a sibling
/// file `<stem><mask_suffix>.<ext>` exists next to the image it is loaded as
/// the ground-truth mask, binarized at 0.5 of the channel-mean intensity.
/// Throws IoError on unsupported or corrupt files and on mask size mismatch.
ImageSample load_image(const std::string& path, const std::string& mask_suffix = "_gt");

/// Decodes a mask image and binarizes it at 0.5 of the channel-mean
/// intensity. The convention shared by load_image and the evaluation CLI.
Mask load_mask(const std::string& path);

/// Per-channel standardization over the single image: (x - mean)/(std + 1e-8)
/// with the population standard deviation. Returns a [1,Cin,H,W] tensor.
Tensor preprocess(const ImageSample& sample);

/// Full run configuration. Values assemble in three layers: preset defaults,
/// then config-file entries, then command-line overrides.
struct RunConfig {
    ModelConfig model;
    OptimConfig optim;
    LossWeights weights;
    AffineRanges ranges;
    std::string preset = "custom";  // skin | lung | custom
    std::string out_dir = "out";
    std::string mask_suffix = "_gt";
    std::int64_t jobs = 1;
    std::uint64_t seed = 0;

    void validate() const;

    /// Canonical key = value text; parse(serialize()) reproduces this config.
    std::string serialize() const;

    bool operator==(const RunConfig&) const = default;
};

/// One key = value assignment, in source order.
using ConfigEntry = std::pair<std::string, std::string>;

/// Parses key = value lines; '#' starts a comment, blank lines are skipped.
/// Throws ConfigError on lines that are not assignments.
std::vector<ConfigEntry> parse_config_text(const std::string& text);

/// Reads and parses a config file. Throws IoError if unreadable.
std::vector<ConfigEntry> load_config_file(const std::string& path);

/// Builds a RunConfig from layered entries. The preset named last (CLI over
/// file) seeds the loss weights; file entries then apply in order, then CLI
/// entries, so explicit keys win regardless of position. `env_seed` (the
/// S3SEG_SEED fallback, may be null) applies only when no layer sets `seed`.
/// Throws ConfigError on unknown keys or malformed values.
RunConfig resolve_config(const std::vector<ConfigEntry>& file_entries,
                         const std::vector<ConfigEntry>& cli_entries,
                         const char* env_seed = nullptr);

/// FNV-1a over the canonical serialization; stamped into metric reports so a
/// result file identifies the configuration that produced it.
std::uint64_t config_hash(const RunConfig& cfg);

struct BatchItem {
    std::string id;
    std::string source_path;
    bool ok = false;
    bool evaluated = false;  // ground truth present and metrics computed
    std::string error;       // set when !ok
    TrainCounters counters;
    std::string labels_path;
    std::string history_path;
};

struct BatchResult {
    std::vector<BatchItem> items;  // input order (sorted by file name)
    MetricsReport report;          // meaningful when evaluated_count > 0
    std::size_t evaluated_count = 0;
    std::size_t failed_count = 0;
    std::string metrics_path;

    bool all_ok() const { return failed_count == 0; }
};

/// Trains every image under `input_path` (one file, or a directory scanned
/// for supported extensions, skipping mask files) independently, one model
/// per image seeded with cfg.seed + index. Writes per image
/// `<out>/<id>_labels.png` and `<out>/<id>_history.csv`, then one
/// `<out>/metrics.txt` with full-precision records. Per-image failures are
/// recorded in the result, not fatal. Reruns with the same configuration
/// produce byte-identical artifacts. Throws IoError when no input image is
/// found.
BatchResult run_batch(const RunConfig& cfg, const std::string& input_path);

}  // namespace s3seg
