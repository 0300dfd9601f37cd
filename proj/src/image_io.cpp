#include "s3seg/image_io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

namespace s3seg {

namespace {

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open file: " + path);
    }
    std::vector<std::uint8_t> out((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
    return out;
}

void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw IoError("cannot open file for writing: " + path);
    }
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os) {
        throw IoError("write failed: " + path);
    }
}

// ---------------------------------------------------------------------------
// zlib wrappers

std::vector<std::uint8_t> zlib_inflate_exact(const std::uint8_t* data, std::size_t n,
                                             std::size_t expected, const std::string& path) {
    std::vector<std::uint8_t> out(expected);
    z_stream zs;
    std::memset(&zs, 0, sizeof(zs));
    if (inflateInit(&zs) != Z_OK) {
        throw IoError("inflate init failed: " + path);
    }
    zs.next_in = const_cast<Bytef*>(data);
    zs.avail_in = static_cast<uInt>(n);
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(expected);
    const int rc = inflate(&zs, Z_FINISH);
    const uLong produced = zs.total_out;
    inflateEnd(&zs);
    if (rc != Z_STREAM_END || produced != expected) {
        throw IoError("compressed image data is corrupt or has wrong size: " + path);
    }
    return out;
}

std::vector<std::uint8_t> zlib_deflate(const std::vector<std::uint8_t>& raw,
                                       const std::string& path) {
    z_stream zs;
    std::memset(&zs, 0, sizeof(zs));
    // Level pinned so rewrites of identical content are byte-identical.
    if (deflateInit(&zs, 9) != Z_OK) {
        throw IoError("deflate init failed: " + path);
    }
    std::vector<std::uint8_t> out(deflateBound(&zs, static_cast<uLong>(raw.size())));
    zs.next_in = const_cast<Bytef*>(raw.data());
    zs.avail_in = static_cast<uInt>(raw.size());
    zs.next_out = out.data();
    zs.avail_out = static_cast<uInt>(out.size());
    const int rc = deflate(&zs, Z_FINISH);
    const uLong produced = zs.total_out;
    deflateEnd(&zs);
    if (rc != Z_STREAM_END) {
        throw IoError("deflate failed: " + path);
    }
    out.resize(produced);
    return out;
}

// ---------------------------------------------------------------------------
// PNG

constexpr std::uint8_t kPngSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

std::uint32_t be32(const std::uint8_t* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

void push_be32(std::vector<std::uint8_t>& v, std::uint32_t x) {
    v.push_back(static_cast<std::uint8_t>((x >> 24) & 0xff));
    v.push_back(static_cast<std::uint8_t>((x >> 16) & 0xff));
    v.push_back(static_cast<std::uint8_t>((x >> 8) & 0xff));
    v.push_back(static_cast<std::uint8_t>(x & 0xff));
}

void push_chunk(std::vector<std::uint8_t>& file, const char type[4],
                const std::vector<std::uint8_t>& data) {
    push_be32(file, static_cast<std::uint32_t>(data.size()));
    const std::size_t type_pos = file.size();
    file.insert(file.end(), type, type + 4);
    file.insert(file.end(), data.begin(), data.end());
    const uLong crc =
        crc32(0, file.data() + type_pos, static_cast<uInt>(4 + data.size()));
    push_be32(file, static_cast<std::uint32_t>(crc));
}

std::uint8_t paeth(std::uint8_t a, std::uint8_t b, std::uint8_t c) {
    const int p = static_cast<int>(a) + static_cast<int>(b) - static_cast<int>(c);
    const int pa = std::abs(p - static_cast<int>(a));
    const int pb = std::abs(p - static_cast<int>(b));
    const int pc = std::abs(p - static_cast<int>(c));
    if (pa <= pb && pa <= pc) {
        return a;
    }
    return pb <= pc ? b : c;
}

void defilter_scanlines(std::vector<std::uint8_t>& raw, std::int64_t h, std::int64_t stride,
                        std::int64_t bpp, const std::string& path) {
    // In-place reconstruction; raw holds h rows of (1 filter byte + stride).
    std::vector<std::uint8_t> prev(static_cast<std::size_t>(stride), 0);
    for (std::int64_t y = 0; y < h; ++y) {
        std::uint8_t* row = raw.data() + y * (stride + 1);
        const std::uint8_t filter = row[0];
        std::uint8_t* cur = row + 1;
        switch (filter) {
            case 0:
                break;
            case 1:
                for (std::int64_t i = bpp; i < stride; ++i) {
                    cur[i] = static_cast<std::uint8_t>(cur[i] + cur[i - bpp]);
                }
                break;
            case 2:
                for (std::int64_t i = 0; i < stride; ++i) {
                    cur[i] = static_cast<std::uint8_t>(cur[i] + prev[static_cast<std::size_t>(i)]);
                }
                break;
            case 3:
                for (std::int64_t i = 0; i < stride; ++i) {
                    const int a = i >= bpp ? cur[i - bpp] : 0;
                    const int b = prev[static_cast<std::size_t>(i)];
                    cur[i] = static_cast<std::uint8_t>(cur[i] + (a + b) / 2);
                }
                break;
            case 4:
                for (std::int64_t i = 0; i < stride; ++i) {
                    const std::uint8_t a = i >= bpp ? cur[i - bpp] : 0;
                    const std::uint8_t b = prev[static_cast<std::size_t>(i)];
                    const std::uint8_t c = i >= bpp ? prev[static_cast<std::size_t>(i - bpp)] : 0;
                    cur[i] = static_cast<std::uint8_t>(cur[i] + paeth(a, b, c));
                }
                break;
            default:
                throw IoError("png: unknown scanline filter " + std::to_string(filter) + ": " +
                              path);
        }
        std::memcpy(prev.data(), cur, static_cast<std::size_t>(stride));
    }
}

struct PngImage {
    std::int64_t h = 0;
    std::int64_t w = 0;
    int color_type = 0;                      // 0 gray, 2 rgb, 3 indexed
    std::vector<std::uint8_t> data;          // defiltered samples
    std::vector<std::uint8_t> palette;       // 3*n bytes for type 3
};

PngImage decode_png(const std::vector<std::uint8_t>& bytes, const std::string& path) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSig, 8) != 0) {
        throw IoError("png: bad signature: " + path);
    }
    PngImage img;
    std::vector<std::uint8_t> idat;
    bool have_header = false;
    bool have_end = false;
    std::size_t pos = 8;
    while (pos + 8 <= bytes.size() && !have_end) {
        const std::uint32_t len = be32(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) {
            throw IoError("png: truncated chunk: " + path);
        }
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const std::uint8_t* data = bytes.data() + pos + 8;
        const std::uint32_t crc_want = be32(data + len);
        const uLong crc_got = crc32(0, bytes.data() + pos + 4, 4 + len);
        if (static_cast<std::uint32_t>(crc_got) != crc_want) {
            throw IoError("png: chunk crc mismatch: " + path);
        }
        if (std::memcmp(type, "IHDR", 4) == 0) {
            if (len != 13) {
                throw IoError("png: bad header length: " + path);
            }
            img.w = be32(data);
            img.h = be32(data + 4);
            const int depth = data[8];
            img.color_type = data[9];
            const int comp = data[10];
            const int filt = data[11];
            const int interlace = data[12];
            if (img.w < 1 || img.h < 1) {
                throw IoError("png: bad dimensions: " + path);
            }
            if (depth != 8 ||
                (img.color_type != 0 && img.color_type != 2 && img.color_type != 3) ||
                comp != 0 || filt != 0 || interlace != 0) {
                throw IoError("png: unsupported format (need 8-bit gray/rgb/indexed, "
                              "no interlace): " +
                              path);
            }
            have_header = true;
        } else if (std::memcmp(type, "PLTE", 4) == 0) {
            if (len % 3 != 0 || len == 0 || len > 256 * 3) {
                throw IoError("png: bad palette: " + path);
            }
            img.palette.assign(data, data + len);
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), data, data + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            have_end = true;
        }
        // Ancillary chunks are skipped.
        pos += 12 + len;
    }
    if (!have_header || !have_end) {
        throw IoError("png: missing required chunks: " + path);
    }
    if (img.color_type == 3 && img.palette.empty()) {
        throw IoError("png: indexed image without palette: " + path);
    }
    const std::int64_t bpp = img.color_type == 2 ? 3 : 1;
    const std::int64_t stride = img.w * bpp;
    const std::size_t expected = static_cast<std::size_t>(img.h) *
                                 static_cast<std::size_t>(stride + 1);
    std::vector<std::uint8_t> raw =
        zlib_inflate_exact(idat.data(), idat.size(), expected, path);
    defilter_scanlines(raw, img.h, stride, bpp, path);
    img.data.resize(static_cast<std::size_t>(img.h) * static_cast<std::size_t>(stride));
    for (std::int64_t y = 0; y < img.h; ++y) {
        std::memcpy(img.data.data() + y * stride, raw.data() + y * (stride + 1) + 1,
                    static_cast<std::size_t>(stride));
    }
    return img;
}

void encode_png(const std::string& path, std::int64_t h, std::int64_t w, int color_type,
                const std::vector<std::uint8_t>& samples,
                const std::vector<std::uint8_t>& palette) {
    const std::int64_t bpp = color_type == 2 ? 3 : 1;
    const std::int64_t stride = w * bpp;
    std::vector<std::uint8_t> file(kPngSig, kPngSig + 8);

    std::vector<std::uint8_t> ihdr;
    push_be32(ihdr, static_cast<std::uint32_t>(w));
    push_be32(ihdr, static_cast<std::uint32_t>(h));
    ihdr.push_back(8);
    ihdr.push_back(static_cast<std::uint8_t>(color_type));
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    push_chunk(file, "IHDR", ihdr);

    if (color_type == 3) {
        push_chunk(file, "PLTE", palette);
    }

    std::vector<std::uint8_t> raw(static_cast<std::size_t>(h) *
                                  static_cast<std::size_t>(stride + 1));
    for (std::int64_t y = 0; y < h; ++y) {
        raw[static_cast<std::size_t>(y * (stride + 1))] = 0;  // filter: none
        std::memcpy(raw.data() + y * (stride + 1) + 1, samples.data() + y * stride,
                    static_cast<std::size_t>(stride));
    }
    push_chunk(file, "IDAT", zlib_deflate(raw, path));
    push_chunk(file, "IEND", {});
    write_file_bytes(path, file);
}

// ---------------------------------------------------------------------------
// BMP (uncompressed, 8-bit palette or 24-bit)

std::uint32_t le32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t le16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

ImageU8 decode_bmp(const std::vector<std::uint8_t>& b, const std::string& path) {
    if (b.size() < 54 || b[0] != 'B' || b[1] != 'M') {
        throw IoError("bmp: bad signature: " + path);
    }
    const std::uint32_t data_offset = le32(b.data() + 10);
    const std::uint32_t header_size = le32(b.data() + 14);
    if (header_size < 40) {
        throw IoError("bmp: unsupported header: " + path);
    }
    const std::int32_t width = static_cast<std::int32_t>(le32(b.data() + 18));
    const std::int32_t height_raw = static_cast<std::int32_t>(le32(b.data() + 22));
    const std::uint16_t planes = le16(b.data() + 26);
    const std::uint16_t bpp = le16(b.data() + 28);
    const std::uint32_t compression = le32(b.data() + 30);
    if (planes != 1 || compression != 0 || (bpp != 8 && bpp != 24) || width < 1 ||
        height_raw == 0) {
        throw IoError("bmp: unsupported format (need uncompressed 8-bit or 24-bit): " + path);
    }
    const bool bottom_up = height_raw > 0;
    const std::int64_t h = bottom_up ? height_raw : -static_cast<std::int64_t>(height_raw);
    const std::int64_t w = width;

    std::vector<std::array<std::uint8_t, 3>> palette;
    if (bpp == 8) {
        std::uint32_t colors = le32(b.data() + 46);
        if (colors == 0) {
            colors = 256;
        }
        const std::size_t pal_pos = 14 + header_size;
        if (pal_pos + colors * 4 > b.size()) {
            throw IoError("bmp: truncated palette: " + path);
        }
        palette.resize(colors);
        for (std::uint32_t i = 0; i < colors; ++i) {
            const std::uint8_t* e = b.data() + pal_pos + i * 4;
            palette[i] = {e[2], e[1], e[0]};  // stored BGR(A)
        }
    }

    const std::int64_t row_bytes = w * (bpp / 8);
    const std::int64_t stride = (row_bytes + 3) / 4 * 4;
    if (data_offset + static_cast<std::size_t>(stride) * static_cast<std::size_t>(h) > b.size()) {
        throw IoError("bmp: truncated pixel data: " + path);
    }

    ImageU8 img;
    img.h = h;
    img.w = w;
    img.channels = 3;
    img.pixels.resize(static_cast<std::size_t>(h * w * 3));
    for (std::int64_t y = 0; y < h; ++y) {
        const std::int64_t src_row = bottom_up ? h - 1 - y : y;
        const std::uint8_t* row = b.data() + data_offset + src_row * stride;
        for (std::int64_t x = 0; x < w; ++x) {
            std::uint8_t r;
            std::uint8_t g;
            std::uint8_t bl;
            if (bpp == 24) {
                bl = row[x * 3];
                g = row[x * 3 + 1];
                r = row[x * 3 + 2];
            } else {
                const std::uint8_t idx = row[x];
                if (idx >= palette.size()) {
                    throw IoError("bmp: palette index out of range: " + path);
                }
                r = palette[idx][0];
                g = palette[idx][1];
                bl = palette[idx][2];
            }
            const std::size_t o = static_cast<std::size_t>((y * w + x) * 3);
            img.pixels[o] = r;
            img.pixels[o + 1] = g;
            img.pixels[o + 2] = bl;
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// PGM / PPM

struct PnmTokenizer {
    const std::vector<std::uint8_t>& b;
    std::size_t pos;
    const std::string& path;

    void skip_space_and_comments() {
        while (pos < b.size()) {
            const char c = static_cast<char>(b[pos]);
            if (c == '#') {
                while (pos < b.size() && b[pos] != '\n') {
                    ++pos;
                }
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                ++pos;
            } else {
                break;
            }
        }
    }

    std::int64_t next_int() {
        skip_space_and_comments();
        if (pos >= b.size() || b[pos] < '0' || b[pos] > '9') {
            throw IoError("pnm: expected integer: " + path);
        }
        std::int64_t v = 0;
        while (pos < b.size() && b[pos] >= '0' && b[pos] <= '9') {
            v = v * 10 + (b[pos] - '0');
            if (v > 1 << 28) {
                throw IoError("pnm: integer out of range: " + path);
            }
            ++pos;
        }
        return v;
    }
};

ImageU8 decode_pnm(const std::vector<std::uint8_t>& b, const std::string& path) {
    if (b.size() < 2 || b[0] != 'P') {
        throw IoError("pnm: bad signature: " + path);
    }
    const char kind = static_cast<char>(b[1]);
    if (kind != '2' && kind != '3' && kind != '5' && kind != '6') {
        throw IoError("pnm: unsupported variant P" + std::string(1, kind) + ": " + path);
    }
    const bool ascii = kind == '2' || kind == '3';
    const std::int64_t channels = (kind == '3' || kind == '6') ? 3 : 1;

    PnmTokenizer tok{b, 2, path};
    const std::int64_t w = tok.next_int();
    const std::int64_t h = tok.next_int();
    const std::int64_t maxval = tok.next_int();
    if (w < 1 || h < 1 || maxval < 1 || maxval > 255) {
        throw IoError("pnm: unsupported geometry or maxval: " + path);
    }

    ImageU8 img;
    img.h = h;
    img.w = w;
    img.channels = channels;
    const std::size_t n = static_cast<std::size_t>(h * w * channels);
    img.pixels.resize(n);
    if (ascii) {
        for (std::size_t i = 0; i < n; ++i) {
            const std::int64_t v = tok.next_int();
            if (v > maxval) {
                throw IoError("pnm: sample exceeds maxval: " + path);
            }
            img.pixels[i] = static_cast<std::uint8_t>((v * 255 + maxval / 2) / maxval);
        }
    } else {
        // Exactly one whitespace byte separates the header from the samples.
        if (tok.pos >= b.size()) {
            throw IoError("pnm: truncated: " + path);
        }
        ++tok.pos;
        if (tok.pos + n > b.size()) {
            throw IoError("pnm: truncated samples: " + path);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const std::int64_t v = b[tok.pos + i];
            if (v > maxval) {
                throw IoError("pnm: sample exceeds maxval: " + path);
            }
            img.pixels[i] = static_cast<std::uint8_t>((v * 255 + maxval / 2) / maxval);
        }
    }
    return img;
}

}  // namespace

ImageU8 read_image(const std::string& path) {
    const std::vector<std::uint8_t> bytes = read_file_bytes(path);
    if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSig, 8) == 0) {
        PngImage png = decode_png(bytes, path);
        ImageU8 img;
        img.h = png.h;
        img.w = png.w;
        if (png.color_type == 0) {
            img.channels = 1;
            img.pixels = std::move(png.data);
        } else if (png.color_type == 2) {
            img.channels = 3;
            img.pixels = std::move(png.data);
        } else {
            img.channels = 3;
            img.pixels.resize(static_cast<std::size_t>(png.h * png.w * 3));
            const std::size_t pal_n = png.palette.size() / 3;
            for (std::size_t i = 0; i < png.data.size(); ++i) {
                const std::uint8_t idx = png.data[i];
                if (idx >= pal_n) {
                    throw IoError("png: palette index out of range: " + path);
                }
                img.pixels[i * 3] = png.palette[idx * 3];
                img.pixels[i * 3 + 1] = png.palette[idx * 3 + 1];
                img.pixels[i * 3 + 2] = png.palette[idx * 3 + 2];
            }
        }
        return img;
    }
    if (bytes.size() >= 2 && bytes[0] == 'B' && bytes[1] == 'M') {
        return decode_bmp(bytes, path);
    }
    if (bytes.size() >= 2 && bytes[0] == 'P') {
        return decode_pnm(bytes, path);
    }
    throw IoError("unsupported image format: " + path);
}

void write_png(const std::string& path, const ImageU8& image) {
    if (image.channels != 1 && image.channels != 3) {
        throw IoError("write_png: channels must be 1 or 3");
    }
    if (image.h < 1 || image.w < 1 ||
        image.pixels.size() !=
            static_cast<std::size_t>(image.h * image.w * image.channels)) {
        throw IoError("write_png: inconsistent image buffer");
    }
    encode_png(path, image.h, image.w, image.channels == 1 ? 0 : 2, image.pixels, {});
}

std::array<std::uint8_t, 3> palette_color(std::int64_t id) {
    // Golden-angle hue walk gives well-separated colors for consecutive ids.
    const double hue = std::fmod(static_cast<double>(id) * 137.50776405003785, 360.0);
    const double s = 0.65;
    const double v = 0.95;
    const double c = v * s;
    const double hp = hue / 60.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0;
    double g = 0;
    double b = 0;
    if (hp < 1) {
        r = c;
        g = x;
    } else if (hp < 2) {
        r = x;
        g = c;
    } else if (hp < 3) {
        g = c;
        b = x;
    } else if (hp < 4) {
        g = x;
        b = c;
    } else if (hp < 5) {
        r = x;
        b = c;
    } else {
        r = c;
        b = x;
    }
    const double m = v - c;
    auto q = [m](double t) {
        return static_cast<std::uint8_t>(std::lround((t + m) * 255.0));
    };
    return {q(r), q(g), q(b)};
}

void write_label_png(const std::string& path, const LabelMap& labels) {
    if (labels.h < 1 || labels.w < 1) {
        throw IoError("write_label_png: empty label map");
    }
    std::int32_t max_id = 0;
    for (std::int32_t id : labels.ids) {
        if (id < 0 || id > 255) {
            throw IoError("write_label_png: cluster id " + std::to_string(id) +
                          " outside the 8-bit palette range");
        }
        max_id = std::max(max_id, id);
    }
    std::vector<std::uint8_t> palette;
    palette.reserve(static_cast<std::size_t>(max_id + 1) * 3);
    for (std::int32_t i = 0; i <= max_id; ++i) {
        const std::array<std::uint8_t, 3> c = palette_color(i);
        palette.push_back(c[0]);
        palette.push_back(c[1]);
        palette.push_back(c[2]);
    }
    std::vector<std::uint8_t> samples(labels.ids.size());
    for (std::size_t i = 0; i < labels.ids.size(); ++i) {
        samples[i] = static_cast<std::uint8_t>(labels.ids[i]);
    }
    encode_png(path, labels.h, labels.w, 3, samples, palette);
}

LabelMap read_label_png(const std::string& path) {
    PngImage png = decode_png(read_file_bytes(path), path);
    if (png.color_type != 3) {
        throw IoError("read_label_png: not an indexed-color image: " + path);
    }
    const std::size_t pal_n = png.palette.size() / 3;
    LabelMap out(png.h, png.w);
    for (std::size_t i = 0; i < png.data.size(); ++i) {
        if (png.data[i] >= pal_n) {
            throw IoError("read_label_png: palette index out of range: " + path);
        }
        out.ids[i] = png.data[i];
    }
    return out;
}

}  // namespace s3seg
