#include "s3seg/affine.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace s3seg {

namespace {

// Exact at multiples of 90 degrees so right-angle grids carry no rounding.
double cosd(double deg) {
    double r = std::fmod(deg, 360.0);
    if (r < 0.0) {
        r += 360.0;
    }
    if (r == 0.0) {
        return 1.0;
    }
    if (r == 90.0) {
        return 0.0;
    }
    if (r == 180.0) {
        return -1.0;
    }
    if (r == 270.0) {
        return 0.0;
    }
    return std::cos(deg * std::numbers::pi / 180.0);
}

double sind(double deg) {
    double r = std::fmod(deg, 360.0);
    if (r < 0.0) {
        r += 360.0;
    }
    if (r == 0.0) {
        return 0.0;
    }
    if (r == 90.0) {
        return 1.0;
    }
    if (r == 180.0) {
        return 0.0;
    }
    if (r == 270.0) {
        return -1.0;
    }
    return std::sin(deg * std::numbers::pi / 180.0);
}

double tand(double deg) { return sind(deg) / cosd(deg); }

}  // namespace

void AffineRanges::validate() const {
    if (rotation_min_deg > rotation_max_deg || scale_min > scale_max ||
        shear_min_deg > shear_max_deg || translate_min > translate_max) {
        throw ConfigError("AffineRanges: min > max");
    }
    if (scale_min <= 0.0) {
        throw ConfigError("AffineRanges: scale must be > 0");
    }
}

AffineRanges AffineRanges::identity() {
    AffineRanges r;
    r.rotation_min_deg = r.rotation_max_deg = 0.0;
    r.scale_min = r.scale_max = 1.0;
    r.shear_min_deg = r.shear_max_deg = 0.0;
    r.translate_min = r.translate_max = 0.0;
    return r;
}

std::array<double, 4> AffineParams::matrix() const {
    const double c = cosd(rotation_deg);
    const double s = sind(rotation_deg);
    const double sh = tand(shear_deg);
    // R * Shear * scale*I with Shear = [[1, sh], [0, 1]]
    return {scale * c, scale * (c * sh - s), scale * s, scale * (s * sh + c)};
}

std::array<double, 4> AffineParams::inverse_matrix() const {
    const std::array<double, 4> a = matrix();
    const double det = a[0] * a[3] - a[1] * a[2];
    if (std::abs(det) <= 1e-6) {
        throw DegenerateTransformError("affine map is not invertible, |det| = " +
                                       std::to_string(std::abs(det)));
    }
    return {a[3] / det, -a[1] / det, -a[2] / det, a[0] / det};
}

AffineParams sample_affine(Rng& rng, const AffineRanges& ranges) {
    ranges.validate();
    // Bounded resampling guards against degenerate draws (possible only at
    // extreme shear); the parameterization otherwise keeps det = scale^2.
    for (int attempt = 0; attempt < 8; ++attempt) {
        AffineParams p;
        p.rotation_deg = rng.uniform(ranges.rotation_min_deg, ranges.rotation_max_deg);
        p.scale = rng.uniform(ranges.scale_min, ranges.scale_max);
        p.shear_deg = rng.uniform(ranges.shear_min_deg, ranges.shear_max_deg);
        p.translate_x = rng.uniform(ranges.translate_min, ranges.translate_max);
        p.translate_y = rng.uniform(ranges.translate_min, ranges.translate_max);
        const std::array<double, 4> a = p.matrix();
        if (std::abs(a[0] * a[3] - a[1] * a[2]) > 1e-6) {
            return p;
        }
    }
    throw DegenerateTransformError("sample_affine: no invertible draw in range");
}

GridWithMask affine_grid(const AffineParams& p, std::int64_t h, std::int64_t w) {
    if (h < 1 || w < 1) {
        throw ShapeError("affine_grid: empty image");
    }
    const std::array<double, 4> inv = p.inverse_matrix();
    const double cx = static_cast<double>(w - 1) / 2.0;
    const double cy = static_cast<double>(h - 1) / 2.0;
    const double tx = p.translate_x * static_cast<double>(w);
    const double ty = p.translate_y * static_cast<double>(h);

    GridWithMask out;
    out.grid.coords = Tensor::zeros({1, 2, h, w});
    out.valid = Mask(h, w);
    double* rows = out.grid.coords.values().data();
    double* cols = rows + h * w;
    for (std::int64_t i = 0; i < h; ++i) {
        for (std::int64_t j = 0; j < w; ++j) {
            const double dx = static_cast<double>(j) - cx - tx;
            const double dy = static_cast<double>(i) - cy - ty;
            const double sx = inv[0] * dx + inv[1] * dy + cx;
            const double sy = inv[2] * dx + inv[3] * dy + cy;
            rows[i * w + j] = sy;
            cols[i * w + j] = sx;
            out.valid.set(i, j,
                          sy >= 0.0 && sy <= static_cast<double>(h - 1) && sx >= 0.0 &&
                              sx <= static_cast<double>(w - 1));
        }
    }
    return out;
}

LabelMap warp_labels(const LabelMap& y, const SampleGrid& grid, const Mask& valid) {
    const std::int64_t h = grid.h();
    const std::int64_t w = grid.w();
    if (valid.h != h || valid.w != w) {
        throw ShapeError("warp_labels: mask/grid size mismatch");
    }
    if (y.h != h || y.w != w) {
        throw ShapeError("warp_labels: label map size mismatch");
    }
    LabelMap out(h, w, -1);
    const double* rows = grid.coords.values().data();
    const double* cols = rows + h * w;
    for (std::int64_t i = 0; i < h; ++i) {
        for (std::int64_t j = 0; j < w; ++j) {
            if (!valid.at(i, j)) {
                continue;
            }
            const std::int64_t sy = std::llround(rows[i * w + j]);
            const std::int64_t sx = std::llround(cols[i * w + j]);
            out.at(i, j) = y.at(sy, sx);
        }
    }
    return out;
}

}  // namespace s3seg
