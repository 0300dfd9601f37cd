#pragma once

#include <array>

#include "s3seg/common.hpp"
#include "s3seg/nn_ops.hpp"

namespace s3seg {

/// Uniform sampling ranges for the transform family. Translation is a
/// fraction of the image extent (of W horizontally, H vertically).
struct AffineRanges {
    double rotation_min_deg = -30.0;
    double rotation_max_deg = 30.0;
    double scale_min = 0.8;
    double scale_max = 1.2;
    double shear_min_deg = -10.0;
    double shear_max_deg = 10.0;
    double translate_min = -0.1;
    double translate_max = 0.1;

    void validate() const;
    static AffineRanges identity();

    bool operator==(const AffineRanges&) const = default;
};

/// One transform draw. The 2x2 map acts on (x, y) about the image center
/// ((W-1)/2, (H-1)/2); A = R(rotation) * Shear(shear) * scale*I. Trigonometry
/// at multiples of 90 degrees is exact so right-angle rotations become exact
/// index permutations.
struct AffineParams {
    double rotation_deg = 0.0;
    double scale = 1.0;
    double shear_deg = 0.0;
    double translate_x = 0.0;  // fraction of W
    double translate_y = 0.0;  // fraction of H

    /// Row-major [a00, a01, a10, a11].
    std::array<double, 4> matrix() const;
    std::array<double, 4> inverse_matrix() const;

    static AffineParams identity() { return {}; }
};

AffineParams sample_affine(Rng& rng, const AffineRanges& ranges);

struct GridWithMask {
    SampleGrid grid;
    Mask valid;
};

/// Inverse-warp grid: for each output pixel, the source coordinate
/// A^-1 * (pixel - center - t) + center, so the output is the transformed
/// image. A pixel is valid iff its source lies in [0,H-1] x [0,W-1].
GridWithMask affine_grid(const AffineParams& p, std::int64_t h, std::int64_t w);

/// Nearest-neighbor label lookup through the grid; invalid pixels get -1.
LabelMap warp_labels(const LabelMap& y, const SampleGrid& grid, const Mask& valid);

}  // namespace s3seg
