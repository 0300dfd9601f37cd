#pragma once

#include "s3seg/common.hpp"
#include "s3seg/tensor.hpp"

namespace s3seg {

struct LossWeights {
    double lambda1 = 1.0;  // self-labeling CE
    double lambda2 = 0.0;  // affine consistency
    double lambda3 = 0.0;  // spatial consistency

    void validate() const;

    bool operator==(const LossWeights&) const = default;

    static LossWeights skin() { return {1.2, 0.3, 0.3}; }
    static LossWeights lung() { return {1.0, 0.5, 0.6}; }
};

/// Per-channel Sobel responses of a soft prediction map, zero on the one-
/// pixel border (valid-region filtering padded back to H x W).
struct EdgeMaps {
    Tensor ex;
    Tensor ey;
    Tensor exy;
};

/// Mean over pixels of -log S[Y]; S clamped below at 1e-12 before the log.
/// Y carries the argmax pseudo-labels and contributes no gradient.
Tensor self_label_ce(const Tensor& s, const LabelMap& y);

EdgeMaps sobel_edges(const Tensor& s);

/// Mean over pixels and channels of |EX-EY| + |EX-EXY| + |EY-EXY|.
Tensor spatial_consistency(const Tensor& s);

/// Masked mean CE of the surrogate prediction against warped pseudo-labels.
/// Pixels outside the valid mask are excluded; labels there may be sentinels.
Tensor affine_consistency(const Tensor& s_aux, const LabelMap& y_a, const Mask& valid);

Tensor joint(const Tensor& l_ce, const Tensor& l_at, const Tensor& l_s, const LossWeights& w);

}  // namespace s3seg
