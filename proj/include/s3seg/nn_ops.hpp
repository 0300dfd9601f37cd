#pragma once

#include "s3seg/tensor.hpp"

namespace s3seg {

/// Convolution geometry. Validation enforces divisibility by groups and a
/// positive output extent.
struct ConvSpec {
    std::int64_t in_channels = 0;
    std::int64_t out_channels = 0;
    std::int64_t kernel = 0;
    std::int64_t stride = 1;
    std::int64_t padding = 0;
    std::int64_t dilation = 1;
    std::int64_t groups = 1;

    void validate() const;
    std::int64_t out_extent(std::int64_t in) const {
        return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
    }
};

/// Continuous per-output-pixel source coordinates in pixel units, stored as a
/// [N,2,H,W] tensor: channel 0 = source row, channel 1 = source column.
struct SampleGrid {
    Tensor coords;

    std::int64_t h() const { return coords.extent(2); }
    std::int64_t w() const { return coords.extent(3); }
};

/// Cross-correlation (no kernel flip), zero padding. weight is
/// (Cout, Cin/groups, k, k); bias, when non-null, is (Cout).
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor* bias,
              const ConvSpec& spec);

/// Per-channel convolution (groups == channels), weight (C, 1, k, k).
/// Independent kernel; agreement with grouped conv2d is checked in tests.
Tensor depthwise_conv2d(const Tensor& input, const Tensor& weight, const ConvSpec& spec);

/// Normalizes each channel by the current pass's spatial statistics (no
/// running averages: training is per-image), then maps by gamma/beta.
Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta, double eps);

/// Bilinear interpolation of the four integer neighbors of each grid
/// coordinate; out-of-bounds reads are 0. Differentiable w.r.t. input values
/// and grid coordinates.
Tensor bilinear_sample(const Tensor& input, const SampleGrid& grid);

/// Deformable convolution, v1 semantics: offsets (N, 2k², H', W') hold
/// (Δrow, Δcol) per kernel tap, channels (2t, 2t+1) for tap t in row-major
/// kernel order. Each tap samples bilinearly at base position + offset.
/// Requires stride 1 and groups 1.
Tensor deformable_conv2d(const Tensor& input, const Tensor& offsets, const Tensor& weight,
                         const Tensor* bias, const ConvSpec& spec);

Tensor relu(const Tensor& input);

/// Surrounds each spatial map with a zero ring of width pad.
Tensor zero_pad2d(const Tensor& input, std::int64_t pad);

}  // namespace s3seg
