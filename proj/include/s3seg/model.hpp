#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "s3seg/common.hpp"
#include "s3seg/nn_ops.hpp"
#include "s3seg/tensor.hpp"

namespace s3seg {

/// Geometry of one large-kernel attention path. A dense k_lka x k_lka spatial
/// mix is factored into depthwise inception branches (one per r in r_set plus
/// an identity branch), a depthwise dilated conv, and a pointwise conv.
struct LKAConfig {
    std::int64_t channels = 64;
    std::int64_t dilation = 3;
    std::int64_t k_lka = 21;
    std::vector<std::int64_t> r_set = {3, 5};

    std::int64_t dw_kernel() const { return 2 * dilation - 1; }
    std::int64_t dwd_kernel() const { return (k_lka + dilation - 1) / dilation; }

    /// Throws ConfigError unless both derived kernels are odd and >= 1, r_set
    /// is non-empty with odd strictly increasing entries, and channels >= 1.
    void validate() const;

    bool operator==(const LKAConfig&) const = default;
};

struct ModelConfig {
    std::int64_t in_channels = 1;
    std::int64_t channels = 64;
    std::int64_t blocks = 2;
    std::int64_t clusters = 100;
    LKAConfig lka;
    std::int64_t deform_kernel = 3;
    std::uint64_t seed = 0;

    /// Smallest H or W the encoder accepts: the effective extent of the
    /// depthwise dilated kernel.
    std::int64_t min_extent() const { return lka.dilation * (lka.dwd_kernel() - 1) + 1; }

    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

/// Parameters of one attention block. Convs feeding BN or forming the
/// attention path carry no bias.
struct BlockParams {
    Tensor f_w;                 // [C,C,1,1]
    std::vector<Tensor> inc_w;  // [C,1,r,r] per r in r_set
    Tensor dwd_w;               // [C,1,dwd,dwd], dilation d
    Tensor attn_w;              // [C,C,1,1]
    Tensor post_w;              // [C,C,1,1]
    Tensor bn_gamma;            // [C]
    Tensor bn_beta;             // [C]
};

struct ModelParams {
    ModelConfig cfg;
    Tensor stem_w;      // [C,Cin,3,3]
    Tensor stem_gamma;  // [C]
    Tensor stem_beta;   // [C]
    std::vector<BlockParams> blocks;
    Tensor offset_w;    // [2k^2,C,k,k], exactly zero at init
    Tensor deform_w;    // [C,C,k,k]
    Tensor deform_gamma;
    Tensor deform_beta;
    Tensor head_main_w;  // [K,C,1,1]
    Tensor head_main_b;  // [K]
    Tensor head_aux_w;   // [K,C,1,1]
    Tensor head_aux_b;   // [K]

    static ModelParams init(const ModelConfig& cfg);

    /// Visits every tensor in declaration order under its stable name. The
    /// order and names define the checkpoint layout and the optimizer slot
    /// assignment.
    void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
};

struct ForwardResult {
    Tensor features;  // [1,C,H,W]
    Tensor s_main;    // [1,K,H,W], per-pixel softmax over clusters
};

/// One attention block: F = 1x1 conv; Inc = F + sum_r DW_r(F);
/// A = 1x1 conv(DW-dilated(Inc)); out = ReLU(BN(1x1 conv(A*F + x))).
Tensor ilka_block(const Tensor& x, const BlockParams& p, const LKAConfig& lka);

/// Stem (3x3 conv, BN, ReLU) -> blocks -> offset conv -> deformable conv ->
/// BN -> ReLU -> features; S_main = softmax(main head). Spatial size is
/// preserved end to end.
ForwardResult forward(const Tensor& image, const ModelParams& params);

/// Warps features through the grid, applies the auxiliary head, softmaxes.
Tensor surrogate_forward(const Tensor& features, const SampleGrid& grid, const ModelParams& params);

/// Per-pixel argmax over channels of [1,K,H,W]; ties take the smallest id.
LabelMap argmax_labels(const Tensor& s);

/// Learnable values in one attention path: inception depthwise filters,
/// the depthwise dilated filter, and the pointwise mixing conv.
std::int64_t attention_path_param_count(const LKAConfig& lka);

/// Dense C->C conv at the full k_lka extent, for comparison.
std::int64_t dense_conv_param_count(const LKAConfig& lka);

/// Flat binary checkpoint: header (magic, version, config as fixed-width
/// little-endian integers), then each tensor in declaration order as
/// (name length, name bytes, rank, extents, float32 little-endian values).
void save_checkpoint(const std::string& path, ModelParams& params);
ModelParams load_checkpoint(const std::string& path);

}  // namespace s3seg
