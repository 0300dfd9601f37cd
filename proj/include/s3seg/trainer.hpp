#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "s3seg/affine.hpp"
#include "s3seg/losses.hpp"
#include "s3seg/metrics.hpp"
#include "s3seg/model.hpp"

namespace s3seg {

struct OptimConfig {
    double lr = 0.36;
    double momentum = 0.9;
    std::int64_t max_iterations = 50;
    std::int64_t min_cluster_stop = 0;  // 0 disables the early stop
    std::uint64_t seed = 0;

    void validate() const;  // lr > 0, momentum in [0,1), max_iterations >= 1

    bool operator==(const OptimConfig&) const = default;
};

struct IterationRecord {
    std::int64_t iteration = 0;
    double l_ce = 0.0;
    double l_at = 0.0;  // 0 when the surrogate branch is gated off
    double l_s = 0.0;   // 0 when the edge branch is gated off
    double l_joint = 0.0;
    std::int64_t unique_clusters = 0;
    AffineParams affine;  // identity when no draw happened this iteration
};

struct TrainHistory {
    std::vector<IterationRecord> records;

    /// Header plus one full-precision row per iteration.
    std::string csv() const;
};

/// Pass counters proving the loss gating actually skips work.
struct TrainCounters {
    std::int64_t surrogate_passes = 0;
    std::int64_t sobel_passes = 0;
    std::int64_t iterations = 0;
};

struct TrainResult {
    LabelMap labels;
    ModelParams params;
    TrainHistory history;
    TrainCounters counters;
};

/// Per-parameter velocity buffers, slotted in declaration order.
struct SgdState {
    std::vector<std::vector<double>> velocity;

    static SgdState init(ModelParams& params);
};

/// v <- momentum*v + grad; p <- p - lr*v; gradients reset afterwards. Throws
/// NonFiniteError (before touching any parameter) if a gradient is non-finite.
void sgd_step(ModelParams& params, SgdState& state, const OptimConfig& cfg);

/// Optimizes one image from scratch: forward, argmax pseudo-labels, the
/// weighted losses, backward, SGD; pseudo-labels are recomputed every
/// iteration and one affine transform is drawn per iteration when the
/// surrogate branch is active.
TrainResult train_single_image(const Tensor& image, const ModelConfig& mcfg,
                               const OptimConfig& ocfg, const LossWeights& weights,
                               const AffineRanges& ranges = AffineRanges{});

struct AblationRow {
    LossWeights weights;
    LabelMap labels;
    TrainCounters counters;
    ImageMetrics metrics;  // meaningful only when has_metrics
    bool has_metrics = false;
};

/// Trains the four loss configurations derived from `full` — (l1,0,0),
/// (l1,l2,0), (l1,0,l3), (l1,l2,l3) — each from the identical initialization
/// seed, scoring against gt when provided.
std::vector<AblationRow> run_ablation(const Tensor& image, const Mask* gt,
                                      const ModelConfig& mcfg, const OptimConfig& ocfg,
                                      const LossWeights& full,
                                      const AffineRanges& ranges = AffineRanges{});

}  // namespace s3seg
