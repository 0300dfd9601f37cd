#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "s3seg/common.hpp"

namespace s3seg {

/// Per-image evaluation record. hm is meaningful only when hm_valid; an empty
/// prediction yields the sentinel (DSC 0, XOR 100, hm_valid false) so batch
/// evaluation never aborts.
struct ImageMetrics {
    std::string id;
    std::int32_t chosen_cluster = -1;
    double dsc = 0.0;
    double xor_pct = 0.0;
    double hm = 0.0;
    bool hm_valid = false;
};

struct MetricsReport {
    std::vector<ImageMetrics> per_image;
    double mean_dsc = 0.0;
    double mean_xor = 0.0;
    double mean_hm = 0.0;  // over hm-valid rows only
    std::int64_t hm_valid_count = 0;
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;

    /// Human-readable table, 4 significant digits, columns DSC / HM / XOR.
    std::string table() const;
    /// One full-precision line per image plus a trailing aggregate line.
    std::string machine_records() const;
};

/// Id of the predicted cluster with the largest intersection with gt; ties
/// take the smallest id. Throws EvalError on empty gt.
std::int32_t best_overlap_cluster_id(const LabelMap& pred, const Mask& gt);

/// Indicator mask of best_overlap_cluster_id.
Mask best_overlap_cluster(const LabelMap& pred, const Mask& gt);

/// 100 * 2|P&G| / (|P|+|G|); 100 when both masks are empty.
double dsc(const Mask& pred, const Mask& gt);

/// 100 * |P xor G| / |G|. Throws EvalError on empty gt.
double xor_metric(const Mask& pred, const Mask& gt);

/// Symmetric Hausdorff distance between boundary pixel sets in Euclidean
/// pixel units. Boundary: mask pixel with at least one four-neighbor outside
/// the mask (the image border counts as outside). Throws EvalError when
/// either mask is empty.
double hm_distance(const Mask& pred, const Mask& gt);

/// Metrics of a binary prediction against gt, with the empty-pred sentinel.
ImageMetrics evaluate_masks(const Mask& pred, const Mask& gt);

/// Metrics of a clustering: best-overlap cluster selection, then mask metrics.
ImageMetrics evaluate_labels(const LabelMap& pred, const Mask& gt);

/// Arithmetic means per metric; hm averaged over rows with a valid hm.
MetricsReport aggregate(std::vector<ImageMetrics> rows, std::uint64_t config_hash,
                        std::uint64_t seed);

}  // namespace s3seg
