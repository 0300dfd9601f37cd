#include "s3seg/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

namespace s3seg {

namespace {

void require_same_size(std::int64_t h1, std::int64_t w1, std::int64_t h2, std::int64_t w2,
                       const char* what) {
    if (h1 != h2 || w1 != w2) {
        throw ShapeError(std::string(what) + ": size mismatch " + std::to_string(h1) + "x" +
                         std::to_string(w1) + " vs " + std::to_string(h2) + "x" +
                         std::to_string(w2));
    }
}

/// Row-major (r, c) pairs of mask pixels with a four-neighbor outside.
std::vector<std::pair<std::int64_t, std::int64_t>> boundary_pixels(const Mask& m) {
    std::vector<std::pair<std::int64_t, std::int64_t>> out;
    for (std::int64_t r = 0; r < m.h; ++r) {
        for (std::int64_t c = 0; c < m.w; ++c) {
            if (!m.at(r, c)) {
                continue;
            }
            const bool edge = r == 0 || r == m.h - 1 || c == 0 || c == m.w - 1 ||
                              !m.at(r - 1, c) || !m.at(r + 1, c) || !m.at(r, c - 1) ||
                              !m.at(r, c + 1);
            if (edge) {
                out.emplace_back(r, c);
            }
        }
    }
    return out;
}

/// max over a of min over b of squared distance; exact in 64-bit integers.
std::int64_t directed_sq(const std::vector<std::pair<std::int64_t, std::int64_t>>& a,
                         const std::vector<std::pair<std::int64_t, std::int64_t>>& b) {
    std::int64_t worst = 0;
    for (const auto& [ar, ac] : a) {
        std::int64_t best = std::numeric_limits<std::int64_t>::max();
        for (const auto& [br, bc] : b) {
            const std::int64_t dr = ar - br;
            const std::int64_t dc = ac - bc;
            const std::int64_t d2 = dr * dr + dc * dc;
            if (d2 < best) {
                best = d2;
            }
        }
        if (best > worst) {
            worst = best;
        }
    }
    return worst;
}

std::string full_precision(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

std::int32_t best_overlap_cluster_id(const LabelMap& pred, const Mask& gt) {
    require_same_size(pred.h, pred.w, gt.h, gt.w, "best_overlap_cluster");
    if (gt.count() == 0) {
        throw EvalError("best_overlap_cluster: ground-truth mask is empty");
    }
    // Ordered map so ascending iteration resolves overlap ties to the
    // smallest cluster id.
    std::map<std::int32_t, std::int64_t> overlap;
    for (std::int64_t i = 0; i < pred.size(); ++i) {
        auto [it, inserted] = overlap.try_emplace(pred.ids[static_cast<std::size_t>(i)], 0);
        if (gt.on[static_cast<std::size_t>(i)]) {
            ++it->second;
        }
        (void)inserted;
    }
    std::int32_t best_id = 0;
    std::int64_t best_count = -1;
    for (const auto& [id, n] : overlap) {
        if (n > best_count) {
            best_count = n;
            best_id = id;
        }
    }
    return best_id;
}

Mask best_overlap_cluster(const LabelMap& pred, const Mask& gt) {
    const std::int32_t id = best_overlap_cluster_id(pred, gt);
    Mask out(pred.h, pred.w);
    for (std::int64_t i = 0; i < pred.size(); ++i) {
        out.on[static_cast<std::size_t>(i)] =
            pred.ids[static_cast<std::size_t>(i)] == id ? 1 : 0;
    }
    return out;
}

double dsc(const Mask& pred, const Mask& gt) {
    require_same_size(pred.h, pred.w, gt.h, gt.w, "dsc");
    std::int64_t inter = 0;
    for (std::size_t i = 0; i < pred.on.size(); ++i) {
        inter += (pred.on[i] != 0 && gt.on[i] != 0) ? 1 : 0;
    }
    const std::int64_t total = pred.count() + gt.count();
    if (total == 0) {
        return 100.0;
    }
    return 100.0 * 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

double xor_metric(const Mask& pred, const Mask& gt) {
    require_same_size(pred.h, pred.w, gt.h, gt.w, "xor_metric");
    const std::int64_t g = gt.count();
    if (g == 0) {
        throw EvalError("xor_metric: ground-truth mask is empty");
    }
    std::int64_t sym = 0;
    for (std::size_t i = 0; i < pred.on.size(); ++i) {
        sym += ((pred.on[i] != 0) != (gt.on[i] != 0)) ? 1 : 0;
    }
    return 100.0 * static_cast<double>(sym) / static_cast<double>(g);
}

double hm_distance(const Mask& pred, const Mask& gt) {
    require_same_size(pred.h, pred.w, gt.h, gt.w, "hm_distance");
    if (pred.count() == 0 || gt.count() == 0) {
        throw EvalError("hm_distance: mask is empty");
    }
    const auto bp = boundary_pixels(pred);
    const auto bg = boundary_pixels(gt);
    const std::int64_t d2 = std::max(directed_sq(bp, bg), directed_sq(bg, bp));
    return std::sqrt(static_cast<double>(d2));
}

ImageMetrics evaluate_masks(const Mask& pred, const Mask& gt) {
    if (gt.count() == 0) {
        throw EvalError("evaluate: ground-truth mask is empty");
    }
    ImageMetrics m;
    m.dsc = dsc(pred, gt);
    m.xor_pct = xor_metric(pred, gt);
    if (pred.count() == 0) {
        m.hm = std::numeric_limits<double>::quiet_NaN();
        m.hm_valid = false;
    } else {
        m.hm = hm_distance(pred, gt);
        m.hm_valid = true;
    }
    return m;
}

ImageMetrics evaluate_labels(const LabelMap& pred, const Mask& gt) {
    const std::int32_t id = best_overlap_cluster_id(pred, gt);
    Mask chosen(pred.h, pred.w);
    for (std::int64_t i = 0; i < pred.size(); ++i) {
        chosen.on[static_cast<std::size_t>(i)] =
            pred.ids[static_cast<std::size_t>(i)] == id ? 1 : 0;
    }
    ImageMetrics m = evaluate_masks(chosen, gt);
    m.chosen_cluster = id;
    return m;
}

MetricsReport aggregate(std::vector<ImageMetrics> rows, std::uint64_t config_hash,
                        std::uint64_t seed) {
    if (rows.empty()) {
        throw EvalError("aggregate: no per-image metrics");
    }
    MetricsReport rep;
    rep.per_image = std::move(rows);
    rep.config_hash = config_hash;
    rep.seed = seed;
    double sd = 0.0;
    double sx = 0.0;
    double sh = 0.0;
    for (const ImageMetrics& m : rep.per_image) {
        sd += m.dsc;
        sx += m.xor_pct;
        if (m.hm_valid) {
            sh += m.hm;
            ++rep.hm_valid_count;
        }
    }
    const double n = static_cast<double>(rep.per_image.size());
    rep.mean_dsc = sd / n;
    rep.mean_xor = sx / n;
    rep.mean_hm = rep.hm_valid_count > 0 ? sh / static_cast<double>(rep.hm_valid_count)
                                         : std::numeric_limits<double>::quiet_NaN();
    return rep;
}

std::string MetricsReport::table() const {
    std::string out = "image                      cluster      DSC       HM      XOR\n";
    auto row = [&out](const std::string& id, const std::string& cluster, const std::string& d,
                      const std::string& h, const std::string& x) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-26s %7s %8s %8s %8s\n", id.c_str(), cluster.c_str(),
                      d.c_str(), h.c_str(), x.c_str());
        out += buf;
    };
    for (const ImageMetrics& m : per_image) {
        row(m.id.empty() ? "-" : m.id,
            m.chosen_cluster >= 0 ? std::to_string(m.chosen_cluster) : "-", fmt4(m.dsc),
            m.hm_valid ? fmt4(m.hm) : "na", fmt4(m.xor_pct));
    }
    row("mean", "-", fmt4(mean_dsc), hm_valid_count > 0 ? fmt4(mean_hm) : "na", fmt4(mean_xor));
    return out;
}

std::string MetricsReport::machine_records() const {
    std::string out;
    for (const ImageMetrics& m : per_image) {
        out += "image=" + (m.id.empty() ? std::string("-") : m.id);
        out += " cluster=" + std::to_string(m.chosen_cluster);
        out += " dsc=" + full_precision(m.dsc);
        out += " xor=" + full_precision(m.xor_pct);
        out += " hm=" + (m.hm_valid ? full_precision(m.hm) : std::string("na"));
        out += "\n";
    }
    char buf[240];
    std::snprintf(buf, sizeof(buf), "aggregate n=%zu dsc=%s xor=%s hm=%s hm_n=%lld config=%016llx seed=%llu\n",
                  per_image.size(), full_precision(mean_dsc).c_str(),
                  full_precision(mean_xor).c_str(),
                  hm_valid_count > 0 ? full_precision(mean_hm).c_str() : "na",
                  static_cast<long long>(hm_valid_count),
                  static_cast<unsigned long long>(config_hash),
                  static_cast<unsigned long long>(seed));
    out += buf;
    return out;
}

}  // namespace s3seg
