#include "s3seg/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <utility>

namespace s3seg {

void OptimConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) {
        throw ConfigError("OptimConfig: lr must be positive and finite");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
        throw ConfigError("OptimConfig: momentum must be in [0,1)");
    }
    if (max_iterations < 1) {
        throw ConfigError("OptimConfig: max_iterations must be >= 1");
    }
    if (min_cluster_stop < 0) {
        throw ConfigError("OptimConfig: min_cluster_stop must be >= 0");
    }
}

SgdState SgdState::init(ModelParams& params) {
    SgdState s;
    params.for_each([&s](const std::string&, Tensor& t) {
        s.velocity.emplace_back(static_cast<std::size_t>(t.size()), 0.0);
    });
    return s;
}

void sgd_step(ModelParams& params, SgdState& state, const OptimConfig& cfg) {
    cfg.validate();
    // Validate every gradient before mutating anything so a bad step leaves
    // the parameters untouched.
    params.for_each([](const std::string& name, Tensor& t) {
        if (!t.has_grad()) {
            return;
        }
        for (double g : t.grad()) {
            if (!std::isfinite(g)) {
                throw NonFiniteError("sgd_step: non-finite gradient in " + name);
            }
        }
    });

    std::size_t slot = 0;
    params.for_each([&](const std::string& name, Tensor& t) {
        if (slot >= state.velocity.size()) {
            throw ContractError("sgd_step: velocity state does not match parameters");
        }
        std::vector<double>& v = state.velocity[slot];
        if (v.size() != t.values().size()) {
            throw ContractError("sgd_step: velocity size mismatch for " + name);
        }
        const bool has_g = t.has_grad();
        const std::vector<double>* g = has_g ? &t.grad() : nullptr;
        std::vector<double>& p = t.values();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = has_g ? (*g)[i] : 0.0;
            v[i] = cfg.momentum * v[i] + gi;
            p[i] -= cfg.lr * v[i];
        }
        if (has_g) {
            t.zero_grad();
        }
        ++slot;
    });
}

TrainResult train_single_image(const Tensor& image, const ModelConfig& mcfg,
                               const OptimConfig& ocfg, const LossWeights& weights,
                               const AffineRanges& ranges) {
    mcfg.validate();
    ocfg.validate();
    weights.validate();
    ranges.validate();
    if (image.rank() != 4) {
        throw ShapeError("train_single_image: image must be [1,Cin,H,W]");
    }
    const std::int64_t h = image.extent(2);
    const std::int64_t w = image.extent(3);

    ModelParams params = ModelParams::init(mcfg);
    SgdState state = SgdState::init(params);
    Rng rng(ocfg.seed);
    TrainHistory history;
    TrainCounters counters;

    for (std::int64_t iter = 0; iter < ocfg.max_iterations; ++iter) {
        Tape tape;
        ForwardResult r = forward(image, params);
        const LabelMap y = argmax_labels(r.s_main);

        Tensor l_ce = self_label_ce(r.s_main, y);
        Tensor l_s = Tensor::scalar_value(0.0);
        if (weights.lambda3 > 0.0) {
            l_s = spatial_consistency(r.s_main);
            ++counters.sobel_passes;
        }
        Tensor l_at = Tensor::scalar_value(0.0);
        AffineParams ap = AffineParams::identity();
        if (weights.lambda2 > 0.0) {
            ap = sample_affine(rng, ranges);
            const GridWithMask g = affine_grid(ap, h, w);
            Tensor s_aux = surrogate_forward(r.features, g.grid, params);
            ++counters.surrogate_passes;
            const LabelMap ya = warp_labels(y, g.grid, g.valid);
            l_at = affine_consistency(s_aux, ya, g.valid);
        }
        Tensor l_joint = joint(l_ce, l_at, l_s, weights);

        IterationRecord rec;
        rec.iteration = iter;
        rec.l_ce = l_ce.scalar();
        rec.l_at = l_at.scalar();
        rec.l_s = l_s.scalar();
        rec.l_joint = l_joint.scalar();
        rec.unique_clusters = y.unique_count();
        rec.affine = ap;
        if (!std::isfinite(rec.l_joint) || !std::isfinite(rec.l_ce) ||
            !std::isfinite(rec.l_at) || !std::isfinite(rec.l_s)) {
            throw NonFiniteError("train_single_image: non-finite loss at iteration " +
                                 std::to_string(iter));
        }

        tape.backward(l_joint);
        sgd_step(params, state, ocfg);
        history.records.push_back(rec);
        ++counters.iterations;
        if (ocfg.min_cluster_stop > 0 && rec.unique_clusters < ocfg.min_cluster_stop) {
            break;
        }
    }

    // Final labels come from an update-free pass over the trained weights.
    ForwardResult final_r = forward(image, params);
    TrainResult out;
    out.labels = argmax_labels(final_r.s_main);
    out.params = std::move(params);
    out.history = std::move(history);
    out.counters = counters;
    return out;
}

std::string TrainHistory::csv() const {
    std::string out = "iteration,L_ce,L_AT,L_S,L_joint,unique_clusters\n";
    for (const IterationRecord& r : records) {
        char buf[192];
        std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g,%lld\n",
                      static_cast<long long>(r.iteration), r.l_ce, r.l_at, r.l_s, r.l_joint,
                      static_cast<long long>(r.unique_clusters));
        out += buf;
    }
    return out;
}

std::vector<AblationRow> run_ablation(const Tensor& image, const Mask* gt,
                                      const ModelConfig& mcfg, const OptimConfig& ocfg,
                                      const LossWeights& full,
                                      const AffineRanges& ranges) {
    full.validate();
    const LossWeights presets[4] = {
        {full.lambda1, 0.0, 0.0},
        {full.lambda1, full.lambda2, 0.0},
        {full.lambda1, 0.0, full.lambda3},
        {full.lambda1, full.lambda2, full.lambda3},
    };
    std::vector<AblationRow> rows;
    rows.reserve(4);
    for (const LossWeights& preset : presets) {
        TrainResult tr = train_single_image(image, mcfg, ocfg, preset, ranges);
        AblationRow row;
        row.weights = preset;
        row.labels = std::move(tr.labels);
        row.counters = tr.counters;
        if (gt != nullptr) {
            row.metrics = evaluate_labels(row.labels, *gt);
            row.has_metrics = true;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace s3seg
