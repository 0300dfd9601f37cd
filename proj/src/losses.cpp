#include "s3seg/losses.hpp"

#include <cmath>
#include <string>

#include "s3seg/nn_ops.hpp"

namespace s3seg {

namespace {

using detail::any_requires_grad;
using detail::finish_op;
using detail::make_node;

constexpr double kProbFloor = 1e-12;

void require_pred_shape(const Tensor& s, const char* what) {
    if (s.rank() != 4 || s.extent(0) != 1) {
        throw ShapeError(std::string(what) + ": expected [1,K,H,W]");
    }
}

}  // namespace

void LossWeights::validate() const {
    if (lambda1 < 0.0 || lambda2 < 0.0 || lambda3 < 0.0) {
        throw ConfigError("LossWeights: negative weight");
    }
    if (lambda1 == 0.0 && lambda2 == 0.0 && lambda3 == 0.0) {
        throw ConfigError("LossWeights: all weights zero");
    }
}

Tensor self_label_ce(const Tensor& s, const LabelMap& y) {
    require_pred_shape(s, "self_label_ce");
    const std::int64_t k = s.extent(1);
    const std::int64_t h = s.extent(2);
    const std::int64_t w = s.extent(3);
    if (y.h != h || y.w != w) {
        throw ShapeError("self_label_ce: label map size mismatch");
    }
    const std::int64_t hw = h * w;
    const std::vector<double>& sv = s.values();

    double acc = 0.0;
    for (std::int64_t p = 0; p < hw; ++p) {
        const std::int32_t label = y.ids[static_cast<std::size_t>(p)];
        if (label < 0 || label >= k) {
            throw ContractError("self_label_ce: label " + std::to_string(label) +
                                " outside [0," + std::to_string(k) + ")");
        }
        acc += std::log(std::max(sv[static_cast<std::size_t>(label * hw + p)], kProbFloor));
    }
    auto out = make_node(Shape{});
    out->values[0] = -acc / static_cast<double>(hw);

    const bool rec = any_requires_grad({&s});
    auto sn = s.node();
    auto on = out;
    std::vector<std::int32_t> labels = y.ids;
    return finish_op(std::move(out), rec, [sn, on, labels, k, hw] {
        sn->ensure_grad();
        const double g = on->grad[0];
        const double scale = -g / static_cast<double>(hw);
        for (std::int64_t p = 0; p < hw; ++p) {
            const std::int64_t label = labels[static_cast<std::size_t>(p)];
            const std::size_t idx = static_cast<std::size_t>(label * hw + p);
            const double v = sn->values[idx];
            if (v > kProbFloor) {
                sn->grad[idx] += scale / v;
            }
            // at or below the clamp the loss is locally constant in v
        }
    });
}

EdgeMaps sobel_edges(const Tensor& s) {
    require_pred_shape(s, "sobel_edges");
    const std::int64_t k = s.extent(1);
    const std::int64_t h = s.extent(2);
    const std::int64_t w = s.extent(3);
    if (h < 3 || w < 3) {
        throw ShapeError("sobel_edges: image must be at least 3x3");
    }

    static const double gx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
    static const double gy[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
    static const double gxy[9] = {0, 1, 2, -1, 0, 1, -2, -1, 0};

    // Each kernel is applied as conv(positive taps) - conv(negative taps).
    // The negative taps mirror the positive ones, so both convolutions see
    // the same value sequence on a constant channel and the difference is a
    // bit-exact zero, which the spatial loss's constant-input contract needs.
    auto filter = [&](const double* kernel) {
        auto half = [&](bool positive) {
            std::vector<double> wv;
            wv.reserve(static_cast<std::size_t>(k * 9));
            for (std::int64_t c = 0; c < k; ++c) {
                for (int i = 0; i < 9; ++i) {
                    const double v = kernel[i];
                    wv.push_back(positive ? std::max(v, 0.0) : std::max(-v, 0.0));
                }
            }
            return Tensor::from_values({k, 1, 3, 3}, std::move(wv));
        };
        ConvSpec sp{.in_channels = k, .out_channels = k, .kernel = 3, .groups = k};
        return zero_pad2d(
            sub(conv2d(s, half(true), nullptr, sp), conv2d(s, half(false), nullptr, sp)), 1);
    };

    EdgeMaps e;
    e.ex = filter(gx);
    e.ey = filter(gy);
    e.exy = filter(gxy);
    return e;
}

Tensor spatial_consistency(const Tensor& s) {
    EdgeMaps e = sobel_edges(s);
    Tensor total = sum(add(add(abs(sub(e.ex, e.ey)), abs(sub(e.ex, e.exy))),
                           abs(sub(e.ey, e.exy))));
    const double denom =
        static_cast<double>(s.extent(1)) * static_cast<double>(s.extent(2)) *
        static_cast<double>(s.extent(3));
    return scalar_mul(total, 1.0 / denom);
}

Tensor affine_consistency(const Tensor& s_aux, const LabelMap& y_a, const Mask& valid) {
    require_pred_shape(s_aux, "affine_consistency");
    const std::int64_t k = s_aux.extent(1);
    const std::int64_t h = s_aux.extent(2);
    const std::int64_t w = s_aux.extent(3);
    if (y_a.h != h || y_a.w != w || valid.h != h || valid.w != w) {
        throw ShapeError("affine_consistency: size mismatch");
    }
    const std::int64_t hw = h * w;
    const std::int64_t m = valid.count();
    if (m == 0) {
        throw DegenerateTransformError("affine_consistency: no valid pixels to compare");
    }
    const std::vector<double>& sv = s_aux.values();

    double acc = 0.0;
    for (std::int64_t p = 0; p < hw; ++p) {
        if (valid.on[static_cast<std::size_t>(p)] == 0) {
            continue;
        }
        const std::int32_t label = y_a.ids[static_cast<std::size_t>(p)];
        if (label < 0 || label >= k) {
            throw ContractError("affine_consistency: valid pixel carries label " +
                                std::to_string(label));
        }
        acc += std::log(std::max(sv[static_cast<std::size_t>(label * hw + p)], kProbFloor));
    }
    auto out = make_node(Shape{});
    out->values[0] = -acc / static_cast<double>(m);

    const bool rec = any_requires_grad({&s_aux});
    auto sn = s_aux.node();
    auto on = out;
    std::vector<std::int32_t> labels = y_a.ids;
    std::vector<std::uint8_t> mask = valid.on;
    return finish_op(std::move(out), rec, [sn, on, labels, mask, hw, m] {
        sn->ensure_grad();
        const double scale = -on->grad[0] / static_cast<double>(m);
        for (std::int64_t p = 0; p < hw; ++p) {
            if (mask[static_cast<std::size_t>(p)] == 0) {
                continue;
            }
            const std::int64_t label = labels[static_cast<std::size_t>(p)];
            const std::size_t idx = static_cast<std::size_t>(label * hw + p);
            const double v = sn->values[idx];
            if (v > kProbFloor) {
                sn->grad[idx] += scale / v;
            }
        }
    });
}

Tensor joint(const Tensor& l_ce, const Tensor& l_at, const Tensor& l_s, const LossWeights& w) {
    w.validate();
    if (l_ce.size() != 1 || l_at.size() != 1 || l_s.size() != 1) {
        throw ShapeError("joint: loss terms must be scalars");
    }
    return add(add(scalar_mul(l_ce, w.lambda1), scalar_mul(l_at, w.lambda2)),
               scalar_mul(l_s, w.lambda3));
}

}  // namespace s3seg
