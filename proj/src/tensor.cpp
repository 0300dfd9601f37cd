#include "s3seg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace s3seg {

namespace {

thread_local Tape* g_tape = nullptr;

std::int64_t shape_size(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t e : shape) {
        if (e <= 0) {
            throw ShapeError("tensor extent must be positive, got " + std::to_string(e));
        }
        n *= e;
    }
    return n;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": operand shapes differ");
    }
}

}  // namespace

namespace detail {

std::shared_ptr<TensorNode> make_node(const Shape& shape) {
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->values.assign(static_cast<std::size_t>(shape_size(shape)), 0.0);
    return n;
}

Tensor wrap_node(std::shared_ptr<TensorNode> n) { return Tensor(std::move(n)); }

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

Tensor finish_op(std::shared_ptr<TensorNode> out, bool record, std::function<void()> step) {
    out->requires_grad = record;
    Tensor result = wrap_node(std::move(out));
    if (record && Tape::current() != nullptr) {
        Tape::current()->record(result.node(), std::move(step));
    }
    return result;
}

}  // namespace detail

namespace {

using detail::any_requires_grad;
using detail::finish_op;
using detail::make_node;

}  // namespace

Tensor Tensor::create(const Shape& shape, const Init& init, std::uint64_t seed) {
    auto node = make_node(shape);
    switch (init.kind) {
        case Init::Kind::Zeros:
            break;
        case Init::Kind::Ones:
            std::fill(node->values.begin(), node->values.end(), 1.0);
            break;
        case Init::Kind::Constant:
            std::fill(node->values.begin(), node->values.end(), init.a);
            break;
        case Init::Kind::Uniform: {
            Rng rng(seed);
            for (double& v : node->values) {
                v = rng.uniform(init.a, init.b);
            }
            break;
        }
        case Init::Kind::KaimingFanIn: {
            if (shape.empty()) {
                throw ShapeError("kaiming init needs rank >= 1");
            }
            const double fan_in =
                static_cast<double>(shape_size(shape)) / static_cast<double>(shape[0]);
            const double bound = std::sqrt(6.0 / fan_in);
            Rng rng(seed);
            for (double& v : node->values) {
                v = rng.uniform(-bound, bound);
            }
            break;
        }
    }
    return Tensor(std::move(node));
}

Tensor Tensor::zeros(const Shape& shape) { return create(shape, Init::zeros(), 0); }

Tensor Tensor::ones(const Shape& shape) { return create(shape, Init::ones(), 0); }

Tensor Tensor::full(const Shape& shape, double value) {
    return create(shape, Init::constant(value), 0);
}

Tensor Tensor::from_values(const Shape& shape, std::vector<double> values) {
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = shape;
    const std::int64_t n = shape_size(shape);
    if (n != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("from_values: " + std::to_string(values.size()) +
                         " values for shape of size " + std::to_string(n));
    }
    node->values = std::move(values);
    return Tensor(std::move(node));
}

Tensor Tensor::scalar_value(double v) { return from_values({}, {v}); }

void Tensor::zero_grad() {
    if (node_->has_grad()) {
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }
}

void Tensor::accumulate_grad(std::span<const double> g) {
    if (static_cast<std::int64_t>(g.size()) != size()) {
        throw ShapeError("accumulate_grad: size mismatch");
    }
    node_->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
        node_->grad[i] += g[i];
    }
}

double Tensor::scalar() const {
    if (size() != 1) {
        throw ShapeError("scalar(): tensor has " + std::to_string(size()) + " elements");
    }
    return node_->values[0];
}

Tensor Tensor::detach() const {
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = node_->shape;
    node->values = node_->values;
    node->requires_grad = false;
    return Tensor(std::move(node));
}

Tape::Tape() {
    prev_ = g_tape;
    g_tape = this;
}

Tape::~Tape() { g_tape = prev_; }

Tape* Tape::current() { return g_tape; }

void Tape::record(std::shared_ptr<detail::TensorNode> output, std::function<void()> step) {
    steps_.push_back({std::move(output), std::move(step)});
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw ContractError("backward: loss must be a scalar");
    }
    if (steps_.empty() || steps_.back().output != loss.node()) {
        // The loss must be the most recent recorded op of this tape; anything
        // else indicates it was built outside the tape or stale.
        bool found = false;
        for (const Step& s : steps_) {
            if (s.output == loss.node()) {
                found = true;
                break;
            }
        }
        if (!found) {
            throw ContractError("backward: loss was not recorded on this tape");
        }
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) {
        if (!it->output->has_grad()) {
            continue;  // nothing downstream used this op's output
        }
        it->fn();
    }
}

void Tape::clear() { steps_.clear(); }

Tensor zeros_like(const Tensor& a) { return Tensor::zeros(a.shape()); }

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    auto out = make_node(a.shape());
    const std::size_t n = out->values.size();
    for (std::size_t i = 0; i < n; ++i) {
        out->values[i] = a.values()[i] + b.values()[i];
    }
    const bool rec = any_requires_grad({&a, &b});
    auto an = a.node();
    auto bn = b.node();
    auto on = out;
    return finish_op(std::move(out), rec, [an, bn, on] {
        const std::vector<double>& g = on->grad;
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                an->grad[i] += g[i];
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                bn->grad[i] += g[i];
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    auto out = make_node(a.shape());
    const std::size_t n = out->values.size();
    for (std::size_t i = 0; i < n; ++i) {
        out->values[i] = a.values()[i] - b.values()[i];
    }
    const bool rec = any_requires_grad({&a, &b});
    auto an = a.node();
    auto bn = b.node();
    auto on = out;
    return finish_op(std::move(out), rec, [an, bn, on] {
        const std::vector<double>& g = on->grad;
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                an->grad[i] += g[i];
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                bn->grad[i] -= g[i];
            }
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    auto out = make_node(a.shape());
    const std::size_t n = out->values.size();
    for (std::size_t i = 0; i < n; ++i) {
        out->values[i] = a.values()[i] * b.values()[i];
    }
    const bool rec = any_requires_grad({&a, &b});
    auto an = a.node();
    auto bn = b.node();
    auto on = out;
    return finish_op(std::move(out), rec, [an, bn, on] {
        const std::vector<double>& g = on->grad;
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                an->grad[i] += g[i] * bn->values[i];
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                bn->grad[i] += g[i] * an->values[i];
            }
        }
    });
}

Tensor abs(const Tensor& a) {
    auto out = make_node(a.shape());
    const std::size_t n = out->values.size();
    for (std::size_t i = 0; i < n; ++i) {
        out->values[i] = std::abs(a.values()[i]);
    }
    const bool rec = any_requires_grad({&a});
    auto an = a.node();
    auto on = out;
    // Subgradient 0 at exactly 0.
    return finish_op(std::move(out), rec, [an, on] {
        an->ensure_grad();
        const std::vector<double>& g = on->grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = an->values[i];
            if (x > 0.0) {
                an->grad[i] += g[i];
            } else if (x < 0.0) {
                an->grad[i] -= g[i];
            }
        }
    });
}

Tensor log(const Tensor& a) {
    auto out = make_node(a.shape());
    const std::size_t n = out->values.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double x = a.values()[i];
        if (x <= 0.0) {
            throw DomainError("log: non-positive input " + std::to_string(x));
        }
        out->values[i] = std::log(x);
    }
    const bool rec = any_requires_grad({&a});
    auto an = a.node();
    auto on = out;
    return finish_op(std::move(out), rec, [an, on] {
        an->ensure_grad();
        const std::vector<double>& g = on->grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            an->grad[i] += g[i] / an->values[i];
        }
    });
}

Tensor scalar_mul(const Tensor& a, double c) {
    auto out = make_node(a.shape());
    const std::size_t n = out->values.size();
    for (std::size_t i = 0; i < n; ++i) {
        out->values[i] = c * a.values()[i];
    }
    const bool rec = any_requires_grad({&a});
    auto an = a.node();
    auto on = out;
    return finish_op(std::move(out), rec, [an, on, c] {
        an->ensure_grad();
        const std::vector<double>& g = on->grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            an->grad[i] += c * g[i];
        }
    });
}

Tensor sum(const Tensor& a) {
    auto out = make_node(Shape{});
    double s = 0.0;
    for (double v : a.values()) {
        s += v;
    }
    out->values[0] = s;
    const bool rec = any_requires_grad({&a});
    auto an = a.node();
    auto on = out;
    return finish_op(std::move(out), rec, [an, on] {
        an->ensure_grad();
        const double g = on->grad[0];
        for (double& gi : an->grad) {
            gi += g;
        }
    });
}

Tensor mean(const Tensor& a) {
    Tensor s = sum(a);
    return scalar_mul(s, 1.0 / static_cast<double>(a.size()));
}

namespace {

// Reduction over a sorted unique axis set: output drops the reduced axes.
// Returns per-input-axis output strides (0 where reduced).
struct ReducePlan {
    Shape out_shape;
    std::vector<std::int64_t> out_stride_of_axis;
};

ReducePlan plan_reduce(const Shape& in_shape, const std::vector<std::int64_t>& axes) {
    const std::int64_t rank = static_cast<std::int64_t>(in_shape.size());
    std::vector<bool> reduced(static_cast<std::size_t>(rank), false);
    for (std::int64_t ax : axes) {
        if (ax < 0 || ax >= rank) {
            throw ShapeError("reduce: axis " + std::to_string(ax) + " out of range for rank " +
                             std::to_string(rank));
        }
        if (reduced[static_cast<std::size_t>(ax)]) {
            throw ShapeError("reduce: duplicate axis " + std::to_string(ax));
        }
        reduced[static_cast<std::size_t>(ax)] = true;
    }
    ReducePlan plan;
    for (std::int64_t i = 0; i < rank; ++i) {
        if (!reduced[static_cast<std::size_t>(i)]) {
            plan.out_shape.push_back(in_shape[static_cast<std::size_t>(i)]);
        }
    }
    plan.out_stride_of_axis.assign(static_cast<std::size_t>(rank), 0);
    std::int64_t stride = 1;
    for (std::int64_t i = rank - 1; i >= 0; --i) {
        if (!reduced[static_cast<std::size_t>(i)]) {
            plan.out_stride_of_axis[static_cast<std::size_t>(i)] = stride;
            stride *= in_shape[static_cast<std::size_t>(i)];
        }
    }
    return plan;
}

// Walks every input element once, tracking the matching output offset via an
// odometer over the input shape.
template <typename Fn>
void for_each_mapped(const Shape& in_shape, const std::vector<std::int64_t>& out_stride_of_axis,
                     Fn&& fn) {
    const std::int64_t rank = static_cast<std::int64_t>(in_shape.size());
    const std::int64_t n = shape_size(in_shape);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(rank), 0);
    std::int64_t out_off = 0;
    for (std::int64_t lin = 0; lin < n; ++lin) {
        fn(lin, out_off);
        for (std::int64_t i = rank - 1; i >= 0; --i) {
            const std::size_t ui = static_cast<std::size_t>(i);
            ++idx[ui];
            out_off += out_stride_of_axis[ui];
            if (idx[ui] < in_shape[ui]) {
                break;
            }
            out_off -= in_shape[ui] * out_stride_of_axis[ui];
            idx[ui] = 0;
        }
    }
}

}  // namespace

Tensor sum(const Tensor& a, const std::vector<std::int64_t>& axes) {
    if (axes.empty()) {
        return sum(a);
    }
    ReducePlan plan = plan_reduce(a.shape(), axes);
    auto out = make_node(plan.out_shape);
    const std::vector<double>& av = a.values();
    for_each_mapped(a.shape(), plan.out_stride_of_axis,
                    [&](std::int64_t lin, std::int64_t out_off) {
                        out->values[static_cast<std::size_t>(out_off)] +=
                            av[static_cast<std::size_t>(lin)];
                    });
    const bool rec = any_requires_grad({&a});
    auto an = a.node();
    auto on = out;
    Shape in_shape = a.shape();
    auto strides = plan.out_stride_of_axis;
    return finish_op(std::move(out), rec, [an, on, in_shape, strides] {
        an->ensure_grad();
        for_each_mapped(in_shape, strides, [&](std::int64_t lin, std::int64_t out_off) {
            an->grad[static_cast<std::size_t>(lin)] +=
                on->grad[static_cast<std::size_t>(out_off)];
        });
    });
}

Tensor mean(const Tensor& a, const std::vector<std::int64_t>& axes) {
    if (axes.empty()) {
        return mean(a);
    }
    Tensor s = sum(a, axes);
    const double denom = static_cast<double>(a.size()) / static_cast<double>(s.size());
    return scalar_mul(s, 1.0 / denom);
}

Tensor softmax_channels(const Tensor& a) {
    if (a.rank() != 4) {
        throw ShapeError("softmax_channels: expected [N,K,H,W], got rank " +
                         std::to_string(a.rank()));
    }
    const std::int64_t n = a.extent(0);
    const std::int64_t k = a.extent(1);
    const std::int64_t hw = a.extent(2) * a.extent(3);
    auto out = make_node(a.shape());
    const std::vector<double>& av = a.values();
    for (std::int64_t img = 0; img < n; ++img) {
        const std::int64_t base = img * k * hw;
        for (std::int64_t p = 0; p < hw; ++p) {
            double mx = av[static_cast<std::size_t>(base + p)];
            for (std::int64_t c = 1; c < k; ++c) {
                mx = std::max(mx, av[static_cast<std::size_t>(base + c * hw + p)]);
            }
            double z = 0.0;
            for (std::int64_t c = 0; c < k; ++c) {
                const double e = std::exp(av[static_cast<std::size_t>(base + c * hw + p)] - mx);
                out->values[static_cast<std::size_t>(base + c * hw + p)] = e;
                z += e;
            }
            for (std::int64_t c = 0; c < k; ++c) {
                out->values[static_cast<std::size_t>(base + c * hw + p)] /= z;
            }
        }
    }
    const bool rec = any_requires_grad({&a});
    auto an = a.node();
    auto on = out;
    return finish_op(std::move(out), rec, [an, on, n, k, hw] {
        an->ensure_grad();
        // d logit_c = s_c * (g_c - sum_j g_j s_j) per pixel
        for (std::int64_t img = 0; img < n; ++img) {
            const std::int64_t base = img * k * hw;
            for (std::int64_t p = 0; p < hw; ++p) {
                double dot = 0.0;
                for (std::int64_t c = 0; c < k; ++c) {
                    const std::size_t i = static_cast<std::size_t>(base + c * hw + p);
                    dot += on->grad[i] * on->values[i];
                }
                for (std::int64_t c = 0; c < k; ++c) {
                    const std::size_t i = static_cast<std::size_t>(base + c * hw + p);
                    an->grad[i] += on->values[i] * (on->grad[i] - dot);
                }
            }
        }
    });
}

}  // namespace s3seg
