#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "s3seg/common.hpp"

namespace s3seg {

using Shape = std::vector<std::int64_t>;

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;

    std::int64_t size() const { return static_cast<std::int64_t>(values.size()); }
    bool has_grad() const { return !grad.empty(); }
    void ensure_grad() {
        if (grad.empty()) {
            grad.assign(values.size(), 0.0);
        }
    }
};

std::shared_ptr<TensorNode> make_node(const Shape& shape);

}  // namespace detail

class Tensor;

namespace detail {

Tensor wrap_node(std::shared_ptr<TensorNode> n);

}  // namespace detail

/// Initialization spec for freshly created tensors.
struct Init {
    enum class Kind { Zeros, Ones, Constant, Uniform, KaimingFanIn };
    Kind kind = Kind::Zeros;
    double a = 0.0;
    double b = 0.0;

    static Init zeros() { return {Kind::Zeros, 0, 0}; }
    static Init ones() { return {Kind::Ones, 0, 0}; }
    static Init constant(double c) { return {Kind::Constant, c, 0}; }
    static Init uniform(double lo, double hi) { return {Kind::Uniform, lo, hi}; }
    static Init kaiming_fan_in() { return {Kind::KaimingFanIn, 0, 0}; }
};

/// Dense n-dimensional real tensor, row-major. A tensor is a cheap handle to a
/// shared node; differentiable ops attach backward steps to the active Tape.
class Tensor {
public:
    Tensor() = default;

    static Tensor create(const Shape& shape, const Init& init, std::uint64_t seed);
    static Tensor zeros(const Shape& shape);
    static Tensor ones(const Shape& shape);
    static Tensor full(const Shape& shape, double value);
    static Tensor from_values(const Shape& shape, std::vector<double> values);
    static Tensor scalar_value(double v);

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
    std::int64_t size() const { return node_->size(); }
    std::int64_t extent(std::int64_t axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }

    const std::vector<double>& values() const { return node_->values; }
    std::vector<double>& values() { return node_->values; }

    /// Gradient buffer; allocated (zero) on first access.
    const std::vector<double>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    bool has_grad() const { return node_->has_grad(); }
    void zero_grad();
    void accumulate_grad(std::span<const double> g);

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    double scalar() const;

    /// Value copy with no graph attachment and no gradient requirement.
    Tensor detach() const;

    const std::shared_ptr<detail::TensorNode>& node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::TensorNode> node_;

    friend Tensor detail::wrap_node(std::shared_ptr<detail::TensorNode> n);
};

/// Ordered record of executed differentiable operations. Constructing a Tape
/// makes it the active recording target for the current thread; destruction
/// restores the previous one. Execution order is topological by construction,
/// so backward() is a single reverse sweep that visits each recorded op once.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current();

    void record(std::shared_ptr<detail::TensorNode> output, std::function<void()> step);

    /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. Repeated
    /// calls without zeroing gradients accumulate.
    void backward(const Tensor& loss);

    void clear();
    std::size_t op_count() const { return steps_.size(); }

private:
    struct Step {
        std::shared_ptr<detail::TensorNode> output;
        std::function<void()> fn;
    };
    std::vector<Step> steps_;
    Tape* prev_ = nullptr;
};

namespace detail {

// Op support shared by the fused kernels: marks the output trainable when any
// input is, and registers the backward step with the active tape.
bool any_requires_grad(std::initializer_list<const Tensor*> inputs);
Tensor finish_op(std::shared_ptr<TensorNode> out, bool record, std::function<void()> step);

}  // namespace detail

Tensor zeros_like(const Tensor& a);

// Elementwise operators. Binary ops require equal shapes; there is no implicit
// broadcasting beyond the explicit scalar forms.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor abs(const Tensor& a);
Tensor log(const Tensor& a);
Tensor scalar_mul(const Tensor& a, double c);

// Reductions.
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, const std::vector<std::int64_t>& axes);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, const std::vector<std::int64_t>& axes);

/// Per-pixel softmax over the channel axis of an [N,K,H,W] tensor,
/// stabilized by max subtraction.
Tensor softmax_channels(const Tensor& a);

}  // namespace s3seg
