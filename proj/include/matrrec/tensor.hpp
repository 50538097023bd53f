#ifndef MATRREC_TENSOR_HPP
#define MATRREC_TENSOR_HPP

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace matrrec {

using Shape = std::vector<std::size_t>;

/// Raised when operand extents are incompatible.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a caller breaks an operation's precondition.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Raised when values overflow or underflow out of an operation's domain.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised for invalid hyperparameters or flags.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {
inline std::uint64_t next_serial() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

/// Disables graph recording on this thread for its lifetime (evaluation passes).
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// One value in the computation graph. Inputs are always created before
/// their consumers, so `serial` is a valid topological key.
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_rule;
    std::uint64_t serial = detail::next_serial();

    /// Grad buffer for accumulation, or nullptr if this node is not tracked.
    T* grad_buffer() {
        if (!requires_grad) return nullptr;
        if (grad.empty()) grad.assign(value.size(), T{0});
        return grad.data();
    }
};

/// Dense row-major array participating in reverse-mode differentiation.
/// Precision is the template argument: double in tests, float in training.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        for (auto extent : shape) {
            if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
        }
        if (numel_of(shape) != values.size()) {
            throw DimensionError("tensor data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
    }

    static Tensor full(Shape shape, T fill, bool requires_grad = false) {
        auto n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<T>(n, fill), requires_grad);
    }

    static Tensor scalar(T v, bool requires_grad = false) { return Tensor(Shape{}, {v}, requires_grad); }

    static Tensor from_node(std::shared_ptr<Node<T>> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const T> values() const { return node_->value; }
    /// Direct write access, reserved for leaves (parameter updates, test perturbation).
    std::span<T> mutable_values() { return node_->value; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() {
        node_->grad_buffer();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T{0});
    }

    T item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    T operator[](std::size_t i) const { return node_->value[i]; }

    /// Fresh leaf holding a copy of the values, detached from any graph.
    Tensor detached_copy(bool requires_grad = false) const {
        return Tensor(shape(), node_->value, requires_grad);
    }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Builds an op result. Graph edges are recorded only when some input is tracked.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, std::vector<Tensor<T>> const& inputs,
                      std::function<void(Node<T>&)> rule) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    bool tracked = detail::grad_mode() && std::any_of(inputs.begin(), inputs.end(),
                                                      [](const Tensor<T>& t) { return t.requires_grad(); });
    if (tracked) {
        node->requires_grad = true;
        for (const auto& t : inputs) node->inputs.push_back(t.node());
        node->backward_rule = std::move(rule);
    }
    return Tensor<T>::from_node(std::move(node));
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t, bool requires_grad = false) {
    std::vector<To> out(t.values().begin(), t.values().end());
    return Tensor<To>(t.shape(), std::move(out), requires_grad);
}

}  // namespace matrrec

#endif  // MATRREC_TENSOR_HPP
