#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "zsdfa/errors.hpp"

namespace zsdfa {

enum class DType { f32, f64 };

template <typename T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

template <typename T>
struct TensorNode {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a backward pass touches this node
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
};

/// Value-semantics handle to an n-dimensional row-major array. Data is treated
/// as immutable once the tensor participates in a taped computation; raw() is
/// for initialization and optimizer updates between steps.
template <typename T>
class Tensor {
public:
    using Node = TensorNode<T>;

    Tensor() : node_(std::make_shared<Node>()) {}

    static std::size_t count(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d <= 0)
                throw ShapeError("non-positive dimension in shape " + shape_str(shape));
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    static Tensor zeros(std::vector<int> shape) {
        Tensor t;
        t.node_->data.assign(count(shape), T(0));
        t.node_->shape = std::move(shape);
        return t;
    }

    static Tensor full(std::vector<int> shape, T value) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.node_->data) v = value;
        return t;
    }

    static Tensor from(std::vector<int> shape, std::vector<T> values) {
        if (count(shape) != values.size())
            throw ShapeError("shape " + shape_str(shape) + " expects " +
                             std::to_string(count(shape)) + " values, got " +
                             std::to_string(values.size()));
        Tensor t;
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(values);
        return t;
    }

    static Tensor scalar(T value) { return from({1}, {value}); }

    const std::vector<int>& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
    std::size_t size() const { return node_->data.size(); }
    DType dtype() const { return dtype_of<T>(); }

    std::span<const T> data() const { return node_->data; }
    std::span<T> raw() { return node_->data; }
    T at(std::size_t i) const { return node_->data.at(i); }

    T value() const {
        if (size() != 1)
            throw ContractError("expected a scalar tensor, got shape " + shape_str(shape()));
        return node_->data[0];
    }

    Tensor& set_requires_grad(bool b = true) {
        node_->requires_grad = b;
        return *this;
    }
    bool requires_grad() const { return node_->requires_grad; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const {
        if (!has_grad())
            throw ContractError("tensor has no gradient; run backward() first");
        return node_->grad;
    }
    std::span<T> grad_raw() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        for (auto& g : node_->grad) g = T(0);
    }
    void drop_grad() { node_->grad.clear(); }

    std::shared_ptr<Node> node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Records one backward rule per forward operation, in execution order (which
/// is a topological order by construction). backward() replays the rules
/// exactly once, in reverse, then the tape is consumed until reset().
/// Single-threaded: one training step runs on one thread.
template <typename T>
class Tape {
public:
    Tape() {
        if (active_)
            throw ContractError("a tape is already active on this thread");
        active_ = this;
    }
    ~Tape() {
        if (active_ == this) active_ = nullptr;
    }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    void record(std::function<void()> step) { steps_.push_back(std::move(step)); }
    std::size_t node_count() const { return steps_.size(); }
    bool consumed() const { return consumed_; }

    void reset() {
        steps_.clear();
        consumed_ = false;
    }

    /// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    /// gradient-tracked node reachable from the loss.
    void backward(const Tensor<T>& loss) {
        if (loss.size() != 1)
            throw ContractError("backward requires a scalar loss, got shape " +
                                shape_str(loss.shape()));
        if (consumed_)
            throw ContractError("tape already consumed; call reset() before reuse");
        if (!loss.requires_grad())
            throw ContractError("loss does not depend on any gradient-tracked tensor");
        loss.node()->grad.assign(1, T(1));
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
        steps_.clear();
        consumed_ = true;
    }

private:
    inline static thread_local Tape* active_ = nullptr;
    std::vector<std::function<void()>> steps_;
    bool consumed_ = false;
};

// Debug builds scan every op output for NaN/Inf.
#if !defined(ZSDFA_CHECK_FINITE) && !defined(NDEBUG)
#define ZSDFA_CHECK_FINITE 1
#endif

namespace detail {

template <typename T>
inline bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
    if (!Tape<T>::active()) return false;
    for (const auto* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
#ifdef ZSDFA_CHECK_FINITE
    const auto d = t.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!std::isfinite(d[i]))
            throw NumericError(std::string(op) + " produced a non-finite value at index " +
                               std::to_string(i));
    }
#else
    (void)t;
    (void)op;
#endif
}

} // namespace detail

} // namespace zsdfa
