#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fedlora/common.hpp"

namespace fedlora::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += "]";
    return out;
}

class Tape;

namespace detail {
struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // lazily allocated, same length as value once present
    bool requires_grad = false;
    Tape* tape = nullptr;
};
}  // namespace detail

// Value-semantics handle to a dense double tensor. Copies share storage;
// use detached() for an independent constant snapshot.
class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Shape shape, std::vector<double> value) {
        return make(std::move(shape), std::move(value), false, nullptr);
    }

    static Tensor zeros(Shape shape) {
        std::size_t n = shape_numel(shape);
        return make(std::move(shape), std::vector<double>(n, 0.0), false, nullptr);
    }

    static Tensor full(Shape shape, double v) {
        std::size_t n = shape_numel(shape);
        return make(std::move(shape), std::vector<double>(n, v), false, nullptr);
    }

    static Tensor scalar(double v) { return constant({}, {v}); }

    // Trainable leaf registered with an engine tape.
    static Tensor param(Tape& tape, Shape shape, std::vector<double> value) {
        return make(std::move(shape), std::move(value), true, &tape);
    }

    // Internal factory used by the operator library.
    static Tensor make(Shape shape, std::vector<double> value, bool requires_grad, Tape* tape) {
        if (shape_numel(shape) != value.size())
            throw ContractError("tensor: shape " + shape_str(shape) + " does not match data length " +
                                std::to_string(value.size()));
        for (double v : value)
            if (!std::isfinite(v)) throw NumericError("tensor: non-finite value");
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(value);
        t.node_->requires_grad = requires_grad;
        t.node_->tape = tape;
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t numel() const { return node_->value.size(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tape* tape() const { return node_ ? node_->tape : nullptr; }

    const std::vector<double>& data() const { return node_->value; }
    std::vector<double>& mutable_data() { return node_->value; }

    double item() const {
        if (numel() != 1) throw ContractError("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
        return node_->value[0];
    }

    bool has_grad() const { return node_ && !node_->grad.empty(); }

    // Read-only view; empty if no gradient was ever accumulated.
    const std::vector<double>& grad() const { return node_->grad; }

    // Allocates (zero-filled) on first touch.
    std::vector<double>& grad_buffer() {
        if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
        return node_->grad;
    }

    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

    // Constant deep copy, detached from any tape.
    Tensor detached() const { return make(node_->shape, node_->value, false, nullptr); }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// Dynamic tape: records backward closures in forward order and replays them
// reversed. Rebuilt on every forward pass; cleared by backward().
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> fn) { records_.push_back(std::move(fn)); }

    bool recording() const { return enabled_; }
    std::size_t size() const { return records_.size(); }
    void clear() { records_.clear(); }

    // Seeds d(root)/d(root) = 1 and accumulates into every requires_grad leaf
    // reachable from root. The tape is cleared afterwards.
    void backward(const Tensor& root) {
        if (!root.defined()) throw ContractError("backward: undefined root");
        if (root.numel() != 1)
            throw ContractError("backward: root must be scalar, got shape " + shape_str(root.shape()));
        if (root.requires_grad()) {
            Tensor r = root;
            r.grad_buffer()[0] += 1.0;
        }
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
        clear();
    }

private:
    std::vector<std::function<void()>> records_;
    bool enabled_ = true;
    friend class NoGradScope;
};

// RAII guard: while alive, ops on this tape compute values only.
class NoGradScope {
public:
    explicit NoGradScope(Tape& tape) : tape_(tape), prev_(tape.enabled_) { tape_.enabled_ = false; }
    ~NoGradScope() { tape_.enabled_ = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape& tape_;
    bool prev_;
};

}  // namespace fedlora::ad
