// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vibvit/errors.hpp"
#include "vibvit/tensor.hpp"

namespace vibvit {

/// A named learnable tensor with its gradient accumulator.
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool decay_exempt = false;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v, bool exempt)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()), decay_exempt(exempt) {}

    void zero_grad() {
        if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
        grad.fill(T{0});
    }
};

template <class T>
class Tape;

/// Handle to a value recorded on a tape.
template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const { return tape->value(*this); }
    const Shape& shape() const { return value().shape(); }
};

/// Define-by-run record of primitive operations. Nodes are appended in
/// evaluation order, so every node's inputs precede it and a reverse sweep
/// is a valid topological traversal.
template <class T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}, nullptr); }

    Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
        return push(std::move(value), requires_grad, {}, nullptr);
    }

    /// Leaf bound to a model parameter; accumulate_param_grads() adds its
    /// gradient back into the parameter.
    Var<T> param(Parameter<T>& p) {
        Var<T> v = push(p.value, true, {}, nullptr);
        nodes_[v.id].param = &p;
        return v;
    }

    /// Append an operation result. `fn` is kept only when some input needs a gradient.
    Var<T> record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
        bool rg = false;
        for (std::size_t in : inputs) rg = rg || nodes_[in].requires_grad;
        return push(std::move(value), rg, std::move(inputs), rg ? std::move(fn) : BackwardFn{});
    }

    const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
    const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }
    const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }

    bool has_grad(Var<T> v) const { return nodes_.at(v.id).grad.has_value(); }

    /// Gradient of the last backward() loss w.r.t. `v`; zeros if unreachable.
    Tensor<T> grad(Var<T> v) const {
        const Node& n = nodes_.at(v.id);
        return n.grad ? *n.grad : Tensor<T>(n.value.shape());
    }

    /// Mutable gradient buffer, zero-initialized on first access.
    Tensor<T>& grad_ref(std::size_t id) {
        Node& n = nodes_[id];
        if (!n.grad) n.grad.emplace(n.value.shape());
        return *n.grad;
    }

    const Tensor<T>* grad_if(std::size_t id) const {
        const Node& n = nodes_[id];
        return n.grad ? &*n.grad : nullptr;
    }

    void backward(Var<T> loss) {
        if (loss.tape != this) throw UsageError("backward: loss recorded on a different tape");
        const Node& root = nodes_.at(loss.id);
        if (root.value.size() != 1) {
            throw UsageError("backward: loss must be scalar, got shape " + shape_str(root.value.shape()));
        }
        for (Node& n : nodes_) n.grad.reset();
        if (!root.requires_grad) return;
        grad_ref(loss.id).fill(T{1});
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.grad || !n.backward) continue;
            n.backward(*this, i);
        }
    }

    void accumulate_param_grads() {
        for (Node& n : nodes_) {
            if (!n.param || !n.grad) continue;
            Tensor<T>& dst = n.param->grad;
            if (dst.shape() != n.value.shape()) dst = Tensor<T>(n.value.shape());
            const auto& src = *n.grad;
            for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
        }
    }

private:
    struct Node {
        Tensor<T> value;
        std::optional<Tensor<T>> grad;
        bool requires_grad = false;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        Parameter<T>* param = nullptr;
    };

    Var<T> push(Tensor<T> value, bool rg, std::vector<std::size_t> inputs, BackwardFn fn) {
        nodes_.push_back(Node{std::move(value), std::nullopt, rg, std::move(inputs), std::move(fn), nullptr});
        return Var<T>{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
};

}  // namespace vibvit
