#pragma once

// Reverse-mode differentiation. A Tape records every op applied during one
// forward pass; backward() replays it in reverse, accumulating gradients into
// each node that needs one and, at the end, into the Parameters used.

#include <deque>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rematch/tensor.hpp"

namespace rematch {

template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
};

// Owns a model's trainable tensors. Addresses are stable for the store's
// lifetime; names are unique.
template <class T>
class ParameterStore {
public:
    Parameter<T>& add(std::string name, Tensor<T> value) {
        if (index_.contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        index_.emplace(name, params_.size());
        Tensor<T> grad(value.shape(), T(0));
        params_.push_back(Parameter<T>{std::move(name), std::move(value), std::move(grad)});
        return params_.back();
    }

    Parameter<T>* find(std::string_view name) {
        auto it = index_.find(std::string(name));
        return it == index_.end() ? nullptr : &params_[it->second];
    }
    const Parameter<T>* find(std::string_view name) const {
        auto it = index_.find(std::string(name));
        return it == index_.end() ? nullptr : &params_[it->second];
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    std::size_t size() const { return params_.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.grad.fill(T(0));
    }

private:
    std::deque<Parameter<T>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

template <class T>
class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape
// lives.
template <class T>
class Var {
public:
    Var() = default;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Tensor<T>& value() const { return tape_->value(*this); }
    const Shape& shape() const { return value().shape(); }
    std::size_t dim(int axis) const { return value().dim(axis); }
    Tape<T>& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

template <class T>
class Tape {
public:
    // Receives the gradient of the loss w.r.t. the node's output.
    using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_enabled_; }

    Var<T> constant(Tensor<T> value);
    // Leaf whose gradient is kept on the tape (read it with grad()).
    Var<T> variable(Tensor<T> value);
    // Leaf bound to a Parameter; backward() adds into parameter.grad.
    Var<T> parameter(Parameter<T>& p);

    // Records an op output. `op` names the op in diagnostics; a non-finite
    // output raises NumericError.
    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward,
                  std::string_view op);
    Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward,
                  std::string_view op);

    const Tensor<T>& value(Var<T> v) const;
    bool needs_grad(Var<T> v) const { return nodes_[v.id()].requires_grad; }
    // Zero-initialised on first access in a backward sweep.
    Tensor<T>& grad_buffer(Var<T> v);
    // nullptr when no gradient reached v.
    const Tensor<T>* grad(Var<T> v) const;

    void backward(Var<T> loss);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> value;
        const Tensor<T>* external = nullptr;
        Parameter<T>* param = nullptr;
        Tensor<T> grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Var<T> push(Node node);

    bool grad_enabled_;
    std::deque<Node> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace rematch
