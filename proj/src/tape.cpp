#include "rematch/tape.hpp"

namespace rematch {

template <class T>
Var<T> Tape<T>::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
}

template <class T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    Node node;
    node.value = std::move(value);
    return push(std::move(node));
}

template <class T>
Var<T> Tape<T>::variable(Tensor<T> value) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = grad_enabled_;
    return push(std::move(node));
}

template <class T>
Var<T> Tape<T>::parameter(Parameter<T>& p) {
    Node node;
    node.external = &p.value;
    node.param = &p;
    node.requires_grad = grad_enabled_;
    return push(std::move(node));
}

template <class T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward,
                       std::string_view op) {
    return record(std::move(value), std::vector<Var<T>>(inputs), std::move(backward), op);
}

template <class T>
Var<T> Tape<T>::record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward,
                       std::string_view op) {
    if (!value.all_finite()) {
        throw NumericError(std::string(op) + " produced a non-finite value (shape " +
                           shape_string(value.shape()) + ")");
    }
    Node node;
    node.value = std::move(value);
    if (grad_enabled_) {
        for (const auto& in : inputs) {
            if (in.id() >= nodes_.size() || &in.tape() != this) {
                throw std::invalid_argument(std::string(op) + ": input belongs to another tape");
            }
            if (nodes_[in.id()].requires_grad) node.requires_grad = true;
        }
        if (node.requires_grad) node.backward = std::move(backward);
    }
    return push(std::move(node));
}

template <class T>
const Tensor<T>& Tape<T>::value(Var<T> v) const {
    const Node& n = nodes_[v.id()];
    return n.external ? *n.external : n.value;
}

template <class T>
Tensor<T>& Tape<T>::grad_buffer(Var<T> v) {
    Node& n = nodes_[v.id()];
    if (n.grad.empty()) n.grad = Tensor<T>(value(v).shape(), T(0));
    return n.grad;
}

template <class T>
const Tensor<T>* Tape<T>::grad(Var<T> v) const {
    const Node& n = nodes_[v.id()];
    return n.grad.empty() ? nullptr : &n.grad;
}

template <class T>
void Tape<T>::backward(Var<T> loss) {
    if (&loss.tape() != this) throw std::invalid_argument("backward: loss belongs to another tape");
    if (value(loss).size() != 1) {
        throw DimensionError("backward requires a scalar loss, got shape " + shape_string(value(loss).shape()));
    }
    if (!nodes_[loss.id()].requires_grad) return;

    for (auto& n : nodes_) n.grad = Tensor<T>();
    grad_buffer(loss).fill(T(1));

    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.empty()) continue;
        if (n.backward) n.backward(*this, n.grad);
    }
    for (auto& n : nodes_) {
        if (n.param == nullptr || n.grad.empty()) continue;
        auto& dst = n.param->grad;
        if (dst.shape() != n.grad.shape()) dst = Tensor<T>(n.grad.shape(), T(0));
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
    }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace rematch
