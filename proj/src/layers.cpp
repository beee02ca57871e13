#include "rematch/layers.hpp"

#include <cmath>

namespace rematch {
namespace {

// g starts at ||v|| per unit so the effective weight equals the He sample.
template <class T>
Tensor<T> unit_norms(const Tensor<T>& v) {
    const std::size_t units = v.dim(-1);
    const std::size_t fan = v.size() / units;
    Tensor<T> g(Shape{units}, T(0));
    for (std::size_t f = 0; f < fan; ++f)
        for (std::size_t j = 0; j < units; ++j) g[j] += v[f * units + j] * v[f * units + j];
    for (auto& x : g.data()) x = std::sqrt(x);
    return g;
}

}  // namespace

template <class T>
Tensor<T> he_init(const Shape& shape, std::size_t fan_in, double gain, Rng& rng) {
    if (fan_in == 0) throw std::invalid_argument("he_init: fan_in must be >= 1");
    Tensor<T> out(shape);
    const double stddev = gain / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : out.data()) v = static_cast<T>(rng.normal() * stddev);
    return out;
}

template <class T>
Var<T> ForwardContext<T>::dropout(Var<T> x) const {
    if (!training) return x;
    if (rng == nullptr) throw std::logic_error("training forward pass needs a dropout generator");
    return ops::dropout(x, keep_prob, training, *rng);
}

template <class T>
WeightNormDense<T>::WeightNormDense(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                                    double gain, Rng& rng)
    : in_(in), out_(out) {
    Rng local = rng.split(name);
    Tensor<T> v = he_init<T>(Shape{in, out}, in, gain, local);
    Tensor<T> g = unit_norms(v);
    v_ = &store.add(name + ".v", std::move(v));
    g_ = &store.add(name + ".g", std::move(g));
    b_ = &store.add(name + ".b", Tensor<T>(Shape{out}, T(0)));
}

template <class T>
Var<T> WeightNormDense<T>::weight(Tape<T>& tape) const {
    return ops::weight_norm(tape.parameter(*v_), tape.parameter(*g_));
}

template <class T>
Var<T> WeightNormDense<T>::operator()(Tape<T>& tape, Var<T> x) const {
    return ops::add_bias(ops::matmul(x, weight(tape)), tape.parameter(*b_));
}

template <class T>
WeightNormConv1d<T>::WeightNormConv1d(ParameterStore<T>& store, const std::string& name, std::size_t kernel,
                                      std::size_t in, std::size_t out, double gain, Rng& rng) {
    if (kernel % 2 == 0) throw std::invalid_argument("kernel size must be odd, got " + std::to_string(kernel));
    Rng local = rng.split(name);
    Tensor<T> v = he_init<T>(Shape{kernel, in, out}, kernel * in, gain, local);
    Tensor<T> g = unit_norms(v);
    v_ = &store.add(name + ".v", std::move(v));
    g_ = &store.add(name + ".g", std::move(g));
    b_ = &store.add(name + ".b", Tensor<T>(Shape{out}, T(0)));
}

template <class T>
Var<T> WeightNormConv1d<T>::operator()(Tape<T>& tape, Var<T> x) const {
    Var<T> w = ops::weight_norm(tape.parameter(*v_), tape.parameter(*g_));
    return ops::conv1d_same(x, w, tape.parameter(*b_));
}

template <class T>
Var<T> feed_forward(const ForwardContext<T>& ctx, const WeightNormDense<T>& layer, Var<T> x) {
    return ops::gelu(layer(ctx.tape, ctx.dropout(x)));
}

template Tensor<float> he_init<float>(const Shape&, std::size_t, double, Rng&);
template Tensor<double> he_init<double>(const Shape&, std::size_t, double, Rng&);
template struct ForwardContext<float>;
template struct ForwardContext<double>;
template class WeightNormDense<float>;
template class WeightNormDense<double>;
template class WeightNormConv1d<float>;
template class WeightNormConv1d<double>;
template Var<float> feed_forward(const ForwardContext<float>&, const WeightNormDense<float>&, Var<float>);
template Var<double> feed_forward(const ForwardContext<double>&, const WeightNormDense<double>&, Var<double>);

}  // namespace rematch
