#pragma once

#include <numbers>
#include <string>

#include "rematch/ops.hpp"
#include "rematch/rng.hpp"
#include "rematch/tape.hpp"

namespace rematch {

// Gain used in He initialisation for layers feeding a GeLU.
inline constexpr double kGeluGain = std::numbers::sqrt2;

// Zero-mean normal samples with std = gain / sqrt(fan_in).
template <class T>
Tensor<T> he_init(const Shape& shape, std::size_t fan_in, double gain, Rng& rng);

// Per-forward state shared by every layer call: the tape, whether dropout is
// active, and the dropout stream.
template <class T>
struct ForwardContext {
    Tape<T>& tape;
    bool training = false;
    double keep_prob = 1.0;
    Rng* rng = nullptr;

    Var<T> dropout(Var<T> x) const;
};

// y = x W + b with W = g * v / ||v|| (weight normalisation, one scale per
// output unit). Parameters: <name>.v [in, out], <name>.g [out], <name>.b [out].
template <class T>
class WeightNormDense {
public:
    WeightNormDense() = default;
    WeightNormDense(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out, double gain,
                    Rng& rng);

    Var<T> weight(Tape<T>& tape) const;
    // Linear map only; callers compose dropout and activation.
    Var<T> operator()(Tape<T>& tape, Var<T> x) const;

    std::size_t in() const { return in_; }
    std::size_t out() const { return out_; }

private:
    Parameter<T>* v_ = nullptr;
    Parameter<T>* g_ = nullptr;
    Parameter<T>* b_ = nullptr;
    std::size_t in_ = 0;
    std::size_t out_ = 0;
};

// Same-padded 1-D convolution with a weight-normalised kernel [K, in, out].
template <class T>
class WeightNormConv1d {
public:
    WeightNormConv1d() = default;
    WeightNormConv1d(ParameterStore<T>& store, const std::string& name, std::size_t kernel, std::size_t in,
                     std::size_t out, double gain, Rng& rng);

    Var<T> operator()(Tape<T>& tape, Var<T> x) const;

private:
    Parameter<T>* v_ = nullptr;
    Parameter<T>* g_ = nullptr;
    Parameter<T>* b_ = nullptr;
};

// dropout -> dense -> GeLU
template <class T>
Var<T> feed_forward(const ForwardContext<T>& ctx, const WeightNormDense<T>& layer, Var<T> x);

}  // namespace rematch
