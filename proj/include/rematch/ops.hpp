#pragma once

// Differentiable tensor ops. Each records itself on the tape of its inputs.

#include <cstdint>
#include <vector>

#include "rematch/rng.hpp"
#include "rematch/tape.hpp"

namespace rematch::ops {

// [.., M, K] x [.., K, N] -> [.., M, N]. Batch prefixes must match exactly,
// or one side must be a plain matrix that is broadcast over the other.
template <class T>
Var<T> matmul(Var<T> a, Var<T> b);

// Swaps the last two axes.
template <class T>
Var<T> transpose(Var<T> x);

template <class T>
Var<T> add(Var<T> a, Var<T> b);
template <class T>
Var<T> sub(Var<T> a, Var<T> b);
template <class T>
Var<T> mul(Var<T> a, Var<T> b);
template <class T>
Var<T> abs(Var<T> x);
template <class T>
Var<T> scale(Var<T> x, T factor);

// x [.., N] + bias [N]
template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias);

// Concatenates along the last axis; leading extents must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts);
template <class T>
Var<T> slice_last(Var<T> x, std::size_t start, std::size_t length);
// Sets columns [start, start + length) of the last axis to zero.
template <class T>
Var<T> zero_slice(Var<T> x, std::size_t start, std::size_t length);

// x [B, L, D]; zeroes every position whose mask [B, L] entry is 0.
template <class T>
Var<T> mask_positions(Var<T> x, const Mask& mask);

// x [B, L, Din], w [K, Din, Dout], bias [Dout] -> [B, L, Dout]. K must be
// odd; (K-1)/2 zero pads on each side keep the length.
template <class T>
Var<T> conv1d_same(Var<T> x, Var<T> w, Var<T> bias);

// x * Phi(x), exact erf form.
template <class T>
Var<T> gelu(Var<T> x);

// Inverted dropout. Identity when !training or keep_prob == 1.
template <class T>
Var<T> dropout(Var<T> x, double keep_prob, bool training, Rng& rng);

// Softmax over the last axis restricted to positions where mask != 0. Masked
// outputs are exactly 0. mask has the shape of scores. Throws
// std::invalid_argument on a fully masked row.
template <class T>
Var<T> softmax_masked(Var<T> scores, const Mask& mask);

// x [B, L, D] -> [B, D], per-channel max over valid positions.
template <class T>
Var<T> max_pool(Var<T> x, const Mask& mask);

// Effective weight g * v / ||v|| with norms taken per output unit (the last
// axis of v). g has shape [Dout].
template <class T>
Var<T> weight_norm(Var<T> v, Var<T> g);

template <class T>
Var<T> sum(Var<T> x);

// Mean over the batch of -log softmax(logits)[label]; logits [B, C].
template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& labels);

// Non-differentiable helpers.

// Row-wise softmax over the last axis.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

// mask [B, L] -> [B, M, L] by repetition over the middle axis.
Mask broadcast_rows(const Mask& mask, std::size_t middle);

}  // namespace rematch::ops
