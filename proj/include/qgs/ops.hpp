#pragma once

// Differentiable ops over Var. All ops check operand shapes and throw
// ShapeError naming both shapes; all outputs are checked for finiteness.

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "qgs/autodiff.hpp"
#include "qgs/kernels.hpp"

namespace qgs::ops {

// [m x k] * [k x n]
template <class T>
Var<T> matmul(Var<T> a, Var<T> b);

template <class T>
Var<T> add(Var<T> a, Var<T> b);
template <class T>
Var<T> sub(Var<T> a, Var<T> b);
template <class T>
Var<T> mul(Var<T> a, Var<T> b);

// a[m x n] op row[n], broadcast over rows.
template <class T>
Var<T> add_row(Var<T> a, Var<T> row);
template <class T>
Var<T> mul_row(Var<T> a, Var<T> row);

template <class T>
Var<T> scale(Var<T> a, T factor);
// a * s for a one-element s.
template <class T>
Var<T> scale_by(Var<T> a, Var<T> s);

template <class T>
Var<T> silu(Var<T> x);
template <class T>
Var<T> relu(Var<T> x);
template <class T>
Var<T> sigmoid(Var<T> x);
template <class T>
Var<T> tanh(Var<T> x);

// Per row: gain * x / sqrt(mean(x^2) + eps).
template <class T>
Var<T> rmsnorm(Var<T> x, Var<T> gain, T eps);
template <class T>
Var<T> rmsnorm(Var<T> x, T eps);

// Per row: gain * (x - mean) / sqrt(var + eps) + bias.
template <class T>
Var<T> layernorm(Var<T> x, Var<T> gain, Var<T> bias, T eps);

// Per row: x / max(||x||_2, eps).
template <class T>
Var<T> l2_normalize(Var<T> x, T eps);

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts);
template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts);
template <class T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t count);

// out[i] = table[index[i]]; gradient scatters back into the table.
template <class T>
Var<T> gather_rows(Var<T> table, std::span<const std::size_t> index);

// Same row-major data under a new shape.
template <class T>
Var<T> reshape(Var<T> x, Shape shape);

template <class T>
Var<T> sum(Var<T> x);
template <class T>
Var<T> mean(Var<T> x);

// Same value, no gradient flows to x.
template <class T>
Var<T> stop_gradient(Var<T> x);

// Inverted dropout; identity when rate == 0.
template <class T>
Var<T> dropout(Var<T> x, T rate, std::mt19937_64& rng);

// C_t = gamma * C_{t-1} + S_t within consecutive segments of seg_len rows.
// gamma holds one value (shared) or one per column.
template <class T>
Var<T> decay_scan(Var<T> s, Var<T> gamma, std::size_t seg_len);

struct AttentionSpec {
  std::size_t seg_len = 1;
  std::size_t heads = 1;
  bool causal = true;
  double logit_scale = 1.0;
  double out_scale = 1.0;
};

// Pointwise aggregated (softmax-free, SiLU) attention within segments.
template <class T>
Var<T> pointwise_attention(Var<T> q, Var<T> k, Var<T> v, const AttentionSpec& spec);

// Mean of the rows with mask != 0 inside each segment of seg_len rows.
template <class T>
Var<T> segment_mean(Var<T> x, std::span<const T> row_mask, std::size_t seg_len);

// Row-wise inner product, [m x n] . [m x n] -> [m x 1].
template <class T>
Var<T> rowwise_dot(Var<T> a, Var<T> b);

// In-batch similarity per step. z and v hold batch*steps rows ordered
// (b, t) -> b*steps + t. Output row (t*batch + b), column c is
// scale * <z[b,t], v[c,t]>.
template <class T>
Var<T> step_similarity(Var<T> z, Var<T> v, std::size_t batch, std::size_t steps, T scale);

// Softmax cross-entropy per row against a target column, weighted mean over
// rows: sum_r w_r * (-log softmax(logits_r)[target_r]) / sum_r w_r.
template <class T>
Var<T> cross_entropy_rows(Var<T> logits, std::span<const std::size_t> target,
                          std::span<const T> row_weight);

// Mean binary cross-entropy with logits.
template <class T>
Var<T> bce_with_logits(Var<T> logits, std::span<const T> labels);

}  // namespace qgs::ops
