#pragma once

// Query-conditioned next-item prediction: z_t = head([h_t ∥ e_sep_{t+1}]),
// v_{t+1} = x_{t+1} W_tgt, per-step in-batch logits cos(z_b, v_c) / τ and
// InfoNCE with padding and same-item collision masks.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "qgs/autodiff.hpp"
#include "qgs/nn.hpp"

namespace qgs {

// Additive stand-in for -inf in masked logits.
inline constexpr double kMaskValue = -1e9;

template <class T>
class PredictionHead {
 public:
  PredictionHead() = default;
  PredictionHead(ParamSet<T>& ps, std::size_t in, std::size_t hidden, std::size_t out,
                 std::mt19937_64& rng);
  Var<T> operator()(Tape<T>& tape, Var<T> x) const;

  const nn::Linear<T>& first() const { return l1_; }
  const nn::Linear<T>& second() const { return l2_; }

 private:
  nn::Linear<T> l1_, l2_;
};

template <class T>
class TargetProjection {
 public:
  TargetProjection() = default;
  TargetProjection(ParamSet<T>& ps, std::size_t in, std::size_t out, std::mt19937_64& rng);
  Var<T> operator()(Tape<T>& tape, Var<T> x) const { return ops::matmul(x, tape.param(*w_)); }

 private:
  Parameter<T>* w_ = nullptr;
};

template <class T>
Var<T> predict_vector(Tape<T>& tape, Var<T> h, Var<T> e_sep_next, const PredictionHead<T>& head);

// z, v: (batch * steps) rows ordered b * steps + t. Output row t * batch + b,
// column c holds cos(z[b,t], v[c,t]) / tau.
template <class T>
Var<T> similarity(Var<T> z, Var<T> v, std::size_t batch, std::size_t steps, T tau, T eps);

template <class T>
struct InfoNceMask {
  std::size_t batch = 0, steps = 0;
  Tensor<T> additive;              // (steps * batch) x batch, 0 or kMaskValue
  std::vector<std::size_t> target;  // diagonal column per row
  std::vector<T> row_weight;        // 1 for valid positions
  std::size_t valid_rows() const;
};

// valid[b * steps + t]: position t of sequence b has a real next item.
// next_items[b * steps + t]: item id at t + 1 (for the collision mask).
template <class T>
InfoNceMask<T> build_masks(std::size_t batch, std::size_t steps, std::span<const std::uint8_t> valid,
                           std::span<const std::uint32_t> next_items);

template <class T>
Var<T> apply_masks(Var<T> logits, const InfoNceMask<T>& mask);

// Mean over valid positions of -log softmax at the diagonal.
template <class T>
Var<T> infonce_loss(Var<T> masked_logits, const InfoNceMask<T>& mask);

}  // namespace qgs
