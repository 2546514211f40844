#pragma once

// Linear HSTU encoder. Each layer computes
//   N = rmsnorm(H), Q,K,V,U = silu(N W_*), S = K ⊙ V,
//   C_t = γ C_{t-1} + S_t, O = Q ⊙ C ⊙ U, H' = H + dropout(O)
// with γ = sigmoid(g) per layer. The quadratic reference layer replaces the
// scan with causal pointwise attention: O = U ⊙ rmsnorm(Σ_{τ≤t} silu(<Q_t,K_τ>/d_h) V_τ).

#include <random>
#include <span>
#include <vector>

#include "qgs/autodiff.hpp"
#include "qgs/model_config.hpp"

namespace qgs {

struct EncoderConfig {
  std::size_t num_layers = 2;
  std::size_t d_h = 64;
  double dropout = 0.1;
  bool quadratic = false;
  bool per_dim_gamma = false;
  double gamma_init = 0.95;
  double norm_eps = 1e-6;

  static EncoderConfig from(const ModelConfig& m);
};

template <class T>
struct EncoderLayer {
  Parameter<T>* wq = nullptr;
  Parameter<T>* wk = nullptr;
  Parameter<T>* wv = nullptr;
  Parameter<T>* wu = nullptr;
  Parameter<T>* gain = nullptr;
  Parameter<T>* decay = nullptr;  // g, γ = sigmoid(g); shape [1] or [d_h]
};

// Per-layer accumulated state C; the recurrence is Markov in C, so nothing
// else from the history is kept.
template <class T>
struct StreamState {
  std::vector<std::vector<T>> c;
  std::size_t position = 0;
  std::size_t max_len = 0;

  std::size_t size_bytes() const {
    std::size_t n = 0;
    for (const auto& v : c) n += v.size() * sizeof(T);
    return n;
  }
};

template <class T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(ParamSet<T>& ps, const EncoderConfig& cfg, std::mt19937_64& rng);

  // H: (segments * seg_len) x d_h, one sequence per segment. `rng` may be
  // null when train is false.
  Var<T> layer_forward(Tape<T>& tape, Var<T> h, std::size_t layer, std::size_t seg_len, bool train,
                       std::mt19937_64* rng) const;
  Var<T> forward(Tape<T>& tape, Var<T> h0, std::size_t seg_len, bool train,
                 std::mt19937_64* rng) const;

  StreamState<T> make_state(std::size_t max_len) const;
  // Consumes one projected token through every layer and returns h_N.
  std::vector<T> stream_step(StreamState<T>& state, std::span<const T> h0) const;

  // Decay factors of a layer, one per column (broadcast when shared).
  std::vector<T> gamma(std::size_t layer) const;

  const EncoderConfig& config() const { return cfg_; }
  std::size_t num_layers() const { return layers_.size(); }
  const EncoderLayer<T>& layer(std::size_t i) const { return layers_.at(i); }

 private:
  EncoderConfig cfg_;
  std::vector<EncoderLayer<T>> layers_;
};

// Explicit weighted sum C_t = Σ_{τ≤t} γ^{t-τ} S_τ for one sequence of L rows.
template <class T>
std::vector<T> recurrence_direct(std::span<const T> s, std::size_t len, std::size_t dim,
                                 std::span<const T> gamma);

// Recursive form over the same layout, for comparison against the above.
template <class T>
std::vector<T> recurrence_scan(std::span<const T> s, std::size_t len, std::size_t dim,
                               std::span<const T> gamma);

}  // namespace qgs
