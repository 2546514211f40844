#pragma once

// Feature-grouping attention. Each candidate becomes G group tokens
// relu(W_g r_g + b_g) plus a context token projected from stop_grad(h_dnn);
// one bidirectional pointwise-attention block with FFN mixes them, a masked
// mean pools them and W_out maps the result to d_o.

#include <random>
#include <span>
#include <vector>

#include "qgs/autodiff.hpp"
#include "qgs/nn.hpp"

namespace qgs {

struct HfgConfig {
  std::vector<std::size_t> group_dims{3, 2, 2};
  std::size_t context_dim = 64;  // width of h_dnn
  std::size_t d_e = 16;
  std::size_t heads = 8;
  std::size_t ffn = 64;
  std::size_t d_o = 128;
  double norm_eps = 1e-6;

  std::size_t num_groups() const { return group_dims.size(); }
  std::size_t tokens() const { return group_dims.size() + 1; }
  std::size_t feature_dim() const;
  void validate() const;
};

template <class T>
class HfgBlock {
 public:
  HfgBlock() = default;
  HfgBlock(ParamSet<T>& ps, const HfgConfig& cfg, std::mt19937_64& rng);

  // r_g: n x d_g -> n x d_e
  Var<T> project_group(Tape<T>& tape, std::size_t g, Var<T> r_g) const;

  // groups[g]: n x d_e, h_dnn: n x context_dim. Returns (n * (G+1)) x d_e with
  // rows ordered (sample, token) and the context token last.
  Var<T> build_token_sequence(Tape<T>& tape, const std::vector<Var<T>>& groups, Var<T> h_dnn) const;

  // Attention sub-block then FFN sub-block, both residual.
  Var<T> attention(Tape<T>& tape, Var<T> tokens) const;

  // Mean over unmasked tokens of each sample, then W_out.
  Var<T> pool_project(Tape<T>& tape, Var<T> tokens, std::span<const T> token_mask) const;

  // features: n x feature_dim (groups laid out consecutively).
  Var<T> forward(Tape<T>& tape, Var<T> features, Var<T> h_dnn) const;

  const HfgConfig& config() const { return cfg_; }

 private:
  HfgConfig cfg_;
  std::vector<nn::Linear<T>> group_proj_;
  nn::Linear<T> context_proj_;
  Parameter<T>* norm_gain_ = nullptr;
  Parameter<T>* wq_ = nullptr;
  Parameter<T>* wk_ = nullptr;
  Parameter<T>* wv_ = nullptr;
  Parameter<T>* wu_ = nullptr;
  nn::Linear<T> attn_out_;
  nn::Linear<T> ffn1_, ffn2_;
  nn::Linear<T> out_;
};

}  // namespace qgs
