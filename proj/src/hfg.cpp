#include "qgs/hfg.hpp"

#include <numeric>

namespace qgs {

std::size_t HfgConfig::feature_dim() const {
  return std::accumulate(group_dims.begin(), group_dims.end(), std::size_t{0});
}

void HfgConfig::validate() const {
  if (d_e == 0 || heads == 0 || d_e % heads != 0) {
    throw ConfigError("hfg: d_e (" + std::to_string(d_e) + ") must be divisible by heads (" +
                      std::to_string(heads) + ")");
  }
  for (auto d : group_dims)
    if (d == 0) throw ConfigError("hfg: empty feature group");
}

template <class T>
HfgBlock<T>::HfgBlock(ParamSet<T>& ps, const HfgConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  cfg.validate();
  const std::size_t e = cfg.d_e;
  for (std::size_t g = 0; g < cfg.num_groups(); ++g) {
    group_proj_.emplace_back(ps, "hfg.group" + std::to_string(g), cfg.group_dims[g], e, true, rng);
  }
  context_proj_ = nn::Linear<T>(ps, "hfg.context", cfg.context_dim, e, true, rng);
  norm_gain_ = &ps.ensure("hfg.norm.gain", {e}, [&] { return Tensor<T>::filled({e}, T{1}); });
  auto proj = [&](const char* name) {
    return &ps.ensure(std::string("hfg.") + name, {e, e}, [&] { return nn::xavier<T>(e, e, rng); });
  };
  wq_ = proj("wq");
  wk_ = proj("wk");
  wv_ = proj("wv");
  wu_ = proj("wu");
  attn_out_ = nn::Linear<T>(ps, "hfg.attn_out", e, e, false, rng);
  ffn1_ = nn::Linear<T>(ps, "hfg.ffn1", e, cfg.ffn, true, rng);
  ffn2_ = nn::Linear<T>(ps, "hfg.ffn2", cfg.ffn, e, true, rng);
  out_ = nn::Linear<T>(ps, "hfg.out", e, cfg.d_o, false, rng);
}

template <class T>
Var<T> HfgBlock<T>::project_group(Tape<T>& tape, std::size_t g, Var<T> r_g) const {
  return ops::relu(group_proj_.at(g)(tape, r_g));
}

template <class T>
Var<T> HfgBlock<T>::build_token_sequence(Tape<T>& tape, const std::vector<Var<T>>& groups,
                                         Var<T> h_dnn) const {
  const std::size_t n = h_dnn.rows();
  std::vector<Var<T>> parts(groups.begin(), groups.end());
  parts.push_back(context_proj_(tape, ops::stop_gradient(h_dnn)));
  for (const auto& p : parts) {
    if (p.rows() != n || p.cols() != cfg_.d_e) {
      throw ShapeError("hfg tokens: expected [" + std::to_string(n) + "x" + std::to_string(cfg_.d_e) +
                       "], got " + to_string(p.shape()));
    }
  }
  return ops::reshape(ops::concat_cols<T>(parts), {n * parts.size(), cfg_.d_e});
}

template <class T>
Var<T> HfgBlock<T>::attention(Tape<T>& tape, Var<T> x) const {
  const std::size_t seq = cfg_.tokens();
  if (x.rows() % seq != 0) {
    throw ShapeError("hfg attention: " + to_string(x.shape()) + " is not a multiple of " +
                     std::to_string(seq) + " tokens");
  }
  const T eps = static_cast<T>(cfg_.norm_eps);
  Var<T> n = ops::rmsnorm(x, tape.param(*norm_gain_), eps);
  Var<T> q = ops::silu(ops::matmul(n, tape.param(*wq_)));
  Var<T> k = ops::silu(ops::matmul(n, tape.param(*wk_)));
  Var<T> v = ops::silu(ops::matmul(n, tape.param(*wv_)));
  Var<T> u = ops::silu(ops::matmul(n, tape.param(*wu_)));
  ops::AttentionSpec spec;
  spec.seg_len = seq;
  spec.heads = cfg_.heads;
  spec.causal = false;
  spec.logit_scale = 1.0 / double(cfg_.d_e / cfg_.heads);
  spec.out_scale = 1.0 / double(seq);
  Var<T> a = ops::pointwise_attention(q, k, v, spec);
  Var<T> h = ops::add(x, attn_out_(tape, ops::mul(a, u)));
  return ops::add(h, ffn2_(tape, ops::relu(ffn1_(tape, h))));
}

template <class T>
Var<T> HfgBlock<T>::pool_project(Tape<T>& tape, Var<T> tokens, std::span<const T> token_mask) const {
  return out_(tape, ops::segment_mean(tokens, token_mask, cfg_.tokens()));
}

template <class T>
Var<T> HfgBlock<T>::forward(Tape<T>& tape, Var<T> features, Var<T> h_dnn) const {
  if (features.cols() != cfg_.feature_dim()) {
    throw ShapeError("hfg features: " + to_string(features.shape()) + " vs group width " +
                     std::to_string(cfg_.feature_dim()));
  }
  std::vector<Var<T>> groups;
  std::size_t begin = 0;
  for (std::size_t g = 0; g < cfg_.num_groups(); ++g) {
    groups.push_back(project_group(tape, g, ops::slice_cols(features, begin, cfg_.group_dims[g])));
    begin += cfg_.group_dims[g];
  }
  Var<T> tokens = attention(tape, build_token_sequence(tape, groups, h_dnn));
  const std::vector<T> mask(tokens.rows(), T{1});
  return pool_project(tape, tokens, mask);
}

template class HfgBlock<float>;
template class HfgBlock<double>;

}  // namespace qgs
