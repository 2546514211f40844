#include "qgs/encoder.hpp"

#include <cmath>

#include "qgs/kernels.hpp"
#include "qgs/nn.hpp"
#include "qgs/ops.hpp"

namespace qgs {

EncoderConfig EncoderConfig::from(const ModelConfig& m) {
  EncoderConfig c;
  c.num_layers = m.num_layers;
  c.d_h = m.d_h;
  c.dropout = m.dropout;
  c.quadratic = m.variant == Variant::quadratic_encoder;
  c.per_dim_gamma = m.per_dim_gamma;
  c.gamma_init = m.gamma_init;
  c.norm_eps = m.norm_eps;
  return c;
}

template <class T>
Encoder<T>::Encoder(ParamSet<T>& ps, const EncoderConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  if (!(cfg.gamma_init > 0 && cfg.gamma_init < 1)) throw ConfigError("gamma_init must lie in (0,1)");
  const std::size_t d = cfg.d_h;
  const T g0 = static_cast<T>(std::log(cfg.gamma_init / (1.0 - cfg.gamma_init)));
  const Shape decay_shape{cfg.per_dim_gamma ? d : 1};
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l) + ".";
    EncoderLayer<T> layer;
    auto proj = [&](const char* name) {
      return &ps.ensure(p + name, {d, d}, [&] { return nn::xavier<T>(d, d, rng); });
    };
    layer.wq = proj("wq");
    layer.wk = proj("wk");
    layer.wv = proj("wv");
    layer.wu = proj("wu");
    layer.gain = &ps.ensure(p + "gain", {d}, [&] { return Tensor<T>::filled({d}, T{1}); });
    if (!cfg.quadratic) {
      layer.decay = &ps.ensure(p + "decay", decay_shape, [&] { return Tensor<T>::filled(decay_shape, g0); });
    }
    layers_.push_back(layer);
  }
}

template <class T>
Var<T> Encoder<T>::layer_forward(Tape<T>& tape, Var<T> h, std::size_t l, std::size_t seg_len,
                                 bool train, std::mt19937_64* rng) const {
  const auto& p = layers_.at(l);
  const T eps = static_cast<T>(cfg_.norm_eps);
  try {
    Var<T> n = ops::rmsnorm(h, tape.param(*p.gain), eps);
    Var<T> q = ops::silu(ops::matmul(n, tape.param(*p.wq)));
    Var<T> k = ops::silu(ops::matmul(n, tape.param(*p.wk)));
    Var<T> v = ops::silu(ops::matmul(n, tape.param(*p.wv)));
    Var<T> u = ops::silu(ops::matmul(n, tape.param(*p.wu)));
    Var<T> o;
    if (cfg_.quadratic) {
      ops::AttentionSpec spec;
      spec.seg_len = seg_len;
      spec.heads = 1;
      spec.causal = true;
      spec.logit_scale = 1.0 / double(cfg_.d_h);
      Var<T> a = ops::pointwise_attention(q, k, v, spec);
      o = ops::mul(u, ops::rmsnorm(a, eps));
    } else {
      Var<T> s = ops::mul(k, v);
      Var<T> c = ops::decay_scan(s, ops::sigmoid(tape.param(*p.decay)), seg_len);
      o = ops::mul(ops::mul(q, c), u);
    }
    if (train && cfg_.dropout > 0) {
      if (!rng) throw Error("encoder: training mode requires an rng");
      o = ops::dropout(o, static_cast<T>(cfg_.dropout), *rng);
    }
    return ops::add(h, o);
  } catch (const NumericError& e) {
    throw NumericError("encoder layer " + std::to_string(l) + ": " + e.what());
  }
}

template <class T>
Var<T> Encoder<T>::forward(Tape<T>& tape, Var<T> h0, std::size_t seg_len, bool train,
                           std::mt19937_64* rng) const {
  Var<T> h = h0;
  for (std::size_t l = 0; l < layers_.size(); ++l) h = layer_forward(tape, h, l, seg_len, train, rng);
  return h;
}

template <class T>
std::vector<T> Encoder<T>::gamma(std::size_t layer) const {
  const auto& p = layers_.at(layer);
  if (!p.decay) throw Error("quadratic layers have no decay factor");
  std::vector<T> g(cfg_.d_h);
  const auto& raw = p.decay->value;
  for (std::size_t j = 0; j < g.size(); ++j) {
    const T x = raw[raw.size() == 1 ? 0 : j];
    g[j] = T{1} / (T{1} + std::exp(-x));
  }
  return g;
}

template <class T>
StreamState<T> Encoder<T>::make_state(std::size_t max_len) const {
  if (cfg_.quadratic) throw Error("streaming requires the linear encoder");
  StreamState<T> s;
  s.c.assign(layers_.size(), std::vector<T>(cfg_.d_h, T{0}));
  s.max_len = max_len;
  return s;
}

template <class T>
std::vector<T> Encoder<T>::stream_step(StreamState<T>& state, std::span<const T> h0) const {
  const std::size_t d = cfg_.d_h;
  if (h0.size() != d) {
    throw ShapeError("stream_step: token width " + std::to_string(h0.size()) + " vs d_h " +
                     std::to_string(d));
  }
  if (state.position >= state.max_len) {
    throw Error("stream_step: position " + std::to_string(state.position) + " >= max_len " +
                std::to_string(state.max_len));
  }
  if (state.c.size() != layers_.size()) throw Error("stream_step: state does not match encoder");
  const T eps = static_cast<T>(cfg_.norm_eps);
  std::vector<T> h(h0.begin(), h0.end()), n(d), q(d), k(d), v(d), u(d);
  auto silu_proj = [&](const Parameter<T>& w, std::vector<T>& out) {
    kernels::gemm<T>(false, false, 1, d, d, n.data(), w.value.data(), out.data(), false);
    for (auto& x : out) x = x / (T{1} + std::exp(-x));
  };
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& p = layers_[l];
    T ss = 0;
    for (T x : h) ss += x * x;
    const T inv = T{1} / std::sqrt(ss / static_cast<T>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) n[j] = p.gain->value[j] * (h[j] * inv);
    silu_proj(*p.wq, q);
    silu_proj(*p.wk, k);
    silu_proj(*p.wv, v);
    silu_proj(*p.wu, u);
    const auto g = gamma(l);
    auto& c = state.c[l];
    for (std::size_t j = 0; j < d; ++j) {
      c[j] = g[j] * c[j] + k[j] * v[j];
      h[j] += q[j] * c[j] * u[j];
    }
  }
  for (std::size_t j = 0; j < d; ++j) {
    if (!std::isfinite(h[j])) {
      throw NumericError("stream_step: non-finite output at position " + std::to_string(state.position));
    }
  }
  ++state.position;
  return h;
}

template <class T>
std::vector<T> recurrence_direct(std::span<const T> s, std::size_t len, std::size_t dim,
                                 std::span<const T> gamma) {
  if (s.size() != len * dim || (gamma.size() != dim && gamma.size() != 1))
    throw ShapeError("recurrence_direct: bad sizes");
  std::vector<T> c(len * dim, T{0});
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t j = 0; j < dim; ++j) {
      double acc = 0;
      for (std::size_t tau = 0; tau <= t; ++tau) {
        acc += std::pow(double(gamma[gamma.size() == 1 ? 0 : j]), double(t - tau)) * double(s[tau * dim + j]);
      }
      c[t * dim + j] = static_cast<T>(acc);
    }
  return c;
}

template <class T>
std::vector<T> recurrence_scan(std::span<const T> s, std::size_t len, std::size_t dim,
                               std::span<const T> gamma) {
  if (s.size() != len * dim || (gamma.size() != dim && gamma.size() != 1))
    throw ShapeError("recurrence_scan: bad sizes");
  const std::vector<T> g(dim, gamma[0]);
  std::vector<T> c(len * dim);
  kernels::decay_scan_forward<T>({1, len, dim}, s.data(), gamma.size() == 1 ? g.data() : gamma.data(), c.data());
  return c;
}

template class Encoder<float>;
template class Encoder<double>;
template std::vector<float> recurrence_direct<float>(std::span<const float>, std::size_t, std::size_t,
                                                     std::span<const float>);
template std::vector<double> recurrence_direct<double>(std::span<const double>, std::size_t,
                                                       std::size_t, std::span<const double>);
template std::vector<float> recurrence_scan<float>(std::span<const float>, std::size_t, std::size_t,
                                                   std::span<const float>);
template std::vector<double> recurrence_scan<double>(std::span<const double>, std::size_t, std::size_t,
                                                     std::span<const double>);

}  // namespace qgs
