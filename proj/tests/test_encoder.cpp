#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "doctest.h"
#include "qgs/encoder.hpp"
#include "qgs/error.hpp"
#include "qgs/gradcheck.hpp"
#include "qgs/pairtoken.hpp"
#include "test_util.hpp"

using namespace qgs;
using testing::random_tensor;

namespace {

ModelConfig small_model() {
  ModelConfig m;
  m.d_f = 4;
  m.d_b = 6;
  m.d_h = 8;
  m.max_len = 32;
  m.query_vocab = 5;
  m.item_vocab = 7;
  m.dropout = 0;
  return m;
}

EncoderConfig enc_config(std::size_t layers, std::size_t d_h, bool quadratic = false) {
  EncoderConfig c;
  c.num_layers = layers;
  c.d_h = d_h;
  c.dropout = 0;
  c.quadratic = quadratic;
  return c;
}

template <class T>
Tensor<T> run(const Encoder<T>& enc, const Tensor<T>& h0, std::size_t seg_len) {
  Tape<T> tape(false);
  return enc.forward(tape, tape.constant(h0), seg_len, false, nullptr).value();
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

std::vector<double> rms(const std::vector<double>& x, const std::vector<double>& gain, double eps) {
  double ss = 0;
  for (double v : x) ss += v * v;
  const double s = 1.0 / std::sqrt(ss / double(x.size()) + eps);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = gain[i] * x[i] * s;
  return out;
}

std::vector<double> row_times(const std::vector<double>& x, const Tensor<double>& w) {
  std::vector<double> out(w.dim(1), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < w.dim(1); ++j) out[j] += x[i] * w.at(i, j);
  return out;
}

}  // namespace

TEST_CASE("embedder dependence on ids") {
  const auto cfg = small_model();
  ParamSet<double> ps;
  std::mt19937_64 rng(3);
  SemanticEmbedder<double> emb(ps, cfg, rng);
  auto eval = [&](std::size_t q, std::size_t d) {
    Tape<double> tape(false);
    const std::size_t qs[] = {q}, ds[] = {d};
    auto e = emb.embed(tape, qs, ds);
    return std::make_pair(e.cls.value(), e.sep.value());
  };
  const auto a = eval(1, 2);
  const auto b = eval(1, 2);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  const auto other_item = eval(1, 3);
  CHECK(other_item.second == a.second);
  CHECK_FALSE(other_item.first == a.first);
  const auto other_query = eval(2, 2);
  CHECK_FALSE(other_query.first == a.first);
  CHECK_FALSE(other_query.second == a.second);
  CHECK(a.first.cols() == cfg.d_b);
  CHECK(a.second.cols() == cfg.d_b);

  Tape<double> tape(false);
  const std::size_t bad_q[] = {5}, ok_d[] = {0};
  CHECK_THROWS_AS(emb.embed(tape, bad_q, ok_d), Error);
  const std::size_t ok_q[] = {0}, bad_d[] = {7};
  CHECK_THROWS_AS(emb.embed(tape, ok_q, bad_d), Error);
}

TEST_CASE("pair token layout") {
  std::mt19937_64 rng(1);
  Tape<double> tape(false);
  const auto f = random_tensor<double>({3, 151}, rng);
  const auto cls = random_tensor<double>({3, 64}, rng);
  Var<double> x = build_pair_token(tape.constant(f), tape.constant(cls));
  REQUIRE(x.cols() == 215);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 151; ++c) CHECK(x.value().at(r, c) == f.at(r, c));
    for (std::size_t c = 0; c < 64; ++c) CHECK(x.value().at(r, 151 + c) == cls.at(r, c));
  }
  Var<double> zero = build_pair_token(tape.constant(Tensor<double>({1, 4})), tape.constant(Tensor<double>({1, 6})));
  for (double v : zero.value().values()) CHECK(v == 0.0);
}

TEST_CASE("input projection is affine with a positional row") {
  const auto cfg = small_model();
  ParamSet<double> ps;
  std::mt19937_64 rng(5);
  InputProjection<double> proj(ps, cfg, rng);
  const std::size_t pos[] = {7};
  Tape<double> tape(false);
  Var<double> at_zero = proj(tape, tape.constant(Tensor<double>({1, cfg.token_dim()})), pos);
  for (std::size_t j = 0; j < cfg.d_h; ++j) CHECK(at_zero.value().at(0, j) == proj.positions().value.at(7, j));

  const auto a = random_tensor<double>({1, cfg.token_dim()}, rng);
  const auto b = random_tensor<double>({1, cfg.token_dim()}, rng);
  Tensor<double> ab({1, cfg.token_dim()});
  for (std::size_t i = 0; i < ab.size(); ++i) ab[i] = a[i] + b[i];
  const auto pa = proj(tape, tape.constant(a), pos).value();
  const auto pb = proj(tape, tape.constant(b), pos).value();
  const auto pab = proj(tape, tape.constant(ab), pos).value();
  for (std::size_t j = 0; j < cfg.d_h; ++j)
    CHECK(pab[j] == doctest::Approx(pa[j] + pb[j] - proj.positions().value.at(7, j)).epsilon(1e-12));

  proj.weight().value.fill(0.0);
  const auto pw = proj(tape, tape.constant(a), pos).value();
  for (std::size_t j = 0; j < cfg.d_h; ++j) CHECK(pw[j] == proj.positions().value.at(7, j));

  const std::size_t too_far[] = {cfg.max_len};
  CHECK_THROWS_AS(proj(tape, tape.constant(a), too_far), Error);
}

TEST_CASE("decay stays inside the open unit interval") {
  ParamSet<double> ps;
  std::mt19937_64 rng(1);
  Encoder<double> enc(ps, enc_config(2, 4), rng);
  CHECK(enc.gamma(0)[0] == doctest::Approx(0.95).epsilon(1e-12));
  for (double g : {-50.0, -3.0, 0.0, 3.0, 30.0}) {
    enc.layer(1).decay->value[0] = g;
    const double gamma = enc.gamma(1)[0];
    CHECK(gamma >= 0.0);
    CHECK(gamma <= 1.0);
    if (std::abs(g) < 30) {
      CHECK(gamma > 0.0);
      CHECK(gamma < 1.0);
    }
  }
}

TEST_CASE("geometric-series oracles for the recurrence") {
  const std::size_t L = 12, d = 3;
  std::vector<double> ones(L * d, 1.0);
  const std::vector<double> half{0.5};
  const auto c = recurrence_direct<double>(ones, L, d, half);
  const auto s = recurrence_scan<double>(ones, L, d, half);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t j = 0; j < d; ++j) {
      const double expect = 2.0 * (1.0 - std::pow(0.5, double(t + 1)));
      CHECK(c[t * d + j] == doctest::Approx(expect).epsilon(1e-14));
      CHECK(s[t * d + j] == doctest::Approx(expect).epsilon(1e-14));
    }
  std::vector<double> impulse(L * d, 0.0);
  impulse[0] = 1.0;
  const std::vector<double> g{0.8};
  const auto ci = recurrence_scan<double>(impulse, L, d, g);
  for (std::size_t t = 0; t < L; ++t) CHECK(ci[t * d] == doctest::Approx(std::pow(0.8, double(t))));
  const std::vector<double> one{1.0};
  const auto cum = recurrence_scan<double>(ones, L, d, one);
  for (std::size_t t = 0; t < L; ++t) CHECK(cum[t * d] == double(t + 1));
}

TEST_CASE("scan matches the direct sum on random cases") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> len(1, 256), dim(1, 64);
  std::uniform_real_distribution<double> gam(0.05, 0.999);
  for (int c = 0; c < 50; ++c) {
    const std::size_t L = len(rng), d = dim(rng);
    const auto s = random_tensor<float>({L, d}, rng);
    std::vector<float> g(c % 2 ? d : 1);
    for (auto& v : g) v = static_cast<float>(gam(rng));
    const auto a = recurrence_direct<float>(s.values(), L, d, g);
    const auto b = recurrence_scan<float>(s.values(), L, d, g);
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, double(std::abs(a[i] - b[i])));
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("single-token layer output") {
  ParamSet<double> ps;
  std::mt19937_64 rng(2);
  Encoder<double> enc(ps, enc_config(1, 5), rng);
  const auto h = random_tensor<double>({1, 5}, rng);
  const auto out = run(enc, h, 1);
  const auto& lay = enc.layer(0);
  std::vector<double> x(h.values().begin(), h.values().end());
  std::vector<double> gain(lay.gain->value.values().begin(), lay.gain->value.values().end());
  const auto n = rms(x, gain, 1e-6);
  auto proj = [&](const Parameter<double>* w) {
    auto r = row_times(n, w->value);
    for (auto& v : r) v = silu(v);
    return r;
  };
  const auto q = proj(lay.wq), k = proj(lay.wk), v = proj(lay.wv), u = proj(lay.wu);
  for (std::size_t j = 0; j < 5; ++j)
    CHECK(out[j] == doctest::Approx(x[j] + q[j] * k[j] * v[j] * u[j]).epsilon(1e-12));
}

TEST_CASE("two-token state is gamma S1 + S2") {
  ParamSet<double> ps;
  std::mt19937_64 rng(4);
  Encoder<double> enc(ps, enc_config(1, 4), rng);
  enc.layer(0).decay->value[0] = 0.3;
  const double g = enc.gamma(0)[0];
  const auto h = random_tensor<double>({2, 4}, rng);
  const auto out = run(enc, h, 2);
  const auto& lay = enc.layer(0);
  std::vector<double> gain(lay.gain->value.values().begin(), lay.gain->value.values().end());
  std::vector<std::vector<double>> q(2), s(2), u(2);
  for (std::size_t t = 0; t < 2; ++t) {
    std::vector<double> x{h.at(t, 0), h.at(t, 1), h.at(t, 2), h.at(t, 3)};
    const auto n = rms(x, gain, 1e-6);
    auto p = [&](const Parameter<double>* w) {
      auto r = row_times(n, w->value);
      for (auto& v : r) v = silu(v);
      return r;
    };
    q[t] = p(lay.wq);
    u[t] = p(lay.wu);
    const auto k = p(lay.wk), v = p(lay.wv);
    for (std::size_t j = 0; j < 4; ++j) s[t].push_back(k[j] * v[j]);
  }
  for (std::size_t j = 0; j < 4; ++j) {
    const double c2 = g * s[0][j] + s[1][j];
    CHECK(out.at(1, j) == doctest::Approx(h.at(1, j) + q[1][j] * c2 * u[1][j]).epsilon(1e-12));
  }
}

TEST_CASE("zero layers is the identity and eval mode is repeatable") {
  std::mt19937_64 rng(6);
  ParamSet<float> ps0;
  Encoder<float> none(ps0, enc_config(0, 8), rng);
  const auto h = random_tensor<float>({10, 8}, rng);
  CHECK(run(none, h, 10) == h);
  ParamSet<float> ps;
  Encoder<float> enc(ps, enc_config(2, 8), rng);
  CHECK(run(enc, h, 10) == run(enc, h, 10));
}

TEST_CASE("dropout is active only in training") {
  std::mt19937_64 rng(6);
  ParamSet<float> ps;
  auto cfg = enc_config(2, 8);
  cfg.dropout = 0.5;
  Encoder<float> enc(ps, cfg, rng);
  const auto h = random_tensor<float>({10, 8}, rng);
  Tape<float> tape(false);
  std::mt19937_64 r1(1), r2(1);
  const auto a = enc.forward(tape, tape.constant(h), 10, true, &r1).value();
  const auto b = enc.forward(tape, tape.constant(h), 10, true, &r2).value();
  CHECK(a == b);
  CHECK_FALSE(a == run(enc, h, 10));
}

TEST_CASE("causality for both encoder variants") {
  for (bool quadratic : {false, true}) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      std::mt19937_64 rng(seed);
      ParamSet<float> ps;
      Encoder<float> enc(ps, enc_config(2, 8, quadratic), rng);
      const std::size_t L = 16;
      auto h = random_tensor<float>({2 * L, 8}, rng);
      const auto base = run(enc, h, L);
      const std::size_t t = seed * 3 + 2;
      for (std::size_t r = t + 1; r < L; ++r)
        for (std::size_t j = 0; j < 8; ++j) h.at(L + r, j) += 1.0f;
      const auto pert = run(enc, h, L);
      for (std::size_t r = 0; r < 2 * L; ++r)
        for (std::size_t j = 0; j < 8; ++j) {
          if (r < L || r - L <= t) CHECK(pert.at(r, j) == base.at(r, j));
        }
      CHECK_FALSE(pert == base);
    }
  }
}

TEST_CASE("streaming replay equals the batch forward") {
  std::mt19937_64 rng(9);
  ParamSet<float> ps;
  Encoder<float> enc(ps, enc_config(2, 16), rng);
  const std::size_t L = 128;
  const auto h = random_tensor<float>({L, 16}, rng);
  const auto batch = run(enc, h, L);
  auto state = enc.make_state(L);
  double worst = 0;
  for (std::size_t t = 0; t < L; ++t) {
    const auto out = enc.stream_step(state, std::span<const float>(&h.values()[t * 16], 16));
    for (std::size_t j = 0; j < 16; ++j) worst = std::max(worst, double(std::abs(out[j] - batch.at(t, j))));
  }
  CHECK(worst < 1e-4);
  CHECK(state.position == L);
  CHECK(state.size_bytes() == 2 * 16 * sizeof(float));
  CHECK_THROWS_AS(enc.stream_step(state, std::span<const float>(&h.values()[0], 16)), Error);

  auto fresh = enc.make_state(4);
  const auto one = enc.stream_step(fresh, std::span<const float>(&h.values()[0], 16));
  Tensor<float> first({1, 16}, std::vector<float>(h.values().begin(), h.values().begin() + 16));
  const auto single = run(enc, first, 1);
  for (std::size_t j = 0; j < 16; ++j) CHECK(one[j] == doctest::Approx(single[j]).epsilon(1e-6));
}

TEST_CASE("streaming in double precision") {
  std::mt19937_64 rng(10);
  ParamSet<double> ps;
  auto cfg = enc_config(2, 8);
  cfg.per_dim_gamma = true;
  Encoder<double> enc(ps, cfg, rng);
  const std::size_t L = 40;
  const auto h = random_tensor<double>({L, 8}, rng);
  const auto batch = run(enc, h, L);
  auto state = enc.make_state(L);
  for (std::size_t t = 0; t < L; ++t) {
    const auto out = enc.stream_step(state, std::span<const double>(&h.values()[t * 8], 8));
    for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(out[j] - batch.at(t, j)) < 1e-8);
  }
}

TEST_CASE("quadratic encoder has no streaming state") {
  std::mt19937_64 rng(1);
  ParamSet<float> ps;
  Encoder<float> enc(ps, enc_config(1, 8, true), rng);
  CHECK_THROWS_AS(enc.make_state(8), Error);
}

TEST_CASE("non-finite activations name the layer") {
  std::mt19937_64 rng(1);
  ParamSet<float> ps;
  Encoder<float> enc(ps, enc_config(2, 4), rng);
  enc.layer(1).wq->value.fill(std::numeric_limits<float>::quiet_NaN());
  const auto h = random_tensor<float>({3, 4}, rng);
  try {
    run(enc, h, 3);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("encoder layer 1") != std::string::npos);
  }
}

TEST_CASE("encoder gradient matches finite differences") {
  for (bool quadratic : {false, true}) {
    std::mt19937_64 rng(21);
    ParamSet<double> ps;
    Encoder<double> enc(ps, enc_config(2, 8, quadratic), rng);
    const auto h = random_tensor<double>({2 * 8, 8}, rng);
    const auto w = random_tensor<double>({2 * 8, 8}, rng);
    std::vector<Parameter<double>*> params;
    for (std::size_t i = 0; i < ps.size(); ++i) params.push_back(&ps[i]);
    const auto r = grad_check(
        [&](Tape<double>& tape) {
          Var<double> out = enc.forward(tape, tape.constant(h), 8, false, nullptr);
          return ops::sum(ops::mul(out, tape.constant(w)));
        },
        params, 1e-6);
    CAPTURE(quadratic);
    CAPTURE(r.worst_param);
    CHECK(r.max_rel_error < 1e-3);
  }
}
