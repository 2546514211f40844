#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "qgs/gradcheck.hpp"
#include "qgs/ops.hpp"
#include "test_util.hpp"

using namespace qgs;
using qgs::testing::random_tensor;

namespace {

double sigmoid_oracle(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<float> eval_unary(const std::vector<float>& in,
                              Var<float> (*op)(Var<float>)) {
  Tape<float> tape(false);
  auto x = tape.constant(Tensor<float>({in.size()}, in));
  auto y = op(x);
  return y.value().storage();
}

}  // namespace

TEST_CASE("silu values") {
  auto y = eval_unary({0.0f, 1.0f, -20.0f}, &ops::silu<float>);
  CHECK(y[0] == 0.0f);
  CHECK(y[1] == doctest::Approx(1.0 * sigmoid_oracle(1.0)).epsilon(1e-6));
  CHECK(y[1] == doctest::Approx(0.731058).epsilon(1e-5));
  CHECK(y[2] < 0.0f);
  CHECK(y[2] > -0.2785f);
}

TEST_CASE("silu rejects non-finite input") {
  Tape<float> tape(false);
  auto x = tape.constant(Tensor<float>({2}, {1.0f, std::nanf("")}));
  CHECK_THROWS_AS(ops::silu(x), NumericError);
}

TEST_CASE("silu is bounded below on random tensors") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    Tape<double> tape(false);
    auto x = tape.constant(random_tensor<double>({64, 16}, rng, 5.0));
    for (double v : ops::silu(x).value().values()) CHECK(v >= -0.279);
  }
}

TEST_CASE("rmsnorm examples") {
  Tape<double> tape(false);
  SUBCASE("equal magnitudes map to unit signs") {
    auto x = tape.constant(Tensor<double>({4}, {-2.5, 2.5, 2.5, -2.5}));
    auto g = tape.constant(Tensor<double>::filled({4}, 1.0));
    auto y = ops::rmsnorm(x, g, 0.0).value();
    CHECK(y[0] == doctest::Approx(-1.0));
    CHECK(y[1] == doctest::Approx(1.0));
    CHECK(y[2] == doctest::Approx(1.0));
    CHECK(y[3] == doctest::Approx(-1.0));
  }
  SUBCASE("hand-computed rms") {
    auto x = tape.constant(Tensor<double>({2}, {3.0, 4.0}));
    auto g = tape.constant(Tensor<double>::filled({2}, 1.0));
    auto y = ops::rmsnorm(x, g, 0.0).value();
    const double rms = std::sqrt((9.0 + 16.0) / 2.0);
    CHECK(y[0] == doctest::Approx(3.0 / rms));
    CHECK(y[1] == doctest::Approx(4.0 / rms));
  }
  SUBCASE("zero gain") {
    auto x = tape.constant(Tensor<double>({3}, {1.0, -2.0, 5.0}));
    auto g = tape.constant(Tensor<double>({3}));
    for (double v : ops::rmsnorm(x, g, 1e-6).value().values()) CHECK(v == 0.0);
  }
  SUBCASE("zero-length last dimension") {
    auto x = tape.constant(Tensor<double>({2, 0}));
    auto g = tape.constant(Tensor<double>({0}));
    CHECK_THROWS_AS(ops::rmsnorm(x, g, 1e-6), ShapeError);
  }
}

TEST_CASE("rmsnorm output has unit root-mean-square") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    Tape<double> tape(false);
    auto x = tape.constant(random_tensor<double>({8, 13}, rng, 3.0));
    auto g = tape.constant(Tensor<double>::filled({13}, 1.0));
    auto y = ops::rmsnorm(x, g, 0.0).value();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double ss = 0;
      for (double v : y.row(r)) ss += v * v;
      CHECK(std::sqrt(ss / 13.0) == doctest::Approx(1.0).epsilon(1e-5));
    }
  }
}

TEST_CASE("dense helpers") {
  Tape<double> tape(false);
  SUBCASE("l2_normalize") {
    auto y = ops::l2_normalize(tape.constant(Tensor<double>({2}, {3.0, 4.0})), 1e-6).value();
    CHECK(y[0] == doctest::Approx(0.6));
    CHECK(y[1] == doctest::Approx(0.8));
  }
  SUBCASE("l2_normalize clamps tiny norms") {
    auto y = ops::l2_normalize(tape.constant(Tensor<double>({2}, {0.0, 0.0})), 1e-6).value();
    CHECK(y[0] == 0.0);
  }
  SUBCASE("matmul identity") {
    std::mt19937_64 rng(3);
    Tensor<double> eye({3, 3});
    for (int i = 0; i < 3; ++i) eye.at(i, i) = 1.0;
    auto a = random_tensor<double>({3, 5}, rng);
    auto y = ops::matmul(tape.constant(eye), tape.constant(a)).value();
    CHECK(y == a);
  }
  SUBCASE("concat width") {
    auto a = tape.constant(Tensor<double>({1, 3}));
    auto b = tape.constant(Tensor<double>({1, 4}));
    CHECK(ops::concat_cols<double>({a, b}).cols() == 7);
  }
  SUBCASE("shape mismatch names both shapes") {
    auto a = tape.constant(Tensor<double>({2, 3}));
    auto b = tape.constant(Tensor<double>({4, 5}));
    try {
      ops::matmul(a, b);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2x3]") != std::string::npos);
      CHECK(msg.find("[4x5]") != std::string::npos);
    }
    CHECK_THROWS_AS(ops::add(a, tape.constant(Tensor<double>({3, 2}))), ShapeError);
  }
  SUBCASE("layernorm zero mean unit variance") {
    std::mt19937_64 rng(9);
    auto x = tape.constant(random_tensor<double>({4, 10}, rng, 2.0));
    auto y = ops::layernorm(x, tape.constant(Tensor<double>::filled({10}, 1.0)),
                            tape.constant(Tensor<double>({10})), 0.0)
                 .value();
    for (std::size_t r = 0; r < 4; ++r) {
      double mu = 0, var = 0;
      for (double v : y.row(r)) mu += v;
      mu /= 10;
      for (double v : y.row(r)) var += (v - mu) * (v - mu);
      CHECK(mu == doctest::Approx(0.0).epsilon(1e-12));
      CHECK(var / 10 == doctest::Approx(1.0));
    }
  }
}

TEST_CASE("grad_check on x^2") {
  Parameter<double> p{"x", Tensor<double>::scalar(3.0), Tensor<double>::scalar(0.0)};
  auto res = grad_check(
      [&](Tape<double>& tape) {
        auto x = tape.param(p);
        return ops::sum(ops::mul(x, x));
      },
      {&p}, 1e-6);
  CHECK(p.grad[0] == doctest::Approx(6.0));
  CHECK(res.max_rel_error < 1e-8);
}

TEST_CASE("grad_check on silu(matmul)") {
  std::mt19937_64 rng(11);
  Parameter<double> a{"a", random_tensor<double>({4, 4}, rng), Tensor<double>({4, 4})};
  Parameter<double> b{"b", random_tensor<double>({4, 4}, rng), Tensor<double>({4, 4})};
  auto weights = random_tensor<double>({4, 4}, rng);
  auto res = grad_check(
      [&](Tape<double>& tape) {
        auto y = ops::silu(ops::matmul(tape.param(a), tape.param(b)));
        return ops::sum(ops::mul(y, tape.constant(weights)));
      },
      {&a, &b}, 1e-6);
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("unused parameters receive exactly zero gradient") {
  Parameter<double> used{"u", Tensor<double>({2}, {1.0, 2.0}), Tensor<double>({2})};
  Parameter<double> unused{"n", Tensor<double>({2}, {3.0, 4.0}), Tensor<double>({2})};
  Tape<double> tape;
  tape.param(unused);
  auto loss = ops::sum(ops::silu(tape.param(used)));
  tape.backward(loss);
  CHECK(unused.grad[0] == 0.0);
  CHECK(unused.grad[1] == 0.0);
  CHECK(used.grad[0] != 0.0);
}

TEST_CASE("backward visits nodes in reverse recording order") {
  Tape<double> tape;
  Parameter<double> p{"p", Tensor<double>::scalar(1.0), Tensor<double>::scalar(0.0)};
  std::vector<std::size_t> visited;
  auto x = tape.param(p);
  auto chain = x;
  for (int i = 0; i < 5; ++i) {
    const std::size_t in = chain.id();
    chain = tape.record("probe", chain.value(), {chain},
                        [in, &visited](Tape<double>& t, std::size_t self) {
                          visited.push_back(self);
                          t.grad(in)[0] += t.grad(self)[0];
                        });
  }
  tape.backward(chain);
  REQUIRE(visited.size() == 5);
  for (std::size_t i = 1; i < visited.size(); ++i) CHECK(visited[i] < visited[i - 1]);
  CHECK(p.grad[0] == 1.0);
}

TEST_CASE("non-finite op output is surfaced") {
  Tape<double> tape(false);
  auto x = tape.constant(Tensor<double>({1}, {1e308}));
  CHECK_THROWS_AS(ops::scale(x, 10.0), NumericError);
}

// ---------------------------------------------------------------------------
// Property: every differentiable op matches central differences in 64-bit.

namespace {

using OpFn = std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>;

struct OpCase {
  std::string name;
  std::vector<Shape> inputs;
  OpFn fn;
  double input_offset = 0.0;
};

std::vector<OpCase> op_cases() {
  using V = std::vector<Var<double>>;
  std::vector<OpCase> cases;
  cases.push_back({"matmul", {{3, 4}, {4, 2}}, [](auto&, V& in) { return ops::matmul(in[0], in[1]); }});
  cases.push_back({"add", {{3, 4}, {3, 4}}, [](auto&, V& in) { return ops::add(in[0], in[1]); }});
  cases.push_back({"sub", {{3, 4}, {3, 4}}, [](auto&, V& in) { return ops::sub(in[0], in[1]); }});
  cases.push_back({"mul", {{3, 4}, {3, 4}}, [](auto&, V& in) { return ops::mul(in[0], in[1]); }});
  cases.push_back({"add_row", {{3, 4}, {4}}, [](auto&, V& in) { return ops::add_row(in[0], in[1]); }});
  cases.push_back({"mul_row", {{3, 4}, {4}}, [](auto&, V& in) { return ops::mul_row(in[0], in[1]); }});
  cases.push_back({"scale", {{3, 4}}, [](auto&, V& in) { return ops::scale(in[0], 2.5); }});
  cases.push_back({"scale_by", {{3, 4}, {1}}, [](auto&, V& in) { return ops::scale_by(in[0], in[1]); }});
  cases.push_back({"silu", {{3, 4}}, [](auto&, V& in) { return ops::silu(in[0]); }});
  cases.push_back({"relu", {{3, 4}}, [](auto&, V& in) { return ops::relu(in[0]); }});
  cases.push_back({"sigmoid", {{3, 4}}, [](auto&, V& in) { return ops::sigmoid(in[0]); }});
  cases.push_back({"tanh", {{3, 4}}, [](auto&, V& in) { return ops::tanh(in[0]); }});
  cases.push_back({"rmsnorm", {{3, 5}, {5}}, [](auto&, V& in) { return ops::rmsnorm(in[0], in[1], 1e-6); }});
  cases.push_back({"rmsnorm_nogain", {{3, 5}}, [](auto&, V& in) { return ops::rmsnorm(in[0], 1e-6); }});
  cases.push_back({"layernorm", {{3, 5}, {5}, {5}},
                   [](auto&, V& in) { return ops::layernorm(in[0], in[1], in[2], 1e-6); }});
  cases.push_back({"l2_normalize", {{3, 5}}, [](auto&, V& in) { return ops::l2_normalize(in[0], 1e-6); }});
  cases.push_back({"concat_cols", {{3, 2}, {3, 4}},
                   [](auto&, V& in) { return ops::concat_cols<double>({in[0], in[1], in[0]}); }});
  cases.push_back({"concat_rows", {{2, 3}, {4, 3}},
                   [](auto&, V& in) { return ops::concat_rows<double>({in[1], in[0]}); }});
  cases.push_back({"slice_cols", {{3, 6}}, [](auto&, V& in) { return ops::slice_cols(in[0], 1, 3); }});
  cases.push_back({"gather_rows", {{5, 3}}, [](auto&, V& in) {
                     const std::vector<std::size_t> idx{4, 0, 4, 2};
                     return ops::gather_rows<double>(in[0], idx);
                   }});
  cases.push_back({"reshape", {{3, 4}}, [](auto&, V& in) { return ops::reshape(in[0], {6, 2}); }});
  cases.push_back({"sum", {{3, 4}}, [](auto&, V& in) { return ops::sum(in[0]); }});
  cases.push_back({"mean", {{3, 4}}, [](auto&, V& in) { return ops::mean(in[0]); }});
  cases.push_back({"decay_scan_shared", {{12, 3}, {1}},
                   [](auto&, V& in) { return ops::decay_scan(in[0], ops::sigmoid(in[1]), 4); }});
  cases.push_back({"decay_scan_per_dim", {{12, 3}, {3}},
                   [](auto&, V& in) { return ops::decay_scan(in[0], ops::sigmoid(in[1]), 6); }});
  cases.push_back({"attention_causal", {{8, 4}, {8, 4}, {8, 4}}, [](auto&, V& in) {
                     ops::AttentionSpec spec{4, 1, true, 0.25, 1.0};
                     return ops::pointwise_attention(in[0], in[1], in[2], spec);
                   }});
  cases.push_back({"attention_bidirectional_heads", {{6, 4}, {6, 4}, {6, 4}}, [](auto&, V& in) {
                     ops::AttentionSpec spec{3, 2, false, 0.5, 1.0 / 3.0};
                     return ops::pointwise_attention(in[0], in[1], in[2], spec);
                   }});
  cases.push_back({"segment_mean", {{6, 3}}, [](auto&, V& in) {
                     const std::vector<double> mask{1, 0, 1, 1, 1, 0};
                     return ops::segment_mean<double>(in[0], mask, 3);
                   }});
  cases.push_back({"rowwise_dot", {{4, 3}, {4, 3}}, [](auto&, V& in) { return ops::rowwise_dot(in[0], in[1]); }});
  cases.push_back({"step_similarity", {{6, 3}, {6, 3}},
                   [](auto&, V& in) { return ops::step_similarity(in[0], in[1], 2, 3, 1.7); }});
  cases.push_back({"cross_entropy_rows", {{4, 3}}, [](auto&, V& in) {
                     const std::vector<std::size_t> tgt{0, 2, 1, 1};
                     const std::vector<double> w{1.0, 0.0, 2.0, 1.0};
                     return ops::cross_entropy_rows<double>(in[0], tgt, w);
                   }});
  cases.push_back({"bce_with_logits", {{5, 1}}, [](auto&, V& in) {
                     const std::vector<double> y{1, 0, 0, 1, 1};
                     return ops::bce_with_logits<double>(in[0], y);
                   }});
  return cases;
}

}  // namespace

TEST_CASE("op gradients match central differences over 20 seeds") {
  for (const auto& c : op_cases()) {
    CAPTURE(c.name);
    double worst = 0, worst_analytic = 0, worst_numeric = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(seed * 7919 + 1);
      std::vector<Parameter<double>> params;
      params.reserve(c.inputs.size());
      for (std::size_t i = 0; i < c.inputs.size(); ++i) {
        params.push_back({"in" + std::to_string(i), random_tensor<double>(c.inputs[i], rng),
                          Tensor<double>(c.inputs[i])});
      }
      Tensor<double> weights;
      {
        Tape<double> probe(false);
        std::vector<Var<double>> in;
        for (auto& p : params) in.push_back(probe.param(p));
        weights = random_tensor<double>(c.fn(probe, in).shape(), rng);
      }
      std::vector<Parameter<double>*> ptrs;
      for (auto& p : params) ptrs.push_back(&p);
      auto res = grad_check(
          [&](Tape<double>& tape) {
            std::vector<Var<double>> in;
            for (auto& p : params) in.push_back(tape.param(p));
            auto out = c.fn(tape, in);
            return ops::sum(ops::mul(out, tape.constant(weights)));
          },
          ptrs, 1e-5);
      if (res.max_rel_error > worst) {
        worst = res.max_rel_error;
        worst_analytic = res.worst_analytic;
        worst_numeric = res.worst_numeric;
      }
    }
    CAPTURE(worst_analytic);
    CAPTURE(worst_numeric);
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("stop_gradient severs the path") {
  Parameter<double> p{"p", Tensor<double>({2}, {0.5, -1.0}), Tensor<double>({2})};
  Tape<double> tape;
  auto x = tape.param(p);
  auto loss = ops::sum(ops::mul(ops::stop_gradient(x), ops::stop_gradient(x)));
  tape.backward(loss);
  CHECK(p.grad[0] == 0.0);
  CHECK(p.grad[1] == 0.0);
}

TEST_CASE("dropout is identity at rate zero and unbiased otherwise") {
  std::mt19937_64 rng(5);
  Tape<double> tape(false);
  auto x = tape.constant(Tensor<double>::filled({200, 50}, 1.0));
  CHECK(ops::dropout(x, 0.0, rng).id() == x.id());
  auto y = ops::dropout(x, 0.25, rng).value();
  double mean = 0;
  for (double v : y.values()) mean += v;
  mean /= static_cast<double>(y.size());
  CHECK(mean == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("masked rows of cross entropy get no gradient") {
  Parameter<double> p{"l", Tensor<double>({2, 3}, {1, 2, 3, -1e9, 0.5, 0.1}), Tensor<double>({2, 3})};
  Tape<double> tape;
  const std::vector<std::size_t> tgt{0, 1};
  const std::vector<double> w{0.0, 1.0};
  tape.backward(ops::cross_entropy_rows<double>(tape.param(p), tgt, w));
  CHECK(p.grad[0] == 0.0);
  CHECK(p.grad[1] == 0.0);
  CHECK(p.grad[3] == 0.0);  // the -1e9 entry: softmax weight underflows to zero
  CHECK(p.grad[4] != 0.0);
}
