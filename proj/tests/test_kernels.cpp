#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "doctest.h"
#include "qgs/kernels.hpp"
#include "qgs/tensor.hpp"
#include "test_util.hpp"

using namespace qgs;
namespace k = qgs::kernels;

namespace {

std::vector<double> randn(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> out(n);
  for (auto& v : out) v = d(rng);
  return out;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

// C_t = sum_{i<=t} gamma^(t-i) S_i, written as an explicit power sum.
std::vector<double> scan_oracle(const k::SegmentLayout& l, const std::vector<double>& s,
                                const std::vector<double>& gamma) {
  std::vector<double> c(s.size(), 0.0);
  for (std::size_t seg = 0; seg < l.segments; ++seg)
    for (std::size_t t = 0; t < l.seg_len; ++t)
      for (std::size_t j = 0; j < l.dim; ++j) {
        double acc = 0;
        for (std::size_t i = 0; i <= t; ++i)
          acc += std::pow(gamma[j], double(t - i)) * s[(seg * l.seg_len + i) * l.dim + j];
        c[(seg * l.seg_len + t) * l.dim + j] = acc;
      }
  return c;
}

std::vector<double> attention_oracle(const k::AttentionShape& a, const std::vector<double>& q,
                                     const std::vector<double>& kk, const std::vector<double>& v) {
  const auto& l = a.layout;
  const std::size_t hd = l.dim / a.heads;
  std::vector<double> out(q.size(), 0.0);
  for (std::size_t seg = 0; seg < l.segments; ++seg)
    for (std::size_t h = 0; h < a.heads; ++h)
      for (std::size_t t = 0; t < l.seg_len; ++t) {
        const std::size_t end = a.causal ? t + 1 : l.seg_len;
        for (std::size_t tau = 0; tau < end; ++tau) {
          double dot = 0;
          for (std::size_t j = 0; j < hd; ++j)
            dot += q[(seg * l.seg_len + t) * l.dim + h * hd + j] *
                   kk[(seg * l.seg_len + tau) * l.dim + h * hd + j];
          const double w = silu(a.logit_scale * dot);
          for (std::size_t j = 0; j < hd; ++j)
            out[(seg * l.seg_len + t) * l.dim + h * hd + j] +=
                a.out_scale * w * v[(seg * l.seg_len + tau) * l.dim + h * hd + j];
        }
      }
  return out;
}

template <class T>
bool bit_equal(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

}  // namespace

TEST_CASE("decay scan matches the power-sum oracle") {
  std::mt19937_64 rng(1);
  k::SegmentLayout l{3, 17, 5};
  auto s = randn(l.segments * l.seg_len * l.dim, rng);
  std::vector<double> gamma{0.0, 0.5, 0.9, 0.95, 1.0};
  std::vector<double> c(s.size());
  k::serial::decay_scan_forward(l, s.data(), gamma.data(), c.data());
  auto ref = scan_oracle(l, s, gamma);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("decay scan with gamma zero copies the input") {
  std::mt19937_64 rng(2);
  k::SegmentLayout l{2, 6, 3};
  auto s = randn(36, rng);
  std::vector<double> gamma(3, 0.0), c(36);
  k::serial::decay_scan_forward(l, s.data(), gamma.data(), c.data());
  CHECK(c == s);
}

TEST_CASE("attention matches the direct sum") {
  std::mt19937_64 rng(3);
  for (bool causal : {true, false}) {
    for (std::size_t heads : {1, 2, 4}) {
      k::AttentionShape a{{2, 9, 8}, heads, causal, 1.0 / 8.0, causal ? 1.0 : 0.25};
      const std::size_t n = 2 * 9 * 8;
      auto q = randn(n, rng), kk = randn(n, rng), v = randn(n, rng);
      std::vector<double> out(n);
      k::serial::attention_forward(a, q.data(), kk.data(), v.data(), out.data());
      auto ref = attention_oracle(a, q, kk, v);
      for (std::size_t i = 0; i < n; ++i) CHECK(out[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("attention is causal") {
  std::mt19937_64 rng(4);
  k::AttentionShape a{{1, 10, 4}, 1, true, 0.25, 1.0};
  auto q = randn(40, rng), kk = randn(40, rng), v = randn(40, rng);
  std::vector<double> before(40), after(40);
  k::serial::attention_forward(a, q.data(), kk.data(), v.data(), before.data());
  for (std::size_t i = 24; i < 40; ++i) kk[i] = v[i] = 100.0;  // rows 6..9
  k::serial::attention_forward(a, q.data(), kk.data(), v.data(), after.data());
  for (std::size_t i = 0; i < 24; ++i) CHECK(before[i] == after[i]);
}

TEST_CASE("gemm matches the triple loop") {
  std::mt19937_64 rng(5);
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      const std::size_t m = 7, n = 5, kk = 6;
      auto a = randn(m * kk, rng), b = randn(kk * n, rng);
      std::vector<double> c(m * n, 1.0);
      k::gemm<double>(ta, tb, m, n, kk, a.data(), b.data(), c.data(), true);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 1.0;
          for (std::size_t p = 0; p < kk; ++p) {
            const double av = ta ? a[p * m + i] : a[i * kk + p];
            const double bv = tb ? b[j * kk + p] : b[p * n + j];
            acc += av * bv;
          }
          CHECK(c[i * n + j] == doctest::Approx(acc).epsilon(1e-12));
        }
    }
}

TEST_CASE("parallel kernels are bit-identical to serial") {
  std::mt19937_64 rng(6);
  const int saved = k::max_threads();
  for (int threads : {1, 2, 3, 4}) {
    k::set_threads(threads);
    CAPTURE(threads);

    std::normal_distribution<float> d(0.f, 1.f);
    for (k::SegmentLayout l : {k::SegmentLayout{5, 33, 7}, k::SegmentLayout{2, 17, 40},
                               k::SegmentLayout{8, 9, 37}, k::SegmentLayout{1, 50, 100}}) {
      CAPTURE(l.segments);
      CAPTURE(l.dim);
      const std::size_t n = l.segments * l.seg_len * l.dim;
      std::vector<float> s(n), gamma(l.dim), dc(n);
      for (auto& x : s) x = d(rng);
      for (auto& x : dc) x = d(rng);
      for (auto& g : gamma) g = 0.8f + 0.2f * std::abs(d(rng)) / 4.f;

      std::vector<float> c1(n), c2(n);
      k::serial::decay_scan_forward(l, s.data(), gamma.data(), c1.data());
      k::parallel::decay_scan_forward(l, s.data(), gamma.data(), c2.data());
      CHECK(bit_equal(c1, c2));

      std::vector<float> ds1(n), ds2(n), dg1(l.dim), dg2(l.dim);
      k::serial::decay_scan_backward(l, c1.data(), gamma.data(), dc.data(), ds1.data(), dg1.data());
      k::parallel::decay_scan_backward(l, c1.data(), gamma.data(), dc.data(), ds2.data(), dg2.data());
      CHECK(bit_equal(ds1, ds2));
      CHECK(bit_equal(dg1, dg2));
    }

    for (bool causal : {true, false}) {
      k::AttentionShape a{{4, 19, 8}, causal ? 1u : 2u, causal, 0.125, 1.0};
      const std::size_t m = 4 * 19 * 8;
      std::vector<float> q(m), kk(m), v(m), dout(m);
      for (auto* vec : {&q, &kk, &v, &dout})
        for (auto& x : *vec) x = d(rng);
      std::vector<float> o1(m), o2(m);
      k::serial::attention_forward(a, q.data(), kk.data(), v.data(), o1.data());
      k::parallel::attention_forward(a, q.data(), kk.data(), v.data(), o2.data());
      CHECK(bit_equal(o1, o2));
      std::vector<float> dq1(m), dk1(m), dv1(m), dq2(m), dk2(m), dv2(m);
      k::serial::attention_backward(a, q.data(), kk.data(), v.data(), dout.data(), dq1.data(),
                                    dk1.data(), dv1.data());
      k::parallel::attention_backward(a, q.data(), kk.data(), v.data(), dout.data(), dq2.data(),
                                      dk2.data(), dv2.data());
      CHECK(bit_equal(dq1, dq2));
      CHECK(bit_equal(dk1, dk2));
      CHECK(bit_equal(dv1, dv2));
    }
  }
  k::set_threads(saved);
}

TEST_CASE("backend switch dispatches") {
  std::mt19937_64 rng(7);
  k::SegmentLayout l{2, 8, 3};
  auto s = randn(48, rng);
  std::vector<double> gamma{0.9, 0.9, 0.9}, a(48), b(48);
  k::set_backend(k::Backend::serial);
  CHECK(k::backend() == k::Backend::serial);
  k::decay_scan_forward(l, s.data(), gamma.data(), a.data());
  k::set_backend(k::Backend::parallel);
  CHECK(k::backend() == k::Backend::parallel);
  k::decay_scan_forward(l, s.data(), gamma.data(), b.data());
  CHECK(bit_equal(a, b));
}
