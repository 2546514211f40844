#pragma once

// Parameter initialisers and the affine layer shared by the model blocks.

#include <cmath>
#include <random>
#include <string>

#include "qgs/autodiff.hpp"
#include "qgs/ops.hpp"

namespace qgs::nn {

// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
template <class T>
Tensor<T> xavier(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / double(fan_in + fan_out));
  std::uniform_real_distribution<double> d(-a, a);
  Tensor<T> t({fan_in, fan_out});
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
  return t;
}

template <class T>
Tensor<T> normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, stddev);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
  return t;
}

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, bool bias,
         std::mt19937_64& rng) {
    w_ = &ps.ensure(name + ".w", {in, out}, [&] { return xavier<T>(in, out, rng); });
    if (bias) b_ = &ps.ensure(name + ".b", {out}, [&] { return Tensor<T>({out}); });
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    Var<T> y = ops::matmul(x, tape.param(*w_));
    return b_ ? ops::add_row(y, tape.param(*b_)) : y;
  }

  Parameter<T>& weight() const { return *w_; }
  Parameter<T>* bias() const { return b_; }
  std::size_t in_dim() const { return w_->value.dim(0); }
  std::size_t out_dim() const { return w_->value.dim(1); }

 private:
  Parameter<T>* w_ = nullptr;
  Parameter<T>* b_ = nullptr;
};

// Converts float feature rows to a constant of the model precision.
template <class T>
Var<T> constant_rows(Tape<T>& tape, const float* data, std::size_t rows, std::size_t cols) {
  Tensor<T> t({rows, cols});
  for (std::size_t i = 0; i < rows * cols; ++i) t[i] = static_cast<T>(data[i]);
  return tape.constant(std::move(t));
}

}  // namespace qgs::nn
