#pragma once

#include <vector>

#include "qgs/autodiff.hpp"

namespace qgs {

// acc += g^2; p -= lr * g / (sqrt(acc) + eps)
class Adagrad {
 public:
  explicit Adagrad(double lr = 0.01, double eps = 1e-10, bool check_monotone = false)
      : lr_(lr), eps_(eps), check_(check_monotone) {}

  void step(ParamSet<float>& params);

  const std::vector<Tensor<float>>& accumulators() const { return acc_; }
  double learning_rate() const { return lr_; }

 private:
  double lr_, eps_;
  bool check_;
  std::vector<Tensor<float>> acc_;
};

}  // namespace qgs
