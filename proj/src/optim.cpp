#include "qgs/optim.hpp"

#include <cmath>

namespace qgs {

void Adagrad::step(ParamSet<float>& params) {
  if (acc_.size() != params.size()) {
    for (std::size_t i = acc_.size(); i < params.size(); ++i) acc_.emplace_back(params[i].value.shape());
  }
  const float lr = static_cast<float>(lr_), eps = static_cast<float>(eps_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable) continue;
    auto& acc = acc_[i];
    if (acc.shape() != p.value.shape()) throw ShapeError("adagrad: accumulator shape changed for " + p.name);
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const float g = p.grad[k];
      const float before = acc[k];
      acc[k] = before + g * g;
      if (check_ && acc[k] < before) throw Error("adagrad: accumulator decreased for " + p.name);
      p.value[k] -= lr * g / (std::sqrt(acc[k]) + eps);
    }
  }
}

}  // namespace qgs
