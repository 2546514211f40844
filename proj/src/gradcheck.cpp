#include "qgs/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace qgs {

GradCheckResult grad_check(const std::function<Var<double>(Tape<double>&)>& f,
                           const std::vector<Parameter<double>*>& params, double eps,
                           std::size_t max_coords, std::uint64_t seed) {
  for (auto* p : params) p->grad.fill(0.0);
  std::vector<Tensor<double>> stopped;
  {
    Tape<double> tape(true);
    tape.record_stopped(&stopped);
    Var<double> loss = f(tape);
    tape.backward(loss);
  }
  auto eval = [&f, &stopped]() {
    Tape<double> tape(false);
    tape.replay_stopped(&stopped);
    return f(tape).value()[0];
  };

  GradCheckResult result;
  std::mt19937_64 rng(seed);
  for (auto* p : params) {
    std::vector<std::size_t> coords(p->value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords > 0 && coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double saved = p->value[i];
      p->value[i] = saved + eps;
      const double plus = eval();
      p->value[i] = saved - eps;
      const double minus = eval();
      p->value[i] = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.coordinates;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_param = p->name;
        result.worst_index = i;
        result.worst_analytic = analytic;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace qgs
