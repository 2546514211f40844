#include "qgs/objective.hpp"

namespace qgs {

template <class T>
PredictionHead<T>::PredictionHead(ParamSet<T>& ps, std::size_t in, std::size_t hidden,
                                  std::size_t out, std::mt19937_64& rng)
    : l1_(ps, "head.l1", in, hidden, true, rng), l2_(ps, "head.l2", hidden, out, true, rng) {}

template <class T>
Var<T> PredictionHead<T>::operator()(Tape<T>& tape, Var<T> x) const {
  return l2_(tape, ops::relu(l1_(tape, x)));
}

template <class T>
TargetProjection<T>::TargetProjection(ParamSet<T>& ps, std::size_t in, std::size_t out,
                                      std::mt19937_64& rng) {
  w_ = &ps.ensure("target.w", {in, out}, [&] { return nn::xavier<T>(in, out, rng); });
}

template <class T>
Var<T> predict_vector(Tape<T>& tape, Var<T> h, Var<T> e_sep_next, const PredictionHead<T>& head) {
  return head(tape, ops::concat_cols<T>({h, e_sep_next}));
}

template <class T>
Var<T> similarity(Var<T> z, Var<T> v, std::size_t batch, std::size_t steps, T tau, T eps) {
  if (!(tau > T{0})) throw Error("similarity: temperature must be positive");
  return ops::step_similarity(ops::l2_normalize(z, eps), ops::l2_normalize(v, eps), batch, steps,
                              T{1} / tau);
}

template <class T>
std::size_t InfoNceMask<T>::valid_rows() const {
  std::size_t n = 0;
  for (T w : row_weight) n += w > T{0};
  return n;
}

template <class T>
InfoNceMask<T> build_masks(std::size_t batch, std::size_t steps, std::span<const std::uint8_t> valid,
                           std::span<const std::uint32_t> next_items) {
  if (valid.size() != batch * steps || next_items.size() != batch * steps) {
    throw ShapeError("build_masks: expected " + std::to_string(batch * steps) + " entries, got " +
                     std::to_string(valid.size()) + " and " + std::to_string(next_items.size()));
  }
  InfoNceMask<T> m;
  m.batch = batch;
  m.steps = steps;
  m.additive = Tensor<T>({steps * batch, batch});
  m.target.resize(steps * batch);
  m.row_weight.assign(steps * batch, T{0});
  const T masked = static_cast<T>(kMaskValue);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t row = t * batch + b;
      m.target[row] = b;
      const bool row_valid = valid[b * steps + t] != 0;
      m.row_weight[row] = row_valid ? T{1} : T{0};
      for (std::size_t c = 0; c < batch; ++c) {
        const bool padded = valid[c * steps + t] == 0;
        const bool collision = c != b && next_items[c * steps + t] == next_items[b * steps + t];
        if (padded || collision) m.additive.at(row, c) = masked;
      }
      if (row_valid && m.additive.at(row, b) != T{0}) {
        throw Error("build_masks: positive logit masked at step " + std::to_string(t));
      }
    }
  }
  return m;
}

template <class T>
Var<T> apply_masks(Var<T> logits, const InfoNceMask<T>& mask) {
  return ops::add(logits, logits.tape()->constant(mask.additive));
}

template <class T>
Var<T> infonce_loss(Var<T> masked_logits, const InfoNceMask<T>& mask) {
  if (mask.valid_rows() == 0) throw Error("infonce_loss: no valid positions");
  return ops::cross_entropy_rows<T>(masked_logits, mask.target, mask.row_weight);
}

#define QGS_INSTANTIATE_OBJECTIVE(T)                                                             \
  template class PredictionHead<T>;                                                              \
  template class TargetProjection<T>;                                                            \
  template struct InfoNceMask<T>;                                                                \
  template Var<T> predict_vector<T>(Tape<T>&, Var<T>, Var<T>, const PredictionHead<T>&);         \
  template Var<T> similarity<T>(Var<T>, Var<T>, std::size_t, std::size_t, T, T);                 \
  template InfoNceMask<T> build_masks<T>(std::size_t, std::size_t, std::span<const std::uint8_t>, \
                                         std::span<const std::uint32_t>);                        \
  template Var<T> apply_masks<T>(Var<T>, const InfoNceMask<T>&);                                 \
  template Var<T> infonce_loss<T>(Var<T>, const InfoNceMask<T>&);

QGS_INSTANTIATE_OBJECTIVE(float)
QGS_INSTANTIATE_OBJECTIVE(double)

#undef QGS_INSTANTIATE_OBJECTIVE

}  // namespace qgs
