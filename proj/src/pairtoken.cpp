#include "qgs/pairtoken.hpp"

#include "qgs/checkpoint.hpp"

namespace qgs {

template <class T>
SemanticEmbedder<T>::SemanticEmbedder(ParamSet<T>& ps, const ModelConfig& cfg,
                                      std::mt19937_64& rng)
    : d_b_(cfg.d_b), query_vocab_(cfg.query_vocab), item_vocab_(cfg.item_vocab) {
  query_table_ = &ps.ensure("embed.query", {query_vocab_, d_b_},
                            [&] { return nn::normal<T>({query_vocab_, d_b_}, 0.5, rng); });
  item_table_ = &ps.ensure("embed.item", {item_vocab_, d_b_},
                           [&] { return nn::normal<T>({item_vocab_, d_b_}, 0.5, rng); });
  if (cfg.variant != Variant::external_embedder) {
    mix_ = nn::Linear<T>(ps, "embed.mix", 2 * d_b_, d_b_, true, rng);
    return;
  }
  const Shape cls_shape{query_vocab_ * item_vocab_, d_b_};
  const Shape sep_shape{query_vocab_, d_b_};
  if (!cfg.external_embeddings.empty() && !ps.find("ext_cls")) {
    Checkpoint ext = load_checkpoint(cfg.external_embeddings);
    for (const char* key : {"ext_cls", "ext_sep"}) {
      const auto* t = ext.find(key);
      if (!t) throw IoError("external embedding file lacks tensor '" + std::string(key) + "'");
      ps.add(key, t->template cast<T>());
    }
  }
  // Without a file the frozen tables are a fixed random projection.
  std::mt19937_64 ext_rng(0xe47e4a1ull);
  ext_cls_ = &ps.ensure("ext_cls", cls_shape, [&] { return nn::normal<T>(cls_shape, 0.5, ext_rng); });
  ext_sep_ = &ps.ensure("ext_sep", sep_shape, [&] { return nn::normal<T>(sep_shape, 0.5, ext_rng); });
  ext_cls_->trainable = false;
  ext_sep_->trainable = false;
}

template <class T>
void SemanticEmbedder<T>::check_ids(std::span<const std::size_t> query_ids,
                                    std::span<const std::size_t> item_ids) const {
  if (query_ids.size() != item_ids.size()) {
    throw ShapeError("embed: " + std::to_string(query_ids.size()) + " query ids vs " +
                     std::to_string(item_ids.size()) + " item ids");
  }
  for (auto q : query_ids)
    if (q >= query_vocab_) throw Error("query id " + std::to_string(q) + " out of range");
  for (auto d : item_ids)
    if (d >= item_vocab_) throw Error("item id " + std::to_string(d) + " out of range");
}

template <class T>
Var<T> SemanticEmbedder<T>::cls(Tape<T>& tape, std::span<const std::size_t> query_ids,
                                std::span<const std::size_t> item_ids) const {
  check_ids(query_ids, item_ids);
  if (ext_cls_) {
    std::vector<std::size_t> pair(query_ids.size());
    for (std::size_t i = 0; i < pair.size(); ++i) pair[i] = query_ids[i] * item_vocab_ + item_ids[i];
    return ops::gather_rows<T>(tape.param(*ext_cls_), pair);
  }
  Var<T> q = ops::gather_rows<T>(tape.param(*query_table_), query_ids);
  Var<T> d = ops::gather_rows<T>(tape.param(*item_table_), item_ids);
  return ops::tanh(mix_(tape, ops::concat_cols<T>({q, d})));
}

template <class T>
Var<T> SemanticEmbedder<T>::sep(Tape<T>& tape, std::span<const std::size_t> query_ids) const {
  for (auto q : query_ids)
    if (q >= query_vocab_) throw Error("query id " + std::to_string(q) + " out of range");
  return ops::gather_rows<T>(tape.param(ext_sep_ ? *ext_sep_ : *query_table_), query_ids);
}

template <class T>
Var<T> SemanticEmbedder<T>::item(Tape<T>& tape, std::span<const std::size_t> item_ids) const {
  for (auto d : item_ids)
    if (d >= item_vocab_) throw Error("item id " + std::to_string(d) + " out of range");
  return ops::gather_rows<T>(tape.param(*item_table_), item_ids);
}

template <class T>
Embeddings<T> SemanticEmbedder<T>::embed(Tape<T>& tape, std::span<const std::size_t> query_ids,
                                         std::span<const std::size_t> item_ids) const {
  return {cls(tape, query_ids, item_ids), sep(tape, query_ids)};
}

template <class T>
Var<T> build_pair_token(Var<T> features, Var<T> cls) {
  return ops::concat_cols<T>({features, cls});
}

template <class T>
InputProjection<T>::InputProjection(ParamSet<T>& ps, const ModelConfig& cfg, std::mt19937_64& rng) {
  w_proj_ = &ps.ensure("proj.w", {cfg.token_dim(), cfg.d_h},
                       [&] { return nn::xavier<T>(cfg.token_dim(), cfg.d_h, rng); });
  pos_ = &ps.ensure("proj.pos", {cfg.max_len, cfg.d_h},
                    [&] { return nn::normal<T>({cfg.max_len, cfg.d_h}, 0.02, rng); });
}

template <class T>
Var<T> InputProjection<T>::operator()(Tape<T>& tape, Var<T> x,
                                      std::span<const std::size_t> positions) const {
  if (positions.size() != x.rows()) {
    throw ShapeError("project_input: " + std::to_string(positions.size()) + " positions for " +
                     to_string(x.shape()));
  }
  for (auto p : positions) {
    if (p >= max_len()) {
      throw Error("position " + std::to_string(p) + " >= max_len " + std::to_string(max_len()));
    }
  }
  Var<T> pos = ops::gather_rows<T>(tape.param(*pos_), positions);
  return ops::add(ops::matmul(x, tape.param(*w_proj_)), pos);
}

template class SemanticEmbedder<float>;
template class SemanticEmbedder<double>;
template class InputProjection<float>;
template class InputProjection<double>;
template Var<float> build_pair_token<float>(Var<float>, Var<float>);
template Var<double> build_pair_token<double>(Var<double>, Var<double>);

}  // namespace qgs
