#pragma once

// Pair tokens x_t = [f_t ∥ e_cls] and their projection h0_t = x_t W_proj + p_t.
// e_cls mixes a query and an item embedding; e_sep is the query embedding
// alone and is kept out of x for the prediction head.

#include <random>
#include <span>
#include <vector>

#include "qgs/autodiff.hpp"
#include "qgs/model_config.hpp"
#include "qgs/nn.hpp"

namespace qgs {

template <class T>
struct Embeddings {
  Var<T> cls;  // rows x d_b
  Var<T> sep;  // rows x d_b
};

template <class T>
class SemanticEmbedder {
 public:
  SemanticEmbedder() = default;
  // With `external` set, e_cls / e_sep come from frozen tables ext_cls
  // (query_vocab * item_vocab rows, indexed q * item_vocab + d) and ext_sep.
  SemanticEmbedder(ParamSet<T>& ps, const ModelConfig& cfg, std::mt19937_64& rng);

  Embeddings<T> embed(Tape<T>& tape, std::span<const std::size_t> query_ids,
                      std::span<const std::size_t> item_ids) const;
  Var<T> cls(Tape<T>& tape, std::span<const std::size_t> query_ids,
             std::span<const std::size_t> item_ids) const;
  Var<T> sep(Tape<T>& tape, std::span<const std::size_t> query_ids) const;
  // Candidate-side item embedding used by the ranking tower.
  Var<T> item(Tape<T>& tape, std::span<const std::size_t> item_ids) const;

  bool external() const { return ext_cls_ != nullptr; }
  std::size_t width() const { return d_b_; }

 private:
  void check_ids(std::span<const std::size_t> query_ids, std::span<const std::size_t> item_ids) const;

  std::size_t d_b_ = 0, query_vocab_ = 0, item_vocab_ = 0;
  Parameter<T>* query_table_ = nullptr;
  Parameter<T>* item_table_ = nullptr;
  nn::Linear<T> mix_;
  Parameter<T>* ext_cls_ = nullptr;
  Parameter<T>* ext_sep_ = nullptr;
};

// [f ∥ e_cls], features first.
template <class T>
Var<T> build_pair_token(Var<T> features, Var<T> cls);

template <class T>
class InputProjection {
 public:
  InputProjection() = default;
  InputProjection(ParamSet<T>& ps, const ModelConfig& cfg, std::mt19937_64& rng);

  // x: rows x (d_f + d_b); positions[i] < max_len.
  Var<T> operator()(Tape<T>& tape, Var<T> x, std::span<const std::size_t> positions) const;

  std::size_t max_len() const { return pos_->value.dim(0); }
  Parameter<T>& weight() const { return *w_proj_; }
  Parameter<T>& positions() const { return *pos_; }

 private:
  Parameter<T>* w_proj_ = nullptr;
  Parameter<T>* pos_ = nullptr;
};

}  // namespace qgs
