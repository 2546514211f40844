#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "qgs/datagen.hpp"

namespace qgs {

enum class Variant {
  full,
  item_only,
  no_hfg,
  no_context_features,
  quadratic_encoder,
  external_embedder,
};

const std::vector<Variant>& all_variants();
std::string to_string(Variant v);
Variant parse_variant(const std::string& name);

struct ModelConfig {
  std::size_t context_dim = kContextDim;
  std::size_t d_f = 16;
  std::size_t d_b = 16;
  std::size_t d_h = 64;
  std::size_t d_z = 0;  // 0: same as d_h
  std::size_t max_len = 1024;
  std::size_t num_layers = 2;
  double dropout = 0.1;
  double gamma_init = 0.95;
  bool per_dim_gamma = false;
  double temperature = 0.1;
  double norm_eps = 1e-6;

  std::size_t hfg_d_e = 16;
  std::size_t hfg_heads = 8;
  std::size_t hfg_ffn = 64;
  std::size_t hfg_d_o = 128;
  std::vector<std::size_t> group_dims{kGroupDims, kGroupDims + kNumGroups};
  std::size_t dnn_width = 64;
  std::size_t tower_hidden = 64;
  double gen_score_init = 0.1;

  double lambda = 1.0;
  Variant variant = Variant::full;
  std::string external_embeddings;  // checkpoint-format file with ext_cls / ext_sep

  std::size_t query_vocab = 16;
  std::size_t item_vocab = 128;
  std::uint64_t init_seed = 1;

  std::size_t z_dim() const { return d_z == 0 ? d_h : d_z; }
  std::size_t token_dim() const { return d_f + d_b; }
  std::size_t candidate_feature_dim() const;
  void validate() const;
};

}  // namespace qgs
