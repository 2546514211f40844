#include "qgs/model.hpp"

#include <algorithm>

namespace qgs {

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::full,
                                      Variant::item_only,
                                      Variant::no_hfg,
                                      Variant::no_context_features,
                                      Variant::quadratic_encoder,
                                      Variant::external_embedder};
  return v;
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::item_only: return "item_only";
    case Variant::no_hfg: return "no_hfg";
    case Variant::no_context_features: return "no_context_features";
    case Variant::quadratic_encoder: return "quadratic_encoder";
    case Variant::external_embedder: return "external_embedder";
  }
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : all_variants())
    if (to_string(v) == name) return v;
  throw ConfigError("unknown variant '" + name + "'");
}

std::size_t ModelConfig::candidate_feature_dim() const {
  std::size_t n = 0;
  for (auto d : group_dims) n += d;
  return n;
}

void ModelConfig::validate() const {
  if (d_f == 0 || d_b == 0 || d_h == 0) throw ConfigError("model widths must be positive");
  if (num_layers == 0) throw ConfigError("model.num_layers must be >= 1");
  if (!(temperature > 0)) throw ConfigError("model.temperature must be > 0");
  if (dropout < 0 || dropout >= 1) throw ConfigError("model.dropout must lie in [0,1)");
  if (!(gamma_init > 0 && gamma_init < 1)) throw ConfigError("model.gamma_init must lie in (0,1)");
  if (hfg_heads == 0 || hfg_d_e % hfg_heads != 0)
    throw ConfigError("model.hfg_d_e must be divisible by model.hfg_heads");
  if (lambda < 0) throw ConfigError("model.lambda must be >= 0");
  if (max_len < 2) throw ConfigError("model.max_len must be >= 2");
}

Batch make_batch(const std::vector<const Session*>& sessions) {
  Batch b;
  b.batch = sessions.size();
  if (sessions.empty()) return b;
  b.len = sessions.front()->length();
  const std::size_t n = b.rows();
  b.query_ids.resize(n);
  b.item_ids.resize(n);
  b.positions.resize(n);
  b.features.resize(n * kContextDim);
  for (std::size_t s = 0; s < sessions.size(); ++s) {
    const Session& ses = *sessions[s];
    if (ses.length() != b.len) throw ShapeError("make_batch: sessions differ in length");
    b.valid_len.push_back(ses.valid_len);
    for (std::size_t t = 0; t < b.len; ++t) {
      const std::size_t r = s * b.len + t;
      b.query_ids[r] = ses.query_text_ids[t];
      b.item_ids[r] = ses.item_ids[t];
      b.positions[r] = t;
    }
    std::copy(ses.features.begin(), ses.features.end(), b.features.begin() + s * b.len * kContextDim);
  }
  return b;
}

template <class T>
QgsModel<T>::QgsModel(const ModelConfig& cfg, ParamSet<T>& params) : cfg_(cfg), params_(&params) {
  cfg.validate();
  std::mt19937_64 rng(cfg.init_seed);
  embedder_ = SemanticEmbedder<T>(params, cfg, rng);
  feature_embed_ = nn::Linear<T>(params, "features", cfg.context_dim, cfg.d_f, true, rng);
  projection_ = InputProjection<T>(params, cfg, rng);
  encoder_ = Encoder<T>(params, EncoderConfig::from(cfg), rng);
  const bool item_only = cfg.variant == Variant::item_only;
  head_ = PredictionHead<T>(params, item_only ? cfg.d_h : cfg.d_h + cfg.d_b, cfg.d_h, cfg.z_dim(), rng);
  target_ = TargetProjection<T>(params, cfg.token_dim(), cfg.z_dim(), rng);
  dnn1_ = nn::Linear<T>(params, "dnn.l1", cfg.context_dim, cfg.dnn_width, true, rng);
  dnn2_ = nn::Linear<T>(params, "dnn.l2", cfg.dnn_width, cfg.dnn_width, true, rng);
  std::size_t fused = cfg.d_b + cfg.dnn_width + cfg.d_h;
  if (cfg.variant != Variant::no_hfg) {
    HfgConfig h;
    h.group_dims = cfg.group_dims;
    h.context_dim = cfg.dnn_width;
    h.d_e = cfg.hfg_d_e;
    h.heads = cfg.hfg_heads;
    h.ffn = cfg.hfg_ffn;
    h.d_o = cfg.hfg_d_o;
    h.norm_eps = cfg.norm_eps;
    hfg_ = HfgBlock<T>(params, h, rng);
    fused += cfg.hfg_d_o;
  }
  fuse_gain_ = &params.ensure("fuse.gain", {fused}, [&] { return Tensor<T>::filled({fused}, T{1}); });
  fuse_bias_ = &params.ensure("fuse.bias", {fused}, [&] { return Tensor<T>({fused}); });
  tower1_ = nn::Linear<T>(params, "tower.l1", fused, cfg.tower_hidden, true, rng);
  tower2_ = nn::Linear<T>(params, "tower.l2", cfg.tower_hidden, 1, true, rng);
  gen_weight_ = &params.ensure("fuse.gen_weight", {1}, [&] {
    return Tensor<T>::filled({1}, static_cast<T>(cfg.gen_score_init));
  });
}

template <class T>
Var<T> QgsModel<T>::context_features(Tape<T>& tape, const Batch& batch) const {
  if (cfg_.variant == Variant::no_context_features) {
    return tape.constant(Tensor<T>({batch.rows(), cfg_.d_f}));
  }
  return feature_embed_(tape, nn::constant_rows<T>(tape, batch.features.data(), batch.rows(),
                                                   cfg_.context_dim));
}

template <class T>
Var<T> QgsModel<T>::pair_tokens(Tape<T>& tape, const Batch& batch, Var<T> features) const {
  return build_pair_token(features, embedder_.cls(tape, batch.query_ids, batch.item_ids));
}

template <class T>
Var<T> QgsModel<T>::encode(Tape<T>& tape, const Batch& batch, bool train, std::mt19937_64* rng) const {
  Var<T> x = pair_tokens(tape, batch, context_features(tape, batch));
  return encoder_.forward(tape, projection_(tape, x, batch.positions), batch.len, train, rng);
}

template <class T>
Var<T> QgsModel<T>::shared_dnn(Tape<T>& tape, Var<T> raw) const {
  return ops::relu(dnn2_(tape, ops::relu(dnn1_(tape, raw))));
}

template <class T>
Var<T> QgsModel<T>::tower(Tape<T>& tape, Var<T> fused) const {
  Var<T> n = ops::layernorm(fused, tape.param(*fuse_gain_), tape.param(*fuse_bias_),
                            static_cast<T>(cfg_.norm_eps));
  return tower2_(tape, ops::relu(tower1_(tape, n)));
}

template <class T>
ModelOutputs<T> QgsModel<T>::forward(Tape<T>& tape, const Batch& batch, bool train,
                                     std::mt19937_64* rng) const {
  if (batch.batch == 0 || batch.len < 2) throw Error("forward: batch needs sequences of length >= 2");
  const std::size_t B = batch.batch, L = batch.len, steps = L - 1;
  const T eps = static_cast<T>(cfg_.norm_eps);
  const T tau = static_cast<T>(cfg_.temperature);
  ModelOutputs<T> out;

  Var<T> f = context_features(tape, batch);
  Var<T> x = pair_tokens(tape, batch, f);
  Var<T> h = encoder_.forward(tape, projection_(tape, x, batch.positions), L, train, rng);
  Var<T> sep = embedder_.sep(tape, batch.query_ids);
  out.hidden = h;

  // Next-item prediction at every step t < L-1.
  std::vector<std::size_t> cur(B * steps), next(B * steps);
  std::vector<std::uint8_t> valid(B * steps);
  std::vector<std::uint32_t> next_items(B * steps);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < steps; ++t) {
      const std::size_t i = b * steps + t;
      cur[i] = b * L + t;
      next[i] = b * L + t + 1;
      valid[i] = t + 1 < batch.valid_len[b];
      next_items[i] = static_cast<std::uint32_t>(batch.item_ids[next[i]]);
    }
  Var<T> h_t = ops::gather_rows<T>(h, cur);
  Var<T> head_in =
      cfg_.variant == Variant::item_only ? h_t : ops::concat_cols<T>({h_t, ops::gather_rows<T>(sep, next)});
  Var<T> z = head_(tape, head_in);
  out.z = z;
  const auto mask = build_masks<T>(B, steps, valid, next_items);
  std::vector<Var<T>> terms;
  if (mask.valid_rows() > 0) {
    Var<T> v = target_(tape, ops::gather_rows<T>(x, next));
    Var<T> logits = similarity(z, v, B, steps, tau, eps);
    out.infonce = infonce_loss(apply_masks(logits, mask), mask);
    terms.push_back(cfg_.lambda == 1.0 ? out.infonce : ops::scale(out.infonce, static_cast<T>(cfg_.lambda)));
  }

  // Ranking requests.
  if (!batch.requests.empty()) {
    const std::size_t R = batch.requests.size();
    std::vector<std::size_t> req_row(R), hist_row(R), z_row(R);
    std::vector<std::size_t> cand_req, cand_item, cand_query;
    std::vector<float> cand_feat;
    for (std::size_t r = 0; r < R; ++r) {
      const auto& q = batch.requests[r];
      if (q.seq >= B || q.row == 0 || q.row >= batch.valid_len[q.seq]) {
        throw Error("forward: request row " + std::to_string(q.row) + " invalid for sequence " +
                    std::to_string(q.seq));
      }
      req_row[r] = q.seq * L + q.row;
      hist_row[r] = q.seq * L + q.row - 1;
      z_row[r] = q.seq * steps + q.row - 1;
      const auto& c = q.candidates;
      for (std::size_t i = 0; i < c.items.size(); ++i) {
        cand_req.push_back(r);
        cand_item.push_back(c.items[i]);
        cand_query.push_back(batch.query_ids[req_row[r]]);
        out.ctr_labels.push_back(static_cast<T>(c.labels[i]));
        out.ctr_request_ids.push_back(q.request_id);
      }
      cand_feat.insert(cand_feat.end(), c.features.begin(), c.features.end());
    }
    const std::size_t C = cand_item.size();
    Var<T> raw = nn::constant_rows<T>(tape, batch.features.data(), batch.rows(), cfg_.context_dim);
    Var<T> h_dnn = shared_dnn(tape, ops::gather_rows<T>(raw, req_row));
    Var<T> h_seq = ops::gather_rows<T>(h, hist_row);
    Var<T> z_req = ops::gather_rows<T>(z, z_row);

    // Generative score: cosine between the shared head's prediction and the
    // candidate's target vector, as in the next-item objective.
    Var<T> x_c = build_pair_token(ops::gather_rows<T>(ops::gather_rows<T>(f, req_row), cand_req),
                                  embedder_.cls(tape, cand_query, cand_item));
    Var<T> v_c = ops::l2_normalize(target_(tape, x_c), eps);
    Var<T> z_c = ops::l2_normalize(ops::gather_rows<T>(z_req, cand_req), eps);
    Var<T> s_gen = ops::scale(ops::rowwise_dot(z_c, v_c), T{1} / tau);

    Var<T> h_dnn_c = ops::gather_rows<T>(h_dnn, cand_req);
    std::vector<Var<T>> parts;
    if (cfg_.variant != Variant::no_hfg) {
      Var<T> groups = nn::constant_rows<T>(tape, cand_feat.data(), C, cfg_.candidate_feature_dim());
      parts.push_back(hfg_.forward(tape, groups, h_dnn_c));
    }
    parts.push_back(embedder_.item(tape, cand_item));
    parts.push_back(h_dnn_c);
    parts.push_back(ops::gather_rows<T>(h_seq, cand_req));
    Var<T> logit = ops::add(tower(tape, ops::concat_cols<T>(parts)),
                            ops::scale_by(s_gen, tape.param(*gen_weight_)));
    out.ctr_logits = logit;
    out.ctr = ops::bce_with_logits<T>(logit, out.ctr_labels);
    terms.push_back(out.ctr);
  }

  if (terms.empty()) throw Error("forward: batch has neither valid positions nor requests");
  out.total = terms.size() == 1 ? terms[0] : ops::add(terms[0], terms[1]);
  return out;
}

template <class T>
std::vector<T> QgsModel<T>::stream_token(std::size_t query_id, std::size_t item_id,
                                         const float* raw_features, std::size_t position) const {
  Batch b;
  b.batch = 1;
  b.len = 1;
  b.query_ids = {query_id};
  b.item_ids = {item_id};
  b.positions = {position};
  b.features.assign(raw_features, raw_features + cfg_.context_dim);
  b.valid_len = {1};
  Tape<T> tape(false);
  Var<T> x = pair_tokens(tape, b, context_features(tape, b));
  const auto& h0 = projection_(tape, x, b.positions).value();
  return std::vector<T>(h0.values().begin(), h0.values().end());
}

template class QgsModel<float>;
template class QgsModel<double>;

}  // namespace qgs
