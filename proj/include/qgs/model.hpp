#pragma once

// Full ranking model: pair tokens -> encoder -> (a) query-conditioned
// next-item InfoNCE over the sequence and (b) CTR logits for candidate sets,
// fusing h_sparse (feature groups), the candidate embedding, h_dnn and h_seq.

#include <cstdint>
#include <random>
#include <vector>

#include "qgs/datagen.hpp"
#include "qgs/encoder.hpp"
#include "qgs/hfg.hpp"
#include "qgs/model_config.hpp"
#include "qgs/objective.hpp"
#include "qgs/pairtoken.hpp"

namespace qgs {

// One ranking request at row `row` (>= 1) of sequence `seq`: history is the
// rows before it, the query is the one at `row`.
struct CtrRequest {
  std::size_t seq = 0;
  std::size_t row = 0;
  std::uint64_t request_id = 0;
  CandidateSet candidates;
};

// `batch` sequences of `len` rows each, row index b * len + t.
struct Batch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<std::size_t> query_ids;
  std::vector<std::size_t> item_ids;
  std::vector<std::size_t> positions;
  std::vector<float> features;  // rows x context_dim
  std::vector<std::size_t> valid_len;
  std::vector<CtrRequest> requests;

  std::size_t rows() const { return batch * len; }
};

// Sessions must share one length. Requests are added separately.
Batch make_batch(const std::vector<const Session*>& sessions);

template <class T>
struct ModelOutputs {
  Var<T> total;
  Var<T> infonce;           // invalid when no position has a next item
  Var<T> ctr;               // invalid when the batch has no requests
  Var<T> hidden;            // rows x d_h encoder output
  Var<T> z;                 // (batch * (len-1)) x d_z, ordered b * (len-1) + t
  Var<T> ctr_logits;        // candidates x 1
  std::vector<T> ctr_labels;
  std::vector<std::uint64_t> ctr_request_ids;
};

template <class T>
class QgsModel {
 public:
  // Creates missing parameters in `params` from cfg.init_seed; existing ones
  // (e.g. loaded from a checkpoint or cast from another precision) are reused.
  QgsModel(const ModelConfig& cfg, ParamSet<T>& params);

  ModelOutputs<T> forward(Tape<T>& tape, const Batch& batch, bool train, std::mt19937_64* rng) const;

  // Pieces of the forward pass, exposed for tests and streaming.
  Var<T> context_features(Tape<T>& tape, const Batch& batch) const;
  Var<T> pair_tokens(Tape<T>& tape, const Batch& batch, Var<T> features) const;
  Var<T> encode(Tape<T>& tape, const Batch& batch, bool train, std::mt19937_64* rng) const;

  // Projected input token for streaming at `position`.
  std::vector<T> stream_token(std::size_t query_id, std::size_t item_id,
                              const float* raw_features, std::size_t position) const;

  const ModelConfig& config() const { return cfg_; }
  ParamSet<T>& params() const { return *params_; }
  const Encoder<T>& encoder() const { return encoder_; }
  const SemanticEmbedder<T>& embedder() const { return embedder_; }
  const PredictionHead<T>& head() const { return head_; }
  const HfgBlock<T>& hfg() const { return hfg_; }

 private:
  Var<T> shared_dnn(Tape<T>& tape, Var<T> raw) const;
  Var<T> tower(Tape<T>& tape, Var<T> fused) const;

  ModelConfig cfg_;
  ParamSet<T>* params_;
  SemanticEmbedder<T> embedder_;
  nn::Linear<T> feature_embed_;
  InputProjection<T> projection_;
  Encoder<T> encoder_;
  PredictionHead<T> head_;
  TargetProjection<T> target_;
  nn::Linear<T> dnn1_, dnn2_;
  HfgBlock<T> hfg_;
  Parameter<T>* fuse_gain_ = nullptr;
  Parameter<T>* fuse_bias_ = nullptr;
  nn::Linear<T> tower1_, tower2_;
  Parameter<T>* gen_weight_ = nullptr;
};

}  // namespace qgs
