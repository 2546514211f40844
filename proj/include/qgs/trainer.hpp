#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qgs/checkpoint.hpp"
#include "qgs/datagen.hpp"
#include "qgs/model.hpp"
#include "qgs/model_config.hpp"

namespace qgs {

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 16;
  std::uint64_t seed = 1;
  double lr = 0.03;
  double adagrad_eps = 1e-10;
  double grad_clip = 0;  // max global L2 norm; 0 disables
  std::size_t ctr_requests_per_session = 8;
  // Evaluation requests: every step with history, or only the last
  // `eval_last_steps` steps of each test session when non-zero.
  std::size_t eval_last_steps = 0;
  // Training windows of this many rows; evaluation uses the last window of
  // each test session. 0 keeps whole sessions.
  std::size_t history_window = 0;
  double test_fraction = 0.1;
  bool record_wall_ms = false;
  bool debug_checks = false;  // accumulator monotonicity and γ range after each step
  int threads = 1;

  void validate() const;
};

struct EvalResult {
  double loss_infonce = 0;
  double loss_ctr = 0;
  double auc = 0;
  double gauc = 0;
  std::size_t requests = 0;
  std::size_t skipped_requests = 0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_infonce = 0;
  double train_ctr = 0;
  EvalResult eval;
  double wall_ms = 0;
};

struct TrainResult {
  Checkpoint checkpoint;  // last good parameters
  std::vector<EpochMetrics> curve;
  bool diverged = false;
  std::string error;
  double mean_epoch_ms = 0;
};

// Model dims plus vocabulary sizes taken from the generator.
ModelConfig resolve_model_config(ModelConfig model, const GeneratorConfig& gen);

// Applies the history window to train / test sessions.
void prepare_sessions(const Dataset& ds, const TrainConfig& cfg, std::vector<Session>& train,
                      std::vector<Session>& test);

// Adds ranking requests for the given rows of each sequence.
void add_requests(Batch& batch, const std::vector<const Session*>& sessions,
                  const GeneratorConfig& gen, const std::vector<std::vector<std::size_t>>& rows);

std::uint64_t request_id(const Session& s, std::size_t row);

using EpochCallback = std::function<void(const EpochMetrics&)>;

TrainResult train(const ModelConfig& model, const TrainConfig& cfg, const Dataset& ds,
                  const EpochCallback& on_epoch = {});

EvalResult evaluate(const QgsModel<float>& model, const std::vector<Session>& sessions,
                    const GeneratorConfig& gen, const TrainConfig& cfg);
EvalResult evaluate_checkpoint(const Checkpoint& ckpt, const ModelConfig& model,
                               const TrainConfig& cfg, const Dataset& ds);

void write_metrics_csv(const std::string& path, const std::string& variant, std::uint64_t seed,
                       const std::vector<EpochMetrics>& curve, bool include_wall_ms);
std::string metrics_csv(const std::string& variant, std::uint64_t seed,
                        const std::vector<EpochMetrics>& curve, bool include_wall_ms);

struct AblationRow {
  Variant variant = Variant::full;
  EvalResult eval;
  double mean_epoch_ms = 0;
};

std::vector<AblationRow> run_ablation_matrix(const ModelConfig& model, const TrainConfig& cfg,
                                             const Dataset& ds, const std::vector<Variant>& variants);
std::string ablation_csv(const std::vector<AblationRow>& rows);

struct ScalePoint {
  std::size_t num_layers = 2;
  std::size_t d_h = 64;
  std::size_t history = 0;  // 0: whole session
};

struct ScaleRow {
  ScalePoint point;
  EvalResult eval;
  double mean_epoch_ms = 0;
};

// Windowed points keep rows per batch and ranking requests per session equal
// to the whole-session run, so only the visible history differs.
TrainConfig scaled_train_config(const TrainConfig& cfg, std::size_t session_len, std::size_t history);

std::vector<ScaleRow> run_scaling(const ModelConfig& model, const TrainConfig& cfg,
                                  const Dataset& ds, const std::vector<ScalePoint>& points);
std::string scaling_csv(const std::vector<ScaleRow>& rows);

}  // namespace qgs
