#include "qgs/trainer.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "qgs/binio.hpp"
#include "qgs/kernels.hpp"
#include "qgs/metrics.hpp"
#include "qgs/optim.hpp"

namespace qgs {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::vector<const Session*> pointers(const std::vector<Session>& sessions, std::size_t begin,
                                     std::size_t end, const std::vector<std::size_t>* order = nullptr) {
  std::vector<const Session*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&sessions[order ? (*order)[i] : i]);
  return out;
}

bool grads_finite(const ParamSet<float>& params) {
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!params[i].grad.all_finite()) return false;
  return true;
}

void clip_gradients(ParamSet<float>& params, double max_norm) {
  double ss = 0;
  for (std::size_t i = 0; i < params.size(); ++i)
    for (float g : params[i].grad.values()) ss += double(g) * double(g);
  const double norm = std::sqrt(ss);
  if (norm <= max_norm) return;
  const float s = static_cast<float>(max_norm / norm);
  for (std::size_t i = 0; i < params.size(); ++i)
    for (float& g : params[i].grad.values()) g *= s;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
  if (!(lr >= 0)) throw ConfigError("train.lr must be >= 0");
  if (!(test_fraction > 0 && test_fraction < 1)) throw ConfigError("train.test_fraction must lie in (0,1)");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (grad_clip < 0) throw ConfigError("train.grad_clip must be >= 0");
  if (history_window == 1) throw ConfigError("train.history_window must be 0 or >= 2");
}

ModelConfig resolve_model_config(ModelConfig model, const GeneratorConfig& gen) {
  model.query_vocab = gen.query_vocab_size();
  model.item_vocab = gen.vocab_size();
  if (model.max_len < gen.session_len) {
    throw ConfigError("model.max_len (" + std::to_string(model.max_len) + ") < session_len (" +
                      std::to_string(gen.session_len) + ")");
  }
  return model;
}

void prepare_sessions(const Dataset& ds, const TrainConfig& cfg, std::vector<Session>& train,
                      std::vector<Session>& test) {
  std::vector<Session> tr, te;
  split_dataset(ds, cfg.test_fraction, tr, te);
  const std::size_t L = ds.config.session_len;
  const std::size_t W = cfg.history_window;
  if (W == 0 || W >= L) {
    train = std::move(tr);
    test = std::move(te);
    return;
  }
  train.clear();
  for (const auto& s : tr)
    for (std::size_t b = 0; b + W <= L; b += W) {
      Session w = slice_session(s, b, W);
      if (w.valid_len >= 2) train.push_back(std::move(w));
    }
  test.clear();
  for (const auto& s : te) {
    Session w = slice_session(s, L - W, W);
    if (w.valid_len >= 2) test.push_back(std::move(w));
  }
}

std::uint64_t request_id(const Session& s, std::size_t row) {
  return (s.id << 24) | static_cast<std::uint64_t>(s.origin_step + row);
}

void add_requests(Batch& batch, const std::vector<const Session*>& sessions,
                  const GeneratorConfig& gen, const std::vector<std::vector<std::size_t>>& rows) {
  for (std::size_t b = 0; b < sessions.size(); ++b) {
    for (std::size_t row : rows[b]) {
      CtrRequest r;
      r.seq = b;
      r.row = row;
      r.request_id = request_id(*sessions[b], row);
      r.candidates = generate_candidates(gen, *sessions[b], sessions[b]->origin_step + row);
      batch.requests.push_back(std::move(r));
    }
  }
}

EvalResult evaluate(const QgsModel<float>& model, const std::vector<Session>& sessions,
                    const GeneratorConfig& gen, const TrainConfig& cfg) {
  EvalResult r;
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  std::vector<std::uint64_t> ids;
  double infonce_sum = 0, infonce_w = 0, ctr_sum = 0, ctr_w = 0;
  for (std::size_t begin = 0; begin < sessions.size(); begin += cfg.batch_size) {
    const std::size_t end = std::min(sessions.size(), begin + cfg.batch_size);
    auto ptrs = pointers(sessions, begin, end);
    Batch batch = make_batch(ptrs);
    std::vector<std::vector<std::size_t>> rows(ptrs.size());
    for (std::size_t b = 0; b < ptrs.size(); ++b) {
      const std::size_t v = ptrs[b]->valid_len;
      const std::size_t first = cfg.eval_last_steps ? std::max<std::size_t>(1, v - std::min(v, cfg.eval_last_steps)) : 1;
      for (std::size_t t = first; t < v; ++t) rows[b].push_back(t);
    }
    add_requests(batch, ptrs, gen, rows);
    Tape<float> tape(false);
    auto out = model.forward(tape, batch, false, nullptr);
    if (out.infonce.valid()) {
      std::size_t valid = 0;
      for (std::size_t b = 0; b < batch.batch; ++b) valid += batch.valid_len[b] > 0 ? batch.valid_len[b] - 1 : 0;
      infonce_sum += double(out.infonce.value()[0]) * double(valid);
      infonce_w += double(valid);
    }
    if (out.ctr.valid()) {
      const auto& logits = out.ctr_logits.value();
      for (std::size_t i = 0; i < logits.size(); ++i) {
        scores.push_back(logits[i]);
        labels.push_back(out.ctr_labels[i] > 0.5f);
        ids.push_back(out.ctr_request_ids[i]);
      }
      ctr_sum += double(out.ctr.value()[0]) * double(logits.size());
      ctr_w += double(logits.size());
    }
  }
  if (infonce_w > 0) r.loss_infonce = infonce_sum / infonce_w;
  if (ctr_w > 0) {
    r.loss_ctr = ctr_sum / ctr_w;
    r.auc = compute_auc(scores, labels);
    const auto g = compute_gauc(scores, labels, ids);
    r.gauc = g.gauc;
    r.requests = g.scored_requests;
    r.skipped_requests = g.skipped_requests;
  }
  return r;
}

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, const Dataset& ds,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (ds.sessions.empty()) throw Error("train: dataset is empty");
  kernels::set_threads(cfg.threads);
  const ModelConfig mc = resolve_model_config(model_cfg, ds.config);
  std::vector<Session> train_set, test_set;
  prepare_sessions(ds, cfg, train_set, test_set);
  if (train_set.empty()) throw Error("train: no training sessions after the split");

  ParamSet<float> params;
  QgsModel<float> model(mc, params);
  Adagrad opt(cfg.lr, cfg.adagrad_eps, cfg.debug_checks);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  double total_ms = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = Clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double inf_sum = 0, ctr_sum = 0;
    std::size_t steps = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      auto ptrs = pointers(train_set, begin, end, &order);
      Batch batch = make_batch(ptrs);
      std::vector<std::vector<std::size_t>> rows(ptrs.size());
      for (std::size_t b = 0; b < ptrs.size(); ++b) {
        std::vector<std::size_t> all(ptrs[b]->valid_len > 1 ? ptrs[b]->valid_len - 1 : 0);
        std::iota(all.begin(), all.end(), std::size_t{1});
        std::shuffle(all.begin(), all.end(), rng);
        all.resize(std::min(all.size(), cfg.ctr_requests_per_session));
        std::sort(all.begin(), all.end());
        rows[b] = std::move(all);
      }
      add_requests(batch, ptrs, ds.config, rows);

      try {
        Tape<float> tape(true);
        auto out = model.forward(tape, batch, true, &rng);
        tape.backward(out.total);
        if (!grads_finite(params)) throw NumericError("non-finite gradient");
        if (out.infonce.valid()) inf_sum += out.infonce.value()[0];
        if (out.ctr.valid()) ctr_sum += out.ctr.value()[0];
      } catch (const NumericError& e) {
        result.diverged = true;
        result.error = "epoch " + std::to_string(epoch) + ", step " + std::to_string(steps) + ": " + e.what();
        result.checkpoint = to_checkpoint(params);
        spdlog::error("training diverged: {}", result.error);
        return result;
      }
      if (cfg.grad_clip > 0) clip_gradients(params, cfg.grad_clip);
      opt.step(params);
      params.zero_grad();
      if (cfg.debug_checks) {
        for (std::size_t l = 0; l < model.encoder().num_layers() && mc.variant != Variant::quadratic_encoder; ++l)
          for (float g : model.encoder().gamma(l))
            if (!(g > 0.0f && g < 1.0f)) throw Error("decay factor left (0,1) in layer " + std::to_string(l));
      }
      ++steps;
    }
    const double ms = elapsed_ms(start);
    total_ms += ms;
    EpochMetrics m;
    m.epoch = epoch;
    m.train_infonce = steps ? inf_sum / double(steps) : 0;
    m.train_ctr = steps ? ctr_sum / double(steps) : 0;
    m.wall_ms = ms;
    m.eval = evaluate(model, test_set, ds.config, cfg);
    spdlog::info("{} epoch {}: infonce {:.4f} ctr {:.4f} | test infonce {:.4f} auc {:.4f} gauc {:.4f} ({:.0f} ms)",
                 to_string(mc.variant), epoch, m.train_infonce, m.train_ctr, m.eval.loss_infonce,
                 m.eval.auc, m.eval.gauc, ms);
    result.curve.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  result.checkpoint = to_checkpoint(params);
  result.mean_epoch_ms = cfg.epochs ? total_ms / double(cfg.epochs) : 0;
  return result;
}

EvalResult evaluate_checkpoint(const Checkpoint& ckpt, const ModelConfig& model_cfg,
                               const TrainConfig& cfg, const Dataset& ds) {
  const ModelConfig mc = resolve_model_config(model_cfg, ds.config);
  ParamSet<float> params;
  QgsModel<float> model(mc, params);
  apply_checkpoint(ckpt, params);
  std::vector<Session> train_set, test_set;
  prepare_sessions(ds, cfg, train_set, test_set);
  return evaluate(model, test_set, ds.config, cfg);
}

std::string metrics_csv(const std::string& variant, std::uint64_t seed,
                        const std::vector<EpochMetrics>& curve, bool include_wall_ms) {
  std::string out = "variant,seed,epoch,loss_infonce,loss_ctr,auc,gauc,wall_ms\n";
  for (const auto& m : curve) {
    out += variant + "," + std::to_string(seed) + "," + std::to_string(m.epoch) + "," +
           fmt_double(m.train_infonce) + "," + fmt_double(m.train_ctr) + "," + fmt_double(m.eval.auc) +
           "," + fmt_double(m.eval.gauc) + "," + (include_wall_ms ? fmt_double(m.wall_ms) : "0") + "\n";
  }
  return out;
}

void write_metrics_csv(const std::string& path, const std::string& variant, std::uint64_t seed,
                       const std::vector<EpochMetrics>& curve, bool include_wall_ms) {
  const std::string s = metrics_csv(variant, seed, curve, include_wall_ms);
  binio::write_file(path, std::vector<std::uint8_t>(s.begin(), s.end()));
}

std::vector<AblationRow> run_ablation_matrix(const ModelConfig& model, const TrainConfig& cfg,
                                             const Dataset& ds, const std::vector<Variant>& variants) {
  std::vector<AblationRow> rows;
  for (Variant v : variants) {
    ModelConfig m = model;
    m.variant = v;
    spdlog::info("ablation: training variant {}", to_string(v));
    auto r = train(m, cfg, ds);
    if (r.diverged) throw DivergenceError("variant " + to_string(v) + " diverged: " + r.error);
    AblationRow row;
    row.variant = v;
    row.eval = r.curve.empty() ? EvalResult{} : r.curve.back().eval;
    row.mean_epoch_ms = r.mean_epoch_ms;
    rows.push_back(row);
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "variant,gauc,auc,loss_infonce,mean_epoch_ms\n";
  for (const auto& r : rows) {
    out += to_string(r.variant) + "," + fmt_double(r.eval.gauc) + "," + fmt_double(r.eval.auc) + "," +
           fmt_double(r.eval.loss_infonce) + "," + fmt_double(r.mean_epoch_ms) + "\n";
  }
  return out;
}

TrainConfig scaled_train_config(const TrainConfig& cfg, std::size_t session_len, std::size_t history) {
  TrainConfig t = cfg;
  t.history_window = history;
  if (history == 0 || history >= session_len) return t;
  const std::size_t windows = session_len / history;
  t.batch_size = cfg.batch_size * windows;
  t.ctr_requests_per_session = std::max<std::size_t>(1, cfg.ctr_requests_per_session / windows);
  return t;
}

std::vector<ScaleRow> run_scaling(const ModelConfig& model, const TrainConfig& cfg,
                                  const Dataset& ds, const std::vector<ScalePoint>& points) {
  std::vector<ScaleRow> rows;
  for (const auto& p : points) {
    ModelConfig m = model;
    m.num_layers = p.num_layers;
    m.d_h = p.d_h;
    TrainConfig t = scaled_train_config(cfg, ds.config.session_len, p.history);
    spdlog::info("scaling: N={} d_h={} history={}", p.num_layers, p.d_h, p.history);
    auto r = train(m, t, ds);
    if (r.diverged) throw DivergenceError("scaling point diverged: " + r.error);
    ScaleRow row;
    row.point = p;
    row.eval = r.curve.empty() ? EvalResult{} : r.curve.back().eval;
    row.mean_epoch_ms = r.mean_epoch_ms;
    rows.push_back(row);
  }
  return rows;
}

std::string scaling_csv(const std::vector<ScaleRow>& rows) {
  std::string out = "num_layers,d_h,history,gauc,auc,loss_infonce,mean_epoch_ms\n";
  for (const auto& r : rows) {
    out += std::to_string(r.point.num_layers) + "," + std::to_string(r.point.d_h) + "," +
           std::to_string(r.point.history) + "," + fmt_double(r.eval.gauc) + "," + fmt_double(r.eval.auc) +
           "," + fmt_double(r.eval.loss_infonce) + "," + fmt_double(r.mean_epoch_ms) + "\n";
  }
  return out;
}

}  // namespace qgs
