#include "qgs/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>

#include "qgs/error.hpp"

namespace qgs {

using Json = nlohmann::ordered_json;

namespace {

template <class S>
struct Field {
  const char* key;
  const char* help;
  std::function<Json(const S&)> get;
  std::function<void(S&, const Json&)> set;
};

#define QGS_FIELD(S, name, help) \
  Field<S> { #name, help, [](const S& s) { return Json(s.name); }, [](S& s, const Json& j) { j.get_to(s.name); } }

const std::vector<Field<RunConfig>>& top_fields() {
  static const std::vector<Field<RunConfig>> f{
      QGS_FIELD(RunConfig, seed, "single seed for data, initialisation, shuffling and dropout"),
      QGS_FIELD(RunConfig, threads, "worker threads for the parallel kernels (1 = bit-exact)"),
      QGS_FIELD(RunConfig, out_dir, "directory for every artifact"),
      QGS_FIELD(RunConfig, dataset, "dataset file to read; empty generates from [generator]"),
      QGS_FIELD(RunConfig, checkpoint, "checkpoint for eval; empty means <out_dir>/model.qgsc"),
  };
  return f;
}

const std::vector<Field<GeneratorConfig>>& generator_fields() {
  static const std::vector<Field<GeneratorConfig>> f{
      QGS_FIELD(GeneratorConfig, num_topics, "number of query topics K"),
      QGS_FIELD(GeneratorConfig, items_per_topic, "items per topic block M"),
      QGS_FIELD(GeneratorConfig, query_switch_prob, "per-step probability of jumping to another topic"),
      QGS_FIELD(GeneratorConfig, within_topic_dist, "within-topic item distribution: uniform or zipf"),
      QGS_FIELD(GeneratorConfig, zipf_exponent, "Zipf exponent when within_topic_dist is zipf"),
      QGS_FIELD(GeneratorConfig, session_len, "rows per session L"),
      QGS_FIELD(GeneratorConfig, min_valid_len, "minimum valid length; 0 makes every session full"),
      QGS_FIELD(GeneratorConfig, num_sessions, "number of sessions"),
      QGS_FIELD(GeneratorConfig, feature_noise_std, "noise on the topic-correlated context feature"),
      QGS_FIELD(GeneratorConfig, query_variants, "query text ids per topic"),
      QGS_FIELD(GeneratorConfig, user_affinity, "probability of picking a per-user favourite item"),
      QGS_FIELD(GeneratorConfig, favourites_per_topic, "favourite items per user and topic"),
      QGS_FIELD(GeneratorConfig, num_negatives, "negatives per ranking request"),
  };
  return f;
}

const std::vector<Field<ModelConfig>>& model_fields() {
  static const std::vector<Field<ModelConfig>> f{
      Field<ModelConfig>{"variant",
                         "full | item_only | no_hfg | no_context_features | quadratic_encoder | external_embedder",
                         [](const ModelConfig& m) { return Json(to_string(m.variant)); },
                         [](ModelConfig& m, const Json& j) { m.variant = parse_variant(j.get<std::string>()); }},
      QGS_FIELD(ModelConfig, d_f, "embedded context feature width"),
      QGS_FIELD(ModelConfig, d_b, "semantic embedding width"),
      QGS_FIELD(ModelConfig, d_h, "encoder width"),
      QGS_FIELD(ModelConfig, d_z, "prediction head output width; 0 means d_h"),
      QGS_FIELD(ModelConfig, max_len, "positional table size"),
      QGS_FIELD(ModelConfig, num_layers, "encoder layers N"),
      QGS_FIELD(ModelConfig, dropout, "dropout on each layer output during training"),
      QGS_FIELD(ModelConfig, gamma_init, "initial decay factor"),
      QGS_FIELD(ModelConfig, per_dim_gamma, "one decay factor per dimension instead of per layer"),
      QGS_FIELD(ModelConfig, temperature, "InfoNCE temperature"),
      QGS_FIELD(ModelConfig, norm_eps, "epsilon of rmsnorm, layernorm and l2 normalisation"),
      QGS_FIELD(ModelConfig, hfg_d_e, "feature-group token width"),
      QGS_FIELD(ModelConfig, hfg_heads, "feature-group attention heads"),
      QGS_FIELD(ModelConfig, hfg_ffn, "feature-group FFN hidden width"),
      QGS_FIELD(ModelConfig, hfg_d_o, "pooled feature-group output width"),
      QGS_FIELD(ModelConfig, dnn_width, "shared DNN width"),
      QGS_FIELD(ModelConfig, tower_hidden, "ranking tower hidden width"),
      QGS_FIELD(ModelConfig, gen_score_init, "initial weight of the generative score in the ranking logit"),
      QGS_FIELD(ModelConfig, lambda, "weight of the InfoNCE loss"),
      QGS_FIELD(ModelConfig, external_embeddings, "external embedding file (ext_cls, ext_sep); empty uses fixed random tables"),
  };
  return f;
}

const std::vector<Field<TrainConfig>>& train_fields() {
  static const std::vector<Field<TrainConfig>> f{
      QGS_FIELD(TrainConfig, batch_size, "sequences per batch B"),
      QGS_FIELD(TrainConfig, epochs, "training epochs"),
      QGS_FIELD(TrainConfig, lr, "Adagrad learning rate"),
      QGS_FIELD(TrainConfig, adagrad_eps, "Adagrad epsilon"),
      QGS_FIELD(TrainConfig, grad_clip, "global gradient norm clip; 0 disables"),
      QGS_FIELD(TrainConfig, ctr_requests_per_session, "ranking requests sampled per training sequence"),
      QGS_FIELD(TrainConfig, eval_last_steps, "evaluate only the last n steps of each test session; 0 = all"),
      QGS_FIELD(TrainConfig, history_window, "history rows per sequence; 0 = whole session"),
      QGS_FIELD(TrainConfig, test_fraction, "fraction of sessions held out (the last ones)"),
      QGS_FIELD(TrainConfig, record_wall_ms, "write epoch wall-clock to the metrics CSV (otherwise 0)"),
      QGS_FIELD(TrainConfig, debug_checks, "assert accumulator monotonicity and decay range each step"),
  };
  return f;
}

const std::vector<Field<BenchConfig>>& bench_fields() {
  static const std::vector<Field<BenchConfig>> f{
      QGS_FIELD(BenchConfig, lengths, "sequence lengths to time"),
      QGS_FIELD(BenchConfig, d_h, "encoder width"),
      QGS_FIELD(BenchConfig, num_layers, "encoder layers"),
      QGS_FIELD(BenchConfig, warmup, "untimed warmup iterations"),
      QGS_FIELD(BenchConfig, iters, "timed iterations (>= 20)"),
      QGS_FIELD(BenchConfig, variants, "encoder variants: linear, quadratic"),
      QGS_FIELD(BenchConfig, stream_positions, "positions at which streaming steps are timed"),
      QGS_FIELD(BenchConfig, stream_iters, "timed samples per streaming position"),
      QGS_FIELD(BenchConfig, stream_steps_per_sample, "streaming steps per timed sample"),
      QGS_FIELD(BenchConfig, stream_max_len, "streaming state capacity"),
  };
  return f;
}

const std::vector<Field<ScalePoint>>& scale_point_fields() {
  static const std::vector<Field<ScalePoint>> f{
      QGS_FIELD(ScalePoint, num_layers, "encoder layers"),
      QGS_FIELD(ScalePoint, d_h, "encoder width"),
      QGS_FIELD(ScalePoint, history, "history rows; 0 = whole session"),
  };
  return f;
}

#undef QGS_FIELD

template <class S>
Json section_to_json(const S& s, const std::vector<Field<S>>& fields) {
  Json j = Json::object();
  for (const auto& f : fields) j[f.key] = f.get(s);
  return j;
}

template <class S>
void section_from_json(S& s, const Json& j, const std::vector<Field<S>>& fields, const std::string& prefix) {
  if (!j.is_object()) throw ConfigError("config key '" + prefix + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const Field<S>* match = nullptr;
    for (const auto& f : fields)
      if (it.key() == f.key) match = &f;
    if (!match) throw ConfigError("unknown config key '" + prefix + (prefix.empty() ? "" : ".") + it.key() + "'");
    try {
      match->set(s, it.value());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config key '" + prefix + (prefix.empty() ? "" : ".") + it.key() + "': " + e.what());
    }
  }
}

Json scale_points_to_json(const std::vector<ScalePoint>& pts) {
  Json a = Json::array();
  for (const auto& p : pts) a.push_back(section_to_json(p, scale_point_fields()));
  return a;
}

template <class S>
void help_lines(std::ostringstream& out, const std::string& prefix, const S& defaults,
                const std::vector<Field<S>>& fields) {
  for (const auto& f : fields) {
    const std::string key = prefix.empty() ? f.key : prefix + "." + f.key;
    out << "  " << key << " = " << f.get(defaults).dump() << "\n      " << f.help << "\n";
  }
}

}  // namespace

RunConfig::RunConfig() {
  for (Variant v : all_variants()) ablate_variants.push_back(to_string(v));
  scale_points = {{1, 64, 0}, {2, 64, 0}, {4, 64, 0}, {2, 32, 0}, {2, 128, 0}, {2, 64, 16}};
}

void RunConfig::resolve() {
  generator.seed = seed;
  model.init_seed = seed;
  train.seed = seed;
  train.threads = threads;
  bench.seed = seed;
  model = resolve_model_config(model, generator);
}

void RunConfig::validate() const {
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
  generator.validate();
  model.validate();
  train.validate();
  bench.validate();
  for (const auto& v : ablate_variants) parse_variant(v);
  if (train.history_window > generator.session_len)
    throw ConfigError("train.history_window exceeds generator.session_len");
}

std::string RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? out_dir + "/model.qgsc" : checkpoint;
}

Json config_to_json(const RunConfig& cfg) {
  Json j = section_to_json(cfg, top_fields());
  j["generator"] = section_to_json(cfg.generator, generator_fields());
  j["model"] = section_to_json(cfg.model, model_fields());
  j["train"] = section_to_json(cfg.train, train_fields());
  j["bench"] = section_to_json(cfg.bench, bench_fields());
  j["ablate"] = Json{{"variants", cfg.ablate_variants}};
  j["scale"] = Json{{"points", scale_points_to_json(cfg.scale_points)}};
  return j;
}

RunConfig config_from_json(const Json& j) {
  RunConfig cfg;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const Json& v = it.value();
    if (k == "generator") {
      section_from_json(cfg.generator, v, generator_fields(), k);
    } else if (k == "model") {
      section_from_json(cfg.model, v, model_fields(), k);
    } else if (k == "train") {
      section_from_json(cfg.train, v, train_fields(), k);
    } else if (k == "bench") {
      section_from_json(cfg.bench, v, bench_fields(), k);
    } else if (k == "ablate") {
      if (!v.is_object()) throw ConfigError("config key 'ablate' must be an object");
      for (auto a = v.begin(); a != v.end(); ++a) {
        if (a.key() != "variants") throw ConfigError("unknown config key 'ablate." + a.key() + "'");
        try {
          cfg.ablate_variants = a.value().get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception& e) {
          throw ConfigError(std::string("config key 'ablate.variants': ") + e.what());
        }
      }
    } else if (k == "scale") {
      if (!v.is_object()) throw ConfigError("config key 'scale' must be an object");
      for (auto a = v.begin(); a != v.end(); ++a) {
        if (a.key() != "points") throw ConfigError("unknown config key 'scale." + a.key() + "'");
        if (!a.value().is_array()) throw ConfigError("config key 'scale.points' must be an array");
        cfg.scale_points.clear();
        for (const auto& p : a.value()) {
          ScalePoint sp;
          section_from_json(sp, p, scale_point_fields(), "scale.points[]");
          cfg.scale_points.push_back(sp);
        }
      }
    } else {
      section_from_json(cfg, Json{{k, v}}, top_fields(), "");
    }
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

std::string config_help() {
  const RunConfig d;
  std::ostringstream out;
  out << "Config keys (JSON, nested by section) and defaults:\n";
  help_lines(out, "", d, top_fields());
  help_lines(out, "generator", d.generator, generator_fields());
  help_lines(out, "model", d.model, model_fields());
  help_lines(out, "train", d.train, train_fields());
  help_lines(out, "bench", d.bench, bench_fields());
  out << "  ablate.variants = " << Json(d.ablate_variants).dump() << "\n      variants trained by 'ablate'\n";
  out << "  scale.points = " << scale_points_to_json(d.scale_points).dump()
      << "\n      (num_layers, d_h, history) points trained by 'scale'\n";
  return out.str();
}

}  // namespace qgs
