#include "qgs/cli.hpp"

#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "qgs/config.hpp"
#include "qgs/error.hpp"
#include "qgs/kernels.hpp"
#include "qgs/log.hpp"
#include "qgs/metrics.hpp"

namespace qgs::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

struct Options {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  int threads = 0;
  std::string checkpoint;
};

const char* kExitCodes =
    "Exit codes:\n"
    "  0  success\n"
    "  1  unexpected failure\n"
    "  2  invalid config or usage (unknown key, bad value, bad flag)\n"
    "  3  I/O error or missing checkpoint / dataset file\n"
    "  4  malformed dataset or checkpoint file\n"
    "  5  training diverged (non-finite loss or gradient)\n"
    "Errors are printed to stderr as one line: error: <kind>: <message>\n"
    "Environment: QGS_LOG=trace|debug|info|warn|error|off (default warn)\n";

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

RunConfig load(const Options& o, const CLI::App& app) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (app.count("--out")) cfg.out_dir = o.out;
  if (app.count("--seed")) cfg.seed = o.seed;
  if (app.count("--threads")) cfg.threads = o.threads;
  if (const auto* opt = app.get_option_no_throw("--checkpoint"); opt && opt->count()) cfg.checkpoint = o.checkpoint;
  cfg.resolve();
  cfg.validate();
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + cfg.out_dir + "': " + ec.message());
  write_text(fs::path(cfg.out_dir) / "resolved_config.json", config_to_json(cfg).dump(2) + "\n");
  kernels::set_threads(cfg.threads);
  return cfg;
}

// The dataset named in the config, or a freshly generated one. A loaded
// dataset's generator settings replace the config's.
Dataset dataset_for(RunConfig& cfg) {
  if (cfg.dataset.empty()) return generate_dataset(cfg.generator);
  if (!fs::exists(cfg.dataset)) throw IoError("dataset '" + cfg.dataset + "' not found");
  Dataset ds = read_dataset(cfg.dataset);
  cfg.generator = ds.config;
  cfg.model = resolve_model_config(cfg.model, cfg.generator);
  return ds;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

Json eval_json(const EvalResult& r) {
  Json j;
  j["auc"] = r.auc;
  j["gauc"] = r.gauc;
  j["loss_infonce"] = r.loss_infonce;
  j["loss_ctr"] = r.loss_ctr;
  j["requests"] = r.requests;
  j["skipped_requests"] = r.skipped_requests;
  return j;
}

int cmd_generate(RunConfig& cfg, std::ostream& out) {
  const Dataset ds = generate_dataset(cfg.generator);
  const fs::path path = fs::path(cfg.out_dir) / "dataset.qgsd";
  write_dataset(path.string(), ds);
  const OracleStats o = oracle_entropies(cfg.generator);
  Json j;
  j["h_item_given_query"] = o.h_item_given_query;
  j["h_item_marginal"] = o.h_item_marginal;
  j["mutual_info"] = o.mutual_info;
  write_text(fs::path(cfg.out_dir) / "oracle.json", j.dump(2) + "\n");
  out << path.string() << "\n";
  return kOk;
}

int cmd_train(RunConfig& cfg, std::ostream& out) {
  const Dataset ds = dataset_for(cfg);
  const TrainResult r = train(cfg.model, cfg.train, ds);
  const std::string variant = to_string(cfg.model.variant);
  write_metrics_csv((fs::path(cfg.out_dir) / "metrics.csv").string(), variant, cfg.seed, r.curve,
                    cfg.train.record_wall_ms);
  save_checkpoint(cfg.checkpoint_path(), r.checkpoint);
  if (r.diverged) throw DivergenceError(r.error);
  out << cfg.checkpoint_path() << "\n";
  return kOk;
}

int cmd_eval(RunConfig& cfg, std::ostream& out) {
  const std::string path = cfg.checkpoint_path();
  if (!fs::exists(path)) throw IoError("checkpoint '" + path + "' not found");
  const Checkpoint ckpt = load_checkpoint(path);
  const Dataset ds = dataset_for(cfg);
  const EvalResult r = evaluate_checkpoint(ckpt, cfg.model, cfg.train, ds);
  const std::string text = eval_json(r).dump(2) + "\n";
  write_text(fs::path(cfg.out_dir) / "eval.json", text);
  out << text;
  return kOk;
}

int cmd_ablate(RunConfig& cfg, std::ostream& out) {
  const Dataset ds = dataset_for(cfg);
  std::vector<Variant> variants;
  for (const auto& v : cfg.ablate_variants) variants.push_back(parse_variant(v));
  const auto rows = run_ablation_matrix(cfg.model, cfg.train, ds, variants);
  const std::string text = ablation_csv(rows);
  write_text(fs::path(cfg.out_dir) / "ablation.csv", text);
  out << text;
  return kOk;
}

int cmd_scale(RunConfig& cfg, std::ostream& out) {
  const Dataset ds = dataset_for(cfg);
  const auto rows = run_scaling(cfg.model, cfg.train, ds, cfg.scale_points);
  const std::string text = scaling_csv(rows);
  write_text(fs::path(cfg.out_dir) / "scaling.csv", text);
  out << text;
  return kOk;
}

int cmd_bench(RunConfig& cfg, std::ostream& out) {
  const BenchResult r = bench_encoder(cfg.bench);
  std::vector<std::string> comments = environment_comments();
  for (const auto& [variant, slope] : r.slopes) comments.push_back("slope " + variant + " " + fmt(slope));
  emit_bench_csv(r, (fs::path(cfg.out_dir) / "bench.csv").string(), comments);
  const StreamBenchResult s = bench_stream(cfg.bench);
  write_text(fs::path(cfg.out_dir) / "stream.csv", stream_csv(s));
  out << bench_csv(r, comments);
  return kOk;
}

int fail(std::ostream& err, int code, const char* kind, const std::string& what) {
  std::string line = what;
  for (char& c : line)
    if (c == '\n' || c == '\r') c = ' ';
  err << "error: " << kind << ": " << line << "\n";
  return code;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  init_logging();
  CLI::App app{"qgs: query-conditioned generative sequence model for CTR experiments", "qgs"};
  app.footer(std::string("\n") + config_help() + "\n" + kExitCodes);
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  Options o;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"generate", "Generate a synthetic dataset into <out>/dataset.qgsd"},
      {"train", "Train a model; writes <out>/model.qgsc and <out>/metrics.csv"},
      {"eval", "Evaluate a checkpoint; writes <out>/eval.json"},
      {"ablate", "Train every variant in ablate.variants; writes <out>/ablation.csv"},
      {"bench", "Time the encoder; writes <out>/bench.csv and <out>/stream.csv"},
      {"scale", "Train every point in scale.points; writes <out>/scaling.csv"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "JSON config file (defaults apply to missing keys)");
    sub->add_option("--out", o.out, "output directory (overrides out_dir)");
    sub->add_option("--seed", o.seed, "single seed (overrides seed)");
    sub->add_option("--threads", o.threads, "kernel threads (overrides threads)")->check(CLI::PositiveNumber);
    if (name == "eval") sub->add_option("--checkpoint", o.checkpoint, "checkpoint (overrides checkpoint)");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    return fail(err, kConfigError, "usage", e.what());
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    RunConfig cfg = load(o, *sub);
    if (name == "generate") return cmd_generate(cfg, out);
    if (name == "train") return cmd_train(cfg, out);
    if (name == "eval") return cmd_eval(cfg, out);
    if (name == "ablate") return cmd_ablate(cfg, out);
    if (name == "bench") return cmd_bench(cfg, out);
    if (name == "scale") return cmd_scale(cfg, out);
    return fail(err, kConfigError, "usage", "unknown subcommand " + name);
  } catch (const ConfigError& e) {
    return fail(err, kConfigError, "config", e.what());
  } catch (const ParseError& e) {
    return fail(err, kMalformedDataset, "malformed", e.what());
  } catch (const IoError& e) {
    return fail(err, kIoError, "io", e.what());
  } catch (const DivergenceError& e) {
    return fail(err, kDiverged, "diverged", e.what());
  } catch (const std::exception& e) {
    return fail(err, kFailure, "internal", e.what());
  }
}

}  // namespace qgs::cli
