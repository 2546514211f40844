#pragma once

// Run configuration: one JSON document with nested sections. Unknown keys
// are rejected; every key has a documented default.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "qgs/bench.hpp"
#include "qgs/datagen.hpp"
#include "qgs/model_config.hpp"
#include "qgs/trainer.hpp"

namespace qgs {

struct RunConfig {
  std::uint64_t seed = 1;
  int threads = 1;
  std::string out_dir = "out";
  std::string dataset;     // empty: generate from the generator section
  std::string checkpoint;  // empty: <out_dir>/model.qgsc
  GeneratorConfig generator;
  ModelConfig model;
  TrainConfig train;
  BenchConfig bench;
  std::vector<std::string> ablate_variants;
  std::vector<ScalePoint> scale_points;

  RunConfig();
  // Propagates the single seed and thread count into every section.
  void resolve();
  void validate() const;
  std::string checkpoint_path() const;
};

nlohmann::ordered_json config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const nlohmann::ordered_json& j);
RunConfig load_config(const std::string& path);
// One line per key: dotted name, default value and description.
std::string config_help();

}  // namespace qgs
