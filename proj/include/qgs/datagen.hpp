#pragma once

// Synthetic query-driven sessions. Topics own disjoint item blocks, a Markov
// chain drives the query topic, and items are drawn from a per-topic
// distribution, so H(item | query) and H(item) are known in closed form.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace qgs {

// Raw per-step context features: position, log time gap, topic-correlated
// scalar, query-changed flag, two noise features.
inline constexpr std::size_t kContextDim = 6;

// Candidate feature groups used by the feature-grouping block:
// interaction stats (3), display context (2), quality proxies (2).
inline constexpr std::size_t kNumGroups = 3;
inline constexpr std::size_t kGroupDims[kNumGroups] = {3, 2, 2};
inline constexpr std::size_t kCandidateFeatureDim = 7;

struct GeneratorConfig {
  std::size_t num_topics = 8;
  std::size_t items_per_topic = 16;
  double query_switch_prob = 0.5;
  std::string within_topic_dist = "uniform";  // "uniform" or "zipf"
  double zipf_exponent = 1.0;
  std::size_t session_len = 64;
  std::size_t min_valid_len = 0;  // 0: every session is full length
  std::size_t num_sessions = 2000;
  double feature_noise_std = 0.5;
  std::uint64_t seed = 1;
  std::size_t query_variants = 2;
  // Probability that a step picks one of the user's favourite items of the
  // current topic instead of sampling the topic distribution.
  double user_affinity = 0.0;
  std::size_t favourites_per_topic = 2;
  std::size_t num_negatives = 9;

  std::size_t vocab_size() const { return num_topics * items_per_topic; }
  std::size_t query_vocab_size() const { return num_topics * query_variants; }
  void validate() const;
};

struct Session {
  std::uint64_t id = 0;
  std::size_t origin_step = 0;  // absolute step of row 0 when cut from a longer session
  std::size_t valid_len = 0;
  std::vector<std::uint32_t> query_topic_ids;
  std::vector<std::uint32_t> query_text_ids;
  std::vector<std::uint32_t> item_ids;
  std::vector<float> features;  // L x kContextDim
  std::vector<std::int64_t> timestamps;
  std::vector<std::uint8_t> click_labels;

  std::size_t length() const { return item_ids.size(); }
  bool operator==(const Session&) const = default;
};

struct Dataset {
  GeneratorConfig config;
  std::vector<Session> sessions;
};

struct OracleStats {
  double h_item_given_query = 0;
  double h_item_marginal = 0;
  double mutual_info = 0;
};

// One ranking request: the clicked item plus negatives, in shuffled order.
struct CandidateSet {
  std::vector<std::uint32_t> items;
  std::vector<std::uint8_t> labels;
  std::vector<float> features;  // items.size() x kCandidateFeatureDim
};

// Within-topic item distribution (length M, sums to 1).
std::vector<double> within_topic_weights(const GeneratorConfig& cfg);

Session generate_session(const GeneratorConfig& cfg, std::uint64_t index);
Dataset generate_dataset(const GeneratorConfig& cfg);
OracleStats oracle_entropies(const GeneratorConfig& cfg);

// Deterministic in (cfg.seed, session.id, absolute step).
CandidateSet generate_candidates(const GeneratorConfig& cfg, const Session& session,
                                 std::size_t step);

// Rows [begin, begin + len) of a session as a new session.
Session slice_session(const Session& s, std::size_t begin, std::size_t len);

// The last `test_fraction` of sessions are held out.
void split_dataset(const Dataset& ds, double test_fraction, std::vector<Session>& train,
                   std::vector<Session>& test);

void write_dataset(const std::string& path, const Dataset& ds);
Dataset read_dataset(const std::string& path);
std::vector<std::uint8_t> encode_dataset(const Dataset& ds);
Dataset decode_dataset(const std::vector<std::uint8_t>& bytes);

}  // namespace qgs
