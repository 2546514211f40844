#include "qgs/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "qgs/binio.hpp"
#include "qgs/error.hpp"

namespace qgs {

namespace {

constexpr char kMagic[4] = {'Q', 'G', 'S', 'D'};
constexpr std::uint8_t kVersion = 1;
constexpr std::int64_t kEpochBase = 1'700'000'000;
// Display rank of the clicked item is geometric with this continuation probability.
constexpr double kClickRankContinue = 0.7;
constexpr double kClickSignal = 0.2;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  return splitmix(splitmix(splitmix(a) ^ b) ^ c);
}

double entropy(const std::vector<double>& p) {
  double h = 0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

// Population-level P(item | topic) over local item index, averaged over users.
std::vector<double> population_weights(const GeneratorConfig& cfg) {
  auto w = within_topic_weights(cfg);
  const double a = cfg.user_affinity;
  for (auto& v : w) v = (1.0 - a) * v + a / static_cast<double>(cfg.items_per_topic);
  return w;
}

}  // namespace

void GeneratorConfig::validate() const {
  if (num_topics < 1) throw ConfigError("generator.num_topics must be >= 1");
  if (items_per_topic < 1) throw ConfigError("generator.items_per_topic must be >= 1");
  if (session_len < 2) throw ConfigError("generator.session_len must be >= 2");
  if (query_switch_prob < 0 || query_switch_prob > 1)
    throw ConfigError("generator.query_switch_prob must lie in [0,1]");
  if (within_topic_dist != "uniform" && within_topic_dist != "zipf")
    throw ConfigError("generator.within_topic_dist must be 'uniform' or 'zipf'");
  if (zipf_exponent < 0) throw ConfigError("generator.zipf_exponent must be >= 0");
  if (feature_noise_std < 0) throw ConfigError("generator.feature_noise_std must be >= 0");
  if (query_variants < 1) throw ConfigError("generator.query_variants must be >= 1");
  if (user_affinity < 0 || user_affinity > 1)
    throw ConfigError("generator.user_affinity must lie in [0,1]");
  if (favourites_per_topic < 1 || favourites_per_topic > items_per_topic)
    throw ConfigError("generator.favourites_per_topic must lie in [1, items_per_topic]");
  if (min_valid_len > session_len)
    throw ConfigError("generator.min_valid_len must not exceed session_len");
  const auto w = within_topic_weights(*this);
  const double s = std::accumulate(w.begin(), w.end(), 0.0);
  if (std::abs(s - 1.0) > 1e-9) throw ConfigError("within-topic distribution does not sum to 1");
}

std::vector<double> within_topic_weights(const GeneratorConfig& cfg) {
  const std::size_t m = cfg.items_per_topic;
  std::vector<double> w(m, 1.0);
  if (cfg.within_topic_dist == "zipf") {
    for (std::size_t i = 0; i < m; ++i) w[i] = 1.0 / std::pow(double(i + 1), cfg.zipf_exponent);
  }
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& v : w) v /= total;
  return w;
}

Session generate_session(const GeneratorConfig& cfg, std::uint64_t index) {
  const std::size_t L = cfg.session_len, K = cfg.num_topics, M = cfg.items_per_topic;
  std::mt19937_64 rng(stream_seed(cfg.seed + index, 0x5e55));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const auto weights = within_topic_weights(cfg);
  std::discrete_distribution<std::size_t> item_dist(weights.begin(), weights.end());

  // Favourite items per topic, drawn from their own stream so that the
  // behaviour chain is unchanged when affinity is zero.
  std::vector<std::vector<std::size_t>> favourites(K);
  {
    std::mt19937_64 fav_rng(stream_seed(cfg.seed + index, 0xfa7));
    std::vector<std::size_t> local(M);
    for (auto& f : favourites) {
      std::iota(local.begin(), local.end(), std::size_t{0});
      std::shuffle(local.begin(), local.end(), fav_rng);
      f.assign(local.begin(), local.begin() + cfg.favourites_per_topic);
    }
  }

  Session s;
  s.id = index;
  s.valid_len = L;
  if (cfg.min_valid_len > 0 && cfg.min_valid_len < L) {
    const std::size_t lo = std::max<std::size_t>(2, cfg.min_valid_len);
    s.valid_len = lo + static_cast<std::size_t>(unif(rng) * double(L - lo + 1));
    s.valid_len = std::min(s.valid_len, L);
  }
  s.query_topic_ids.assign(L, 0);
  s.query_text_ids.assign(L, 0);
  s.item_ids.assign(L, 0);
  s.features.assign(L * kContextDim, 0.0f);
  s.timestamps.assign(L, 0);
  s.click_labels.assign(L, 0);

  std::size_t topic = static_cast<std::size_t>(unif(rng) * double(K)) % K;
  std::size_t variant = static_cast<std::size_t>(unif(rng) * double(cfg.query_variants)) %
                        cfg.query_variants;
  std::int64_t ts = kEpochBase + static_cast<std::int64_t>(unif(rng) * 86400.0 * 30);
  for (std::size_t t = 0; t < s.valid_len; ++t) {
    bool changed = t == 0;
    if (t > 0 && K > 1 && unif(rng) < cfg.query_switch_prob) {
      const std::size_t jump = 1 + static_cast<std::size_t>(unif(rng) * double(K - 1)) % (K - 1);
      topic = (topic + jump) % K;
      variant = static_cast<std::size_t>(unif(rng) * double(cfg.query_variants)) %
                cfg.query_variants;
      changed = true;
    }
    std::size_t local;
    if (cfg.user_affinity > 0 && unif(rng) < cfg.user_affinity) {
      const auto& fav = favourites[topic];
      local = fav[static_cast<std::size_t>(unif(rng) * double(fav.size())) % fav.size()];
    } else {
      local = item_dist(rng);
    }
    std::int64_t gap = 0;
    if (t > 0) {
      const double mean = changed ? 600.0 : 30.0;
      gap = 1 + static_cast<std::int64_t>((changed ? 60.0 : 5.0) - mean * std::log(1.0 - unif(rng)));
      ts += gap;
    }

    s.query_topic_ids[t] = static_cast<std::uint32_t>(topic);
    s.query_text_ids[t] = static_cast<std::uint32_t>(topic * cfg.query_variants + variant);
    s.item_ids[t] = static_cast<std::uint32_t>(topic * M + local);
    s.timestamps[t] = ts;
    s.click_labels[t] = 1;

    float* f = &s.features[t * kContextDim];
    f[0] = static_cast<float>(double(t) / double(L));
    f[1] = static_cast<float>(std::log1p(double(gap)) / 10.0);
    f[2] = static_cast<float>((K > 1 ? double(topic) / double(K - 1) : 0.0) +
                              cfg.feature_noise_std * noise(rng));
    f[3] = changed ? 1.0f : 0.0f;
    f[4] = static_cast<float>(noise(rng));
    f[5] = static_cast<float>(noise(rng));
  }
  return s;
}

Dataset generate_dataset(const GeneratorConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  ds.sessions.reserve(cfg.num_sessions);
  for (std::size_t i = 0; i < cfg.num_sessions; ++i) ds.sessions.push_back(generate_session(cfg, i));
  return ds;
}

OracleStats oracle_entropies(const GeneratorConfig& cfg) {
  const auto w = population_weights(cfg);
  OracleStats o;
  o.h_item_given_query = entropy(w);
  // Symmetric chain: the stationary topic distribution is uniform.
  std::vector<double> marginal;
  marginal.reserve(cfg.vocab_size());
  for (std::size_t k = 0; k < cfg.num_topics; ++k)
    for (double v : w) marginal.push_back(v / double(cfg.num_topics));
  o.h_item_marginal = entropy(marginal);
  o.mutual_info = std::max(0.0, o.h_item_marginal - o.h_item_given_query);
  return o;
}

CandidateSet generate_candidates(const GeneratorConfig& cfg, const Session& session,
                                 std::size_t step) {
  if (step < session.origin_step || step - session.origin_step >= session.valid_len) {
    throw Error("candidate step " + std::to_string(step) + " outside session " +
                std::to_string(session.id));
  }
  const std::size_t row = step - session.origin_step;
  const std::size_t K = cfg.num_topics, M = cfg.items_per_topic, R = cfg.num_negatives;
  std::mt19937_64 rng(stream_seed(cfg.seed, session.id, 0xc0de0000ull + step));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);

  const std::uint32_t clicked = session.item_ids[row];
  const std::size_t topic = session.query_topic_ids[row];
  std::vector<std::uint32_t> items{clicked};
  auto draw_distinct = [&](std::size_t block) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      const auto c = static_cast<std::uint32_t>(block * M +
                                                static_cast<std::size_t>(unif(rng) * double(M)) % M);
      if (std::find(items.begin(), items.end(), c) == items.end()) {
        items.push_back(c);
        return;
      }
    }
    items.push_back(static_cast<std::uint32_t>(block * M));  // tiny vocabularies only
  };
  const std::size_t hard = K > 1 ? R / 2 : R;
  for (std::size_t i = 0; i < R; ++i) {
    if (i < hard) {
      draw_distinct(topic);
    } else {
      const std::size_t jump = 1 + static_cast<std::size_t>(unif(rng) * double(K - 1)) % (K - 1);
      draw_distinct((topic + jump) % K);
    }
  }

  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  // Display rank: the clicked item tends to sit near the top.
  const std::size_t n = items.size();
  std::size_t click_rank = 0;
  while (click_rank + 1 < n && unif(rng) < kClickRankContinue) ++click_rank;
  std::vector<std::size_t> ranks;
  for (std::size_t r = 0; r < n; ++r)
    if (r != click_rank) ranks.push_back(r);
  std::shuffle(ranks.begin(), ranks.end(), rng);

  const auto w = within_topic_weights(cfg);
  CandidateSet out;
  out.items.resize(n);
  out.labels.resize(n);
  out.features.assign(n * kCandidateFeatureDim, 0.0f);
  std::size_t next_rank = 0;
  for (std::size_t slot = 0; slot < n; ++slot) {
    const std::size_t src = order[slot];
    const std::uint32_t item = items[src];
    const bool positive = src == 0;
    out.items[slot] = item;
    out.labels[slot] = positive ? 1 : 0;
    std::size_t seen = 0;
    for (std::size_t t = 0; t < row; ++t) seen += session.item_ids[t] == item;
    const std::size_t rank = positive ? click_rank : ranks[next_rank++];
    float* f = &out.features[slot * kCandidateFeatureDim];
    f[0] = static_cast<float>(std::log1p(double(seen)));
    f[1] = static_cast<float>(w[item % M] * double(M) + 0.1 * noise(rng));
    f[2] = static_cast<float>(noise(rng));
    f[3] = static_cast<float>(double(rank) / double(std::max<std::size_t>(1, n - 1)));
    f[4] = static_cast<float>(1.0 / (1.0 + double(rank)));
    f[5] = static_cast<float>((positive ? kClickSignal : 0.0) + 0.5 * noise(rng));
    f[6] = static_cast<float>(noise(rng));
  }
  return out;
}

Session slice_session(const Session& s, std::size_t begin, std::size_t len) {
  if (begin + len > s.length()) throw Error("slice_session: range exceeds session length");
  Session out;
  out.id = s.id;
  out.origin_step = s.origin_step + begin;
  out.valid_len = s.valid_len > begin ? std::min(len, s.valid_len - begin) : 0;
  auto cut = [&](const auto& v, std::size_t width = 1) {
    using V = std::decay_t<decltype(v)>;
    return V(v.begin() + begin * width, v.begin() + (begin + len) * width);
  };
  out.query_topic_ids = cut(s.query_topic_ids);
  out.query_text_ids = cut(s.query_text_ids);
  out.item_ids = cut(s.item_ids);
  out.features = cut(s.features, kContextDim);
  out.timestamps = cut(s.timestamps);
  out.click_labels = cut(s.click_labels);
  return out;
}

void split_dataset(const Dataset& ds, double test_fraction, std::vector<Session>& train,
                   std::vector<Session>& test) {
  const std::size_t n = ds.sessions.size();
  std::size_t n_test = static_cast<std::size_t>(std::llround(double(n) * test_fraction));
  if (n >= 2) n_test = std::clamp<std::size_t>(n_test, 1, n - 1);
  train.assign(ds.sessions.begin(), ds.sessions.end() - static_cast<std::ptrdiff_t>(n_test));
  test.assign(ds.sessions.end() - static_cast<std::ptrdiff_t>(n_test), ds.sessions.end());
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  binio::Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint8_t>(kVersion);
  const auto& c = ds.config;
  w.put<std::uint64_t>(c.num_topics);
  w.put<std::uint64_t>(c.items_per_topic);
  w.put<double>(c.query_switch_prob);
  w.put_string16(c.within_topic_dist);
  w.put<double>(c.zipf_exponent);
  w.put<std::uint64_t>(c.session_len);
  w.put<std::uint64_t>(c.min_valid_len);
  w.put<std::uint64_t>(c.num_sessions);
  w.put<double>(c.feature_noise_std);
  w.put<std::uint64_t>(c.seed);
  w.put<std::uint64_t>(c.query_variants);
  w.put<double>(c.user_affinity);
  w.put<std::uint64_t>(c.favourites_per_topic);
  w.put<std::uint64_t>(c.num_negatives);
  w.put<std::uint64_t>(ds.sessions.size());
  for (const auto& s : ds.sessions) {
    const std::size_t len_pos = w.size();
    w.put<std::uint32_t>(0);
    w.put<std::uint64_t>(s.id);
    w.put<std::uint64_t>(s.origin_step);
    w.put<std::uint64_t>(s.valid_len);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.length()));
    w.put_array(s.query_topic_ids);
    w.put_array(s.query_text_ids);
    w.put_array(s.item_ids);
    w.put_array(s.features);
    w.put_array(s.timestamps);
    w.put_array(s.click_labels);
    w.patch_u32(len_pos, static_cast<std::uint32_t>(w.size() - len_pos - 4));
  }
  return std::move(w.bytes());
}

Dataset decode_dataset(const std::vector<std::uint8_t>& bytes) {
  Dataset ds;
  ds.config.num_sessions = 0;
  if (bytes.empty()) return ds;
  binio::Reader r(bytes);
  r.section("magic");
  r.need(4);
  for (char m : kMagic)
    if (r.get<char>() != m) r.fail("bad magic, expected QGSD");
  r.section("version");
  if (const auto v = r.get<std::uint8_t>(); v != kVersion) {
    r.fail("unsupported version " + std::to_string(v));
  }
  r.section("header");
  auto& c = ds.config;
  c.num_topics = r.get<std::uint64_t>();
  c.items_per_topic = r.get<std::uint64_t>();
  c.query_switch_prob = r.get<double>();
  c.within_topic_dist = r.get_string16();
  c.zipf_exponent = r.get<double>();
  c.session_len = r.get<std::uint64_t>();
  c.min_valid_len = r.get<std::uint64_t>();
  c.num_sessions = r.get<std::uint64_t>();
  c.feature_noise_std = r.get<double>();
  c.seed = r.get<std::uint64_t>();
  c.query_variants = r.get<std::uint64_t>();
  c.user_affinity = r.get<double>();
  c.favourites_per_topic = r.get<std::uint64_t>();
  c.num_negatives = r.get<std::uint64_t>();
  r.section("session_count");
  const auto count = r.get<std::uint64_t>();
  if (count > r.remaining() / 4) r.fail("session count " + std::to_string(count) + " exceeds file size");
  ds.sessions.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    r.section("session[" + std::to_string(i) + "]");
    const auto record_len = r.get<std::uint32_t>();
    r.need(record_len);
    const std::size_t start = r.offset();
    Session s;
    s.id = r.get<std::uint64_t>();
    s.origin_step = r.get<std::uint64_t>();
    s.valid_len = r.get<std::uint64_t>();
    const auto L = r.get<std::uint32_t>();
    if (s.valid_len > L) r.fail("valid_len exceeds session length");
    s.query_topic_ids = r.get_array<std::uint32_t>(L);
    s.query_text_ids = r.get_array<std::uint32_t>(L);
    s.item_ids = r.get_array<std::uint32_t>(L);
    s.features = r.get_array<float>(std::size_t{L} * kContextDim);
    s.timestamps = r.get_array<std::int64_t>(L);
    s.click_labels = r.get_array<std::uint8_t>(L);
    if (r.offset() - start != record_len) r.fail("record length mismatch");
    ds.sessions.push_back(std::move(s));
  }
  r.section("trailer");
  if (!r.at_end()) r.fail("trailing bytes after last session");
  return ds;
}

void write_dataset(const std::string& path, const Dataset& ds) {
  binio::write_file(path, encode_dataset(ds));
}

Dataset read_dataset(const std::string& path) { return decode_dataset(binio::read_file(path)); }

namespace binio {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace binio

}  // namespace qgs
