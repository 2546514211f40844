#include "qgs/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "qgs/binio.hpp"
#include "qgs/encoder.hpp"
#include "qgs/kernels.hpp"
#include "qgs/nn.hpp"

namespace qgs {

namespace {

using Clock = std::chrono::steady_clock;

// Smallest per-sample duration we trust from the clock.
constexpr double kMinSampleMs = 0.05;

template <class F>
double time_ms(F&& f, std::size_t reps) {
  const auto start = Clock::now();
  for (std::size_t i = 0; i < reps; ++i) f();
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count() / double(reps);
}

}  // namespace

void BenchConfig::validate() const {
  if (iters < 20) throw ConfigError("bench.iters must be >= 20");
  if (lengths.empty()) throw ConfigError("bench.lengths must not be empty");
  if (d_h == 0 || num_layers == 0) throw ConfigError("bench.d_h and bench.num_layers must be positive");
  for (const auto& v : variants)
    if (v != "linear" && v != "quadratic") throw ConfigError("unknown bench variant '" + v + "'");
  for (auto p : stream_positions)
    if (p + stream_steps_per_sample > stream_max_len)
      throw ConfigError("bench.stream_positions must stay below bench.stream_max_len");
  if (stream_iters < 20) throw ConfigError("bench.stream_iters must be >= 20");
}

double BenchResult::slope(const std::string& variant) const {
  for (const auto& [v, s] : slopes)
    if (v == variant) return s;
  throw Error("no slope for variant '" + variant + "'");
}

const BenchRow* BenchResult::find(const std::string& variant, std::size_t length) const {
  for (const auto& r : rows)
    if (r.variant == variant && r.length == length) return &r;
  return nullptr;
}

double StreamBenchResult::relative_drift() const {
  if (positions.size() < 2 || mean_us <= 0) return 0;
  const double span = double(positions.back()) - double(positions.front());
  return std::abs(slope_us_per_position) * span / mean_us;
}

double linear_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw Error("slope fit needs >= 2 matching points");
  const double n = double(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  if (sxx == 0) throw Error("slope fit: x values are all equal");
  return sxy / sxx;
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0 && y[i] > 0)) throw Error("log-log fit needs positive values");
    lx.push_back(std::log(x[i]));
    ly.push_back(std::log(y[i]));
  }
  return linear_slope(lx, ly);
}

TimingStats summarize(std::vector<double> s) {
  if (s.empty()) throw Error("summarize: no samples");
  std::sort(s.begin(), s.end());
  auto pct = [&](double q) {
    const double pos = q * double(s.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, s.size() - 1);
    return s[lo] + (pos - double(lo)) * (s[hi] - s[lo]);
  };
  return {pct(0.5), pct(0.1), pct(0.9)};
}

BenchResult bench_encoder(const BenchConfig& cfg) {
  cfg.validate();
  kernels::set_threads(1);
  BenchResult result;
  for (const auto& variant : cfg.variants) {
    EncoderConfig ec;
    ec.num_layers = cfg.num_layers;
    ec.d_h = cfg.d_h;
    ec.dropout = 0;
    ec.quadratic = variant == "quadratic";
    ParamSet<float> params;
    std::mt19937_64 rng(cfg.seed);
    Encoder<float> enc(params, ec, rng);
    std::vector<double> xs, ys;
    for (std::size_t L : cfg.lengths) {
      std::mt19937_64 in_rng(cfg.seed * 7919 + L);
      const Tensor<float> h0 = nn::normal<float>({L, cfg.d_h}, 1.0, in_rng);
      auto run = [&] {
        Tape<float> tape(false);
        auto out = enc.forward(tape, tape.constant(h0), L, false, nullptr);
        if (out.value().size() != h0.size()) throw Error("bench: unexpected output shape");
      };
      std::size_t reps = 1;
      for (std::size_t i = 0; i < cfg.warmup; ++i) run();
      while (time_ms(run, reps) * double(reps) < kMinSampleMs) {
        if (reps >= (1u << 20)) throw Error("bench: timer resolution insufficient");
        reps *= 2;
      }
      std::vector<double> samples;
      for (std::size_t i = 0; i < cfg.iters; ++i) samples.push_back(time_ms(run, reps));
      const auto st = summarize(samples);
      result.rows.push_back({variant, L, st.median, st.p10, st.p90});
      xs.push_back(double(L));
      ys.push_back(st.median);
    }
    if (xs.size() >= 2) result.slopes.emplace_back(variant, loglog_slope(xs, ys));
  }
  return result;
}

StreamBenchResult bench_stream(const BenchConfig& cfg) {
  cfg.validate();
  kernels::set_threads(1);
  EncoderConfig ec;
  ec.num_layers = cfg.num_layers;
  ec.d_h = cfg.d_h;
  ec.dropout = 0;
  ParamSet<float> params;
  std::mt19937_64 rng(cfg.seed);
  Encoder<float> enc(params, ec, rng);

  const std::size_t k = cfg.stream_steps_per_sample;
  std::mt19937_64 in_rng(cfg.seed + 17);
  const Tensor<float> tokens = nn::normal<float>({cfg.stream_max_len, cfg.d_h}, 1.0, in_rng);
  auto token = [&](std::size_t p) { return std::span<const float>(tokens.data() + p * cfg.d_h, cfg.d_h); };

  // State snapshots at each measured position.
  std::vector<StreamState<float>> snapshots;
  {
    auto state = enc.make_state(cfg.stream_max_len);
    for (std::size_t p : cfg.stream_positions) {
      while (state.position < p) enc.stream_step(state, token(state.position));
      snapshots.push_back(state);
    }
  }
  StreamBenchResult r;
  r.positions = cfg.stream_positions;
  std::vector<std::vector<double>> samples(snapshots.size());
  for (std::size_t w = 0; w < cfg.warmup; ++w)
    for (auto snap : snapshots)
      for (std::size_t s = 0; s < k; ++s) enc.stream_step(snap, token(snap.position));
  // Round-robin over positions so slow drift affects all of them alike.
  for (std::size_t it = 0; it < cfg.stream_iters; ++it) {
    for (std::size_t i = 0; i < snapshots.size(); ++i) {
      auto state = snapshots[i];
      const auto start = Clock::now();
      for (std::size_t s = 0; s < k; ++s) enc.stream_step(state, token(state.position));
      samples[i].push_back(std::chrono::duration<double, std::micro>(Clock::now() - start).count() / double(k));
    }
  }
  std::vector<double> xs;
  for (std::size_t i = 0; i < snapshots.size(); ++i) {
    r.median_us.push_back(summarize(samples[i]).median);
    r.state_bytes.push_back(snapshots[i].size_bytes());
    xs.push_back(double(r.positions[i]));
  }
  for (double m : r.median_us) r.mean_us += m / double(r.median_us.size());
  if (xs.size() >= 2) r.slope_us_per_position = linear_slope(xs, r.median_us);
  return r;
}

std::string bench_csv(const BenchResult& result, const std::vector<std::string>& comments) {
  std::string out;
  for (const auto& c : comments) out += "# " + c + "\n";
  out += "variant,L,median_ms,p10_ms,p90_ms\n";
  char buf[128];
  for (const auto& r : result.rows) {
    std::snprintf(buf, sizeof(buf), "%s,%zu,%.6f,%.6f,%.6f\n", r.variant.c_str(), r.length, r.median_ms,
                  r.p10_ms, r.p90_ms);
    out += buf;
  }
  return out;
}

void emit_bench_csv(const BenchResult& result, const std::string& path,
                    const std::vector<std::string>& comments) {
  const std::string s = bench_csv(result, comments);
  binio::write_file(path, std::vector<std::uint8_t>(s.begin(), s.end()));
}

std::vector<BenchRow> parse_bench_csv(const std::string& text) {
  std::vector<BenchRow> rows;
  std::istringstream in(text);
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "variant,L,median_ms,p10_ms,p90_ms") throw Error("bench csv: unexpected header '" + line + "'");
      header = true;
      continue;
    }
    std::istringstream ls(line);
    BenchRow r;
    std::string field;
    std::getline(ls, r.variant, ',');
    std::getline(ls, field, ',');
    r.length = std::stoul(field);
    std::getline(ls, field, ',');
    r.median_ms = std::stod(field);
    std::getline(ls, field, ',');
    r.p10_ms = std::stod(field);
    std::getline(ls, field, ',');
    r.p90_ms = std::stod(field);
    rows.push_back(r);
  }
  return rows;
}

std::string stream_csv(const StreamBenchResult& r) {
  std::string out = "position,median_us,state_bytes\n";
  char buf[96];
  for (std::size_t i = 0; i < r.positions.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f,%zu\n", r.positions[i], r.median_us[i], r.state_bytes[i]);
    out += buf;
  }
  return out;
}

std::vector<std::string> environment_comments() {
  std::vector<std::string> c;
  c.push_back("hardware_concurrency=" + std::to_string(std::thread::hardware_concurrency()));
  c.push_back("kernel_threads=" + std::to_string(kernels::max_threads()));
#if defined(__clang__)
  c.push_back(std::string("compiler=clang ") + __clang_version__);
#elif defined(__GNUC__)
  c.push_back(std::string("compiler=gcc ") + __VERSION__);
#endif
  std::ifstream cpu("/proc/cpuinfo");
  std::string line;
  while (std::getline(cpu, line)) {
    if (line.rfind("model name", 0) == 0) {
      c.push_back("cpu=" + line.substr(line.find(':') + 2));
      break;
    }
  }
  return c;
}

}  // namespace qgs
