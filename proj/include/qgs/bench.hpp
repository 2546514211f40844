#pragma once

// Latency harness: encoder forward time against sequence length (linear vs
// quadratic reference) and per-step streaming time against position.

#include <cstdint>
#include <string>
#include <vector>

namespace qgs {

struct BenchConfig {
  std::vector<std::size_t> lengths{128, 256, 512, 1024, 2048};
  std::size_t d_h = 64;
  std::size_t num_layers = 2;
  std::size_t warmup = 3;
  std::size_t iters = 20;
  std::vector<std::string> variants{"linear", "quadratic"};
  std::vector<std::size_t> stream_positions{10, 100, 1000};
  std::size_t stream_iters = 200;
  std::size_t stream_steps_per_sample = 8;
  std::size_t stream_max_len = 1024;
  std::uint64_t seed = 1;

  void validate() const;
};

struct BenchRow {
  std::string variant;
  std::size_t length = 0;
  double median_ms = 0;
  double p10_ms = 0;
  double p90_ms = 0;
};

struct BenchResult {
  std::vector<BenchRow> rows;
  std::vector<std::pair<std::string, double>> slopes;  // log-log fit per variant

  double slope(const std::string& variant) const;
  const BenchRow* find(const std::string& variant, std::size_t length) const;
};

struct StreamBenchResult {
  std::vector<std::size_t> positions;
  std::vector<double> median_us;      // per step
  std::vector<std::size_t> state_bytes;
  double slope_us_per_position = 0;
  double mean_us = 0;
  // Predicted change over the measured position range relative to the mean.
  double relative_drift() const;
};

// Least-squares slope of log(y) on log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);
double linear_slope(const std::vector<double>& x, const std::vector<double>& y);

struct TimingStats {
  double median = 0, p10 = 0, p90 = 0;
};
// Percentiles by linear interpolation.
TimingStats summarize(std::vector<double> samples);

// Both harnesses pin the kernels to one thread.
BenchResult bench_encoder(const BenchConfig& cfg);
StreamBenchResult bench_stream(const BenchConfig& cfg);

// `variant,L,median_ms,p10_ms,p90_ms`, preceded by '#' comment lines.
std::string bench_csv(const BenchResult& result, const std::vector<std::string>& comments = {});
void emit_bench_csv(const BenchResult& result, const std::string& path,
                    const std::vector<std::string>& comments = {});
std::vector<BenchRow> parse_bench_csv(const std::string& text);
std::string stream_csv(const StreamBenchResult& result);

// Host description for CSV header comments.
std::vector<std::string> environment_comments();

}  // namespace qgs
