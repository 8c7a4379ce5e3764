#include "pvc/bench.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <thread>

#include <unistd.h>

#include "pvc/data_io.hpp"

namespace pvc {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

class RssSampler {
 public:
  RssSampler() : peak_(current_rss_mb()), thread_([this] {
    while (!stop_.load()) {
      const double rss = current_rss_mb();
      double prev = peak_.load();
      while (rss > prev && !peak_.compare_exchange_weak(prev, rss)) {
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
  }) {}
  ~RssSampler() { finish(); }

  double finish() {
    if (thread_.joinable()) {
      stop_.store(true);
      thread_.join();
    }
    return std::max(peak_.load(), current_rss_mb());
  }

 private:
  std::atomic<bool> stop_{false};
  std::atomic<double> peak_;
  std::thread thread_;
};

}  // namespace

double current_rss_mb() {
  std::ifstream statm("/proc/self/statm");
  std::size_t size = 0, resident = 0;
  if (!(statm >> size >> resident)) return 0.0;
  return static_cast<double>(resident) * static_cast<double>(sysconf(_SC_PAGESIZE)) / (1024.0 * 1024.0);
}

double percentile(std::vector<double> samples, double q) {
  if (samples.empty()) throw DomainError("percentile of no samples");
  std::sort(samples.begin(), samples.end());
  const double rank = std::ceil(q * static_cast<double>(samples.size()));
  const std::size_t idx = static_cast<std::size_t>(std::clamp(rank, 1.0, static_cast<double>(samples.size()))) - 1;
  return samples[idx];
}

std::vector<BenchRow> run_bench(const BenchOptions& options) {
  if (options.runs < 20 || options.warmup < 3) throw ConfigError("bench needs at least 3 warm-up and 20 timed runs");
  std::vector<BenchRow> rows;
  for (const std::size_t n : options.sizes) {
    SyntheticSceneSpec scene;
    scene.points = n;
    scene.seed = options.seed;
    PointCloud cloud = generate_scene(scene).cloud;
    if (options.base.in_channels != cloud.channels) {
      throw ConfigError("bench scenes carry 3 feature channels; config expects " +
                        std::to_string(options.base.in_channels));
    }
    cloud.labels.clear();
    for (const double w : options.widths) {
      NetworkConfig cfg = options.base;
      cfg.width_multiplier = w;
      const Network<float> net(cfg, options.seed);
      auto once = [&] {
        const PreparedCloud prepared = prepare_cloud(cfg, cloud);
        const auto out = net.forward(prepared);
        return out.final_probs.defined() ? out.final_probs.numel() : out.class_probs.numel();
      };
      for (std::size_t i = 0; i < options.warmup; ++i) once();
      std::vector<double> times;
      RssSampler sampler;
      for (std::size_t i = 0; i < options.runs; ++i) {
        const auto start = Clock::now();
        once();
        times.push_back(ms_since(start));
      }
      BenchRow row;
      row.peak_rss_mb = sampler.finish();
      row.width = w;
      row.points = n;
      row.grids = cfg.grid_sizes;
      row.median_ms = percentile(times, 0.5);
      row.p95_ms = percentile(times, 0.95);
      row.parameters = net.parameter_count();
      rows.push_back(row);
    }
  }
  return rows;
}

namespace {

std::string grid_list(const std::vector<std::size_t>& grids) {
  std::string s;
  for (std::size_t i = 0; i < grids.size(); ++i) s += (i ? "/" : "") + std::to_string(grids[i]);
  return s;
}

}  // namespace

void print_bench_table(const std::vector<BenchRow>& rows, std::ostream& out) {
  out << std::left << std::setw(8) << "width" << std::setw(8) << "N" << std::setw(14) << "G" << std::right
      << std::setw(12) << "median_ms" << std::setw(12) << "p95_ms" << std::setw(12) << "peak_MB" << std::setw(12)
      << "params" << '\n';
  out << std::fixed;
  for (const auto& r : rows) {
    out << std::left << std::setw(8) << std::setprecision(2) << r.width << std::setw(8) << r.points << std::setw(14)
        << grid_list(r.grids) << std::right << std::setw(12) << std::setprecision(3) << r.median_ms << std::setw(12)
        << r.p95_ms << std::setw(12) << std::setprecision(1) << r.peak_rss_mb << std::setw(12) << r.parameters
        << '\n';
  }
  out.unsetf(std::ios::floatfield);
}

void write_bench_csv(const std::vector<BenchRow>& rows, std::ostream& out) {
  out << "width,points,grids,median_ms,p95_ms,peak_rss_mb,parameters\n";
  for (const auto& r : rows) {
    out << r.width << ',' << r.points << ',' << grid_list(r.grids) << ',' << r.median_ms << ',' << r.p95_ms << ','
        << r.peak_rss_mb << ',' << r.parameters << '\n';
  }
}

KnnTiming time_knn(std::size_t points, std::size_t queries, const NeighborConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<float> pts(3 * points);
  for (auto& v : pts) v = static_cast<float>(u(rng));
  std::vector<double> qs(3 * queries);
  for (auto& v : qs) v = u(rng);
  KnnTiming t;
  auto start = Clock::now();
  const NeighborIndex brute = knn_dilated(qs, pts, cfg);
  t.brute_ms = ms_since(start);
  start = Clock::now();
  const NeighborIndex grid = knn_grid(qs, pts, cfg);
  t.grid_ms = ms_since(start);
  t.identical = brute == grid;
  return t;
}

}  // namespace pvc
