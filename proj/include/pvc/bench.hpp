#pragma once

#include <cstddef>
#include <cstdint>
#include <ostream>
#include <vector>

#include "pvc/network.hpp"

namespace pvc {

struct BenchOptions {
  std::vector<double> widths{0.5, 0.75, 1.0};
  std::vector<std::size_t> sizes{2048, 8192};
  std::size_t warmup = 3;
  std::size_t runs = 20;
  std::uint64_t seed = 7;
  NetworkConfig base;  // width_multiplier is overridden per row
};

struct BenchRow {
  double width = 1.0;
  std::size_t points = 0;
  std::vector<std::size_t> grids;
  double median_ms = 0.0;
  double p95_ms = 0.0;
  double peak_rss_mb = 0.0;
  std::size_t parameters = 0;
};

/// Times prepare_cloud (voxelization and neighbor search) plus one forward
/// pass with no tape, per width and point count. Scene generation happens
/// before the timed region. Peak RSS is sampled from /proc during the timed
/// runs of each row.
std::vector<BenchRow> run_bench(const BenchOptions& options);

/// Nearest-rank percentile of unsorted samples, q in [0, 1].
double percentile(std::vector<double> samples, double q);

void print_bench_table(const std::vector<BenchRow>& rows, std::ostream& out);
void write_bench_csv(const std::vector<BenchRow>& rows, std::ostream& out);

struct KnnTiming {
  double brute_ms = 0.0;
  double grid_ms = 0.0;
  bool identical = false;
};

/// Brute-force versus grid-hash dilated KNN on uniform random points.
KnnTiming time_knn(std::size_t points, std::size_t queries, const NeighborConfig& cfg, std::uint64_t seed);

/// Current resident set size in MB, or 0 where /proc is unavailable.
double current_rss_mb();

}  // namespace pvc
