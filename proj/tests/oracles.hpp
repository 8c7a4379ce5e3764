#pragma once

// Straightforward reference implementations used only by tests. They share no
// code with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace oracle {

// Direct summation over every output cell, channel, and kernel tap.
inline std::vector<double> conv3d(const std::vector<double>& in, const std::vector<double>& w,
                                  const std::vector<double>& b, std::size_t ci, std::size_t co, std::size_t g,
                                  std::size_t k) {
  const long r = static_cast<long>(k / 2), G = static_cast<long>(g), K = static_cast<long>(k);
  std::vector<double> out(co * g * g * g, 0.0);
  for (std::size_t o = 0; o < co; ++o)
    for (long x = 0; x < G; ++x)
      for (long y = 0; y < G; ++y)
        for (long z = 0; z < G; ++z) {
          double acc = b.empty() ? 0.0 : b[o];
          for (std::size_t i = 0; i < ci; ++i)
            for (long dx = 0; dx < K; ++dx)
              for (long dy = 0; dy < K; ++dy)
                for (long dz = 0; dz < K; ++dz) {
                  const long sx = x + dx - r, sy = y + dy - r, sz = z + dz - r;
                  if (sx < 0 || sy < 0 || sz < 0 || sx >= G || sy >= G || sz >= G) continue;
                  acc += w[(((o * ci + i) * k + dx) * k + dy) * k + dz] * in[((i * g + sx) * g + sy) * g + sz];
                }
          out[((o * g + x) * g + y) * g + z] = acc;
        }
  return out;
}

// Sort the whole distance list, then pick ranks 0, n', 2n', ... with n'
// reduced for small clouds and the farthest point repeated when N < K.
inline std::vector<std::uint32_t> knn_dilated(const std::vector<double>& queries, const std::vector<float>& points,
                                              std::size_t k, std::size_t n) {
  const std::size_t np = points.size() / 3, nq = queries.size() / 3;
  const std::size_t stride = np < k * n ? std::max<std::size_t>(1, np / k) : n;
  std::vector<std::uint32_t> out;
  std::vector<std::pair<double, std::uint32_t>> all(np);
  for (std::size_t q = 0; q < nq; ++q) {
    for (std::size_t p = 0; p < np; ++p) {
      double d = 0.0;
      for (int a = 0; a < 3; ++a) {
        const double diff = queries[3 * q + a] - static_cast<double>(points[3 * p + a]);
        d += diff * diff;
      }
      all[p] = {d, static_cast<std::uint32_t>(p)};
    }
    std::sort(all.begin(), all.end());
    for (std::size_t s = 0; s < k; ++s) out.push_back(all[std::min(s * stride, np - 1)].second);
  }
  return out;
}

// Sum over heads of the mean negative log true-class probability over
// unmasked points.
inline double segmentation_loss(const std::vector<std::vector<double>>& heads, const std::vector<std::uint32_t>& labels,
                                const std::vector<std::uint8_t>& mask, std::size_t classes) {
  double total = 0.0;
  for (const auto& probs : heads) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (!mask.empty() && !mask[i]) continue;
      sum -= std::log(probs[i * classes + labels[i]]);
      ++count;
    }
    total += sum / static_cast<double>(count);
  }
  return total;
}

struct ScalarAdam {
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double m = 0.0, v = 0.0;
  int t = 0;

  double step(double x, double g) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    return x - lr * mh / (std::sqrt(vh) + eps);
  }
};

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

inline double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor}));
  }
  return worst;
}

}  // namespace oracle
