#include "pvc/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>

#include "pvc/kernels.hpp"

namespace pvc {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace debug {
namespace {
Fault g_fault = Fault::none;
}
void set_fault(Fault fault) { g_fault = fault; }
Fault active_fault() { return g_fault; }
}  // namespace debug

namespace {

template <typename T>
using NodePtr = std::shared_ptr<typename Tensor<T>::Node>;

template <typename T>
Tensor<T> result(Shape shape, std::vector<T> data, bool record) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (record) out.set_requires_grad(true);
  return out;
}

template <typename T>
void record(std::function<void()> fn) {
  GradTape<T>::active()->record(std::move(fn));
}

template <typename T>
void check_finite(std::span<const T> values, const char* op) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw DomainError(std::string(op) + " produced a non-finite value at flat index " + std::to_string(i));
    }
  }
}

template <typename T>
void require_rank2(const Tensor<T>& a, const char* op) {
  if (!a.defined() || a.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a rank-2 tensor, got " + (a.defined() ? shape_str(a.shape()) : "undefined"));
  }
}

// How the smaller operand of a binary op maps onto the output.
struct Broadcast {
  Shape out;
  std::size_t a_period;  // a[i % a_period]
  std::size_t b_period;
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Broadcast broadcast(const Shape& a, const Shape& b) {
  const std::size_t na = shape_numel(a), nb = shape_numel(b);
  if (a == b) return {a, na, nb};
  if (nb == 1) return {a, na, 1};
  if (na == 1) return {b, 1, nb};
  if (is_suffix(b, a)) return {a, na, nb};
  if (is_suffix(a, b)) return {b, na, nb};
  throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
}

// Folds a gradient of the full output back onto an operand of the given period.
template <typename T>
std::vector<T> fold(std::span<const T> g, std::size_t period) {
  if (period == g.size()) return {g.begin(), g.end()};
  std::vector<T> out(period, T(0));
  for (std::size_t i = 0; i < g.size(); ++i) out[i % period] += g[i];
  return out;
}

template <typename T>
void monitor_signs(std::span<const T> x) {
  if (auto* mon = KinkMonitor::active()) {
    for (const T v : x) mon->mix(v > T(0) ? 1 : (v < T(0) ? 2 : 3));
  }
}

}  // namespace

template <typename T>
Tensor<T> elementwise(Elementwise kind, const Tensor<T>& a, const Tensor<T>& b) {
  const bool binary = kind == Elementwise::add || kind == Elementwise::sub || kind == Elementwise::mul;
  if (binary) {
    if (!b.defined()) throw DimensionError("binary elementwise op needs two operands");
    const Broadcast bc = broadcast(a.shape(), b.shape());
    const std::size_t n = shape_numel(bc.out);
    std::vector<T> out(n);
    const auto da = a.data();
    const auto db = b.data();
    for (std::size_t i = 0; i < n; ++i) {
      const T x = da[i % bc.a_period], y = db[i % bc.b_period];
      out[i] = kind == Elementwise::add ? x + y : kind == Elementwise::sub ? x - y : x * y;
    }
    const bool rec = detail::recording<T>({&a, &b});
    Tensor<T> res = result<T>(bc.out, std::move(out), rec);
    if (rec) {
      NodePtr<T> an = a.node(), bn = b.node(), on = res.node();
      record<T>([an, bn, on, kind, bc] {
        if (on->grad.empty()) return;
        const std::span<const T> g = on->grad;
        const std::size_t n = g.size();
        if (an->requires_grad) {
          std::vector<T> ga(n);
          for (std::size_t i = 0; i < n; ++i) ga[i] = kind == Elementwise::mul ? g[i] * bn->data[i % bc.b_period] : g[i];
          detail::accumulate<T>(*an, fold<T>(ga, bc.a_period));
        }
        if (bn->requires_grad) {
          std::vector<T> gb(n);
          for (std::size_t i = 0; i < n; ++i) {
            gb[i] = kind == Elementwise::mul ? g[i] * an->data[i % bc.a_period]
                                             : (kind == Elementwise::sub ? -g[i] : g[i]);
          }
          detail::accumulate<T>(*bn, fold<T>(gb, bc.b_period));
        }
      });
    }
    return res;
  }

  const auto da = a.data();
  std::vector<T> out(da.size());
  switch (kind) {
    case Elementwise::relu:
      monitor_signs<T>(da);
      for (std::size_t i = 0; i < da.size(); ++i) out[i] = da[i] > T(0) ? da[i] : T(0);
      break;
    case Elementwise::exp:
      for (std::size_t i = 0; i < da.size(); ++i) out[i] = std::exp(da[i]);
      check_finite<T>(out, "exp");
      break;
    case Elementwise::log:
      for (std::size_t i = 0; i < da.size(); ++i) {
        if (!(da[i] > T(0))) throw DomainError("log of non-positive value at flat index " + std::to_string(i));
        out[i] = std::log(da[i]);
      }
      break;
    default:
      break;
  }
  const bool rec = detail::recording<T>({&a});
  Tensor<T> res = result<T>(a.shape(), std::move(out), rec);
  if (rec) {
    NodePtr<T> an = a.node(), on = res.node();
    record<T>([an, on, kind] {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      std::vector<T> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T x = an->data[i];
        switch (kind) {
          case Elementwise::relu: ga[i] = x > T(0) ? g[i] : T(0); break;
          case Elementwise::exp: ga[i] = g[i] * on->data[i]; break;
          case Elementwise::log: ga[i] = g[i] / x; break;
          default: break;
        }
      }
      detail::accumulate<T>(*an, ga);
    });
  }
  return res;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  if (b.dim(0) != k) throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) + " · " + shape_str(b.shape()));
  std::vector<T> out(m * p);
  kernels::matmul<T>(a.data(), b.data(), out, m, k, p);
  const bool rec = detail::recording<T>({&a, &b});
  Tensor<T> res = result<T>({m, p}, std::move(out), rec);
  if (rec) {
    NodePtr<T> an = a.node(), bn = b.node(), on = res.node();
    record<T>([an, bn, on, m, k, p] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        std::vector<T> bt(k * p), ga(m * k);
        kernels::transpose<T>(bn->data, bt, k, p);
        kernels::matmul<T>(on->grad, bt, ga, m, p, k);
        detail::accumulate<T>(*an, ga);
      }
      if (bn->requires_grad) {
        std::vector<T> at(m * k), gb(k * p);
        kernels::transpose<T>(an->data, at, m, k);
        kernels::matmul<T>(at, on->grad, gb, k, m, p);
        detail::accumulate<T>(*bn, gb);
      }
    });
  }
  return res;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank2(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(r * c);
  kernels::transpose<T>(a.data(), out, r, c);
  const bool rec = detail::recording<T>({&a});
  Tensor<T> res = result<T>({c, r}, std::move(out), rec);
  if (rec) {
    NodePtr<T> an = a.node(), on = res.node();
    record<T>([an, on, r, c] {
      if (on->grad.empty()) return;
      std::vector<T> ga(r * c);
      kernels::transpose<T>(on->grad, ga, c, r);
      detail::accumulate<T>(*an, ga);
    });
  }
  return res;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank2(x, "linear");
  require_rank2(w, "linear");
  const std::size_t n = x.dim(0), in = x.dim(1), out_ch = w.dim(1);
  if (w.dim(0) != in) throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  if (bias.defined() && bias.numel() != out_ch) throw DimensionError("linear: bias " + shape_str(bias.shape()));
  std::vector<T> out(n * out_ch);
  if (bias.defined()) {
    for (std::size_t i = 0; i < n; ++i) std::copy(bias.data().begin(), bias.data().end(), out.begin() + i * out_ch);
  }
  kernels::matmul<T>(x.data(), w.data(), out, n, in, out_ch, true);
  const bool rec = bias.defined() ? detail::recording<T>({&x, &w, &bias}) : detail::recording<T>({&x, &w});
  Tensor<T> res = result<T>({n, out_ch}, std::move(out), rec);
  if (rec) {
    NodePtr<T> xn = x.node(), wn = w.node(), bn = bias.defined() ? bias.node() : nullptr, on = res.node();
    record<T>([xn, wn, bn, on, n, in, out_ch] {
      if (on->grad.empty()) return;
      if (xn->requires_grad) {
        std::vector<T> wt(in * out_ch), gx(n * in);
        kernels::transpose<T>(wn->data, wt, in, out_ch);
        kernels::matmul<T>(on->grad, wt, gx, n, out_ch, in);
        detail::accumulate<T>(*xn, gx);
      }
      if (wn->requires_grad) {
        std::vector<T> xt(n * in), gw(in * out_ch);
        kernels::transpose<T>(xn->data, xt, n, in);
        kernels::matmul<T>(xt, on->grad, gw, in, n, out_ch);
        detail::accumulate<T>(*wn, gw);
      }
      if (bn && bn->requires_grad) detail::accumulate<T>(*bn, fold<T>(on->grad, out_ch));
    });
  }
  return res;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> softmax_pairwise(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("softmax_pairwise shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t n = a.numel();
  std::vector<T> pa(n), pb(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T m = std::max(a[i], b[i]);
    const T ea = std::exp(a[i] - m), eb = std::exp(b[i] - m);
    pa[i] = ea / (ea + eb);
    pb[i] = eb / (ea + eb);
  }
  check_finite<T>(pa, "softmax_pairwise");
  const bool rec = detail::recording<T>({&a, &b});
  Tensor<T> ra = result<T>(a.shape(), std::move(pa), rec);
  Tensor<T> rb = result<T>(a.shape(), std::move(pb), rec);
  if (rec) {
    NodePtr<T> an = a.node(), bn = b.node(), oa = ra.node(), ob = rb.node();
    record<T>([an, bn, oa, ob, n] {
      if (oa->grad.empty() && ob->grad.empty()) return;
      std::vector<T> ga(n), gb(n);
      for (std::size_t i = 0; i < n; ++i) {
        const T d = (oa->grad.empty() ? T(0) : oa->grad[i]) - (ob->grad.empty() ? T(0) : ob->grad[i]);
        ga[i] = oa->data[i] * ob->data[i] * d;
        gb[i] = -ga[i];
      }
      if (an->requires_grad) detail::accumulate<T>(*an, ga);
      if (bn->requires_grad) detail::accumulate<T>(*bn, gb);
    });
  }
  return {ra, rb};
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  require_rank2(a, "softmax_rows");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data().data() + r * cols;
    T* y = out.data() + r * cols;
    const T m = *std::max_element(x, x + cols);
    T sum = T(0);
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - m);
      sum += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= sum;
  }
  check_finite<T>(out, "softmax_rows");
  const bool rec = detail::recording<T>({&a});
  Tensor<T> res = result<T>(a.shape(), std::move(out), rec);
  if (rec) {
    NodePtr<T> an = a.node(), on = res.node();
    record<T>([an, on, rows, cols] {
      if (on->grad.empty()) return;
      std::vector<T> ga(rows * cols);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = on->data.data() + r * cols;
        const T* g = on->grad.data() + r * cols;
        T dot = T(0);
        for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
        for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] = y[c] * (g[c] - dot);
      }
      detail::accumulate<T>(*an, ga);
    });
  }
  return res;
}

template <typename T>
Tensor<T> reduce(Reduction kind, const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) throw DimensionError("reduce axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
  const Shape& s = a.shape();
  const std::size_t extent = s[axis];
  if (extent == 0) throw DomainError("reduce over an empty axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);

  std::vector<T> out(outer * inner);
  std::vector<std::size_t> argmax;
  if (kind == Reduction::max) argmax.resize(outer * inner);
  const auto d = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * extent * inner + i;
      if (kind == Reduction::max) {
        std::size_t best = 0;
        for (std::size_t e = 1; e < extent; ++e)
          if (d[base + e * inner] > d[base + best * inner]) best = e;
        out[o * inner + i] = d[base + best * inner];
        argmax[o * inner + i] = best;
      } else {
        T acc = T(0);
        for (std::size_t e = 0; e < extent; ++e) acc += d[base + e * inner];
        out[o * inner + i] = kind == Reduction::mean ? acc / static_cast<T>(extent) : acc;
      }
    }
  }
  if (kind == Reduction::max) {
    if (auto* mon = KinkMonitor::active())
      for (const auto idx : argmax) mon->mix(idx);
  }
  const bool rec = detail::recording<T>({&a});
  Tensor<T> res = result<T>(std::move(out_shape), std::move(out), rec);
  if (rec) {
    NodePtr<T> an = a.node(), on = res.node();
    record<T>([an, on, kind, outer, inner, extent, argmax = std::move(argmax)] {
      if (on->grad.empty()) return;
      std::vector<T> ga(outer * extent * inner, T(0));
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const T g = on->grad[o * inner + i];
          const std::size_t base = o * extent * inner + i;
          if (kind == Reduction::max) {
            ga[base + argmax[o * inner + i] * inner] += g;
          } else {
            const T v = kind == Reduction::mean ? g / static_cast<T>(extent) : g;
            for (std::size_t e = 0; e < extent; ++e) ga[base + e * inner] += v;
          }
        }
      }
      detail::accumulate<T>(*an, ga);
    });
  }
  return res;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const Index> idx) {
  require_rank2(a, "gather_rows");
  const std::size_t n = a.dim(0), c = a.dim(1), m = idx.size();
  for (std::size_t i = 0; i < m; ++i) {
    if (idx[i] >= n) throw IndexError("gather_rows index " + std::to_string(idx[i]) + " out of range [0, " + std::to_string(n) + ")");
  }
  std::vector<T> out(m * c);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(a.data().begin() + idx[i] * c, c, out.begin() + i * c);
  const bool rec = detail::recording<T>({&a});
  Tensor<T> res = result<T>({m, c}, std::move(out), rec);
  if (rec) {
    NodePtr<T> an = a.node(), on = res.node();
    std::vector<Index> ids(idx.begin(), idx.end());
    record<T>([an, on, ids = std::move(ids), n, c] {
      if (on->grad.empty()) return;
      std::vector<T> ga(n * c, T(0));
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) ga[ids[i] * c + j] += on->grad[i * c + j];
      detail::accumulate<T>(*an, ga);
    });
  }
  return res;
}

template <typename T>
Tensor<T> scatter_add_rows(const Tensor<T>& target, std::span<const Index> idx, const Tensor<T>& src) {
  require_rank2(target, "scatter_add_rows");
  require_rank2(src, "scatter_add_rows");
  const std::size_t n = target.dim(0), c = target.dim(1), m = src.dim(0);
  if (src.dim(1) != c || idx.size() != m) throw DimensionError("scatter_add_rows: src " + shape_str(src.shape()) + " vs target " + shape_str(target.shape()));
  for (std::size_t i = 0; i < m; ++i) {
    if (idx[i] >= n) throw IndexError("scatter_add_rows index " + std::to_string(idx[i]) + " out of range [0, " + std::to_string(n) + ")");
  }
  std::vector<T> out(target.data().begin(), target.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < c; ++j) out[idx[i] * c + j] += src[i * c + j];
  const bool rec = detail::recording<T>({&target, &src});
  Tensor<T> res = result<T>({n, c}, std::move(out), rec);
  if (rec) {
    NodePtr<T> tn = target.node(), sn = src.node(), on = res.node();
    std::vector<Index> ids(idx.begin(), idx.end());
    record<T>([tn, sn, on, ids = std::move(ids), c] {
      if (on->grad.empty()) return;
      if (tn->requires_grad) detail::accumulate<T>(*tn, on->grad);
      if (sn->requires_grad) {
        std::vector<T> gs(ids.size() * c);
        for (std::size_t i = 0; i < ids.size(); ++i) std::copy_n(on->grad.begin() + ids[i] * c, c, gs.begin() + i * c);
        detail::accumulate<T>(*sn, gs);
      }
    });
  }
  return res;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const std::size_t n = parts.front().dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.dim(0) != n) throw DimensionError("concat_cols row counts differ: " + std::to_string(p.dim(0)) + " vs " + std::to_string(n));
    total += p.dim(1);
  }
  std::vector<T> out(n * total);
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.dim(1);
    for (std::size_t i = 0; i < n; ++i) std::copy_n(p.data().begin() + i * c, c, out.begin() + i * total + col);
    col += c;
  }
  bool rec = false;
  for (const auto& p : parts) rec = rec || detail::recording<T>({&p});
  Tensor<T> res = result<T>({n, total}, std::move(out), rec);
  if (rec) {
    std::vector<NodePtr<T>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    NodePtr<T> on = res.node();
    record<T>([nodes = std::move(nodes), on, n, total] {
      if (on->grad.empty()) return;
      std::size_t col = 0;
      for (const auto& pn : nodes) {
        const std::size_t c = pn->shape[1];
        if (pn->requires_grad) {
          std::vector<T> g(n * c);
          for (std::size_t i = 0; i < n; ++i) std::copy_n(on->grad.begin() + i * total + col, c, g.begin() + i * c);
          detail::accumulate<T>(*pn, g);
        }
        col += c;
      }
    });
  }
  return res;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw DimensionError("reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  const bool rec = detail::recording<T>({&a});
  Tensor<T> res = result<T>(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()), rec);
  if (rec) {
    NodePtr<T> an = a.node(), on = res.node();
    record<T>([an, on] {
      if (!on->grad.empty()) detail::accumulate<T>(*an, on->grad);
    });
  }
  return res;
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& volume, const Tensor<T>& kernels_t, const Tensor<T>& bias) {
  if (volume.rank() != 4 || kernels_t.rank() != 5) {
    throw DimensionError("conv3d expects volume [C×G×G×G] and kernels [Co×Ci×k×k×k], got " + shape_str(volume.shape()) +
                         " and " + shape_str(kernels_t.shape()));
  }
  const std::size_t g = volume.dim(1);
  const std::size_t k = kernels_t.dim(2);
  if (volume.dim(2) != g || volume.dim(3) != g) throw DimensionError("conv3d volume must be cubic");
  if (kernels_t.dim(3) != k || kernels_t.dim(4) != k) throw DimensionError("conv3d kernels must be cubic");
  if (k % 2 == 0) throw ConfigError("conv3d kernel size must be odd, got " + std::to_string(k));
  if (kernels_t.dim(1) != volume.dim(0)) throw DimensionError("conv3d channel mismatch: volume " + shape_str(volume.shape()) + " kernels " + shape_str(kernels_t.shape()));
  const kernels::Conv3dShape cs{volume.dim(0), kernels_t.dim(0), g, k};
  if (bias.defined() && bias.numel() != cs.out_channels) throw DimensionError("conv3d bias " + shape_str(bias.shape()));
  std::vector<T> out(cs.out_channels * g * g * g);
  kernels::conv3d_forward<T>(cs, volume.data(), kernels_t.data(), bias.defined() ? bias.data() : std::span<const T>{}, out);
  const bool rec = bias.defined() ? detail::recording<T>({&volume, &kernels_t, &bias}) : detail::recording<T>({&volume, &kernels_t});
  Tensor<T> res = result<T>({cs.out_channels, g, g, g}, std::move(out), rec);
  if (rec) {
    NodePtr<T> vn = volume.node(), kn = kernels_t.node(), bn = bias.defined() ? bias.node() : nullptr, on = res.node();
    record<T>([vn, kn, bn, on, cs] {
      if (on->grad.empty()) return;
      std::vector<T> gv(vn->requires_grad ? vn->data.size() : 0, T(0));
      std::vector<T> gk(kn->requires_grad ? kn->data.size() : 0, T(0));
      std::vector<T> gb(bn && bn->requires_grad ? bn->data.size() : 0, T(0));
      kernels::conv3d_backward<T>(cs, vn->data, kn->data, on->grad, gv, gk, gb);
      if (debug::active_fault() == debug::Fault::conv3d_backward_sign) {
        for (auto& v : gv) v = -v;
      }
      if (!gv.empty()) detail::accumulate<T>(*vn, gv);
      if (!gk.empty()) detail::accumulate<T>(*kn, gk);
      if (!gb.empty()) detail::accumulate<T>(*bn, gb);
    });
  }
  return res;
}

template <typename T>
Tensor<T> rows_to_volume(const Tensor<T>& rows, std::span<const Index> cells, std::size_t grid) {
  require_rank2(rows, "rows_to_volume");
  const std::size_t m = rows.dim(0), c = rows.dim(1), ncell = grid * grid * grid;
  if (cells.size() != m) throw DimensionError("rows_to_volume: " + std::to_string(m) + " rows for " + std::to_string(cells.size()) + " cells");
  for (const Index cell : cells)
    if (cell >= ncell) throw IndexError("rows_to_volume cell " + std::to_string(cell) + " outside a " + std::to_string(grid) + "^3 grid");
  std::vector<T> out(c * ncell, T(0));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * ncell + cells[i]] = rows[i * c + j];
  const bool rec = detail::recording<T>({&rows});
  Tensor<T> res = result<T>({c, grid, grid, grid}, std::move(out), rec);
  if (rec) {
    NodePtr<T> rn = rows.node(), on = res.node();
    std::vector<Index> ids(cells.begin(), cells.end());
    record<T>([rn, on, ids = std::move(ids), c, ncell] {
      if (on->grad.empty()) return;
      std::vector<T> gr(ids.size() * c);
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) gr[i * c + j] = on->grad[j * ncell + ids[i]];
      detail::accumulate<T>(*rn, gr);
    });
  }
  return res;
}

template <typename T>
Tensor<T> volume_to_rows(const Tensor<T>& volume, std::span<const Index> cells) {
  if (volume.rank() != 4) throw DimensionError("volume_to_rows expects [C×G×G×G], got " + shape_str(volume.shape()));
  const std::size_t c = volume.dim(0), ncell = volume.dim(1) * volume.dim(2) * volume.dim(3), n = cells.size();
  for (const Index cell : cells)
    if (cell >= ncell) throw IndexError("volume_to_rows cell " + std::to_string(cell) + " out of range");
  std::vector<T> out(n * c);
  const auto vd = volume.data();
  const std::int64_t rows = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (n * c > (1u << 16))
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::size_t i = static_cast<std::size_t>(r);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = vd[j * ncell + cells[i]];
  }
  const bool rec = detail::recording<T>({&volume});
  Tensor<T> res = result<T>({n, c}, std::move(out), rec);
  if (rec) {
    NodePtr<T> vn = volume.node(), on = res.node();
    std::vector<Index> ids(cells.begin(), cells.end());
    record<T>([vn, on, ids = std::move(ids), c, ncell] {
      if (on->grad.empty()) return;
      std::vector<T> gv(c * ncell, T(0));
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) gv[j * ncell + ids[i]] += on->grad[i * c + j];
      detail::accumulate<T>(*vn, gv);
    });
  }
  return res;
}

template <typename T>
Tensor<T> segment_mean(const Tensor<T>& features, std::span<const Index> offsets, std::span<const Index> members) {
  require_rank2(features, "segment_mean");
  if (offsets.empty()) throw DimensionError("segment_mean needs segment offsets");
  const std::size_t n = features.dim(0), c = features.dim(1), m = offsets.size() - 1;
  if (offsets.back() != members.size()) throw DimensionError("segment_mean offsets do not cover members");
  for (const Index p : members)
    if (p >= n) throw IndexError("segment_mean member " + std::to_string(p) + " out of range");
  std::vector<T> out(m * c, T(0));
  for (std::size_t s = 0; s < m; ++s) {
    const std::size_t count = offsets[s + 1] - offsets[s];
    if (count == 0) throw DomainError("segment_mean over an empty segment");
    for (Index i = offsets[s]; i < offsets[s + 1]; ++i)
      for (std::size_t j = 0; j < c; ++j) out[s * c + j] += features[members[i] * c + j];
    for (std::size_t j = 0; j < c; ++j) out[s * c + j] /= static_cast<T>(count);
  }
  const bool rec = detail::recording<T>({&features});
  Tensor<T> res = result<T>({m, c}, std::move(out), rec);
  if (rec) {
    NodePtr<T> fn = features.node(), on = res.node();
    std::vector<Index> offs(offsets.begin(), offsets.end()), mem(members.begin(), members.end());
    record<T>([fn, on, offs = std::move(offs), mem = std::move(mem), n, c, m] {
      if (on->grad.empty()) return;
      std::vector<T> gf(n * c, T(0));
      for (std::size_t s = 0; s < m; ++s) {
        const T inv = T(1) / static_cast<T>(offs[s + 1] - offs[s]);
        for (Index i = offs[s]; i < offs[s + 1]; ++i)
          for (std::size_t j = 0; j < c; ++j) gf[mem[i] * c + j] += on->grad[s * c + j] * inv;
      }
      detail::accumulate<T>(*fn, gf);
    });
  }
  return res;
}

template <typename T>
Tensor<T> standardize_columns(const Tensor<T>& x, double eps) {
  require_rank2(x, "standardize_columns");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (n == 0) throw DomainError("standardize_columns over zero rows");
  std::vector<double> mean(c, 0.0), inv_std(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) mean[j] += static_cast<double>(x[i * c + j]);
  for (auto& v : mean) v /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = static_cast<double>(x[i * c + j]) - mean[j];
      inv_std[j] += d * d;
    }
  for (auto& v : inv_std) v = 1.0 / std::sqrt(v / static_cast<double>(n) + eps);
  std::vector<T> out(n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = static_cast<T>((static_cast<double>(x[i * c + j]) - mean[j]) * inv_std[j]);
  check_finite<T>(out, "standardize_columns");
  const bool rec = detail::recording<T>({&x});
  Tensor<T> res = result<T>({n, c}, std::move(out), rec);
  if (rec) {
    NodePtr<T> xn = x.node(), on = res.node();
    record<T>([xn, on, inv_std, n, c] {
      if (on->grad.empty()) return;
      // dx = (dy − mean(dy) − y · mean(dy ⊙ y)) / σ per column
      std::vector<double> mg(c, 0.0), mgy(c, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const double g = static_cast<double>(on->grad[i * c + j]);
          mg[j] += g;
          mgy[j] += g * static_cast<double>(on->data[i * c + j]);
        }
      const double inv_n = 1.0 / static_cast<double>(n);
      std::vector<T> gx(n * c);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const double g = static_cast<double>(on->grad[i * c + j]);
          const double y = static_cast<double>(on->data[i * c + j]);
          gx[i * c + j] = static_cast<T>((g - mg[j] * inv_n - y * mgy[j] * inv_n) * inv_std[j]);
        }
      detail::accumulate<T>(*xn, gx);
    });
  }
  return res;
}

template <typename T>
Tensor<T> attentive_aggregate(const Tensor<T>& features, const Tensor<T>& offsets, std::span<const Index> nbr,
                              std::size_t k, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank2(features, "attentive_aggregate");
  require_rank2(w, "attentive_aggregate");
  const std::size_t n = features.dim(0), c = features.dim(1);
  if (k == 0 || nbr.size() % k != 0) throw DimensionError("attentive_aggregate: neighbor list not a multiple of K");
  const std::size_t rows = nbr.size(), m = rows / k, in = 3 + c;
  if (offsets.numel() != rows * 3) throw DimensionError("attentive_aggregate: offsets " + shape_str(offsets.shape()));
  if (w.dim(0) != in || w.dim(1) != c || bias.numel() != c) {
    throw DimensionError("attentive_aggregate: weight " + shape_str(w.shape()) + " for " + std::to_string(c) + " channels");
  }
  for (const Index p : nbr)
    if (p >= n) throw IndexError("neighbor index " + std::to_string(p) + " out of range [0, " + std::to_string(n) + ")");

  const T* f = features.data().data();
  const T* off = offsets.data().data();
  const T* wd = w.data().data();
  const T* bd = bias.data().data();
  std::vector<T> pre(rows * c);
  std::vector<T> out(m * c, T(0));
  const std::int64_t mq = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (rows * in * c > (1u << 15))
  for (std::int64_t qi = 0; qi < mq; ++qi) {
    const std::size_t q = static_cast<std::size_t>(qi);
    T* o = out.data() + q * c;
    for (std::size_t s = 0; s < k; ++s) {
      const std::size_t r = q * k + s;
      const T* fr = f + nbr[r] * c;
      T* p = pre.data() + r * c;
      std::copy_n(bd, c, p);
      for (std::size_t j = 0; j < 3; ++j) {
        const T x = off[r * 3 + j];
        const T* wr = wd + j * c;
        for (std::size_t ch = 0; ch < c; ++ch) p[ch] += x * wr[ch];
      }
      for (std::size_t i = 0; i < c; ++i) {
        const T x = fr[i];
        const T* wr = wd + (3 + i) * c;
        for (std::size_t ch = 0; ch < c; ++ch) p[ch] += x * wr[ch];
      }
      for (std::size_t ch = 0; ch < c; ++ch) o[ch] += (p[ch] > T(0) ? p[ch] : T(0)) * fr[ch];
    }
  }
  monitor_signs<T>(pre);

  const bool rec = detail::recording<T>({&features, &w, &bias});
  Tensor<T> res = result<T>({m, c}, std::move(out), rec);
  if (rec) {
    NodePtr<T> fn = features.node(), offn = offsets.node(), wn = w.node(), bn = bias.node(), on = res.node();
    std::vector<Index> ids(nbr.begin(), nbr.end());
    record<T>([fn, offn, wn, bn, on, ids = std::move(ids), pre = std::move(pre), k, c, n, m, rows, in] {
      if (on->grad.empty()) return;
      const T* f = fn->data.data();
      const T* wd = wn->data.data();
      const T* go = on->grad.data();
      std::vector<T> gpre(rows * c), grow(rows * c);
      const std::int64_t mq = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (rows * in * c > (1u << 15))
      for (std::int64_t qi = 0; qi < mq; ++qi) {
        const std::size_t q = static_cast<std::size_t>(qi);
        for (std::size_t s = 0; s < k; ++s) {
          const std::size_t r = q * k + s;
          const T* fr = f + ids[r] * c;
          const T* p = pre.data() + r * c;
          T* gp = gpre.data() + r * c;
          T* gr = grow.data() + r * c;
          for (std::size_t ch = 0; ch < c; ++ch) {
            const T g = go[q * c + ch];
            gp[ch] = p[ch] > T(0) ? g * fr[ch] : T(0);
            gr[ch] = p[ch] > T(0) ? g * p[ch] : T(0);
          }
          // Through the attention input: d pre / d f = w[3 + i, :]
          for (std::size_t i = 0; i < c; ++i) {
            const T* wr = wd + (3 + i) * c;
            T acc = T(0);
            for (std::size_t ch = 0; ch < c; ++ch) acc += gp[ch] * wr[ch];
            gr[i] += acc;
          }
        }
      }
      if (fn->requires_grad) {
        std::vector<T> gf(n * c, T(0));
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t ch = 0; ch < c; ++ch) gf[ids[r] * c + ch] += grow[r * c + ch];
        detail::accumulate<T>(*fn, gf);
      }
      if (wn->requires_grad) {
        std::vector<T> gw(in * c, T(0));
        const T* off = offn->data.data();
        const std::int64_t nin = static_cast<std::int64_t>(in);
#pragma omp parallel for schedule(static) if (rows * in * c > (1u << 15))
        for (std::int64_t ji = 0; ji < nin; ++ji) {
          const std::size_t j = static_cast<std::size_t>(ji);
          T* g = gw.data() + j * c;
          for (std::size_t r = 0; r < rows; ++r) {
            const T x = j < 3 ? off[r * 3 + j] : f[ids[r] * c + (j - 3)];
            const T* gp = gpre.data() + r * c;
            for (std::size_t ch = 0; ch < c; ++ch) g[ch] += x * gp[ch];
          }
        }
        detail::accumulate<T>(*wn, gw);
      }
      if (bn->requires_grad) detail::accumulate<T>(*bn, fold<T>(gpre, c));
    });
  }
  return res;
}

template <typename T>
Tensor<T> masked_nll(const Tensor<T>& probs, std::span<const Index> labels, std::span<const std::uint8_t> mask) {
  require_rank2(probs, "masked_nll");
  const std::size_t n = probs.dim(0), classes = probs.dim(1);
  if (labels.size() != n) throw DimensionError("masked_nll: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  if (!mask.empty() && mask.size() != n) throw DimensionError("masked_nll: mask length mismatch");
  constexpr T floor_p = std::numeric_limits<T>::min();
  std::size_t count = 0;
  T total = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask.empty() && !mask[i]) continue;
    if (labels[i] >= classes) throw IndexError("label " + std::to_string(labels[i]) + " out of range [0, " + std::to_string(classes) + ")");
    total -= std::log(std::max(probs[i * classes + labels[i]], floor_p));
    ++count;
  }
  if (count == 0) throw DomainError("loss over zero unmasked points");
  const bool rec = detail::recording<T>({&probs});
  Tensor<T> res = result<T>({1}, {total / static_cast<T>(count)}, rec);
  if (rec) {
    NodePtr<T> pn = probs.node(), on = res.node();
    std::vector<Index> lab(labels.begin(), labels.end());
    std::vector<std::uint8_t> msk(mask.begin(), mask.end());
    record<T>([pn, on, lab = std::move(lab), msk = std::move(msk), n, classes, count] {
      if (on->grad.empty()) return;
      const T scale = on->grad[0] / static_cast<T>(count);
      std::vector<T> gp(n * classes, T(0));
      for (std::size_t i = 0; i < n; ++i) {
        if (!msk.empty() && !msk[i]) continue;
        const T p = pn->data[i * classes + lab[i]];
        if (p > floor_p) gp[i * classes + lab[i]] = -scale / p;
      }
      detail::accumulate<T>(*pn, gp);
    });
  }
  return res;
}

#define PVC_INSTANTIATE_OPS(T)                                                                                   \
  template Tensor<T> elementwise<T>(Elementwise, const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                                             \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                            \
  template std::pair<Tensor<T>, Tensor<T>> softmax_pairwise<T>(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                                          \
  template Tensor<T> reduce<T>(Reduction, const Tensor<T>&, std::size_t);                                        \
  template Tensor<T> gather_rows<T>(const Tensor<T>&, std::span<const Index>);                                   \
  template Tensor<T> scatter_add_rows<T>(const Tensor<T>&, std::span<const Index>, const Tensor<T>&);            \
  template Tensor<T> concat_cols<T>(const std::vector<Tensor<T>>&);                                              \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                                        \
  template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> rows_to_volume<T>(const Tensor<T>&, std::span<const Index>, std::size_t);                   \
  template Tensor<T> volume_to_rows<T>(const Tensor<T>&, std::span<const Index>);                                \
  template Tensor<T> segment_mean<T>(const Tensor<T>&, std::span<const Index>, std::span<const Index>);          \
  template Tensor<T> attentive_aggregate<T>(const Tensor<T>&, const Tensor<T>&, std::span<const Index>,          \
                                            std::size_t, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> standardize_columns<T>(const Tensor<T>&, double);                                           \
  template Tensor<T> masked_nll<T>(const Tensor<T>&, std::span<const Index>, std::span<const std::uint8_t>);

PVC_INSTANTIATE_OPS(float)
PVC_INSTANTIATE_OPS(double)

}  // namespace pvc
