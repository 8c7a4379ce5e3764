#include "pvc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

namespace pvc {

namespace {

template <typename T>
double evaluate(const std::function<Tensor<T>()>& objective) {
  const Tensor<T> y = objective();
  return static_cast<double>(y.item());
}

template <typename T>
std::uint64_t signature(const std::function<Tensor<T>()>& objective) {
  KinkMonitor monitor;
  (void)objective();
  return monitor.signature();
}

}  // namespace

template <typename T>
GradcheckReport gradcheck(const std::function<Tensor<T>()>& objective, std::vector<NamedTensor<T>> inputs,
                          const GradcheckOptions& options) {
  GradcheckReport report;
  for (auto& [name, t] : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  try {
    GradTape<T> tape;
    Tensor<T> y = objective();
    if (y.numel() != 1) throw DimensionError("gradcheck objective must return a scalar");
    if (!std::isfinite(y.item())) {
      report.passed = false;
      report.failure = "objective is non-finite at the base point";
      return report;
    }
    tape.backward(y);
  } catch (const DomainError& e) {
    report.passed = false;
    report.failure = std::string("objective is non-finite at the base point: ") + e.what();
    return report;
  }
  std::vector<std::vector<double>> analytic;
  for (auto& [name, t] : inputs) {
    const auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  const std::uint64_t base_sig = options.exclude_kinks ? signature<T>(objective) : 0;
  const double h = options.step;
  for (std::size_t in = 0; in < inputs.size(); ++in) {
    auto& [name, t] = inputs[in];
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const T orig = t[i];
      if (options.exclude_kinks) {
        t[i] = static_cast<T>(orig + options.kink_radius * h);
        const auto sp = signature<T>(objective);
        t[i] = static_cast<T>(orig - options.kink_radius * h);
        const auto sm = signature<T>(objective);
        t[i] = orig;
        if (sp != base_sig || sm != base_sig) {
          ++report.excluded;
          continue;
        }
      }
      t[i] = static_cast<T>(orig + h);
      const double fp = evaluate<T>(objective);
      t[i] = static_cast<T>(orig - h);
      const double fm = evaluate<T>(objective);
      t[i] = orig;
      // Divide by the step actually taken after rounding to T.
      const double numeric = (fp - fm) / (static_cast<double>(static_cast<T>(orig + h)) -
                                          static_cast<double>(static_cast<T>(orig - h)));
      const double a = analytic[in][i];
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        report.passed = false;
        report.failure = "non-finite gradient at " + name + "[" + std::to_string(i) + "]";
        report.worst_input = name;
        report.worst_coord = i;
        return report;
      }
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.scale_floor});
      ++report.checked;
      if (rel > report.max_rel_error || report.worst_input.empty()) {
        report.max_rel_error = rel;
        report.worst_input = name;
        report.worst_coord = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error <= options.tolerance;
  for (auto& [name, t] : inputs) t.zero_grad();
  return report;
}

template GradcheckReport gradcheck<float>(const std::function<Tensor<float>()>&, std::vector<NamedTensor<float>>,
                                          const GradcheckOptions&);
template GradcheckReport gradcheck<double>(const std::function<Tensor<double>()>&,
                                           std::vector<NamedTensor<double>>, const GradcheckOptions&);

}  // namespace pvc
