#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pvc/tensor.hpp"

namespace pvc {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Relative error is |a − n| / max(|a|, |n|, scale_floor).
  double scale_floor = 1e-3;
  // A coordinate is skipped when any ReLU sign or max argmax differs between
  // x and x ± kink_radius·step.
  bool exclude_kinks = true;
  double kink_radius = 10.0;
};

struct GradcheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::string worst_input;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  std::string failure;  // set when a value was non-finite
};

template <typename T>
using NamedTensor = std::pair<std::string, Tensor<T>>;

/// Compares the reverse-mode gradient of the scalar `objective` with central
/// differences (f(x+h) − f(x−h)) / 2h for every coordinate of every input.
/// `objective` must read the inputs through the same tensor handles.
template <typename T>
GradcheckReport gradcheck(const std::function<Tensor<T>()>& objective, std::vector<NamedTensor<T>> inputs,
                          const GradcheckOptions& options = {});

}  // namespace pvc
