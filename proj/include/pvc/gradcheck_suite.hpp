#pragma once

#include <string>
#include <vector>

#include "pvc/gradcheck.hpp"

namespace pvc {

struct SuiteEntry {
  std::string component;
  GradcheckReport report;
};

/// Every differentiable op on small random inputs, one PVC layer
/// (N=32, C_in=4, C_out=8, G=4, K=4), the heads, and a 2-layer network at
/// C=4, N=32. Each objective is a fixed random weighting of the output.
template <typename T>
std::vector<SuiteEntry> run_gradcheck_suite(const GradcheckOptions& options = {}, std::uint64_t seed = 11);

}  // namespace pvc
