#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "canet/gradcheck.hpp"

namespace canet {

struct SuiteEntry {
  std::string op;
  double tol = 0;
  GradCheckReport report;
  double seconds = 0;
  bool passed() const { return report.passed() && report.checked > 0; }
};

struct SuiteOptions {
  std::uint64_t seed = 0;
  // Include the end-to-end model loss (the slowest entry).
  bool include_model = true;
  std::size_t model_coords = 24;  // sampled coordinates per model parameter
};

// Finite-difference checks at f64 for every differentiable primitive (tol
// 1e-5), the attention blocks and the full model loss (tol 1e-4).
std::vector<SuiteEntry> run_gradcheck_suite(const SuiteOptions& opt = {});

}  // namespace canet
