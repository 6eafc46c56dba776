#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "canet/autodiff.hpp"

namespace canet {

// A deterministic scalar program over f64 leaves. It must register every
// parameter it reads through tape.leaf().
using ScalarProgram = std::function<Var<double>(GradTape<double>&)>;

using NamedParam = ParamRef<double>;

struct GradCheckOptions {
  double eps = 1e-6;
  double tol = 1e-5;
  // Gradients smaller than this are compared on an absolute scale.
  double abs_floor = 1e-4;
  // Coordinates sampled per parameter; 0 checks all of them.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
  // A failing coordinate whose one-sided slopes disagree, or whose estimate
  // changes when the step is halved, has a relu/max kink inside the ±eps
  // stencil; it is excluded and counted instead of compared.
  bool exclude_kinks = true;
};

struct GradCheckFailure {
  std::string param;
  std::size_t index;
  double analytic;
  double numeric;
  double rel_err;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t checked = 0;
  std::size_t kinks_excluded = 0;
  std::vector<GradCheckFailure> failures;
  bool passed() const noexcept { return failures.empty(); }
};

double relative_error(double analytic, double numeric, double abs_floor);

// Central differences (f(θ+eps) − f(θ−eps)) / 2eps against the tape gradient.
GradCheckReport grad_check(const ScalarProgram& f, const std::vector<NamedParam>& params,
                           const GradCheckOptions& opt = {});

}  // namespace canet
