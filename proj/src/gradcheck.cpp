#include "canet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "canet/rng.hpp"

namespace canet {

double relative_error(double analytic, double numeric, double abs_floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), abs_floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double evaluate(const ScalarProgram& f) {
  GradTape<double> tape;
  return f(tape).value().item();
}

}  // namespace

GradCheckReport grad_check(const ScalarProgram& f, const std::vector<NamedParam>& params,
                           const GradCheckOptions& opt) {
  for (const NamedParam& p : params) p.tensor->zero_grad();
  {
    GradTape<double> tape;
    Var<double> loss = f(tape);
    tape.backward(loss);
  }

  GradCheckReport report;
  RngState rng(opt.seed);
  for (const NamedParam& p : params) {
    Tensor<double>& theta = *p.tensor;
    const std::vector<double> analytic = theta.grad.empty()
                                             ? std::vector<double>(theta.numel(), 0.0)
                                             : theta.grad;
    std::vector<std::size_t> coords(theta.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_coords > 0 && coords.size() > opt.max_coords) {
      // Partial Fisher-Yates: first max_coords entries become a uniform sample.
      for (std::size_t i = 0; i < opt.max_coords; ++i) {
        const std::size_t j = i + rng.below(coords.size() - i);
        std::swap(coords[i], coords[j]);
      }
      coords.resize(opt.max_coords);
      std::sort(coords.begin(), coords.end());
    }

    for (std::size_t idx : coords) {
      const double orig = theta[idx];
      theta[idx] = orig + opt.eps;
      const double fp = evaluate(f);
      theta[idx] = orig - opt.eps;
      const double fm = evaluate(f);
      double f0 = 0.0;
      if (opt.exclude_kinks) {
        theta[idx] = orig;
        f0 = evaluate(f);
      }
      theta[idx] = orig;

      const double numeric = (fp - fm) / (2.0 * opt.eps);
      if (opt.exclude_kinks && relative_error(analytic[idx], numeric, opt.abs_floor) > opt.tol) {
        const double right = (fp - f0) / opt.eps;
        const double left = (f0 - fm) / opt.eps;
        // Smooth functions give one-sided slopes within O(eps·f'') of each other.
        const double spread = std::abs(right - left);
        const double scale = std::max({std::abs(right), std::abs(left), opt.abs_floor});
        const bool centred_kink = spread > 1e3 * opt.eps * scale && spread > 100.0 * opt.tol * scale;
        // A kink off-centre inside the stencil makes the estimate depend on the
        // step; smooth functions agree at eps and eps/2 to O(eps²).
        theta[idx] = orig + opt.eps / 2;
        const double fp2 = evaluate(f);
        theta[idx] = orig - opt.eps / 2;
        const double fm2 = evaluate(f);
        theta[idx] = orig;
        const double half = (fp2 - fm2) / opt.eps;
        const bool step_dependent = relative_error(numeric, half, opt.abs_floor) > 0.1 * opt.tol;
        if (centred_kink || step_dependent) {
          ++report.kinks_excluded;
          continue;
        }
      }
      const double err = relative_error(analytic[idx], numeric, opt.abs_floor);
      ++report.checked;
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst_param = p.name;
      }
      if (err > opt.tol) report.failures.push_back({p.name, idx, analytic[idx], numeric, err});
    }
  }
  return report;
}

}  // namespace canet
