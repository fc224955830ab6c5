#include "spanforge/numeric.hpp"

#include <algorithm>

namespace spanforge {

Vec64 finite_diff_grad(const ScalarFn& f, const Vec64& x, double eps) {
  if (!(eps > 0)) throw std::invalid_argument("finite_diff_grad: eps must be positive");
  Vec64 probe = x;
  Vec64 grad(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = probe(i);
    probe(i) = saved + eps;
    const double up = f(probe);
    probe(i) = saved - eps;
    const double down = f(probe);
    probe(i) = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw std::runtime_error("finite_diff_grad: non-finite function value at coordinate " +
                               std::to_string(i));
    grad(i) = (up - down) / (2.0 * eps);
  }
  return grad;
}

GradCheck compare_gradients(const Vec64& analytic, const Vec64& numeric, double rel_tol,
                            double abs_floor) {
  if (analytic.size() != numeric.size())
    throw std::invalid_argument("compare_gradients: length mismatch");
  GradCheck out;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double a = analytic(i);
    const double n = numeric(i);
    const double diff = std::abs(a - n);
    const double scale = std::max(std::abs(a), std::abs(n));
    out.max_abs_err = std::max(out.max_abs_err, diff);
    bool good;
    if (scale < abs_floor) {
      good = diff <= abs_floor;
    } else {
      const double rel = diff / scale;
      if (rel > out.max_rel_err) {
        out.max_rel_err = rel;
        out.worst_index = i;
      }
      good = rel <= rel_tol;
    }
    if (!good) out.ok = false;
  }
  return out;
}

}  // namespace spanforge
