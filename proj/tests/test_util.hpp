#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "modnet/graph.hpp"
#include "modnet/rng.hpp"

namespace modnet::testutil {

inline bool close_rel(double a, double b, double rel = 1e-6, double floor_ = 1e-9) {
  return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b)) + floor_;
}

inline std::vector<Scalar> random_vec(size_t n, Rng& rng, Scalar lo = -1, Scalar hi = 1) {
  std::vector<Scalar> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

/// Central finite differences against the analytic gradient of a scalar-valued
/// graph. `build` constructs the graph from the flat input vector and returns
/// the loss node; the input tensor must be registered via g.input("x", ...).
struct GradCheck {
  double max_rel_err = 0;
  bool ok = true;
};

inline GradCheck grad_check(
    const std::function<Scalar(const std::vector<Scalar>&, std::vector<Scalar>*)>& eval,
    std::vector<Scalar> x, double tol = 1e-6, double h = 1e-5) {
  GradCheck out;
  std::vector<Scalar> analytic;
  eval(x, &analytic);
  for (size_t i = 0; i < x.size(); ++i) {
    const Scalar keep = x[i];
    const Scalar step = h * std::max(1.0, std::abs(keep));
    x[i] = keep + step;
    const Scalar up = eval(x, nullptr);
    x[i] = keep - step;
    const Scalar down = eval(x, nullptr);
    x[i] = keep;
    const Scalar numeric = (up - down) / (2 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-3});
    const double err = std::abs(analytic[i] - numeric) / denom;
    out.max_rel_err = std::max(out.max_rel_err, err);
    if (err > tol) out.ok = false;
  }
  return out;
}

}  // namespace modnet::testutil
