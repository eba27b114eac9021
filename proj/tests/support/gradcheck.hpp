#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "varsr/numerics/ops.hpp"
#include "varsr/numerics/rng.hpp"

namespace varsr::testing {

inline Tensor64 random64(Shape shape, Rng& rng, bool requires_grad = true, double scale = 1.0) {
  auto t = Tensor64::zeros(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

// Reduces an arbitrary op output to a scalar with fixed random weights, so
// the check exercises a generic upstream gradient rather than all-ones.
inline Tensor64 weighted_sum(const Tensor64& out, std::uint64_t seed = 99) {
  Rng rng(seed);
  auto w = Tensor64::zeros(out.shape());
  for (auto& v : w.data()) v = rng.normal();
  return ops::sum(ops::mul(out, w));
}

// Largest norm-relative error ||analytic - numeric|| / max(||analytic||, ||numeric||)
// across all inputs, using central differences with step h.
inline double max_grad_error(const std::function<Tensor64(const std::vector<Tensor64>&)>& f,
                             std::vector<Tensor64> inputs, double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  f(inputs).backward();
  double worst = 0.0;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(static_cast<size_t>(t.numel()), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    NoGradGuard guard;
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const double orig = t.data()[i];
      t.data()[i] = orig + h;
      const double fp = f(inputs).item();
      t.data()[i] = orig - h;
      const double fm = f(inputs).item();
      t.data()[i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      diff2 += (numeric - analytic[i]) * (numeric - analytic[i]);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
    worst = std::max(worst, std::sqrt(diff2) / denom);
  }
  return worst;
}

}  // namespace varsr::testing
