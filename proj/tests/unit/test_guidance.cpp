#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <complex>
#include <numbers>
#include <vector>

#include "varsr/error.hpp"
#include "varsr/guidance.hpp"
#include "varsr/numerics/rng.hpp"

using namespace varsr;
using namespace varsr::guidance;

namespace {

using cd = std::complex<double>;

// Two-class toy posterior over a scalar image value x: class-conditional
// Gaussians with priors prior_pos and 1 - prior_pos.
struct ToyPosterior {
  double mu_pos, sd_pos, mu_neg, sd_neg, prior_pos;

  static cd gauss(cd x, double mu, double sd) {
    const cd u = (x - mu) / sd;
    return std::exp(-0.5 * u * u) / (sd * std::sqrt(2.0 * std::numbers::pi));
  }
  cd lik_pos(cd x) const { return gauss(x, mu_pos, sd_pos); }
  cd lik_neg(cd x) const { return gauss(x, mu_neg, sd_neg); }
  // Marginal by total probability, class posterior by brute-force Bayes.
  cd marginal(cd x) const { return prior_pos * lik_pos(x) + (1 - prior_pos) * lik_neg(x); }
  cd post_pos(cd x) const { return prior_pos * lik_pos(x) / marginal(x); }
};

// d/dx f(x) by complex-step differentiation: exact to rounding, no cancellation.
template <typename F>
double dx(F f, double x) {
  constexpr double h = 1e-30;
  return std::imag(f(cd(x, h))) / h;
}

}  // namespace

TEST_CASE("combiner examples") {
  const std::vector<double> pos{2.0, -1.0, 0.5}, neg{1.0, 3.0, 0.5};
  CHECK(cfg_combine<double>(pos, neg, 0.0) == pos);
  CHECK(cfg_combine<double>(pos, pos, 6.0) == pos);
  CHECK(cfg_combine<double>(pos, neg, 6.0)[0] == 8.0);
  const std::vector<double> short_neg{1.0};
  CHECK_THROWS_AS(cfg_combine<double>(pos, short_neg, 1.0), ShapeError);
}

TEST_CASE("combiner is affine under a common shift") {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    // Dyadic values keep every intermediate exact.
    const double a = static_cast<double>(rng.below(2048)) / 64 - 16;
    const double b = static_cast<double>(rng.below(2048)) / 64 - 16;
    const double c = static_cast<double>(rng.below(2048)) / 64 - 16;
    const double lam = static_cast<double>(rng.below(64)) / 8;
    const double x[] = {a}, y[] = {b}, xs[] = {a + c}, ys[] = {b + c};
    CHECK(cfg_combine<double>(xs, ys, lam)[0] == cfg_combine<double>(x, y, lam)[0] + c);
  }
}

TEST_CASE("linear strength ramp") {
  CHECK(lambda_schedule(10, 10, 6.0) == 6.0);
  CHECK(lambda_schedule(5, 10, 6.0) == 3.0);
  for (int k = 1; k <= 5; ++k) CHECK(lambda_schedule(k, 5, 0.0) == 0.0);
  double prev = 0.0;
  for (int k = 1; k <= 7; ++k) {
    const double l = lambda_schedule(k, 7, 6.0);
    CHECK(l >= prev);
    prev = l;
  }
  CHECK(lambda_schedule(3, 5, 6.0, Ramp::constant) == 6.0);
  CHECK_THROWS_AS(lambda_schedule(0, 5, 6.0), IndexError);
  CHECK_THROWS_AS(lambda_schedule(6, 5, 6.0), IndexError);
  CHECK(parse_ramp("linear") == Ramp::linear);
  CHECK_THROWS_AS(parse_ramp("cubic"), ConfigError);
}

TEST_CASE("Bayes decomposition of the guided score on toy posteriors") {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const ToyPosterior toy{rng.uniform(-1, 1), rng.uniform(0.5, 2), rng.uniform(-1, 1), rng.uniform(0.5, 2),
                           rng.uniform(0.1, 0.9)};
    const double x = rng.uniform(-2, 2);

    // Conditional from the joint: p(x|c_p) = p(c_p|x) p(x) / p(c_p).
    const cd joint = toy.post_pos(cd(x)) * toy.marginal(cd(x)) / toy.prior_pos;
    CHECK(std::abs(joint.real() - toy.lik_pos(cd(x)).real()) <= 1e-9 * std::abs(joint.real()));

    // Odds form: q/(1-q) = (pi_p/pi_n) * p(x|c_p)/p(x|c_n).
    const cd q = toy.post_pos(cd(x));
    const cd odds = q / (1.0 - q);
    const cd ratio = toy.prior_pos / (1 - toy.prior_pos) * toy.lik_pos(cd(x)) / toy.lik_neg(cd(x));
    CHECK(std::abs(odds - ratio) <= 1e-9 * std::abs(ratio));

    // Score identity: d log p(x|c_p) = d log[q/(1-q)] + d log p(x|c_n).
    const double lhs = dx([&](cd z) { return std::log(toy.lik_pos(z)); }, x);
    const double rhs = dx([&](cd z) { const cd p = toy.post_pos(z); return std::log(p / (1.0 - p)); }, x) +
                       dx([&](cd z) { return std::log(toy.lik_neg(z)); }, x);
    CHECK(std::abs(lhs - rhs) <= 1e-9);

    // The guided score s_n + lambda (s_p - s_n) is the combiner at lambda - 1.
    const double s_pos[] = {lhs};
    const double s_neg[] = {dx([&](cd z) { return std::log(toy.lik_neg(z)); }, x)};
    const double lam = rng.uniform(0, 8);
    const double guided = s_neg[0] + lam * (s_pos[0] - s_neg[0]);
    CHECK(std::abs(cfg_combine<double>(s_pos, s_neg, lam - 1)[0] - guided) <= 1e-9);
  }
}
