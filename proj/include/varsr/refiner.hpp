#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "varsr/error.hpp"
#include "varsr/numerics/layers.hpp"
#include "varsr/numerics/ops.hpp"
#include "varsr/numerics/rng.hpp"

// Per-site MLP diffusion model for the continuous quantization residual z,
// conditioned on the transformer's final-scale hidden state at that site.
namespace varsr::refiner {

struct NoiseSchedule {
  int train_steps = 0;
  std::vector<double> alpha_bar;  // index 0..T, alpha_bar[0] = 1

  double at(int t) const;
  // n evenly spaced timesteps round(i * T / n), i = 1..n, ascending.
  std::vector<int> respaced(int n) const;
};

// Cosine schedule cos^2(((t/T + s)/(1 + s)) * pi/2), normalized so that
// alpha_bar[0] = 1. Per-step betas are capped at 0.999 so alpha_bar[T] stays
// positive. Throws ConfigError for T < 2.
NoiseSchedule cosine_schedule(int train_steps, double offset = 0.008);

// sqrt(ab_t) * z + sqrt(1 - ab_t) * eps. Throws IndexError for t outside [0, T].
template <typename T>
std::vector<T> diffuse(std::span<const T> z, int t, std::span<const T> eps, const NoiseSchedule& sched);

struct RefinerConfig {
  int latent_dim = 16;  // d: width of z
  int cond_dim = 128;   // width of the conditioning hidden state
  int width = 128;
  int blocks = 3;

  void validate() const;
};

template <typename T>
class Refiner {
 public:
  Refiner() = default;
  Refiner(const RefinerConfig& cfg, Rng& rng);

  // z_t: [N, d], t: N timesteps, cond: [N, cond_dim] -> predicted noise [N, d].
  BasicTensor<T> predict_noise(const BasicTensor<T>& z_t, std::span<const int> t, const BasicTensor<T>& cond) const;

  const RefinerConfig& config() const { return cfg_; }
  void collect(ParamList<T>& out, const std::string& prefix) const;

  // z is modelled in units of z_scale (the residual's standard deviation).
  double z_scale() const { return z_scale_; }
  void set_z_scale(double s);

 private:
  struct Block {
    Linear<T> modulation;  // silu(c) -> shift, scale, gate offsets
    Linear<T> fc1, fc2;
  };
  RefinerConfig cfg_;
  Linear<T> input_, time1_, time2_, cond_;
  std::vector<Block> blocks_;
  Linear<T> final_mod_, output_;
  double z_scale_ = 1.0;
};

extern template class Refiner<float>;
extern template class Refiner<double>;

// Sinusoidal timestep features [N, width].
template <typename T>
BasicTensor<T> timestep_features(std::span<const int> t, int width);

// Draws per-site t ~ U{1..T} and eps ~ N(0, I), noises z / z_scale and
// scores `predict(z_t [N,d], t, cond)` against eps by mean squared error.
template <typename T, typename Predict>
BasicTensor<T> noise_prediction_loss(Predict&& predict, int dim, const BasicTensor<T>& cond, std::span<const T> z,
                                     double z_scale, const NoiseSchedule& sched, Rng& rng);

// Noise-prediction loss: mean over sites and channels of (eps - eps_hat)^2,
// with t ~ U{1..T} and eps ~ N(0, I) drawn per site. z holds N*d values in
// latent units; cond is [N, cond_dim] and may carry gradient. Each site is
// scored under `draws` independent (t, eps) pairs.
template <typename T>
BasicTensor<T> refiner_loss(const Refiner<T>& model, const BasicTensor<T>& cond, std::span<const T> z,
                            const NoiseSchedule& sched, Rng& rng, int draws = 1);

struct SampleOptions {
  int steps = 10;
  double temperature = 1.0;  // scales the injected noise
  double clip = 4.0;         // bound on the predicted clean sample, in z_scale units; <= 0 disables
};

struct SampleResult {
  std::vector<float> z;  // N*d, latent units
  int steps_run = 0;
};

// Ancestral sampling over the respaced timesteps with the fixed posterior
// variance. With cond_neg non-null the two noise predictions are combined by
// the guidance rule at strength `lambda`. Throws GenerationError on
// non-finite intermediates.
SampleResult sample(const Refiner<float>& model, const Tensor& cond, const Tensor* cond_neg, double lambda,
                    const NoiseSchedule& sched, const SampleOptions& opts, Rng& rng);

template <typename T, typename Predict>
BasicTensor<T> noise_prediction_loss(Predict&& predict, int dim, const BasicTensor<T>& cond, std::span<const T> z,
                                     double z_scale, const NoiseSchedule& sched, Rng& rng) {
  const int n = cond.dim(0);
  if (z.size() != static_cast<size_t>(n) * dim)
    throw ShapeError("refiner loss: expected " + std::to_string(n * dim) + " residual values, got " +
                     std::to_string(z.size()));
  const T inv_scale = static_cast<T>(1.0 / z_scale);
  std::vector<int> t(static_cast<size_t>(n));
  std::vector<T> eps(z.size()), zt(z.size());
  for (int i = 0; i < n; ++i) {
    t[i] = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.train_steps)));
    const double ab = sched.at(t[i]);
    const T a = static_cast<T>(std::sqrt(ab)), b = static_cast<T>(std::sqrt(1.0 - ab));
    for (int c = 0; c < dim; ++c) {
      const size_t k = static_cast<size_t>(i) * dim + c;
      eps[k] = static_cast<T>(rng.normal());
      zt[k] = a * (z[k] * inv_scale) + b * eps[k];
    }
  }
  const BasicTensor<T> pred = predict(BasicTensor<T>::from({n, dim}, std::move(zt)), std::span<const int>(t), cond);
  return ops::mse_loss(pred, BasicTensor<T>::from({n, dim}, std::move(eps)));
}

}  // namespace varsr::refiner
