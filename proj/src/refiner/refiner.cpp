#include "varsr/refiner.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "varsr/error.hpp"
#include "varsr/guidance.hpp"
#include "varsr/numerics/ops.hpp"

namespace varsr::refiner {

double NoiseSchedule::at(int t) const {
  if (t < 0 || t > train_steps)
    throw IndexError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(train_steps) + "]");
  return alpha_bar[static_cast<size_t>(t)];
}

std::vector<int> NoiseSchedule::respaced(int n) const {
  if (n < 1 || n > train_steps)
    throw ConfigError("sampling steps must lie in [1, " + std::to_string(train_steps) + "], got " + std::to_string(n));
  std::vector<int> out;
  for (int i = 1; i <= n; ++i) out.push_back(static_cast<int>(std::lround(static_cast<double>(i) * train_steps / n)));
  return out;
}

NoiseSchedule cosine_schedule(int train_steps, double offset) {
  if (train_steps < 2) throw ConfigError("noise schedule needs at least 2 steps");
  auto f = [&](int t) {
    const double c = std::cos((static_cast<double>(t) / train_steps + offset) / (1.0 + offset) * std::numbers::pi / 2);
    return c * c;
  };
  NoiseSchedule s;
  s.train_steps = train_steps;
  s.alpha_bar.resize(static_cast<size_t>(train_steps) + 1);
  s.alpha_bar[0] = 1.0;
  const double f0 = f(0);
  double prev_raw = 1.0;
  for (int t = 1; t <= train_steps; ++t) {
    const double raw = f(t) / f0;
    const double beta = std::min(1.0 - raw / prev_raw, 0.999);
    s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - beta);
    prev_raw = raw;
  }
  return s;
}

template <typename T>
std::vector<T> diffuse(std::span<const T> z, int t, std::span<const T> eps, const NoiseSchedule& sched) {
  if (z.size() != eps.size()) throw ShapeError("diffuse: z and noise sizes differ");
  const double ab = sched.at(t);
  const T a = static_cast<T>(std::sqrt(ab)), b = static_cast<T>(std::sqrt(1.0 - ab));
  std::vector<T> out(z.size());
  for (size_t i = 0; i < z.size(); ++i) out[i] = a * z[i] + b * eps[i];
  return out;
}

void RefinerConfig::validate() const {
  if (latent_dim < 1 || cond_dim < 1 || width < 2 || width % 2 != 0 || blocks < 1)
    throw ConfigError("refiner needs positive dims, an even width and at least one block");
}

template <typename T>
Refiner<T>::Refiner(const RefinerConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const int w = cfg_.width;
  input_ = Linear<T>(cfg_.latent_dim, w, rng);
  time1_ = Linear<T>(w, w, rng);
  time2_ = Linear<T>(w, w, rng);
  cond_ = Linear<T>(cfg_.cond_dim, w, rng);
  for (int b = 0; b < cfg_.blocks; ++b)
    blocks_.push_back({Linear<T>(w, 3 * w, rng, true, true), Linear<T>(w, w, rng), Linear<T>(w, w, rng)});
  final_mod_ = Linear<T>(w, 2 * w, rng, true, true);
  output_ = Linear<T>(w, cfg_.latent_dim, rng, true, true);
}

template <typename T>
void Refiner<T>::set_z_scale(double s) {
  if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("residual scale must be positive and finite");
  z_scale_ = s;
}

template <typename T>
BasicTensor<T> timestep_features(std::span<const int> t, int width) {
  const int half = width / 2;
  const auto n = static_cast<int>(t.size());
  std::vector<T> out(static_cast<size_t>(n) * width);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / half);
      out[static_cast<size_t>(i) * width + k] = static_cast<T>(std::cos(t[i] * freq));
      out[static_cast<size_t>(i) * width + half + k] = static_cast<T>(std::sin(t[i] * freq));
    }
  return BasicTensor<T>::from({n, width}, std::move(out));
}

namespace {

template <typename T>
BasicTensor<T> modulate(const BasicTensor<T>& x, const BasicTensor<T>& shift, const BasicTensor<T>& scale) {
  return ops::add(ops::mul(ops::layer_norm<T>(x, nullptr, nullptr), ops::add_scalar(scale, T(1))), shift);
}

}  // namespace

template <typename T>
BasicTensor<T> Refiner<T>::predict_noise(const BasicTensor<T>& z_t, std::span<const int> t,
                                         const BasicTensor<T>& cond) const {
  const int n = z_t.dim(0);
  if (z_t.rank() != 2 || z_t.dim(1) != cfg_.latent_dim)
    throw ShapeError("refiner input must be [N, " + std::to_string(cfg_.latent_dim) + "], got " + to_string(z_t.shape()));
  if (cond.rank() != 2 || cond.dim(0) != n || cond.dim(1) != cfg_.cond_dim)
    throw ShapeError("refiner condition must be [" + std::to_string(n) + ", " + std::to_string(cfg_.cond_dim) +
                     "], got " + to_string(cond.shape()));
  if (static_cast<int>(t.size()) != n) throw ShapeError("refiner: one timestep per site required");
  const int w = cfg_.width;
  auto c = ops::add(time2_(ops::silu(time1_(timestep_features<T>(t, w)))), cond_(cond));
  const auto sc = ops::silu(c);
  auto x = input_(z_t);
  for (const auto& blk : blocks_) {
    const auto m = blk.modulation(sc);
    auto h = modulate(x, ops::slice(m, 1, 0, w), ops::slice(m, 1, w, w));
    h = blk.fc2(ops::silu(blk.fc1(h)));
    x = ops::add(x, ops::mul(ops::add_scalar(ops::slice(m, 1, 2 * w, w), T(1)), h));
  }
  const auto m = final_mod_(sc);
  return output_(modulate(x, ops::slice(m, 1, 0, w), ops::slice(m, 1, w, w)));
}

template <typename T>
void Refiner<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  input_.collect(out, prefix + ".input");
  time1_.collect(out, prefix + ".time1");
  time2_.collect(out, prefix + ".time2");
  cond_.collect(out, prefix + ".cond");
  for (size_t b = 0; b < blocks_.size(); ++b) {
    const std::string p = prefix + ".block" + std::to_string(b);
    blocks_[b].modulation.collect(out, p + ".mod");
    blocks_[b].fc1.collect(out, p + ".fc1");
    blocks_[b].fc2.collect(out, p + ".fc2");
  }
  final_mod_.collect(out, prefix + ".final_mod");
  output_.collect(out, prefix + ".output");
}

template class Refiner<float>;
template class Refiner<double>;

template <typename T>
BasicTensor<T> refiner_loss(const Refiner<T>& model, const BasicTensor<T>& cond, std::span<const T> z,
                            const NoiseSchedule& sched, Rng& rng, int draws) {
  if (draws < 1) throw ConfigError("refiner loss needs at least one noise draw per site");
  auto predict = [&](const BasicTensor<T>& zt, std::span<const int> t, const BasicTensor<T>& c) {
    return model.predict_noise(zt, t, c);
  };
  const int d = model.config().latent_dim;
  if (draws == 1) return noise_prediction_loss<T>(predict, d, cond, z, model.z_scale(), sched, rng);
  std::vector<T> zs;
  zs.reserve(z.size() * draws);
  for (int r = 0; r < draws; ++r) zs.insert(zs.end(), z.begin(), z.end());
  const auto conds = ops::concat(std::vector<BasicTensor<T>>(static_cast<size_t>(draws), cond), 0);
  return noise_prediction_loss<T>(predict, d, conds, std::span<const T>(zs), model.z_scale(), sched, rng);
}

SampleResult sample(const Refiner<float>& model, const Tensor& cond, const Tensor* cond_neg, double lambda,
                    const NoiseSchedule& sched, const SampleOptions& opts, Rng& rng) {
  NoGradGuard guard;
  const int d = model.config().latent_dim;
  const int n = cond.dim(0);
  const auto taus = sched.respaced(opts.steps);
  const bool guided = cond_neg != nullptr;
  if (guided && cond_neg->shape() != cond.shape()) throw ShapeError("refiner guidance: branch conditions differ in shape");
  const size_t count = static_cast<size_t>(n) * d;

  std::vector<float> x(count);
  for (auto& v : x) v = static_cast<float>(rng.normal());
  SampleResult res;
  for (int i = static_cast<int>(taus.size()) - 1; i >= 0; --i) {
    const int t = taus[i];
    const int t_prev = i > 0 ? taus[i - 1] : 0;
    const double ab = sched.at(t), ab_prev = sched.at(t_prev);
    const double beta = 1.0 - ab / ab_prev;

    // The two branches run as separate streams so the positive prediction
    // does not depend on whether guidance is on.
    const std::vector<int> ts(static_cast<size_t>(n), t);
    const auto pred = model.predict_noise(Tensor::from({n, d}, std::vector<float>(x)), ts, cond);
    std::vector<float> eps(pred.data().begin(), pred.data().end());
    if (guided) {
      const auto neg = model.predict_noise(Tensor::from({n, d}, std::vector<float>(x)), ts, *cond_neg);
      guidance::cfg_combine_inplace<float>(eps, neg.data(), static_cast<float>(lambda));
    }

    const double coef0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double coef_t = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    const double sigma = i > 0 ? std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab)) * opts.temperature : 0.0;
    for (size_t k = 0; k < count; ++k) {
      double x0 = (x[k] - std::sqrt(1.0 - ab) * eps[k]) / std::sqrt(ab);
      if (opts.clip > 0) x0 = std::clamp(x0, -opts.clip, opts.clip);
      double next = coef0 * x0 + coef_t * x[k];
      if (sigma > 0) next += sigma * rng.normal();
      if (!std::isfinite(next)) throw GenerationError("refiner sampling produced a non-finite value at t=" + std::to_string(t));
      x[k] = static_cast<float>(next);
    }
    ++res.steps_run;
  }
  const auto scale = static_cast<float>(model.z_scale());
  for (auto& v : x) v *= scale;
  res.z = std::move(x);
  return res;
}

template std::vector<float> diffuse(std::span<const float>, int, std::span<const float>, const NoiseSchedule&);
template std::vector<double> diffuse(std::span<const double>, int, std::span<const double>, const NoiseSchedule&);
template BasicTensor<float> timestep_features(std::span<const int>, int);
template BasicTensor<double> timestep_features(std::span<const int>, int);
template BasicTensor<float> refiner_loss(const Refiner<float>&, const BasicTensor<float>&, std::span<const float>,
                                         const NoiseSchedule&, Rng&, int);
template BasicTensor<double> refiner_loss(const Refiner<double>&, const BasicTensor<double>&, std::span<const double>,
                                          const NoiseSchedule&, Rng&, int);

}  // namespace varsr::refiner
