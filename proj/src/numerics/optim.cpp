#include "varsr/numerics/optim.hpp"

#include <cmath>

#include "varsr/error.hpp"

namespace varsr {

AdamW::AdamW(ParamList<float> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    state_.m.emplace_back(static_cast<size_t>(p.tensor.numel()), 0.0f);
    state_.v.emplace_back(static_cast<size_t>(p.tensor.numel()), 0.0f);
  }
}

bool AdamW::step() {
  for (const auto& p : params_)
    for (float g : p.tensor.grad())
      if (!std::isfinite(g)) {
        ++rejected_;
        return false;
      }
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  const float b1 = static_cast<float>(config_.beta1);
  const float b2 = static_cast<float>(config_.beta2);
  const float lr = static_cast<float>(config_.lr);
  const float step_size = static_cast<float>(config_.lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const float eps = static_cast<float>(config_.eps);
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    auto data = p.tensor.data();
    auto grad = p.tensor.grad();
    auto& m = state_.m[i];
    auto& v = state_.v[i];
    const float decay = p.decay ? lr * static_cast<float>(config_.weight_decay) : 0.0f;
    for (size_t j = 0; j < data.size(); ++j) {
      const float g = grad.empty() ? 0.0f : grad[j];
      m[j] = b1 * m[j] + (1.0f - b1) * g;
      v[j] = b2 * v[j] + (1.0f - b2) * g * g;
      if (decay != 0.0f) data[j] -= decay * data[j];
      data[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
    }
  }
  return true;
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void AdamW::set_state(OptimizerState state) {
  if (state.m.size() != params_.size() || state.v.size() != params_.size())
    throw ShapeError("optimizer state does not match parameter list");
  for (size_t i = 0; i < params_.size(); ++i)
    if (state.m[i].size() != static_cast<size_t>(params_[i].tensor.numel()) ||
        state.v[i].size() != state.m[i].size())
      throw ShapeError("optimizer moment shape mismatch for " + params_[i].name);
  state_ = std::move(state);
}

}  // namespace varsr
