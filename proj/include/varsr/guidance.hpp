#pragma once

#include <span>
#include <string>
#include <vector>

#include "varsr/numerics/tensor.hpp"

// Image-based classifier-free guidance: positive and negative quality
// branches under the same LR condition, combined per scale.
namespace varsr::guidance {

enum class Ramp { linear, constant };

struct GuidanceConfig {
  double lambda_max = 6.0;
  Ramp ramp = Ramp::linear;
  bool refiner = true;  // also guide the refiner's noise predictions

  bool enabled() const { return lambda_max != 0.0; }
};

Ramp parse_ramp(const std::string& name);
std::string to_string(Ramp ramp);

// out_pos + lambda * (out_pos - out_neg), elementwise.
template <typename T>
std::vector<T> cfg_combine(std::span<const T> out_pos, std::span<const T> out_neg, T lambda);
template <typename T>
void cfg_combine_inplace(std::span<T> out_pos, std::span<const T> out_neg, T lambda);

// Strength at scale k (1-based) of K: lambda_max * k / K for the linear ramp,
// lambda_max throughout for the constant one. Throws IndexError outside [1, K].
double lambda_schedule(int k, int scales, double lambda_max, Ramp ramp = Ramp::linear);
inline double lambda_schedule(int k, int scales, const GuidanceConfig& cfg) {
  return lambda_schedule(k, scales, cfg.lambda_max, cfg.ramp);
}

}  // namespace varsr::guidance
