#include "varsr/guidance.hpp"

#include <string>

#include "varsr/error.hpp"

namespace varsr::guidance {

Ramp parse_ramp(const std::string& name) {
  if (name == "linear") return Ramp::linear;
  if (name == "constant") return Ramp::constant;
  throw ConfigError("unknown guidance ramp '" + name + "' (expected linear or constant)");
}

std::string to_string(Ramp ramp) { return ramp == Ramp::linear ? "linear" : "constant"; }

template <typename T>
void cfg_combine_inplace(std::span<T> out_pos, std::span<const T> out_neg, T lambda) {
  if (out_pos.size() != out_neg.size())
    throw ShapeError("cfg_combine: branch sizes differ (" + std::to_string(out_pos.size()) + " vs " +
                     std::to_string(out_neg.size()) + ")");
  if (lambda == T(0)) return;
  for (size_t i = 0; i < out_pos.size(); ++i) out_pos[i] = out_pos[i] + lambda * (out_pos[i] - out_neg[i]);
}

template <typename T>
std::vector<T> cfg_combine(std::span<const T> out_pos, std::span<const T> out_neg, T lambda) {
  std::vector<T> out(out_pos.begin(), out_pos.end());
  cfg_combine_inplace<T>(out, out_neg, lambda);
  return out;
}

double lambda_schedule(int k, int scales, double lambda_max, Ramp ramp) {
  if (scales < 1 || k < 1 || k > scales)
    throw IndexError("guidance scale index " + std::to_string(k) + " outside [1, " + std::to_string(scales) + "]");
  return ramp == Ramp::constant ? lambda_max : lambda_max * k / scales;
}

template std::vector<float> cfg_combine(std::span<const float>, std::span<const float>, float);
template std::vector<double> cfg_combine(std::span<const double>, std::span<const double>, double);
template void cfg_combine_inplace(std::span<float>, std::span<const float>, float);
template void cfg_combine_inplace(std::span<double>, std::span<const double>, double);

}  // namespace varsr::guidance
