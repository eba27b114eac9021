#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "varsr/numerics/ops.hpp"
#include "varsr/numerics/rng.hpp"
#include "varsr/numerics/tensor.hpp"

namespace varsr {

template <typename T>
struct NamedParam {
  std::string name;
  BasicTensor<T> tensor;
  bool decay = true;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

// Leaf parameter filled with truncated-normal draws (std 0.02 by default).
template <typename T>
BasicTensor<T> init_normal(Shape shape, Rng& rng, double stddev = 0.02) {
  auto t = BasicTensor<T>::zeros(std::move(shape), true);
  for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(stddev));
  return t;
}

template <typename T>
BasicTensor<T> init_zeros(Shape shape) {
  return BasicTensor<T>::zeros(std::move(shape), true);
}

template <typename T>
struct Linear {
  BasicTensor<T> weight;  // [in, out]
  BasicTensor<T> bias;    // [out] or empty

  Linear() = default;
  Linear(int in, int out, Rng& rng, bool with_bias = true, bool zero_weight = false)
      : weight(zero_weight ? init_zeros<T>({in, out}) : init_normal<T>({in, out}, rng)),
        bias(with_bias ? init_zeros<T>({out}) : BasicTensor<T>::zeros({0})) {}

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    return ops::linear(x, weight, bias.numel() ? &bias : nullptr);
  }
  int in_features() const { return weight.dim(0); }
  int out_features() const { return weight.dim(1); }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight, true});
    if (bias.numel()) out.push_back({prefix + ".bias", bias, false});
  }
};

template <typename T>
struct Conv2d {
  BasicTensor<T> weight;  // [out, in, k, k]
  BasicTensor<T> bias;    // [out]
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  // He-style fan-in scaling keeps activations O(1) through the conv stacks.
  Conv2d(int in, int out, int kernel, int stride_, int pad_, Rng& rng, bool zero_weight = false)
      : weight(zero_weight ? init_zeros<T>({out, in, kernel, kernel})
                           : init_normal<T>({out, in, kernel, kernel}, rng,
                                            std::sqrt(2.0 / (in * kernel * kernel)))),
        bias(init_zeros<T>({out})),
        stride(stride_),
        pad(pad_) {}

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    return ops::conv2d(x, weight, &bias, stride, pad);
  }

  void collect(ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight, true});
    out.push_back({prefix + ".bias", bias, false});
  }
};

template <typename T>
std::int64_t count_parameters(const ParamList<T>& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.tensor.numel();
  return n;
}

}  // namespace varsr
