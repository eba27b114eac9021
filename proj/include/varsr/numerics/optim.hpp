#pragma once

#include <cstdint>
#include <vector>

#include "varsr/numerics/layers.hpp"

namespace varsr {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct OptimizerState {
  std::int64_t step = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
};

// Decoupled weight decay (applied only to params flagged `decay`) with
// bias-corrected moments.
class AdamW {
 public:
  AdamW() = default;
  AdamW(ParamList<float> params, AdamWConfig config);

  // Returns false and leaves everything untouched when any gradient is
  // non-finite. Parameters that received no gradient are treated as g = 0.
  bool step();
  void zero_grad();

  const ParamList<float>& params() const { return params_; }
  AdamWConfig& config() { return config_; }
  const AdamWConfig& config() const { return config_; }
  const OptimizerState& state() const { return state_; }
  void set_state(OptimizerState state);
  std::int64_t rejected_steps() const { return rejected_; }

 private:
  ParamList<float> params_;
  AdamWConfig config_;
  OptimizerState state_;
  std::int64_t rejected_ = 0;
};

}  // namespace varsr
