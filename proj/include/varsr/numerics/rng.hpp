#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

namespace varsr {

// xoshiro256** seeded through splitmix64. Integer draws are bit-identical on
// every platform; normal() additionally depends on libm log/cos.
class Rng {
 public:
  struct State {
    std::array<std::uint64_t, 4> s{};
    bool has_spare = false;
    double spare = 0.0;
    bool operator==(const State&) const = default;
  };

  explicit Rng(std::uint64_t seed = 0);

  // Independent named stream, e.g. Rng::stream(seed, "dropout"). Adding a new
  // consumer never shifts the draws of an existing one.
  static Rng stream(std::uint64_t seed, std::string_view name);

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();
  // Normal(0, stddev) truncated to +-2 stddev.
  double truncated_normal(double stddev);

  State state() const { return state_; }
  void set_state(const State& s) { state_ = s; }

 private:
  State state_;
};

std::uint64_t splitmix64(std::uint64_t& x);
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace varsr
