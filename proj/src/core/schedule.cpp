#include "varsr/core/schedule.hpp"

#include <string>

#include "varsr/error.hpp"

namespace varsr {

void validate_schedule(const Schedule& schedule) {
  if (schedule.empty()) throw ConfigError("scale schedule is empty");
  for (size_t k = 0; k < schedule.size(); ++k) {
    const auto& s = schedule[k];
    if (s.h < 1 || s.w < 1) throw ConfigError("scale " + std::to_string(k + 1) + " has non-positive dims");
    if (k > 0 && (s.h <= schedule[k - 1].h || s.w <= schedule[k - 1].w))
      throw ConfigError("scale schedule must be strictly increasing at scale " + std::to_string(k + 1));
  }
}

Schedule square_schedule(const std::vector<int>& sides) {
  Schedule s;
  for (int side : sides) s.push_back({side, side});
  return s;
}

int total_tokens(const Schedule& schedule) {
  int n = 0;
  for (const auto& s : schedule) n += s.tokens();
  return n;
}

std::vector<int> scale_offsets(const Schedule& schedule) {
  std::vector<int> off;
  int acc = 0;
  for (const auto& s : schedule) {
    off.push_back(acc);
    acc += s.tokens();
  }
  return off;
}

}  // namespace varsr
