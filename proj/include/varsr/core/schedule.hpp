#pragma once

#include <vector>

namespace varsr {

struct ScaleDims {
  int h = 0;
  int w = 0;
  int tokens() const { return h * w; }
  bool operator==(const ScaleDims&) const = default;
};

// Token-map sizes (h_k, w_k) for k = 1..K, coarse to fine.
using Schedule = std::vector<ScaleDims>;

// Throws ConfigError unless the schedule is non-empty, positive and strictly
// increasing in both dimensions.
void validate_schedule(const Schedule& schedule);
Schedule square_schedule(const std::vector<int>& sides);
int total_tokens(const Schedule& schedule);
// Offset of scale k's first token inside the concatenated scale sequence.
std::vector<int> scale_offsets(const Schedule& schedule);

}  // namespace varsr
