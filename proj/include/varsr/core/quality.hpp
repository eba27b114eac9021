#pragma once

#include <string>

#include "varsr/error.hpp"

namespace varsr {

// Quality flag selecting the positive or negative embedding.
enum class Quality { positive, negative };

inline std::string to_string(Quality q) { return q == Quality::positive ? "positive" : "negative"; }

inline Quality parse_quality(const std::string& name) {
  if (name == "positive") return Quality::positive;
  if (name == "negative") return Quality::negative;
  throw ConfigError("unknown quality label '" + name + "' (expected positive or negative)");
}

}  // namespace varsr
