#pragma once

#include <span>
#include <vector>

#include "varsr/core/schedule.hpp"

// Scale-aligned 2D rotary position encoding. Every token of every scale (and
// the condition prefix) is mapped onto the final-scale H x W frame before the
// rotary angles are computed, so spatially aligned tokens rotate identically.
namespace varsr::sarope {

struct RopeConfig {
  int channels = 32;  // per-head channel count C; must be divisible by 4
  double theta = 10000.0;
  int frame_h = 16;  // final-scale dims H, W
  int frame_w = 16;

  void validate() const;
  int pairs_per_axis() const { return channels / 4; }
};

// Grid coordinate (i, j) of a token inside a map of size h x w.
struct TokenPosition {
  int i = 0;
  int j = 0;
  int h = 1;
  int w = 1;
  bool operator==(const TokenPosition&) const = default;
};

struct EffectivePosition {
  double row = 0.0;
  double col = 0.0;
};

// (i * H / h, j * W / w): 0-based, no half-pixel offset, never rounded.
EffectivePosition effective_position(const TokenPosition& pos, const RopeConfig& cfg);

// theta^(-2m / (C/2)) for m = 0 .. C/4 - 1; shared by both axes.
std::vector<double> frequencies(const RopeConfig& cfg);

// Rotates x (length C): the first C/2 channels by the row angle, the last C/2
// by the column angle, adjacent pairs (2m, 2m+1) within each half.
template <typename T>
std::vector<T> apply(std::span<const T> x, const TokenPosition& pos, const RopeConfig& cfg);

// Sequence made of an optional condition prefix (laid out on the final-scale
// grid) followed by scales 1..K, each row-major.
struct SequenceLayout {
  bool has_prefix = false;
  ScaleDims prefix{};
  Schedule scales;

  int prefix_tokens() const { return has_prefix ? prefix.tokens() : 0; }
  int total_tokens() const;
};

std::vector<TokenPosition> attach_positions(const SequenceLayout& layout);
// Same, but throws ShapeError if the layout does not describe `sequence_length` tokens.
std::vector<TokenPosition> attach_positions(const SequenceLayout& layout, int sequence_length);

// Per-token cos/sin tables of shape [L, C/2], the input format of
// ops::rotate_pairs.
struct RotationTables {
  std::vector<float> cos;
  std::vector<float> sin;
  int length = 0;
  int pairs = 0;
};
RotationTables build_tables(std::span<const TokenPosition> positions, const RopeConfig& cfg);

}  // namespace varsr::sarope
