#include "varsr/sarope.hpp"

#include <cmath>
#include <string>

#include "varsr/error.hpp"

namespace varsr::sarope {

void RopeConfig::validate() const {
  if (channels <= 0 || channels % 4 != 0)
    throw ConfigError("rotary channel count must be a positive multiple of 4, got " + std::to_string(channels));
  if (!(theta > 0.0)) throw ConfigError("rotary frequency base must be positive");
  if (frame_h < 1 || frame_w < 1) throw ConfigError("rotary reference frame must be non-empty");
}

EffectivePosition effective_position(const TokenPosition& pos, const RopeConfig& cfg) {
  return {static_cast<double>(pos.i) * cfg.frame_h / pos.h, static_cast<double>(pos.j) * cfg.frame_w / pos.w};
}

std::vector<double> frequencies(const RopeConfig& cfg) {
  cfg.validate();
  const int half = cfg.channels / 2;
  std::vector<double> f(static_cast<size_t>(cfg.pairs_per_axis()));
  for (int m = 0; m < cfg.pairs_per_axis(); ++m) f[m] = std::pow(cfg.theta, -2.0 * m / half);
  return f;
}

namespace {

void check_position(const TokenPosition& pos) {
  if (pos.h < 1 || pos.w < 1 || pos.i < 0 || pos.j < 0 || pos.i >= pos.h || pos.j >= pos.w)
    throw ShapeError("token position (" + std::to_string(pos.i) + "," + std::to_string(pos.j) +
                     ") outside a " + std::to_string(pos.h) + "x" + std::to_string(pos.w) + " map");
}

// Angle of pair p in [0, C/2): first C/4 pairs follow the row, the rest the column.
void fill_angles(const TokenPosition& pos, const RopeConfig& cfg, const std::vector<double>& freq, double* out) {
  const auto eff = effective_position(pos, cfg);
  const int per_axis = cfg.pairs_per_axis();
  for (int m = 0; m < per_axis; ++m) {
    out[m] = eff.row * freq[m];
    out[per_axis + m] = eff.col * freq[m];
  }
}

}  // namespace

template <typename T>
std::vector<T> apply(std::span<const T> x, const TokenPosition& pos, const RopeConfig& cfg) {
  cfg.validate();
  check_position(pos);
  if (static_cast<int>(x.size()) != cfg.channels)
    throw ShapeError("rotary input has " + std::to_string(x.size()) + " channels, expected " +
                     std::to_string(cfg.channels));
  const auto freq = frequencies(cfg);
  std::vector<double> ang(static_cast<size_t>(cfg.channels / 2));
  fill_angles(pos, cfg, freq, ang.data());
  std::vector<T> out(x.size());
  for (size_t p = 0; p < ang.size(); ++p) {
    const double c = std::cos(ang[p]);
    const double s = std::sin(ang[p]);
    const double a = x[2 * p];
    const double b = x[2 * p + 1];
    out[2 * p] = static_cast<T>(a * c - b * s);
    out[2 * p + 1] = static_cast<T>(a * s + b * c);
  }
  return out;
}

template std::vector<float> apply(std::span<const float>, const TokenPosition&, const RopeConfig&);
template std::vector<double> apply(std::span<const double>, const TokenPosition&, const RopeConfig&);

int SequenceLayout::total_tokens() const { return prefix_tokens() + varsr::total_tokens(scales); }

std::vector<TokenPosition> attach_positions(const SequenceLayout& layout) {
  validate_schedule(layout.scales);
  const ScaleDims final_dims = layout.scales.back();
  std::vector<TokenPosition> out;
  out.reserve(static_cast<size_t>(layout.total_tokens()));
  if (layout.has_prefix) {
    if (!(layout.prefix == final_dims))
      throw ShapeError("condition prefix is " + std::to_string(layout.prefix.h) + "x" +
                       std::to_string(layout.prefix.w) + " but the final scale is " + std::to_string(final_dims.h) +
                       "x" + std::to_string(final_dims.w));
    for (int i = 0; i < final_dims.h; ++i)
      for (int j = 0; j < final_dims.w; ++j) out.push_back({i, j, final_dims.h, final_dims.w});
  }
  for (const auto& s : layout.scales)
    for (int i = 0; i < s.h; ++i)
      for (int j = 0; j < s.w; ++j) out.push_back({i, j, s.h, s.w});
  return out;
}

std::vector<TokenPosition> attach_positions(const SequenceLayout& layout, int sequence_length) {
  auto pos = attach_positions(layout);
  if (static_cast<int>(pos.size()) != sequence_length)
    throw ShapeError("layout describes " + std::to_string(pos.size()) + " tokens but the sequence has " +
                     std::to_string(sequence_length));
  return pos;
}

RotationTables build_tables(std::span<const TokenPosition> positions, const RopeConfig& cfg) {
  const auto freq = frequencies(cfg);
  RotationTables t;
  t.length = static_cast<int>(positions.size());
  t.pairs = cfg.channels / 2;
  t.cos.resize(static_cast<size_t>(t.length) * t.pairs);
  t.sin.resize(t.cos.size());
  std::vector<double> ang(static_cast<size_t>(t.pairs));
  for (int l = 0; l < t.length; ++l) {
    check_position(positions[l]);
    fill_angles(positions[l], cfg, freq, ang.data());
    for (int p = 0; p < t.pairs; ++p) {
      t.cos[static_cast<size_t>(l) * t.pairs + p] = static_cast<float>(std::cos(ang[p]));
      t.sin[static_cast<size_t>(l) * t.pairs + p] = static_cast<float>(std::sin(ang[p]));
    }
  }
  return t;
}

}  // namespace varsr::sarope
