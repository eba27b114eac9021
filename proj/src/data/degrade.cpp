#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <string>

#include "varsr/data.hpp"
#include "varsr/error.hpp"

namespace varsr::data {

Image preprocess(const Image& img, int target) {
  if (target < 1) throw ConfigError("preprocess target must be positive");
  img.validate();
  const int short_side = std::min(img.height, img.width);
  if (short_side * 1.25 < target) {
    spdlog::warn("preprocess: rejected {}x{} image for target {}", img.height, img.width, target);
    throw ShapeError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " is too small for target " + std::to_string(target));
  }
  const int resized = static_cast<int>(std::lround(1.25 * target));
  auto scaled_dim = [&](int d) {
    return d == short_side ? resized : static_cast<int>(std::lround(static_cast<double>(d) * resized / short_side));
  };
  const int h = scaled_dim(img.height), w = scaled_dim(img.width);
  const Image big = (h == img.height && w == img.width) ? img : resize_bicubic(img, h, w);
  const int top = (h - target) / 2, left = (w - target) / 2;
  Image out(target, target);
  for (int y = 0; y < target; ++y)
    for (int x = 0; x < target; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = big.at(top + y, left + x, c);
  return out;
}

void DegradationParams::validate() const {
  if (factor < 1) throw ConfigError("degradation factor must be at least 1");
  if (blur_min < 0 || blur_max < blur_min || noise_min < 0 || noise_max < noise_min)
    throw ConfigError("degradation ranges must be non-negative with min <= max");
}

namespace {

void add_noise(Image& img, double sigma, Rng& rng) {
  if (sigma > 0.0)
    for (auto& v : img.pixels) v = static_cast<float>(v + sigma * rng.normal());
  img.clamp();
}

}  // namespace

Image degrade(const Image& hr, const DegradationParams& params, Rng& rng, DegradationDraw* drawn) {
  params.validate();
  hr.validate();
  if (hr.height % params.factor != 0 || hr.width % params.factor != 0)
    throw ShapeError("image " + std::to_string(hr.height) + "x" + std::to_string(hr.width) +
                     " is not divisible by factor " + std::to_string(params.factor));
  DegradationDraw draw;
  draw.blur = rng.uniform(params.blur_min, params.blur_max);
  draw.noise = rng.uniform(params.noise_min, params.noise_max);
  Image lr = resize_bicubic(gaussian_blur(hr, draw.blur), hr.height / params.factor, hr.width / params.factor);
  add_noise(lr, draw.noise, rng);
  if (drawn) *drawn = draw;
  return lr;
}

Quality label_quality(Image& hr, Rng& rng, double neg_fraction) {
  if (!(neg_fraction >= 0.0 && neg_fraction <= 1.0)) throw ConfigError("negative fraction must lie in [0, 1]");
  if (!rng.bernoulli(neg_fraction)) return Quality::positive;
  // Heavy blur, a 4x down/up round trip and visible noise.
  constexpr int shrink = 4;
  const Image soft = gaussian_blur(hr, 1.5);
  const Image small = resize_bicubic(soft, std::max(1, hr.height / shrink), std::max(1, hr.width / shrink));
  hr = resize_bicubic(small, hr.height, hr.width);
  add_noise(hr, 0.05, rng);
  return Quality::negative;
}

PairedSample make_pair(const Image& hr, int class_id, const DegradationParams& params, double neg_fraction,
                       Rng& rng) {
  PairedSample s;
  s.hr = hr;
  s.class_id = class_id;
  s.quality = label_quality(s.hr, rng, neg_fraction);
  s.lr = degrade(s.hr, params, rng);
  return s;
}

}  // namespace varsr::data
