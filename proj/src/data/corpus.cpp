#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include "varsr/data.hpp"
#include "varsr/error.hpp"

namespace varsr::data {

namespace {

using Color = std::array<double, 3>;

Color random_color(Rng& rng) { return {rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)}; }

// Averages `shade(u, v)` over a sub x sub grid inside each pixel, with u, v
// in pixel units.
template <typename Shade>
Image supersample(int size, int sub, Shade&& shade) {
  Image img(size, size);
  const double inv = 1.0 / (sub * sub);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      Color acc{};
      for (int sy = 0; sy < sub; ++sy)
        for (int sx = 0; sx < sub; ++sx) {
          const Color c = shade(x + (sx + 0.5) / sub, y + (sy + 0.5) / sub);
          for (int k = 0; k < 3; ++k) acc[k] += c[k];
        }
      for (int k = 0; k < 3; ++k) img.at(y, x, k) = static_cast<float>(acc[k] * inv);
    }
  img.clamp();
  return img;
}

Image render_gradient(int size, Rng& rng) {
  const Color a = random_color(rng), b = random_color(rng);
  const bool radial = rng.bernoulli(0.5);
  const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double cx = rng.uniform(0.2, 0.8) * size, cy = rng.uniform(0.2, 0.8) * size;
  const double reach = rng.uniform(0.4, 1.0) * size;
  return supersample(size, 1, [&](double u, double v) {
    double t = radial ? std::hypot(u - cx, v - cy) / reach
                      : 0.5 + ((u - 0.5 * size) * std::cos(angle) + (v - 0.5 * size) * std::sin(angle)) / size;
    t = std::clamp(t, 0.0, 1.0);
    return Color{a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])};
  });
}

Image render_checkerboard(int size, Rng& rng) {
  const Color a = random_color(rng), b = random_color(rng);
  const double cell = rng.uniform(size / 12.0, size / 4.0);
  const double angle = rng.uniform(0.0, std::numbers::pi / 2);
  const double du = rng.uniform(0.0, cell), dv = rng.uniform(0.0, cell);
  const double ca = std::cos(angle), sa = std::sin(angle);
  return supersample(size, 4, [&](double u, double v) {
    const double p = u * ca - v * sa + du, q = u * sa + v * ca + dv;
    const auto parity = static_cast<long long>(std::floor(p / cell)) + static_cast<long long>(std::floor(q / cell));
    return (parity & 1) ? a : b;
  });
}

Image render_gabor(int size, Rng& rng) {
  struct Wave {
    Color tint;
    double freq, angle, phase, cx, cy, spread;
  };
  const Color base = random_color(rng);
  std::vector<Wave> waves(1 + rng.below(3));
  for (auto& w : waves) {
    w.tint = {rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)};
    w.freq = rng.uniform(2.0, 10.0) / size;
    w.angle = rng.uniform(0.0, std::numbers::pi);
    w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    w.cx = rng.uniform(0.2, 0.8) * size;
    w.cy = rng.uniform(0.2, 0.8) * size;
    w.spread = rng.uniform(0.15, 0.5) * size;
  }
  return supersample(size, 2, [&](double u, double v) {
    Color c = base;
    for (const auto& w : waves) {
      const double du = u - w.cx, dv = v - w.cy;
      const double along = du * std::cos(w.angle) + dv * std::sin(w.angle);
      const double g = std::cos(2.0 * std::numbers::pi * w.freq * along + w.phase) *
                       std::exp(-(du * du + dv * dv) / (2.0 * w.spread * w.spread));
      for (int k = 0; k < 3; ++k) c[k] += w.tint[k] * g;
    }
    return c;
  });
}

Image render_polygons(int size, Rng& rng) {
  struct Polygon {
    Color color;
    std::vector<std::array<double, 2>> corners;  // counter-clockwise
  };
  const Color background = random_color(rng);
  std::vector<Polygon> shapes(2 + rng.below(4));
  for (auto& s : shapes) {
    s.color = random_color(rng);
    const double cx = rng.uniform(0.1, 0.9) * size, cy = rng.uniform(0.1, 0.9) * size;
    const double radius = rng.uniform(0.1, 0.35) * size;
    std::vector<double> angles(3 + rng.below(4));
    for (auto& a : angles) a = rng.uniform(0.0, 2.0 * std::numbers::pi);
    std::sort(angles.begin(), angles.end());
    for (double a : angles) s.corners.push_back({cx + radius * std::cos(a), cy + radius * std::sin(a)});
  }
  auto inside = [](const Polygon& s, double u, double v) {
    const size_t n = s.corners.size();
    for (size_t i = 0; i < n; ++i) {
      const auto& p = s.corners[i];
      const auto& q = s.corners[(i + 1) % n];
      if ((q[0] - p[0]) * (v - p[1]) - (q[1] - p[1]) * (u - p[0]) < 0.0) return false;
    }
    return true;
  };
  return supersample(size, 4, [&](double u, double v) {
    Color c = background;
    for (const auto& s : shapes)
      if (inside(s, u, v)) c = s.color;
    return c;
  });
}

}  // namespace

Image render(Family family, int size, Rng& rng) {
  if (size < 1) throw ShapeError("corpus image size must be positive");
  switch (family) {
    case Family::gradient: return render_gradient(size, rng);
    case Family::checkerboard: return render_checkerboard(size, rng);
    case Family::gabor: return render_gabor(size, rng);
    case Family::polygons: return render_polygons(size, rng);
  }
  throw ConfigError("unknown generator family");
}

std::vector<LabeledImage> generate_corpus(int n, int classes, int size, std::uint64_t seed) {
  if (n < 1) throw ConfigError("corpus needs at least one image");
  if (classes < 1) throw ConfigError("corpus needs at least one class");
  std::vector<LabeledImage> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(seed ^ static_cast<std::uint64_t>(i));
    const int family = i % family_count;
    out.push_back({render(static_cast<Family>(family), size, rng), family % classes});
  }
  return out;
}

}  // namespace varsr::data
