#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "varsr/data.hpp"
#include "varsr/error.hpp"

namespace varsr::data {

namespace {

double cubic(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}

// Taps of one output sample along an axis: source indices and weights.
struct Taps {
  std::vector<int> index;
  std::vector<double> weight;
};

int clamp_index(int i, int n) { return std::clamp(i, 0, n - 1); }

int mirror_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

std::vector<Taps> bicubic_taps(int in, int out) {
  const double scale = static_cast<double>(in) / out;
  const double stretch = std::max(scale, 1.0);
  const double support = 2.0 * stretch;
  std::vector<Taps> taps(static_cast<size_t>(out));
  for (int o = 0; o < out; ++o) {
    const double center = (o + 0.5) * scale;
    const int lo = static_cast<int>(std::floor(center - support));
    const int hi = static_cast<int>(std::ceil(center + support));
    double total = 0.0;
    for (int k = lo; k <= hi; ++k) {
      const double w = cubic((k + 0.5 - center) / stretch);
      if (w == 0.0) continue;
      taps[o].index.push_back(clamp_index(k, in));
      taps[o].weight.push_back(w);
      total += w;
    }
    for (auto& w : taps[o].weight) w /= total;
  }
  return taps;
}

std::vector<Taps> gaussian_taps(int n, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
  double total = 0.0;
  for (int d = -radius; d <= radius; ++d) total += kernel[d + radius] = std::exp(-0.5 * d * d / (sigma * sigma));
  for (auto& w : kernel) w /= total;
  std::vector<Taps> taps(static_cast<size_t>(n));
  for (int o = 0; o < n; ++o)
    for (int d = -radius; d <= radius; ++d) {
      taps[o].index.push_back(mirror_index(o + d, n));
      taps[o].weight.push_back(kernel[d + radius]);
    }
  return taps;
}

// Applies row taps then column taps in double precision.
Image separable(const Image& img, const std::vector<Taps>& rows, const std::vector<Taps>& cols, bool clamp_out) {
  img.validate();
  const int out_h = static_cast<int>(rows.size()), out_w = static_cast<int>(cols.size());
  std::vector<double> mid(static_cast<size_t>(img.height) * out_w * 3, 0.0);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < out_w; ++x) {
      double* dst = mid.data() + (static_cast<size_t>(y) * out_w + x) * 3;
      for (size_t t = 0; t < cols[x].index.size(); ++t)
        for (int c = 0; c < 3; ++c) dst[c] += cols[x].weight[t] * img.at(y, cols[x].index[t], c);
    }
  Image out(out_h, out_w);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (size_t t = 0; t < rows[y].index.size(); ++t)
          acc += rows[y].weight[t] * mid[(static_cast<size_t>(rows[y].index[t]) * out_w + x) * 3 + c];
        out.at(y, x, c) = static_cast<float>(acc);
      }
  if (clamp_out) out.clamp();
  return out;
}

}  // namespace

Image resize_bicubic(const Image& img, int height, int width) {
  if (height < 1 || width < 1)
    throw ShapeError("resize target " + std::to_string(height) + "x" + std::to_string(width) + " is not positive");
  return separable(img, bicubic_taps(img.height, height), bicubic_taps(img.width, width), true);
}

Image gaussian_blur(const Image& img, double sigma) {
  if (!(sigma > 0.0)) return img;
  return separable(img, gaussian_taps(img.height, sigma), gaussian_taps(img.width, sigma), false);
}

}  // namespace varsr::data
