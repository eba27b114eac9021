#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "varsr/data.hpp"
#include "varsr/error.hpp"

namespace varsr::data {

namespace {

constexpr int window = 11;
constexpr double window_sigma = 1.5;

void check_pair(const Image& a, const Image& b) {
  a.validate();
  b.validate();
  if (a.height != b.height || a.width != b.width)
    throw ShapeError("metric inputs differ in size: " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                     " vs " + std::to_string(b.height) + "x" + std::to_string(b.width));
}

double psnr_from_mse(double mse) {
  if (mse <= 0.0) return psnr_cap;
  return std::min(psnr_cap, 10.0 * std::log10(1.0 / mse));
}

std::array<double, window> gaussian_window() {
  std::array<double, window> w{};
  double total = 0.0;
  for (int i = 0; i < window; ++i) {
    const double d = i - window / 2;
    total += w[i] = std::exp(-d * d / (2.0 * window_sigma * window_sigma));
  }
  for (auto& v : w) v /= total;
  return w;
}

// Valid-mode separable filtering of an h x w map.
std::vector<double> filter_valid(const std::vector<double>& map, int h, int w, const std::array<double, window>& k) {
  const int oh = h - window + 1, ow = w - window + 1;
  std::vector<double> mid(static_cast<size_t>(h) * ow, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int t = 0; t < window; ++t) acc += k[t] * map[static_cast<size_t>(y) * w + x + t];
      mid[static_cast<size_t>(y) * ow + x] = acc;
    }
  std::vector<double> out(static_cast<size_t>(oh) * ow, 0.0);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int t = 0; t < window; ++t) acc += k[t] * mid[static_cast<size_t>(y + t) * ow + x];
      out[static_cast<size_t>(y) * ow + x] = acc;
    }
  return out;
}

}  // namespace

std::vector<double> luma(const Image& img) {
  std::vector<double> y(static_cast<size_t>(img.height) * img.width);
  for (size_t i = 0; i < y.size(); ++i)
    y[i] = 0.299 * img.pixels[3 * i] + 0.587 * img.pixels[3 * i + 1] + 0.114 * img.pixels[3 * i + 2];
  return y;
}

double psnr(const Image& a, const Image& b) {
  check_pair(a, b);
  const auto ya = luma(a), yb = luma(b);
  double sum = 0.0;
  for (size_t i = 0; i < ya.size(); ++i) sum += (ya[i] - yb[i]) * (ya[i] - yb[i]);
  return psnr_from_mse(sum / static_cast<double>(ya.size()));
}

double psnr_rgb(const Image& a, const Image& b) {
  check_pair(a, b);
  double sum = 0.0;
  for (size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
    sum += d * d;
  }
  return psnr_from_mse(sum / static_cast<double>(a.pixels.size()));
}

double ssim_y(const Image& a, const Image& b) {
  check_pair(a, b);
  if (a.height < window || a.width < window)
    throw ShapeError("SSIM needs images of at least " + std::to_string(window) + "x" + std::to_string(window));
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const int h = a.height, w = a.width;
  const auto ya = luma(a), yb = luma(b);
  std::vector<double> aa(ya.size()), bb(ya.size()), ab(ya.size());
  for (size_t i = 0; i < ya.size(); ++i) {
    aa[i] = ya[i] * ya[i];
    bb[i] = yb[i] * yb[i];
    ab[i] = ya[i] * yb[i];
  }
  const auto k = gaussian_window();
  const auto mu_a = filter_valid(ya, h, w, k), mu_b = filter_valid(yb, h, w, k);
  const auto s_aa = filter_valid(aa, h, w, k), s_bb = filter_valid(bb, h, w, k), s_ab = filter_valid(ab, h, w, k);
  double total = 0.0;
  for (size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = s_aa[i] - ma * ma, vb = s_bb[i] - mb * mb, cov = s_ab[i] - ma * mb;
    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

}  // namespace varsr::data
