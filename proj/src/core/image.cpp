#include "varsr/core/image.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "varsr/error.hpp"

namespace varsr {

Image::Image(int h, int w, float fill) : height(h), width(w) {
  if (h < 1 || w < 1) throw ShapeError("image dims must be positive, got " + std::to_string(h) + "x" + std::to_string(w));
  pixels.assign(static_cast<size_t>(h) * w * 3, fill);
}

void Image::validate() const {
  if (height < 1 || width < 1) throw ShapeError("image dims must be positive");
  if (pixels.size() != static_cast<size_t>(height) * width * 3) throw ShapeError("image pixel count does not match its dims");
  for (float v : pixels)
    if (!std::isfinite(v)) throw Error("image contains a non-finite value");
}

void Image::clamp() {
  for (auto& v : pixels) v = std::clamp(v, 0.0f, 1.0f);
}

Tensor to_nchw(std::span<const Image* const> images) {
  if (images.empty()) throw ShapeError("to_nchw: empty batch");
  const int h = images[0]->height, w = images[0]->width;
  const auto n = static_cast<int>(images.size());
  std::vector<float> out(static_cast<size_t>(n) * 3 * h * w);
  const size_t plane = static_cast<size_t>(h) * w;
  for (int b = 0; b < n; ++b) {
    const Image& im = *images[b];
    if (im.height != h || im.width != w) throw ShapeError("to_nchw: images differ in size");
    float* dst = out.data() + static_cast<size_t>(b) * 3 * plane;
    for (size_t p = 0; p < plane; ++p)
      for (int c = 0; c < 3; ++c) dst[c * plane + p] = im.pixels[p * 3 + c];
  }
  return Tensor::from({n, 3, h, w}, std::move(out));
}

Tensor to_nchw(const Image& image) {
  const Image* one[] = {&image};
  return to_nchw(one);
}

Image from_nchw(const Tensor& batch, int n) {
  if (batch.rank() != 4 || batch.dim(1) != 3) throw ShapeError("from_nchw: expected [N,3,H,W], got " + to_string(batch.shape()));
  if (n < 0 || n >= batch.dim(0)) throw IndexError("from_nchw: item " + std::to_string(n) + " out of range");
  const int h = batch.dim(2), w = batch.dim(3);
  Image im(h, w);
  const size_t plane = static_cast<size_t>(h) * w;
  const float* src = batch.data().data() + static_cast<size_t>(n) * 3 * plane;
  for (size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) im.pixels[p * 3 + c] = src[c * plane + p];
  return im;
}

}  // namespace varsr
