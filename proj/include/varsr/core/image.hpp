#pragma once

#include <span>
#include <vector>

#include "varsr/numerics/tensor.hpp"

namespace varsr {

// H x W x 3 interleaved RGB, values in [0, 1], row-major.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.0f);

  float& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  size_t size() const { return pixels.size(); }
  // Throws ShapeError on non-positive dims or a pixel count mismatch, Error on non-finite values.
  void validate() const;
  void clamp();
};

// Stacks equally sized images into an NCHW tensor.
Tensor to_nchw(std::span<const Image* const> images);
Tensor to_nchw(const Image& image);
// Extracts item n of an NCHW tensor with 3 channels.
Image from_nchw(const Tensor& batch, int n);

}  // namespace varsr
