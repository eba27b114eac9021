#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "varsr/core/image.hpp"
#include "varsr/core/quality.hpp"
#include "varsr/numerics/rng.hpp"

// Procedural corpus, LR synthesis, preprocessing, fidelity metrics and image I/O.
namespace varsr::data {

using varsr::parse_quality;
using varsr::Quality;
using varsr::to_string;

struct LabeledImage {
  Image image;
  int class_id = 0;
};

// Generator families, in class order.
enum class Family { gradient = 0, checkerboard = 1, gabor = 2, polygons = 3 };
inline constexpr int family_count = 4;

// n procedural size x size images. Sample i uses family i % 4, class
// family % classes, and its own stream seeded with seed ^ i.
std::vector<LabeledImage> generate_corpus(int n, int classes, int size, std::uint64_t seed);
Image render(Family family, int size, Rng& rng);

// Separable bicubic (Keys, a = -0.5) on pixel centers with clamped borders.
// When shrinking, the kernel is widened by the scale factor (antialiased).
// Output is clamped to [0, 1].
Image resize_bicubic(const Image& img, int height, int width);
// Separable Gaussian blur with radius ceil(3 sigma) and mirrored borders.
// sigma <= 0 returns a copy.
Image gaussian_blur(const Image& img, double sigma);

// Bicubic resize so the short side becomes round(1.25 * target), then a
// centered target x target crop. Throws ShapeError if the short side is
// below target / 1.25.
Image preprocess(const Image& img, int target);

struct DegradationParams {
  double blur_min = 0.2, blur_max = 2.0;
  double noise_min = 1.0 / 255.0, noise_max = 20.0 / 255.0;
  int factor = 4;

  void validate() const;
};

struct DegradationDraw {
  double blur = 0.0;
  double noise = 0.0;
};

// blur -> bicubic downsample by factor -> additive Gaussian noise -> clamp.
// Throws ShapeError if the dims are not divisible by the factor.
Image degrade(const Image& hr, const DegradationParams& params, Rng& rng, DegradationDraw* drawn = nullptr);

// With probability neg_fraction, applies a strong degradation to hr in place
// and returns negative; otherwise leaves hr untouched. One draw is consumed
// either way.
Quality label_quality(Image& hr, Rng& rng, double neg_fraction);

struct PairedSample {
  Image hr;
  Image lr;
  Quality quality = Quality::positive;
  int class_id = 0;
};

// label_quality on a copy of hr, then degrade it to get the LR input.
PairedSample make_pair(const Image& hr, int class_id, const DegradationParams& params, double neg_fraction,
                       Rng& rng);

// BT.601 luma 0.299 R + 0.587 G + 0.114 B, one value per pixel.
std::vector<double> luma(const Image& img);

// 10 log10(1 / MSE) on the luma channel, capped at 99 dB.
double psnr(const Image& a, const Image& b);
// Same on all three RGB channels.
double psnr_rgb(const Image& a, const Image& b);
inline constexpr double psnr_cap = 99.0;
// Mean SSIM on the luma channel: 11x11 Gaussian window (sigma 1.5) over
// valid positions, C1 = 0.01^2, C2 = 0.03^2. Needs both dims >= 11.
double ssim_y(const Image& a, const Image& b);

// 8-bit PNG (RGB, gray, palette or alpha inputs) or binary PPM/PGM, chosen by
// file content on read and by extension on write. Values are quantized to 8
// bits on write; PGM stores luma. Throws ParseError with the byte offset for
// malformed PPM/PGM data and IoError for filesystem or PNG failures.
Image read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Image& img);
// PPM/PGM from an in-memory buffer.
Image decode_pnm(std::span<const unsigned char> bytes);
std::vector<unsigned char> encode_pnm(const Image& img, bool gray);

struct ManifestEntry {
  std::string path;
  int class_id = 0;
  Quality quality = Quality::positive;
};

// Lines of `path<TAB>class_id<TAB>quality_label`.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, std::span<const ManifestEntry> entries);
std::vector<ManifestEntry> parse_manifest(const std::string& text);

}  // namespace varsr::data
