#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "varsr/data.hpp"
#include "varsr/error.hpp"

using namespace varsr;
using namespace varsr::data;

namespace {

// FNV-1a over the 8-bit quantized pixels.
std::uint64_t pixel_checksum(const Image& img) {
  std::string bytes;
  for (float v : img.pixels) bytes.push_back(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  return fnv1a64(bytes);
}

Image random_image(int h, int w, Rng& rng) {
  Image img(h, w);
  for (auto& v : img.pixels) v = static_cast<float>(rng.uniform());
  return img;
}

double max_abs_diff(const Image& a, const Image& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.pixels.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a.pixels[i]) - b.pixels[i]));
  return m;
}

// Textbook SSIM: direct 11x11 window sums at every valid position.
double reference_ssim(const Image& a, const Image& b) {
  auto y = [](const Image& img, int r, int c) {
    return 0.299 * img.at(r, c, 0) + 0.587 * img.at(r, c, 1) + 0.114 * img.at(r, c, 2);
  };
  double g[11][11];
  double total = 0.0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) total += g[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * 1.5 * 1.5));
  for (auto& row : g)
    for (double& v : row) v /= total;
  double sum = 0.0;
  int count = 0;
  for (int r = 0; r + 11 <= a.height; ++r)
    for (int c = 0; c + 11 <= a.width; ++c) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double va = y(a, r + i, c + j), vb = y(b, r + i, c + j), w = g[i][j];
          ma += w * va;
          mb += w * vb;
          saa += w * va * va;
          sbb += w * vb * vb;
          sab += w * va * vb;
        }
      const double c1 = 1e-4, c2 = 9e-4;
      sum += (2 * ma * mb + c1) * (2 * (sab - ma * mb) + c2) /
             ((ma * ma + mb * mb + c1) * (saa - ma * ma + sbb - mb * mb + c2));
      ++count;
    }
  return sum / count;
}

double reference_psnr(const Image& a, const Image& b) {
  double sum = 0.0;
  for (int r = 0; r < a.height; ++r)
    for (int c = 0; c < a.width; ++c) {
      const double d = 0.299 * (a.at(r, c, 0) - b.at(r, c, 0)) + 0.587 * (a.at(r, c, 1) - b.at(r, c, 1)) +
                       0.114 * (a.at(r, c, 2) - b.at(r, c, 2));
      sum += d * d;
    }
  return 10.0 * std::log10(1.0 / (sum / (a.height * a.width)));
}

double keys(double x) {
  x = std::abs(x);
  if (x < 1) return 1.5 * x * x * x - 2.5 * x * x + 1;
  if (x < 2) return -0.5 * x * x * x + 2.5 * x * x - 4 * x + 2;
  return 0;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() : path(std::filesystem::temp_directory_path() / ("varsr_data_test_" + std::to_string(::getpid()))) {
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

std::vector<unsigned char> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("corpus is deterministic, labelled by family and bounded") {
  const auto a = generate_corpus(4, 4, 80, 0);
  const auto b = generate_corpus(4, 4, 80, 0);
  REQUIRE(a.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(a[i].image.pixels == b[i].image.pixels);
    CHECK(a[i].class_id == i);
    CHECK(a[i].image.height == 80);
    for (float v : a[i].image.pixels) REQUIRE((v >= 0.0f && v <= 1.0f));
  }
  for (const auto& s : generate_corpus(8, 1, 16, 3)) CHECK(s.class_id == 0);
  const auto two = generate_corpus(8, 2, 16, 3);
  for (int i = 0; i < 8; ++i) CHECK(two[i].class_id == (i % 4) % 2);
  CHECK(generate_corpus(1, 4, 16, 1)[0].image.pixels != generate_corpus(1, 4, 16, 2)[0].image.pixels);
  CHECK_THROWS_AS(generate_corpus(0, 4, 16, 0), ConfigError);
}

TEST_CASE("corpus golden checksums for seed 0") {
  const std::uint64_t golden[4] = {6678361908172291832ULL, 5203784611328587453ULL, 14602294985096385008ULL,
                                    10660598360639515070ULL};
  const auto corpus = generate_corpus(4, 4, 80, 0);
  for (int i = 0; i < 4; ++i) {
    CHECK(pixel_checksum(corpus[i].image) == golden[i]);
  }
}

TEST_CASE("bicubic resize matches a direct Keys-kernel evaluation") {
  Rng rng(4);
  const Image src = random_image(5, 7, rng);
  const Image up = resize_bicubic(src, 5, 13);
  // Rows are unchanged at equal height, so each output is a 1-D Keys sum.
  double worst = 0.0;
  for (int r = 0; r < 5; ++r)
    for (int o = 0; o < 13; ++o)
      for (int c = 0; c < 3; ++c) {
        const double center = (o + 0.5) * 7.0 / 13.0;
        double acc = 0, wsum = 0;
        for (int k = static_cast<int>(std::floor(center)) - 3; k <= static_cast<int>(std::floor(center)) + 3; ++k) {
          const double w = keys(k + 0.5 - center);
          acc += w * src.at(r, std::clamp(k, 0, 6), c);
          wsum += w;
        }
        const double expect = std::clamp(acc / wsum, 0.0, 1.0);
        worst = std::max(worst, std::abs(expect - up.at(r, o, c)));
      }
  CHECK(worst < 1e-6);
  CHECK(max_abs_diff(resize_bicubic(src, 5, 7), src) < 1e-6);
}

TEST_CASE("bicubic resize preserves constants and interior linear ramps") {
  Image flat(12, 12, 0.3f);
  CHECK(max_abs_diff(resize_bicubic(flat, 3, 5), Image(3, 5, 0.3f)) < 1e-6);
  Image ramp(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c) ramp.at(y, x, c) = static_cast<float>((x + 0.5) / 32.0);
  const Image half = resize_bicubic(ramp, 8, 8);
  // Interior outputs see a symmetric, normalized kernel over an affine signal.
  for (int x = 2; x < 6; ++x) CHECK(half.at(4, x, 0) == doctest::Approx((x + 0.5) / 8.0).epsilon(1e-6));
  CHECK_THROWS_AS(resize_bicubic(flat, 0, 4), ShapeError);
}

TEST_CASE("gaussian blur of an impulse reproduces the normalized kernel") {
  Image impulse(15, 15, 0.0f);
  for (int c = 0; c < 3; ++c) impulse.at(7, 7, c) = 1.0f;
  const double sigma = 1.2;
  const Image blurred = gaussian_blur(impulse, sigma);
  double norm = 0.0;
  for (int d = -4; d <= 4; ++d) norm += std::exp(-0.5 * d * d / (sigma * sigma));
  for (int dy = -4; dy <= 4; ++dy)
    for (int dx = -4; dx <= 4; ++dx) {
      const double expect = std::exp(-0.5 * (dx * dx + dy * dy) / (sigma * sigma)) / (norm * norm);
      CHECK(blurred.at(7 + dy, 7 + dx, 1) == doctest::Approx(expect).epsilon(1e-5));
    }
  Image flat(9, 6, 0.7f);
  CHECK(max_abs_diff(gaussian_blur(flat, 2.0), flat) < 1e-6);
  CHECK(gaussian_blur(flat, 0.0).pixels == flat.pixels);
}

TEST_CASE("preprocess resizes the short side to 1.25x target and center-crops") {
  Rng rng(8);
  const Image square = random_image(80, 80, rng);
  const Image crop = preprocess(square, 64);
  REQUIRE(crop.height == 64);
  REQUIRE(crop.width == 64);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) REQUIRE(crop.at(y, x, 2) == square.at(y + 8, x + 8, 2));
  for (auto [h, w] : {std::pair{100, 80}, std::pair{52, 300}, std::pair{97, 113}}) {
    const Image out = preprocess(random_image(h, w, rng), 64);
    CHECK(out.height == 64);
    CHECK(out.width == 64);
  }
  const Image flat = preprocess(Image(90, 120, 0.25f), 32);
  CHECK(max_abs_diff(flat, Image(32, 32, 0.25f)) < 1e-6);
  CHECK_THROWS_AS(preprocess(Image(50, 200, 0.5f), 64), ShapeError);
  CHECK_NOTHROW(preprocess(Image(52, 200, 0.5f), 64));
}

TEST_CASE("preprocess keeps a marker only inside the central fraction") {
  // 160 -> 80 -> crop [8, 72): source rows/cols [16, 144) survive.
  auto marker_at = [](int top, int left) {
    Image img(160, 160, 0.0f);
    for (int y = top; y < top + 8; ++y)
      for (int x = left; x < left + 8; ++x)
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = 1.0f;
    return img;
  };
  auto peak = [](const Image& img) { return *std::max_element(img.pixels.begin(), img.pixels.end()); };
  CHECK(peak(preprocess(marker_at(76, 76), 64)) > 0.9f);
  CHECK(peak(preprocess(marker_at(24, 130), 64)) > 0.9f);
  CHECK(peak(preprocess(marker_at(2, 76), 64)) < 0.05f);
  CHECK(peak(preprocess(marker_at(76, 148), 64)) < 0.05f);
}

TEST_CASE("degrade: degenerate params give a pure bicubic downsample") {
  Rng rng(2);
  const Image hr = random_image(32, 24, rng);
  DegradationParams p;
  p.blur_min = p.blur_max = 0.0;
  p.noise_min = p.noise_max = 0.0;
  Rng draw(1);
  const Image lr = degrade(hr, p, draw);
  CHECK(lr.height == 8);
  CHECK(lr.width == 6);
  CHECK(lr.pixels == resize_bicubic(hr, 8, 6).pixels);
  CHECK_THROWS_AS(degrade(random_image(30, 24, rng), p, draw), ShapeError);
  p.factor = 0;
  CHECK_THROWS_AS(degrade(hr, p, draw), ConfigError);
}

TEST_CASE("degrade is deterministic per seed and adds noise of the drawn sigma") {
  Rng rng(6);
  const Image hr = random_image(64, 64, rng);
  const DegradationParams p;
  Rng s1(11), s2(11), s3(12);
  const Image a = degrade(hr, p, s1), b = degrade(hr, p, s2), c = degrade(hr, p, s3);
  CHECK(a.pixels == b.pixels);
  CHECK(a.pixels != c.pixels);

  DegradationParams fixed;
  fixed.noise_min = fixed.noise_max = 0.05;
  Rng s4(5);
  DegradationDraw drawn;
  const Image lr = degrade(Image(256, 256, 0.5f), fixed, s4, &drawn);
  CHECK(drawn.noise == 0.05);
  CHECK(drawn.blur >= fixed.blur_min);
  CHECK(drawn.blur <= fixed.blur_max);
  double mean = 0, sq = 0;
  for (float v : lr.pixels) mean += v;
  mean /= static_cast<double>(lr.pixels.size());
  for (float v : lr.pixels) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(lr.pixels.size()));
  CHECK(mean == doctest::Approx(0.5).epsilon(0.01));
  CHECK(sd == doctest::Approx(0.05).epsilon(0.05));
}

TEST_CASE("degrade golden LR checksum for seed 0") {
  const Image hr = preprocess(generate_corpus(1, 4, 80, 0)[0].image, 64);
  Rng rng(0);
  const Image lr = degrade(hr, DegradationParams{}, rng);
  CHECK(pixel_checksum(lr) == 5667853852698529678ULL);
}

TEST_CASE("label_quality extremes and golden mask") {
  Rng rng(1);
  const Image hr = random_image(16, 16, rng);
  Rng r0(0);
  for (int i = 0; i < 20; ++i) {
    Image copy = hr;
    CHECK(label_quality(copy, r0, 0.0) == Quality::positive);
    CHECK(copy.pixels == hr.pixels);
  }
  Rng r1(0);
  for (int i = 0; i < 20; ++i) {
    Image copy = hr;
    CHECK(label_quality(copy, r1, 1.0) == Quality::negative);
    CHECK(copy.pixels != hr.pixels);
  }
  Rng r2(0);
  std::string mask;
  for (int i = 0; i < 40; ++i) {
    Image copy = hr;
    mask.push_back(label_quality(copy, r2, 0.1) == Quality::negative ? '1' : '0');
  }
  CHECK(mask == "0000000000010001100001000001010000000000");
  Image copy = hr;
  CHECK_THROWS_AS(label_quality(copy, r2, 1.5), ConfigError);
}

TEST_CASE("make_pair labels, degrades and keeps the class") {
  Rng rng(3);
  const Image hr = random_image(64, 64, rng);
  Rng r(9);
  const PairedSample s = make_pair(hr, 2, DegradationParams{}, 1.0, r);
  CHECK(s.quality == Quality::negative);
  CHECK(s.class_id == 2);
  CHECK(s.lr.height == 16);
  CHECK(s.hr.pixels != hr.pixels);
}

TEST_CASE("psnr closed forms and cap") {
  Rng rng(5);
  const Image a = random_image(16, 16, rng);
  CHECK(psnr(a, a) == psnr_cap);
  CHECK(psnr_rgb(a, a) == psnr_cap);
  Image lo(8, 8, 0.5f), hi(8, 8, 0.5f);
  for (auto& v : hi.pixels) v = 0.6f;
  // The float offset is not exactly 0.1; compare against the exact float difference.
  const double d = static_cast<double>(0.6f) - 0.5f;
  CHECK(psnr(lo, hi) == doctest::Approx(10 * std::log10(1 / (d * d))).epsilon(1e-12));
  CHECK(psnr(lo, hi) == doctest::Approx(20.0).epsilon(1e-6));
  CHECK(psnr_rgb(lo, hi) == doctest::Approx(20.0).epsilon(1e-6));
  CHECK_THROWS_AS(psnr(a, Image(16, 15)), ShapeError);
}

TEST_CASE("ssim identities and ordering") {
  Rng rng(6);
  const Image a = random_image(32, 32, rng);
  CHECK(ssim_y(a, a) == 1.0);
  Image neg = a;
  for (auto& v : neg.pixels) v = 1.0f - v;
  CHECK(ssim_y(a, neg) < ssim_y(a, a));
  CHECK_THROWS_AS(ssim_y(a, Image(32, 31)), ShapeError);
  CHECK_THROWS_AS(ssim_y(Image(10, 10), Image(10, 10)), ShapeError);
}

TEST_CASE("metrics agree with scalar-loop references on random pairs") {
  Rng rng(7);
  double worst_ssim = 0.0, worst_psnr = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 11 + static_cast<int>(rng.below(30)), w = 11 + static_cast<int>(rng.below(30));
    const Image a = random_image(h, w, rng);
    Image b = a;
    const double amount = rng.uniform(0.01, 0.5);
    for (auto& v : b.pixels) v = std::clamp(static_cast<float>(v + amount * rng.normal()), 0.0f, 1.0f);
    worst_ssim = std::max(worst_ssim, std::abs(ssim_y(a, b) - reference_ssim(a, b)));
    worst_psnr = std::max(worst_psnr, std::abs(psnr(a, b) - reference_psnr(a, b)));
  }
  CHECK(worst_ssim <= 1e-6);
  CHECK(worst_psnr <= 1e-6);
}

TEST_CASE("image files round-trip within 8-bit quantization") {
  TempDir dir;
  Rng rng(10);
  const Image img = random_image(13, 17, rng);
  for (const char* name : {"a.png", "a.ppm"}) {
    write_image(dir.path / name, img);
    const Image back = read_image(dir.path / name);
    REQUIRE(back.height == 13);
    REQUIRE(back.width == 17);
    CHECK(max_abs_diff(back, img) <= 0.5 / 255 + 1e-7);
    write_image(dir.path / (std::string("b") + name), back);
    CHECK(read_image(dir.path / (std::string("b") + name)).pixels == back.pixels);
  }
  Image gray(9, 5);
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 5; ++x)
      for (int c = 0; c < 3; ++c) gray.at(y, x, c) = static_cast<float>((y * 5 + x) / 44.0);
  write_image(dir.path / "g.pgm", gray);
  CHECK(max_abs_diff(read_image(dir.path / "g.pgm"), gray) <= 0.5 / 255 + 1e-6);
  CHECK_THROWS_AS(write_image(dir.path / "a.bmp", img), IoError);
  CHECK_THROWS_AS(read_image(dir.path / "missing.png"), IoError);
}

TEST_CASE("PNM parse errors name the field and byte offset") {
  try {
    decode_pnm(bytes_of("P6\n4 "));
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("missing height") != std::string::npos);
    CHECK(e.offset() == 5);
  }
  try {
    decode_pnm(bytes_of("P6\n# comment\n2 2\n"));
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("missing maxval") != std::string::npos);
  }
  try {
    decode_pnm(bytes_of("P5\n2 2\n255\nabc"));
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("truncated pixel data") != std::string::npos);
    CHECK(e.offset() == 14);
  }
  CHECK_THROWS_AS(decode_pnm(bytes_of("P3\n1 1\n255\n0 0 0")), ParseError);
  CHECK_THROWS_AS(decode_pnm(bytes_of("P6\nx 1\n255\n")), ParseError);
  const Image tiny = decode_pnm(bytes_of(std::string("P5 1 1 255\n") + '\x80'));
  CHECK(tiny.at(0, 0, 1) == doctest::Approx(128.0 / 255.0));
}

TEST_CASE("golden checksum of a written seed-0 corpus image") {
  TempDir dir;
  write_image(dir.path / "c.ppm", generate_corpus(1, 4, 80, 0)[0].image);
  std::ifstream in(dir.path / "c.ppm", std::ios::binary);
  const std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(fnv1a64(file) == 8885313353893813342ULL);
}

TEST_CASE("manifest round-trip and malformed lines") {
  TempDir dir;
  const std::vector<ManifestEntry> entries = {{"img/0.png", 0, Quality::positive}, {"img/1.png", 3, Quality::negative}};
  write_manifest(dir.path / "m.tsv", entries);
  const auto back = read_manifest(dir.path / "m.tsv");
  REQUIRE(back.size() == 2);
  CHECK(back[1].path == "img/1.png");
  CHECK(back[1].class_id == 3);
  CHECK(back[1].quality == Quality::negative);
  CHECK(parse_manifest("# header\n\na\t1\tpositive\r\n").size() == 1);
  try {
    parse_manifest("a\t1\tpositive\nb\tx\tpositive\n");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 15);
  }
  CHECK_THROWS_AS(parse_manifest("a\t1\n"), ParseError);
  CHECK_THROWS_AS(parse_manifest("a\t1\tgood\n"), ParseError);
}
