#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "varsr/data.hpp"
#include "varsr/error.hpp"

namespace varsr::data {

namespace {

unsigned char to_byte(float v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

// Cursor over a PNM header: whitespace and '#' comments separate fields.
class PnmHeader {
 public:
  explicit PnmHeader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  long long unsigned_field(const char* name) {
    skip_separators();
    if (pos_ >= bytes_.size()) throw ParseError(std::string("truncated header: missing ") + name, offset());
    if (!std::isdigit(bytes_[pos_])) throw ParseError(std::string("expected a number for ") + name, offset());
    long long v = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_++] - '0');
      if (v > (1LL << 30)) throw ParseError(std::string(name) + " is too large", offset());
    }
    return v;
  }

  // Exactly one whitespace byte separates the header from the raster.
  void end_of_header() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_]))
      throw ParseError("missing whitespace after maxval", offset());
    ++pos_;
  }

  size_t position() const { return pos_; }
  long long offset() const { return static_cast<long long>(pos_); }

 private:
  void skip_separators() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const unsigned char> bytes_;
  size_t pos_ = 2;
};

Image decode_png(std::span<const unsigned char> bytes) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size()))
    throw IoError(std::string("PNG decode failed: ") + png.message);
  png.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> raster(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, raster.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError("PNG decode failed: " + msg);
  }
  Image img(static_cast<int>(png.height), static_cast<int>(png.width));
  for (size_t i = 0; i < raster.size(); ++i) img.pixels[i] = raster[i] / 255.0f;
  return img;
}

}  // namespace

Image decode_pnm(std::span<const unsigned char> bytes) {
  if (bytes.size() < 2) throw ParseError("truncated header: missing magic number", static_cast<long long>(bytes.size()));
  if (bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) throw ParseError("not a binary PGM/PPM file", 0);
  const bool gray = bytes[1] == '5';
  PnmHeader header(bytes);
  const long long width = header.unsigned_field("width");
  const long long height = header.unsigned_field("height");
  const long long maxval = header.unsigned_field("maxval");
  if (width < 1 || height < 1) throw ParseError("image dimensions must be positive", header.offset());
  if (maxval < 1 || maxval > 65535) throw ParseError("maxval must lie in [1, 65535]", header.offset());
  header.end_of_header();
  const int channels = gray ? 1 : 3;
  const int sample_bytes = maxval < 256 ? 1 : 2;
  const size_t need = static_cast<size_t>(width) * height * channels * sample_bytes;
  const size_t start = header.position();
  if (bytes.size() - start < need)
    throw ParseError("truncated pixel data: expected " + std::to_string(need) + " bytes, found " +
                         std::to_string(bytes.size() - start),
                     static_cast<long long>(bytes.size()));
  Image img(static_cast<int>(height), static_cast<int>(width));
  const auto scale = static_cast<float>(maxval);
  const size_t samples = static_cast<size_t>(width) * height * channels;
  for (size_t s = 0; s < samples; ++s) {
    const unsigned char* p = bytes.data() + start + s * sample_bytes;
    const unsigned v = sample_bytes == 1 ? p[0] : (static_cast<unsigned>(p[0]) << 8 | p[1]);
    const float value = std::min(1.0f, static_cast<float>(v) / scale);
    if (gray)
      for (int c = 0; c < 3; ++c) img.pixels[s * 3 + c] = value;
    else
      img.pixels[s] = value;
  }
  return img;
}

std::vector<unsigned char> encode_pnm(const Image& img, bool gray) {
  img.validate();
  const std::string head = std::string(gray ? "P5" : "P6") + "\n" + std::to_string(img.width) + " " +
                           std::to_string(img.height) + "\n255\n";
  std::vector<unsigned char> out(head.begin(), head.end());
  if (gray) {
    for (double y : luma(img)) out.push_back(to_byte(static_cast<float>(y)));
  } else {
    for (float v : img.pixels) out.push_back(to_byte(v));
  }
  return out;
}

Image read_image(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  static constexpr unsigned char png_magic[] = {0x89, 'P', 'N', 'G'};
  if (bytes.size() >= 4 && std::equal(std::begin(png_magic), std::end(png_magic), bytes.begin()))
    return decode_png(bytes);
  return decode_pnm(bytes);
}

void write_image(const std::filesystem::path& path, const Image& img) {
  img.validate();
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".ppm" || ext == ".pgm") {
    write_bytes(path, encode_pnm(img, ext == ".pgm"));
    return;
  }
  if (ext != ".png") throw IoError("unsupported image extension '" + ext + "' (use .png, .ppm or .pgm)");
  std::vector<unsigned char> raster(img.pixels.size());
  std::transform(img.pixels.begin(), img.pixels.end(), raster.begin(), to_byte);
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, raster.data(), 0, nullptr))
    throw IoError("PNG write failed for " + path.string() + ": " + png.message);
}

std::vector<ManifestEntry> parse_manifest(const std::string& text) {
  std::vector<ManifestEntry> out;
  size_t start = 0;
  while (start < text.size()) {
    size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto at = static_cast<long long>(start);
    if (!line.empty() && line[0] != '#') {
      const size_t t1 = line.find('\t');
      const size_t t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
      if (t2 == std::string::npos || line.find('\t', t2 + 1) != std::string::npos)
        throw ParseError("manifest line needs exactly three tab-separated fields", at);
      ManifestEntry e;
      e.path = line.substr(0, t1);
      const std::string cls = line.substr(t1 + 1, t2 - t1 - 1);
      if (e.path.empty()) throw ParseError("manifest line has an empty path", at);
      if (cls.empty() || !std::all_of(cls.begin(), cls.end(), [](unsigned char c) { return std::isdigit(c); }) ||
          cls.size() > 9)
        throw ParseError("manifest class_id '" + cls + "' is not a non-negative integer", at + static_cast<long long>(t1) + 1);
      e.class_id = std::stoi(cls);
      try {
        e.quality = parse_quality(line.substr(t2 + 1));
      } catch (const ConfigError& err) {
        throw ParseError(err.what(), at + static_cast<long long>(t2) + 1);
      }
      out.push_back(std::move(e));
    }
    start = end + 1;
  }
  return out;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  return parse_manifest(std::string(bytes.begin(), bytes.end()));
}

void write_manifest(const std::filesystem::path& path, std::span<const ManifestEntry> entries) {
  std::ostringstream out;
  for (const auto& e : entries) {
    if (e.path.find_first_of("\t\n") != std::string::npos)
      throw IoError("manifest path contains a tab or newline: " + e.path);
    out << e.path << '\t' << e.class_id << '\t' << to_string(e.quality) << '\n';
  }
  const std::string text = out.str();
  write_bytes(path, std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

}  // namespace varsr::data
