#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "varsr/error.hpp"
#include "varsr/pipeline.hpp"

namespace varsr::pipeline {

namespace {

using nlohmann::json;

// Little-endian framing helpers.
class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void text(const std::string& s) {
    u64(s.size());
    out_ += s;
  }
  void raw(const std::string& s) { out_ += s; }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  ByteReader(const std::string& bytes, size_t pos = 0, size_t end = std::string::npos)
      : bytes_(bytes), pos_(pos), end_(std::min(end, bytes.size())) {}

  std::uint32_t u32() {
    need(4, "32-bit field");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8, "64-bit field");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string text() {
    const std::uint64_t n = u64();
    need(n, "string");
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void need(std::uint64_t n, const char* what) const {
    if (n > end_ - pos_) throw ParseError(std::string("checkpoint truncated while reading ") + what, pos_);
  }
  size_t pos() const { return pos_; }
  void skip(size_t n) {
    need(n, "payload");
    pos_ += n;
  }

 private:
  const std::string& bytes_;
  size_t pos_;
  size_t end_;
};

constexpr std::uint32_t max_rank = 8;

std::string encode_section(const Section& s) {
  ByteWriter w;
  w.text(s.name);
  w.u32(static_cast<std::uint32_t>(s.entries.size()));
  for (const auto& e : s.entries) {
    w.text(e.name);
    w.u32(static_cast<std::uint32_t>(e.shape.size()));
    for (int d : e.shape) w.u32(static_cast<std::uint32_t>(d));
  }
  for (const auto& e : s.entries)
    for (float v : e.values) w.f32(v);
  return std::move(w.str());
}

Section decode_section(const std::string& bytes, size_t begin, size_t end) {
  ByteReader r(bytes, begin, end);
  Section s;
  s.name = r.text();
  const std::uint32_t count = r.u32();
  std::vector<size_t> sizes;
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorEntry e;
    e.name = r.text();
    const std::uint32_t rank = r.u32();
    if (rank > max_rank) throw ParseError("checkpoint entry '" + e.name + "' has rank " + std::to_string(rank), r.pos());
    size_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint32_t d = r.u32();
      e.shape.push_back(static_cast<int>(d));
      numel *= d;
    }
    sizes.push_back(numel);
    s.entries.push_back(std::move(e));
  }
  for (size_t i = 0; i < s.entries.size(); ++i) {
    r.need(sizes[i] * 4, "tensor payload");
    auto& vals = s.entries[i].values;
    vals.resize(sizes[i]);
    for (auto& v : vals) v = r.f32();
  }
  if (r.pos() != end) throw ParseError("section '" + s.name + "' has trailing bytes", r.pos());
  return s;
}

std::uint64_t header_checksum(const std::string& config, const std::string& meta) {
  return fnv1a64(meta, fnv1a64(config));
}

}  // namespace

const TensorEntry* Section::find(const std::string& entry) const {
  for (const auto& e : entries)
    if (e.name == entry) return &e;
  return nullptr;
}

const TensorEntry& Section::at(const std::string& entry) const {
  if (const auto* e = find(entry)) return *e;
  throw ConfigError("checkpoint section '" + name + "' has no entry '" + entry + "'");
}

void Section::add(std::string entry, std::vector<int> shape, std::vector<float> values) {
  size_t numel = 1;
  for (int d : shape) numel *= static_cast<size_t>(d);
  if (numel != values.size())
    throw ShapeError("checkpoint entry '" + entry + "': shape holds " + std::to_string(numel) + " values, got " +
                     std::to_string(values.size()));
  entries.push_back({std::move(entry), std::move(shape), std::move(values)});
}

const Section* Checkpoint::find(const std::string& name) const {
  for (const auto& s : sections)
    if (s.name == name) return &s;
  return nullptr;
}

const Section& Checkpoint::section(const std::string& name) const {
  if (const auto* s = find(name)) return *s;
  throw ConfigError("checkpoint has no '" + name + "' section");
}

Section& Checkpoint::add_section(std::string name) {
  for (auto& s : sections)
    if (s.name == name) {
      s.entries.clear();
      return s;
    }
  sections.push_back({std::move(name), {}});
  return sections.back();
}

bool Checkpoint::operator==(const Checkpoint& other) const {
  return config_text == other.config_text && meta == other.meta && sections == other.sections;
}

std::string Checkpoint::serialize() const {
  ByteWriter w;
  w.raw(std::string(magic, sizeof(magic)));
  w.u32(version);
  const std::string meta_text = meta.dump();
  w.text(config_text);
  w.text(meta_text);
  w.u64(header_checksum(config_text, meta_text));
  w.u32(static_cast<std::uint32_t>(sections.size()));
  for (const auto& s : sections) {
    const std::string body = encode_section(s);
    w.u64(body.size());
    w.raw(body);
    w.u64(fnv1a64(body));
  }
  return std::move(w.str());
}

Checkpoint Checkpoint::deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof(magic) || std::memcmp(bytes.data(), magic, sizeof(magic)) != 0)
    throw ParseError("not a checkpoint (bad magic)", 0);
  ByteReader r(bytes, sizeof(magic));
  const std::uint32_t ver = r.u32();
  if (ver != version)
    throw ParseError("unsupported checkpoint version " + std::to_string(ver), static_cast<long long>(sizeof(magic)));
  Checkpoint ckpt;
  ckpt.config_text = r.text();
  const std::string meta_text = r.text();
  if (r.u64() != header_checksum(ckpt.config_text, meta_text))
    throw ChecksumError("checkpoint header checksum mismatch");
  try {
    ckpt.meta = json::parse(meta_text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("checkpoint metadata is not JSON: ") + e.what(), 0);
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint64_t size = r.u64();
    const size_t begin = r.pos();
    r.skip(size);
    const std::uint64_t stored = r.u64();
    const std::string_view body(bytes.data() + begin, size);
    if (fnv1a64(body) != stored)
      throw ChecksumError("checkpoint section " + std::to_string(i) + " checksum mismatch");
    ckpt.sections.push_back(decode_section(bytes, begin, begin + size));
  }
  if (r.pos() != bytes.size()) throw ParseError("checkpoint has trailing bytes", r.pos());
  return ckpt;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    const std::string bytes = serialize();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return deserialize(ss.str());
  } catch (const ChecksumError& e) {
    throw ChecksumError(path.string() + ": " + e.what());
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

void store_params(Section& section, const ParamList<float>& params) {
  for (const auto& p : params) {
    const auto vals = p.tensor.data();
    section.add(p.name, p.tensor.shape(), std::vector<float>(vals.begin(), vals.end()));
  }
}

void load_params(const Section& section, const ParamList<float>& params) {
  for (const auto& p : params) {
    const auto& e = section.at(p.name);
    if (e.shape != p.tensor.shape())
      throw ConfigError("checkpoint entry '" + p.name + "' has shape " + to_string(e.shape) + ", model expects " +
                        to_string(p.tensor.shape()));
    auto dst = BasicTensor<float>(p.tensor).data();
    std::copy(e.values.begin(), e.values.end(), dst.begin());
  }
}

void store_optimizer(Checkpoint& ckpt, const AdamW& opt) {
  auto& s = ckpt.add_section("optimizer");
  const auto& st = opt.state();
  const auto& params = opt.params();
  for (size_t i = 0; i < params.size(); ++i) {
    const int n = static_cast<int>(params[i].tensor.numel());
    s.add("m." + params[i].name, {n}, i < st.m.size() ? st.m[i] : std::vector<float>(n, 0.0f));
    s.add("v." + params[i].name, {n}, i < st.v.size() ? st.v[i] : std::vector<float>(n, 0.0f));
  }
  ckpt.meta["optimizer_step"] = st.step;
}

void load_optimizer(const Checkpoint& ckpt, AdamW& opt) {
  const auto& s = ckpt.section("optimizer");
  OptimizerState st;
  st.step = ckpt.meta.at("optimizer_step").get<std::int64_t>();
  for (const auto& p : opt.params()) {
    const auto& m = s.at("m." + p.name);
    const auto& v = s.at("v." + p.name);
    if (m.values.size() != static_cast<size_t>(p.tensor.numel()) || v.values.size() != m.values.size())
      throw ConfigError("optimizer state for '" + p.name + "' does not match the parameter size");
    st.m.push_back(m.values);
    st.v.push_back(v.values);
  }
  opt.set_state(std::move(st));
}

json rng_to_json(const Rng& rng) {
  const auto st = rng.state();
  return json{{"s", st.s}, {"has_spare", st.has_spare}, {"spare", st.spare}};
}

void rng_from_json(const json& j, Rng& rng) {
  Rng::State st;
  st.s = j.at("s").get<std::array<std::uint64_t, 4>>();
  st.has_spare = j.at("has_spare").get<bool>();
  st.spare = j.at("spare").get<double>();
  rng.set_state(st);
}

}  // namespace varsr::pipeline
