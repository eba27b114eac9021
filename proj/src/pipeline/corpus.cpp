#include <cstdio>
#include <string>

#include <spdlog/spdlog.h>

#include "varsr/error.hpp"
#include "varsr/pipeline.hpp"

namespace varsr::pipeline {

namespace {

std::string numbered(const char* dir, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s/%06d.png", dir, i);
  return buf;
}

}  // namespace

std::filesystem::path train_manifest(const RunConfig& cfg) { return std::filesystem::path(cfg.data.root) / "train.tsv"; }
std::filesystem::path eval_manifest(const RunConfig& cfg) { return std::filesystem::path(cfg.data.root) / "eval.tsv"; }

void make_corpus(const RunConfig& cfg) {
  cfg.validate();
  const std::filesystem::path root(cfg.data.root);
  std::filesystem::create_directories(root / "train");
  std::filesystem::create_directories(root / "eval");

  const std::uint64_t train_seed = Rng::stream(cfg.seed, "corpus.train").next_u64();
  const std::uint64_t eval_seed = Rng::stream(cfg.seed, "corpus.eval").next_u64();
  Rng labels = Rng::stream(cfg.seed, "corpus.labels");

  std::vector<data::ManifestEntry> train;
  int negatives = 0;
  auto images = data::generate_corpus(cfg.data.train_images, cfg.data.classes, cfg.data.source_size, train_seed);
  for (int i = 0; i < static_cast<int>(images.size()); ++i) {
    auto& item = images[i];
    const Quality q = data::label_quality(item.image, labels, cfg.data.neg_fraction);
    negatives += q == Quality::negative;
    const std::string rel = numbered("train", i);
    data::write_image(root / rel, item.image);
    train.push_back({rel, item.class_id, q});
  }
  data::write_manifest(train_manifest(cfg), train);

  std::vector<data::ManifestEntry> held_out;
  auto eval_images = data::generate_corpus(cfg.data.eval_images, cfg.data.classes, cfg.data.source_size, eval_seed);
  for (int i = 0; i < static_cast<int>(eval_images.size()); ++i) {
    const std::string rel = numbered("eval", i);
    data::write_image(root / rel, eval_images[i].image);
    held_out.push_back({rel, eval_images[i].class_id, Quality::positive});
  }
  data::write_manifest(eval_manifest(cfg), held_out);
  spdlog::info("corpus: {} training images ({} negative), {} held-out images under {}", train.size(), negatives,
               held_out.size(), root.string());
}

std::vector<Sample> load_samples(const std::filesystem::path& manifest, int hr_size) {
  if (!std::filesystem::exists(manifest))
    throw ConfigError("manifest " + manifest.string() + " does not exist (run the corpus command first)");
  const auto entries = data::read_manifest(manifest);
  if (entries.empty()) throw ConfigError("manifest " + manifest.string() + " lists no images");
  const auto dir = manifest.parent_path();
  std::vector<Sample> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    const auto path = std::filesystem::path(e.path).is_absolute() ? std::filesystem::path(e.path) : dir / e.path;
    Image img;
    try {
      img = data::preprocess(data::read_image(path), hr_size);
    } catch (const ShapeError& err) {
      throw ShapeError(path.string() + ": " + err.what());
    }
    out.push_back({std::move(img), e.class_id, e.quality});
  }
  return out;
}

std::vector<EvalPair> make_eval_pairs(const std::vector<Sample>& samples, const std::vector<std::string>& names,
                                      const RunConfig& cfg) {
  if (names.size() != samples.size()) throw ShapeError("one name per evaluation sample expected");
  std::vector<EvalPair> pairs;
  pairs.reserve(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    Rng rng = Rng::stream(cfg.data.eval_seed, "eval." + std::to_string(i));
    pairs.push_back({names[i], samples[i].hr, data::degrade(samples[i].hr, cfg.data.degradation, rng)});
  }
  return pairs;
}

}  // namespace varsr::pipeline
