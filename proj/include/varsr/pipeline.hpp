#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "varsr/arm.hpp"
#include "varsr/core/image.hpp"
#include "varsr/data.hpp"
#include "varsr/guidance.hpp"
#include "varsr/refiner.hpp"
#include "varsr/tokenizer.hpp"

// Run configuration, checkpoints, the three training stages, super-resolution
// inference, evaluation and the cost report.
namespace varsr::pipeline {

// ---------------------------------------------------------------- config

struct DataConfig {
  std::string root = "corpus";  // corpus directory written by make_corpus
  int train_images = 2000;
  int eval_images = 32;
  int source_size = 80;  // rendered size before preprocessing
  int hr_size = 64;
  int classes = 4;
  double neg_fraction = 0.1;
  std::uint64_t eval_seed = 7;  // seeds the held-out degradations
  data::DegradationParams degradation{};
};

struct TokenizerConfig {
  int vocab = 64;
  std::vector<int> widths{16, 32, 64};
  int latent_dim = 16;
  int steps = 1500;
  int finetune_steps = 500;
  double lr = 1e-3;
  double finetune_lr = 1e-3;
  double bypass_prob = 0.5;
  double commitment = 0.25;
  double ema_decay = 0.99;
  double drop_prob = 0.1;
};

struct ModelConfig {
  int width = 128;
  int heads = 4;
  int blocks = 4;
  int mlp_ratio = 4;
  std::vector<int> encoder_widths{32, 64};
  double rope_theta = 10000.0;
};

struct RefinerSettings {
  int width = 128;
  int blocks = 3;
  int train_steps = 100;  // diffusion steps T_train
  int sample_steps = 10;
  int draws = 4;  // (t, eps) draws per site per training step
  double temperature = 1.0;
  double clip = 4.0;
};

struct TrainSettings {
  int batch = 16;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double loss_lambda = 2.0;  // weight of the refiner term in CE + lambda * L_diff
  int pretrain_steps = 4000;
  int finetune_steps = 2000;
  int checkpoint_every = 500;
  int eval_batch = 8;
};

struct SampleSettings {
  double temperature = 1.0;
  int top_k = 0;
  bool greedy = false;
};

// Reference values of the original large-scale setup. Recorded, never used
// for computation except by the cost report.
struct ReferenceSetup {
  std::vector<int> scales{1, 2, 3, 4, 6, 9, 13, 18, 24, 32};
  int vocab = 4096;
  int model_blocks = 24;
  int model_width = 1536;
  int refiner_blocks = 6;
  int refiner_width = 1024;
  int diffusion_steps = 1000;
  int sample_steps = 10;
  int batch = 128;
  double lr = 5e-5;
  double weight_decay = 5e-2;
  int tokenizer_iters = 10000;
  int pretrain_iters = 40000;
  int finetune_iters = 20000;
  double loss_lambda = 2.0;
  double drop_prob = 0.1;
  double lambda_max = 6.0;
  int hr_size = 512;
  int lr_size = 128;
};

struct RunConfig {
  DataConfig data;
  TokenizerConfig tokenizer;
  std::vector<int> scales{1, 2, 4, 8, 16};
  ModelConfig model;
  RefinerSettings refiner;
  TrainSettings train;
  guidance::GuidanceConfig guidance{};
  SampleSettings sample;
  std::uint64_t seed = 0;
  ReferenceSetup reference;

  // Throws ConfigError on inconsistent geometry or out-of-range values.
  void validate() const;

  Schedule schedule() const { return square_schedule(scales); }
  int lr_size() const { return data.hr_size / data.degradation.factor; }
  tokenizer::VaeConfig vae_config() const;
  tokenizer::TrainConfig tokenizer_train_config() const;
  arm::ArmConfig arm_config() const;
  refiner::RefinerConfig refiner_config() const;

  // Flat namespaced keys ("train.batch", "model.width", ...). Keys absent from
  // the input keep their defaults; unknown keys and wrong types throw
  // ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  std::string dump() const;

  bool operator==(const RunConfig& other) const { return to_json() == other.to_json(); }
};

// Every flat key, sorted.
std::vector<std::string> config_keys();

// ---------------------------------------------------------------- checkpoint

struct TensorEntry {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;

  bool operator==(const TensorEntry&) const = default;
};

struct Section {
  std::string name;
  std::vector<TensorEntry> entries;

  const TensorEntry& at(const std::string& entry) const;
  const TensorEntry* find(const std::string& entry) const;
  void add(std::string entry, std::vector<int> shape, std::vector<float> values);
  bool operator==(const Section&) const = default;
};

// Magic and version, the run config as text, JSON metadata, then named
// sections, each a shape table followed by a little-endian float32 payload
// and an FNV-1a 64 checksum.
struct Checkpoint {
  static constexpr char magic[8] = {'V', 'A', 'R', 'S', 'R', 'C', 'K', 'P'};
  static constexpr std::uint32_t version = 1;

  std::string config_text;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<Section> sections;

  const Section& section(const std::string& name) const;
  const Section* find(const std::string& name) const;
  Section& add_section(std::string name);
  RunConfig config() const { return RunConfig::parse(config_text); }

  std::string serialize() const;
  // Throws ParseError on malformed framing and ChecksumError on a mismatch.
  static Checkpoint deserialize(const std::string& bytes);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  bool operator==(const Checkpoint& other) const;
};

void store_params(Section& section, const ParamList<float>& params);
// Copies values into existing tensors. Throws ConfigError on a missing entry
// or a shape mismatch.
void load_params(const Section& section, const ParamList<float>& params);
void store_optimizer(Checkpoint& ckpt, const AdamW& opt);
void load_optimizer(const Checkpoint& ckpt, AdamW& opt);

nlohmann::json rng_to_json(const Rng& rng);
void rng_from_json(const nlohmann::json& j, Rng& rng);

// ---------------------------------------------------------------- model

struct Model {
  RunConfig config;
  tokenizer::Tokenizer tokenizer;
  arm::Arm arm;
  refiner::Refiner<float> refiner;
  refiner::NoiseSchedule noise;

  // Fresh weights drawn from named streams of config.seed.
  explicit Model(const RunConfig& cfg);

  ParamList<float> arm_params() const;
  ParamList<float> refiner_params() const;
  std::int64_t parameter_count() const;
};

void store_tokenizer(Checkpoint& ckpt, const tokenizer::Tokenizer& tok);
void load_tokenizer(const Checkpoint& ckpt, tokenizer::Tokenizer& tok);
void store_model(Checkpoint& ckpt, const Model& model);
// Loads every section present; the tokenizer section is mandatory.
void load_model(const Checkpoint& ckpt, Model& model);
// Rebuilds the model described by a checkpoint's own config.
Model model_from_checkpoint(const Checkpoint& ckpt);

// ---------------------------------------------------------------- data

struct Sample {
  Image hr;  // hr_size square, negative samples already degraded
  int class_id = 0;
  Quality quality = Quality::positive;
};

// Renders the training corpus (with quality labels) and the held-out
// positive-only evaluation set under data.root: train.tsv, eval.tsv and PNGs.
void make_corpus(const RunConfig& cfg);
std::filesystem::path train_manifest(const RunConfig& cfg);
std::filesystem::path eval_manifest(const RunConfig& cfg);
// Reads and preprocesses every manifest image. Throws ConfigError when the
// manifest is missing and IoError with the file name for unreadable images.
std::vector<Sample> load_samples(const std::filesystem::path& manifest, int hr_size);

// Held-out pair i: HR from the manifest, LR degraded from its own stream.
struct EvalPair {
  std::string name;
  Image hr;
  Image lr;
};
std::vector<EvalPair> make_eval_pairs(const std::vector<Sample>& samples, const std::vector<std::string>& names,
                                      const RunConfig& cfg);

// ---------------------------------------------------------------- stages

struct StageOptions {
  std::filesystem::path out_dir = "run";
  bool deterministic = false;
  // Stop (and checkpoint as incomplete) once this many steps of the stage
  // have run in total. Rerunning the stage resumes from that checkpoint.
  std::optional<int> stop_after;
  bool quiet = false;
};

struct StageReport {
  std::filesystem::path checkpoint;
  std::vector<double> losses;  // per step run in this invocation
  int steps_run = 0;
  int steps_total = 0;
  bool complete = false;
  bool resumed = false;
  double max_residual_error = 0.0;  // tokenizer: reconstruction identity check at exit
  std::int64_t negative_items = 0;  // items trained with the negative quality embedding
  double first_token_loss = 0.0;    // token cross-entropy of the first step run
  double last_token_loss = 0.0;
};

std::filesystem::path stage_checkpoint(const StageOptions& opts, const std::string& stage);

StageReport stage_tokenizer(const RunConfig& cfg, const StageOptions& opts);
StageReport stage_pretrain(const RunConfig& cfg, const StageOptions& opts);
StageReport stage_finetune(const RunConfig& cfg, const StageOptions& opts);

// Per-batch conditioning for finetuning: prefix from the bicubic-upsampled
// LR images, quality flags straight from the labels.
arm::Conditioning sr_conditioning(const arm::Arm& arm, std::span<const Image> lr_images,
                                  std::span<const Quality> quality, int hr_size);

// ---------------------------------------------------------------- inference

struct SrOptions {
  double lambda_max = 6.0;
  guidance::Ramp ramp = guidance::Ramp::linear;
  bool guide_refiner = true;
  double temperature = 1.0;
  int top_k = 0;
  bool greedy = false;
  double refiner_temperature = 1.0;
  std::uint64_t seed = 0;

  static SrOptions from_config(const RunConfig& cfg);
};

struct SrResult {
  Image hr;
  int ar_steps = 0;
  int refiner_steps = 0;
};

// LR (hr_size / factor square) -> HR. Throws ShapeError on a size mismatch
// and GenerationError on non-finite intermediates.
SrResult super_resolve(const Model& model, const Image& lr, const SrOptions& opts);

struct EvalRow {
  std::string name;
  double psnr = 0.0, ssim = 0.0;
  double bicubic_psnr = 0.0, bicubic_ssim = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double mean_psnr = 0.0, mean_ssim = 0.0;
  double mean_bicubic_psnr = 0.0, mean_bicubic_ssim = 0.0;
  int ar_steps = 0;
  int refiner_steps = 0;
  std::int64_t parameters = 0;

  double psnr_gain() const { return mean_psnr - mean_bicubic_psnr; }
  double ssim_gain() const { return mean_ssim - mean_bicubic_ssim; }
  void write_csv(const std::filesystem::path& path) const;
};

// Super-resolves every pair. Per-image SR outputs are written as PNGs into
// image_dir when it is non-empty. Throws ConfigError when the model's
// geometry does not match the pairs.
EvalReport evaluate(const Model& model, const std::vector<EvalPair>& pairs, const SrOptions& opts,
                    const std::filesystem::path& image_dir = {});

struct BenchScale {
  int scale = 0;
  int height = 0, width = 0;
  int tokens = 0;
};

struct BenchReport {
  std::vector<BenchScale> scales;
  int total_tokens = 0;
  int prefix_tokens = 0;
  long long attention_pairs = 0;  // allowed (query, key) pairs of the full sequence
  int forward_passes = 0;
  int refiner_steps = 0;
  std::int64_t tokenizer_parameters = 0, arm_parameters = 0, refiner_parameters = 0;
  std::vector<BenchScale> reference_scales;
  int reference_total_tokens = 0;
  int reference_prefix_tokens = 0;
  long long reference_attention_pairs = 0;

  void write_csv(const std::filesystem::path& path) const;
};

BenchReport bench(const Model& model);

}  // namespace varsr::pipeline
