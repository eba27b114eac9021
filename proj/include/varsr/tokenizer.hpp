#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "varsr/core/schedule.hpp"
#include "varsr/numerics/layers.hpp"
#include "varsr/numerics/optim.hpp"
#include "varsr/numerics/rng.hpp"

// Convolutional autoencoder plus the multi-scale residual quantizer. Latent
// maps are channel-last: one image is h x w x d, a batch is [B, h, w, d].
namespace varsr::tokenizer {

// Per-scale index maps r_1..r_K, each row-major.
struct TokenPyramid {
  Schedule schedule;
  std::vector<std::vector<int>> indices;

  int scales() const { return static_cast<int>(schedule.size()); }
  // Throws ShapeError when a map does not match its scale, IndexError when an
  // index falls outside [0, vocab).
  void validate(int vocab) const;
  // All scales concatenated, coarse to fine.
  std::vector<int> flat() const;
};

// Rows of `codebook` [V, d] selected by idx -> [idx.size(), d]. Differentiable
// with respect to the codebook.
template <typename T>
BasicTensor<T> lookup(const BasicTensor<T>& codebook, std::span<const int> idx);

// Nearest codebook row to `vec` by squared L2; lowest index wins ties.
template <typename T>
int nearest_code(std::span<const T> vec, std::span<const T> codebook, int vocab);

// Area-average pooling of an h x w x d map to out_h x out_w (adaptive windows).
template <typename T>
std::vector<T> area_downsample(std::span<const T> map, ScaleDims from, int dim, ScaleDims to);

// Looks up a batch of index maps at `from` and bilinearly resizes the
// embeddings (aligned corners) to `to`: idx holds batch * from.tokens()
// entries, the result is [batch, to.h, to.w, d].
template <typename T>
BasicTensor<T> interpolate_tokens(const BasicTensor<T>& codebook, std::span<const int> idx, int batch, ScaleDims from,
                                  ScaleDims to);

template <typename T>
struct Quantized {
  TokenPyramid pyramid;
  std::vector<T> quantized_sum;  // sum of upsampled per-scale embeddings, h x w x d
  std::vector<T> residual;       // z, so that quantized_sum + residual == f
  // Residual targets seen by each scale (pooled to h_k x w_k), used for the
  // codebook EMA update.
  std::vector<std::vector<T>> targets;
};

// Greedy residual quantization of one latent f (h x w x d, h x w equal to the
// last scale). Throws ConfigError for an empty codebook.
template <typename T>
Quantized<T> quantize_pyramid(std::span<const T> f, int dim, const BasicTensor<T>& codebook, const Schedule& schedule);

// Sum over kept scales of upsampled lookups, accumulated in the same order as
// quantize_pyramid. An empty `keep` keeps every scale.
template <typename T>
std::vector<T> reconstruct_sum(const TokenPyramid& pyramid, const BasicTensor<T>& codebook,
                               std::span<const char> keep = {});

// Differentiable version of reconstruct_sum over a batch of pyramids sharing
// one schedule: [B, h, w, d].
Tensor reconstruct_sum_batch(std::span<const TokenPyramid> pyramids, const Tensor& codebook,
                             std::span<const char> keep = {});

// z of a 32-bit quantization held in 64 bits. The difference of two floats is
// exact in double (barring exponent gaps beyond 29 binades), so
// double(sum) + z == double(f) holds bit-exactly.
std::vector<double> widened_residual(std::span<const float> f, std::span<const float> sum);

// Keep mask over K scales: each scale k < K dropped independently with
// probability p_d (one draw per scale, coarse to fine); the last scale is
// always kept.
std::vector<char> scale_dropout(int scales, double drop_prob, Rng& rng);

// ---------------------------------------------------------------- codebook

struct EmaConfig {
  double decay = 0.99;
  double laplace = 1e-5;
  int dead_patience = 200;
};

struct Codebook {
  Tensor embed;  // [V, d]
  std::vector<double> cluster_size;
  std::vector<double> embed_sum;  // [V, d]
  std::vector<int> idle_steps;

  Codebook() = default;
  Codebook(int vocab, int dim, Rng& rng);
  int vocab() const { return embed.dim(0); }
  int dim() const { return embed.dim(1); }
  // Resets the EMA statistics to match the current embeddings.
  void sync_statistics();
};

// One EMA step from n assigned vectors (n x d). Codes idle for longer than the
// patience window are re-seeded from random rows of `vectors`. Returns the
// number of re-seeded codes. decay >= 1 freezes the codebook.
int ema_update(Codebook& book, std::span<const float> vectors, std::span<const int> assign, const EmaConfig& cfg,
               Rng& rng);

// ---------------------------------------------------------------- autoencoder

struct VaeConfig {
  std::vector<int> widths{16, 32, 64};  // one stride-2 stage between consecutive widths
  int latent_dim = 16;

  int factor() const { return 1 << (static_cast<int>(widths.size()) - 1); }
  void validate() const;
};

template <typename T>
class Vae {
 public:
  Vae() = default;
  Vae(const VaeConfig& cfg, Rng& rng);

  // [B,3,H,W] in [0,1] -> [B, H/f, W/f, d]. Throws ShapeError when H or W is
  // not divisible by the factor.
  BasicTensor<T> encode(const BasicTensor<T>& images) const;
  // [B, h, w, d] -> [B,3,h*f,w*f], unclamped.
  BasicTensor<T> decode(const BasicTensor<T>& latent) const;

  const VaeConfig& config() const { return cfg_; }
  void collect(ParamList<T>& out, const std::string& prefix) const;

 private:
  struct Stage {
    Conv2d<T> resample;
    Conv2d<T> residual;
  };
  VaeConfig cfg_;
  Conv2d<T> enc_in_, enc_out_;
  std::vector<Stage> enc_;
  Conv2d<T> dec_in_, dec_mid_, dec_out_;
  std::vector<Stage> dec_;
};

extern template class Vae<float>;
extern template class Vae<double>;

struct Tokenizer {
  Vae<float> vae;
  Codebook codebook;
  Schedule schedule;

  Tokenizer() = default;
  Tokenizer(const VaeConfig& vae_cfg, int vocab, Schedule schedule, Rng& rng);

  ScaleDims latent_dims() const { return schedule.back(); }
  int latent_dim() const { return codebook.dim(); }
  // Encodes and quantizes a batch; one Quantized per image.
  std::vector<Quantized<float>> tokenize(const Tensor& images) const;
  // Decodes a batch of channel-last latents given as flat h*w*d vectors.
  Tensor decode_latents(std::span<const std::vector<float>> latents) const;
  ParamList<float> vae_params() const;
};

// ---------------------------------------------------------------- training

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double bypass_prob = 0.5;
  double commitment = 0.25;
  EmaConfig ema{};
  double drop_prob = 0.1;
  double finetune_lr = 1e-3;
};

struct StepStats {
  double loss = 0.0;
  double recon = 0.0;
  double commit = 0.0;
  bool bypassed = false;
  int reseeded = 0;
};

// Autoencoder + EMA codebook training. Each step bypasses quantization with
// probability bypass_prob; otherwise the decoder sees the straight-through
// quantized sum and the encoder receives the commitment loss.
class TokenizerTrainer {
 public:
  TokenizerTrainer(Tokenizer& tok, const TrainConfig& cfg, std::uint64_t seed);

  StepStats step(const Tensor& images);
  std::int64_t steps_done() const { return steps_; }

  AdamW& optimizer() { return opt_; }
  Rng& rng() { return rng_; }
  void set_steps_done(std::int64_t n) { steps_ = n; }

 private:
  Tokenizer& tok_;
  TrainConfig cfg_;
  AdamW opt_;
  Rng rng_;
  std::int64_t steps_ = 0;
};

// Scale-dropout finetuning: encoder and decoder frozen, the codebook trained
// by gradient so that the kept scales alone reconstruct the latent.
class DropoutFinetuner {
 public:
  DropoutFinetuner(Tokenizer& tok, const TrainConfig& cfg, std::uint64_t seed);
  ~DropoutFinetuner();
  DropoutFinetuner(const DropoutFinetuner&) = delete;
  DropoutFinetuner& operator=(const DropoutFinetuner&) = delete;

  StepStats step(const Tensor& images);
  std::int64_t steps_done() const { return steps_; }
  AdamW& optimizer() { return opt_; }
  Rng& rng() { return rng_; }
  void set_steps_done(std::int64_t n) { steps_ = n; }

 private:
  Tokenizer& tok_;
  TrainConfig cfg_;
  AdamW opt_;
  Rng rng_;
  std::int64_t steps_ = 0;
};

}  // namespace varsr::tokenizer
