#pragma once

#include <span>
#include <string>
#include <vector>

#include "varsr/core/quality.hpp"
#include "varsr/core/schedule.hpp"
#include "varsr/guidance.hpp"
#include "varsr/numerics/layers.hpp"
#include "varsr/numerics/rng.hpp"
#include "varsr/sarope.hpp"
#include "varsr/tokenizer.hpp"

// Next-scale autoregressive transformer: LR prefix tokens, block-causal
// attention with scale-aligned rotary positions, AdaLN quality control and
// KV-cached generation.
namespace varsr::arm {

struct ArmConfig {
  int width = 128;
  int heads = 4;
  int blocks = 4;
  int mlp_ratio = 4;
  int vocab = 512;
  int latent_dim = 16;
  int classes = 4;
  int latent_factor = 4;                 // HR pixels per final-scale token along each axis
  std::vector<int> encoder_widths{32, 64};  // one stride-2 stage per entry
  double rope_theta = 10000.0;
  Schedule schedule = square_schedule({1, 2, 4, 8, 16});

  void validate() const;
  int head_dim() const { return width / heads; }
  ScaleDims final_dims() const { return schedule.back(); }
  int prefix_tokens() const { return final_dims().tokens(); }
};

// Row r of the sequence may attend to columns [0, row_limit[r]).
struct BlockMask {
  int size = 0;
  std::vector<int> row_limit;

  bool allowed(int row, int col) const { return col < row_limit[row]; }
  long long allowed_pairs() const;
};

// Prefix rows see the prefix only; a scale-k row sees the prefix and every
// token of scales 1..k.
BlockMask build_block_mask(const Schedule& schedule, int prefix_len);

// Per-item conditioning. `prefix` holds encoded LR tokens [B, P, width] and
// is undefined in class-conditional mode, where `classes` supplies the start
// token and is added to the modulation vector.
struct Conditioning {
  Tensor prefix;
  std::vector<Quality> quality;
  std::vector<int> classes;

  int batch() const { return static_cast<int>(quality.size()); }
};

struct ForwardResult {
  Tensor logits;        // [B, N, vocab] over all scales
  Tensor hidden_final;  // [B, h_K * w_K, width], normalized final-scale states
};

struct GenerateOptions {
  double temperature = 1.0;
  int top_k = 0;  // 0 keeps the full vocabulary
  bool greedy = false;
  guidance::GuidanceConfig guidance{};
  bool force_negative_branch = false;  // run the negative stream even at lambda_max = 0
  bool record_logits = false;
};

struct Generation {
  std::vector<tokenizer::TokenPyramid> pyramids;
  Tensor hidden_pos;  // [B, h_K * w_K, width]
  Tensor hidden_neg;  // undefined unless the negative stream ran
  int forward_passes = 0;
  std::vector<Tensor> logits;  // per scale [B, n_k, vocab], positive stream, before guidance
};

class Arm {
 public:
  Arm() = default;
  Arm(const ArmConfig& cfg, Rng& rng);

  // Upsampled LR [B, 3, H, W] in [0, 1] -> condition tokens [B, P, width].
  // Throws ShapeError unless H, W equal the final-scale dims times the factor.
  Tensor encode_condition(const Tensor& lr_upsampled) const;

  // Teacher-forcing inputs for scales 2..K: the interpolated lookup of the
  // previous scale's tokens, [B, N - n_1, latent_dim].
  Tensor teacher_inputs(const Tensor& codebook, std::span<const tokenizer::TokenPyramid> pyramids) const;

  // Full-sequence pass from prepared inputs.
  ForwardResult forward_inputs(const Tensor& scale_inputs, const Conditioning& cond) const;
  ForwardResult forward_train(const Tensor& codebook, std::span<const tokenizer::TokenPyramid> pyramids,
                              const Conditioning& cond) const;

  // K forward passes over cached keys and values. Quality flags in `cond`
  // are ignored: the positive stream uses the positive embedding and the
  // negative stream the negative one.
  Generation generate(const Tensor& codebook, const Conditioning& cond, const GenerateOptions& opts, Rng& rng) const;

  const ArmConfig& config() const { return cfg_; }
  void collect(ParamList<float>& out, const std::string& prefix) const;

 private:
  struct Block {
    Linear<float> modulation;  // silu(c) -> 6 * width offsets
    Linear<float> qkv, proj, fc1, fc2;
  };
  struct Cache {
    std::vector<Tensor> keys, values;
    int length = 0;
  };
  struct Stream;

  Tensor modulation_input(const Conditioning& cond, Quality forced, bool use_forced) const;
  Tensor start_token(const Conditioning& cond) const;
  // Runs the blocks over x [B, n, width] occupying sequence rows
  // [offset, offset + n); returns the final normalized states.
  Tensor run(Tensor x, const Tensor& mod, int offset, const sarope::RotationTables& tables, const BlockMask& mask,
             Cache* cache) const;
  Tensor embed_scales(const Tensor& scale_inputs, int first_scale) const;
  void check(const Conditioning& cond) const;

  ArmConfig cfg_;
  std::vector<Conv2d<float>> encoder_;
  Linear<float> input_proj_, start_proj_;
  Tensor class_start_;  // [classes, width]
  Tensor class_embed_;  // [classes, width]
  Tensor quality_embed_;  // [2, width]: positive, negative
  Tensor level_embed_;  // [K + 1, width]: prefix, scales 1..K
  std::vector<Block> blocks_;
  Linear<float> final_mod_, head_;
  sarope::RotationTables tables_prefix_, tables_plain_;
  BlockMask mask_prefix_, mask_plain_;
};

// Mean cross-entropy over every token of every scale. logits [B, N, V],
// targets B * N indices in pyramid order.
Tensor token_loss(const Tensor& logits, std::span<const int> targets);
std::vector<int> flat_targets(std::span<const tokenizer::TokenPyramid> pyramids);

// Draws one index from a logit row: greedy argmax, or temperature-scaled
// softmax restricted to the top_k largest entries. Throws GenerationError on
// non-finite logits.
int sample_token(std::span<const float> logits, double temperature, int top_k, bool greedy, Rng& rng);

}  // namespace varsr::arm
