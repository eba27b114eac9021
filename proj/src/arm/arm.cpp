#include "varsr/arm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "varsr/error.hpp"
#include "varsr/numerics/ops.hpp"

namespace varsr::arm {

void ArmConfig::validate() const {
  if (width < 1 || heads < 1 || width % heads != 0)
    throw ConfigError("arm width " + std::to_string(width) + " must be a positive multiple of heads " +
                      std::to_string(heads));
  if (head_dim() % 4 != 0) throw ConfigError("arm head width must be divisible by 4 for 2D rotary positions");
  if (blocks < 1 || mlp_ratio < 1 || vocab < 1 || latent_dim < 1 || classes < 1)
    throw ConfigError("arm needs positive blocks, mlp ratio, vocabulary, latent width and class count");
  if (encoder_widths.empty() || (1 << encoder_widths.size()) != latent_factor)
    throw ConfigError("condition encoder needs log2(latent_factor) = " + std::to_string(latent_factor) +
                      " stride-2 stages, got " + std::to_string(encoder_widths.size()));
  for (int w : encoder_widths)
    if (w < 1) throw ConfigError("condition encoder widths must be positive");
  validate_schedule(schedule);
}

long long BlockMask::allowed_pairs() const {
  long long n = 0;
  for (int lim : row_limit) n += lim;
  return n;
}

BlockMask build_block_mask(const Schedule& schedule, int prefix_len) {
  validate_schedule(schedule);
  if (prefix_len < 0) throw ShapeError("prefix length must be non-negative");
  BlockMask mask;
  mask.row_limit.assign(static_cast<size_t>(prefix_len), prefix_len);
  int seen = prefix_len;
  for (const auto& dims : schedule) {
    seen += dims.tokens();
    mask.row_limit.insert(mask.row_limit.end(), static_cast<size_t>(dims.tokens()), seen);
  }
  mask.size = seen;
  return mask;
}

namespace {

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale) {
  return ops::add(ops::mul(ops::layer_norm<float>(x, nullptr, nullptr), ops::add_scalar(scale, 1.0f)), shift);
}

Tensor level_rows(const Tensor& level_embed, int level, int count) {
  const std::vector<int> ids(static_cast<size_t>(count), level);
  return ops::index_select(level_embed, ids);
}

// Interpolated lookup of scale k's tokens (0-based) onto scale k + 1: [B, n_{k+1}, d].
Tensor next_scale_input(const Tensor& codebook, std::span<const tokenizer::TokenPyramid> pyramids,
                        const Schedule& schedule, int k) {
  std::vector<int> idx;
  for (const auto& p : pyramids) idx.insert(idx.end(), p.indices[k].begin(), p.indices[k].end());
  const int batch = static_cast<int>(pyramids.size());
  const auto up = tokenizer::interpolate_tokens(codebook, idx, batch, schedule[k], schedule[k + 1]);
  return ops::reshape(up, {batch, schedule[k + 1].tokens(), codebook.dim(1)});
}

}  // namespace

Arm::Arm(const ArmConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const int w = cfg_.width;
  int prev = cfg_.encoder_widths.front();
  encoder_.emplace_back(3, prev, 3, 1, 1, rng);
  for (int cw : cfg_.encoder_widths) {
    encoder_.emplace_back(prev, cw, 3, 2, 1, rng);
    prev = cw;
  }
  encoder_.emplace_back(prev, w, 1, 1, 0, rng);
  input_proj_ = Linear<float>(cfg_.latent_dim, w, rng);
  start_proj_ = Linear<float>(w, w, rng);
  class_start_ = init_normal<float>({cfg_.classes, w}, rng);
  // Unit-scale condition vectors keep the zero-initialized modulation layers
  // responsive from the first step.
  class_embed_ = init_normal<float>({cfg_.classes, w}, rng, 1.0);
  quality_embed_ = init_normal<float>({2, w}, rng, 1.0);
  level_embed_ = init_normal<float>({static_cast<int>(cfg_.schedule.size()) + 1, w}, rng);
  for (int b = 0; b < cfg_.blocks; ++b)
    blocks_.push_back({Linear<float>(w, 6 * w, rng, true, true), Linear<float>(w, 3 * w, rng),
                       Linear<float>(w, w, rng), Linear<float>(w, cfg_.mlp_ratio * w, rng),
                       Linear<float>(cfg_.mlp_ratio * w, w, rng)});
  final_mod_ = Linear<float>(w, 2 * w, rng, true, true);
  head_ = Linear<float>(w, cfg_.vocab, rng);

  sarope::RopeConfig rope{cfg_.head_dim(), cfg_.rope_theta, cfg_.final_dims().h, cfg_.final_dims().w};
  const sarope::SequenceLayout with_prefix{true, cfg_.final_dims(), cfg_.schedule};
  const sarope::SequenceLayout plain{false, {}, cfg_.schedule};
  tables_prefix_ = sarope::build_tables(sarope::attach_positions(with_prefix), rope);
  tables_plain_ = sarope::build_tables(sarope::attach_positions(plain), rope);
  mask_prefix_ = build_block_mask(cfg_.schedule, cfg_.prefix_tokens());
  mask_plain_ = build_block_mask(cfg_.schedule, 0);
}

Tensor Arm::encode_condition(const Tensor& lr_upsampled) const {
  const ScaleDims fin = cfg_.final_dims();
  if (lr_upsampled.rank() != 4 || lr_upsampled.dim(1) != 3 || lr_upsampled.dim(2) != fin.h * cfg_.latent_factor ||
      lr_upsampled.dim(3) != fin.w * cfg_.latent_factor)
    throw ShapeError("condition encoder expects [B, 3, " + std::to_string(fin.h * cfg_.latent_factor) + ", " +
                     std::to_string(fin.w * cfg_.latent_factor) + "], got " + to_string(lr_upsampled.shape()));
  Tensor h = ops::add_scalar(lr_upsampled, -0.5f);
  for (size_t i = 0; i + 1 < encoder_.size(); ++i) h = ops::silu(encoder_[i](h));
  h = encoder_.back()(h);
  const int batch = h.dim(0);
  return ops::reshape(ops::permute(h, {0, 2, 3, 1}), {batch, fin.tokens(), cfg_.width});
}

Tensor Arm::teacher_inputs(const Tensor& codebook, std::span<const tokenizer::TokenPyramid> pyramids) const {
  if (pyramids.empty()) throw ShapeError("teacher_inputs: empty batch");
  for (const auto& p : pyramids) {
    if (p.schedule != cfg_.schedule) throw ShapeError("token pyramid schedule does not match the model schedule");
    p.validate(codebook.dim(0));
  }
  const int batch = static_cast<int>(pyramids.size());
  if (cfg_.schedule.size() == 1) return Tensor::zeros({batch, 0, codebook.dim(1)});
  std::vector<Tensor> parts;
  for (size_t k = 0; k + 1 < cfg_.schedule.size(); ++k)
    parts.push_back(next_scale_input(codebook, pyramids, cfg_.schedule, static_cast<int>(k)));
  return parts.size() == 1 ? parts.front() : ops::concat(parts, 1);
}

void Arm::check(const Conditioning& cond) const {
  const int batch = cond.batch();
  if (batch < 1) throw ShapeError("conditioning needs at least one quality flag");
  if (cond.prefix.defined()) {
    if (cond.prefix.rank() != 3 || cond.prefix.dim(0) != batch || cond.prefix.dim(1) != cfg_.prefix_tokens() ||
        cond.prefix.dim(2) != cfg_.width)
      throw ShapeError("condition tokens must be [" + std::to_string(batch) + ", " +
                       std::to_string(cfg_.prefix_tokens()) + ", " + std::to_string(cfg_.width) + "], got " +
                       to_string(cond.prefix.shape()));
  } else if (cond.classes.empty()) {
    throw ShapeError("conditioning needs condition tokens or class ids");
  }
  if (!cond.classes.empty()) {
    if (static_cast<int>(cond.classes.size()) != batch) throw ShapeError("one class id per item required");
    for (int c : cond.classes)
      if (c < 0 || c >= cfg_.classes)
        throw IndexError("class id " + std::to_string(c) + " outside [0, " + std::to_string(cfg_.classes) + ")");
  }
}

Tensor Arm::modulation_input(const Conditioning& cond, Quality forced, bool use_forced) const {
  std::vector<int> ids;
  for (Quality q : cond.quality) ids.push_back((use_forced ? forced : q) == Quality::positive ? 0 : 1);
  Tensor c = ops::index_select(quality_embed_, ids);
  if (!cond.classes.empty()) c = ops::add(c, ops::index_select(class_embed_, cond.classes));
  return ops::reshape(c, {cond.batch(), 1, cfg_.width});
}

Tensor Arm::start_token(const Conditioning& cond) const {
  Tensor start = cond.prefix.defined() ? start_proj_(ops::mean_axis(cond.prefix, 1, true))
                                       : ops::reshape(ops::index_select(class_start_, cond.classes),
                                                      {cond.batch(), 1, cfg_.width});
  return ops::add(start, level_rows(level_embed_, 1, 1));
}

Tensor Arm::embed_scales(const Tensor& scale_inputs, int first_scale) const {
  std::vector<int> levels;
  for (int k = first_scale; k <= static_cast<int>(cfg_.schedule.size()) &&
                            static_cast<int>(levels.size()) < scale_inputs.dim(1);
       ++k)
    levels.insert(levels.end(), static_cast<size_t>(cfg_.schedule[k - 1].tokens()), k);
  if (static_cast<int>(levels.size()) != scale_inputs.dim(1))
    throw ShapeError("scale inputs do not cover whole scales from scale " + std::to_string(first_scale));
  return ops::add(input_proj_(scale_inputs), ops::index_select(level_embed_, levels));
}

Tensor Arm::run(Tensor x, const Tensor& mod, int offset, const sarope::RotationTables& tables, const BlockMask& mask,
                Cache* cache) const {
  const int batch = x.dim(0), n = x.dim(1), w = cfg_.width, heads = cfg_.heads, hd = cfg_.head_dim();
  const std::span<const int> limits(mask.row_limit.data() + offset, static_cast<size_t>(n));
  const size_t pairs = static_cast<size_t>(tables.pairs);
  const std::span<const float> cos(tables.cos.data() + offset * pairs, n * pairs);
  const std::span<const float> sin(tables.sin.data() + offset * pairs, n * pairs);
  const Tensor sc = ops::silu(mod);
  for (size_t b = 0; b < blocks_.size(); ++b) {
    const Block& blk = blocks_[b];
    const Tensor m = blk.modulation(sc);
    const Tensor h = modulate(x, ops::slice(m, 2, 0, w), ops::slice(m, 2, w, w));
    const Tensor qkv = ops::permute(ops::reshape(blk.qkv(h), {batch, n, 3, heads, hd}), {2, 0, 3, 1, 4});
    auto head_part = [&](int i) { return ops::reshape(ops::slice(qkv, 0, i, 1), {batch, heads, n, hd}); };
    const Tensor q = ops::rotate_pairs(head_part(0), cos, sin);
    Tensor k = ops::rotate_pairs(head_part(1), cos, sin);
    Tensor v = head_part(2);
    if (cache) {
      if (cache->keys.size() > b) {
        k = ops::concat<float>({cache->keys[b], k}, 2);
        v = ops::concat<float>({cache->values[b], v}, 2);
        cache->keys[b] = k;
        cache->values[b] = v;
      } else {
        cache->keys.push_back(k);
        cache->values.push_back(v);
      }
    }
    const Tensor att = ops::attention(q, k, v, limits);
    const Tensor merged = blk.proj(ops::reshape(ops::permute(att, {0, 2, 1, 3}), {batch, n, w}));
    x = ops::add(x, ops::mul(ops::add_scalar(ops::slice(m, 2, 2 * w, w), 1.0f), merged));
    const Tensor h2 = modulate(x, ops::slice(m, 2, 3 * w, w), ops::slice(m, 2, 4 * w, w));
    const Tensor ff = blk.fc2(ops::gelu(blk.fc1(h2)));
    x = ops::add(x, ops::mul(ops::add_scalar(ops::slice(m, 2, 5 * w, w), 1.0f), ff));
  }
  if (cache) cache->length += n;
  const Tensor fm = final_mod_(sc);
  return modulate(x, ops::slice(fm, 2, 0, w), ops::slice(fm, 2, w, w));
}

ForwardResult Arm::forward_inputs(const Tensor& scale_inputs, const Conditioning& cond) const {
  check(cond);
  const int batch = cond.batch();
  const int total = total_tokens(cfg_.schedule);
  const int first = cfg_.schedule.front().tokens();
  if (scale_inputs.rank() != 3 || scale_inputs.dim(0) != batch || scale_inputs.dim(1) != total - first ||
      scale_inputs.dim(2) != cfg_.latent_dim)
    throw ShapeError("scale inputs must be [" + std::to_string(batch) + ", " + std::to_string(total - first) + ", " +
                     std::to_string(cfg_.latent_dim) + "], got " + to_string(scale_inputs.shape()));
  const bool has_prefix = cond.prefix.defined();
  const int prefix = has_prefix ? cfg_.prefix_tokens() : 0;
  std::vector<Tensor> parts;
  if (has_prefix) parts.push_back(ops::add(cond.prefix, level_rows(level_embed_, 0, prefix)));
  parts.push_back(start_token(cond));
  if (scale_inputs.dim(1) > 0) parts.push_back(embed_scales(scale_inputs, 2));
  const Tensor x = parts.size() == 1 ? parts.front() : ops::concat(parts, 1);
  const Tensor out = run(x, modulation_input(cond, Quality::positive, false), 0,
                         has_prefix ? tables_prefix_ : tables_plain_, has_prefix ? mask_prefix_ : mask_plain_, nullptr);
  const int last = cfg_.final_dims().tokens();
  ForwardResult res;
  res.logits = head_(ops::slice(out, 1, prefix, total));
  res.hidden_final = ops::slice(out, 1, prefix + total - last, last);
  return res;
}

ForwardResult Arm::forward_train(const Tensor& codebook, std::span<const tokenizer::TokenPyramid> pyramids,
                                 const Conditioning& cond) const {
  if (static_cast<int>(pyramids.size()) != cond.batch())
    throw ShapeError("one pyramid per conditioning item required");
  return forward_inputs(teacher_inputs(codebook, pyramids), cond);
}

struct Arm::Stream {
  Conditioning cond;
  Tensor mod;
  Cache cache;
  Tensor hidden;
};

Generation Arm::generate(const Tensor& codebook, const Conditioning& cond, const GenerateOptions& opts,
                         Rng& rng) const {
  NoGradGuard guard;
  check(cond);
  if (codebook.rank() != 2 || codebook.dim(0) != cfg_.vocab || codebook.dim(1) != cfg_.latent_dim)
    throw ShapeError("codebook must be [" + std::to_string(cfg_.vocab) + ", " + std::to_string(cfg_.latent_dim) +
                     "], got " + to_string(codebook.shape()));
  const int batch = cond.batch();
  const int scales = static_cast<int>(cfg_.schedule.size());
  const bool has_prefix = cond.prefix.defined();
  const int prefix = has_prefix ? cfg_.prefix_tokens() : 0;
  const auto& tables = has_prefix ? tables_prefix_ : tables_plain_;
  const auto& mask = has_prefix ? mask_prefix_ : mask_plain_;
  const auto offsets = scale_offsets(cfg_.schedule);

  std::vector<Stream> streams(opts.guidance.enabled() || opts.force_negative_branch ? 2 : 1);
  for (size_t s = 0; s < streams.size(); ++s) {
    streams[s].cond = cond;
    streams[s].mod = modulation_input(cond, s == 0 ? Quality::positive : Quality::negative, true);
  }

  Generation gen;
  gen.pyramids.resize(static_cast<size_t>(batch));
  for (auto& p : gen.pyramids) p.schedule = cfg_.schedule;
  for (int k = 0; k < scales; ++k) {
    const int n = cfg_.schedule[k].tokens();
    std::vector<Tensor> logits;
    for (auto& st : streams) {
      Tensor x;
      int offset = 0;
      if (k == 0) {
        std::vector<Tensor> parts;
        if (has_prefix) parts.push_back(ops::add(cond.prefix, level_rows(level_embed_, 0, prefix)));
        parts.push_back(start_token(cond));
        x = parts.size() == 1 ? parts.front() : ops::concat(parts, 1);
      } else {
        x = embed_scales(next_scale_input(codebook, gen.pyramids, cfg_.schedule, k - 1), k + 1);
        offset = prefix + offsets[k];
      }
      Tensor out = run(x, st.mod, offset, tables, mask, &st.cache);
      if (out.dim(1) != n) out = ops::slice(out, 1, out.dim(1) - n, n);
      if (k + 1 == scales) st.hidden = out;
      logits.push_back(head_(out));
    }
    ++gen.forward_passes;
    if (opts.record_logits) gen.logits.push_back(logits[0].clone());

    std::vector<float> guided(logits[0].data().begin(), logits[0].data().end());
    if (streams.size() == 2) {
      const double lambda = guidance::lambda_schedule(k + 1, scales, opts.guidance);
      guidance::cfg_combine_inplace<float>(guided, logits[1].data(), static_cast<float>(lambda));
    }
    const auto vocab = static_cast<size_t>(cfg_.vocab);
    for (int b = 0; b < batch; ++b) {
      std::vector<int> idx(static_cast<size_t>(n));
      for (int t = 0; t < n; ++t) {
        const std::span<const float> row(guided.data() + (static_cast<size_t>(b) * n + t) * vocab, vocab);
        idx[t] = sample_token(row, opts.temperature, opts.top_k, opts.greedy, rng);
      }
      gen.pyramids[b].indices.push_back(std::move(idx));
    }
  }
  gen.hidden_pos = streams[0].hidden;
  if (streams.size() == 2) gen.hidden_neg = streams[1].hidden;
  return gen;
}

void Arm::collect(ParamList<float>& out, const std::string& prefix) const {
  for (size_t i = 0; i < encoder_.size(); ++i) encoder_[i].collect(out, prefix + ".encoder" + std::to_string(i));
  input_proj_.collect(out, prefix + ".input_proj");
  start_proj_.collect(out, prefix + ".start_proj");
  out.push_back({prefix + ".class_start", class_start_, false});
  out.push_back({prefix + ".class_embed", class_embed_, false});
  out.push_back({prefix + ".quality_embed", quality_embed_, false});
  out.push_back({prefix + ".level_embed", level_embed_, false});
  for (size_t b = 0; b < blocks_.size(); ++b) {
    const std::string p = prefix + ".block" + std::to_string(b);
    blocks_[b].modulation.collect(out, p + ".mod");
    blocks_[b].qkv.collect(out, p + ".qkv");
    blocks_[b].proj.collect(out, p + ".proj");
    blocks_[b].fc1.collect(out, p + ".fc1");
    blocks_[b].fc2.collect(out, p + ".fc2");
  }
  final_mod_.collect(out, prefix + ".final_mod");
  head_.collect(out, prefix + ".head");
}

std::vector<int> flat_targets(std::span<const tokenizer::TokenPyramid> pyramids) {
  std::vector<int> out;
  for (const auto& p : pyramids) {
    const auto f = p.flat();
    out.insert(out.end(), f.begin(), f.end());
  }
  return out;
}

Tensor token_loss(const Tensor& logits, std::span<const int> targets) {
  if (logits.rank() != 3) throw ShapeError("token logits must be [B, N, V], got " + to_string(logits.shape()));
  const int rows = logits.dim(0) * logits.dim(1);
  if (static_cast<int>(targets.size()) != rows)
    throw ShapeError("expected " + std::to_string(rows) + " token targets, got " + std::to_string(targets.size()));
  return ops::cross_entropy(ops::reshape(logits, {rows, logits.dim(2)}), targets);
}

int sample_token(std::span<const float> logits, double temperature, int top_k, bool greedy, Rng& rng) {
  if (logits.empty()) throw GenerationError("empty logit row");
  for (float v : logits)
    if (!std::isfinite(v)) throw GenerationError("non-finite token logit");
  const auto argmax = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  if (greedy || temperature <= 0.0) return argmax;
  const int vocab = static_cast<int>(logits.size());
  float threshold = -std::numeric_limits<float>::infinity();
  if (top_k > 0 && top_k < vocab) {
    std::vector<float> sorted(logits.begin(), logits.end());
    std::nth_element(sorted.begin(), sorted.begin() + (top_k - 1), sorted.end(), std::greater<float>());
    threshold = sorted[top_k - 1];
  }
  const double peak = logits[argmax];
  std::vector<double> weight(logits.size(), 0.0);
  double total = 0.0;
  for (int i = 0; i < vocab; ++i)
    if (logits[i] >= threshold) total += weight[i] = std::exp((logits[i] - peak) / temperature);
  double u = rng.uniform() * total;
  for (int i = 0; i < vocab; ++i) {
    if (weight[i] == 0.0) continue;
    if (u < weight[i]) return i;
    u -= weight[i];
  }
  return argmax;
}

}  // namespace varsr::arm
