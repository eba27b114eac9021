#include <spdlog/spdlog.h>

#include "varsr/error.hpp"
#include "varsr/numerics/ops.hpp"
#include "varsr/tokenizer.hpp"

namespace varsr::tokenizer {

Tokenizer::Tokenizer(const VaeConfig& vae_cfg, int vocab, Schedule sched, Rng& rng)
    : vae(vae_cfg, rng), codebook(vocab, vae_cfg.latent_dim, rng), schedule(std::move(sched)) {
  validate_schedule(schedule);
}

std::vector<Quantized<float>> Tokenizer::tokenize(const Tensor& images) const {
  NoGradGuard guard;
  const auto f = vae.encode(images);
  const ScaleDims lat{f.dim(1), f.dim(2)};
  if (!(lat == latent_dims()))
    throw ShapeError("encoder produced a " + std::to_string(lat.h) + "x" + std::to_string(lat.w) +
                     " latent but the schedule ends at " + std::to_string(latent_dims().h) + "x" +
                     std::to_string(latent_dims().w));
  const size_t per = static_cast<size_t>(lat.tokens()) * latent_dim();
  std::vector<Quantized<float>> out;
  out.reserve(static_cast<size_t>(f.dim(0)));
  for (int b = 0; b < f.dim(0); ++b)
    out.push_back(quantize_pyramid<float>(f.data().subspan(b * per, per), latent_dim(), codebook.embed, schedule));
  return out;
}

Tensor Tokenizer::decode_latents(std::span<const std::vector<float>> latents) const {
  if (latents.empty()) throw ShapeError("decode_latents: empty batch");
  const ScaleDims lat = latent_dims();
  const size_t per = static_cast<size_t>(lat.tokens()) * latent_dim();
  std::vector<float> flat;
  flat.reserve(per * latents.size());
  for (const auto& l : latents) {
    if (l.size() != per) throw ShapeError("decode_latents: latent size mismatch");
    flat.insert(flat.end(), l.begin(), l.end());
  }
  return vae.decode(Tensor::from({static_cast<int>(latents.size()), lat.h, lat.w, latent_dim()}, std::move(flat)));
}

ParamList<float> Tokenizer::vae_params() const {
  ParamList<float> p;
  vae.collect(p, "vae");
  return p;
}

namespace {

// Seeds every code from a random site of a random image's latent pooled to a
// random scale, so training starts with codes inside the data's range.
void seed_codebook(Codebook& book, const Tensor& f, const Schedule& schedule, Rng& rng) {
  const int batch = f.dim(0), d = book.dim();
  const ScaleDims frame = schedule.back();
  const size_t per = static_cast<size_t>(frame.tokens()) * d;
  auto data = book.embed.data();
  for (int c = 0; c < book.vocab(); ++c) {
    const auto b = static_cast<size_t>(rng.below(static_cast<std::uint64_t>(batch)));
    const auto k = static_cast<size_t>(rng.below(schedule.size()));
    const auto pooled = area_downsample<float>(f.data().subspan(b * per, per), frame, d, schedule[k]);
    const auto site = static_cast<size_t>(rng.below(static_cast<std::uint64_t>(schedule[k].tokens())));
    std::copy_n(pooled.begin() + static_cast<std::ptrdiff_t>(site * d), d, data.begin() + static_cast<std::ptrdiff_t>(c) * d);
  }
  book.sync_statistics();
}

}  // namespace

TokenizerTrainer::TokenizerTrainer(Tokenizer& tok, const TrainConfig& cfg, std::uint64_t seed)
    : tok_(tok),
      cfg_(cfg),
      opt_(tok.vae_params(), AdamWConfig{.lr = cfg.lr, .weight_decay = cfg.weight_decay}),
      rng_(Rng::stream(seed, "tokenizer")) {
  if (!(cfg.bypass_prob >= 0.0 && cfg.bypass_prob <= 1.0)) throw ConfigError("bypass probability must lie in [0, 1]");
}

StepStats TokenizerTrainer::step(const Tensor& images) {
  StepStats stats;
  opt_.zero_grad();
  const auto f = tok_.vae.encode(images);
  if (steps_ == 0) seed_codebook(tok_.codebook, f, tok_.schedule, rng_);
  stats.bypassed = rng_.bernoulli(cfg_.bypass_prob);

  Tensor decoder_in = f;
  Tensor commit;
  std::vector<float> targets;
  std::vector<int> assign;
  if (!stats.bypassed) {
    const int d = tok_.latent_dim();
    const size_t per = static_cast<size_t>(tok_.latent_dims().tokens()) * d;
    std::vector<float> quantized(f.data().size());
    for (int b = 0; b < f.dim(0); ++b) {
      auto q = quantize_pyramid<float>(f.data().subspan(b * per, per), d, tok_.codebook.embed, tok_.schedule);
      std::copy(q.quantized_sum.begin(), q.quantized_sum.end(), quantized.begin() + static_cast<std::ptrdiff_t>(b * per));
      for (size_t k = 0; k < q.targets.size(); ++k) {
        targets.insert(targets.end(), q.targets[k].begin(), q.targets[k].end());
        assign.insert(assign.end(), q.pyramid.indices[k].begin(), q.pyramid.indices[k].end());
      }
    }
    // Straight-through: forward value is the quantized sum, gradient flows to f.
    std::vector<float> shift(quantized.size());
    for (size_t i = 0; i < shift.size(); ++i) shift[i] = quantized[i] - f.data()[i];
    decoder_in = ops::add(f, Tensor::from(f.shape(), std::move(shift)));
    commit = ops::mse_loss(f, Tensor::from(f.shape(), std::move(quantized)));
  }
  const auto recon = ops::mse_loss(tok_.vae.decode(decoder_in), images);
  auto loss = commit.defined() ? ops::add(recon, ops::mul_scalar(commit, static_cast<float>(cfg_.commitment))) : recon;
  loss.backward();
  if (!opt_.step()) spdlog::warn("tokenizer step {}: non-finite gradient, update skipped", steps_);
  if (!stats.bypassed) stats.reseeded = ema_update(tok_.codebook, targets, assign, cfg_.ema, rng_);

  stats.loss = loss.item();
  stats.recon = recon.item();
  stats.commit = commit.defined() ? commit.item() : 0.0;
  ++steps_;
  return stats;
}

DropoutFinetuner::DropoutFinetuner(Tokenizer& tok, const TrainConfig& cfg, std::uint64_t seed)
    : tok_(tok), cfg_(cfg), rng_(Rng::stream(seed, "dropout")) {
  tok_.codebook.embed.set_requires_grad(true);
  opt_ = AdamW({{"codebook", tok_.codebook.embed, false}}, AdamWConfig{.lr = cfg.finetune_lr});
}

DropoutFinetuner::~DropoutFinetuner() {
  tok_.codebook.embed.set_requires_grad(false);
  tok_.codebook.embed.zero_grad();
  tok_.codebook.sync_statistics();
}

StepStats DropoutFinetuner::step(const Tensor& images) {
  StepStats stats;
  opt_.zero_grad();
  Tensor f;
  std::vector<TokenPyramid> pyramids;
  {
    NoGradGuard guard;
    f = tok_.vae.encode(images);
    const int d = tok_.latent_dim();
    const size_t per = static_cast<size_t>(tok_.latent_dims().tokens()) * d;
    for (int b = 0; b < f.dim(0); ++b)
      pyramids.push_back(
          quantize_pyramid<float>(f.data().subspan(b * per, per), d, tok_.codebook.embed, tok_.schedule).pyramid);
  }
  const auto keep = scale_dropout(static_cast<int>(tok_.schedule.size()), cfg_.drop_prob, rng_);
  auto loss = ops::mse_loss(reconstruct_sum_batch(pyramids, tok_.codebook.embed, keep), f);
  loss.backward();
  if (!opt_.step()) spdlog::warn("dropout finetune step {}: non-finite gradient, update skipped", steps_);
  stats.loss = stats.recon = loss.item();
  ++steps_;
  return stats;
}

}  // namespace varsr::tokenizer
