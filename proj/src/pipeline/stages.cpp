#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include <spdlog/spdlog.h>

#include "varsr/error.hpp"
#include "varsr/pipeline.hpp"

namespace varsr::pipeline {

namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

// Loss curve CSV. On resume the rows past the checkpointed step are dropped so
// an interrupted run ends with the same file as an uninterrupted one. Wall
// time is only recorded outside deterministic mode.
class LossLog {
 public:
  LossLog(std::filesystem::path path, std::string header, bool deterministic, int keep_rows)
      : path_(std::move(path)), deterministic_(deterministic), start_(Clock::now()) {
    std::vector<std::string> kept;
    if (keep_rows > 0) {
      std::ifstream in(path_);
      std::string line;
      std::getline(in, line);
      while (static_cast<int>(kept.size()) < keep_rows && std::getline(in, line)) kept.push_back(line);
    }
    out_.open(path_, std::ios::trunc);
    if (!out_) throw IoError("cannot write " + path_.string());
    out_ << header << (deterministic_ ? "" : ",seconds") << "\n";
    for (const auto& l : kept) out_ << l << "\n";
  }

  void row(const std::string& fields) {
    out_ << fields;
    if (!deterministic_) out_ << "," << std::chrono::duration<double>(Clock::now() - start_).count();
    out_ << "\n";
  }
  void flush() { out_.flush(); }

 private:
  std::filesystem::path path_;
  bool deterministic_;
  Clock::time_point start_;
  std::ofstream out_;
};

std::string fmt_double(double v) {
  std::ostringstream ss;
  ss.precision(9);
  ss << v;
  return ss.str();
}

// Uniform batch indices from a resumable stream.
std::vector<int> draw_batch(Rng& rng, int n, int batch) {
  std::vector<int> idx(static_cast<size_t>(batch));
  for (auto& i : idx) i = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
  return idx;
}

Tensor stack_hr(const std::vector<Sample>& samples, std::span<const int> idx) {
  std::vector<const Image*> ptrs;
  for (int i : idx) ptrs.push_back(&samples[i].hr);
  return to_nchw(std::span<const Image* const>(ptrs));
}

// Loads `path` when it holds an unfinished run of `stage`; returns nullopt
// for a fresh start.
std::optional<Checkpoint> resumable(const std::filesystem::path& path, const std::string& stage, const RunConfig& cfg) {
  if (!std::filesystem::exists(path)) return std::nullopt;
  Checkpoint ckpt = Checkpoint::load(path);
  if (ckpt.meta.value("stage", std::string()) != stage || ckpt.meta.value("complete", true)) return std::nullopt;
  if (!(ckpt.config() == cfg))
    throw ConfigError("unfinished " + stage + " checkpoint " + path.string() +
                      " was written with a different config; remove it or restore that config");
  return ckpt;
}

void write_config(const std::filesystem::path& dir, const RunConfig& cfg) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "config.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "config.json").string());
  out << cfg.dump();
}

Checkpoint require_complete(const std::filesystem::path& path, const std::string& stage) {
  if (!std::filesystem::exists(path))
    throw ConfigError("missing " + stage + " checkpoint " + path.string() + " (run the " + stage + " stage first)");
  Checkpoint ckpt = Checkpoint::load(path);
  if (ckpt.meta.value("stage", std::string()) != stage || !ckpt.meta.value("complete", false))
    throw ConfigError(path.string() + " is not a finished " + stage + " checkpoint");
  return ckpt;
}

// The tokenizer, schedule and geometry a later stage inherits must match.
void check_tokenizer_config(const RunConfig& have, const RunConfig& want, const std::filesystem::path& source) {
  const bool same = have.tokenizer.vocab == want.tokenizer.vocab && have.tokenizer.widths == want.tokenizer.widths &&
                    have.tokenizer.latent_dim == want.tokenizer.latent_dim && have.scales == want.scales &&
                    have.data.hr_size == want.data.hr_size;
  if (!same)
    throw ConfigError("tokenizer/schedule mismatch: " + source.string() +
                      " was trained with a different vocabulary, autoencoder or scale schedule");
}

// Token pyramids and residuals of every training image.
struct TokenCache {
  std::vector<tokenizer::TokenPyramid> pyramids;
  std::vector<std::vector<float>> residuals;
};

TokenCache tokenize_all(const tokenizer::Tokenizer& tok, const std::vector<Sample>& samples, int batch) {
  TokenCache cache;
  const int n = static_cast<int>(samples.size());
  for (int start = 0; start < n; start += batch) {
    std::vector<int> idx;
    for (int i = start; i < std::min(n, start + batch); ++i) idx.push_back(i);
    auto q = tok.tokenize(stack_hr(samples, idx));
    for (auto& item : q) {
      cache.pyramids.push_back(std::move(item.pyramid));
      cache.residuals.push_back(std::move(item.residual));
    }
  }
  return cache;
}

double residual_rms(const TokenCache& cache) {
  double sum = 0.0;
  size_t count = 0;
  for (const auto& r : cache.residuals) {
    for (float v : r) sum += static_cast<double>(v) * v;
    count += r.size();
  }
  const double rms = count ? std::sqrt(sum / static_cast<double>(count)) : 1.0;
  return rms > 1e-6 ? rms : 1.0;
}

// Max |quantized_sum + z - f| over a few latents, f from the encoder.
double residual_identity_error(const tokenizer::Tokenizer& tok, const std::vector<Sample>& samples, int count) {
  NoGradGuard guard;
  std::vector<int> idx;
  for (int i = 0; i < std::min<int>(count, static_cast<int>(samples.size())); ++i) idx.push_back(i);
  const Tensor f = tok.vae.encode(stack_hr(samples, idx));
  const auto q = tok.tokenize(stack_hr(samples, idx));
  const size_t per = static_cast<size_t>(tok.latent_dims().tokens()) * tok.latent_dim();
  double worst = 0.0;
  for (size_t b = 0; b < q.size(); ++b)
    for (size_t i = 0; i < per; ++i) {
      const double rebuilt = static_cast<double>(q[b].quantized_sum[i] + q[b].residual[i]);
      worst = std::max(worst, std::abs(rebuilt - static_cast<double>(f.data()[b * per + i])));
    }
  return worst;
}

struct ArmLoss {
  Tensor total;
  double token_ce = 0.0;
  double refiner = 0.0;
};

// CE over all scales plus lambda times the refiner loss on the final-scale
// states and the residuals of the batch.
ArmLoss arm_loss(const Model& model, const TokenCache& cache, std::span<const int> idx, const arm::Conditioning& cond,
                 Rng& noise_rng) {
  const auto& cfg = model.config;
  std::vector<tokenizer::TokenPyramid> pyr;
  std::vector<float> z;
  for (int i : idx) {
    pyr.push_back(cache.pyramids[i]);
    z.insert(z.end(), cache.residuals[i].begin(), cache.residuals[i].end());
  }
  const auto fr = model.arm.forward_train(model.tokenizer.codebook.embed, pyr, cond);
  ArmLoss out;
  Tensor ce = arm::token_loss(fr.logits, arm::flat_targets(pyr));
  out.token_ce = ce.item();
  out.total = ce;
  if (cfg.train.loss_lambda > 0.0) {
    const int rows = fr.hidden_final.dim(0) * fr.hidden_final.dim(1);
    const Tensor hidden = ops::reshape(fr.hidden_final, {rows, fr.hidden_final.dim(2)});
    Tensor diff = refiner::refiner_loss<float>(model.refiner, hidden, std::span<const float>(z), model.noise,
                                               noise_rng, cfg.refiner.draws);
    out.refiner = diff.item();
    out.total = ops::add(ce, ops::mul_scalar(diff, static_cast<float>(cfg.train.loss_lambda)));
  }
  return out;
}

ParamList<float> trainable(const Model& model) {
  ParamList<float> params = model.arm_params();
  // With a zero weight the refiner receives no gradient; keeping it out of the
  // optimizer also keeps weight decay from touching it.
  if (model.config.train.loss_lambda > 0.0) {
    auto r = model.refiner_params();
    params.insert(params.end(), r.begin(), r.end());
  }
  return params;
}

AdamWConfig adamw(const RunConfig& cfg) { return AdamWConfig{.lr = cfg.train.lr, .weight_decay = cfg.train.weight_decay}; }

void log_progress(const StageOptions& opts, const char* stage, int step, int total, double loss) {
  if (opts.quiet) return;
  if (step == 1 || step % 50 == 0 || step == total) spdlog::info("{}: step {}/{} loss {:.5f}", stage, step, total, loss);
}

// Shared loop of the pretraining (class-conditional) and finetuning (LR
// prefix) stages. `warm` supplies the starting weights.
StageReport train_arm(const RunConfig& cfg, const StageOptions& opts, const std::string& stage, int total,
                      const Checkpoint& warm, const std::filesystem::path& warm_path, bool sr_mode) {
  check_tokenizer_config(warm.config(), cfg, warm_path);
  const auto samples = load_samples(train_manifest(cfg), cfg.data.hr_size);
  write_config(opts.out_dir, cfg);
  Model model(cfg);
  load_model(warm, model);
  const auto cache = tokenize_all(model.tokenizer, samples, 32);

  const auto path = stage_checkpoint(opts, stage);
  StageReport report;
  report.checkpoint = path;
  report.steps_total = total;
  Rng batches = Rng::stream(cfg.seed, stage + ".batches");
  Rng noise = Rng::stream(cfg.seed, stage + ".noise");
  Rng degrade = Rng::stream(cfg.seed, stage + ".degrade");
  int done = 0;
  const auto resume = resumable(path, stage, cfg);
  if (resume) {
    load_model(*resume, model);
    done = resume->meta.at("steps_done").get<int>();
    const auto& r = resume->meta.at("rng");
    rng_from_json(r.at("batches"), batches);
    rng_from_json(r.at("noise"), noise);
    rng_from_json(r.at("degrade"), degrade);
    report.resumed = true;
  } else if (!warm.meta.contains("z_scale")) {
    model.refiner.set_z_scale(residual_rms(cache));
  }
  AdamW opt(trainable(model), adamw(cfg));
  if (resume && done > 0) load_optimizer(*resume, opt);
  LossLog log(opts.out_dir / (stage + "_loss.csv"), "step,loss,token_ce,refiner_loss", opts.deterministic, done);

  auto save = [&](bool complete) {
    Checkpoint ckpt;
    store_model(ckpt, model);
    store_optimizer(ckpt, opt);
    ckpt.meta["stage"] = stage;
    ckpt.meta["steps_done"] = done;
    ckpt.meta["complete"] = complete;
    ckpt.meta["rng"] = {{"batches", rng_to_json(batches)}, {"noise", rng_to_json(noise)}, {"degrade", rng_to_json(degrade)}};
    ckpt.save(path);
    log.flush();
  };

  const int limit = opts.stop_after ? std::min(total, *opts.stop_after) : total;
  const int n = static_cast<int>(samples.size());
  while (done < limit) {
    const auto idx = draw_batch(batches, n, cfg.train.batch);
    std::vector<Quality> quality;
    for (int i : idx) quality.push_back(samples[i].quality);
    arm::Conditioning cond;
    if (sr_mode) {
      std::vector<Image> lr;
      for (int i : idx) lr.push_back(data::degrade(samples[i].hr, cfg.data.degradation, degrade));
      cond = sr_conditioning(model.arm, lr, quality, cfg.data.hr_size);
    } else {
      cond.quality = quality;
      for (int i : idx) cond.classes.push_back(samples[i].class_id);
    }
    for (Quality q : cond.quality) report.negative_items += q == Quality::negative;

    opt.zero_grad();
    ArmLoss loss = arm_loss(model, cache, idx, cond, noise);
    loss.total.backward();
    if (!opt.step()) spdlog::warn("{}: step {} skipped (non-finite gradient)", stage, done + 1);
    ++done;
    ++report.steps_run;
    const double total_loss = loss.total.item();
    report.losses.push_back(total_loss);
    if (report.steps_run == 1) report.first_token_loss = loss.token_ce;
    report.last_token_loss = loss.token_ce;
    log.row(std::to_string(done) + "," + fmt_double(total_loss) + "," + fmt_double(loss.token_ce) + "," +
            fmt_double(loss.refiner));
    log_progress(opts, stage.c_str(), done, total, total_loss);
    if (done % cfg.train.checkpoint_every == 0 && done < total) save(false);
  }
  report.complete = done >= total;
  save(report.complete);
  return report;
}

}  // namespace

std::filesystem::path stage_checkpoint(const StageOptions& opts, const std::string& stage) {
  return opts.out_dir / (stage + ".ckpt");
}

arm::Conditioning sr_conditioning(const arm::Arm& arm, std::span<const Image> lr_images,
                                  std::span<const Quality> quality, int hr_size) {
  if (lr_images.size() != quality.size()) throw ShapeError("one quality label per LR image required");
  std::vector<Image> up;
  up.reserve(lr_images.size());
  for (const auto& lr : lr_images) up.push_back(data::resize_bicubic(lr, hr_size, hr_size));
  std::vector<const Image*> ptrs;
  for (const auto& u : up) ptrs.push_back(&u);
  arm::Conditioning cond;
  cond.prefix = arm.encode_condition(to_nchw(std::span<const Image* const>(ptrs)));
  cond.quality.assign(quality.begin(), quality.end());
  return cond;
}

// ---------------------------------------------------------------- tokenizer

StageReport stage_tokenizer(const RunConfig& cfg, const StageOptions& opts) {
  cfg.validate();
  const auto samples = load_samples(train_manifest(cfg), cfg.data.hr_size);
  write_config(opts.out_dir, cfg);
  Model model(cfg);
  auto& tok = model.tokenizer;
  const auto path = stage_checkpoint(opts, "tokenizer");
  const int train_steps = cfg.tokenizer.steps, total = cfg.tokenizer.steps + cfg.tokenizer.finetune_steps;

  StageReport report;
  report.checkpoint = path;
  report.steps_total = total;
  Rng batches = Rng::stream(cfg.seed, "tokenizer.batches");
  int done = 0;
  const auto resume = resumable(path, "tokenizer", cfg);
  if (resume) {
    load_tokenizer(*resume, tok);
    done = resume->meta.at("steps_done").get<int>();
    rng_from_json(resume->meta.at("rng").at("batches"), batches);
    report.resumed = true;
  }
  LossLog log(opts.out_dir / "tokenizer_loss.csv", "step,phase,loss,recon,commit,bypassed", opts.deterministic, done);

  auto save = [&](bool complete, const char* phase, const AdamW& opt, const Rng& trainer_rng) {
    Checkpoint ckpt;
    ckpt.config_text = cfg.dump();
    store_tokenizer(ckpt, tok);
    store_optimizer(ckpt, opt);
    ckpt.meta["stage"] = "tokenizer";
    ckpt.meta["phase"] = phase;
    ckpt.meta["steps_done"] = done;
    ckpt.meta["complete"] = complete;
    ckpt.meta["rng"] = {{"batches", rng_to_json(batches)}, {"trainer", rng_to_json(trainer_rng)}};
    ckpt.save(path);
    log.flush();
  };
  const int limit = opts.stop_after ? std::min(total, *opts.stop_after) : total;
  // Restores optimizer and trainer stream when the checkpoint stopped inside
  // this phase.
  auto restore = [&](auto& trainer, const char* phase, int phase_begin) {
    trainer.set_steps_done(done - phase_begin);
    if (resume && done > phase_begin && resume->meta.value("phase", std::string()) == phase) {
      load_optimizer(*resume, trainer.optimizer());
      rng_from_json(resume->meta.at("rng").at("trainer"), trainer.rng());
    }
  };
  auto step_row = [&](const char* phase, const tokenizer::StepStats& st) {
    ++done;
    ++report.steps_run;
    report.losses.push_back(st.loss);
    log.row(std::to_string(done) + "," + phase + "," + fmt_double(st.loss) + "," + fmt_double(st.recon) + "," +
            fmt_double(st.commit) + "," + (st.bypassed ? "1" : "0"));
    log_progress(opts, "tokenizer", done, total, st.loss);
  };

  const auto tcfg = cfg.tokenizer_train_config();
  {
    tokenizer::TokenizerTrainer trainer(tok, tcfg, cfg.seed);
    restore(trainer, "train", 0);
    while (done < std::min(train_steps, limit)) {
      const auto idx = draw_batch(batches, static_cast<int>(samples.size()), cfg.train.batch);
      step_row("train", trainer.step(stack_hr(samples, idx)));
      if (done % cfg.train.checkpoint_every == 0 && done < total) save(false, "train", trainer.optimizer(), trainer.rng());
    }
    if (done < total && done == limit) {
      save(false, "train", trainer.optimizer(), trainer.rng());
      return report;
    }
  }
  {
    tokenizer::DropoutFinetuner finetuner(tok, tcfg, cfg.seed);
    restore(finetuner, "dropout", train_steps);
    while (done < limit) {
      const auto idx = draw_batch(batches, static_cast<int>(samples.size()), cfg.train.batch);
      step_row("dropout", finetuner.step(stack_hr(samples, idx)));
      if (done % cfg.train.checkpoint_every == 0 && done < total)
        save(false, "dropout", finetuner.optimizer(), finetuner.rng());
    }
    if (done < total) {
      save(false, "dropout", finetuner.optimizer(), finetuner.rng());
      return report;
    }
    // The finetuner resyncs the codebook statistics when it goes out of scope.
  }
  report.max_residual_error = residual_identity_error(tok, samples, 8);
  if (!(report.max_residual_error <= 1e-5))
    throw GenerationError("tokenizer: reconstruction identity violated by " + fmt_double(report.max_residual_error));
  save(true, "done", AdamW(tok.vae_params(), {}), Rng::stream(cfg.seed, "tokenizer"));
  report.complete = true;
  if (!opts.quiet)
    spdlog::info("tokenizer: finished {} steps, identity error {:.3g} on 8 latents", total, report.max_residual_error);
  return report;
}

// ---------------------------------------------------------------- pretrain

StageReport stage_pretrain(const RunConfig& cfg, const StageOptions& opts) {
  cfg.validate();
  const auto source = stage_checkpoint(opts, "tokenizer");
  const Checkpoint warm = require_complete(source, "tokenizer");
  return train_arm(cfg, opts, "pretrain", cfg.train.pretrain_steps, warm, source, false);
}

// ---------------------------------------------------------------- finetune

StageReport stage_finetune(const RunConfig& cfg, const StageOptions& opts) {
  cfg.validate();
  const auto source = stage_checkpoint(opts, "pretrain");
  const Checkpoint warm = require_complete(source, "pretrain");
  return train_arm(cfg, opts, "finetune", cfg.train.finetune_steps, warm, source, true);
}

}  // namespace varsr::pipeline
