// Command-line front end: corpus generation, the three training stages,
// super-resolution, evaluation and the cost report.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "varsr/error.hpp"
#include "varsr/pipeline.hpp"

extern "C" void openblas_set_num_threads(int);

namespace {

using namespace varsr;
using namespace varsr::pipeline;
namespace fs = std::filesystem;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> cfg_scale;
  bool greedy = false;
  bool deterministic = false;
  std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f, const std::string& out_help) {
  cmd->add_option("--config", f.config, "Run configuration (JSON)");
  cmd->add_option("--seed", f.seed, "Override run.seed");
  cmd->add_option("--cfg-scale", f.cfg_scale, "Override guidance.lambda_max")->check(CLI::NonNegativeNumber);
  cmd->add_flag("--greedy", f.greedy, "Greedy token decoding");
  cmd->add_flag("--deterministic", f.deterministic, "Single-threaded math and no wall-clock fields in outputs");
  cmd->add_option("--out", f.out, out_help);
}

RunConfig load_config(const CommonFlags& f) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : RunConfig::load(f.config);
  if (f.seed) cfg.seed = *f.seed;
  if (f.cfg_scale) cfg.guidance.lambda_max = *f.cfg_scale;
  if (f.greedy) cfg.sample.greedy = true;
  cfg.validate();
  return cfg;
}

// Applies the sampling flags to a checkpoint's own configuration.
SrOptions sr_options(const RunConfig& model_cfg, const CommonFlags& f) {
  SrOptions o = SrOptions::from_config(model_cfg);
  if (f.seed) o.seed = *f.seed;
  if (f.cfg_scale) o.lambda_max = *f.cfg_scale;
  if (f.greedy) o.greedy = true;
  return o;
}

StageOptions stage_options(const CommonFlags& f) {
  StageOptions o;
  o.out_dir = f.out.empty() ? "run" : f.out;
  o.deterministic = f.deterministic;
  return o;
}

void print_eval(const EvalReport& r) {
  std::printf("images %zu\n", r.rows.size());
  std::printf("psnr %.4f (bicubic %.4f, gain %+.4f dB)\n", r.mean_psnr, r.mean_bicubic_psnr, r.psnr_gain());
  std::printf("ssim %.4f (bicubic %.4f, gain %+.4f)\n", r.mean_ssim, r.mean_bicubic_ssim, r.ssim_gain());
  std::printf("ar_steps %d refiner_steps %d parameters %lld\n", r.ar_steps, r.refiner_steps,
              static_cast<long long>(r.parameters));
}

EvalReport run_eval(const Model& model, const fs::path& manifest, const SrOptions& opts, const fs::path& csv,
                    const fs::path& image_dir) {
  const auto samples = load_samples(manifest, model.config.data.hr_size);
  std::vector<std::string> names;
  for (const auto& e : data::read_manifest(manifest)) names.push_back(fs::path(e.path).stem().string());
  const auto report = evaluate(model, make_eval_pairs(samples, names, model.config), opts, image_dir);
  report.write_csv(csv);
  return report;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("varsr"));
  CLI::App app{"Visual autoregressive super-resolution"};
  app.require_subcommand(1);

  CommonFlags f;
  auto* corpus = app.add_subcommand("corpus", "Render the procedural training and held-out corpus");
  add_common(corpus, f, "Corpus directory (overrides data.root)");
  auto* tok = app.add_subcommand("tokenizer-train", "Stage 1: autoencoder, codebook and scale-dropout finetuning");
  add_common(tok, f, "Run directory (default: run)");
  auto* pre = app.add_subcommand("pretrain", "Stage 2: class-conditional next-scale pretraining");
  add_common(pre, f, "Run directory (default: run)");
  auto* fin = app.add_subcommand("finetune", "Stage 3: LR-conditioned finetuning");
  add_common(fin, f, "Run directory (default: run)");
  auto* all = app.add_subcommand("pipeline", "Corpus (if missing), all three stages, then evaluation");
  add_common(all, f, "Run directory (default: run)");

  std::string checkpoint, input, manifest, image_dir;
  auto* sr = app.add_subcommand("sr", "Super-resolve one LR image");
  add_common(sr, f, "Output image (default: sr.png)");
  sr->add_option("checkpoint", checkpoint, "Finetuned checkpoint")->required();
  sr->add_option("input", input, "LR image (PNG or PPM)")->required();
  auto* ev = app.add_subcommand("eval", "PSNR/SSIM against the bicubic baseline on held-out pairs");
  add_common(ev, f, "Report CSV (default: eval.csv)");
  ev->add_option("checkpoint", checkpoint, "Finetuned checkpoint")->required();
  ev->add_option("manifest", manifest, "Held-out manifest (default: the checkpoint's corpus)");
  ev->add_option("--images", image_dir, "Also write the SR outputs here");
  auto* bn = app.add_subcommand("bench", "Token, attention, step and parameter counts");
  add_common(bn, f, "Report CSV (default: bench.csv)");
  bn->add_option("checkpoint", checkpoint, "Checkpoint (default: fresh weights from --config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  if (f.deterministic) openblas_set_num_threads(1);

  try {
    if (corpus->parsed()) {
      RunConfig cfg = load_config(f);
      if (!f.out.empty()) cfg.data.root = f.out;
      make_corpus(cfg);
    } else if (tok->parsed()) {
      stage_tokenizer(load_config(f), stage_options(f));
    } else if (pre->parsed()) {
      stage_pretrain(load_config(f), stage_options(f));
    } else if (fin->parsed()) {
      stage_finetune(load_config(f), stage_options(f));
    } else if (all->parsed()) {
      const RunConfig cfg = load_config(f);
      const auto opts = stage_options(f);
      if (!fs::exists(train_manifest(cfg)) || !fs::exists(eval_manifest(cfg))) make_corpus(cfg);
      stage_tokenizer(cfg, opts);
      stage_pretrain(cfg, opts);
      stage_finetune(cfg, opts);
      const Model model = model_from_checkpoint(Checkpoint::load(stage_checkpoint(opts, "finetune")));
      print_eval(run_eval(model, eval_manifest(cfg), sr_options(model.config, f), opts.out_dir / "eval.csv",
                          opts.out_dir / "eval_images"));
    } else if (sr->parsed()) {
      const Model model = model_from_checkpoint(Checkpoint::load(checkpoint));
      const auto result = super_resolve(model, data::read_image(input), sr_options(model.config, f));
      data::write_image(f.out.empty() ? "sr.png" : f.out, result.hr);
      std::printf("ar_steps %d refiner_steps %d\n", result.ar_steps, result.refiner_steps);
    } else if (ev->parsed()) {
      const Model model = model_from_checkpoint(Checkpoint::load(checkpoint));
      const fs::path list = manifest.empty() ? eval_manifest(model.config) : fs::path(manifest);
      print_eval(run_eval(model, list, sr_options(model.config, f), f.out.empty() ? "eval.csv" : f.out, image_dir));
    } else if (bn->parsed()) {
      const Model model = checkpoint.empty() ? Model(load_config(f)) : model_from_checkpoint(Checkpoint::load(checkpoint));
      const auto report = bench(model);
      report.write_csv(f.out.empty() ? "bench.csv" : f.out);
      std::printf("tokens per scale:");
      for (const auto& s : report.scales) std::printf(" %d", s.tokens);
      std::printf(" -> %d\n", report.total_tokens);
      std::printf("forward_passes %d refiner_steps %d attention_pairs %lld\n", report.forward_passes,
                  report.refiner_steps, report.attention_pairs);
      std::printf("parameters %lld\n", static_cast<long long>(report.tokenizer_parameters + report.arm_parameters +
                                                              report.refiner_parameters));
      std::printf("reference schedule: %zu scales, %d tokens + %d prefix\n", report.reference_scales.size(),
                  report.reference_total_tokens, report.reference_prefix_tokens);
    }
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 0;
}
