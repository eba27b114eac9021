#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>

#include "varsr/error.hpp"
#include "varsr/pipeline.hpp"

namespace varsr::pipeline {

namespace {

std::string fixed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::ofstream open_csv(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

std::vector<BenchScale> describe(const Schedule& sched) {
  std::vector<BenchScale> out;
  for (size_t k = 0; k < sched.size(); ++k)
    out.push_back({static_cast<int>(k) + 1, sched[k].h, sched[k].w, sched[k].tokens()});
  return out;
}

}  // namespace

SrOptions SrOptions::from_config(const RunConfig& cfg) {
  SrOptions o;
  o.lambda_max = cfg.guidance.lambda_max;
  o.ramp = cfg.guidance.ramp;
  o.guide_refiner = cfg.guidance.refiner;
  o.temperature = cfg.sample.temperature;
  o.top_k = cfg.sample.top_k;
  o.greedy = cfg.sample.greedy;
  o.refiner_temperature = cfg.refiner.temperature;
  o.seed = cfg.seed;
  return o;
}

SrResult super_resolve(const Model& model, const Image& lr, const SrOptions& opts) {
  const auto& cfg = model.config;
  const int lr_size = cfg.lr_size(), hr_size = cfg.data.hr_size;
  if (lr.height != lr_size || lr.width != lr_size)
    throw ShapeError("LR input is " + std::to_string(lr.height) + "x" + std::to_string(lr.width) + ", the model expects " +
                     std::to_string(lr_size) + "x" + std::to_string(lr_size));
  lr.validate();
  NoGradGuard guard;
  const Quality positive = Quality::positive;
  const arm::Conditioning cond =
      sr_conditioning(model.arm, std::span<const Image>(&lr, 1), std::span<const Quality>(&positive, 1), hr_size);

  arm::GenerateOptions gen_opts;
  gen_opts.temperature = opts.temperature;
  gen_opts.top_k = opts.top_k;
  gen_opts.greedy = opts.greedy;
  gen_opts.guidance = {opts.lambda_max, opts.ramp, opts.guide_refiner};
  Rng token_rng = Rng::stream(opts.seed, "sr.tokens");
  const auto& codebook = model.tokenizer.codebook.embed;
  const auto gen = model.arm.generate(codebook, cond, gen_opts, token_rng);

  const auto sum = tokenizer::reconstruct_sum(gen.pyramids.front(), codebook);
  const int sites = model.arm.config().final_dims().tokens();
  const Tensor hidden = ops::reshape(gen.hidden_pos, {sites, model.arm.config().width});
  Tensor hidden_neg;
  const bool guided = opts.guide_refiner && opts.lambda_max != 0.0 && gen.hidden_neg.defined();
  if (guided) hidden_neg = ops::reshape(gen.hidden_neg, {sites, model.arm.config().width});
  const int scales = static_cast<int>(cfg.scales.size());
  const double lambda = guided ? guidance::lambda_schedule(scales, scales, opts.lambda_max, opts.ramp) : 0.0;

  refiner::SampleOptions sample_opts;
  sample_opts.steps = cfg.refiner.sample_steps;
  sample_opts.temperature = opts.refiner_temperature;
  sample_opts.clip = cfg.refiner.clip;
  Rng refine_rng = Rng::stream(opts.seed, "sr.refiner");
  const auto refined = refiner::sample(model.refiner, hidden, guided ? &hidden_neg : nullptr, lambda, model.noise,
                                       sample_opts, refine_rng);

  std::vector<std::vector<float>> latent(1, sum);
  for (size_t i = 0; i < sum.size(); ++i) latent[0][i] += refined.z[i];
  const Tensor decoded = model.tokenizer.decode_latents(latent);
  for (float v : decoded.data())
    if (!std::isfinite(v)) throw GenerationError("decoder produced a non-finite pixel");
  SrResult out;
  out.hr = from_nchw(decoded, 0);
  out.hr.clamp();
  out.ar_steps = gen.forward_passes;
  out.refiner_steps = refined.steps_run;
  return out;
}

EvalReport evaluate(const Model& model, const std::vector<EvalPair>& pairs, const SrOptions& opts,
                    const std::filesystem::path& image_dir) {
  const int hr_size = model.config.data.hr_size, lr_size = model.config.lr_size();
  if (pairs.empty()) throw ConfigError("evaluation needs at least one image pair");
  if (!image_dir.empty()) std::filesystem::create_directories(image_dir);
  EvalReport report;
  report.parameters = model.parameter_count();
  for (size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    if (p.hr.height != hr_size || p.hr.width != hr_size || p.lr.height != lr_size || p.lr.width != lr_size)
      throw ConfigError("evaluation pair '" + p.name + "' is " + std::to_string(p.lr.height) + "px -> " +
                        std::to_string(p.hr.height) + "px but the checkpoint's schedule implies " +
                        std::to_string(lr_size) + "px -> " + std::to_string(hr_size) + "px");
    SrOptions item = opts;
    item.seed = opts.seed + i;
    const auto sr = super_resolve(model, p.lr, item);
    const Image bicubic = data::resize_bicubic(p.lr, hr_size, hr_size);
    report.rows.push_back({p.name, data::psnr(sr.hr, p.hr), data::ssim_y(sr.hr, p.hr), data::psnr(bicubic, p.hr),
                           data::ssim_y(bicubic, p.hr)});
    report.ar_steps = sr.ar_steps;
    report.refiner_steps = sr.refiner_steps;
    if (!image_dir.empty()) data::write_image(image_dir / (p.name + ".png"), sr.hr);
  }
  const double n = static_cast<double>(report.rows.size());
  for (const auto& r : report.rows) {
    report.mean_psnr += r.psnr / n;
    report.mean_ssim += r.ssim / n;
    report.mean_bicubic_psnr += r.bicubic_psnr / n;
    report.mean_bicubic_ssim += r.bicubic_ssim / n;
  }
  return report;
}

void EvalReport::write_csv(const std::filesystem::path& path) const {
  auto out = open_csv(path);
  out << "image,psnr,ssim,bicubic_psnr,bicubic_ssim,psnr_gain,ssim_gain\n";
  for (const auto& r : rows)
    out << r.name << "," << fixed(r.psnr) << "," << fixed(r.ssim) << "," << fixed(r.bicubic_psnr) << ","
        << fixed(r.bicubic_ssim) << "," << fixed(r.psnr - r.bicubic_psnr) << "," << fixed(r.ssim - r.bicubic_ssim)
        << "\n";
  out << "mean," << fixed(mean_psnr) << "," << fixed(mean_ssim) << "," << fixed(mean_bicubic_psnr) << ","
      << fixed(mean_bicubic_ssim) << "," << fixed(psnr_gain()) << "," << fixed(ssim_gain()) << "\n";
}

BenchReport bench(const Model& model) {
  const auto& cfg = model.config;
  BenchReport b;
  const Schedule sched = cfg.schedule();
  b.scales = describe(sched);
  b.total_tokens = total_tokens(sched);
  b.prefix_tokens = sched.back().tokens();
  b.attention_pairs = arm::build_block_mask(sched, b.prefix_tokens).allowed_pairs();
  b.tokenizer_parameters = count_parameters(model.tokenizer.vae_params()) + model.tokenizer.codebook.embed.numel();
  b.arm_parameters = count_parameters(model.arm_params());
  b.refiner_parameters = count_parameters(model.refiner_params());

  // Step counts come from an actual generation on a flat gray input.
  SrOptions opts = SrOptions::from_config(cfg);
  opts.greedy = true;
  const auto run = super_resolve(model, Image(cfg.lr_size(), cfg.lr_size(), 0.5f), opts);
  b.forward_passes = run.ar_steps;
  b.refiner_steps = run.refiner_steps;

  const Schedule reference = square_schedule(cfg.reference.scales);
  b.reference_scales = describe(reference);
  b.reference_total_tokens = total_tokens(reference);
  b.reference_prefix_tokens = reference.back().tokens();
  b.reference_attention_pairs = arm::build_block_mask(reference, b.reference_prefix_tokens).allowed_pairs();
  return b;
}

void BenchReport::write_csv(const std::filesystem::path& path) const {
  auto out = open_csv(path);
  out << "key,value\n";
  for (const auto& s : scales)
    out << "scale" << s.scale << ".tokens," << s.tokens << "\n";
  out << "total_tokens," << total_tokens << "\n";
  out << "prefix_tokens," << prefix_tokens << "\n";
  out << "attention_pairs," << attention_pairs << "\n";
  out << "forward_passes," << forward_passes << "\n";
  out << "refiner_steps," << refiner_steps << "\n";
  out << "tokenizer_parameters," << tokenizer_parameters << "\n";
  out << "arm_parameters," << arm_parameters << "\n";
  out << "refiner_parameters," << refiner_parameters << "\n";
  out << "total_parameters," << tokenizer_parameters + arm_parameters + refiner_parameters << "\n";
  for (const auto& s : reference_scales)
    out << "reference.scale" << s.scale << ".tokens," << s.tokens << "\n";
  out << "reference.total_tokens," << reference_total_tokens << "\n";
  out << "reference.prefix_tokens," << reference_prefix_tokens << "\n";
  out << "reference.attention_pairs," << reference_attention_pairs << "\n";
}

}  // namespace varsr::pipeline
