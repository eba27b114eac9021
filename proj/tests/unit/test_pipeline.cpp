#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "varsr/error.hpp"
#include "varsr/pipeline.hpp"

using namespace varsr;
using namespace varsr::pipeline;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("varsr_pipeline_" + std::to_string(::getpid()) + "_" + std::to_string(next_++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  static inline int next_ = 0;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 32 px HR, 8 px LR, four scales up to 8x8: small enough for many stage runs.
RunConfig tiny_config(const fs::path& root) {
  RunConfig c;
  c.data.root = (root / "corpus").string();
  c.data.train_images = 24;
  c.data.eval_images = 4;
  c.data.source_size = 40;
  c.data.hr_size = 32;
  c.tokenizer.vocab = 16;
  c.tokenizer.widths = {8, 16, 16};
  c.tokenizer.latent_dim = 8;
  c.tokenizer.steps = 6;
  c.tokenizer.finetune_steps = 4;
  c.scales = {1, 2, 4, 8};
  c.model.width = 32;
  c.model.heads = 2;
  c.model.blocks = 1;
  c.model.encoder_widths = {8, 16};
  c.refiner.width = 32;
  c.refiner.blocks = 1;
  c.refiner.train_steps = 20;
  c.refiner.draws = 1;
  c.train.batch = 4;
  c.train.pretrain_steps = 6;
  c.train.finetune_steps = 6;
  c.train.checkpoint_every = 4;
  c.validate();
  return c;
}

StageOptions quiet(const fs::path& dir) {
  StageOptions o;
  o.out_dir = dir;
  o.deterministic = true;
  o.quiet = true;
  return o;
}

std::vector<float> section_values(const Checkpoint& ckpt, const std::string& name) {
  std::vector<float> out;
  for (const auto& e : ckpt.section(name).entries) out.insert(out.end(), e.values.begin(), e.values.end());
  return out;
}

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

// ---------------------------------------------------------------- config

TEST_CASE("desk defaults") {
  const RunConfig c;
  CHECK(c.scales == std::vector<int>{1, 2, 4, 8, 16});
  CHECK(c.tokenizer.vocab == 64);
  CHECK(c.model.blocks == 4);
  CHECK(c.model.width == 128);
  CHECK(c.model.heads == 4);
  CHECK(c.refiner.blocks == 3);
  CHECK(c.refiner.width == 128);
  CHECK(c.refiner.train_steps == 100);
  CHECK(c.refiner.sample_steps == 10);
  CHECK(c.tokenizer.steps + c.tokenizer.finetune_steps == 2000);
  CHECK(c.train.pretrain_steps == 4000);
  CHECK(c.train.finetune_steps == 2000);
  CHECK(c.train.batch == 16);
  CHECK(c.train.lr == 1e-3);
  CHECK(c.tokenizer.drop_prob == 0.1);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("loss balance and reference values match the published setup") {
  const RunConfig c;
  CHECK(c.train.loss_lambda == 2.0);
  CHECK(c.reference.loss_lambda == 2.0);
  CHECK(c.reference.drop_prob == 0.1);
  CHECK(c.reference.lambda_max == 6.0);
  CHECK(c.reference.batch == 128);
  CHECK(c.reference.lr == 5e-5);
  CHECK(c.reference.weight_decay == 5e-2);
  CHECK(c.reference.tokenizer_iters == 10000);
  CHECK(c.reference.pretrain_iters == 40000);
  CHECK(c.reference.finetune_iters == 20000);
  CHECK(c.reference.vocab == 4096);
  CHECK(c.reference.model_blocks == 24);
  CHECK(c.reference.model_width == 1536);
  CHECK(c.reference.diffusion_steps == 1000);
  CHECK(c.reference.sample_steps == 10);
  CHECK(c.reference.scales.size() == 10);
  CHECK(c.reference.scales.back() * 16 == c.reference.hr_size);
}

TEST_CASE("config round trip keeps explicit values") {
  const auto parsed = RunConfig::parse(R"({"model.width": 96, "model.heads": 3, "train.batch": 16,
                                           "guidance.ramp": "constant", "run.seed": 18446744073709551615})");
  CHECK(parsed.model.width == 96);
  CHECK(parsed.model.heads == 3);
  CHECK(parsed.guidance.ramp == guidance::Ramp::constant);
  CHECK(parsed.seed == 18446744073709551615ULL);
  const auto again = RunConfig::parse(parsed.dump());
  CHECK(again == parsed);
  CHECK(again.dump() == parsed.dump());

  // Every key survives a round trip after being set to a non-default value.
  auto j = RunConfig{}.to_json();
  CHECK(j.size() == config_keys().size());
  for (const auto& key : config_keys()) CHECK(j.contains(key));
}

TEST_CASE("config rejects unknown keys, wrong types and bad geometry") {
  CHECK_THROWS_AS(RunConfig::parse(R"({"model.widht": 64})"), ConfigError);
  try {
    RunConfig::parse(R"({"train.bach": 4})");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("train.bach") != std::string::npos);
  }
  CHECK_THROWS_AS(RunConfig::parse(R"({"model.width": "wide"})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse(R"({"model.width": 64.5})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse(R"({"sample.greedy": 1})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse(R"({"schedule.scales": [1, 2, "4"]})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse(R"({"run.seed": -1})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("[1, 2]"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse("{not json"), ConfigError);
  // Final scale 8 with a 4x autoencoder does not cover 64 px images.
  CHECK_THROWS_AS(RunConfig::parse(R"({"schedule.scales": [1, 2, 4, 8]})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse(R"({"refiner.sample_steps": 0})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::parse(R"({"model.heads": 3})"), ConfigError);
  CHECK_THROWS_AS(RunConfig::load("/nonexistent/config.json"), ConfigError);
}

// ---------------------------------------------------------------- checkpoint

TEST_CASE("checkpoint round trip is bit exact including optimizer state") {
  TempDir tmp;
  RunConfig cfg = tiny_config(tmp.path());
  Model model(cfg);
  model.refiner.set_z_scale(0.123456789012345);
  AdamW opt(model.arm_params(), {});
  for (int i = 0; i < 3; ++i) {
    opt.zero_grad();
    Tensor loss;
    for (const auto& p : opt.params()) {
      auto term = ops::sum(ops::mul(p.tensor, p.tensor));
      loss = loss.defined() ? ops::add(loss, term) : term;
    }
    loss.backward();
    opt.step();
  }
  Checkpoint ckpt;
  store_model(ckpt, model);
  store_optimizer(ckpt, opt);
  ckpt.meta["rng"] = rng_to_json(Rng(99));
  // Special float patterns survive untouched.
  ckpt.add_section("extra").add("specials", {4}, {-0.0f, std::numeric_limits<float>::infinity(),
                                                  std::numeric_limits<float>::quiet_NaN(),
                                                  std::numeric_limits<float>::denorm_min()});
  const fs::path file = tmp.path() / "m.ckpt";
  ckpt.save(file);
  const Checkpoint back = Checkpoint::load(file);
  CHECK(back.serialize() == ckpt.serialize());
  CHECK(back.config() == cfg);
  for (const auto& name : {"tokenizer", "arm", "refiner", "optimizer"})
    CHECK(same_bits(section_values(back, name), section_values(ckpt, name)));
  CHECK(same_bits(back.section("extra").at("specials").values, ckpt.section("extra").at("specials").values));

  Model reloaded = model_from_checkpoint(back);
  CHECK(reloaded.refiner.z_scale() == model.refiner.z_scale());
  AdamW opt2(reloaded.arm_params(), {});
  load_optimizer(back, opt2);
  CHECK(opt2.state().step == opt.state().step);
  for (size_t i = 0; i < opt.state().m.size(); ++i) {
    CHECK(same_bits(opt2.state().m[i], opt.state().m[i]));
    CHECK(same_bits(opt2.state().v[i], opt.state().v[i]));
  }
  Rng restored;
  rng_from_json(back.meta.at("rng"), restored);
  CHECK(restored.state() == Rng(99).state());
}

TEST_CASE("every single-byte corruption is detected") {
  Checkpoint ckpt;
  ckpt.config_text = RunConfig{}.dump();
  ckpt.meta["steps_done"] = 3;
  auto& s = ckpt.add_section("arm");
  s.add("w", {2, 3}, {1, 2, 3, 4, 5, 6});
  s.add("b", {3}, {0.5f, -0.25f, 8});
  ckpt.add_section("refiner").add("x", {1}, {42});
  const std::string bytes = ckpt.serialize();
  CHECK(Checkpoint::deserialize(bytes) == ckpt);
  int detected = 0;
  for (size_t i = 0; i < bytes.size(); ++i) {
    std::string bad = bytes;
    bad[i] = static_cast<char>(bad[i] ^ 0x01);
    try {
      (void)Checkpoint::deserialize(bad);
    } catch (const ChecksumError&) {
      ++detected;
      continue;
    } catch (const ParseError&) {
      ++detected;
      continue;
    }
    FAIL("corruption at byte " << i << " went unnoticed");
  }
  CHECK(detected == static_cast<int>(bytes.size()));

  // Payload corruption specifically raises a checksum error.
  std::string bad = bytes;
  bad[bytes.size() - 12] ^= 0x40;
  CHECK_THROWS_AS(Checkpoint::deserialize(bad), ChecksumError);
  CHECK_THROWS_AS(Checkpoint::deserialize(bytes.substr(0, bytes.size() - 3)), ParseError);
  CHECK_THROWS_AS(Checkpoint::deserialize("NOTACKPT"), ParseError);
}

TEST_CASE("loading parameters checks names and shapes") {
  Rng rng(1);
  Linear<float> small(4, 3, rng), large(5, 3, rng);
  ParamList<float> a, b;
  small.collect(a, "layer");
  large.collect(b, "layer");
  Section s{"arm", {}};
  store_params(s, a);
  CHECK_THROWS_AS(load_params(s, b), ConfigError);
  ParamList<float> c;
  small.collect(c, "other");
  CHECK_THROWS_AS(load_params(s, c), ConfigError);
  CHECK_NOTHROW(load_params(s, a));
}

// ---------------------------------------------------------------- corpus

TEST_CASE("corpus manifests and loading") {
  TempDir tmp;
  RunConfig cfg = tiny_config(tmp.path());
  cfg.data.train_images = 40;
  cfg.data.neg_fraction = 0.5;
  make_corpus(cfg);
  const auto train = data::read_manifest(train_manifest(cfg));
  const auto held = data::read_manifest(eval_manifest(cfg));
  REQUIRE(train.size() == 40);
  REQUIRE(held.size() == 4);
  int neg = 0;
  for (const auto& e : train) neg += e.quality == Quality::negative;
  CHECK(neg > 5);
  CHECK(neg < 35);
  for (const auto& e : held) CHECK(e.quality == Quality::positive);
  const auto samples = load_samples(eval_manifest(cfg), cfg.data.hr_size);
  CHECK(samples[0].hr.height == 32);
  const auto pairs = make_eval_pairs(samples, {"a", "b", "c", "d"}, cfg);
  CHECK(pairs[0].lr.height == 8);
  // Pair degradations are fixed by the evaluation seed.
  const auto again = make_eval_pairs(samples, {"a", "b", "c", "d"}, cfg);
  CHECK(pairs[2].lr.pixels == again[2].lr.pixels);
  CHECK_THROWS_AS(load_samples(tmp.path() / "missing.tsv", 32), ConfigError);

  // Regenerating gives identical files.
  const std::string first = slurp(fs::path(cfg.data.root) / "train" / "000007.png");
  make_corpus(cfg);
  CHECK(slurp(fs::path(cfg.data.root) / "train" / "000007.png") == first);
}

// ---------------------------------------------------------------- stages

TEST_CASE("stages report missing inputs as config errors") {
  TempDir tmp;
  const RunConfig cfg = tiny_config(tmp.path());
  CHECK_THROWS_AS(stage_tokenizer(cfg, quiet(tmp.path() / "run")), ConfigError);
  make_corpus(cfg);
  CHECK_THROWS_AS(stage_pretrain(cfg, quiet(tmp.path() / "run")), ConfigError);
  CHECK_THROWS_AS(stage_finetune(cfg, quiet(tmp.path() / "run")), ConfigError);
}

TEST_CASE("tokenizer stage resumes bit exactly") {
  TempDir tmp;
  const RunConfig cfg = tiny_config(tmp.path());
  make_corpus(cfg);
  const auto full = stage_tokenizer(cfg, quiet(tmp.path() / "full"));
  CHECK(full.complete);
  CHECK(full.steps_run == 10);
  CHECK(full.max_residual_error <= 1e-5);
  const Checkpoint reference = Checkpoint::load(full.checkpoint);
  CHECK(RunConfig::load(tmp.path() / "full" / "config.json") == cfg);

  // Interrupt inside each phase, then resume.
  for (int stop : {3, 6, 8}) {
    const fs::path dir = tmp.path() / ("part" + std::to_string(stop));
    auto opts = quiet(dir);
    opts.stop_after = stop;
    const auto first = stage_tokenizer(cfg, opts);
    CHECK_FALSE(first.complete);
    CHECK(first.steps_run == stop);
    const auto rest = stage_tokenizer(cfg, quiet(dir));
    CHECK(rest.resumed);
    CHECK(rest.steps_run == 10 - stop);
    CHECK(rest.complete);
    for (int i = 0; i < rest.steps_run; ++i) CHECK(rest.losses[i] == full.losses[stop + i]);
    CHECK(Checkpoint::load(rest.checkpoint) == reference);
    CHECK(slurp(dir / "tokenizer_loss.csv") == slurp(tmp.path() / "full" / "tokenizer_loss.csv"));
  }
}

TEST_CASE("pretrain and finetune resume bit exactly") {
  TempDir tmp;
  const RunConfig cfg = tiny_config(tmp.path());
  make_corpus(cfg);
  const fs::path base = tmp.path() / "base";
  stage_tokenizer(cfg, quiet(base));
  for (const char* stage : {"pretrain", "finetune"}) {
    const bool pre = std::string(stage) == "pretrain";
    auto run = [&](const StageOptions& o) { return pre ? stage_pretrain(cfg, o) : stage_finetune(cfg, o); };
    const fs::path full = tmp.path() / (std::string(stage) + "_full");
    const fs::path part = tmp.path() / (std::string(stage) + "_part");
    for (const auto& dir : {full, part}) {
      fs::create_directories(dir);
      fs::copy_file(base / "tokenizer.ckpt", dir / "tokenizer.ckpt");
      if (!pre) fs::copy_file(base / "pretrain.ckpt", dir / "pretrain.ckpt");
    }
    const auto reference = run(quiet(full));
    if (pre) stage_pretrain(cfg, quiet(base));
    auto opts = quiet(part);
    opts.stop_after = 3;
    run(opts);
    const auto rest = run(quiet(part));
    CHECK(rest.resumed);
    CHECK(rest.steps_run == 3);
    CHECK(Checkpoint::load(rest.checkpoint) == Checkpoint::load(reference.checkpoint));
    CHECK(slurp(part / (std::string(stage) + "_loss.csv")) == slurp(full / (std::string(stage) + "_loss.csv")));
  }
}

TEST_CASE("pretraining rejects a tokenizer trained for another geometry") {
  TempDir tmp;
  const RunConfig cfg = tiny_config(tmp.path());
  make_corpus(cfg);
  stage_tokenizer(cfg, quiet(tmp.path() / "run"));
  RunConfig other = cfg;
  other.tokenizer.vocab = 32;
  CHECK_THROWS_AS(stage_pretrain(other, quiet(tmp.path() / "run")), ConfigError);
}

TEST_CASE("zero loss balance leaves the refiner untouched") {
  TempDir tmp;
  RunConfig cfg = tiny_config(tmp.path());
  cfg.train.loss_lambda = 0.0;
  make_corpus(cfg);
  const auto dir = tmp.path() / "run";
  stage_tokenizer(cfg, quiet(dir));
  const auto report = stage_pretrain(cfg, quiet(dir));
  const Checkpoint ckpt = Checkpoint::load(report.checkpoint);
  Checkpoint fresh;
  store_model(fresh, Model(cfg));
  CHECK(same_bits(section_values(ckpt, "refiner"), section_values(fresh, "refiner")));
  CHECK_FALSE(same_bits(section_values(ckpt, "arm"), section_values(fresh, "arm")));

  // With the default weight the refiner does move.
  cfg.train.loss_lambda = 2.0;
  const auto dir2 = tmp.path() / "run2";
  fs::create_directories(dir2);
  fs::copy_file(dir / "tokenizer.ckpt", dir2 / "tokenizer.ckpt");
  const auto moved = stage_pretrain(cfg, quiet(dir2));
  CHECK_FALSE(same_bits(section_values(Checkpoint::load(moved.checkpoint), "refiner"), section_values(fresh, "refiner")));
}

TEST_CASE("pretraining on a small subset beats the uniform predictor and separates classes") {
  TempDir tmp;
  RunConfig cfg = tiny_config(tmp.path());
  cfg.data.train_images = 16;
  cfg.data.neg_fraction = 0.0;
  cfg.tokenizer.steps = 60;
  cfg.tokenizer.finetune_steps = 10;
  cfg.train.pretrain_steps = 200;
  cfg.train.checkpoint_every = 1000;
  make_corpus(cfg);
  const auto dir = tmp.path() / "run";
  stage_tokenizer(cfg, quiet(dir));
  const auto report = stage_pretrain(cfg, quiet(dir));
  const double uniform = std::log(static_cast<double>(cfg.tokenizer.vocab));
  CHECK(report.first_token_loss > 0.9 * uniform);
  CHECK(report.last_token_loss < uniform);
  CHECK(report.last_token_loss < report.first_token_loss - 0.5);

  // Class-conditional samples: class 0 renders gradients, class 1
  // checkerboards. Their mean decoded pixel differs and is reproducible.
  const Model model = model_from_checkpoint(Checkpoint::load(report.checkpoint));
  auto class_mean = [&](int cls) {
    NoGradGuard guard;
    double total = 0.0;
    for (int draw = 0; draw < 4; ++draw) {
      arm::Conditioning cond;
      cond.quality = {Quality::positive};
      cond.classes = {cls};
      arm::GenerateOptions go;
      go.guidance.lambda_max = 0.0;
      Rng rng = Rng::stream(static_cast<std::uint64_t>(draw), "class-sample");
      const auto gen = model.arm.generate(model.tokenizer.codebook.embed, cond, go, rng);
      const auto sum = tokenizer::reconstruct_sum(gen.pyramids[0], model.tokenizer.codebook.embed);
      const auto img = model.tokenizer.decode_latents(std::vector<std::vector<float>>{sum});
      for (float v : img.data()) total += std::clamp(v, 0.0f, 1.0f);
    }
    return total / (4.0 * 3 * 32 * 32);
  };
  const double m0 = class_mean(0), m1 = class_mean(1);
  MESSAGE("class means " << m0 << " " << m1);
  CHECK(std::abs(m0 - m1) > 0.01);
  CHECK(class_mean(0) == m0);
}

TEST_CASE("finetuning warm start and quality routing") {
  TempDir tmp;
  RunConfig cfg = tiny_config(tmp.path());
  cfg.data.train_images = 16;
  cfg.tokenizer.steps = 60;
  cfg.tokenizer.finetune_steps = 10;
  cfg.train.checkpoint_every = 1000;
  make_corpus(cfg);
  const auto warm_dir = tmp.path() / "warm", cold_dir = tmp.path() / "cold";
  stage_tokenizer(cfg, quiet(warm_dir));
  fs::create_directories(cold_dir);
  fs::copy_file(warm_dir / "tokenizer.ckpt", cold_dir / "tokenizer.ckpt");

  // Warm start: 200 pretraining steps. Control: no pretraining at all.
  RunConfig pre = cfg;
  pre.train.pretrain_steps = 200;
  stage_pretrain(pre, quiet(warm_dir));
  RunConfig none = cfg;
  none.train.pretrain_steps = 0;
  stage_pretrain(none, quiet(cold_dir));

  cfg.train.finetune_steps = 1;
  const auto warm = stage_finetune(cfg, quiet(warm_dir));
  const auto cold = stage_finetune(cfg, quiet(cold_dir));
  MESSAGE("step-0 token CE warm " << warm.first_token_loss << " control " << cold.first_token_loss);
  CHECK(std::isfinite(warm.first_token_loss));
  CHECK(warm.first_token_loss < cold.first_token_loss);

  // All-negative and all-positive corpora route every item accordingly.
  for (double frac : {0.0, 1.0}) {
    RunConfig c = cfg;
    c.data.neg_fraction = frac;
    c.data.root = (tmp.path() / ("corpus" + std::to_string(static_cast<int>(frac)))).string();
    c.train.finetune_steps = 3;
    make_corpus(c);
    const auto report = stage_finetune(c, quiet(warm_dir));
    CHECK(report.negative_items == (frac > 0 ? 3 * c.train.batch : 0));
  }
}

// ---------------------------------------------------------------- inference

TEST_CASE("super-resolution geometry, step counts and determinism") {
  TempDir tmp;
  const RunConfig cfg = tiny_config(tmp.path());
  const Model model(cfg);
  Rng rng(3);
  Image lr(8, 8);
  for (auto& v : lr.pixels) v = static_cast<float>(rng.uniform());
  SrOptions opts = SrOptions::from_config(cfg);
  opts.lambda_max = 0.0;
  opts.greedy = true;
  opts.seed = 11;
  const auto a = super_resolve(model, lr, opts);
  const auto b = super_resolve(model, lr, opts);
  CHECK(a.hr.height == 32);
  CHECK(a.hr.pixels == b.hr.pixels);
  CHECK(a.ar_steps == 4);
  CHECK(a.refiner_steps == 10);
  for (float v : a.hr.pixels) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  // Guided sampling keeps the step structure.
  opts.lambda_max = 6.0;
  const auto guided = super_resolve(model, lr, opts);
  CHECK(guided.ar_steps == 4);
  CHECK(guided.refiner_steps == 10);
  CHECK_THROWS_AS(super_resolve(model, Image(16, 16), opts), ShapeError);
}

TEST_CASE("evaluation aggregates per-image metrics") {
  TempDir tmp;
  const RunConfig cfg = tiny_config(tmp.path());
  make_corpus(cfg);
  const Model model(cfg);
  const auto samples = load_samples(eval_manifest(cfg), cfg.data.hr_size);
  const auto pairs = make_eval_pairs(samples, {"a", "b", "c", "d"}, cfg);
  SrOptions opts = SrOptions::from_config(cfg);
  const auto report = evaluate(model, pairs, opts, tmp.path() / "images");
  REQUIRE(report.rows.size() == 4);
  double p = 0, s = 0, bp = 0, bs = 0;
  for (const auto& r : report.rows) {
    p += r.psnr;
    s += r.ssim;
    bp += r.bicubic_psnr;
    bs += r.bicubic_ssim;
    CHECK(r.bicubic_psnr == doctest::Approx(data::psnr(data::resize_bicubic(pairs[&r - report.rows.data()].lr, 32, 32),
                                                       pairs[&r - report.rows.data()].hr)));
  }
  CHECK(report.mean_psnr == doctest::Approx(p / 4).epsilon(1e-12));
  CHECK(report.mean_ssim == doctest::Approx(s / 4).epsilon(1e-12));
  CHECK(report.mean_bicubic_psnr == doctest::Approx(bp / 4).epsilon(1e-12));
  CHECK(report.mean_bicubic_ssim == doctest::Approx(bs / 4).epsilon(1e-12));
  CHECK(report.psnr_gain() == doctest::Approx(p / 4 - bp / 4));
  CHECK(report.ar_steps == 4);
  CHECK(report.refiner_steps == 10);
  CHECK(report.parameters == model.parameter_count());
  CHECK(fs::exists(tmp.path() / "images" / "c.png"));

  report.write_csv(tmp.path() / "eval.csv");
  std::istringstream csv(slurp(tmp.path() / "eval.csv"));
  std::string line;
  std::getline(csv, line);
  CHECK(line == "image,psnr,ssim,bicubic_psnr,bicubic_ssim,psnr_gain,ssim_gain");
  int lines = 0;
  while (std::getline(csv, line)) ++lines;
  CHECK(lines == 5);

  // Pairs at another resolution are refused.
  auto wrong = pairs;
  wrong[1].hr = Image(64, 64);
  CHECK_THROWS_AS(evaluate(model, wrong, opts), ConfigError);
}

TEST_CASE("bench reports token, attention, step and parameter counts") {
  const RunConfig cfg;
  const Model model(cfg);
  const auto b = bench(model);
  std::vector<int> tokens;
  for (const auto& s : b.scales) tokens.push_back(s.tokens);
  CHECK(tokens == std::vector<int>{1, 4, 16, 64, 256});
  CHECK(b.total_tokens == 341);
  CHECK(b.prefix_tokens == 256);
  // Prefix rows see the prefix; a scale-k row sees the prefix and scales 1..k.
  long long pairs = 256LL * 256;
  int seen = 256;
  for (int t : tokens) {
    seen += t;
    pairs += static_cast<long long>(t) * seen;
  }
  CHECK(b.attention_pairs == pairs);
  CHECK(b.forward_passes == 5);
  CHECK(b.refiner_steps == 10);
  CHECK(b.reference_scales.size() == 10);
  CHECK(b.reference_total_tokens == 2240);
  CHECK(b.reference_prefix_tokens == 1024);
  CHECK(b.tokenizer_parameters + b.arm_parameters + b.refiner_parameters == model.parameter_count());
  const auto again = bench(Model(cfg));
  CHECK(again.arm_parameters == b.arm_parameters);
  CHECK(again.refiner_parameters == b.refiner_parameters);
}
