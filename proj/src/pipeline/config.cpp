#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include "varsr/error.hpp"
#include "varsr/pipeline.hpp"

namespace varsr::pipeline {

namespace {

using nlohmann::json;

// Calls f(key, field) for every configurable field.
template <typename Config, typename F>
void visit_fields(Config& c, F&& f) {
  f("data.root", c.data.root);
  f("data.train_images", c.data.train_images);
  f("data.eval_images", c.data.eval_images);
  f("data.source_size", c.data.source_size);
  f("data.hr_size", c.data.hr_size);
  f("data.classes", c.data.classes);
  f("data.neg_fraction", c.data.neg_fraction);
  f("data.eval_seed", c.data.eval_seed);
  f("data.blur_min", c.data.degradation.blur_min);
  f("data.blur_max", c.data.degradation.blur_max);
  f("data.noise_min", c.data.degradation.noise_min);
  f("data.noise_max", c.data.degradation.noise_max);
  f("data.scale_factor", c.data.degradation.factor);

  f("tokenizer.vocab", c.tokenizer.vocab);
  f("tokenizer.widths", c.tokenizer.widths);
  f("tokenizer.latent_dim", c.tokenizer.latent_dim);
  f("tokenizer.steps", c.tokenizer.steps);
  f("tokenizer.finetune_steps", c.tokenizer.finetune_steps);
  f("tokenizer.lr", c.tokenizer.lr);
  f("tokenizer.finetune_lr", c.tokenizer.finetune_lr);
  f("tokenizer.bypass_prob", c.tokenizer.bypass_prob);
  f("tokenizer.commitment", c.tokenizer.commitment);
  f("tokenizer.ema_decay", c.tokenizer.ema_decay);
  f("tokenizer.drop_prob", c.tokenizer.drop_prob);

  f("schedule.scales", c.scales);

  f("model.width", c.model.width);
  f("model.heads", c.model.heads);
  f("model.blocks", c.model.blocks);
  f("model.mlp_ratio", c.model.mlp_ratio);
  f("model.encoder_widths", c.model.encoder_widths);
  f("model.rope_theta", c.model.rope_theta);

  f("refiner.width", c.refiner.width);
  f("refiner.blocks", c.refiner.blocks);
  f("refiner.train_steps", c.refiner.train_steps);
  f("refiner.sample_steps", c.refiner.sample_steps);
  f("refiner.draws", c.refiner.draws);
  f("refiner.temperature", c.refiner.temperature);
  f("refiner.clip", c.refiner.clip);

  f("train.batch", c.train.batch);
  f("train.lr", c.train.lr);
  f("train.weight_decay", c.train.weight_decay);
  f("train.loss_lambda", c.train.loss_lambda);
  f("train.pretrain_steps", c.train.pretrain_steps);
  f("train.finetune_steps", c.train.finetune_steps);
  f("train.checkpoint_every", c.train.checkpoint_every);
  f("train.eval_batch", c.train.eval_batch);

  f("guidance.lambda_max", c.guidance.lambda_max);
  f("guidance.ramp", c.guidance.ramp);
  f("guidance.refiner", c.guidance.refiner);

  f("sample.temperature", c.sample.temperature);
  f("sample.top_k", c.sample.top_k);
  f("sample.greedy", c.sample.greedy);

  f("run.seed", c.seed);

  f("reference.scales", c.reference.scales);
  f("reference.vocab", c.reference.vocab);
  f("reference.model_blocks", c.reference.model_blocks);
  f("reference.model_width", c.reference.model_width);
  f("reference.refiner_blocks", c.reference.refiner_blocks);
  f("reference.refiner_width", c.reference.refiner_width);
  f("reference.diffusion_steps", c.reference.diffusion_steps);
  f("reference.sample_steps", c.reference.sample_steps);
  f("reference.batch", c.reference.batch);
  f("reference.lr", c.reference.lr);
  f("reference.weight_decay", c.reference.weight_decay);
  f("reference.tokenizer_iters", c.reference.tokenizer_iters);
  f("reference.pretrain_iters", c.reference.pretrain_iters);
  f("reference.finetune_iters", c.reference.finetune_iters);
  f("reference.loss_lambda", c.reference.loss_lambda);
  f("reference.drop_prob", c.reference.drop_prob);
  f("reference.lambda_max", c.reference.lambda_max);
  f("reference.hr_size", c.reference.hr_size);
  f("reference.lr_size", c.reference.lr_size);
}

[[noreturn]] void type_error(const std::string& key, const char* expected, const json& v) {
  throw ConfigError("config key '" + key + "' expects " + expected + ", got " + v.dump());
}

struct Reader {
  const json& obj;
  int matched = 0;

  const json* get(const std::string& key) {
    auto it = obj.find(key);
    if (it == obj.end()) return nullptr;
    ++matched;
    return &*it;
  }
  void operator()(const std::string& key, std::string& field) {
    if (const json* v = get(key)) {
      if (!v->is_string()) type_error(key, "a string", *v);
      field = v->get<std::string>();
    }
  }
  void operator()(const std::string& key, int& field) {
    if (const json* v = get(key)) {
      if (!v->is_number_integer()) type_error(key, "an integer", *v);
      const auto x = v->get<long long>();
      if (x < INT32_MIN || x > INT32_MAX) type_error(key, "a 32-bit integer", *v);
      field = static_cast<int>(x);
    }
  }
  void operator()(const std::string& key, std::uint64_t& field) {
    if (const json* v = get(key)) {
      if (!v->is_number_unsigned()) type_error(key, "a non-negative integer", *v);
      field = v->get<std::uint64_t>();
    }
  }
  void operator()(const std::string& key, double& field) {
    if (const json* v = get(key)) {
      if (!v->is_number()) type_error(key, "a number", *v);
      field = v->get<double>();
    }
  }
  void operator()(const std::string& key, bool& field) {
    if (const json* v = get(key)) {
      if (!v->is_boolean()) type_error(key, "a boolean", *v);
      field = v->get<bool>();
    }
  }
  void operator()(const std::string& key, std::vector<int>& field) {
    if (const json* v = get(key)) {
      if (!v->is_array()) type_error(key, "an array of integers", *v);
      std::vector<int> out;
      for (const auto& e : *v) {
        if (!e.is_number_integer()) type_error(key, "an array of integers", *v);
        out.push_back(e.get<int>());
      }
      field = std::move(out);
    }
  }
  void operator()(const std::string& key, guidance::Ramp& field) {
    if (const json* v = get(key)) {
      if (!v->is_string()) type_error(key, "\"linear\" or \"constant\"", *v);
      field = guidance::parse_ramp(v->get<std::string>());
    }
  }
};

struct Writer {
  json& obj;
  template <typename T>
  void operator()(const std::string& key, const T& field) {
    obj[key] = field;
  }
  void operator()(const std::string& key, const guidance::Ramp& field) { obj[key] = guidance::to_string(field); }
};

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("invalid config: " + what);
}

bool probability(double p) { return p >= 0.0 && p <= 1.0; }

}  // namespace

void RunConfig::validate() const {
  require(data.train_images >= 1, "data.train_images must be positive");
  require(data.eval_images >= 1, "data.eval_images must be positive");
  require(data.classes >= 1, "data.classes must be positive");
  require(probability(data.neg_fraction), "data.neg_fraction must lie in [0, 1]");
  require(data.hr_size >= 11, "data.hr_size must be at least 11");
  require(data.source_size * 4 >= data.hr_size * 5, "data.source_size must be at least 1.25 * data.hr_size");
  data.degradation.validate();
  require(data.hr_size % data.degradation.factor == 0, "data.hr_size must be divisible by data.scale_factor");

  require(tokenizer.vocab >= 2, "tokenizer.vocab must be at least 2");
  require(tokenizer.steps >= 0 && tokenizer.finetune_steps >= 0, "tokenizer step counts must be non-negative");
  require(tokenizer.lr > 0 && tokenizer.finetune_lr > 0, "tokenizer learning rates must be positive");
  require(probability(tokenizer.bypass_prob), "tokenizer.bypass_prob must lie in [0, 1]");
  require(probability(tokenizer.drop_prob), "tokenizer.drop_prob must lie in [0, 1]");
  vae_config().validate();

  const Schedule sched = schedule();
  validate_schedule(sched);
  const ScaleDims last = sched.back();
  const int factor = vae_config().factor();
  require(last.h * factor == data.hr_size && last.w * factor == data.hr_size,
          "final scale " + std::to_string(last.h) + "x" + std::to_string(last.w) + " times the autoencoder factor " +
              std::to_string(factor) + " must equal data.hr_size " + std::to_string(data.hr_size));
  arm_config().validate();
  refiner_config().validate();
  require(refiner.train_steps >= 2, "refiner.train_steps must be at least 2");
  require(refiner.sample_steps >= 1 && refiner.sample_steps <= refiner.train_steps,
          "refiner.sample_steps must lie in [1, refiner.train_steps]");
  require(refiner.draws >= 1, "refiner.draws must be positive");
  require(refiner.temperature >= 0, "refiner.temperature must be non-negative");

  require(train.batch >= 1, "train.batch must be positive");
  require(train.eval_batch >= 1, "train.eval_batch must be positive");
  require(train.lr > 0, "train.lr must be positive");
  require(train.weight_decay >= 0, "train.weight_decay must be non-negative");
  require(train.loss_lambda >= 0, "train.loss_lambda must be non-negative");
  require(train.pretrain_steps >= 0 && train.finetune_steps >= 0, "train step counts must be non-negative");
  require(train.checkpoint_every >= 1, "train.checkpoint_every must be positive");

  require(guidance.lambda_max >= 0, "guidance.lambda_max must be non-negative");
  require(sample.temperature >= 0, "sample.temperature must be non-negative");
  require(sample.top_k >= 0, "sample.top_k must be non-negative");
}

tokenizer::VaeConfig RunConfig::vae_config() const {
  tokenizer::VaeConfig v;
  v.widths = tokenizer.widths;
  v.latent_dim = tokenizer.latent_dim;
  return v;
}

tokenizer::TrainConfig RunConfig::tokenizer_train_config() const {
  tokenizer::TrainConfig t;
  t.lr = tokenizer.lr;
  t.finetune_lr = tokenizer.finetune_lr;
  t.bypass_prob = tokenizer.bypass_prob;
  t.commitment = tokenizer.commitment;
  t.ema.decay = tokenizer.ema_decay;
  t.drop_prob = tokenizer.drop_prob;
  return t;
}

arm::ArmConfig RunConfig::arm_config() const {
  arm::ArmConfig a;
  a.width = model.width;
  a.heads = model.heads;
  a.blocks = model.blocks;
  a.mlp_ratio = model.mlp_ratio;
  a.vocab = tokenizer.vocab;
  a.latent_dim = tokenizer.latent_dim;
  a.classes = data.classes;
  a.latent_factor = vae_config().factor();
  a.encoder_widths = model.encoder_widths;
  a.rope_theta = model.rope_theta;
  a.schedule = schedule();
  return a;
}

refiner::RefinerConfig RunConfig::refiner_config() const {
  refiner::RefinerConfig r;
  r.latent_dim = tokenizer.latent_dim;
  r.cond_dim = model.width;
  r.width = refiner.width;
  r.blocks = refiner.blocks;
  return r;
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig cfg;
  Reader reader{j};
  visit_fields(cfg, reader);
  if (reader.matched != static_cast<int>(j.size())) {
    const auto keys = config_keys();
    for (const auto& [key, value] : j.items())
      if (!std::binary_search(keys.begin(), keys.end(), key)) throw ConfigError("unknown config key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::parse(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return from_json(j);
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

json RunConfig::to_json() const {
  json j = json::object();
  Writer writer{j};
  visit_fields(*this, writer);
  return j;
}

std::string RunConfig::dump() const { return to_json().dump(2) + "\n"; }

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  RunConfig cfg;
  visit_fields(cfg, [&](const std::string& key, auto&) { keys.push_back(key); });
  std::sort(keys.begin(), keys.end());
  return keys;
}

}  // namespace varsr::pipeline
