#include <string>

#include "varsr/error.hpp"
#include "varsr/pipeline.hpp"

namespace varsr::pipeline {

namespace {

tokenizer::Tokenizer make_tokenizer(const RunConfig& cfg) {
  Rng rng = Rng::stream(cfg.seed, "init.tokenizer");
  return tokenizer::Tokenizer(cfg.vae_config(), cfg.tokenizer.vocab, cfg.schedule(), rng);
}

arm::Arm make_arm(const RunConfig& cfg) {
  Rng rng = Rng::stream(cfg.seed, "init.arm");
  return arm::Arm(cfg.arm_config(), rng);
}

refiner::Refiner<float> make_refiner(const RunConfig& cfg) {
  Rng rng = Rng::stream(cfg.seed, "init.refiner");
  return refiner::Refiner<float>(cfg.refiner_config(), rng);
}

}  // namespace

Model::Model(const RunConfig& cfg)
    : config((cfg.validate(), cfg)),
      tokenizer(make_tokenizer(cfg)),
      arm(make_arm(cfg)),
      refiner(make_refiner(cfg)),
      noise(refiner::cosine_schedule(cfg.refiner.train_steps)) {}

ParamList<float> Model::arm_params() const {
  ParamList<float> p;
  arm.collect(p, "arm");
  return p;
}

ParamList<float> Model::refiner_params() const {
  ParamList<float> p;
  refiner.collect(p, "refiner");
  return p;
}

std::int64_t Model::parameter_count() const {
  return count_parameters(tokenizer.vae_params()) + tokenizer.codebook.embed.numel() +
         count_parameters(arm_params()) + count_parameters(refiner_params());
}

void store_tokenizer(Checkpoint& ckpt, const tokenizer::Tokenizer& tok) {
  auto& s = ckpt.add_section("tokenizer");
  store_params(s, tok.vae_params());
  const auto embed = tok.codebook.embed.data();
  s.add("codebook.embed", tok.codebook.embed.shape(), std::vector<float>(embed.begin(), embed.end()));
  // The EMA statistics are double precision and only matter for resuming;
  // they travel in the metadata where JSON keeps them exact.
  ckpt.meta["codebook"] = {{"cluster_size", tok.codebook.cluster_size},
                           {"embed_sum", tok.codebook.embed_sum},
                           {"idle_steps", tok.codebook.idle_steps}};
}

void load_tokenizer(const Checkpoint& ckpt, tokenizer::Tokenizer& tok) {
  const auto& s = ckpt.section("tokenizer");
  load_params(s, tok.vae_params());
  const auto& e = s.at("codebook.embed");
  if (e.shape != tok.codebook.embed.shape())
    throw ConfigError("checkpoint codebook has shape " + to_string(e.shape) + ", config expects " +
                      to_string(tok.codebook.embed.shape()));
  std::copy(e.values.begin(), e.values.end(), tok.codebook.embed.data().begin());
  if (ckpt.meta.contains("codebook")) {
    const auto& cb = ckpt.meta.at("codebook");
    tok.codebook.cluster_size = cb.at("cluster_size").get<std::vector<double>>();
    tok.codebook.embed_sum = cb.at("embed_sum").get<std::vector<double>>();
    tok.codebook.idle_steps = cb.at("idle_steps").get<std::vector<int>>();
  } else {
    tok.codebook.sync_statistics();
  }
}

void store_model(Checkpoint& ckpt, const Model& model) {
  ckpt.config_text = model.config.dump();
  store_tokenizer(ckpt, model.tokenizer);
  store_params(ckpt.add_section("arm"), model.arm_params());
  store_params(ckpt.add_section("refiner"), model.refiner_params());
  ckpt.meta["z_scale"] = model.refiner.z_scale();
}

void load_model(const Checkpoint& ckpt, Model& model) {
  load_tokenizer(ckpt, model.tokenizer);
  if (const auto* s = ckpt.find("arm")) load_params(*s, model.arm_params());
  if (const auto* s = ckpt.find("refiner")) load_params(*s, model.refiner_params());
  if (ckpt.meta.contains("z_scale")) model.refiner.set_z_scale(ckpt.meta.at("z_scale").get<double>());
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  Model model(ckpt.config());
  load_model(ckpt, model);
  return model;
}

}  // namespace varsr::pipeline
