#include <string>

#include "varsr/error.hpp"
#include "varsr/numerics/ops.hpp"
#include "varsr/tokenizer.hpp"

namespace varsr::tokenizer {

void VaeConfig::validate() const {
  if (widths.size() < 2) throw ConfigError("autoencoder needs at least one downsampling stage");
  for (int w : widths)
    if (w < 1) throw ConfigError("autoencoder widths must be positive");
  if (latent_dim < 1) throw ConfigError("latent width must be positive");
}

template <typename T>
Vae<T>::Vae(const VaeConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const auto& w = cfg_.widths;
  const int stages = static_cast<int>(w.size()) - 1;
  enc_in_ = Conv2d<T>(3, w[0], 3, 1, 1, rng);
  for (int s = 0; s < stages; ++s)
    enc_.push_back({Conv2d<T>(w[s], w[s + 1], 3, 2, 1, rng), Conv2d<T>(w[s + 1], w[s + 1], 3, 1, 1, rng)});
  enc_out_ = Conv2d<T>(w[stages], cfg_.latent_dim, 1, 1, 0, rng);
  dec_in_ = Conv2d<T>(cfg_.latent_dim, w[stages], 1, 1, 0, rng);
  dec_mid_ = Conv2d<T>(w[stages], w[stages], 3, 1, 1, rng);
  for (int s = stages - 1; s >= 0; --s)
    dec_.push_back({Conv2d<T>(w[s + 1], w[s], 3, 1, 1, rng), Conv2d<T>(w[s], w[s], 3, 1, 1, rng)});
  dec_out_ = Conv2d<T>(w[0], 3, 3, 1, 1, rng);
}

template <typename T>
BasicTensor<T> Vae<T>::encode(const BasicTensor<T>& images) const {
  if (images.rank() != 4 || images.dim(1) != 3)
    throw ShapeError("encode expects [B,3,H,W], got " + to_string(images.shape()));
  const int f = cfg_.factor();
  if (images.dim(2) % f != 0 || images.dim(3) % f != 0)
    throw ShapeError("image dims " + std::to_string(images.dim(2)) + "x" + std::to_string(images.dim(3)) +
                     " are not divisible by the downsampling factor " + std::to_string(f));
  auto x = enc_in_(ops::add_scalar(images, T(-0.5)));
  for (const auto& st : enc_) {
    x = ops::silu(st.resample(x));
    x = ops::add(x, st.residual(ops::silu(x)));
  }
  x = enc_out_(ops::silu(x));
  return ops::permute(x, {0, 2, 3, 1});
}

template <typename T>
BasicTensor<T> Vae<T>::decode(const BasicTensor<T>& latent) const {
  if (latent.rank() != 4 || latent.dim(3) != cfg_.latent_dim)
    throw ShapeError("decode expects [B,h,w," + std::to_string(cfg_.latent_dim) + "], got " +
                     to_string(latent.shape()));
  auto x = dec_in_(ops::permute(latent, {0, 3, 1, 2}));
  x = ops::add(x, dec_mid_(ops::silu(x)));
  for (const auto& st : dec_) {
    x = ops::silu(st.resample(ops::upsample_nearest2x(x)));
    x = ops::add(x, st.residual(ops::silu(x)));
  }
  return ops::add_scalar(dec_out_(ops::silu(x)), T(0.5));
}

template <typename T>
void Vae<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  enc_in_.collect(out, prefix + ".enc.in");
  for (size_t s = 0; s < enc_.size(); ++s) {
    enc_[s].resample.collect(out, prefix + ".enc." + std::to_string(s) + ".down");
    enc_[s].residual.collect(out, prefix + ".enc." + std::to_string(s) + ".res");
  }
  enc_out_.collect(out, prefix + ".enc.out");
  dec_in_.collect(out, prefix + ".dec.in");
  dec_mid_.collect(out, prefix + ".dec.mid");
  for (size_t s = 0; s < dec_.size(); ++s) {
    dec_[s].resample.collect(out, prefix + ".dec." + std::to_string(s) + ".up");
    dec_[s].residual.collect(out, prefix + ".dec." + std::to_string(s) + ".res");
  }
  dec_out_.collect(out, prefix + ".dec.out");
}

template class Vae<float>;
template class Vae<double>;

}  // namespace varsr::tokenizer
