#include <spdlog/spdlog.h>

#include "varsr/error.hpp"
#include "varsr/tokenizer.hpp"

namespace varsr::tokenizer {

Codebook::Codebook(int vocab, int dim, Rng& rng) {
  if (vocab < 1 || dim < 1) throw ConfigError("codebook needs a positive size and width");
  embed = Tensor::zeros({vocab, dim});
  for (auto& v : embed.data()) v = static_cast<float>(rng.normal());
  sync_statistics();
}

void Codebook::sync_statistics() {
  const auto v = static_cast<size_t>(vocab());
  cluster_size.assign(v, 1.0);
  embed_sum.assign(embed.data().begin(), embed.data().end());
  idle_steps.assign(v, 0);
}

int ema_update(Codebook& book, std::span<const float> vectors, std::span<const int> assign, const EmaConfig& cfg,
               Rng& rng) {
  const int vocab = book.vocab(), d = book.dim();
  const size_t n = assign.size();
  if (vectors.size() != n * d) throw ShapeError("ema_update: vectors and assignments disagree");
  if (cfg.decay >= 1.0) return 0;

  std::vector<double> counts(static_cast<size_t>(vocab), 0.0);
  std::vector<double> sums(static_cast<size_t>(vocab) * d, 0.0);
  for (size_t i = 0; i < n; ++i) {
    const int c = assign[i];
    if (c < 0 || c >= vocab) throw IndexError("ema_update: assignment outside the codebook");
    counts[c] += 1.0;
    for (int ch = 0; ch < d; ++ch) sums[static_cast<size_t>(c) * d + ch] += vectors[i * d + ch];
  }
  const double keep = cfg.decay, take = 1.0 - cfg.decay;
  double total = 0.0;
  for (int c = 0; c < vocab; ++c) {
    book.cluster_size[c] = keep * book.cluster_size[c] + take * counts[c];
    total += book.cluster_size[c];
    for (int ch = 0; ch < d; ++ch) {
      auto& s = book.embed_sum[static_cast<size_t>(c) * d + ch];
      s = keep * s + take * sums[static_cast<size_t>(c) * d + ch];
    }
  }
  auto data = book.embed.data();
  for (int c = 0; c < vocab; ++c) {
    const double smoothed = (book.cluster_size[c] + cfg.laplace) / (total + vocab * cfg.laplace) * total;
    for (int ch = 0; ch < d; ++ch)
      data[static_cast<size_t>(c) * d + ch] = static_cast<float>(book.embed_sum[static_cast<size_t>(c) * d + ch] / smoothed);
    book.idle_steps[c] = counts[c] > 0 ? 0 : book.idle_steps[c] + 1;
  }

  int reseeded = 0;
  if (n == 0) return 0;
  for (int c = 0; c < vocab; ++c) {
    if (book.idle_steps[c] <= cfg.dead_patience) continue;
    const size_t r = rng.below(n);
    for (int ch = 0; ch < d; ++ch) {
      const float v = vectors[r * d + ch];
      data[static_cast<size_t>(c) * d + ch] = v;
      book.embed_sum[static_cast<size_t>(c) * d + ch] = v;
    }
    book.cluster_size[c] = 1.0;
    book.idle_steps[c] = 0;
    ++reseeded;
  }
  if (reseeded > 0) spdlog::info("codebook: re-seeded {} dead code(s) from encoder outputs", reseeded);
  return reseeded;
}

}  // namespace varsr::tokenizer
