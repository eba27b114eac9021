#include <limits>
#include <string>

#include "varsr/error.hpp"
#include "varsr/numerics/ops.hpp"
#include "varsr/tokenizer.hpp"

namespace varsr::tokenizer {

void TokenPyramid::validate(int vocab) const {
  validate_schedule(schedule);
  if (indices.size() != schedule.size())
    throw ShapeError("pyramid has " + std::to_string(indices.size()) + " maps for " +
                     std::to_string(schedule.size()) + " scales");
  for (size_t k = 0; k < schedule.size(); ++k) {
    if (static_cast<int>(indices[k].size()) != schedule[k].tokens())
      throw ShapeError("scale " + std::to_string(k + 1) + " map has " + std::to_string(indices[k].size()) +
                       " tokens, expected " + std::to_string(schedule[k].tokens()));
    for (int v : indices[k])
      if (v < 0 || v >= vocab)
        throw IndexError("token " + std::to_string(v) + " outside [0, " + std::to_string(vocab) + ")");
  }
}

std::vector<int> TokenPyramid::flat() const {
  std::vector<int> out;
  for (const auto& m : indices) out.insert(out.end(), m.begin(), m.end());
  return out;
}

template <typename T>
BasicTensor<T> lookup(const BasicTensor<T>& codebook, std::span<const int> idx) {
  return ops::index_select(codebook, idx);
}

template <typename T>
int nearest_code(std::span<const T> vec, std::span<const T> codebook, int vocab) {
  const size_t d = vec.size();
  int best = -1;
  T best_dist = std::numeric_limits<T>::infinity();
  for (int v = 0; v < vocab; ++v) {
    const T* e = codebook.data() + static_cast<size_t>(v) * d;
    T dist = 0;
    for (size_t c = 0; c < d; ++c) {
      const T diff = vec[c] - e[c];
      dist += diff * diff;
    }
    if (dist < best_dist) {
      best_dist = dist;
      best = v;
    }
  }
  if (best < 0) throw GenerationError("no finite codebook distance (non-finite latent or codebook)");
  return best;
}

template <typename T>
std::vector<T> area_downsample(std::span<const T> map, ScaleDims from, int dim, ScaleDims to) {
  if (to.h > from.h || to.w > from.w || to.h < 1 || to.w < 1)
    throw ShapeError("area_downsample: cannot pool " + std::to_string(from.h) + "x" + std::to_string(from.w) +
                     " to " + std::to_string(to.h) + "x" + std::to_string(to.w));
  if (map.size() != static_cast<size_t>(from.tokens()) * dim) throw ShapeError("area_downsample: map size mismatch");
  std::vector<T> out(static_cast<size_t>(to.tokens()) * dim, T(0));
  for (int i = 0; i < to.h; ++i) {
    const int y0 = i * from.h / to.h;
    const int y1 = ((i + 1) * from.h + to.h - 1) / to.h;
    for (int j = 0; j < to.w; ++j) {
      const int x0 = j * from.w / to.w;
      const int x1 = ((j + 1) * from.w + to.w - 1) / to.w;
      T* dst = out.data() + (static_cast<size_t>(i) * to.w + j) * dim;
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          const T* src = map.data() + (static_cast<size_t>(y) * from.w + x) * dim;
          for (int c = 0; c < dim; ++c) dst[c] += src[c];
        }
      const T inv = T(1) / static_cast<T>((y1 - y0) * (x1 - x0));
      for (int c = 0; c < dim; ++c) dst[c] *= inv;
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> interpolate_tokens(const BasicTensor<T>& codebook, std::span<const int> idx, int batch, ScaleDims from,
                                  ScaleDims to) {
  if (to.h < from.h || to.w < from.w) throw ShapeError("interpolate_tokens: target smaller than source");
  if (static_cast<int>(idx.size()) != batch * from.tokens())
    throw ShapeError("interpolate_tokens: expected " + std::to_string(batch * from.tokens()) + " indices, got " +
                     std::to_string(idx.size()));
  auto emb = ops::reshape(lookup(codebook, idx), {batch, from.h, from.w, codebook.dim(1)});
  if (from == to) return emb;
  return ops::resize_bilinear(emb, to.h, to.w);
}

namespace {

template <typename T>
void check_codebook(const BasicTensor<T>& codebook, int dim) {
  if (codebook.rank() != 2 || codebook.dim(0) == 0) throw ConfigError("codebook is empty");
  if (codebook.dim(1) != dim)
    throw ShapeError("codebook width " + std::to_string(codebook.dim(1)) + " does not match latent width " +
                     std::to_string(dim));
}

// acc += upsample(lookup(idx)) for one scale. Shared by quantization and
// reconstruction so both accumulate bit-identically.
template <typename T>
void accumulate_scale(std::vector<T>& acc, const BasicTensor<T>& codebook, std::span<const int> idx, ScaleDims dims,
                      ScaleDims frame) {
  NoGradGuard guard;
  const auto up = interpolate_tokens(codebook, idx, 1, dims, frame);
  const auto src = up.data();
  for (size_t i = 0; i < acc.size(); ++i) acc[i] += src[i];
}

}  // namespace

template <typename T>
Quantized<T> quantize_pyramid(std::span<const T> f, int dim, const BasicTensor<T>& codebook, const Schedule& schedule) {
  validate_schedule(schedule);
  check_codebook(codebook, dim);
  const ScaleDims frame = schedule.back();
  if (f.size() != static_cast<size_t>(frame.tokens()) * dim)
    throw ShapeError("latent has " + std::to_string(f.size()) + " values, schedule expects " +
                     std::to_string(frame.tokens() * dim));
  const int vocab = codebook.dim(0);
  Quantized<T> q;
  q.pyramid.schedule = schedule;
  q.quantized_sum.assign(f.size(), T(0));
  std::vector<T> rest(f.size());
  for (const auto& dims : schedule) {
    for (size_t i = 0; i < f.size(); ++i) rest[i] = f[i] - q.quantized_sum[i];
    auto target = area_downsample<T>(rest, frame, dim, dims);
    std::vector<int> idx(static_cast<size_t>(dims.tokens()));
    for (int p = 0; p < dims.tokens(); ++p)
      idx[p] = nearest_code<T>(std::span<const T>(target.data() + static_cast<size_t>(p) * dim, dim),
                               codebook.data(), vocab);
    accumulate_scale(q.quantized_sum, codebook, idx, dims, frame);
    q.pyramid.indices.push_back(std::move(idx));
    q.targets.push_back(std::move(target));
  }
  q.residual.resize(f.size());
  for (size_t i = 0; i < f.size(); ++i) q.residual[i] = f[i] - q.quantized_sum[i];
  return q;
}

template <typename T>
std::vector<T> reconstruct_sum(const TokenPyramid& pyramid, const BasicTensor<T>& codebook, std::span<const char> keep) {
  if (codebook.rank() != 2 || codebook.dim(0) == 0) throw ConfigError("codebook is empty");
  pyramid.validate(codebook.dim(0));
  if (!keep.empty() && static_cast<int>(keep.size()) != pyramid.scales())
    throw ShapeError("keep mask length does not match the number of scales");
  const ScaleDims frame = pyramid.schedule.back();
  std::vector<T> acc(static_cast<size_t>(frame.tokens()) * codebook.dim(1), T(0));
  for (int k = 0; k < pyramid.scales(); ++k)
    if (keep.empty() || keep[k]) accumulate_scale(acc, codebook, pyramid.indices[k], pyramid.schedule[k], frame);
  return acc;
}

Tensor reconstruct_sum_batch(std::span<const TokenPyramid> pyramids, const Tensor& codebook, std::span<const char> keep) {
  if (pyramids.empty()) throw ShapeError("reconstruct_sum_batch: empty batch");
  const Schedule& schedule = pyramids.front().schedule;
  const int batch = static_cast<int>(pyramids.size());
  if (!keep.empty() && keep.size() != schedule.size())
    throw ShapeError("keep mask length does not match the number of scales");
  Tensor acc;
  for (size_t k = 0; k < schedule.size(); ++k) {
    if (!keep.empty() && !keep[k]) continue;
    std::vector<int> idx;
    for (const auto& p : pyramids) {
      if (p.schedule != schedule) throw ShapeError("reconstruct_sum_batch: pyramids use different schedules");
      idx.insert(idx.end(), p.indices[k].begin(), p.indices[k].end());
    }
    auto up = interpolate_tokens(codebook, idx, batch, schedule[k], schedule.back());
    acc = acc.defined() ? ops::add(acc, up) : up;
  }
  return acc;
}

std::vector<double> widened_residual(std::span<const float> f, std::span<const float> sum) {
  if (f.size() != sum.size()) throw ShapeError("widened_residual: size mismatch");
  std::vector<double> z(f.size());
  for (size_t i = 0; i < f.size(); ++i) z[i] = static_cast<double>(f[i]) - static_cast<double>(sum[i]);
  return z;
}

std::vector<char> scale_dropout(int scales, double drop_prob, Rng& rng) {
  if (!(drop_prob >= 0.0 && drop_prob <= 1.0)) throw ConfigError("scale dropout probability must lie in [0, 1]");
  if (scales < 1) throw ConfigError("scale dropout needs at least one scale");
  std::vector<char> keep(static_cast<size_t>(scales), 1);
  for (int k = 0; k + 1 < scales; ++k) keep[k] = rng.bernoulli(drop_prob) ? 0 : 1;
  return keep;
}

#define VARSR_QUANT_INSTANTIATE(T)                                                                                 \
  template BasicTensor<T> lookup(const BasicTensor<T>&, std::span<const int>);                                    \
  template int nearest_code(std::span<const T>, std::span<const T>, int);                                         \
  template std::vector<T> area_downsample(std::span<const T>, ScaleDims, int, ScaleDims);                         \
  template BasicTensor<T> interpolate_tokens(const BasicTensor<T>&, std::span<const int>, int, ScaleDims, ScaleDims); \
  template Quantized<T> quantize_pyramid(std::span<const T>, int, const BasicTensor<T>&, const Schedule&);        \
  template std::vector<T> reconstruct_sum(const TokenPyramid&, const BasicTensor<T>&, std::span<const char>);

VARSR_QUANT_INSTANTIATE(float)
VARSR_QUANT_INSTANTIATE(double)

}  // namespace varsr::tokenizer
