#pragma once

#include <span>
#include <type_traits>
#include <vector>

#include "varsr/numerics/tensor.hpp"

// Differentiable kernels. Every function records a backward closure when
// grad mode is on and at least one input requires a gradient.
namespace varsr::ops {

// Elementwise with NumPy-style right-aligned broadcasting.
template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& a, T s);
template <typename T> BasicTensor<T> mul_scalar(const BasicTensor<T>& a, T s);

template <typename T> BasicTensor<T> silu(const BasicTensor<T>& x);
// tanh approximation, as in GPT-2.
template <typename T> BasicTensor<T> gelu(const BasicTensor<T>& x);

template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);
template <typename T> BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<int>& perm);
template <typename T> BasicTensor<T> slice(const BasicTensor<T>& x, int axis, int start, int length);
template <typename T> BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis);

template <typename T> BasicTensor<T> sum(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> mean_axis(const BasicTensor<T>& x, int axis, bool keepdim);
template <typename T> BasicTensor<T> mse_loss(const BasicTensor<T>& a, const BasicTensor<T>& b);

// [M,K] x [K,N] -> [M,N]
template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);
// x[..., in] * w[in, out] + bias[out]; bias may be an undefined/empty tensor.
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const std::type_identity_t<BasicTensor<T>>* bias);

// Along the last axis.
template <typename T> BasicTensor<T> softmax(const BasicTensor<T>& x);
template <typename T> BasicTensor<T> log_softmax(const BasicTensor<T>& x);
// Mean of -log softmax(logits)[target] over rows. logits: [N, V].
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets);

// Normalizes the last axis; gain/bias may be null for the non-affine form.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const std::type_identity_t<BasicTensor<T>>* gain,
                          const std::type_identity_t<BasicTensor<T>>* bias, std::type_identity_t<T> eps = T(1e-6));

// x: [N,C,H,W], w: [O,C,kh,kw], bias: [O] or null. Cross-correlation.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const std::type_identity_t<BasicTensor<T>>* bias,
                      int stride, int pad);
// [N,C,H,W] -> [N,C,2H,2W]
template <typename T> BasicTensor<T> upsample_nearest2x(const BasicTensor<T>& x);

// Bilinear resize with aligned corners on channel-last maps: [B,h,w,C] -> [B,H,W,C].
template <typename T> BasicTensor<T> resize_bilinear(const BasicTensor<T>& x, int out_h, int out_w);

// Row gather: table [N,C], result [idx.size(), C].
template <typename T>
BasicTensor<T> index_select(const BasicTensor<T>& table, std::span<const int> idx);

// Pairwise rotation of channels (2p, 2p+1) of x: [B,H,L,D] by per-(token,pair)
// angles given as cos/sin tables of shape [L, D/2].
template <typename T>
BasicTensor<T> rotate_pairs(const BasicTensor<T>& x, std::span<const T> cos_table,
                            std::span<const T> sin_table);

// Scaled dot-product attention. q: [B,H,Lq,D], k/v: [B,H,Lk,D]. Query row r
// may attend to keys [0, row_limit[r]); every block-causal mask over an
// ordered sequence has this prefix shape.
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         std::span<const int> row_limit);

}  // namespace varsr::ops
