#include "varsr/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "varsr/error.hpp"
#include "varsr/numerics/linalg.hpp"

namespace varsr::ops {

namespace {

template <typename T>
using Node = detail::Node<T>;
template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
NodePtr<T> new_node(Shape shape, std::vector<T> value) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

// Marks `out` as part of the tape when any input needs a gradient. Returns
// whether a backward closure should be attached.
template <typename T>
bool track(const NodePtr<T>& out, std::initializer_list<const BasicTensor<T>*> inputs) {
  if (!GradMode::enabled()) return false;
  bool any = false;
  for (const auto* t : inputs)
    if (t && t->defined() && t->requires_grad()) any = true;
  if (!any) return false;
  out->requires_grad = true;
  for (const auto* t : inputs)
    if (t && t->defined()) out->inputs.push_back(t->node_ptr());
  return true;
}

template <typename T>
bool wants(const BasicTensor<T>& t) {
  return t.defined() && t.requires_grad();
}

// ---- broadcasting -------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::int64_t> stride_a;
  std::vector<std::int64_t> stride_b;
  bool same = false;
};

std::vector<std::int64_t> aligned_strides(const Shape& s, const Shape& out) {
  const size_t r = out.size();
  std::vector<std::int64_t> st(r, 0);
  std::int64_t acc = 1;
  for (size_t i = 0; i < s.size(); ++i) {
    const size_t src = s.size() - 1 - i;
    const size_t dst = r - 1 - i;
    st[dst] = s[src] == 1 ? 0 : acc;
    acc *= s[src];
  }
  return st;
}

Broadcast broadcast(const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.same = true;
    return bc;
  }
  const size_t r = std::max(a.size(), b.size());
  bc.out.assign(r, 1);
  for (size_t i = 0; i < r; ++i) {
    const int da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const int db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    bc.out[r - 1 - i] = std::max(da, db);
  }
  bc.stride_a = aligned_strides(a, bc.out);
  bc.stride_b = aligned_strides(b, bc.out);
  return bc;
}

// Calls f(out_index, a_offset, b_offset) for every output element.
template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  const std::int64_t n = numel_of(bc.out);
  if (bc.same) {
    for (std::int64_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const int r = static_cast<int>(bc.out.size());
  std::vector<int> idx(static_cast<size_t>(r), 0);
  std::int64_t oa = 0;
  std::int64_t ob = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (int d = r - 1; d >= 0; --d) {
      oa += bc.stride_a[d];
      ob += bc.stride_b[d];
      if (++idx[d] < bc.out[d]) break;
      oa -= bc.stride_a[d] * bc.out[d];
      ob -= bc.stride_b[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { kAdd, kSub, kMul };

template <typename T>
BasicTensor<T> binary(const BasicTensor<T>& a, const BasicTensor<T>& b, BinOp op) {
  const Broadcast bc = broadcast(a.shape(), b.shape());
  std::vector<T> out(static_cast<size_t>(numel_of(bc.out)));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  switch (op) {
    case BinOp::kAdd:
      for_each_broadcast(bc, [&](auto i, auto ia, auto ib) { out[i] = pa[ia] + pb[ib]; });
      break;
    case BinOp::kSub:
      for_each_broadcast(bc, [&](auto i, auto ia, auto ib) { out[i] = pa[ia] - pb[ib]; });
      break;
    case BinOp::kMul:
      for_each_broadcast(bc, [&](auto i, auto ia, auto ib) { out[i] = pa[ia] * pb[ib]; });
      break;
  }
  auto node = new_node<T>(bc.out, std::move(out));
  if (track(node, {&a, &b})) {
    Node<T>* na = a.node();
    Node<T>* nb = b.node();
    node->backward = [na, nb, bc, op](Node<T>& self) {
      const T* g = self.grad.data();
      T* ga = na->requires_grad ? na->grad_data() : nullptr;
      T* gb = nb->requires_grad ? nb->grad_data() : nullptr;
      const T* va = na->value.data();
      const T* vb = nb->value.data();
      for_each_broadcast(bc, [&](auto i, auto ia, auto ib) {
        switch (op) {
          case BinOp::kAdd:
            if (ga) ga[ia] += g[i];
            if (gb) gb[ib] += g[i];
            break;
          case BinOp::kSub:
            if (ga) ga[ia] += g[i];
            if (gb) gb[ib] -= g[i];
            break;
          case BinOp::kMul:
            if (ga) ga[ia] += g[i] * vb[ib];
            if (gb) gb[ib] += g[i] * va[ia];
            break;
        }
      });
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
void check_rank(const BasicTensor<T>& x, int rank, const char* what) {
  if (x.rank() != rank)
    throw ShapeError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                     to_string(x.shape()));
}

}  // namespace

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, BinOp::kAdd);
}
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, BinOp::kSub);
}
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary(a, b, BinOp::kMul);
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += s;
  auto node = new_node<T>(a.shape(), std::move(out));
  if (track(node, {&a})) {
    Node<T>* na = a.node();
    node->backward = [na](Node<T>& self) {
      T* ga = na->grad_data();
      for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  auto node = new_node<T>(a.shape(), std::move(out));
  if (track(node, {&a})) {
    Node<T>* na = a.node();
    node->backward = [na, s](Node<T>& self) {
      T* ga = na->grad_data();
      for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * s;
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& x) {
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (size_t i = 0; i < in.size(); ++i) out[i] = in[i] / (T(1) + std::exp(-in[i]));
  auto node = new_node<T>(x.shape(), std::move(out));
  if (track(node, {&x})) {
    Node<T>* nx = x.node();
    node->backward = [nx](Node<T>& self) {
      T* gx = nx->grad_data();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        const T v = nx->value[i];
        const T s = T(1) / (T(1) + std::exp(-v));
        gx[i] += self.grad[i] * s * (T(1) + v * (T(1) - s));
      }
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  const auto in = x.data();
  std::vector<T> out(in.size());
  for (size_t i = 0; i < in.size(); ++i) {
    const T v = in[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  auto node = new_node<T>(x.shape(), std::move(out));
  if (track(node, {&x})) {
    Node<T>* nx = x.node();
    node->backward = [nx](Node<T>& self) {
      T* gx = nx->grad_data();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        const T v = nx->value[i];
        const T u = kC * (v + kA * v * v * v);
        const T th = std::tanh(u);
        const T du = kC * (T(1) + T(3) * kA * v * v);
        gx[i] += self.grad[i] * (T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du);
      }
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  auto node = new_node<T>(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (track(node, {&x})) {
    Node<T>* nx = x.node();
    node->backward = [nx](Node<T>& self) {
      T* gx = nx->grad_data();
      for (size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw ShapeError("permute rank mismatch");
  std::vector<int> seen(static_cast<size_t>(r), 0);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[p]++) throw ShapeError("permute: invalid permutation");
  }
  const Shape& in = x.shape();
  std::vector<std::int64_t> in_stride(static_cast<size_t>(r), 1);
  for (int d = r - 2; d >= 0; --d) in_stride[d] = in_stride[d + 1] * in[d + 1];
  Shape out_shape(static_cast<size_t>(r));
  std::vector<std::int64_t> src_stride(static_cast<size_t>(r));
  for (int d = 0; d < r; ++d) {
    out_shape[d] = in[perm[d]];
    src_stride[d] = in_stride[perm[d]];
  }
  // src offset for every output element, reused by backward.
  const std::int64_t n = x.numel();
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<size_t>(n));
  {
    std::vector<int> idx(static_cast<size_t>(r), 0);
    std::int64_t off = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      (*map)[i] = off;
      for (int d = r - 1; d >= 0; --d) {
        off += src_stride[d];
        if (++idx[d] < out_shape[d]) break;
        off -= src_stride[d] * out_shape[d];
        idx[d] = 0;
      }
    }
  }
  std::vector<T> out(static_cast<size_t>(n));
  const T* src = x.data().data();
  for (std::int64_t i = 0; i < n; ++i) out[i] = src[(*map)[i]];
  auto node = new_node<T>(out_shape, std::move(out));
  if (track(node, {&x})) {
    Node<T>* nx = x.node();
    node->backward = [nx, map](Node<T>& self) {
      T* gx = nx->grad_data();
      for (size_t i = 0; i < self.grad.size(); ++i) gx[(*map)[i]] += self.grad[i];
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, int axis, int start, int length) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("slice axis out of range");
  const Shape& in = x.shape();
  if (start < 0 || length < 0 || start + length > in[axis])
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) +
                     ") out of range for " + to_string(in));
  std::int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= in[d];
  std::int64_t inner = 1;
  for (int d = axis + 1; d < r; ++d) inner *= in[d];
  const std::int64_t src_block = static_cast<std::int64_t>(in[axis]) * inner;
  const std::int64_t dst_block = static_cast<std::int64_t>(length) * inner;
  std::vector<T> out(static_cast<size_t>(outer * dst_block));
  const T* src = x.data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(src + o * src_block + start * inner, dst_block, out.data() + o * dst_block);
  Shape out_shape = in;
  out_shape[axis] = length;
  auto node = new_node<T>(out_shape, std::move(out));
  if (track(node, {&x})) {
    Node<T>* nx = x.node();
    node->backward = [nx, outer, inner, src_block, dst_block, start](Node<T>& self) {
      T* gx = nx->grad_data();
      for (std::int64_t o = 0; o < outer; ++o) {
        T* dst = gx + o * src_block + start * inner;
        const T* g = self.grad.data() + o * dst_block;
        for (std::int64_t i = 0; i < dst_block; ++i) dst[i] += g[i];
      }
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const int r = parts[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("concat axis out of range");
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw ShapeError("concat rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != axis && p.shape()[d] != parts[0].shape()[d])
        throw ShapeError("concat shape mismatch: " + to_string(p.shape()) + " vs " +
                         to_string(parts[0].shape()));
    out_shape[axis] += p.shape()[axis];
  }
  std::int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[d];
  std::int64_t inner = 1;
  for (int d = axis + 1; d < r; ++d) inner *= out_shape[d];
  const std::int64_t out_block = static_cast<std::int64_t>(out_shape[axis]) * inner;
  std::vector<T> out(static_cast<size_t>(outer * out_block));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::int64_t blk = static_cast<std::int64_t>(p.shape()[axis]) * inner;
    const T* src = p.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(src + o * blk, blk, out.data() + o * out_block + off);
    off += blk;
  }
  auto node = new_node<T>(out_shape, std::move(out));
  if (GradMode::enabled()) {
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (any) {
      node->requires_grad = true;
      std::vector<Node<T>*> raw;
      for (const auto& p : parts) {
        node->inputs.push_back(p.node_ptr());
        raw.push_back(p.node());
      }
      node->backward = [raw, offsets, outer, out_block, inner, axis](Node<T>& self) {
        for (size_t k = 0; k < raw.size(); ++k) {
          Node<T>* np = raw[k];
          if (!np->requires_grad) continue;
          const std::int64_t blk = static_cast<std::int64_t>(np->shape[axis]) * inner;
          T* gp = np->grad_data();
          for (std::int64_t o = 0; o < outer; ++o) {
            const T* g = self.grad.data() + o * out_block + offsets[k];
            for (std::int64_t i = 0; i < blk; ++i) gp[o * blk + i] += g[i];
          }
        }
      };
    }
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  auto node = new_node<T>({}, {acc});
  if (track(node, {&x})) {
    Node<T>* nx = x.node();
    node->backward = [nx](Node<T>& self) {
      T* gx = nx->grad_data();
      const T g = self.grad[0];
      for (size_t i = 0; i < nx->value.size(); ++i) gx[i] += g;
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return mul_scalar(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
BasicTensor<T> mean_axis(const BasicTensor<T>& x, int axis, bool keepdim) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("mean_axis axis out of range");
  const Shape& in = x.shape();
  std::int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= in[d];
  std::int64_t inner = 1;
  for (int d = axis + 1; d < r; ++d) inner *= in[d];
  const int len = in[axis];
  if (len == 0) throw ShapeError("mean over empty axis");
  std::vector<T> out(static_cast<size_t>(outer * inner), T(0));
  const T* src = x.data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (int a = 0; a < len; ++a)
      for (std::int64_t i = 0; i < inner; ++i) out[o * inner + i] += src[(o * len + a) * inner + i];
  const T inv = T(1) / static_cast<T>(len);
  for (auto& v : out) v *= inv;
  Shape out_shape;
  for (int d = 0; d < r; ++d) {
    if (d != axis)
      out_shape.push_back(in[d]);
    else if (keepdim)
      out_shape.push_back(1);
  }
  auto node = new_node<T>(out_shape, std::move(out));
  if (track(node, {&x})) {
    Node<T>* nx = x.node();
    node->backward = [nx, outer, inner, len, inv](Node<T>& self) {
      T* gx = nx->grad_data();
      for (std::int64_t o = 0; o < outer; ++o)
        for (int a = 0; a < len; ++a)
          for (std::int64_t i = 0; i < inner; ++i)
            gx[(o * len + a) * inner + i] += self.grad[o * inner + i] * inv;
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> mse_loss(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mse_loss shape mismatch: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const auto pa = a.data();
  const auto pb = b.data();
  const std::int64_t n = a.numel();
  T acc = T(0);
  for (std::int64_t i = 0; i < n; ++i) {
    const T d = pa[i] - pb[i];
    acc += d * d;
  }
  auto node = new_node<T>({}, {acc / static_cast<T>(n)});
  if (track(node, {&a, &b})) {
    Node<T>* na = a.node();
    Node<T>* nb = b.node();
    node->backward = [na, nb, n](Node<T>& self) {
      const T scale = T(2) * self.grad[0] / static_cast<T>(n);
      T* ga = na->requires_grad ? na->grad_data() : nullptr;
      T* gb = nb->requires_grad ? nb->grad_data() : nullptr;
      for (std::int64_t i = 0; i < n; ++i) {
        const T d = (na->value[i] - nb->value[i]) * scale;
        if (ga) ga[i] += d;
        if (gb) gb[i] -= d;
      }
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  check_rank(a, 2, "matmul");
  check_rank(b, 2, "matmul");
  const int m = a.dim(0);
  const int k = a.dim(1);
  const int n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul inner dims differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  std::vector<T> out(static_cast<size_t>(m) * n, T(0));
  if (k > 0) linalg::gemm<T>(false, false, m, n, k, T(1), a.data().data(), k, b.data().data(), n, T(0), out.data(), n);
  auto node = new_node<T>({m, n}, std::move(out));
  if (track(node, {&a, &b})) {
    Node<T>* na = a.node();
    Node<T>* nb = b.node();
    node->backward = [na, nb, m, n, k](Node<T>& self) {
      if (k == 0) return;
      if (na->requires_grad)
        linalg::gemm<T>(false, true, m, k, n, T(1), self.grad.data(), n, nb->value.data(), n, T(1),
                        na->grad_data(), k);
      if (nb->requires_grad)
        linalg::gemm<T>(true, false, k, n, m, T(1), na->value.data(), k, self.grad.data(), n, T(1),
                        nb->grad_data(), n);
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const std::type_identity_t<BasicTensor<T>>* bias) {
  check_rank(w, 2, "linear weight");
  if (x.rank() < 1) throw ShapeError("linear input must have rank >= 1");
  const int in = w.dim(0);
  const int out_dim = w.dim(1);
  if (x.shape().back() != in)
    throw ShapeError("linear: input " + to_string(x.shape()) + " vs weight " + to_string(w.shape()));
  const bool has_bias = bias && bias->defined() && bias->numel() > 0;
  if (has_bias && bias->numel() != out_dim) throw ShapeError("linear: bias size mismatch");
  const int m = static_cast<int>(x.numel() / std::max(in, 1));
  std::vector<T> out(static_cast<size_t>(m) * out_dim, T(0));
  if (has_bias) {
    const T* pb = bias->data().data();
    for (int r = 0; r < m; ++r) std::copy_n(pb, out_dim, out.data() + static_cast<size_t>(r) * out_dim);
  }
  if (in > 0)
    linalg::gemm<T>(false, false, m, out_dim, in, T(1), x.data().data(), in, w.data().data(), out_dim,
                    T(1), out.data(), out_dim);
  Shape out_shape = x.shape();
  out_shape.back() = out_dim;
  auto node = new_node<T>(out_shape, std::move(out));
  if (track(node, {&x, &w, has_bias ? bias : nullptr})) {
    Node<T>* nx = x.node();
    Node<T>* nw = w.node();
    Node<T>* nb = has_bias ? bias->node() : nullptr;
    node->backward = [nx, nw, nb, m, in, out_dim](Node<T>& self) {
      const T* g = self.grad.data();
      if (nx->requires_grad && in > 0)
        linalg::gemm<T>(false, true, m, in, out_dim, T(1), g, out_dim, nw->value.data(), out_dim, T(1),
                        nx->grad_data(), in);
      if (nw->requires_grad && in > 0)
        linalg::gemm<T>(true, false, in, out_dim, m, T(1), nx->value.data(), in, g, out_dim, T(1),
                        nw->grad_data(), out_dim);
      if (nb && nb->requires_grad) {
        T* gb = nb->grad_data();
        for (int r = 0; r < m; ++r)
          for (int c = 0; c < out_dim; ++c) gb[c] += g[static_cast<size_t>(r) * out_dim + c];
      }
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("softmax needs rank >= 1");
  const int v = x.shape().back();
  const std::int64_t rows = v ? x.numel() / v : 0;
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::int64_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * v;
    const T mx = *std::max_element(row, row + v);
    T s = T(0);
    for (int i = 0; i < v; ++i) s += (row[i] = std::exp(row[i] - mx));
    for (int i = 0; i < v; ++i) row[i] /= s;
  }
  auto node = new_node<T>(x.shape(), std::move(out));
  if (track(node, {&x})) {
    Node<T>* nx = x.node();
    node->backward = [nx, rows, v](Node<T>& self) {
      T* gx = nx->grad_data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* y = self.value.data() + r * v;
        const T* g = self.grad.data() + r * v;
        T dot = T(0);
        for (int i = 0; i < v; ++i) dot += g[i] * y[i];
        for (int i = 0; i < v; ++i) gx[r * v + i] += y[i] * (g[i] - dot);
      }
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> log_softmax(const BasicTensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("log_softmax needs rank >= 1");
  const int v = x.shape().back();
  const std::int64_t rows = v ? x.numel() / v : 0;
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::int64_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * v;
    const T mx = *std::max_element(row, row + v);
    T s = T(0);
    for (int i = 0; i < v; ++i) s += std::exp(row[i] - mx);
    const T lse = mx + std::log(s);
    for (int i = 0; i < v; ++i) row[i] -= lse;
  }
  auto node = new_node<T>(x.shape(), std::move(out));
  if (track(node, {&x})) {
    Node<T>* nx = x.node();
    node->backward = [nx, rows, v](Node<T>& self) {
      T* gx = nx->grad_data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* y = self.value.data() + r * v;
        const T* g = self.grad.data() + r * v;
        T gs = T(0);
        for (int i = 0; i < v; ++i) gs += g[i];
        for (int i = 0; i < v; ++i) gx[r * v + i] += g[i] - std::exp(y[i]) * gs;
      }
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets) {
  check_rank(logits, 2, "cross_entropy");
  const int n = logits.dim(0);
  const int v = logits.dim(1);
  if (static_cast<int>(targets.size()) != n)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " rows");
  if (n == 0) throw ShapeError("cross_entropy over zero rows");
  for (int t : targets)
    if (t < 0 || t >= v)
      throw IndexError("cross_entropy target " + std::to_string(t) + " outside [0, " +
                       std::to_string(v) + ")");
  auto probs = std::make_shared<std::vector<T>>(logits.data().begin(), logits.data().end());
  T loss = T(0);
  for (int r = 0; r < n; ++r) {
    T* row = probs->data() + static_cast<size_t>(r) * v;
    const T mx = *std::max_element(row, row + v);
    T s = T(0);
    for (int i = 0; i < v; ++i) s += std::exp(row[i] - mx);
    const T lse = mx + std::log(s);
    loss += lse - row[targets[r]];
    for (int i = 0; i < v; ++i) row[i] = std::exp(row[i] - lse);
  }
  auto node = new_node<T>({}, {loss / static_cast<T>(n)});
  if (track(node, {&logits})) {
    Node<T>* nl = logits.node();
    std::vector<int> tgt(targets.begin(), targets.end());
    node->backward = [nl, probs, tgt = std::move(tgt), n, v](Node<T>& self) {
      T* gl = nl->grad_data();
      const T scale = self.grad[0] / static_cast<T>(n);
      for (int r = 0; r < n; ++r) {
        const T* p = probs->data() + static_cast<size_t>(r) * v;
        T* g = gl + static_cast<size_t>(r) * v;
        for (int i = 0; i < v; ++i) g[i] += scale * p[i];
        g[tgt[r]] -= scale;
      }
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const std::type_identity_t<BasicTensor<T>>* gain,
                          const std::type_identity_t<BasicTensor<T>>* bias, std::type_identity_t<T> eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm needs rank >= 1");
  const int c = x.shape().back();
  const std::int64_t rows = c ? x.numel() / c : 0;
  const bool has_gain = gain && gain->defined() && gain->numel() > 0;
  const bool has_bias = bias && bias->defined() && bias->numel() > 0;
  if ((has_gain && gain->numel() != c) || (has_bias && bias->numel() != c))
    throw ShapeError("layer_norm affine size mismatch");
  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.numel()));
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  std::vector<T> out(static_cast<size_t>(x.numel()));
  const T* src = x.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = src + r * c;
    T mu = T(0);
    for (int i = 0; i < c; ++i) mu += row[i];
    mu /= static_cast<T>(c);
    T var = T(0);
    for (int i = 0; i < c; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int i = 0; i < c; ++i) {
      const T h = (row[i] - mu) * is;
      (*xhat)[r * c + i] = h;
      T y = h;
      if (has_gain) y *= gain->data()[i];
      if (has_bias) y += bias->data()[i];
      out[r * c + i] = y;
    }
  }
  auto node = new_node<T>(x.shape(), std::move(out));
  if (track(node, {&x, has_gain ? gain : nullptr, has_bias ? bias : nullptr})) {
    Node<T>* nx = x.node();
    Node<T>* ng = has_gain ? gain->node() : nullptr;
    Node<T>* nb = has_bias ? bias->node() : nullptr;
    node->backward = [nx, ng, nb, xhat, inv_std, rows, c](Node<T>& self) {
      T* gx = nx->requires_grad ? nx->grad_data() : nullptr;
      T* gg = ng && ng->requires_grad ? ng->grad_data() : nullptr;
      T* gb = nb && nb->requires_grad ? nb->grad_data() : nullptr;
      std::vector<T> dh(static_cast<size_t>(c));
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* g = self.grad.data() + r * c;
        const T* h = xhat->data() + r * c;
        T mean_dh = T(0);
        T mean_dh_h = T(0);
        for (int i = 0; i < c; ++i) {
          if (gg) gg[i] += g[i] * h[i];
          if (gb) gb[i] += g[i];
          dh[i] = ng ? g[i] * ng->value[i] : g[i];
          mean_dh += dh[i];
          mean_dh_h += dh[i] * h[i];
        }
        if (!gx) continue;
        mean_dh /= static_cast<T>(c);
        mean_dh_h /= static_cast<T>(c);
        const T is = (*inv_std)[r];
        for (int i = 0; i < c; ++i) gx[r * c + i] += is * (dh[i] - mean_dh - h[i] * mean_dh_h);
      }
    };
  }
  return BasicTensor<T>(node);
}

namespace {

// cols: [C*kh*kw, oh*ow]
template <typename T>
void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride, int pad, int oh, int ow, T* cols) {
  for (int ch = 0; ch < c; ++ch)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        T* dst = cols + (static_cast<size_t>(ch) * kh * kw + ky * kw + kx) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* drow = dst + static_cast<size_t>(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill_n(drow, ow, T(0));
            continue;
          }
          const T* srow = x + (static_cast<size_t>(ch) * h + iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            drow[ox] = (ix < 0 || ix >= w) ? T(0) : srow[ix];
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, int c, int h, int w, int kh, int kw, int stride, int pad, int oh, int ow, T* x) {
  for (int ch = 0; ch < c; ++ch)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        const T* src = cols + (static_cast<size_t>(ch) * kh * kw + ky * kw + kx) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* xrow = x + (static_cast<size_t>(ch) * h + iy) * w;
          const T* srow = src + static_cast<size_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) xrow[ix] += srow[ox];
          }
        }
      }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const std::type_identity_t<BasicTensor<T>>* bias, int stride, int pad) {
  check_rank(x, 4, "conv2d input");
  check_rank(w, 4, "conv2d weight");
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: invalid stride/pad");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != c)
    throw ShapeError("conv2d channel mismatch: input " + to_string(x.shape()) + " weight " +
                     to_string(w.shape()));
  if (kh > h + 2 * pad || kw > wd + 2 * pad)
    throw ShapeError("conv2d kernel " + to_string(w.shape()) + " larger than padded input " +
                     to_string(x.shape()));
  const bool has_bias = bias && bias->defined() && bias->numel() > 0;
  if (has_bias && bias->numel() != o) throw ShapeError("conv2d bias size mismatch");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  const int kdim = c * kh * kw;
  const int spatial = oh * ow;
  const bool direct = kh == 1 && kw == 1 && stride == 1 && pad == 0;
  std::vector<T> out(static_cast<size_t>(n) * o * spatial, T(0));
  std::vector<T> cols(direct ? 0 : static_cast<size_t>(kdim) * spatial);
  for (int b = 0; b < n; ++b) {
    const T* xb = x.data().data() + static_cast<size_t>(b) * c * h * wd;
    T* ob = out.data() + static_cast<size_t>(b) * o * spatial;
    if (has_bias)
      for (int oc = 0; oc < o; ++oc) std::fill_n(ob + static_cast<size_t>(oc) * spatial, spatial, bias->data()[oc]);
    const T* colp = xb;
    if (!direct) {
      im2col(xb, c, h, wd, kh, kw, stride, pad, oh, ow, cols.data());
      colp = cols.data();
    }
    linalg::gemm<T>(false, false, o, spatial, kdim, T(1), w.data().data(), kdim, colp, spatial, T(1), ob, spatial);
  }
  auto node = new_node<T>({n, o, oh, ow}, std::move(out));
  if (track(node, {&x, &w, has_bias ? bias : nullptr})) {
    Node<T>* nx = x.node();
    Node<T>* nw = w.node();
    Node<T>* nb = has_bias ? bias->node() : nullptr;
    node->backward = [=](Node<T>& self) {
      std::vector<T> colbuf(direct ? 0 : static_cast<size_t>(kdim) * spatial);
      std::vector<T> dcols(direct ? 0 : static_cast<size_t>(kdim) * spatial);
      T* gx = nx->requires_grad ? nx->grad_data() : nullptr;
      T* gw = nw->requires_grad ? nw->grad_data() : nullptr;
      T* gb = nb && nb->requires_grad ? nb->grad_data() : nullptr;
      for (int b = 0; b < n; ++b) {
        const T* g = self.grad.data() + static_cast<size_t>(b) * o * spatial;
        const T* xb = nx->value.data() + static_cast<size_t>(b) * c * h * wd;
        if (gb)
          for (int oc = 0; oc < o; ++oc) {
            T s = T(0);
            for (int i = 0; i < spatial; ++i) s += g[static_cast<size_t>(oc) * spatial + i];
            gb[oc] += s;
          }
        if (gw) {
          const T* colp = xb;
          if (!direct) {
            im2col(xb, c, h, wd, kh, kw, stride, pad, oh, ow, colbuf.data());
            colp = colbuf.data();
          }
          linalg::gemm<T>(false, true, o, kdim, spatial, T(1), g, spatial, colp, spatial, T(1), gw, kdim);
        }
        if (gx) {
          T* gxb = gx + static_cast<size_t>(b) * c * h * wd;
          if (direct) {
            linalg::gemm<T>(true, false, kdim, spatial, o, T(1), nw->value.data(), kdim, g, spatial, T(1), gxb,
                            spatial);
          } else {
            linalg::gemm<T>(true, false, kdim, spatial, o, T(1), nw->value.data(), kdim, g, spatial, T(0),
                            dcols.data(), spatial);
            col2im(dcols.data(), c, h, wd, kh, kw, stride, pad, oh, ow, gxb);
          }
        }
      }
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> upsample_nearest2x(const BasicTensor<T>& x) {
  check_rank(x, 4, "upsample_nearest2x");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int planes = n * c;
  std::vector<T> out(static_cast<size_t>(planes) * 4 * h * w);
  const T* src = x.data().data();
  for (int p = 0; p < planes; ++p)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        out[(static_cast<size_t>(p) * 2 * h + y) * 2 * w + xx] = src[(static_cast<size_t>(p) * h + y / 2) * w + xx / 2];
  auto node = new_node<T>({n, c, 2 * h, 2 * w}, std::move(out));
  if (track(node, {&x})) {
    Node<T>* nx = x.node();
    node->backward = [nx, planes, h, w](Node<T>& self) {
      T* gx = nx->grad_data();
      for (int p = 0; p < planes; ++p)
        for (int y = 0; y < 2 * h; ++y)
          for (int xx = 0; xx < 2 * w; ++xx)
            gx[(static_cast<size_t>(p) * h + y / 2) * w + xx / 2] +=
                self.grad[(static_cast<size_t>(p) * 2 * h + y) * 2 * w + xx];
    };
  }
  return BasicTensor<T>(node);
}

namespace {

struct Tap {
  int i0, i1;
  double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> align_corner_taps(int src, int dst) {
  std::vector<Tap> taps(static_cast<size_t>(dst));
  for (int o = 0; o < dst; ++o) {
    const double pos = (dst > 1 && src > 1) ? static_cast<double>(o) * (src - 1) / (dst - 1) : 0.0;
    int i0 = static_cast<int>(std::floor(pos));
    i0 = std::clamp(i0, 0, src - 1);
    const int i1 = std::min(i0 + 1, src - 1);
    taps[o] = {i0, i1, pos - i0};
  }
  return taps;
}

}  // namespace

template <typename T>
BasicTensor<T> resize_bilinear(const BasicTensor<T>& x, int out_h, int out_w) {
  check_rank(x, 4, "resize_bilinear");
  const int b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (h < 1 || w < 1 || out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: empty map");
  const auto ty = align_corner_taps(h, out_h);
  const auto tx = align_corner_taps(w, out_w);
  std::vector<T> out(static_cast<size_t>(b) * out_h * out_w * c, T(0));
  const T* src = x.data().data();
  for (int n = 0; n < b; ++n)
    for (int oy = 0; oy < out_h; ++oy)
      for (int ox = 0; ox < out_w; ++ox) {
        const auto& py = ty[oy];
        const auto& px = tx[ox];
        const T wy1 = static_cast<T>(py.w1), wy0 = T(1) - wy1;
        const T wx1 = static_cast<T>(px.w1), wx0 = T(1) - wx1;
        const T* s00 = src + ((static_cast<size_t>(n) * h + py.i0) * w + px.i0) * c;
        const T* s01 = src + ((static_cast<size_t>(n) * h + py.i0) * w + px.i1) * c;
        const T* s10 = src + ((static_cast<size_t>(n) * h + py.i1) * w + px.i0) * c;
        const T* s11 = src + ((static_cast<size_t>(n) * h + py.i1) * w + px.i1) * c;
        T* d = out.data() + ((static_cast<size_t>(n) * out_h + oy) * out_w + ox) * c;
        for (int ch = 0; ch < c; ++ch)
          d[ch] = wy0 * (wx0 * s00[ch] + wx1 * s01[ch]) + wy1 * (wx0 * s10[ch] + wx1 * s11[ch]);
      }
  auto node = new_node<T>({b, out_h, out_w, c}, std::move(out));
  if (track(node, {&x})) {
    Node<T>* nx = x.node();
    node->backward = [nx, ty, tx, b, h, w, c, out_h, out_w](Node<T>& self) {
      T* gx = nx->grad_data();
      for (int n = 0; n < b; ++n)
        for (int oy = 0; oy < out_h; ++oy)
          for (int ox = 0; ox < out_w; ++ox) {
            const auto& py = ty[oy];
            const auto& px = tx[ox];
            const T wy1 = static_cast<T>(py.w1), wy0 = T(1) - wy1;
            const T wx1 = static_cast<T>(px.w1), wx0 = T(1) - wx1;
            const T* g = self.grad.data() + ((static_cast<size_t>(n) * out_h + oy) * out_w + ox) * c;
            T* s00 = gx + ((static_cast<size_t>(n) * h + py.i0) * w + px.i0) * c;
            T* s01 = gx + ((static_cast<size_t>(n) * h + py.i0) * w + px.i1) * c;
            T* s10 = gx + ((static_cast<size_t>(n) * h + py.i1) * w + px.i0) * c;
            T* s11 = gx + ((static_cast<size_t>(n) * h + py.i1) * w + px.i1) * c;
            for (int ch = 0; ch < c; ++ch) {
              s00[ch] += g[ch] * wy0 * wx0;
              s01[ch] += g[ch] * wy0 * wx1;
              s10[ch] += g[ch] * wy1 * wx0;
              s11[ch] += g[ch] * wy1 * wx1;
            }
          }
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> index_select(const BasicTensor<T>& table, std::span<const int> idx) {
  check_rank(table, 2, "index_select");
  const int rows = table.dim(0);
  const int c = table.dim(1);
  for (int i : idx)
    if (i < 0 || i >= rows)
      throw IndexError("index " + std::to_string(i) + " outside [0, " + std::to_string(rows) + ")");
  const int n = static_cast<int>(idx.size());
  std::vector<T> out(static_cast<size_t>(n) * c);
  for (int r = 0; r < n; ++r)
    std::copy_n(table.data().data() + static_cast<size_t>(idx[r]) * c, c, out.data() + static_cast<size_t>(r) * c);
  auto node = new_node<T>({n, c}, std::move(out));
  if (track(node, {&table})) {
    Node<T>* nt = table.node();
    std::vector<int> ids(idx.begin(), idx.end());
    node->backward = [nt, ids = std::move(ids), c](Node<T>& self) {
      T* gt = nt->grad_data();
      for (size_t r = 0; r < ids.size(); ++r)
        for (int ch = 0; ch < c; ++ch) gt[static_cast<size_t>(ids[r]) * c + ch] += self.grad[r * c + ch];
    };
  }
  return BasicTensor<T>(node);
}

template <typename T>
BasicTensor<T> rotate_pairs(const BasicTensor<T>& x, std::span<const T> cos_table, std::span<const T> sin_table) {
  check_rank(x, 4, "rotate_pairs");
  const int bh = x.dim(0) * x.dim(1);
  const int l = x.dim(2);
  const int d = x.dim(3);
  if (d % 2) throw ShapeError("rotate_pairs needs an even channel count");
  const int pairs = d / 2;
  if (cos_table.size() != static_cast<size_t>(l) * pairs || sin_table.size() != cos_table.size())
    throw ShapeError("rotate_pairs: table size does not match [L, D/2]");
  std::vector<T> out(static_cast<size_t>(x.numel()));
  const T* src = x.data().data();
  for (int s = 0; s < bh; ++s)
    for (int t = 0; t < l; ++t) {
      const T* in = src + (static_cast<size_t>(s) * l + t) * d;
      T* o = out.data() + (static_cast<size_t>(s) * l + t) * d;
      const T* cs = cos_table.data() + static_cast<size_t>(t) * pairs;
      const T* sn = sin_table.data() + static_cast<size_t>(t) * pairs;
      for (int p = 0; p < pairs; ++p) {
        const T a = in[2 * p], b = in[2 * p + 1];
        o[2 * p] = a * cs[p] - b * sn[p];
        o[2 * p + 1] = a * sn[p] + b * cs[p];
      }
    }
  auto node = new_node<T>(x.shape(), std::move(out));
  if (track(node, {&x})) {
    Node<T>* nx = x.node();
    std::vector<T> ct(cos_table.begin(), cos_table.end());
    std::vector<T> st(sin_table.begin(), sin_table.end());
    node->backward = [nx, ct = std::move(ct), st = std::move(st), bh, l, d, pairs](Node<T>& self) {
      T* gx = nx->grad_data();
      for (int s = 0; s < bh; ++s)
        for (int t = 0; t < l; ++t) {
          const T* g = self.grad.data() + (static_cast<size_t>(s) * l + t) * d;
          T* o = gx + (static_cast<size_t>(s) * l + t) * d;
          const T* cs = ct.data() + static_cast<size_t>(t) * pairs;
          const T* sn = st.data() + static_cast<size_t>(t) * pairs;
          for (int p = 0; p < pairs; ++p) {
            const T a = g[2 * p], b = g[2 * p + 1];
            o[2 * p] += a * cs[p] + b * sn[p];
            o[2 * p + 1] += -a * sn[p] + b * cs[p];
          }
        }
    };
  }
  return BasicTensor<T>(node);
}

namespace {

struct RowRun {
  int begin, end, limit;
};

std::vector<RowRun> row_runs(std::span<const int> limit) {
  std::vector<RowRun> runs;
  for (int r = 0; r < static_cast<int>(limit.size()); ++r) {
    if (!runs.empty() && runs.back().limit == limit[r] && runs.back().end == r)
      ++runs.back().end;
    else
      runs.push_back({r, r + 1, limit[r]});
  }
  return runs;
}

}  // namespace

template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         std::span<const int> row_limit) {
  check_rank(q, 4, "attention q");
  check_rank(k, 4, "attention k");
  check_rank(v, 4, "attention v");
  const int b = q.dim(0), hd = q.dim(1), lq = q.dim(2), d = q.dim(3);
  const int lk = k.dim(2);
  if (k.dim(0) != b || k.dim(1) != hd || k.dim(3) != d || v.shape() != k.shape())
    throw ShapeError("attention: q " + to_string(q.shape()) + " k " + to_string(k.shape()) + " v " +
                     to_string(v.shape()));
  if (static_cast<int>(row_limit.size()) != lq) throw ShapeError("attention: row_limit size != Lq");
  for (int lim : row_limit)
    if (lim < 1 || lim > lk) throw ShapeError("attention: row limit outside [1, Lk]");
  const auto runs = row_runs(row_limit);
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  const int heads = b * hd;
  // Attention probabilities, zero beyond each row's limit; kept for backward.
  auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(heads) * lq * lk, T(0));
  std::vector<T> out(static_cast<size_t>(heads) * lq * d, T(0));
  for (int s = 0; s < heads; ++s) {
    const T* qs = q.data().data() + static_cast<size_t>(s) * lq * d;
    const T* ks = k.data().data() + static_cast<size_t>(s) * lk * d;
    const T* vs = v.data().data() + static_cast<size_t>(s) * lk * d;
    T* ps = probs->data() + static_cast<size_t>(s) * lq * lk;
    T* os = out.data() + static_cast<size_t>(s) * lq * d;
    for (const auto& run : runs) {
      const int rows = run.end - run.begin;
      T* p = ps + static_cast<size_t>(run.begin) * lk;
      linalg::gemm<T>(false, true, rows, run.limit, d, scale, qs + static_cast<size_t>(run.begin) * d, d, ks, d,
                      T(0), p, lk);
      for (int r = 0; r < rows; ++r) {
        T* row = p + static_cast<size_t>(r) * lk;
        const T mx = *std::max_element(row, row + run.limit);
        T sum_e = T(0);
        for (int i = 0; i < run.limit; ++i) sum_e += (row[i] = std::exp(row[i] - mx));
        const T inv = T(1) / sum_e;
        for (int i = 0; i < run.limit; ++i) row[i] *= inv;
      }
      linalg::gemm<T>(false, false, rows, d, run.limit, T(1), p, lk, vs, d, T(0),
                      os + static_cast<size_t>(run.begin) * d, d);
    }
  }
  auto node = new_node<T>({b, hd, lq, d}, std::move(out));
  if (track(node, {&q, &k, &v})) {
    Node<T>* nq = q.node();
    Node<T>* nk = k.node();
    Node<T>* nv = v.node();
    node->backward = [nq, nk, nv, probs, runs, heads, lq, lk, d, scale](Node<T>& self) {
      T* gq = nq->requires_grad ? nq->grad_data() : nullptr;
      T* gk = nk->requires_grad ? nk->grad_data() : nullptr;
      T* gv = nv->requires_grad ? nv->grad_data() : nullptr;
      std::vector<T> dp(static_cast<size_t>(lq) * lk);
      for (int s = 0; s < heads; ++s) {
        const size_t qoff = static_cast<size_t>(s) * lq * d;
        const size_t koff = static_cast<size_t>(s) * lk * d;
        const T* go = self.grad.data() + qoff;
        const T* ps = probs->data() + static_cast<size_t>(s) * lq * lk;
        const T* qs = nq->value.data() + qoff;
        const T* ks = nk->value.data() + koff;
        const T* vs = nv->value.data() + koff;
        for (const auto& run : runs) {
          const int rows = run.end - run.begin;
          const T* p = ps + static_cast<size_t>(run.begin) * lk;
          const T* g = go + static_cast<size_t>(run.begin) * d;
          if (gv) linalg::gemm<T>(true, false, run.limit, d, rows, T(1), p, lk, g, d, T(1), gv + koff, d);
          if (!gq && !gk) continue;
          T* dps = dp.data() + static_cast<size_t>(run.begin) * lk;
          linalg::gemm<T>(false, true, rows, run.limit, d, T(1), g, d, vs, d, T(0), dps, lk);
          for (int r = 0; r < rows; ++r) {
            T* drow = dps + static_cast<size_t>(r) * lk;
            const T* prow = p + static_cast<size_t>(r) * lk;
            T dot = T(0);
            for (int i = 0; i < run.limit; ++i) dot += drow[i] * prow[i];
            for (int i = 0; i < run.limit; ++i) drow[i] = prow[i] * (drow[i] - dot);
          }
          if (gq)
            linalg::gemm<T>(false, false, rows, d, run.limit, scale, dps, lk, ks, d, T(1),
                            gq + qoff + static_cast<size_t>(run.begin) * d, d);
          if (gk)
            linalg::gemm<T>(true, false, run.limit, d, rows, scale, dps, lk, qs + static_cast<size_t>(run.begin) * d,
                            d, T(1), gk + koff, d);
        }
      }
    };
  }
  return BasicTensor<T>(node);
}

#define VARSR_INSTANTIATE_OPS(T)                                                                         \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                             \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                             \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                             \
  template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                          \
  template BasicTensor<T> mul_scalar(const BasicTensor<T>&, T);                                          \
  template BasicTensor<T> silu(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> gelu(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                         \
  template BasicTensor<T> permute(const BasicTensor<T>&, const std::vector<int>&);                       \
  template BasicTensor<T> slice(const BasicTensor<T>&, int, int, int);                                   \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, int);                               \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                    \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> mean_axis(const BasicTensor<T>&, int, bool);                                   \
  template BasicTensor<T> mse_loss(const BasicTensor<T>&, const BasicTensor<T>&);                        \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>*);   \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                                \
  template BasicTensor<T> log_softmax(const BasicTensor<T>&);                                            \
  template BasicTensor<T> cross_entropy(const BasicTensor<T>&, std::span<const int>);                    \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>*, const BasicTensor<T>*, \
                                     T);                                                                 \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>*, int, \
                                 int);                                                                   \
  template BasicTensor<T> upsample_nearest2x(const BasicTensor<T>&);                                     \
  template BasicTensor<T> resize_bilinear(const BasicTensor<T>&, int, int);                              \
  template BasicTensor<T> index_select(const BasicTensor<T>&, std::span<const int>);                     \
  template BasicTensor<T> rotate_pairs(const BasicTensor<T>&, std::span<const T>, std::span<const T>);   \
  template BasicTensor<T> attention(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                    std::span<const int>);

VARSR_INSTANTIATE_OPS(float)
VARSR_INSTANTIATE_OPS(double)

#undef VARSR_INSTANTIATE_OPS

}  // namespace varsr::ops
