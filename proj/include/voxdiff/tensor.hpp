#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "voxdiff/common.hpp"

namespace voxdiff {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

struct Node {
  Shape shape;
  std::vector<real> value;
  std::vector<real> grad;  // allocated on first backward touch
  bool requires_grad = false;
  std::string name;    // parameters only
  bool decay = false;  // optimizer weight-decay bucket
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), real(0));
  }
};

// Scoped switch: with grads disabled, ops record no parents or backward
// closures, so sampling loops build no tape.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradScope {
  bool prev;
  NoGradScope() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradScope() { grad_mode_flag() = prev; }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape) {
    auto n = std::make_shared<Node>();
    n->value.assign(shape_numel(shape), real(0));
    n->shape = std::move(shape);
    return Tensor(n);
  }

  static Tensor constant(Shape shape, std::vector<real> data) {
    require(shape_numel(shape) == static_cast<int64_t>(data.size()),
            "tensor data size does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(n);
  }

  static Tensor scalar(real v) { return constant({1}, {v}); }

  static Tensor param(Shape shape, std::vector<real> data, std::string name, bool decay = false) {
    Tensor t = constant(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    t.node_->name = std::move(name);
    t.node_->decay = decay;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t numel() const { return node_->numel(); }
  std::vector<real>& value() { return node_->value; }
  const std::vector<real>& value() const { return node_->value; }
  std::vector<real>& grad() { node_->ensure_grad(); return node_->grad; }
  const std::string& name() const { return node_->name; }
  bool requires_grad() const { return node_->requires_grad; }
  bool decay() const { return node_->decay; }

  real item() const {
    require(numel() == 1, "item() on non-scalar tensor");
    return node_->value[0];
  }

  void zero_grad() { node_->grad.assign(node_->value.size(), real(0)); }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<real> value,
                      std::vector<std::shared_ptr<Node>> parents,
                      std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_mode_flag()) {
    bool needs = false;
    for (const auto& p : parents) needs = needs || p->requires_grad;
    if (needs) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(n);
}

inline std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

inline constexpr int64_t kParallelWork = 1 << 16;

// C (M x N) = op(A) * op(B), optionally accumulating. A is (M x K) or its
// transpose when ta; B is (K x N) or its transpose when tb.
inline void gemm(bool ta, bool tb, int64_t M, int64_t N, int64_t K, const real* A, const real* B,
                 real* C, bool accumulate, bool allow_parallel = true) {
  if (!accumulate) std::fill(C, C + M * N, real(0));
  const bool par = allow_parallel && M * N * K >= kParallelWork && M > 1;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#endif
  for (int64_t i = 0; i < M; ++i) {
    real* crow = C + i * N;
    if (!ta && !tb) {
      const real* arow = A + i * K;
      for (int64_t k = 0; k < K; ++k) {
        const real a = arow[k];
        if (a == real(0)) continue;
        const real* brow = B + k * N;
        for (int64_t j = 0; j < N; ++j) crow[j] += a * brow[j];
      }
    } else if (!ta && tb) {
      const real* arow = A + i * K;
      for (int64_t j = 0; j < N; ++j) {
        const real* brow = B + j * K;
        real acc = 0;
        for (int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
        crow[j] += acc;
      }
    } else if (ta && !tb) {
      for (int64_t k = 0; k < K; ++k) {
        const real a = A[k * M + i];
        if (a == real(0)) continue;
        const real* brow = B + k * N;
        for (int64_t j = 0; j < N; ++j) crow[j] += a * brow[j];
      }
    } else {
      for (int64_t j = 0; j < N; ++j) {
        real acc = 0;
        for (int64_t k = 0; k < K; ++k) acc += A[k * M + i] * B[j * K + k];
        crow[j] += acc;
      }
    }
  }
  (void)par;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (identical shapes; use broadcast_to for expansion).
// ---------------------------------------------------------------------------

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<real> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i) pa->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i) pb->grad[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<real> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i) pa->grad[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i) pb->grad[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<real> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i) pa->grad[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i) pb->grad[i] += self.grad[i] * pa->value[i];
    }
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  std::vector<real> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.value()[i] / b.value()[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i) pa->grad[i] += self.grad[i] / pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i)
        pb->grad[i] -= self.grad[i] * self.value[i] / pb->value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, real s) {
  std::vector<real> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.value()[i] * s;
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa}, [pa, s](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) pa->grad[i] += self.grad[i] * s;
  });
}

inline Tensor add_scalar(const Tensor& a, real s) {
  std::vector<real> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.value()[i] + s;
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa}, [pa](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) pa->grad[i] += self.grad[i];
  });
}

inline Tensor neg(const Tensor& a) { return scale(a, real(-1)); }

// ---------------------------------------------------------------------------
// Matrix products.
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 operands");
  require(a.shape()[1] == b.shape()[0], "matmul: inner dims differ " + shape_str(a.shape()) +
                                            " vs " + shape_str(b.shape()));
  const int64_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  std::vector<real> out(M * N);
  detail::gemm(false, false, M, N, K, a.value().data(), b.value().data(), out.data(), true);
  auto pa = a.node(), pb = b.node();
  return detail::make_op({M, N}, std::move(out), {pa, pb}, [pa, pb, M, K, N](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      detail::gemm(false, true, M, K, N, self.grad.data(), pb->value.data(), pa->grad.data(), true);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      detail::gemm(true, false, K, N, M, pa->value.data(), self.grad.data(), pb->grad.data(), true);
    }
  });
}

// Batched matmul: (B,M,K) x (B,K,N) -> (B,M,N).
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  require(a.rank() == 3 && b.rank() == 3, "bmm expects rank-3 operands");
  require(a.shape()[0] == b.shape()[0] && a.shape()[2] == b.shape()[1],
          "bmm: incompatible shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int64_t B = a.shape()[0], M = a.shape()[1], K = a.shape()[2], N = b.shape()[2];
  std::vector<real> out(B * M * N, real(0));
  const bool par = B > 1 && B * M * N * K >= detail::kParallelWork;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#endif
  for (int64_t i = 0; i < B; ++i) {
    detail::gemm(false, false, M, N, K, a.value().data() + i * M * K,
                 b.value().data() + i * K * N, out.data() + i * M * N, true, false);
  }
  (void)par;
  auto pa = a.node(), pb = b.node();
  return detail::make_op({B, M, N}, std::move(out), {pa, pb}, [pa, pb, B, M, K, N](Node& self) {
    if (pa->requires_grad) pa->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    const bool bpar = B > 1 && B * M * N * K >= detail::kParallelWork;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (bpar)
#endif
    for (int64_t i = 0; i < B; ++i) {
      if (pa->requires_grad)
        detail::gemm(false, true, M, K, N, self.grad.data() + i * M * N,
                     pb->value.data() + i * K * N, pa->grad.data() + i * M * K, true, false);
      if (pb->requires_grad)
        detail::gemm(true, false, K, N, M, pa->value.data() + i * M * K,
                     self.grad.data() + i * M * N, pb->grad.data() + i * K * N, true, false);
    }
    (void)bpar;
  });
}

// Fused affine map: x (R, C) @ w (C, F) + b (F). One node instead of a
// matmul plus a materialized bias broadcast; the bias gradient is the column
// sum of the output gradient.
inline Tensor linear_op(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.rank() == 2 && w.rank() == 2 && b.rank() == 1, "linear: bad ranks");
  require(x.shape()[1] == w.shape()[0] && w.shape()[1] == b.shape()[0],
          "linear: incompatible shapes");
  const int64_t R = x.shape()[0], C = x.shape()[1], F = w.shape()[1];
  std::vector<real> out(R * F);
  for (int64_t r = 0; r < R; ++r) std::memcpy(out.data() + r * F, b.value().data(), sizeof(real) * F);
  detail::gemm(false, false, R, F, C, x.value().data(), w.value().data(), out.data(), true);
  auto px = x.node(), pw = w.node(), pb = b.node();
  return detail::make_op({R, F}, std::move(out), {px, pw, pb}, [px, pw, pb, R, C, F](Node& self) {
    if (px->requires_grad) {
      px->ensure_grad();
      detail::gemm(false, true, R, C, F, self.grad.data(), pw->value.data(), px->grad.data(), true);
    }
    if (pw->requires_grad) {
      pw->ensure_grad();
      detail::gemm(true, false, C, F, R, px->value.data(), self.grad.data(), pw->grad.data(), true);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int64_t r = 0; r < R; ++r)
        for (int64_t f = 0; f < F; ++f) pb->grad[f] += self.grad[r * F + f];
    }
  });
}

// Fused modulation y[b,n,c] = x[b,n,c] * (1 + gain[b,c]) + shift[b,c] for
// x (B, N, C) with per-sample conditioning vectors.
inline Tensor modulate_rows(const Tensor& x, const Tensor& gain, const Tensor& shift) {
  require(x.rank() == 3 && gain.rank() == 2 && shift.rank() == 2, "modulate_rows: bad ranks");
  const int64_t B = x.shape()[0], N = x.shape()[1], C = x.shape()[2];
  require(gain.shape()[0] == B && gain.shape()[1] == C && shift.shape() == gain.shape(),
          "modulate_rows: conditioning shape mismatch");
  std::vector<real> out(x.numel());
  for (int64_t b = 0; b < B; ++b) {
    const real* g = gain.value().data() + b * C;
    const real* sh = shift.value().data() + b * C;
    for (int64_t n = 0; n < N; ++n) {
      const real* xi = x.value().data() + (b * N + n) * C;
      real* yo = out.data() + (b * N + n) * C;
      for (int64_t c = 0; c < C; ++c) yo[c] = xi[c] * (real(1) + g[c]) + sh[c];
    }
  }
  auto px = x.node(), pg = gain.node(), ps = shift.node();
  return detail::make_op(x.shape(), std::move(out), {px, pg, ps},
                         [px, pg, ps, B, N, C](Node& self) {
                           if (px->requires_grad) px->ensure_grad();
                           if (pg->requires_grad) pg->ensure_grad();
                           if (ps->requires_grad) ps->ensure_grad();
                           for (int64_t b = 0; b < B; ++b) {
                             const real* g = pg->value.data() + b * C;
                             for (int64_t n = 0; n < N; ++n) {
                               const int64_t base = (b * N + n) * C;
                               for (int64_t c = 0; c < C; ++c) {
                                 const real dy = self.grad[base + c];
                                 if (px->requires_grad)
                                   px->grad[base + c] += dy * (real(1) + g[c]);
                                 if (pg->requires_grad)
                                   pg->grad[b * C + c] += dy * px->value[base + c];
                                 if (ps->requires_grad) ps->grad[b * C + c] += dy;
                               }
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(), "reshape: element count mismatch");
  auto pa = a.node();
  return detail::make_op(std::move(shape), a.value(), {pa}, [pa](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) pa->grad[i] += self.grad[i];
  });
}

inline Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  require(static_cast<int64_t>(perm.size()) == a.rank(), "permute: rank mismatch");
  Shape out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.shape()[perm[i]];
  const auto in_strides = detail::strides_of(a.shape());
  const auto out_strides = detail::strides_of(out_shape);
  const int64_t n = a.numel();
  const int r = static_cast<int>(perm.size());
  std::vector<int64_t> map(n);
  for (int64_t o = 0; o < n; ++o) {
    int64_t rem = o, in_idx = 0;
    for (int d = 0; d < r; ++d) {
      const int64_t c = rem / out_strides[d];
      rem -= c * out_strides[d];
      in_idx += c * in_strides[perm[d]];
    }
    map[o] = in_idx;
  }
  std::vector<real> out(n);
  for (int64_t o = 0; o < n; ++o) out[o] = a.value()[map[o]];
  auto pa = a.node();
  return detail::make_op(std::move(out_shape), std::move(out), {pa},
                         [pa, map = std::move(map)](Node& self) {
                           if (!pa->requires_grad) return;
                           pa->ensure_grad();
                           for (int64_t o = 0; o < self.numel(); ++o)
                             pa->grad[map[o]] += self.grad[o];
                         });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  require(!parts.empty(), "concat: empty input");
  const Shape& s0 = parts[0].shape();
  require(axis >= 0 && axis < static_cast<int>(s0.size()), "concat: bad axis");
  Shape out_shape = s0;
  int64_t total_axis = 0;
  for (const auto& p : parts) {
    require(p.rank() == parts[0].rank(), "concat: rank mismatch");
    for (int d = 0; d < static_cast<int>(s0.size()); ++d)
      require(d == axis || p.shape()[d] == s0[d], "concat: shape mismatch off-axis");
    total_axis += p.shape()[axis];
  }
  out_shape[axis] = total_axis;

  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[d];
  for (int d = axis + 1; d < static_cast<int>(s0.size()); ++d) inner *= s0[d];

  std::vector<real> out(shape_numel(out_shape));
  std::vector<std::shared_ptr<Node>> parents;
  std::vector<int64_t> offsets;  // per-part start along axis
  int64_t off = 0;
  for (const auto& p : parts) {
    parents.push_back(p.node());
    offsets.push_back(off);
    const int64_t ax = p.shape()[axis];
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * total_axis + off) * inner, p.value().data() + o * ax * inner,
                  sizeof(real) * ax * inner);
    off += ax;
  }
  auto ps = parents;
  return detail::make_op(std::move(out_shape), std::move(out), std::move(parents),
                         [ps, offsets, outer, inner, total_axis](Node& self) {
                           for (size_t k = 0; k < ps.size(); ++k) {
                             if (!ps[k]->requires_grad) continue;
                             ps[k]->ensure_grad();
                             const int64_t ax = ps[k]->numel() / (outer * inner);
                             for (int64_t o = 0; o < outer; ++o)
                               for (int64_t i = 0; i < ax * inner; ++i)
                                 ps[k]->grad[o * ax * inner + i] +=
                                     self.grad[(o * total_axis + offsets[k]) * inner + i];
                           }
                         });
}

inline Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
  require(axis >= 0 && axis < a.rank(), "slice: bad axis");
  require(start >= 0 && len >= 1 && start + len <= a.shape()[axis], "slice: out of range");
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.shape()[d];
  for (int d = axis + 1; d < a.rank(); ++d) inner *= a.shape()[d];
  const int64_t ax = a.shape()[axis];
  std::vector<real> out(outer * len * inner);
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner, a.value().data() + (o * ax + start) * inner,
                sizeof(real) * len * inner);
  auto pa = a.node();
  return detail::make_op(std::move(out_shape), std::move(out), {pa},
                         [pa, outer, inner, ax, start, len](Node& self) {
                           if (!pa->requires_grad) return;
                           pa->ensure_grad();
                           for (int64_t o = 0; o < outer; ++o)
                             for (int64_t i = 0; i < len * inner; ++i)
                               pa->grad[(o * ax + start) * inner + i] +=
                                   self.grad[o * len * inner + i];
                         });
}

// NumPy-style broadcast: ranks match, each input dim is equal or 1.
inline Tensor broadcast_to(const Tensor& a, Shape target) {
  require(static_cast<int64_t>(target.size()) == a.rank(), "broadcast_to: rank mismatch");
  for (int d = 0; d < a.rank(); ++d)
    require(a.shape()[d] == target[d] || a.shape()[d] == 1, "broadcast_to: incompatible dim");
  const auto in_strides = detail::strides_of(a.shape());
  const auto out_strides = detail::strides_of(target);
  const int64_t n = shape_numel(target);
  const int r = static_cast<int>(target.size());
  std::vector<int64_t> map(n);
  for (int64_t o = 0; o < n; ++o) {
    int64_t rem = o, in_idx = 0;
    for (int d = 0; d < r; ++d) {
      const int64_t c = rem / out_strides[d];
      rem -= c * out_strides[d];
      if (a.shape()[d] != 1) in_idx += c * in_strides[d];
    }
    map[o] = in_idx;
  }
  std::vector<real> out(n);
  for (int64_t o = 0; o < n; ++o) out[o] = a.value()[map[o]];
  auto pa = a.node();
  return detail::make_op(std::move(target), std::move(out), {pa},
                         [pa, map = std::move(map)](Node& self) {
                           if (!pa->requires_grad) return;
                           pa->ensure_grad();
                           for (int64_t o = 0; o < self.numel(); ++o)
                             pa->grad[map[o]] += self.grad[o];
                         });
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

inline Tensor reduce_sum(const Tensor& a) {
  real acc = 0;
  for (real v : a.value()) acc += v;
  auto pa = a.node();
  return detail::make_op({1}, {acc}, {pa}, [pa](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (auto& g : pa->grad) g += self.grad[0];
  });
}

inline Tensor reduce_mean(const Tensor& a) {
  return scale(reduce_sum(a), real(1) / static_cast<real>(a.numel()));
}

// Sum over the last axis: (..., K) -> (...).
inline Tensor sum_lastaxis(const Tensor& a) {
  require(a.rank() >= 1, "sum_lastaxis: rank 0");
  const int64_t K = a.shape()[a.rank() - 1];
  const int64_t rows = a.numel() / K;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  std::vector<real> out(rows, real(0));
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t k = 0; k < K; ++k) out[r] += a.value()[r * K + k];
  auto pa = a.node();
  return detail::make_op(std::move(out_shape), std::move(out), {pa}, [pa, rows, K](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t k = 0; k < K; ++k) pa->grad[r * K + k] += self.grad[r];
  });
}

// ---------------------------------------------------------------------------
// 3D spatial resampling over token grids. Features are (B, N, C) with
// N = gx*gy*gz laid out x-fastest.
// ---------------------------------------------------------------------------

inline Tensor mean_pool3d(const Tensor& a, const Dims3& grid, int pool) {
  require(a.rank() == 3, "mean_pool3d expects (B,N,C)");
  const int64_t B = a.shape()[0], N = a.shape()[1], C = a.shape()[2];
  require(N == volume(grid), "mean_pool3d: grid does not match N");
  for (int d = 0; d < 3; ++d)
    require(grid[d] % pool == 0, "mean_pool3d: pool does not divide grid axis");
  const Dims3 cg{grid[0] / pool, grid[1] / pool, grid[2] / pool};
  const int64_t M = volume(cg);
  const real inv = real(1) / static_cast<real>(pool * pool * pool);
  // fine index for each (coarse cell, within-cell offset)
  std::vector<int64_t> fine_of(M * pool * pool * pool);
  {
    int64_t w = 0;
    for (int64_t cz = 0; cz < cg[2]; ++cz)
      for (int64_t cy = 0; cy < cg[1]; ++cy)
        for (int64_t cx = 0; cx < cg[0]; ++cx)
          for (int dz = 0; dz < pool; ++dz)
            for (int dy = 0; dy < pool; ++dy)
              for (int dx = 0; dx < pool; ++dx)
                fine_of[w++] = (cx * pool + dx) +
                               grid[0] * ((cy * pool + dy) + grid[1] * (cz * pool + dz));
  }
  // fine_of is grouped by coarse cell in x-fastest coarse order
  const int64_t cell = pool * pool * pool;
  std::vector<real> out(B * M * C, real(0));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t m = 0; m < M; ++m) {
      real* orow = out.data() + (b * M + m) * C;
      for (int64_t w = 0; w < cell; ++w) {
        const real* irow = a.value().data() + (b * N + fine_of[m * cell + w]) * C;
        for (int64_t c = 0; c < C; ++c) orow[c] += irow[c];
      }
      for (int64_t c = 0; c < C; ++c) orow[c] *= inv;
    }
  auto pa = a.node();
  return detail::make_op({B, M, C}, std::move(out), {pa},
                         [pa, fine_of = std::move(fine_of), B, M, C, N, cell, inv](Node& self) {
                           if (!pa->requires_grad) return;
                           pa->ensure_grad();
                           for (int64_t b = 0; b < B; ++b)
                             for (int64_t m = 0; m < M; ++m) {
                               const real* grow = self.grad.data() + (b * M + m) * C;
                               for (int64_t w = 0; w < cell; ++w) {
                                 real* irow =
                                     pa->grad.data() + (b * N + fine_of[m * cell + w]) * C;
                                 for (int64_t c = 0; c < C; ++c) irow[c] += grow[c] * inv;
                               }
                             }
                         });
}

// Nearest-neighbor upsample, inverse layout of mean_pool3d: (B, M, C) -> (B, N, C).
inline Tensor upsample3d_nearest(const Tensor& a, const Dims3& coarse_grid, int pool) {
  require(a.rank() == 3, "upsample3d_nearest expects (B,M,C)");
  const int64_t B = a.shape()[0], M = a.shape()[1], C = a.shape()[2];
  require(M == volume(coarse_grid), "upsample3d_nearest: grid does not match M");
  const Dims3 fg{coarse_grid[0] * pool, coarse_grid[1] * pool, coarse_grid[2] * pool};
  const int64_t N = volume(fg);
  std::vector<int64_t> coarse_of(N);
  for (int64_t fz = 0; fz < fg[2]; ++fz)
    for (int64_t fy = 0; fy < fg[1]; ++fy)
      for (int64_t fx = 0; fx < fg[0]; ++fx)
        coarse_of[fx + fg[0] * (fy + fg[1] * fz)] =
            (fx / pool) + coarse_grid[0] * ((fy / pool) + coarse_grid[1] * (fz / pool));
  std::vector<real> out(B * N * C);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t f = 0; f < N; ++f)
      std::memcpy(out.data() + (b * N + f) * C, a.value().data() + (b * M + coarse_of[f]) * C,
                  sizeof(real) * C);
  auto pa = a.node();
  return detail::make_op({B, N, C}, std::move(out), {pa},
                         [pa, coarse_of = std::move(coarse_of), B, M, C, N](Node& self) {
                           if (!pa->requires_grad) return;
                           pa->ensure_grad();
                           for (int64_t b = 0; b < B; ++b)
                             for (int64_t f = 0; f < N; ++f) {
                               real* irow = pa->grad.data() + (b * M + coarse_of[f]) * C;
                               const real* grow = self.grad.data() + (b * N + f) * C;
                               for (int64_t c = 0; c < C; ++c) irow[c] += grow[c];
                             }
                         });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization.
// ---------------------------------------------------------------------------

inline Tensor softmax_lastaxis(const Tensor& a) {
  require(a.rank() >= 1, "softmax: rank 0");
  const int64_t K = a.shape()[a.rank() - 1];
  const int64_t rows = a.numel() / K;
  std::vector<real> out(a.numel());
  for (int64_t r = 0; r < rows; ++r) {
    const real* x = a.value().data() + r * K;
    real* y = out.data() + r * K;
    real mx = x[0];
    for (int64_t k = 1; k < K; ++k) mx = std::max(mx, x[k]);
    real z = 0;
    for (int64_t k = 0; k < K; ++k) {
      y[k] = std::exp(x[k] - mx);
      z += y[k];
    }
    const real invz = real(1) / z;
    for (int64_t k = 0; k < K; ++k) y[k] *= invz;
  }
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa}, [pa, rows, K](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const real* y = self.value.data() + r * K;
      const real* dy = self.grad.data() + r * K;
      real dot = 0;
      for (int64_t k = 0; k < K; ++k) dot += y[k] * dy[k];
      real* dx = pa->grad.data() + r * K;
      for (int64_t k = 0; k < K; ++k) dx[k] += y[k] * (dy[k] - dot);
    }
  });
}

inline Tensor log_softmax_lastaxis(const Tensor& a) {
  require(a.rank() >= 1, "log_softmax: rank 0");
  const int64_t K = a.shape()[a.rank() - 1];
  const int64_t rows = a.numel() / K;
  std::vector<real> out(a.numel());
  for (int64_t r = 0; r < rows; ++r) {
    const real* x = a.value().data() + r * K;
    real* y = out.data() + r * K;
    real mx = x[0];
    for (int64_t k = 1; k < K; ++k) mx = std::max(mx, x[k]);
    real z = 0;
    for (int64_t k = 0; k < K; ++k) z += std::exp(x[k] - mx);
    const real lse = mx + std::log(z);
    for (int64_t k = 0; k < K; ++k) y[k] = x[k] - lse;
  }
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa}, [pa, rows, K](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const real* y = self.value.data() + r * K;
      const real* dy = self.grad.data() + r * K;
      real sum_dy = 0;
      for (int64_t k = 0; k < K; ++k) sum_dy += dy[k];
      real* dx = pa->grad.data() + r * K;
      for (int64_t k = 0; k < K; ++k) dx[k] += dy[k] - std::exp(y[k]) * sum_dy;
    }
  });
}

inline Tensor log_op(const Tensor& a) {
  std::vector<real> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::log(a.value()[i]);
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa}, [pa](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) pa->grad[i] += self.grad[i] / pa->value[i];
  });
}

inline Tensor exp_op(const Tensor& a) {
  std::vector<real> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::exp(a.value()[i]);
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa}, [pa](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) pa->grad[i] += self.grad[i] * self.value[i];
  });
}

inline Tensor clamp_min(const Tensor& a, real lo) {
  std::vector<real> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = std::max(a.value()[i], lo);
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa}, [pa, lo](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i)
      if (pa->value[i] > lo) pa->grad[i] += self.grad[i];
  });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<real> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = real(1) / (real(1) + std::exp(-a.value()[i]));
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa}, [pa](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) {
      const real y = self.value[i];
      pa->grad[i] += self.grad[i] * y * (real(1) - y);
    }
  });
}

// Sigmoid-weighted linear unit x * sigmoid(1.702 x) (a.k.a. QuickGELU).
inline Tensor quick_gelu(const Tensor& a) {
  std::vector<real> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) {
    const real x = a.value()[i];
    out[i] = x / (real(1) + std::exp(real(-1.702) * x));
  }
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa}, [pa](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (int64_t i = 0; i < self.numel(); ++i) {
      const real x = pa->value[i];
      const real s = real(1) / (real(1) + std::exp(real(-1.702) * x));
      pa->grad[i] += self.grad[i] * (s + x * real(1.702) * s * (real(1) - s));
    }
  });
}

// Last-axis normalization without learned affine terms (modulation is
// composed externally).
inline Tensor layer_norm_lastaxis(const Tensor& a, real eps = real(1e-6)) {
  require(a.rank() >= 1, "layer_norm: rank 0");
  const int64_t K = a.shape()[a.rank() - 1];
  const int64_t rows = a.numel() / K;
  std::vector<real> out(a.numel());
  std::vector<real> inv_sigma(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const real* x = a.value().data() + r * K;
    real mu = 0;
    for (int64_t k = 0; k < K; ++k) mu += x[k];
    mu /= static_cast<real>(K);
    real var = 0;
    for (int64_t k = 0; k < K; ++k) var += (x[k] - mu) * (x[k] - mu);
    var /= static_cast<real>(K);
    const real is = real(1) / std::sqrt(var + eps);
    inv_sigma[r] = is;
    real* y = out.data() + r * K;
    for (int64_t k = 0; k < K; ++k) y[k] = (x[k] - mu) * is;
  }
  auto pa = a.node();
  return detail::make_op(a.shape(), std::move(out), {pa},
                         [pa, rows, K, inv_sigma = std::move(inv_sigma)](Node& self) {
                           if (!pa->requires_grad) return;
                           pa->ensure_grad();
                           for (int64_t r = 0; r < rows; ++r) {
                             const real* y = self.value.data() + r * K;
                             const real* dy = self.grad.data() + r * K;
                             real mean_dy = 0, mean_dyy = 0;
                             for (int64_t k = 0; k < K; ++k) {
                               mean_dy += dy[k];
                               mean_dyy += dy[k] * y[k];
                             }
                             mean_dy /= static_cast<real>(K);
                             mean_dyy /= static_cast<real>(K);
                             real* dx = pa->grad.data() + r * K;
                             for (int64_t k = 0; k < K; ++k)
                               dx[k] += (dy[k] - mean_dy - y[k] * mean_dyy) * inv_sigma[r];
                           }
                         });
}

// ---------------------------------------------------------------------------
// Indexed ops.
// ---------------------------------------------------------------------------

// table (V, C), ids length n -> (n, C). Gradient scatter-adds rows.
inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  require(table.rank() == 2, "embedding_lookup expects (V,C) table");
  const int64_t V = table.shape()[0], C = table.shape()[1];
  const int64_t n = static_cast<int64_t>(ids.size());
  std::vector<real> out(n * C);
  for (int64_t i = 0; i < n; ++i) {
    require(ids[i] >= 0 && ids[i] < V, "embedding_lookup: id out of range");
    std::memcpy(out.data() + i * C, table.value().data() + int64_t(ids[i]) * C, sizeof(real) * C);
  }
  auto pt = table.node();
  return detail::make_op({n, C}, std::move(out), {pt}, [pt, ids, C](Node& self) {
    if (!pt->requires_grad) return;
    pt->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i) {
      real* trow = pt->grad.data() + int64_t(ids[i]) * C;
      const real* grow = self.grad.data() + int64_t(i) * C;
      for (int64_t c = 0; c < C; ++c) trow[c] += grow[c];
    }
  });
}

// x (R, K), ids length R -> (R,), out[r] = x[r, ids[r]].
inline Tensor gather_lastaxis(const Tensor& x, const std::vector<int>& ids) {
  require(x.rank() == 2, "gather_lastaxis expects rank-2 input");
  const int64_t R = x.shape()[0], K = x.shape()[1];
  require(static_cast<int64_t>(ids.size()) == R, "gather_lastaxis: ids length mismatch");
  std::vector<real> out(R);
  for (int64_t r = 0; r < R; ++r) {
    require(ids[r] >= 0 && ids[r] < K, "gather_lastaxis: id out of range");
    out[r] = x.value()[r * K + ids[r]];
  }
  auto px = x.node();
  return detail::make_op({R}, std::move(out), {px}, [px, ids, K](Node& self) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (int64_t r = 0; r < self.numel(); ++r) px->grad[r * K + ids[r]] += self.grad[r];
  });
}

// Forwards the value, blocks the gradient.
inline Tensor stop_gradient(const Tensor& a) {
  auto n = std::make_shared<Node>();
  n->shape = a.shape();
  n->value = a.value();
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Backward pass.
// ---------------------------------------------------------------------------

// Populates gradients of every requires_grad leaf reachable from `loss`.
// Interior gradients are per-call scratch; leaf gradients accumulate across
// calls until zero_grad.
inline void backward(const Tensor& loss) {
  require(loss.numel() == 1, "backward: loss must be scalar");
  require(loss.requires_grad(), "backward: loss does not require grad");

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // order is a postorder: parents precede children; walk it backwards.
  for (Node* n : order) {
    if (!n->parents.empty()) n->grad.assign(n->value.size(), real(0));
    else n->ensure_grad();
  }
  Node* root = loss.node().get();
  root->ensure_grad();
  root->grad[0] += real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Small composites used throughout the models.
// ---------------------------------------------------------------------------

// x (R, C) @ w (C, F) + b (F)
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return linear_op(x, w, b);
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
  Tensor d = sub(a, b);
  return reduce_mean(mul(d, d));
}

}  // namespace voxdiff
