#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
// Every op builds a graph node holding the forward value and a closure
// that scatters the output gradient back into its parents. backward()
// materializes the tape (topological order) and walks it once in reverse.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Dense>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "hgts/errors.hpp"

namespace hgts {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Worker count for batch-level parallelism. HGTS_THREADS caps it.
inline int thread_count() {
  static int n = [] {
    int t = 1;
#ifdef _OPENMP
    t = omp_get_max_threads();
#endif
    if (const char* env = std::getenv("HGTS_THREADS")) {
      int cap = std::atoi(env);
      if (cap > 0 && cap < t) t = cap;
    }
    return t < 1 ? 1 : t;
  }();
  return n;
}

// Static partition over [0,n): each index is owned by exactly one thread,
// so results are bit-identical regardless of the worker count.
template <class F>
void parallel_for(int64_t n, F&& f) {
#ifdef _OPENMP
  if (n > 1 && thread_count() > 1) {
#pragma omp parallel for schedule(static) num_threads(thread_count())
    for (int64_t i = 0; i < n; ++i) f(i);
    return;
  }
#endif
  for (int64_t i = 0; i < n; ++i) f(i);
}

// ---------------------------------------------------------------------------
// Graph node

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;

  int64_t size() const { return static_cast<int64_t>(value.size()); }

  void accumulate(const T* g, int64_t n) {
    if (!requires_grad) return;
    if (grad.empty()) grad.assign(value.size(), T(0));
    for (int64_t i = 0; i < n; ++i) grad[i] += g[i];
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> d(static_cast<size_t>(numel(shape)), T(0));
    return from(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    std::vector<T> d(static_cast<size_t>(numel(shape)), v);
    return from(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from({}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  int64_t dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    return n_->shape[static_cast<size_t>(i)];
  }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int64_t size() const { return n_->size(); }
  const std::vector<T>& data() const { return n_->value; }
  std::vector<T>& mutable_data() { return n_->value; }
  bool requires_grad() const { return n_->requires_grad; }
  const std::vector<T>& grad() const { return n_->grad; }
  std::vector<T>& mutable_grad() { return n_->grad; }

  void zero_grad() { n_->grad.clear(); }

  std::shared_ptr<Node<T>> node() const { return n_; }

  T item() const {
    if (size() != 1) throw ArgumentError("item() requires a single-element tensor, got " + shape_str(shape()));
    return n_->value[0];
  }

  // Detached copy: same values, no graph history.
  Tensor detach() const { return from(n_->shape, n_->value, false); }

  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<Node<T>> n_;
};

// Integer index container (TopK output, gather input). Not differentiable.
struct IndexTensor {
  Shape shape;
  std::vector<int64_t> idx;
  int64_t size() const { return static_cast<int64_t>(idx.size()); }
};

namespace detail {

template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> value, std::vector<Tensor<T>> parents,
                  std::function<void(Node<T>&)> bwd) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  n->requires_grad = rg;
  if (rg) {
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(bwd);
  }
  return Tensor<T>(std::move(n));
}

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

// Strides of `in` aligned to the (broadcast) shape `out`; 0 on broadcast axes.
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  auto st = row_major_strides(in);
  std::vector<int64_t> r(out.size(), 0);
  size_t off = out.size() - in.size();
  for (size_t i = 0; i < in.size(); ++i) r[off + i] = in[i] == 1 ? 0 : st[i];
  return r;
}

// Odometer walk over `out`, applying f(out_linear, a_offset, b_offset).
template <class F>
void broadcast_walk(const Shape& out, const std::vector<int64_t>& sa,
                    const std::vector<int64_t>& sb, F&& f) {
  int64_t n = numel(out);
  size_t r = out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  std::vector<int64_t> ix(r, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t lin = 0; lin < n; ++lin) {
    f(lin, oa, ob);
    for (size_t d = r; d-- > 0;) {
      ++ix[d];
      oa += sa[d];
      ob += sb[d];
      if (ix[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      ix[d] = 0;
    }
  }
}

// Sum `data` (shaped `from`) down to `to` (a broadcast source of `from`).
template <typename T>
std::vector<T> reduce_to_shape(const std::vector<T>& data, const Shape& from, const Shape& to) {
  std::vector<T> out(static_cast<size_t>(numel(to)), T(0));
  auto st = broadcast_strides(to, from);
  std::vector<int64_t> dummy(from.size(), 0);
  broadcast_walk(from, st, dummy, [&](int64_t lin, int64_t ot, int64_t) { out[ot] += data[lin]; });
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

namespace detail {

template <typename T, class FwdF, class BwdA, class BwdB>
Tensor<T> binary_broadcast(const Tensor<T>& a, const Tensor<T>& b, FwdF fwd, BwdA bwd_a, BwdB bwd_b) {
  Shape os = broadcast_shapes(a.shape(), b.shape());
  std::vector<T> out(static_cast<size_t>(numel(os)));
  const auto& va = a.data();
  const auto& vb = b.data();
  if (a.shape() == b.shape()) {
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(va[i], vb[i]);
  } else {
    auto sa = broadcast_strides(a.shape(), os);
    auto sb = broadcast_strides(b.shape(), os);
    broadcast_walk(os, sa, sb, [&](int64_t lin, int64_t oa, int64_t ob) { out[lin] = fwd(va[oa], vb[ob]); });
  }
  Shape ash = a.shape(), bsh = b.shape();
  return make_op<T>(
      os, std::move(out), {a, b}, [ash, bsh, bwd_a, bwd_b](Node<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        const Shape& os2 = n.shape;
        std::vector<T> ga, gb;
        bool need_a = pa.requires_grad, need_b = pb.requires_grad;
        if (need_a) ga.assign(n.grad.size(), T(0));
        if (need_b) gb.assign(n.grad.size(), T(0));
        auto sa = broadcast_strides(ash, os2);
        auto sb = broadcast_strides(bsh, os2);
        broadcast_walk(os2, sa, sb, [&](int64_t lin, int64_t oa, int64_t ob) {
          T g = n.grad[lin];
          if (need_a) ga[lin] = bwd_a(g, pa.value[oa], pb.value[ob], n.value[lin]);
          if (need_b) gb[lin] = bwd_b(g, pa.value[oa], pb.value[ob], n.value[lin]);
        });
        if (need_a) {
          auto r = reduce_to_shape(ga, os2, ash);
          pa.accumulate(r.data(), static_cast<int64_t>(r.size()));
        }
        if (need_b) {
          auto r = reduce_to_shape(gb, os2, bsh);
          pb.accumulate(r.data(), static_cast<int64_t>(r.size()));
        }
      });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_broadcast(
      a, b, [](T x, T y) { return x + y; },
      [](T g, T, T, T) { return g; }, [](T g, T, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_broadcast(
      a, b, [](T x, T y) { return x - y; },
      [](T g, T, T, T) { return g; }, [](T g, T, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_broadcast(
      a, b, [](T x, T y) { return x * y; },
      [](T g, T, T y, T) { return g * y; }, [](T g, T x, T, T) { return g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_broadcast(
      a, b, [](T x, T y) { return x / y; },
      [](T g, T, T y, T) { return g / y; },
      [](T g, T x, T y, T) { return -g * x / (y * y); });
}

namespace detail {

template <typename T, class FwdF, class BwdF>
Tensor<T> unary_op(const Tensor<T>& a, FwdF fwd, BwdF bwd) {
  std::vector<T> out(a.data().size());
  const auto& v = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(v[i]);
  return make_op<T>(a.shape(), std::move(out), {a}, [bwd](Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    std::vector<T> g(n.grad.size());
    for (size_t i = 0; i < g.size(); ++i) g[i] = bwd(n.grad[i], p.value[i], n.value[i]);
    p.accumulate(g.data(), static_cast<int64_t>(g.size()));
  });
}

}  // namespace detail

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return detail::unary_op(a, [s](T x) { return x + s; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return detail::unary_op(a, [s](T x) { return x * s; }, [s](T g, T, T) { return g * s; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return mul_scalar(a, T(-1));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary_op(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T g, T, T y) { return g * y * (T(1) - y); });
}

// tanh-approximation GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T c = std::sqrt(T(2) / T(M_PI));
  const T k = T(0.044715);
  return detail::unary_op(
      a,
      [c, k](T x) {
        T u = c * (x + k * x * x * x);
        return T(0.5) * x * (T(1) + std::tanh(u));
      },
      [c, k](T g, T x, T) {
        T u = c * (x + k * x * x * x);
        T t = std::tanh(u);
        T du = c * (T(1) + T(3) * k * x * x);
        return g * (T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du);
      });
}

template <typename T>
Tensor<T> sqrt_t(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return std::sqrt(x); },
      [](T g, T, T y) { return g / (T(2) * y); });
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape to) {
  if (numel(to) != a.size())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(to) + " changes element count");
  return detail::make_op<T>(std::move(to), a.data(), {a}, [](Node<T>& n) {
    n.parents[0]->accumulate(n.grad.data(), static_cast<int64_t>(n.grad.size()));
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, std::vector<int> perm) {
  int r = a.rank();
  if (static_cast<int>(perm.size()) != r) throw ShapeError("permute rank mismatch for " + shape_str(a.shape()));
  Shape os(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) os[static_cast<size_t>(i)] = a.shape()[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  auto in_st = detail::row_major_strides(a.shape());
  // out index (i0..ir-1) reads in offset sum ik * in_st[perm[k]]
  std::vector<int64_t> st(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) st[static_cast<size_t>(i)] = in_st[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  std::vector<T> out(static_cast<size_t>(numel(os)));
  const auto& v = a.data();
  std::vector<int64_t> zero(static_cast<size_t>(r), 0);
  detail::broadcast_walk(os, st, zero, [&](int64_t lin, int64_t oa, int64_t) { out[lin] = v[oa]; });
  return detail::make_op<T>(os, std::move(out), {a}, [st, os](Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    std::vector<T> g(p.value.size(), T(0));
    std::vector<int64_t> zero2(os.size(), 0);
    detail::broadcast_walk(os, st, zero2, [&](int64_t lin, int64_t oa, int64_t) { g[oa] += n.grad[lin]; });
    p.accumulate(g.data(), static_cast<int64_t>(g.size()));
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, int d0, int d1) {
  int r = a.rank();
  if (d0 < 0) d0 += r;
  if (d1 < 0) d1 += r;
  std::vector<int> perm(static_cast<size_t>(r));
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[static_cast<size_t>(d0)], perm[static_cast<size_t>(d1)]);
  return permute(a, perm);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  if (xs.empty()) throw ArgumentError("concat of zero tensors");
  int r = xs[0].rank();
  if (axis < 0) axis += r;
  Shape os = xs[0].shape();
  int64_t total = 0;
  for (const auto& x : xs) {
    if (x.rank() != r) throw ShapeError("concat rank mismatch");
    for (int d = 0; d < r; ++d)
      if (d != axis && x.shape()[static_cast<size_t>(d)] != os[static_cast<size_t>(d)])
        throw ShapeError("concat shape mismatch: " + shape_str(x.shape()) + " vs " + shape_str(os));
    total += x.dim(axis);
  }
  os[static_cast<size_t>(axis)] = total;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= os[static_cast<size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= os[static_cast<size_t>(d)];
  std::vector<T> out(static_cast<size_t>(numel(os)));
  int64_t row = total * inner;
  int64_t off = 0;
  std::vector<int64_t> extents;
  for (const auto& x : xs) {
    int64_t e = x.dim(axis);
    extents.push_back(e);
    const auto& v = x.data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(v.begin() + o * e * inner, v.begin() + (o + 1) * e * inner,
                out.begin() + o * row + off * inner);
    off += e;
  }
  std::vector<Tensor<T>> parents = xs;
  return detail::make_op<T>(os, std::move(out), std::move(parents),
                            [outer, inner, row, extents](Node<T>& n) {
                              int64_t off2 = 0;
                              for (size_t i = 0; i < n.parents.size(); ++i) {
                                auto& p = *n.parents[i];
                                int64_t e = extents[i];
                                if (p.requires_grad) {
                                  std::vector<T> g(static_cast<size_t>(outer * e * inner));
                                  for (int64_t o = 0; o < outer; ++o)
                                    std::copy(n.grad.begin() + o * row + off2 * inner,
                                              n.grad.begin() + o * row + (off2 + e) * inner,
                                              g.begin() + o * e * inner);
                                  p.accumulate(g.data(), static_cast<int64_t>(g.size()));
                                }
                                off2 += e;
                              }
                            });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, int64_t start, int64_t len) {
  int r = a.rank();
  if (axis < 0) axis += r;
  int64_t e = a.dim(axis);
  if (start < 0 || len < 0 || start + len > e)
    throw ArgumentError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                        ") out of range for axis extent " + std::to_string(e));
  Shape os = a.shape();
  os[static_cast<size_t>(axis)] = len;
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.shape()[static_cast<size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= a.shape()[static_cast<size_t>(d)];
  std::vector<T> out(static_cast<size_t>(numel(os)));
  const auto& v = a.data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(v.begin() + (o * e + start) * inner, v.begin() + (o * e + start + len) * inner,
              out.begin() + o * len * inner);
  return detail::make_op<T>(os, std::move(out), {a}, [outer, inner, e, start, len](Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    std::vector<T> g(p.value.size(), T(0));
    for (int64_t o = 0; o < outer; ++o)
      std::copy(n.grad.begin() + o * len * inner, n.grad.begin() + (o + 1) * len * inner,
                g.begin() + (o * e + start) * inner);
    p.accumulate(g.data(), static_cast<int64_t>(g.size()));
  });
}

// index_select semantics: out extent on `axis` equals indices.size().
template <typename T>
Tensor<T> gather(const Tensor<T>& a, int axis, const std::vector<int64_t>& indices) {
  int r = a.rank();
  if (axis < 0) axis += r;
  int64_t e = a.dim(axis);
  for (int64_t ix : indices)
    if (ix < 0 || ix >= e) throw ArgumentError("gather index " + std::to_string(ix) + " out of range [0," + std::to_string(e) + ")");
  Shape os = a.shape();
  os[static_cast<size_t>(axis)] = static_cast<int64_t>(indices.size());
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.shape()[static_cast<size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= a.shape()[static_cast<size_t>(d)];
  int64_t k = static_cast<int64_t>(indices.size());
  std::vector<T> out(static_cast<size_t>(numel(os)));
  const auto& v = a.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < k; ++j)
      std::copy(v.begin() + (o * e + indices[static_cast<size_t>(j)]) * inner,
                v.begin() + (o * e + indices[static_cast<size_t>(j)] + 1) * inner,
                out.begin() + (o * k + j) * inner);
  return detail::make_op<T>(os, std::move(out), {a}, [outer, inner, e, k, indices](Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    std::vector<T> g(p.value.size(), T(0));
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < k; ++j) {
        const T* src = n.grad.data() + (o * k + j) * inner;
        T* dst = g.data() + (o * e + indices[static_cast<size_t>(j)]) * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    p.accumulate(g.data(), static_cast<int64_t>(g.size()));
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s = std::accumulate(a.data().begin(), a.data().end(), T(0));
  return detail::make_op<T>({}, {s}, {a}, [](Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    std::vector<T> g(p.value.size(), n.grad[0]);
    p.accumulate(g.data(), static_cast<int64_t>(g.size()));
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, int axis, bool keepdim = false) {
  int r = a.rank();
  if (axis < 0) axis += r;
  int64_t e = a.dim(axis);
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.shape()[static_cast<size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= a.shape()[static_cast<size_t>(d)];
  Shape os;
  for (int d = 0; d < r; ++d) {
    if (d == axis) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(a.shape()[static_cast<size_t>(d)]);
    }
  }
  std::vector<T> out(static_cast<size_t>(outer * inner), T(0));
  const auto& v = a.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < e; ++j) {
      const T* src = v.data() + (o * e + j) * inner;
      T* dst = out.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  return detail::make_op<T>(os, std::move(out), {a}, [outer, inner, e](Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    std::vector<T> g(p.value.size());
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t j = 0; j < e; ++j)
        std::copy(n.grad.begin() + o * inner, n.grad.begin() + (o + 1) * inner,
                  g.begin() + (o * e + j) * inner);
    p.accumulate(g.data(), static_cast<int64_t>(g.size()));
  });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, int axis, bool keepdim = false) {
  int r = a.rank();
  int ax = axis < 0 ? axis + r : axis;
  return mul_scalar(sum_axis(a, axis, keepdim), T(1) / static_cast<T>(a.dim(ax)));
}

// ---------------------------------------------------------------------------
// Matrix multiply (batched, broadcast over leading dims, Eigen kernels)

namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

enum class Tr { N, Y };

// C[M,N] = op(A) * op(B). Row blocks of C are partitioned across threads.
template <typename T>
void gemm(const T* A, Tr ta, const T* B, Tr tb, T* C, int64_t M, int64_t K, int64_t N) {
  ECMap<T> a(A, ta == Tr::N ? M : K, ta == Tr::N ? K : M);
  ECMap<T> b(B, tb == Tr::N ? K : N, tb == Tr::N ? N : K);
  EMap<T> c(C, M, N);
  int nt = thread_count();
  if (nt <= 1 || 2 * M * K * N < (1 << 20) || M < nt) {
    if (ta == Tr::N && tb == Tr::N)
      c.noalias() = a * b;
    else if (ta == Tr::N)
      c.noalias() = a * b.transpose();
    else if (tb == Tr::N)
      c.noalias() = a.transpose() * b;
    else
      c.noalias() = a.transpose() * b.transpose();
    return;
  }
  int64_t chunk = (M + nt - 1) / nt;
  parallel_for(nt, [&](int64_t t) {
    int64_t r0 = t * chunk;
    int64_t r1 = std::min(M, r0 + chunk);
    if (r0 >= r1) return;
    auto cb = c.middleRows(r0, r1 - r0);
    if (ta == Tr::N && tb == Tr::N)
      cb.noalias() = a.middleRows(r0, r1 - r0) * b;
    else if (ta == Tr::N)
      cb.noalias() = a.middleRows(r0, r1 - r0) * b.transpose();
    else if (tb == Tr::N)
      cb.noalias() = a.transpose().middleRows(r0, r1 - r0) * b;
    else
      cb.noalias() = a.transpose().middleRows(r0, r1 - r0) * b.transpose();
  });
}

// Offsets of each batch slice under broadcasting.
inline void batch_offsets(const Shape& batch, const Shape& owner_batch, int64_t slice_elems,
                          std::vector<int64_t>& out) {
  int64_t nb = numel(batch);
  out.resize(static_cast<size_t>(nb));
  auto st = broadcast_strides(owner_batch, batch);
  std::vector<int64_t> zero(batch.size(), 0);
  broadcast_walk(batch, st, zero, [&](int64_t lin, int64_t oa, int64_t) {
    out[static_cast<size_t>(lin)] = oa * slice_elems;
  });
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul requires rank >= 2: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int64_t m = a.dim(-2), ka = a.dim(-1);
  int64_t kb = b.dim(-2), n = b.dim(-1);
  if (ka != kb)
    throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Shape ba(a.shape().begin(), a.shape().end() - 2);
  Shape bb(b.shape().begin(), b.shape().end() - 2);
  Shape batch = detail::broadcast_shapes(ba, bb);
  Shape os = batch;
  os.push_back(m);
  os.push_back(n);
  int64_t nb = numel(batch);
  std::vector<T> out(static_cast<size_t>(numel(os)));
  const T* pa = a.data().data();
  const T* pb = b.data().data();

  bool a_full = (ba == batch);
  if (a_full && bb.empty()) {
    // single fused GEMM: [nb*m, k] x [k, n]
    detail::gemm(pa, detail::Tr::N, pb, detail::Tr::N, out.data(), nb * m, ka, n);
  } else {
    std::vector<int64_t> offa, offb;
    detail::batch_offsets(batch, ba, m * ka, offa);
    detail::batch_offsets(batch, bb, kb * n, offb);
    parallel_for(nb, [&](int64_t i) {
      detail::ECMap<T> am(pa + offa[static_cast<size_t>(i)], m, ka);
      detail::ECMap<T> bm(pb + offb[static_cast<size_t>(i)], ka, n);
      detail::EMap<T> cm(out.data() + i * m * n, m, n);
      cm.noalias() = am * bm;
    });
  }

  Shape ash = a.shape(), bsh = b.shape();
  return detail::make_op<T>(os, std::move(out), {a, b}, [ash, bsh, batch, m, ka, n, nb](Node<T>& nd) {
    auto& pa2 = *nd.parents[0];
    auto& pb2 = *nd.parents[1];
    Shape ba2(ash.begin(), ash.end() - 2);
    Shape bb2(bsh.begin(), bsh.end() - 2);
    bool a_full = (ba2 == batch);
    const T* g = nd.grad.data();
    if (pa2.requires_grad) {
      // da = g * b^T
      if (a_full && bb2.empty()) {
        std::vector<T> da(pa2.value.size());
        detail::gemm(g, detail::Tr::N, pb2.value.data(), detail::Tr::Y, da.data(), nb * m, n, ka);
        pa2.accumulate(da.data(), static_cast<int64_t>(da.size()));
      } else {
        std::vector<T> da_full(static_cast<size_t>(nb * m * ka));
        std::vector<int64_t> offb;
        detail::batch_offsets(batch, bb2, ka * n, offb);
        parallel_for(nb, [&](int64_t i) {
          detail::gemm(g + i * m * n, detail::Tr::N, pb2.value.data() + offb[static_cast<size_t>(i)],
                       detail::Tr::Y, da_full.data() + i * m * ka, m, n, ka);
        });
        Shape full = batch;
        full.push_back(m);
        full.push_back(ka);
        auto da = detail::reduce_to_shape(da_full, full, ash);
        pa2.accumulate(da.data(), static_cast<int64_t>(da.size()));
      }
    }
    if (pb2.requires_grad) {
      // db = a^T * g
      if (a_full && bb2.empty()) {
        std::vector<T> db(pb2.value.size());
        detail::gemm(pa2.value.data(), detail::Tr::Y, g, detail::Tr::N, db.data(), ka, nb * m, n);
        pb2.accumulate(db.data(), static_cast<int64_t>(db.size()));
      } else {
        std::vector<T> db_full(static_cast<size_t>(nb * ka * n));
        std::vector<int64_t> offa;
        detail::batch_offsets(batch, ba2, m * ka, offa);
        parallel_for(nb, [&](int64_t i) {
          detail::gemm(pa2.value.data() + offa[static_cast<size_t>(i)], detail::Tr::Y, g + i * m * n,
                       detail::Tr::N, db_full.data() + i * ka * n, ka, m, n);
        });
        Shape full = batch;
        full.push_back(ka);
        full.push_back(n);
        auto db = detail::reduce_to_shape(db_full, full, bsh);
        pb2.accumulate(db.data(), static_cast<int64_t>(db.size()));
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax over the last axis, with optional additive bias (attention mask).

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x_in, const Tensor<T>* bias = nullptr) {
  Tensor<T> x = bias ? add(x_in, *bias) : x_in;
  int64_t e = x.dim(-1);
  if (e < 1) throw ArgumentError("softmax over empty axis");
  int64_t rows = x.size() / e;
  std::vector<T> out(x.data().size());
  const auto& v = x.data();
  for (int64_t i = 0; i < static_cast<int64_t>(v.size()); ++i)
    if (std::isnan(v[static_cast<size_t>(i)])) throw NumericError("softmax input contains NaN");
  parallel_for(rows, [&](int64_t r) {
    const T* src = v.data() + r * e;
    T* dst = out.data() + r * e;
    T mx = src[0];
    for (int64_t i = 1; i < e; ++i) mx = std::max(mx, src[i]);
    T s = T(0);
    for (int64_t i = 0; i < e; ++i) {
      dst[i] = std::exp(src[i] - mx);
      s += dst[i];
    }
    T inv = T(1) / s;
    for (int64_t i = 0; i < e; ++i) dst[i] *= inv;
  });
  return detail::make_op<T>(x.shape(), std::move(out), {x}, [e, rows](Node<T>& n) {
    auto& p = *n.parents[0];
    if (!p.requires_grad) return;
    std::vector<T> g(n.grad.size());
    parallel_for(rows, [&](int64_t r) {
      const T* y = n.value.data() + r * e;
      const T* go = n.grad.data() + r * e;
      T dot = T(0);
      for (int64_t i = 0; i < e; ++i) dot += go[i] * y[i];
      T* dst = g.data() + r * e;
      for (int64_t i = 0; i < e; ++i) dst[i] = y[i] * (go[i] - dot);
    });
    p.accumulate(g.data(), static_cast<int64_t>(g.size()));
  });
}

// ---------------------------------------------------------------------------
// LayerNorm over the last axis with affine gain/offset (shape [D]).
// Composed from primitive ops so the gradient is exact by construction.

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& offset, T eps) {
  if (gain.shape() != Shape{x.dim(-1)} || offset.shape() != Shape{x.dim(-1)})
    throw ShapeError("layer_norm affine shape " + shape_str(gain.shape()) + " does not match last extent of " +
                     shape_str(x.shape()));
  auto mu = mean_axis(x, -1, true);
  auto xc = sub(x, mu);
  auto var = mean_axis(mul(xc, xc), -1, true);
  auto stdv = sqrt_t(add_scalar(var, eps));
  auto xhat = div(xc, stdv);
  return add(mul(xhat, gain), offset);
}

// ---------------------------------------------------------------------------
// TopK over the last axis: k largest per slice, ties -> smaller index,
// returned indices sorted ascending. Deterministic, not differentiable.

template <typename T>
IndexTensor topk_lastdim(const Tensor<T>& x, int64_t k) {
  int64_t e = x.dim(-1);
  if (k < 1 || k > e)
    throw ArgumentError("topk k=" + std::to_string(k) + " out of range for last extent " + std::to_string(e));
  int64_t rows = x.size() / e;
  IndexTensor out;
  out.shape = x.shape();
  out.shape.back() = k;
  out.idx.resize(static_cast<size_t>(rows * k));
  const auto& v = x.data();
  std::vector<int64_t> ord(static_cast<size_t>(e));
  for (int64_t r = 0; r < rows; ++r) {
    const T* src = v.data() + r * e;
    std::iota(ord.begin(), ord.end(), 0);
    std::partial_sort(ord.begin(), ord.begin() + k, ord.end(), [src](int64_t i, int64_t j) {
      if (src[i] != src[j]) return src[i] > src[j];
      return i < j;
    });
    std::sort(ord.begin(), ord.begin() + k);
    std::copy(ord.begin(), ord.begin() + k, out.idx.begin() + r * k);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward pass

template <typename T>
struct Tape {
  std::vector<Node<T>*> order;  // topological: parents precede users
};

template <typename T>
Tape<T> build_tape(const Tensor<T>& loss) {
  Tape<T> tape;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.push_back({loss.node().get(), 0});
  while (!stack.empty()) {
    auto& [nd, next] = stack.back();
    if (next == 0 && seen.count(nd)) {
      stack.pop_back();
      continue;
    }
    if (next < nd->parents.size()) {
      Node<T>* p = nd->parents[next].get();
      ++next;
      if (p->requires_grad && !seen.count(p)) stack.push_back({p, 0});
    } else {
      if (!seen.count(nd)) {
        seen.insert(nd);
        tape.order.push_back(nd);
      }
      stack.pop_back();
    }
  }
  return tape;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) throw ArgumentError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw ArgumentError("backward on a tensor with no tracked parameters");
  auto tape = build_tape(loss);
  Node<T>* root = loss.node().get();
  if (root->grad.empty()) root->grad.assign(1, T(0));
  root->grad[0] += T(1);
  for (size_t i = tape.order.size(); i-- > 0;) {
    Node<T>* nd = tape.order[i];
    if (nd->backward_fn && !nd->grad.empty()) nd->backward_fn(*nd);
  }
}

// ---------------------------------------------------------------------------
// Deterministic RNG (Box-Muller on mt19937_64; identical across platforms).

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  double uniform() {
    // 53-bit mantissa uniform in [0,1)
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0, u2 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  // Normal(0, stddev) truncated to +/- 2 stddev.
  double trunc_normal(double stddev) {
    double z = 0.0;
    do {
      z = normal();
    } while (std::abs(z) > 2.0);
    return z * stddev;
  }

  uint64_t integer(uint64_t n) {
    // rejection sampling; unbiased
    uint64_t lim = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = 0;
    do {
      v = eng_();
    } while (v >= lim);
    return v % n;
  }

  template <typename V>
  void shuffle(std::vector<V>& xs) {
    for (size_t i = xs.size(); i > 1; --i) std::swap(xs[i - 1], xs[integer(i)]);
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

template <typename T>
Tensor<T> randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
  std::vector<T> d(static_cast<size_t>(numel(shape)));
  for (auto& v : d) v = static_cast<T>(rng.normal()) * stddev;
  return Tensor<T>::from(std::move(shape), std::move(d), requires_grad);
}

template <typename T>
Tensor<T> trunc_normal_init(Shape shape, Rng& rng, T stddev, bool requires_grad = true) {
  std::vector<T> d(static_cast<size_t>(numel(shape)));
  for (auto& v : d) v = static_cast<T>(rng.trunc_normal(stddev));
  return Tensor<T>::from(std::move(shape), std::move(d), requires_grad);
}

// ---------------------------------------------------------------------------
// Adam with bias correction.

template <typename T>
struct AdamState {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  int64_t t = 0;
  std::vector<std::vector<T>> m, v;  // aligned with the parameter list

  void reset(const std::vector<Tensor<T>>& params) {
    t = 0;
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.data().size(), T(0));
      v.emplace_back(p.data().size(), T(0));
    }
  }
};

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& st) {
  if (st.m.size() != params.size()) throw ArgumentError("adam state not initialized for this parameter list");
  if (!(st.lr > T(0))) throw ArgumentError("adam learning rate must be positive");
  st.t += 1;
  T bc1 = T(1) - std::pow(st.beta1, static_cast<T>(st.t));
  T bc2 = T(1) - std::pow(st.beta2, static_cast<T>(st.t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].mutable_data();
    const auto& g = params[i].grad();
    if (g.empty()) continue;  // zero gradient: no update
    if (g.size() != p.size() || st.m[i].size() != p.size())
      throw ShapeError("adam gradient/state size mismatch for parameter " + std::to_string(i));
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (size_t j = 0; j < p.size(); ++j) {
      m[j] = st.beta1 * m[j] + (T(1) - st.beta1) * g[j];
      v[j] = st.beta2 * v[j] + (T(1) - st.beta2) * g[j] * g[j];
      T mhat = m[j] / bc1;
      T vhat = v[j] / bc2;
      p[j] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
}

// Global-norm gradient clipping. Returns the pre-clip norm.
template <typename T>
T clip_grad_norm(std::vector<Tensor<T>>& params, T max_norm) {
  T sq = T(0);
  for (auto& p : params)
    for (T g : p.grad()) sq += g * g;
  T norm = std::sqrt(sq);
  if (norm > max_norm && norm > T(0)) {
    T scale = max_norm / norm;
    for (auto& p : params)
      for (auto& x : p.mutable_grad()) x *= scale;
  }
  return norm;
}

template <typename T>
void zero_grads(std::vector<Tensor<T>>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace hgts
