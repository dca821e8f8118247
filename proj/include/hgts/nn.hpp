#pragma once

// Reusable layers: linear maps, reversible instance normalization, patch
// embedding, rotary position embedding, multi-head self-attention and the
// feed-forward block.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hgts/errors.hpp"
#include "hgts/tensor.hpp"

namespace hgts::nn {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // out x in
  Tensor<T> bias;    // out
  bool has_bias = true;

  Linear() = default;

  Linear(int64_t in, int64_t out, Rng& rng, bool with_bias = true) : has_bias(with_bias) {
    weight = trunc_normal_init<T>({out, in}, rng, T(0.02));
    if (with_bias) bias = Tensor<T>::zeros({out}, true);
  }

  int64_t in_features() const { return weight.dim(1); }
  int64_t out_features() const { return weight.dim(0); }

  Tensor<T> forward(const Tensor<T>& x) const {
    auto y = matmul(x, transpose(weight, 0, 1));
    return has_bias ? add(y, bias) : y;
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    if (has_bias) out.push_back({prefix + ".bias", bias});
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> offset;
  T eps = T(1e-5);

  LayerNorm() = default;
  explicit LayerNorm(int64_t d) {
    gain = Tensor<T>::full({d}, T(1), true);
    offset = Tensor<T>::zeros({d}, true);
  }

  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gain, offset, eps); }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".offset", offset});
  }
};

template <typename T>
struct FFN {
  Linear<T> fc1, fc2;

  FFN() = default;
  FFN(int64_t d_model, int64_t d_ff, Rng& rng)
      : fc1(d_model, d_ff, rng), fc2(d_ff, d_model, rng) {}

  Tensor<T> forward(const Tensor<T>& x) const { return fc2.forward(gelu(fc1.forward(x))); }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) const {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }
};

// ---------------------------------------------------------------------------
// Per-window per-channel standardization, inverted at the output head.

template <typename T>
struct NormStats {
  int64_t batch = 0;
  int64_t channels = 0;
  std::vector<T> mean;   // batch*channels
  std::vector<T> stdev;  // batch*channels, epsilon already added
};

inline constexpr double kNormEps = 1e-5;

// x: B x C x L. When `observed` is given (same extent, nonzero = observed),
// statistics use only observed points and unobserved entries are zeroed
// after normalization. Rows need at least 2 observed points.
template <typename T>
std::pair<Tensor<T>, NormStats<T>> instance_norm(const Tensor<T>& x,
                                                 const std::vector<uint8_t>* observed = nullptr) {
  if (x.rank() != 3) throw ShapeError("instance_norm expects B x C x L, got " + shape_str(x.shape()));
  int64_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
  if (observed && static_cast<int64_t>(observed->size()) != B * C * L)
    throw ShapeError("observed mask size does not match input");
  NormStats<T> st;
  st.batch = B;
  st.channels = C;
  st.mean.resize(static_cast<size_t>(B * C));
  st.stdev.resize(static_cast<size_t>(B * C));
  std::vector<T> out(x.data().size());
  const auto& v = x.data();
  for (int64_t r = 0; r < B * C; ++r) {
    const T* src = v.data() + r * L;
    const uint8_t* obs = observed ? observed->data() + r * L : nullptr;
    int64_t n = 0;
    double s = 0;
    for (int64_t i = 0; i < L; ++i) {
      if (obs && !obs[i]) continue;
      s += src[i];
      ++n;
    }
    if (n < 2)
      throw DataError("instance_norm: row " + std::to_string(r) + " has " + std::to_string(n) +
                      " observed points (need >= 2)");
    double mu = s / static_cast<double>(n);
    double var = 0;
    for (int64_t i = 0; i < L; ++i) {
      if (obs && !obs[i]) continue;
      double d = src[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    double sd = std::sqrt(var) + kNormEps;
    st.mean[static_cast<size_t>(r)] = static_cast<T>(mu);
    st.stdev[static_cast<size_t>(r)] = static_cast<T>(sd);
    T* dst = out.data() + r * L;
    for (int64_t i = 0; i < L; ++i) {
      if (obs && !obs[i])
        dst[i] = T(0);
      else
        dst[i] = static_cast<T>((src[i] - mu) / sd);
    }
  }
  return {Tensor<T>::from(x.shape(), std::move(out)), std::move(st)};
}

// y_hat * std + mean, per (b,c) row. Pure data op (inference side).
template <typename T>
Tensor<T> denormalize(const Tensor<T>& yhat, const NormStats<T>& st) {
  if (yhat.rank() != 3 || yhat.dim(0) != st.batch || yhat.dim(1) != st.channels)
    throw ShapeError("denormalize: stats do not match " + shape_str(yhat.shape()));
  int64_t Tlen = yhat.dim(2);
  std::vector<T> out(yhat.data().size());
  const auto& v = yhat.data();
  for (int64_t r = 0; r < st.batch * st.channels; ++r) {
    T mu = st.mean[static_cast<size_t>(r)];
    T sd = st.stdev[static_cast<size_t>(r)];
    for (int64_t i = 0; i < Tlen; ++i) out[static_cast<size_t>(r * Tlen + i)] = v[static_cast<size_t>(r * Tlen + i)] * sd + mu;
  }
  return Tensor<T>::from(yhat.shape(), std::move(out));
}

// (y - mean) / std with existing stats; used to move targets into the
// normalized domain of the matching input window.
template <typename T>
Tensor<T> normalize_with(const Tensor<T>& y, const NormStats<T>& st) {
  if (y.rank() != 3 || y.dim(0) != st.batch || y.dim(1) != st.channels)
    throw ShapeError("normalize_with: stats do not match " + shape_str(y.shape()));
  int64_t Tlen = y.dim(2);
  std::vector<T> out(y.data().size());
  const auto& v = y.data();
  for (int64_t r = 0; r < st.batch * st.channels; ++r) {
    T mu = st.mean[static_cast<size_t>(r)];
    T sd = st.stdev[static_cast<size_t>(r)];
    for (int64_t i = 0; i < Tlen; ++i) out[static_cast<size_t>(r * Tlen + i)] = (v[static_cast<size_t>(r * Tlen + i)] - mu) / sd;
  }
  return Tensor<T>::from(y.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Patch embedding: split length L into N = L/P non-overlapping patches and
// map each to the model width. No padding: L must divide evenly.

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& x_norm, int64_t patch_len, const Linear<T>& embed) {
  if (x_norm.rank() != 3) throw ShapeError("patch_embed expects B x C x L, got " + shape_str(x_norm.shape()));
  int64_t B = x_norm.dim(0), C = x_norm.dim(1), L = x_norm.dim(2);
  if (patch_len <= 0 || L % patch_len != 0)
    throw ConfigError("lookback " + std::to_string(L) + " is not divisible by patch length " +
                      std::to_string(patch_len));
  int64_t N = L / patch_len;
  auto patches = reshape(x_norm, {B, C, N, patch_len});
  return embed.forward(patches);
}

// ---------------------------------------------------------------------------
// Rotary position embedding, base 10000, applied to consecutive value pairs.

template <typename T>
struct RoPECache {
  int64_t max_pos = 0;
  int64_t half = 0;  // head_dim / 2
  std::vector<T> cos_t, sin_t;  // max_pos x half

  RoPECache() = default;

  RoPECache(int64_t max_positions, int64_t head_dim, T base = T(10000)) {
    if (head_dim % 2 != 0)
      throw ConfigError("rotary embedding needs an even head dim, got " + std::to_string(head_dim));
    max_pos = max_positions;
    half = head_dim / 2;
    cos_t.resize(static_cast<size_t>(max_pos * half));
    sin_t.resize(static_cast<size_t>(max_pos * half));
    for (int64_t n = 0; n < max_pos; ++n)
      for (int64_t i = 0; i < half; ++i) {
        double freq = std::pow(static_cast<double>(base), -2.0 * static_cast<double>(i) / static_cast<double>(2 * half));
        double ang = static_cast<double>(n) * freq;
        cos_t[static_cast<size_t>(n * half + i)] = static_cast<T>(std::cos(ang));
        sin_t[static_cast<size_t>(n * half + i)] = static_cast<T>(std::sin(ang));
      }
  }
};

// x: [..., N, head_dim]; pairs (2i, 2i+1) rotated by n * base^(-2i/head_dim).
template <typename T>
Tensor<T> apply_rope(const Tensor<T>& x, const RoPECache<T>& cache) {
  if (x.rank() < 2) throw ShapeError("apply_rope expects [..., N, head_dim], got " + shape_str(x.shape()));
  int64_t dh = x.dim(-1), N = x.dim(-2);
  if (dh != 2 * cache.half)
    throw ConfigError("rope cache built for head dim " + std::to_string(2 * cache.half) + ", input has " +
                      std::to_string(dh));
  if (N > cache.max_pos)
    throw ConfigError("rope cache covers " + std::to_string(cache.max_pos) + " positions, input has " +
                      std::to_string(N));
  int64_t outer = x.size() / (N * dh);
  int64_t half = cache.half;
  std::vector<T> out(x.data().size());
  const auto& v = x.data();
  const T* ct = cache.cos_t.data();
  const T* stb = cache.sin_t.data();
  parallel_for(outer, [&](int64_t o) {
    for (int64_t n = 0; n < N; ++n) {
      const T* src = v.data() + (o * N + n) * dh;
      T* dst = out.data() + (o * N + n) * dh;
      const T* c = ct + n * half;
      const T* s = stb + n * half;
      for (int64_t i = 0; i < half; ++i) {
        T x0 = src[2 * i], x1 = src[2 * i + 1];
        dst[2 * i] = x0 * c[i] - x1 * s[i];
        dst[2 * i + 1] = x0 * s[i] + x1 * c[i];
      }
    }
  });
  // the closure owns its own copy of the used table rows
  std::vector<T> ccopy(ct, ct + N * half), scopy(stb, stb + N * half);
  return detail::make_op<T>(x.shape(), std::move(out), {x},
                            [N, dh, half, outer, ccopy = std::move(ccopy), scopy = std::move(scopy)](Node<T>& nd) {
    auto& p = *nd.parents[0];
    if (!p.requires_grad) return;
    std::vector<T> g(nd.grad.size());
    parallel_for(outer, [&](int64_t o) {
      for (int64_t n = 0; n < N; ++n) {
        const T* go = nd.grad.data() + (o * N + n) * dh;
        T* dst = g.data() + (o * N + n) * dh;
        const T* c = ccopy.data() + n * half;
        const T* s = scopy.data() + n * half;
        for (int64_t i = 0; i < half; ++i) {
          T g0 = go[2 * i], g1 = go[2 * i + 1];
          dst[2 * i] = g0 * c[i] + g1 * s[i];
          dst[2 * i + 1] = -g0 * s[i] + g1 * c[i];
        }
      }
    });
    p.accumulate(g.data(), static_cast<int64_t>(g.size()));
  });
}

// ---------------------------------------------------------------------------
// Multi-head self-attention with RoPE on Q/K, optional causal mask,
// output projection and residual.

template <typename T>
Tensor<T> causal_bias(int64_t n) {
  std::vector<T> b(static_cast<size_t>(n * n), T(0));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = i + 1; j < n; ++j) b[static_cast<size_t>(i * n + j)] = T(-1e9);
  return Tensor<T>::from({n, n}, std::move(b));
}

template <typename T>
struct MHSA {
  Linear<T> wq, wk, wv, wp;
  int64_t heads = 1;
  bool causal = false;

  MHSA() = default;

  MHSA(int64_t d_model, int64_t n_heads, bool causal_flag, Rng& rng)
      : wq(d_model, d_model, rng),
        wk(d_model, d_model, rng),
        wv(d_model, d_model, rng),
        wp(d_model, d_model, rng),
        heads(n_heads),
        causal(causal_flag) {
    if (d_model % n_heads != 0)
      throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by heads " +
                        std::to_string(n_heads));
  }

  // x: (B*C) x N x D -> same shape. RoPE can be disabled (ablation).
  Tensor<T> forward(const Tensor<T>& x, const RoPECache<T>* rope) const {
    int64_t Bc = x.dim(0), N = x.dim(1), D = x.dim(2);
    int64_t dh = D / heads;
    auto split = [&](const Tensor<T>& t) {
      return permute(reshape(t, {Bc, N, heads, dh}), {0, 2, 1, 3});  // Bc,H,N,dh
    };
    auto q = split(wq.forward(x));
    auto k = split(wk.forward(x));
    auto v = split(wv.forward(x));
    if (rope) {
      q = apply_rope(q, *rope);
      k = apply_rope(k, *rope);
    }
    auto logits = mul_scalar(matmul(q, transpose(k, -1, -2)), T(1) / std::sqrt(static_cast<T>(dh)));
    Tensor<T> att;
    if (causal) {
      auto bias = causal_bias<T>(N);
      att = softmax_lastdim(logits, &bias);
    } else {
      att = softmax_lastdim(logits);
    }
    auto ctx = reshape(permute(matmul(att, v), {0, 2, 1, 3}), {Bc, N, D});
    return add(wp.forward(ctx), x);
  }

  void collect(std::vector<NamedParam<T>>& out, const std::string& prefix) const {
    wq.collect(out, prefix + ".wq");
    wk.collect(out, prefix + ".wk");
    wv.collect(out, prefix + ".wv");
    wp.collect(out, prefix + ".wp");
  }
};

}  // namespace hgts::nn
