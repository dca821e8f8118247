#pragma once

// Learnable hypergraph construction (confidence -> TopK incidence -> additive
// mask) and the attention blocks that aggregate over it: node-to-hyperedge
// within a channel (intra), hyperedge-to-channel across channels (inter), and
// the hyperedge-to-node write-back.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "hgts/errors.hpp"
#include "hgts/nn.hpp"
#include "hgts/tensor.hpp"

namespace hgts::hg {

template <typename T>
struct HyperGraphStructure {
  int64_t batch = 0;
  int64_t rows = 0;  // hyperedges
  int64_t cols = 0;  // nodes
  int64_t k_per_node = 0;
  T alpha = T(0);
  std::vector<T> confidence;       // batch x rows x cols, in (0,1)
  std::vector<uint8_t> incidence;  // batch x rows x cols, binary
  Tensor<T> mask;                  // batch x rows x cols, entries in {0, alpha}; graph constant

  // column sums of the incidence matrix, per batch slice
  std::vector<int64_t> column_degrees(int64_t b) const {
    std::vector<int64_t> deg(static_cast<size_t>(cols), 0);
    for (int64_t e = 0; e < rows; ++e)
      for (int64_t nidx = 0; nidx < cols; ++nidx)
        deg[static_cast<size_t>(nidx)] += incidence[static_cast<size_t>((b * rows + e) * cols + nidx)];
    return deg;
  }
};

// queries: rows x D (shared) or batch x rows x D; nodes: batch x cols x D.
// Selection is per node: the k highest-confidence hyperedges of each node
// column get incidence 1. Confidence is computed on detached values; the
// mask enters the attention as a constant.
template <typename T>
HyperGraphStructure<T> build_structure(const Tensor<T>& queries, const Tensor<T>& nodes, T alpha,
                                       int64_t k) {
  if (nodes.rank() != 3) throw ShapeError("build_structure nodes must be batch x cols x D, got " + shape_str(nodes.shape()));
  if (queries.rank() != 2 && queries.rank() != 3)
    throw ShapeError("build_structure queries must be rows x D or batch x rows x D, got " + shape_str(queries.shape()));
  int64_t rows = queries.dim(queries.rank() == 2 ? 0 : 1);
  int64_t batch = nodes.dim(0), cols = nodes.dim(1), d = nodes.dim(2);
  if (queries.dim(-1) != d)
    throw ShapeError("build_structure width mismatch: " + shape_str(queries.shape()) + " vs " + shape_str(nodes.shape()));
  if (queries.rank() == 3 && queries.dim(0) != batch)
    throw ShapeError("build_structure batch mismatch: " + shape_str(queries.shape()) + " vs " + shape_str(nodes.shape()));
  if (k < 1 || k > rows)
    throw ConfigError("hypergraph k=" + std::to_string(k) + " out of range for " + std::to_string(rows) + " hyperedges");

  auto q = queries.detach();
  auto x = nodes.detach();
  auto conf = sigmoid(matmul(q, transpose(x, -1, -2)));  // batch x rows x cols

  HyperGraphStructure<T> st;
  st.batch = batch;
  st.rows = rows;
  st.cols = cols;
  st.k_per_node = k;
  st.alpha = alpha;
  st.confidence = conf.data();
  st.incidence.assign(static_cast<size_t>(batch * rows * cols), 0);

  auto conf_t = transpose(conf, -1, -2);  // batch x cols x rows
  auto top = topk_lastdim(conf_t, k);
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t nidx = 0; nidx < cols; ++nidx)
      for (int64_t j = 0; j < k; ++j) {
        int64_t e = top.idx[static_cast<size_t>((b * cols + nidx) * k + j)];
        st.incidence[static_cast<size_t>((b * rows + e) * cols + nidx)] = 1;
      }

  std::vector<T> mask(st.incidence.size());
  for (size_t i = 0; i < mask.size(); ++i) mask[i] = st.incidence[i] ? T(0) : alpha;
  st.mask = Tensor<T>::from({batch, rows, cols}, std::move(mask));
  return st;
}

// Multi-head cross-attention core. queries: [rows x D] or [batch x rows x D];
// keys/values: batch x cols x D; optional additive mask batch x rows x cols.
template <typename T>
Tensor<T> cross_attention(const Tensor<T>& queries, const Tensor<T>& keys, const Tensor<T>& values,
                          int64_t heads, const Tensor<T>* mask) {
  int64_t d = keys.dim(-1);
  if (d % heads != 0) throw ConfigError("attention width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  int64_t dh = d / heads;
  int64_t batch = keys.dim(0), cols = keys.dim(1);
  int64_t rows = queries.dim(queries.rank() == 2 ? 0 : 1);

  auto split_q = [&](const Tensor<T>& t) {
    if (t.rank() == 2) return permute(reshape(t, {rows, heads, dh}), {1, 0, 2});  // H x rows x dh
    return permute(reshape(t, {batch, rows, heads, dh}), {0, 2, 1, 3});           // B x H x rows x dh
  };
  auto split_kv = [&](const Tensor<T>& t) {
    return permute(reshape(t, {batch, cols, heads, dh}), {0, 2, 1, 3});  // B x H x cols x dh
  };
  auto qh = split_q(queries);
  auto kh = split_kv(keys);
  auto vh = split_kv(values);
  auto logits = mul_scalar(matmul(qh, transpose(kh, -1, -2)), T(1) / std::sqrt(static_cast<T>(dh)));
  Tensor<T> att;
  if (mask) {
    auto bias = reshape(*mask, {batch, 1, rows, cols});
    att = softmax_lastdim(logits, &bias);
  } else {
    att = softmax_lastdim(logits);
  }
  auto ctx = matmul(att, vh);  // B x H x rows x dh
  return reshape(permute(ctx, {0, 2, 1, 3}), {batch, rows, d});
}

// Node-to-hyperedge aggregation: masked cross-attention followed by the
// pre/post-normalized feed-forward with residual.
template <typename T>
Tensor<T> hga_aggregate(const Tensor<T>& queries, const Tensor<T>& nodes, const Tensor<T>& mask,
                        const nn::Linear<T>& wq, const nn::Linear<T>& wk, const nn::Linear<T>& wv,
                        const nn::FFN<T>& ffn, const nn::LayerNorm<T>& ln1, const nn::LayerNorm<T>& ln2,
                        int64_t heads) {
  auto x_out = cross_attention(wq.forward(queries), wk.forward(nodes), wv.forward(nodes), heads, &mask);
  return add(ln2.forward(ffn.forward(ln1.forward(x_out))), x_out);
}

// ---------------------------------------------------------------------------

template <typename T>
struct IntraHGA {
  Tensor<T> queries;  // E x D, learnable temporal-pattern slots
  nn::Linear<T> wq, wk, wv;
  nn::FFN<T> ffn;
  nn::LayerNorm<T> ln1, ln2;
  int64_t heads = 1;
  int64_t edges = 0;

  IntraHGA() = default;

  IntraHGA(int64_t edge_num, int64_t d_model, int64_t d_ff, int64_t n_heads, Rng& rng)
      : wq(d_model, d_model, rng),
        wk(d_model, d_model, rng),
        wv(d_model, d_model, rng),
        ffn(d_model, d_ff, rng),
        ln1(d_model),
        ln2(d_model),
        heads(n_heads),
        edges(edge_num) {
    if (edge_num <= 3)
      throw ConfigError("edge num must be greater than 3, got " + std::to_string(edge_num));
    queries = trunc_normal_init<T>({edge_num, d_model}, rng, T(0.02));
  }

  int64_t k_per_node() const { return edges / 3; }

  // tokens: (B*C) x N x D -> hyperedge features (B*C) x E x D plus structure.
  std::pair<Tensor<T>, HyperGraphStructure<T>> forward(const Tensor<T>& tokens, T alpha) const {
    auto st = build_structure(queries, tokens, alpha, k_per_node());
    auto out = hga_aggregate(queries, tokens, st.mask, wq, wk, wv, ffn, ln1, ln2, heads);
    return {out, std::move(st)};
  }

  void collect(std::vector<nn::NamedParam<T>>& out, const std::string& prefix) const {
    out.push_back({prefix + ".queries", queries});
    wq.collect(out, prefix + ".wq");
    wk.collect(out, prefix + ".wk");
    wv.collect(out, prefix + ".wv");
    ffn.collect(out, prefix + ".ffn");
    ln1.collect(out, prefix + ".ln1");
    ln2.collect(out, prefix + ".ln2");
  }
};

template <typename T>
struct InterHGA {
  nn::Linear<T> wq, wk, wv;
  nn::FFN<T> ffn;
  nn::LayerNorm<T> ln1, ln2;
  int64_t heads = 1;

  InterHGA() = default;

  InterHGA(int64_t d_model, int64_t d_ff, int64_t n_heads, Rng& rng)
      : wq(d_model, d_model, rng),
        wk(d_model, d_model, rng),
        wv(d_model, d_model, rng),
        ffn(d_model, d_ff, rng),
        ln1(d_model),
        ln2(d_model),
        heads(n_heads) {}

  static int64_t k_per_node(int64_t channels) { return std::max<int64_t>(1, channels / 3); }

  // nodes: B x (C*E) x D flattened channel-major; q_g: B x C x D global queries.
  std::pair<Tensor<T>, HyperGraphStructure<T>> forward(const Tensor<T>& nodes, const Tensor<T>& q_g,
                                                       T alpha) const {
    int64_t channels = q_g.dim(1);
    auto st = build_structure(q_g, nodes, alpha, k_per_node(channels));
    auto out = hga_aggregate(q_g, nodes, st.mask, wq, wk, wv, ffn, ln1, ln2, heads);
    return {out, std::move(st)};
  }

  void collect(std::vector<nn::NamedParam<T>>& out, const std::string& prefix) const {
    wq.collect(out, prefix + ".wq");
    wk.collect(out, prefix + ".wk");
    wv.collect(out, prefix + ".wv");
    ffn.collect(out, prefix + ".ffn");
    ln1.collect(out, prefix + ".ln1");
    ln2.collect(out, prefix + ".ln2");
  }
};

// Write channel-level hyperedge features back into every patch token.
// No incidence mask on this stage: tokens may read every hyperedge.
template <typename T>
struct EdgeToNode {
  nn::Linear<T> wq, wk, wv, wp;
  nn::FFN<T> ffn;
  nn::LayerNorm<T> ln1, ln2;
  int64_t heads = 1;

  EdgeToNode() = default;

  EdgeToNode(int64_t d_model, int64_t d_ff, int64_t n_heads, Rng& rng)
      : wq(d_model, d_model, rng),
        wk(d_model, d_model, rng),
        wv(d_model, d_model, rng),
        wp(d_model, d_model, rng),
        ffn(d_model, d_ff, rng),
        ln1(d_model),
        ln2(d_model),
        heads(n_heads) {}

  // tokens: B x (C*N) x D; edges: B x C x D.
  Tensor<T> forward(const Tensor<T>& tokens, const Tensor<T>& edges) const {
    auto ctx = cross_attention<T>(wq.forward(tokens), wk.forward(edges), wv.forward(edges), heads,
                                  static_cast<const Tensor<T>*>(nullptr));
    auto x_node = add(wp.forward(ctx), tokens);
    return add(ln2.forward(ffn.forward(ln1.forward(x_node))), x_node);
  }

  void collect(std::vector<nn::NamedParam<T>>& out, const std::string& prefix) const {
    wq.collect(out, prefix + ".wq");
    wk.collect(out, prefix + ".wk");
    wv.collect(out, prefix + ".wv");
    wp.collect(out, prefix + ".wp");
    ffn.collect(out, prefix + ".ffn");
    ln1.collect(out, prefix + ".ln1");
    ln2.collect(out, prefix + ".ln2");
  }
};

// ---------------------------------------------------------------------------
// Inspection dumps: one CSV per batch slice, header row = node indices.

template <typename T>
void dump_structure_csv(const HyperGraphStructure<T>& st, const std::string& path_prefix) {
  auto write = [&](const std::string& kind, auto getter) {
    for (int64_t b = 0; b < st.batch; ++b) {
      std::ofstream f(path_prefix + "_" + kind + "_b" + std::to_string(b) + ".csv");
      if (!f) throw DataError("cannot write " + path_prefix + "_" + kind);
      f << "edge";
      for (int64_t nidx = 0; nidx < st.cols; ++nidx) f << ",n" << nidx;
      f << "\n";
      for (int64_t e = 0; e < st.rows; ++e) {
        f << e;
        for (int64_t nidx = 0; nidx < st.cols; ++nidx) f << "," << getter(b, e, nidx);
        f << "\n";
      }
    }
  };
  write("conf", [&](int64_t b, int64_t e, int64_t n) {
    return st.confidence[static_cast<size_t>((b * st.rows + e) * st.cols + n)];
  });
  write("adj", [&](int64_t b, int64_t e, int64_t n) {
    return static_cast<int>(st.incidence[static_cast<size_t>((b * st.rows + e) * st.cols + n)]);
  });
  write("mask", [&](int64_t b, int64_t e, int64_t n) {
    return st.mask.data()[static_cast<size_t>((b * st.rows + e) * st.cols + n)];
  });
}

}  // namespace hgts::hg
