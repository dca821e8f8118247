#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fd_check.hpp"
#include "hgts/hypergraph.hpp"

using namespace hgts;
using Td = Tensor<double>;

namespace {

// Dense loop oracle: attention restricted to each hyperedge's incident node
// set, computed with explicit loops, then the same LN/FFN/residual tail.
// Independent of the tensor-op implementation path.
std::vector<double> dense_hga_oracle(const Td& queries, const Td& nodes,
                                     const hg::HyperGraphStructure<double>& st, int64_t heads,
                                     const nn::Linear<double>& wq, const nn::Linear<double>& wk,
                                     const nn::Linear<double>& wv, const nn::FFN<double>& ffn,
                                     const nn::LayerNorm<double>& ln1, const nn::LayerNorm<double>& ln2) {
  int64_t B = st.batch, E = st.rows, N = st.cols;
  int64_t D = nodes.dim(2);
  int64_t dh = D / heads;
  bool batched_q = queries.rank() == 3;

  auto lin = [&](const nn::Linear<double>& l, const double* x, std::vector<double>& out) {
    int64_t in = l.weight.dim(1), on = l.weight.dim(0);
    out.assign(static_cast<size_t>(on), 0.0);
    for (int64_t o = 0; o < on; ++o) {
      double s = l.has_bias ? l.bias.data()[static_cast<size_t>(o)] : 0.0;
      for (int64_t i = 0; i < in; ++i) s += l.weight.data()[static_cast<size_t>(o * in + i)] * x[i];
      out[static_cast<size_t>(o)] = s;
    }
  };
  auto layernorm = [&](const nn::LayerNorm<double>& l, std::vector<double>& x) {
    double mu = 0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(x.size());
    double var = 0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x.size());
    double sd = std::sqrt(var + l.eps);
    for (size_t i = 0; i < x.size(); ++i)
      x[i] = (x[i] - mu) / sd * l.gain.data()[i] + l.offset.data()[i];
  };
  auto gelu_s = [](double x) {
    double c = std::sqrt(2.0 / M_PI);
    double u = c * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
  };

  std::vector<double> out(static_cast<size_t>(B * E * D), 0.0);
  for (int64_t b = 0; b < B; ++b) {
    std::vector<std::vector<double>> kproj(static_cast<size_t>(N)), vproj(static_cast<size_t>(N));
    for (int64_t n = 0; n < N; ++n) {
      const double* x = nodes.data().data() + (b * N + n) * D;
      lin(wk, x, kproj[static_cast<size_t>(n)]);
      lin(wv, x, vproj[static_cast<size_t>(n)]);
    }
    for (int64_t e = 0; e < E; ++e) {
      const double* qrow = batched_q ? queries.data().data() + (b * E + e) * D
                                     : queries.data().data() + e * D;
      std::vector<double> qproj;
      lin(wq, qrow, qproj);
      std::vector<double> xout(static_cast<size_t>(D), 0.0);
      std::vector<int64_t> inc;
      for (int64_t n = 0; n < N; ++n)
        if (st.incidence[static_cast<size_t>((b * E + e) * N + n)]) inc.push_back(n);
      if (inc.empty()) {
        // a hyperedge no node selected: every logit carries the same alpha,
        // and softmax is shift invariant, so it attends over all nodes
        for (int64_t n = 0; n < N; ++n) inc.push_back(n);
      }
      for (int64_t h = 0; h < heads; ++h) {
        std::vector<double> logits(inc.size());
        for (size_t j = 0; j < inc.size(); ++j) {
          double s = 0;
          for (int64_t d = 0; d < dh; ++d)
            s += qproj[static_cast<size_t>(h * dh + d)] * kproj[static_cast<size_t>(inc[j])][static_cast<size_t>(h * dh + d)];
          logits[j] = s / std::sqrt(static_cast<double>(dh));
        }
        double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0;
        for (auto& l : logits) {
          l = std::exp(l - mx);
          z += l;
        }
        for (size_t j = 0; j < inc.size(); ++j)
          for (int64_t d = 0; d < dh; ++d)
            xout[static_cast<size_t>(h * dh + d)] +=
                (logits[j] / z) * vproj[static_cast<size_t>(inc[j])][static_cast<size_t>(h * dh + d)];
      }
      std::vector<double> t = xout;
      layernorm(ln1, t);
      std::vector<double> hmid, y;
      lin(ffn.fc1, t.data(), hmid);
      for (auto& v : hmid) v = gelu_s(v);
      lin(ffn.fc2, hmid.data(), y);
      layernorm(ln2, y);
      for (int64_t d = 0; d < D; ++d)
        out[static_cast<size_t>((b * E + e) * D + d)] = y[static_cast<size_t>(d)] + xout[static_cast<size_t>(d)];
    }
  }
  return out;
}

}  // namespace

TEST_CASE("edge num 7 gives k=2 per node") {
  Rng rng(1);
  hg::IntraHGA<double> blk(7, 8, 16, 2, rng);
  CHECK(blk.k_per_node() == 2);
}

TEST_CASE("edge num must be greater than 3") {
  Rng rng(1);
  CHECK_THROWS_AS(hg::IntraHGA<double>(3, 8, 16, 2, rng), ConfigError);
  CHECK_THROWS_AS(hg::IntraHGA<double>(2, 8, 16, 2, rng), ConfigError);
  hg::IntraHGA<double> ok(4, 8, 16, 2, rng);
  CHECK(ok.k_per_node() == 1);
}

TEST_CASE("orthogonal queries give 0.5 confidence and lowest-index ties") {
  auto q = Td::from({4, 2}, {1, 0, 1, 0, 1, 0, 1, 0});
  auto nodes = Td::from({1, 3, 2}, {0, 1, 0, 2, 0, 3});
  auto st = hg::build_structure(q, nodes, -100.0, 2);
  for (double c : st.confidence) CHECK(c == doctest::Approx(0.5));
  for (int64_t n = 0; n < 3; ++n) {
    CHECK(st.incidence[0 * 3 + n] == 1);
    CHECK(st.incidence[1 * 3 + n] == 1);
    CHECK(st.incidence[2 * 3 + n] == 0);
    CHECK(st.incidence[3 * 3 + n] == 0);
  }
}

TEST_CASE("structure invariants: column sums, mask values, sort oracle") {
  Rng rng(17);
  for (int iter = 0; iter < 100; ++iter) {
    int64_t E = 5, N = 6, D = 4;
    int64_t k = 1 + static_cast<int64_t>(rng.integer(5));
    auto q = randn<double>({E, D}, rng);
    auto nodes = randn<double>({2, N, D}, rng);
    double alpha = -1e4;
    auto st = hg::build_structure(q, nodes, alpha, k);
    for (int64_t b = 0; b < 2; ++b) {
      auto deg = st.column_degrees(b);
      for (int64_t n = 0; n < N; ++n) CHECK(deg[static_cast<size_t>(n)] == k);
      for (int64_t n = 0; n < N; ++n) {
        std::vector<int64_t> ord(static_cast<size_t>(E));
        std::iota(ord.begin(), ord.end(), 0);
        std::sort(ord.begin(), ord.end(), [&](int64_t i, int64_t j) {
          double ci = st.confidence[static_cast<size_t>((b * E + i) * N + n)];
          double cj = st.confidence[static_cast<size_t>((b * E + j) * N + n)];
          if (ci != cj) return ci > cj;
          return i < j;
        });
        for (int64_t j = 0; j < E; ++j) {
          bool expect = j < k;
          bool got = st.incidence[static_cast<size_t>((b * E + ord[static_cast<size_t>(j)]) * N + n)] != 0;
          CHECK(got == expect);
        }
      }
    }
    for (size_t i = 0; i < st.mask.data().size(); ++i) {
      double m = st.mask.data()[i];
      CHECK((m == 0.0 || m == alpha));
      CHECK(m == (st.incidence[i] ? 0.0 : alpha));
    }
    for (double c : st.confidence) {
      CHECK(c > 0.0);
      CHECK(c < 1.0);
    }
  }
}

TEST_CASE("build_structure k out of range") {
  Rng rng(2);
  auto q = randn<double>({4, 4}, rng);
  auto nodes = randn<double>({1, 5, 4}, rng);
  CHECK_THROWS_AS(hg::build_structure(q, nodes, -1.0, int64_t{0}), ConfigError);
  CHECK_THROWS_AS(hg::build_structure(q, nodes, -1.0, int64_t{5}), ConfigError);
}

TEST_CASE("hga_aggregate single node with zero mask") {
  Rng rng(3);
  int64_t E = 4, D = 8;
  nn::Linear<double> wq(D, D, rng), wk(D, D, rng), wv(D, D, rng);
  nn::FFN<double> ffn(D, 16, rng);
  nn::LayerNorm<double> ln1(D), ln2(D);
  auto q = randn<double>({E, D}, rng);
  auto node = randn<double>({1, 1, D}, rng);
  auto mask = Td::zeros({1, E, 1});
  auto out = hg::hga_aggregate(q, node, mask, wq, wk, wv, ffn, ln1, ln2, 2);
  CHECK(out.shape() == Shape{1, E, D});
  auto vn = wv.forward(node);
  auto tail = add(ln2.forward(ffn.forward(ln1.forward(vn))), vn);
  for (int64_t e = 0; e < E; ++e)
    for (int64_t d = 0; d < D; ++d)
      CHECK(out.data()[e * D + d] == doctest::Approx(tail.data()[d]).epsilon(1e-9));
}

TEST_CASE("hard mask equals incidence-restricted dense loop oracle") {
  Rng rng(23);
  for (int iter = 0; iter < 50; ++iter) {
    int64_t E = 4 + static_cast<int64_t>(rng.integer(2));
    int64_t N = 2 + static_cast<int64_t>(rng.integer(8));
    int64_t D = 8;
    int64_t H = (iter % 2 == 0) ? 1 : 2;
    int64_t k = 1 + static_cast<int64_t>(rng.integer(static_cast<uint64_t>(E)));
    nn::Linear<double> wq(D, D, rng), wk(D, D, rng), wv(D, D, rng);
    nn::FFN<double> ffn(D, 12, rng);
    nn::LayerNorm<double> ln1(D), ln2(D);
    auto q = randn<double>({E, D}, rng);
    auto nodes = randn<double>({2, N, D}, rng);
    auto st = hg::build_structure(q, nodes, -1e9, k);
    auto got = hg::hga_aggregate(q, nodes, st.mask, wq, wk, wv, ffn, ln1, ln2, H);
    auto want = dense_hga_oracle(q, nodes, st, H, wq, wk, wv, ffn, ln1, ln2);
    REQUIRE(got.data().size() == want.size());
    for (size_t i = 0; i < want.size(); ++i) CHECK(std::abs(got.data()[i] - want[i]) < 1e-5);
  }
}

TEST_CASE("joint permutation of nodes and mask columns leaves output unchanged") {
  Rng rng(29);
  int64_t E = 4, N = 5, D = 8;
  nn::Linear<double> wq(D, D, rng), wk(D, D, rng), wv(D, D, rng);
  nn::FFN<double> ffn(D, 12, rng);
  nn::LayerNorm<double> ln1(D), ln2(D);
  auto q = randn<double>({E, D}, rng);
  auto nodes = randn<double>({1, N, D}, rng);
  auto st = hg::build_structure(q, nodes, -1e4, 2);
  auto base = hg::hga_aggregate(q, nodes, st.mask, wq, wk, wv, ffn, ln1, ln2, 2);

  std::vector<int64_t> perm{4, 2, 0, 3, 1};
  std::vector<double> nd(static_cast<size_t>(N * D));
  std::vector<double> md(static_cast<size_t>(E * N));
  for (int64_t n = 0; n < N; ++n) {
    std::copy(nodes.data().begin() + perm[static_cast<size_t>(n)] * D,
              nodes.data().begin() + (perm[static_cast<size_t>(n)] + 1) * D, nd.begin() + n * D);
    for (int64_t e = 0; e < E; ++e)
      md[static_cast<size_t>(e * N + n)] = st.mask.data()[static_cast<size_t>(e * N + perm[static_cast<size_t>(n)])];
  }
  auto nodes_p = Td::from({1, N, D}, nd);
  auto mask_p = Td::from({1, E, N}, md);
  auto permuted = hg::hga_aggregate(q, nodes_p, mask_p, wq, wk, wv, ffn, ln1, ln2, 2);
  for (size_t i = 0; i < base.data().size(); ++i)
    CHECK(std::abs(base.data()[i] - permuted.data()[i]) < 1e-6);
}

TEST_CASE("soft-mask monotonicity: non-incident attention mass shrinks with alpha") {
  Rng rng(31);
  int64_t E = 5, N = 7, D = 8, H = 2;
  nn::Linear<double> wq(D, D, rng), wk(D, D, rng);
  auto q = randn<double>({E, D}, rng);
  auto nodes = randn<double>({1, N, D}, rng);
  auto st0 = hg::build_structure(q, nodes, 0.0, 2);

  auto offmass = [&](double alpha) {
    auto qp = wq.forward(q);
    auto kp = wk.forward(nodes);
    int64_t dh = D / H;
    double total = 0;
    for (int64_t h = 0; h < H; ++h)
      for (int64_t e = 0; e < E; ++e) {
        std::vector<double> logits(static_cast<size_t>(N));
        for (int64_t n = 0; n < N; ++n) {
          double s = 0;
          for (int64_t d = 0; d < dh; ++d)
            s += qp.data()[e * D + h * dh + d] * kp.data()[n * D + h * dh + d];
          logits[static_cast<size_t>(n)] = s / std::sqrt(static_cast<double>(dh)) +
                                           (st0.incidence[static_cast<size_t>(e * N + n)] ? 0.0 : alpha);
        }
        double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0;
        for (auto& l : logits) {
          l = std::exp(l - mx);
          z += l;
        }
        for (int64_t n = 0; n < N; ++n)
          if (!st0.incidence[static_cast<size_t>(e * N + n)]) total += logits[static_cast<size_t>(n)] / z;
      }
    return total;
  };

  double prev = offmass(0.0);
  for (double alpha : {-1.0, -10.0, -100.0, -1e4, -1e9}) {
    double cur = offmass(alpha);
    CHECK(cur <= prev + 1e-12);
    prev = cur;
  }
  // rows with no incident node keep all their mass off-edge (shift-invariant
  // softmax); every other row's off-edge mass is crushed by the hard mask
  int64_t empty_rows = 0;
  for (int64_t e = 0; e < E; ++e) {
    bool any = false;
    for (int64_t n = 0; n < N; ++n) any = any || st0.incidence[static_cast<size_t>(e * N + n)];
    if (!any) ++empty_rows;
  }
  CHECK(std::abs(prev - static_cast<double>(empty_rows * H)) < 1e-9);
}

TEST_CASE("intra_hga shapes for the 7-variable hourly config") {
  Rng rng(37);
  int64_t B = 1, C = 7, N = 14, D = 1024;
  hg::IntraHGA<float> blk(7, D, 64, 8, rng);
  auto x = randn<float>({B * C, N, D}, rng);
  auto [out, st] = blk.forward(x, -1e4f);
  CHECK(out.shape() == Shape{7, 7, 1024});
  CHECK(st.batch == 7);
  CHECK(st.rows == 7);
  CHECK(st.cols == 14);
  auto deg = st.column_degrees(0);
  for (auto d : deg) CHECK(d == 2);
}

TEST_CASE("intra_hga degenerate single token") {
  Rng rng(41);
  hg::IntraHGA<double> blk(4, 8, 12, 2, rng);
  auto x = randn<double>({1, 1, 8}, rng);
  auto [out, st] = blk.forward(x, -1e4);
  CHECK(out.shape() == Shape{1, 4, 8});
  CHECK(st.cols == 1);
  auto deg = st.column_degrees(0);
  CHECK(deg[0] == 1);
  for (double v : out.data()) CHECK(std::isfinite(v));
}

TEST_CASE("intra_hga equals direct hga_aggregate composition") {
  Rng rng(43);
  hg::IntraHGA<double> blk(5, 8, 12, 2, rng);
  auto x = randn<double>({3, 6, 8}, rng);
  auto [out, st] = blk.forward(x, -1e4);
  auto direct = hg::hga_aggregate(blk.queries, x, st.mask, blk.wq, blk.wk, blk.wv, blk.ffn, blk.ln1,
                                  blk.ln2, blk.heads);
  for (size_t i = 0; i < out.data().size(); ++i)
    CHECK(out.data()[i] == doctest::Approx(direct.data()[i]).epsilon(1e-12));
}

TEST_CASE("permuting learnable queries permutes hyperedge outputs and Adj rows") {
  Rng rng(47);
  hg::IntraHGA<double> blk(4, 8, 12, 2, rng);
  auto x = randn<double>({2, 5, 8}, rng);
  auto [out, st] = blk.forward(x, -1e4);

  std::vector<int64_t> perm{2, 0, 3, 1};
  hg::IntraHGA<double> blk_p = blk;
  std::vector<double> qd(4 * 8);
  for (int64_t e = 0; e < 4; ++e)
    std::copy(blk.queries.data().begin() + perm[static_cast<size_t>(e)] * 8,
              blk.queries.data().begin() + (perm[static_cast<size_t>(e)] + 1) * 8, qd.begin() + e * 8);
  blk_p.queries = Td::from({4, 8}, qd, true);
  auto [out_p, st_p] = blk_p.forward(x, -1e4);
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t e = 0; e < 4; ++e) {
      for (int64_t d = 0; d < 8; ++d)
        CHECK(std::abs(out_p.data()[(b * 4 + e) * 8 + d] -
                       out.data()[(b * 4 + perm[static_cast<size_t>(e)]) * 8 + d]) < 1e-6);
      for (int64_t n = 0; n < 5; ++n)
        CHECK(st_p.incidence[static_cast<size_t>((b * 4 + e) * 5 + n)] ==
              st.incidence[static_cast<size_t>((b * 4 + perm[static_cast<size_t>(e)]) * 5 + n)]);
    }
}

TEST_CASE("inter_hga k rule and degenerate single channel") {
  CHECK(hg::InterHGA<double>::k_per_node(7) == 2);
  CHECK(hg::InterHGA<double>::k_per_node(1) == 1);
  CHECK(hg::InterHGA<double>::k_per_node(2) == 1);
  CHECK(hg::InterHGA<double>::k_per_node(12) == 4);

  Rng rng(53);
  hg::InterHGA<double> blk(8, 12, 2, rng);
  int64_t E = 4;
  auto nodes = randn<double>({1, 1 * E, 8}, rng);
  auto qg = randn<double>({1, 1, 8}, rng);
  auto [out, st] = blk.forward(nodes, qg, -1e4);
  CHECK(out.shape() == Shape{1, 1, 8});
  CHECK(st.rows == 1);
  CHECK(st.cols == E);
  auto deg = st.column_degrees(0);
  for (auto d : deg) CHECK(d == 1);
}

TEST_CASE("edge_to_node single hyperedge and zeroed projection passthrough") {
  Rng rng(59);
  int64_t D = 8;
  hg::EdgeToNode<double> blk(D, 12, 2, rng);
  auto tokens = randn<double>({1, 6, D}, rng);
  auto edges = randn<double>({1, 1, D}, rng);
  auto out = blk.forward(tokens, edges);
  CHECK(out.shape() == Shape{1, 6, D});

  hg::EdgeToNode<double> z = blk;
  z.wp.weight = Td::zeros({D, D}, true);
  z.wp.bias = Td::zeros({D}, true);
  z.ffn.fc2.weight = Td::zeros({D, 12}, true);
  z.ffn.fc2.bias = Td::zeros({D}, true);
  z.ln2.offset = Td::zeros({D}, true);
  auto passthrough = z.forward(tokens, edges);
  for (size_t i = 0; i < tokens.data().size(); ++i)
    CHECK(passthrough.data()[i] == doctest::Approx(tokens.data()[i]).epsilon(1e-12));
}

TEST_CASE("edge_to_node tiny instance matches loop oracle") {
  Rng rng(61);
  int64_t D = 4, CN = 3, C = 2;
  hg::EdgeToNode<double> blk(D, 8, 1, rng);
  auto tokens = randn<double>({1, CN, D}, rng);
  auto edges = randn<double>({1, C, D}, rng);
  auto out = blk.forward(tokens, edges);

  auto lin = [&](const nn::Linear<double>& l, const double* x) {
    std::vector<double> o(static_cast<size_t>(l.weight.dim(0)), 0.0);
    for (int64_t a = 0; a < l.weight.dim(0); ++a) {
      double s = l.bias.data()[static_cast<size_t>(a)];
      for (int64_t i = 0; i < l.weight.dim(1); ++i) s += l.weight.data()[static_cast<size_t>(a * l.weight.dim(1) + i)] * x[i];
      o[static_cast<size_t>(a)] = s;
    }
    return o;
  };
  auto lnorm = [&](const nn::LayerNorm<double>& l, std::vector<double> x) {
    double mu = 0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(x.size());
    double var = 0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x.size());
    double sd = std::sqrt(var + l.eps);
    for (size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - mu) / sd * l.gain.data()[i] + l.offset.data()[i];
    return x;
  };
  auto gelu_s = [](double x) {
    double c = std::sqrt(2.0 / M_PI);
    return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
  };

  for (int64_t t = 0; t < CN; ++t) {
    auto q = lin(blk.wq, tokens.data().data() + t * D);
    std::vector<double> logits(static_cast<size_t>(C));
    std::vector<std::vector<double>> vs(static_cast<size_t>(C));
    for (int64_t c = 0; c < C; ++c) {
      auto kk = lin(blk.wk, edges.data().data() + c * D);
      vs[static_cast<size_t>(c)] = lin(blk.wv, edges.data().data() + c * D);
      double s = 0;
      for (int64_t d = 0; d < D; ++d) s += q[static_cast<size_t>(d)] * kk[static_cast<size_t>(d)];
      logits[static_cast<size_t>(c)] = s / std::sqrt(static_cast<double>(D));
    }
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (auto& l : logits) {
      l = std::exp(l - mx);
      z += l;
    }
    std::vector<double> ctx(static_cast<size_t>(D), 0.0);
    for (int64_t c = 0; c < C; ++c)
      for (int64_t d = 0; d < D; ++d) ctx[static_cast<size_t>(d)] += (logits[static_cast<size_t>(c)] / z) * vs[static_cast<size_t>(c)][static_cast<size_t>(d)];
    auto proj = lin(blk.wp, ctx.data());
    std::vector<double> xnode(static_cast<size_t>(D));
    for (int64_t d = 0; d < D; ++d) xnode[static_cast<size_t>(d)] = proj[static_cast<size_t>(d)] + tokens.data()[static_cast<size_t>(t * D + d)];
    auto mid = lnorm(blk.ln1, xnode);
    auto h1 = lin(blk.ffn.fc1, mid.data());
    for (auto& v : h1) v = gelu_s(v);
    auto h2 = lin(blk.ffn.fc2, h1.data());
    auto tail = lnorm(blk.ln2, h2);
    for (int64_t d = 0; d < D; ++d)
      CHECK(out.data()[static_cast<size_t>(t * D + d)] ==
            doctest::Approx(tail[static_cast<size_t>(d)] + xnode[static_cast<size_t>(d)]).epsilon(1e-8));
  }
}

TEST_CASE("gradients reach every block parameter") {
  Rng rng(67);
  int64_t D = 8;
  hg::IntraHGA<double> intra(4, D, 12, 2, rng);
  hg::InterHGA<double> inter(D, 12, 2, rng);
  hg::EdgeToNode<double> e2n(D, 12, 2, rng);
  int64_t B = 2, C = 2, N = 3;
  auto x = randn<double>({B * C, N, D}, rng, 1.0, true);
  auto qg = randn<double>({B, C, D}, rng, 1.0, true);

  auto [xe, st1] = intra.forward(x, -1e4);
  auto flat = reshape(xe, {B, C * 4, D});
  auto [xc, st2] = inter.forward(flat, qg, -1e4);
  auto tokens = reshape(x, {B, C * N, D});
  auto y = e2n.forward(tokens, xc);
  auto loss = mean_all(mul(y, y));
  backward(loss);

  std::vector<nn::NamedParam<double>> ps;
  intra.collect(ps, "intra");
  inter.collect(ps, "inter");
  e2n.collect(ps, "e2n");
  for (auto& p : ps) {
    REQUIRE_MESSAGE(!p.tensor.grad().empty(), p.name);
    double mx = 0;
    for (double g : p.tensor.grad()) mx = std::max(mx, std::abs(g));
    CHECK_MESSAGE(mx > 0.0, p.name);
  }
}

TEST_CASE("block pipeline gradient vs finite differences") {
  Rng rng(71);
  int64_t D = 6, B = 1, C = 2, N = 3, E = 4;
  hg::IntraHGA<double> intra(E, D, 8, 2, rng);
  auto x = randn<double>({B * C, N, D}, rng, 1.0, true);
  auto rep = hgts_test::fd_check(
      {x, intra.queries, intra.wq.weight, intra.wk.weight, intra.wv.weight, intra.ffn.fc1.weight,
       intra.ffn.fc2.weight, intra.ln1.gain, intra.ln2.offset},
      [&] {
        auto [out, st] = intra.forward(x, -1e4);
        return sum_all(mul(out, out));
      });
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("structure csv dumps") {
  Rng rng(73);
  auto q = randn<double>({4, 4}, rng);
  auto nodes = randn<double>({2, 5, 4}, rng);
  auto st = hg::build_structure(q, nodes, -1e4, 1);
  std::string prefix = "/tmp/hgts_test_dump";
  hg::dump_structure_csv(st, prefix);
  std::ifstream f(prefix + "_adj_b1.csv");
  REQUIRE(f.good());
  std::string header;
  std::getline(f, header);
  CHECK(header == "edge,n0,n1,n2,n3,n4");
  int rows = 0;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 4);
}
