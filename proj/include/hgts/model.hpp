#pragma once

// HGTS-Former assembly: patch tokenizer, stacked
// MHSA -> Intra-HGA -> Inter-HGA -> EdgeToNode blocks, task heads,
// loss, autoregressive rollout and masked imputation.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hgts/errors.hpp"
#include "hgts/hypergraph.hpp"
#include "hgts/nn.hpp"
#include "hgts/tensor.hpp"

namespace hgts::model {

enum class Task { forecast, impute };
enum class Ablation { none, no_mhsa_rope, no_intra, no_inter };

inline std::string task_name(Task t) { return t == Task::forecast ? "forecast" : "impute"; }
inline std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::none: return "none";
    case Ablation::no_mhsa_rope: return "no_mhsa_rope";
    case Ablation::no_intra: return "no_intra";
    case Ablation::no_inter: return "no_inter";
  }
  return "none";
}

inline Ablation parse_ablation(const std::string& s) {
  if (s == "none" || s.empty()) return Ablation::none;
  if (s == "no_mhsa_rope") return Ablation::no_mhsa_rope;
  if (s == "no_intra") return Ablation::no_intra;
  if (s == "no_inter") return Ablation::no_inter;
  throw ArgumentError("unknown ablation variant: " + s);
}

struct ModelConfig {
  int64_t layers = 1;
  int64_t d_model = 256;
  int64_t d_ff = 512;
  int64_t heads = 8;
  int64_t patch_len = 48;
  int64_t lookback = 672;
  int64_t edge_num = 7;
  double alpha = -1e4;
  bool causal = true;
  Task task = Task::forecast;
  Ablation ablation = Ablation::none;
  bool loss_last_token_only = false;

  double lr = 1e-4;
  std::string lr_schedule = "cosine";
  int64_t batch_size = 32;
  int64_t epochs = 10;
  uint64_t seed = 1;

  int64_t tokens() const { return lookback / patch_len; }

  void validate() const {
    if (layers < 0) throw ConfigError("layers must be >= 0");
    if (d_model <= 0 || d_ff <= 0 || heads <= 0 || patch_len <= 0 || lookback <= 0)
      throw ConfigError("model extents must be positive");
    if (edge_num <= 3) throw ConfigError("edge num must be greater than 3, got " + std::to_string(edge_num));
    if (d_model % heads != 0)
      throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by heads " + std::to_string(heads));
    if (lookback % patch_len != 0)
      throw ConfigError("lookback " + std::to_string(lookback) + " not divisible by patch length " +
                        std::to_string(patch_len));
    if (!(lr > 0)) throw ConfigError("learning rate must be positive");
    if (batch_size <= 0 || epochs <= 0) throw ConfigError("batch size and epochs must be positive");
    if (ablation != Ablation::no_mhsa_rope && (d_model / heads) % 2 != 0)
      throw ConfigError("head dim must be even for rotary embedding");
  }
};

// Closed-form parameter count; must equal the runtime enumeration exactly.
inline int64_t count_parameters(const ModelConfig& cfg) {
  int64_t D = cfg.d_model, dff = cfg.d_ff, P = cfg.patch_len, L = cfg.lookback, E = cfg.edge_num;
  auto linear = [](int64_t in, int64_t out) { return in * out + out; };
  int64_t ffn = linear(D, dff) + linear(dff, D);
  int64_t ln = 2 * D;
  int64_t total = linear(P, D) + linear(D, P);  // embed + head
  if (cfg.ablation != Ablation::no_inter) total += linear(L, D);  // shared Q_G projection
  int64_t per_block = 0;
  if (cfg.ablation != Ablation::no_mhsa_rope) per_block += 4 * linear(D, D);
  if (cfg.ablation != Ablation::no_intra) per_block += E * D + 3 * linear(D, D) + ffn + 2 * ln;
  if (cfg.ablation != Ablation::no_inter) per_block += 3 * linear(D, D) + ffn + 2 * ln;
  per_block += 4 * linear(D, D) + ffn + 2 * ln;  // EdgeToNode
  return total + cfg.layers * per_block;
}

template <typename T>
struct Block {
  nn::MHSA<T> mhsa;
  hg::IntraHGA<T> intra;
  hg::InterHGA<T> inter;
  hg::EdgeToNode<T> e2n;
  bool has_mhsa = true, has_intra = true, has_inter = true;
};

template <typename T>
struct ForwardResult {
  Tensor<T> tokens;       // B x (C*N) x D, final token features
  Tensor<T> head_norm;    // B x C x L, normalized-domain head output
  Tensor<T> head_denorm;  // B x C x L, original scale (no graph history)
  nn::NormStats<T> stats;
  std::vector<hg::HyperGraphStructure<T>> intra_structures;  // per block when requested
  std::vector<hg::HyperGraphStructure<T>> inter_structures;
};

template <typename T>
struct ForecastOutput {
  Tensor<T> predictions;                   // B x C x T, original scale
  std::vector<Tensor<T>> step_normalized;  // per generation step, B x C x P
  std::vector<hg::HyperGraphStructure<T>> structures;  // optional inspection dumps
};

template <typename T>
class HGTSFormer {
 public:
  explicit HGTSFormer(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    int64_t D = cfg_.d_model;
    embed_ = nn::Linear<T>(cfg_.patch_len, D, rng);
    head_ = nn::Linear<T>(D, cfg_.patch_len, rng);
    if (cfg_.ablation != Ablation::no_inter) qg_proj_ = nn::Linear<T>(cfg_.lookback, D, rng);
    if (cfg_.ablation != Ablation::no_mhsa_rope)
      rope_ = nn::RoPECache<T>(cfg_.tokens(), D / cfg_.heads);
    blocks_.resize(static_cast<size_t>(cfg_.layers));
    for (auto& b : blocks_) {
      b.has_mhsa = cfg_.ablation != Ablation::no_mhsa_rope;
      b.has_intra = cfg_.ablation != Ablation::no_intra;
      b.has_inter = cfg_.ablation != Ablation::no_inter;
      if (b.has_mhsa) b.mhsa = nn::MHSA<T>(D, cfg_.heads, cfg_.causal, rng);
      if (b.has_intra) b.intra = hg::IntraHGA<T>(cfg_.edge_num, D, cfg_.d_ff, cfg_.heads, rng);
      if (b.has_inter) b.inter = hg::InterHGA<T>(D, cfg_.d_ff, cfg_.heads, rng);
      b.e2n = hg::EdgeToNode<T>(D, cfg_.d_ff, cfg_.heads, rng);
    }
  }

  const ModelConfig& config() const { return cfg_; }

  // window: B x C x lookback. `observed` (optional, same extent, nonzero =
  // observed) drives masked imputation; masked inputs are zero after
  // normalization and statistics use observed points only.
  ForwardResult<T> forward(const Tensor<T>& window, const std::vector<uint8_t>* observed = nullptr,
                           bool keep_structures = false) const {
    if (window.rank() != 3 || window.dim(2) != cfg_.lookback)
      throw ShapeError("forward expects B x C x " + std::to_string(cfg_.lookback) + ", got " +
                       shape_str(window.shape()));
    int64_t B = window.dim(0), C = window.dim(1);
    int64_t N = cfg_.tokens(), D = cfg_.d_model, P = cfg_.patch_len;

    ForwardResult<T> res;
    auto [xn, stats] = nn::instance_norm(window, observed);
    res.stats = stats;

    auto tok = nn::patch_embed(xn, P, embed_);        // B x C x N x D
    auto x = reshape(tok, {B * C, N, D});             // (B*C) x N x D

    Tensor<T> q_g;
    if (cfg_.ablation != Ablation::no_inter) q_g = qg_proj_.forward(xn);  // B x C x D

    T alpha = static_cast<T>(cfg_.alpha);
    for (const auto& blk : blocks_) {
      auto xp = blk.has_mhsa ? blk.mhsa.forward(x, &rope_) : x;

      Tensor<T> channel_edges;  // B x C x D fed to EdgeToNode
      Tensor<T> intra_edges;    // (B*C) x E x D when the intra stage runs
      if (blk.has_intra) {
        auto [xe, st] = blk.intra.forward(xp, alpha);
        intra_edges = xe;
        if (keep_structures) res.intra_structures.push_back(std::move(st));
      }
      if (blk.has_inter) {
        Tensor<T> nodes;
        if (blk.has_intra) {
          nodes = reshape(intra_edges, {B, C * cfg_.edge_num, D});  // channel-major: index c*E+e
        } else {
          nodes = reshape(mean_axis(xp, 1, false), {B, C, D});  // tokens pooled per channel
        }
        auto [xc, st] = blk.inter.forward(nodes, q_g, alpha);
        channel_edges = xc;
        if (keep_structures) res.inter_structures.push_back(std::move(st));
      } else {
        channel_edges = reshape(mean_axis(intra_edges, 1, false), {B, C, D});  // pooled intra edges
      }

      auto tokens_flat = reshape(xp, {B, C * N, D});
      auto y = blk.e2n.forward(tokens_flat, channel_edges);
      x = reshape(y, {B * C, N, D});
    }

    res.tokens = reshape(x, {B, C * N, D});
    auto per_patch = head_.forward(x);                       // (B*C) x N x P
    res.head_norm = reshape(per_patch, {B, C, N * P});       // B x C x L
    res.head_denorm = nn::denormalize(res.head_norm.detach(), res.stats);
    return res;
  }

  std::vector<nn::NamedParam<T>> named_params() const {
    std::vector<nn::NamedParam<T>> out;
    embed_.collect(out, "embed");
    head_.collect(out, "head");
    if (cfg_.ablation != Ablation::no_inter) qg_proj_.collect(out, "qg");
    for (size_t i = 0; i < blocks_.size(); ++i) {
      std::string p = "blocks." + std::to_string(i);
      const auto& b = blocks_[i];
      if (b.has_mhsa) b.mhsa.collect(out, p + ".mhsa");
      if (b.has_intra) b.intra.collect(out, p + ".intra");
      if (b.has_inter) b.inter.collect(out, p + ".inter");
      b.e2n.collect(out, p + ".e2n");
    }
    return out;
  }

  std::vector<Tensor<T>> params() const {
    std::vector<Tensor<T>> out;
    for (auto& np : named_params()) out.push_back(np.tensor);
    return out;
  }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (auto& np : named_params()) n += np.tensor.size();
    return n;
  }

  // Replace parameter values in place by name. Missing or mismatched
  // entries raise IntegrityError.
  void load_named(const std::vector<std::pair<std::string, std::vector<T>>>& values) {
    auto nps = named_params();
    for (auto& np : nps) {
      const std::vector<T>* found = nullptr;
      for (auto& [name, data] : values)
        if (name == np.name) {
          found = &data;
          break;
        }
      if (!found) throw IntegrityError("checkpoint is missing parameter " + np.name);
      if (found->size() != np.tensor.data().size())
        throw IntegrityError("checkpoint parameter " + np.name + " has " + std::to_string(found->size()) +
                             " values, model expects " + std::to_string(np.tensor.data().size()));
      np.tensor.mutable_data() = *found;  // handles share storage with the model
    }
    if (values.size() != nps.size())
      throw IntegrityError("checkpoint holds " + std::to_string(values.size()) + " tensors, model expects " +
                           std::to_string(nps.size()));
  }

 private:
  ModelConfig cfg_;
  nn::Linear<T> embed_;
  nn::Linear<T> head_;
  nn::Linear<T> qg_proj_;
  nn::RoPECache<T> rope_;
  std::vector<Block<T>> blocks_;
};

// The named variant with one stage removed; identity/pooling passthroughs
// keep shapes intact (see forward()).
template <typename T>
HGTSFormer<T> ablation_variant(const ModelConfig& cfg, Ablation which) {
  if (which == Ablation::none) throw ArgumentError("ablation_variant needs a component to remove");
  ModelConfig mod = cfg;
  mod.ablation = which;
  return HGTSFormer<T>(mod);
}

// ---------------------------------------------------------------------------
// Targets and loss

// window: B x C x (L+P) -> (input = first L points, target = shifted by P)
// so token i's prediction aligns with patch i+1.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> training_targets(const Tensor<T>& window, int64_t lookback, int64_t patch_len) {
  if (window.rank() != 3 || window.dim(2) < lookback + patch_len)
    throw DataError("training window needs length >= " + std::to_string(lookback + patch_len) + ", got " +
                    shape_str(window.shape()));
  auto input = slice(window, 2, 0, lookback).detach();
  auto target = slice(window, 2, patch_len, lookback).detach();
  return {input, target};
}

// Mean squared error over all (or mask-selected) elements.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target, const Tensor<T>* loss_mask = nullptr) {
  if (pred.shape() != target.shape())
    throw ShapeError("mse_loss shape mismatch: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  auto d = sub(pred, target);
  auto sq = mul(d, d);
  if (!loss_mask) return mean_all(sq);
  if (loss_mask->shape() != pred.shape())
    throw ShapeError("loss mask shape " + shape_str(loss_mask->shape()) + " does not match " + shape_str(pred.shape()));
  T selected = T(0);
  for (T v : loss_mask->data()) selected += v;
  if (!(selected > T(0))) throw ArgumentError("loss mask selects zero elements");
  return mul_scalar(sum_all(mul(sq, *loss_mask)), T(1) / selected);
}

// ---------------------------------------------------------------------------
// Autoregressive rollout: predict the next patch, slide the context,
// re-normalize each step, stop once the horizon is covered.

template <typename T>
ForecastOutput<T> rolling_forecast(const HGTSFormer<T>& model, const Tensor<T>& context, int64_t horizon,
                                   bool keep_structures = false) {
  const auto& cfg = model.config();
  if (!cfg.causal) throw ConfigError("rolling forecast requires a causal model");
  if (horizon < 1) throw ArgumentError("horizon must be >= 1");
  if (context.rank() != 3 || context.dim(2) != cfg.lookback)
    throw ShapeError("context must be B x C x " + std::to_string(cfg.lookback) + ", got " +
                     shape_str(context.shape()));
  int64_t B = context.dim(0), C = context.dim(1), L = cfg.lookback, P = cfg.patch_len;
  int64_t steps = (horizon + P - 1) / P;

  ForecastOutput<T> out;
  std::vector<T> ctx = context.data();
  std::vector<T> preds(static_cast<size_t>(B * C * steps * P));
  for (int64_t s = 0; s < steps; ++s) {
    auto f = model.forward(Tensor<T>::from({B, C, L}, ctx), nullptr, keep_structures);
    if (keep_structures)
      for (auto& st : f.intra_structures) out.structures.push_back(std::move(st));
    // last token's patch, both scales
    std::vector<T> step_norm(static_cast<size_t>(B * C * P));
    for (int64_t r = 0; r < B * C; ++r) {
      const T* den = f.head_denorm.data().data() + r * L + (L - P);
      const T* nor = f.head_norm.data().data() + r * L + (L - P);
      std::copy(den, den + P, preds.begin() + r * steps * P + s * P);
      std::copy(nor, nor + P, step_norm.begin() + r * P);
      // slide this row's context window
      T* row = ctx.data() + r * L;
      std::copy(row + P, row + L, row);
      std::copy(den, den + P, row + L - P);
    }
    out.step_normalized.push_back(Tensor<T>::from({B, C, P}, std::move(step_norm)));
  }
  // truncate to the requested horizon
  std::vector<T> trunc(static_cast<size_t>(B * C * horizon));
  for (int64_t r = 0; r < B * C; ++r)
    std::copy(preds.begin() + r * steps * P, preds.begin() + r * steps * P + horizon,
              trunc.begin() + r * horizon);
  out.predictions = Tensor<T>::from({B, C, horizon}, std::move(trunc));
  return out;
}

// Reconstruct masked points; observed values pass through verbatim.
template <typename T>
Tensor<T> impute(const HGTSFormer<T>& model, const Tensor<T>& series, const std::vector<uint8_t>& observed) {
  const auto& cfg = model.config();
  if (cfg.causal) throw ConfigError("imputation requires a non-causal model");
  if (static_cast<int64_t>(observed.size()) != series.size())
    throw ShapeError("observed mask size does not match series");
  auto f = model.forward(series, &observed);
  std::vector<T> out(series.data().size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = observed[i] ? series.data()[i] : f.head_denorm.data()[i];
  return Tensor<T>::from(series.shape(), std::move(out));
}

}  // namespace hgts::model
