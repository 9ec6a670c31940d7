#pragma once

// Bi-level attention ensemble.
//
// For a target sample with bottleneck features phi^1..phi^n (one per source
// model) the ensemble computes
//
//   O^i        cross-domain outputs: every classifier applied to phi^i (n x C)
//   alpha^i    intra-domain weights  softmax_j cos(phi^i W_F, O^i_j W_O)
//   ytilde^i   sum_j alpha^i_j O^i_j
//   beta       inter-domain weights  softmax_i cos([phi^1..phi^n] W_QF, phi^i W_F)
//   yfinal     sum_i beta_i ytilde^i
//
// With several heads each head owns its own W_O, W_F and W_QF and the cosine
// scores are averaged over heads before the softmax. Fixing alpha^i to the
// i-th unit vector gives the single-level ensemble (only beta is learned).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "biaten/numerics.hpp"
#include "biaten/rng.hpp"
#include "biaten/source_heads.hpp"

namespace biaten {

enum class EnsembleMode { kBiAten, kAten };
enum class AlphaMode { kLearned, kOneHot };

inline constexpr std::size_t kDefaultHeads = 4;
inline constexpr std::size_t kDefaultEmbedBiAten = 512;
inline constexpr std::size_t kDefaultEmbedAten = 2048;
inline constexpr std::size_t kDefaultBottleneckWidth = 256;

inline std::size_t default_embed_dim(EnsembleMode mode) {
  return mode == EnsembleMode::kBiAten ? kDefaultEmbedBiAten : kDefaultEmbedAten;
}

inline const char* to_string(EnsembleMode mode) {
  return mode == EnsembleMode::kBiAten ? "bi-aten" : "aten";
}

inline const char* to_string(AlphaMode mode) {
  return mode == AlphaMode::kLearned ? "learned" : "one-hot";
}

struct EnsembleDims {
  std::size_t domains = 0;
  std::size_t d_k = 0;
  std::size_t classes = 0;
  std::size_t d_emb = 0;
  std::size_t heads = 1;
};

struct BiAtenParams {
  EnsembleMode mode = EnsembleMode::kBiAten;
  std::vector<Matrix> w_o;   // per head, C x d_emb (empty in single-level mode)
  std::vector<Matrix> w_f;   // per head, d_k x d_emb
  std::vector<Matrix> w_qf;  // per head, n*d_k x d_emb

  std::size_t heads() const { return w_f.size(); }
  std::size_t d_k() const { return w_f.front().rows(); }
  std::size_t d_emb() const { return w_f.front().cols(); }
  std::size_t domains() const { return w_qf.front().rows() / d_k(); }
  std::size_t classes() const { return w_o.empty() ? 0 : w_o.front().rows(); }

  bool operator==(const BiAtenParams&) const = default;
};

inline void validate_params(const BiAtenParams& p) {
  detail::require(!p.w_f.empty(), "BiAtenParams: at least one head is required");
  detail::require(p.w_qf.size() == p.heads(), "BiAtenParams: W_QF head count mismatch");
  if (p.mode == EnsembleMode::kBiAten)
    detail::require(p.w_o.size() == p.heads(), "BiAtenParams: W_O head count mismatch");
  else
    detail::require(p.w_o.empty(), "BiAtenParams: single-level mode carries no W_O");
  for (std::size_t h = 0; h < p.heads(); ++h) {
    detail::require(p.w_f[h].rows() == p.d_k() && p.w_f[h].cols() == p.d_emb(),
                    "BiAtenParams: W_F shape differs across heads");
    detail::require(p.w_qf[h].cols() == p.d_emb() && p.w_qf[h].rows() % p.d_k() == 0 &&
                        p.w_qf[h].rows() == p.w_qf.front().rows(),
                    "BiAtenParams: W_QF shape " + p.w_qf[h].shape() + " inconsistent");
    if (p.mode == EnsembleMode::kBiAten)
      detail::require(p.w_o[h].cols() == p.d_emb() && p.w_o[h].rows() == p.w_o.front().rows(),
                      "BiAtenParams: W_O shape differs across heads");
  }
}

// Entries uniform in [-a, a] with a = 1/sqrt(fan_in).
inline Matrix init_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Matrix m(fan_in, fan_out);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : m.flat()) v = rng.uniform(-bound, bound);
  return m;
}

inline BiAtenParams init_params(const EnsembleDims& dims, EnsembleMode mode, std::uint64_t seed) {
  detail::require(dims.domains >= 1 && dims.d_k >= 1 && dims.classes >= 1 && dims.d_emb >= 1 &&
                      dims.heads >= 1,
                  "init_params: every dimension must be at least 1");
  Rng rng(seed);
  BiAtenParams p;
  p.mode = mode;
  for (std::size_t h = 0; h < dims.heads; ++h) {
    if (mode == EnsembleMode::kBiAten) p.w_o.push_back(init_uniform(dims.classes, dims.d_emb, rng));
    p.w_f.push_back(init_uniform(dims.d_k, dims.d_emb, rng));
    p.w_qf.push_back(init_uniform(dims.domains * dims.d_k, dims.d_emb, rng));
  }
  return p;
}

namespace detail {

// Pairwise mean over heads: identical scores average back to themselves
// exactly when the head count is a power of two.
inline double head_mean(std::span<const double> scores) {
  auto pairwise = [](auto&& self, std::span<const double> s) -> double {
    if (s.size() == 1) return s[0];
    const std::size_t half = s.size() / 2;
    return self(self, s.first(half)) + self(self, s.subspan(half));
  };
  return pairwise(pairwise, scores) / static_cast<double>(scores.size());
}

inline void require_simplex(std::span<const double> w, double tol, const std::string& what) {
  double total = 0.0;
  for (double v : w) {
    if (!(v >= -tol)) throw ContractError(what + ": negative weight");
    total += v;
  }
  if (std::abs(total - 1.0) > tol) throw ContractError(what + ": weights do not sum to 1");
}

inline Matrix concat_features(const std::vector<Matrix>& features) {
  const std::size_t batch = features.front().rows();
  const std::size_t dk = features.front().cols();
  Matrix out(batch, dk * features.size());
  for (std::size_t i = 0; i < features.size(); ++i)
    for (std::size_t m = 0; m < batch; ++m)
      for (std::size_t c = 0; c < dk; ++c) out(m, i * dk + c) = features[i](m, c);
  return out;
}

inline void check_feature_shapes(const std::vector<Matrix>& features, std::size_t d_k) {
  require(!features.empty(), "no bottleneck features");
  for (const auto& f : features)
    require(f.rows() == features.front().rows() && f.cols() == d_k,
            "bottleneck features must share batch size and have width d_k=" +
                std::to_string(d_k) + ", got " + f.shape());
}

}  // namespace detail

struct IntraLevel {
  std::vector<std::vector<Matrix>> out_embed;  // [head][domain], B*n x d_emb
  std::vector<Matrix> alpha;                   // [domain], B x n
};

struct InterLevel {
  Matrix concat;                            // B x n*d_k
  std::vector<std::vector<Matrix>> keys;    // [head][domain], B x d_emb
  std::vector<Matrix> queries;              // [head], B x d_emb
  Matrix beta;                              // B x n
};

inline std::vector<std::vector<Matrix>> feature_keys(const std::vector<Matrix>& features,
                                                     const BiAtenParams& params) {
  std::vector<std::vector<Matrix>> keys(params.heads());
  for (std::size_t h = 0; h < params.heads(); ++h)
    for (const auto& f : features) keys[h].push_back(matmul(f, params.w_f[h]));
  return keys;
}

// alpha^i for every domain i given precomputed keys phi^i W_F.
inline IntraLevel intra_level(const std::vector<std::vector<Matrix>>& keys,
                              const std::vector<Matrix>& outputs, const BiAtenParams& params) {
  detail::require(params.mode == EnsembleMode::kBiAten,
                  "intra_weights: single-level parameters carry no W_O; use one_hot_alpha");
  const std::size_t n = outputs.size();
  const std::size_t heads = params.heads();
  const std::size_t batch = keys.front().front().rows();
  IntraLevel level;
  level.out_embed.resize(heads);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      detail::require(outputs[i].cols() == params.w_o[h].rows(),
                      "intra_weights: output width != W_O rows");
      level.out_embed[h].push_back(matmul(outputs[i], params.w_o[h]));
    }
  std::vector<double> per_head(heads);
  Vector sims(n);
  for (std::size_t i = 0; i < n; ++i) {
    Matrix alpha(batch, n);
    for (std::size_t m = 0; m < batch; ++m) {
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t h = 0; h < heads; ++h)
          per_head[h] = cosine(keys[h][i].row(m), level.out_embed[h][i].row(m * n + j));
        sims[j] = detail::head_mean(per_head);
      }
      softmax_into(sims, alpha.row(m));
    }
    level.alpha.push_back(std::move(alpha));
  }
  return level;
}

// Intra-domain weights: element i is B x n, row m = alpha^i of sample m.
inline std::vector<Matrix> intra_weights(const std::vector<Matrix>& features,
                                         const std::vector<Matrix>& outputs,
                                         const BiAtenParams& params) {
  validate_params(params);
  detail::check_feature_shapes(features, params.d_k());
  detail::require(outputs.size() == features.size(), "intra_weights: domain count mismatch");
  return intra_level(feature_keys(features, params), outputs, params).alpha;
}

inline Matrix one_hot_alpha(std::size_t n) {
  detail::require(n >= 1, "one_hot_alpha: n must be at least 1");
  return Matrix::identity(n);
}

// Batched one-hot weights in the layout intra_weights returns.
inline std::vector<Matrix> one_hot_alpha(std::size_t n, std::size_t batch) {
  std::vector<Matrix> alpha;
  for (std::size_t i = 0; i < n; ++i) {
    Matrix a(batch, n);
    for (std::size_t m = 0; m < batch; ++m) a(m, i) = 1.0;
    alpha.push_back(std::move(a));
  }
  return alpha;
}

// ytilde^i = sum_j alpha^i_j O^i_j.
inline std::vector<Matrix> intra_ensemble(const std::vector<Matrix>& alpha,
                                          const std::vector<Matrix>& outputs) {
  const std::size_t n = outputs.size();
  detail::require(alpha.size() == n, "intra_ensemble: domain count mismatch");
  std::vector<Matrix> y;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t batch = alpha[i].rows();
    detail::require(alpha[i].cols() == n && outputs[i].rows() == batch * n,
                    "intra_ensemble: alpha " + alpha[i].shape() + " vs outputs " +
                        outputs[i].shape());
    Matrix yi(batch, outputs[i].cols());
    for (std::size_t m = 0; m < batch; ++m) {
      detail::require_simplex(alpha[i].row(m), 1e-6, "intra_ensemble");
      for (std::size_t j = 0; j < n; ++j) axpy(alpha[i](m, j), outputs[i].row(m * n + j), yi.row(m));
    }
    y.push_back(std::move(yi));
  }
  return y;
}

inline InterLevel inter_level(const std::vector<Matrix>& features,
                              std::vector<std::vector<Matrix>> keys, const BiAtenParams& params) {
  const std::size_t n = features.size();
  const std::size_t heads = params.heads();
  InterLevel level;
  level.concat = detail::concat_features(features);
  detail::require(level.concat.cols() == params.w_qf.front().rows(),
                  "inter_weights: concatenated width " + std::to_string(level.concat.cols()) +
                      " != W_QF input dimension " + std::to_string(params.w_qf.front().rows()));
  level.keys = std::move(keys);
  for (std::size_t h = 0; h < heads; ++h) level.queries.push_back(matmul(level.concat, params.w_qf[h]));
  const std::size_t batch = level.concat.rows();
  level.beta = Matrix(batch, n);
  std::vector<double> per_head(heads);
  Vector sims(n);
  for (std::size_t m = 0; m < batch; ++m) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t h = 0; h < heads; ++h)
        per_head[h] = cosine(level.queries[h].row(m), level.keys[h][i].row(m));
      sims[i] = detail::head_mean(per_head);
    }
    softmax_into(sims, level.beta.row(m));
  }
  return level;
}

// Inter-domain weights, B x n.
inline Matrix inter_weights(const std::vector<Matrix>& features, const BiAtenParams& params) {
  validate_params(params);
  detail::check_feature_shapes(features, params.d_k());
  return inter_level(features, feature_keys(features, params), params).beta;
}

// yfinal = sum_i beta_i ytilde^i.
inline Matrix inter_ensemble(const Matrix& beta, const std::vector<Matrix>& y_intra) {
  const std::size_t n = y_intra.size();
  detail::require(beta.cols() == n, "inter_ensemble: beta width != domain count");
  Matrix out(beta.rows(), y_intra.front().cols());
  for (std::size_t m = 0; m < beta.rows(); ++m) {
    detail::require_simplex(beta.row(m), 1e-6, "inter_ensemble");
    for (std::size_t i = 0; i < n; ++i) axpy(beta(m, i), y_intra[i].row(m), out.row(m));
  }
  return out;
}

struct ForwardOptions {
  AlphaMode alpha_mode = AlphaMode::kLearned;
  BnMode bn_mode = BnMode::kTrain;
  // In one-hot epochs, also evaluate the learned-alpha branch so the
  // intra-domain loss can still train W_O and W_F.
  bool keep_learned_branch = false;
};

struct ForwardTrace {
  std::size_t batch = 0;
  AlphaMode alpha_mode = AlphaMode::kLearned;
  bool has_learned_branch = false;

  std::vector<BnCache> bn_caches;   // [domain]
  std::vector<BnState> bn_states;   // running statistics after this pass
  std::vector<Matrix> features;     // [domain] phi, B x d_k
  std::vector<Matrix> outputs;      // [domain] O, B*n x C (row m*n + j)
  IntraLevel intra;                 // learned branch, when present
  std::vector<Matrix> y_intra;      // [domain] learned-branch ytilde, B x C
  std::vector<Matrix> alpha_used;   // [domain] alpha feeding the inter level
  std::vector<Matrix> y_used;       // [domain] ytilde feeding the inter level
  InterLevel inter;
  Matrix y_final;                   // B x C
};

inline void check_experiment(const std::vector<Matrix>& backbone_batch,
                             const std::vector<SourceHead>& heads, const BiAtenParams& params) {
  validate_heads(heads);
  validate_params(params);
  const std::size_t n = heads.size();
  detail::require(backbone_batch.size() == n,
                  "forward: " + std::to_string(backbone_batch.size()) + " feature blocks for " +
                      std::to_string(n) + " heads");
  detail::require(params.d_k() == heads.front().d_k(), "forward: ensemble d_k != head d_k");
  detail::require(params.domains() == n, "forward: W_QF sized for " +
                                             std::to_string(params.domains()) + " domains, have " +
                                             std::to_string(n));
  if (params.mode == EnsembleMode::kBiAten)
    detail::require(params.classes() == heads.front().num_classes(),
                    "forward: W_O rows != class count");
  for (std::size_t i = 0; i < n; ++i)
    detail::require(backbone_batch[i].rows() == backbone_batch.front().rows(),
                    "forward: feature blocks disagree on batch size");
}

inline ForwardTrace full_forward(const std::vector<Matrix>& backbone_batch,
                                 const std::vector<SourceHead>& heads, const BiAtenParams& params,
                                 const ForwardOptions& options) {
  check_experiment(backbone_batch, heads, params);
  const bool learned = options.alpha_mode == AlphaMode::kLearned;
  if (learned)
    detail::require(params.mode == EnsembleMode::kBiAten,
                    "full_forward: learned alpha requires bi-level parameters");
  const std::size_t n = heads.size();

  ForwardTrace t;
  t.batch = backbone_batch.front().rows();
  t.alpha_mode = options.alpha_mode;
  t.has_learned_branch =
      learned || (options.keep_learned_branch && params.mode == EnsembleMode::kBiAten);
  t.bn_caches.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    t.bn_states.push_back(heads[i].bn);
    t.features.push_back(
        bottleneck_forward(heads[i], backbone_batch[i], options.bn_mode, t.bn_states[i], &t.bn_caches[i]));
    require_finite(t.features.back().flat(), "bottleneck features of '" + heads[i].domain_name + "'");
  }
  for (std::size_t i = 0; i < n; ++i) t.outputs.push_back(cross_domain_outputs(t.features, heads, i));

  auto keys = feature_keys(t.features, params);
  if (t.has_learned_branch) {
    t.intra = intra_level(keys, t.outputs, params);
    t.y_intra = intra_ensemble(t.intra.alpha, t.outputs);
  }
  if (learned) {
    t.alpha_used = t.intra.alpha;
    t.y_used = t.y_intra;
  } else {
    t.alpha_used = one_hot_alpha(n, t.batch);
    t.y_used = intra_ensemble(t.alpha_used, t.outputs);
  }
  t.inter = inter_level(t.features, std::move(keys), params);
  t.y_final = inter_ensemble(t.inter.beta, t.y_used);
  require_finite(t.y_final.flat(), "ensemble output");
  return t;
}

}  // namespace biaten
