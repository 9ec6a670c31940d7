#pragma once

// Randomized property checks for the attention ensemble, shared by the unit
// tests (small instance counts) and the acceptance binary (1,000 instances).
// Each check returns the worst deviation it saw.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "biaten/biaten.hpp"

namespace properties {

using namespace biaten;

struct Attention {
  std::vector<Matrix> alpha;  // [domain] B x n
  Matrix beta;                // B x n
  Matrix y;                   // B x C
};

inline Attention attend(const std::vector<Matrix>& features, const std::vector<SourceHead>& heads,
                        const BiAtenParams& params, AlphaMode mode) {
  std::vector<Matrix> outputs;
  for (std::size_t i = 0; i < heads.size(); ++i) outputs.push_back(cross_domain_outputs(features, heads, i));
  Attention a;
  a.alpha = mode == AlphaMode::kLearned ? intra_weights(features, outputs, params)
                                        : one_hot_alpha(heads.size(), features.front().rows());
  a.beta = inter_weights(features, params);
  a.y = inter_ensemble(a.beta, intra_ensemble(a.alpha, outputs));
  return a;
}

struct Instance {
  std::vector<Matrix> backbone;
  std::vector<Matrix> features;
  std::vector<SourceHead> heads;
  BiAtenParams params;
};

// Random sizes in small ranges; classifier biases are zero when requested.
inline Instance random_instance(Rng& rng, bool zero_classifier_bias = false) {
  const std::size_t n = 1 + rng.index(4);
  const std::size_t classes = 2 + rng.index(4);
  const std::size_t d_k = 4 + rng.index(5);
  const std::size_t d_emb = 4 + rng.index(6);
  const std::size_t num_heads = 1 + rng.index(3);
  const std::size_t batch = 2 + rng.index(3);
  Instance inst;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t d_bb = 2 + rng.index(4);
    SourceHead h = init_head("d" + std::to_string(i), d_bb, d_k, classes, rng);
    for (double& v : h.classifier_weight.flat()) v *= 3.0;
    for (double& v : h.bottleneck_bias) v = rng.uniform(-0.5, 0.5);
    for (double& v : h.bn_scale) v = rng.uniform(0.5, 1.5);
    for (double& v : h.bn.running_var) v = rng.uniform(0.5, 1.5);
    if (!zero_classifier_bias)
      for (double& v : h.classifier_bias) v = rng.uniform(-1, 1);
    Matrix x(batch, d_bb);
    for (double& v : x.flat()) v = rng.normal() * 2.0;
    inst.features.push_back(bottleneck_forward(h, x, BnMode::kEval));
    inst.backbone.push_back(std::move(x));
    inst.heads.push_back(std::move(h));
  }
  inst.params = init_params({n, d_k, classes, d_emb, num_heads}, EnsembleMode::kBiAten, rng.next_u64());
  return inst;
}

// Distance of each row from the simplex: max of |sum - 1| and negativity.
inline double simplex_error(const Matrix& w) {
  double worst = 0.0;
  for (std::size_t r = 0; r < w.rows(); ++r) {
    double s = 0.0;
    for (double v : w.row(r)) {
      s += v;
      worst = std::max(worst, -v);
    }
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return worst;
}

inline double max_diff(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) d = std::max(d, std::abs(a[k] - b[k]));
  return d;
}

inline double check_simplex(Rng& rng) {
  Instance inst = random_instance(rng);
  const Attention a = attend(inst.features, inst.heads, inst.params, AlphaMode::kLearned);
  double worst = simplex_error(a.beta);
  for (const auto& al : a.alpha) worst = std::max(worst, simplex_error(al));
  return worst;
}

// Rescale every domain's feature of one sample by c in [e^-1, e^3]. The
// cosine epsilon perturbs each similarity by about eps / (|q| |k|), which
// grows as 1/c^2 once c shrinks towards zero.
inline double check_scale(Rng& rng) {
  Instance inst = random_instance(rng, true);
  const Attention base = attend(inst.features, inst.heads, inst.params, AlphaMode::kLearned);
  const std::size_t m = rng.index(inst.features.front().rows());
  const double c = std::exp(rng.uniform(-1, 3));
  std::vector<Matrix> scaled = inst.features;
  for (auto& f : scaled)
    for (double& v : f.row(m)) v *= c;
  const Attention s = attend(scaled, inst.heads, inst.params, AlphaMode::kLearned);
  double worst = max_diff(base.beta.row(m), s.beta.row(m));
  for (std::size_t i = 0; i < base.alpha.size(); ++i)
    worst = std::max(worst, max_diff(base.alpha[i].row(m), s.alpha[i].row(m)));
  return worst;
}

struct PermutationResult {
  double weights = 0.0;  // beta and alpha, after undoing the permutation
  double output = 0.0;   // final ensemble
};

inline PermutationResult check_permutation(Rng& rng) {
  Instance inst = random_instance(rng);
  const std::size_t n = inst.heads.size();
  const std::size_t d_k = inst.params.d_k();
  std::vector<std::size_t> pi(n);
  std::iota(pi.begin(), pi.end(), std::size_t{0});
  rng.shuffle(pi);

  std::vector<Matrix> features;
  std::vector<SourceHead> heads;
  for (std::size_t k = 0; k < n; ++k) {
    features.push_back(inst.features[pi[k]]);
    heads.push_back(inst.heads[pi[k]]);
  }
  BiAtenParams params = inst.params;
  for (std::size_t h = 0; h < params.heads(); ++h)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t r = 0; r < d_k; ++r) {
        auto src = inst.params.w_qf[h].row(pi[k] * d_k + r);
        std::copy(src.begin(), src.end(), params.w_qf[h].row(k * d_k + r).begin());
      }

  const Attention base = attend(inst.features, inst.heads, inst.params, AlphaMode::kLearned);
  const Attention perm = attend(features, heads, params, AlphaMode::kLearned);
  PermutationResult out;
  out.output = max_diff(base.y.flat(), perm.y.flat());
  for (std::size_t m = 0; m < base.beta.rows(); ++m)
    for (std::size_t k = 0; k < n; ++k) {
      out.weights = std::max(out.weights, std::abs(perm.beta(m, k) - base.beta(m, pi[k])));
      for (std::size_t l = 0; l < n; ++l)
        out.weights = std::max(out.weights, std::abs(perm.alpha[k](m, l) - base.alpha[pi[k]](m, pi[l])));
    }
  return out;
}

// Bi-level forward with one-hot alpha against the single-level forward on
// the same W_F / W_QF, through the full pipeline from backbone features.
inline double check_reduction(Rng& rng) {
  Instance inst = random_instance(rng);
  BiAtenParams aten = inst.params;
  aten.mode = EnsembleMode::kAten;
  aten.w_o.clear();
  const ForwardTrace bi =
      full_forward(inst.backbone, inst.heads, inst.params, {AlphaMode::kOneHot, BnMode::kTrain, false});
  const ForwardTrace single =
      full_forward(inst.backbone, inst.heads, aten, {AlphaMode::kOneHot, BnMode::kTrain, false});
  return std::max(max_diff(bi.y_final.flat(), single.y_final.flat()),
                  max_diff(bi.inter.beta.flat(), single.inter.beta.flat()));
}

// Literal loop over the dynamic-cluster rule: class centroids per
// domain, then per sample the beta-weighted centroid and feature, then the
// cosine argmax. Written without any library helpers.
inline Labels transcription_oracle(const std::vector<Matrix>& feats, const Matrix& probs, const Matrix& beta) {
  const std::size_t n = feats.size(), N = probs.rows(), C = probs.cols(), d = feats[0].cols();
  std::vector<std::vector<std::vector<double>>> mu(n, std::vector<std::vector<double>>(C, std::vector<double>(d)));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < C; ++c) {
      double mass = 0;
      for (std::size_t m = 0; m < N; ++m) mass += probs(m, c);
      for (std::size_t k = 0; k < d; ++k) {
        double s = 0;
        for (std::size_t m = 0; m < N; ++m) s += probs(m, c) * feats[i](m, k);
        mu[i][c][k] = s / mass;
      }
    }
  Labels out;
  for (std::size_t m = 0; m < N; ++m) {
    std::vector<double> f(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) f[k] += beta(m, i) * feats[i](m, k);
    std::uint32_t best = 0;
    double best_score = -2;
    for (std::size_t c = 0; c < C; ++c) {
      std::vector<double> cen(d, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) cen[k] += beta(m, i) * mu[i][c][k];
      double dot = 0, nf = 0, nc = 0;
      for (std::size_t k = 0; k < d; ++k) {
        dot += f[k] * cen[k];
        nf += f[k] * f[k];
        nc += cen[k] * cen[k];
      }
      const double score = dot / (std::sqrt(nf) * std::sqrt(nc));
      if (score > best_score) {
        best_score = score;
        best = static_cast<std::uint32_t>(c);
      }
    }
    out.push_back(best);
  }
  return out;
}

}  // namespace properties
