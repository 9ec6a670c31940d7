#pragma once

// Reverse-mode gradients of the total objective, derived by hand per
// operation, and a central-difference checker that validates them.
//
// Trainable: per source head the bottleneck weight/bias and the batch-norm
// scale/shift; per attention head W_O, W_F and W_QF. Classifiers are frozen
// and never receive a gradient. Pseudo labels are constants.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "biaten/bi_aten.hpp"
#include "biaten/numerics.hpp"
#include "biaten/objectives.hpp"
#include "biaten/source_heads.hpp"

namespace biaten {

struct HeadGradients {
  Matrix bottleneck_weight;
  Vector bottleneck_bias;
  Vector bn_scale;
  Vector bn_shift;
};

struct Gradients {
  std::vector<HeadGradients> heads;
  std::vector<Matrix> w_o;
  std::vector<Matrix> w_f;
  std::vector<Matrix> w_qf;

  bool operator==(const Gradients& o) const {
    if (heads.size() != o.heads.size()) return false;
    for (std::size_t i = 0; i < heads.size(); ++i) {
      const auto& a = heads[i];
      const auto& b = o.heads[i];
      if (!(a.bottleneck_weight == b.bottleneck_weight && a.bottleneck_bias == b.bottleneck_bias &&
            a.bn_scale == b.bn_scale && a.bn_shift == b.bn_shift))
        return false;
    }
    return w_o == o.w_o && w_f == o.w_f && w_qf == o.w_qf;
  }
};

template <typename V>
struct NamedTensor {
  std::string name;
  std::span<V> values;
};

namespace detail {

template <typename HeadT, typename ParamsT, typename Fn>
void visit_named(HeadT& heads_bottleneck, ParamsT& attn, Fn&& fn) {
  for (std::size_t i = 0; i < heads_bottleneck.size(); ++i) {
    auto& h = heads_bottleneck[i];
    const std::string p = "head[" + std::to_string(i) + "].";
    fn(p + "bottleneck_weight", h.bottleneck_weight.flat());
    fn(p + "bottleneck_bias", std::span(h.bottleneck_bias));
    fn(p + "bn_scale", std::span(h.bn_scale));
    fn(p + "bn_shift", std::span(h.bn_shift));
  }
  for (std::size_t k = 0; k < attn.w_o.size(); ++k) fn("w_o[" + std::to_string(k) + "]", attn.w_o[k].flat());
  for (std::size_t k = 0; k < attn.w_f.size(); ++k) fn("w_f[" + std::to_string(k) + "]", attn.w_f[k].flat());
  for (std::size_t k = 0; k < attn.w_qf.size(); ++k) fn("w_qf[" + std::to_string(k) + "]", attn.w_qf[k].flat());
}

}  // namespace detail

// Trainable parameters in a fixed order; gradient_tensors() lists the
// matching gradient tensors in the same order.
inline std::vector<NamedTensor<double>> trainable_tensors(std::vector<SourceHead>& heads,
                                                          BiAtenParams& params) {
  std::vector<NamedTensor<double>> out;
  detail::visit_named(heads, params, [&](std::string name, std::span<double> v) {
    out.push_back({std::move(name), v});
  });
  return out;
}

inline std::vector<NamedTensor<double>> gradient_tensors(Gradients& g) {
  std::vector<NamedTensor<double>> out;
  detail::visit_named(g.heads, g, [&](std::string name, std::span<double> v) {
    out.push_back({std::move(name), v});
  });
  return out;
}

inline Gradients zero_gradients(const std::vector<SourceHead>& heads, const BiAtenParams& params) {
  Gradients g;
  for (const auto& h : heads)
    g.heads.push_back({Matrix(h.d_backbone(), h.d_k()), Vector(h.d_k(), 0.0),
                       Vector(h.d_k(), 0.0), Vector(h.d_k(), 0.0)});
  for (const auto& w : params.w_o) g.w_o.emplace_back(w.rows(), w.cols());
  for (const auto& w : params.w_f) g.w_f.emplace_back(w.rows(), w.cols());
  for (const auto& w : params.w_qf) g.w_qf.emplace_back(w.rows(), w.cols());
  return g;
}

namespace detail {

inline void check_node(const Matrix& m, const char* node) {
  if (!all_finite(m.flat())) throw NumericalError(std::string("backward: non-finite gradient at ") + node);
}

}  // namespace detail

inline Gradients backward(const ForwardTrace& trace, const std::vector<Matrix>& backbone_batch,
                          const std::vector<SourceHead>& heads, const BiAtenParams& params,
                          const Labels& pseudo_labels, const LossWeights& weights) {
  detail::require(trace.bn_caches.size() == heads.size() && !trace.features.empty(),
                  "backward: trace was produced without caches");
  check_labels(pseudo_labels, trace.batch, trace.y_final.cols());
  const std::size_t n = heads.size();
  const std::size_t batch = trace.batch;
  const std::size_t classes = trace.y_final.cols();
  const std::size_t dk = heads.front().d_k();
  const std::size_t num_heads = params.heads();
  const double inv_heads = 1.0 / static_cast<double>(num_heads);
  const bool learned = trace.alpha_mode == AlphaMode::kLearned;

  Gradients g = zero_gradients(heads, params);

  // Loss -> final ensemble logits.
  Matrix d_final = ce_label_smoothing_grad(trace.y_final, pseudo_labels, weights.smoothing);
  for (double& v : d_final.flat()) v *= weights.gamma;
  {
    const Matrix d_im = im_loss_logit_grad(stable_softmax_rows(trace.y_final));
    for (std::size_t k = 0; k < d_final.size(); ++k) d_final.flat()[k] += d_im.flat()[k];
  }
  detail::check_node(d_final, "final ensemble");

  std::vector<Matrix> d_phi(n, Matrix(batch, dk));
  std::vector<Matrix> d_out;
  for (std::size_t i = 0; i < n; ++i) d_out.emplace_back(batch * n, classes);
  std::vector<std::vector<Matrix>> d_keys(num_heads);
  for (auto& per_head : d_keys)
    for (std::size_t i = 0; i < n; ++i) per_head.emplace_back(batch, params.d_emb());

  // Inter-domain ensemble and weights.
  std::vector<Matrix> d_used(n, Matrix(batch, classes));
  std::vector<Matrix> d_queries(num_heads, Matrix(batch, params.d_emb()));
  Vector d_beta(n);
  Vector d_sims(n);
  for (std::size_t m = 0; m < batch; ++m) {
    for (std::size_t i = 0; i < n; ++i) {
      axpy(trace.inter.beta(m, i), d_final.row(m), d_used[i].row(m));
      d_beta[i] = dot(d_final.row(m), trace.y_used[i].row(m));
    }
    std::fill(d_sims.begin(), d_sims.end(), 0.0);
    softmax_backward(trace.inter.beta.row(m), d_beta, d_sims);
    for (std::size_t h = 0; h < num_heads; ++h)
      for (std::size_t i = 0; i < n; ++i)
        cosine_backward(trace.inter.queries[h].row(m), trace.inter.keys[h][i].row(m),
                        d_sims[i] * inv_heads, d_queries[h].row(m), d_keys[h][i].row(m));
  }
  Matrix d_concat(batch, n * dk);
  for (std::size_t h = 0; h < num_heads; ++h) {
    g.w_qf[h] = matmul_tn(trace.inter.concat, d_queries[h]);
    const Matrix back = matmul_nt(d_queries[h], params.w_qf[h]);
    for (std::size_t k = 0; k < back.size(); ++k) d_concat.flat()[k] += back.flat()[k];
  }
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t m = 0; m < batch; ++m)
      for (std::size_t c = 0; c < dk; ++c) d_phi[i](m, c) += d_concat(m, i * dk + c);

  // Intra-domain level. The learned branch receives the intra loss, and the
  // inter-level gradient too when it is the branch feeding the ensemble.
  if (!learned) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t m = 0; m < batch; ++m) axpy(1.0, d_used[i].row(m), d_out[i].row(m * n + i));
  }
  if (trace.has_learned_branch) {
    std::vector<std::vector<Matrix>> d_oemb(num_heads);
    for (std::size_t h = 0; h < num_heads; ++h)
      for (std::size_t i = 0; i < n; ++i) d_oemb[h].emplace_back(batch * n, params.d_emb());
    Vector d_alpha(n);
    for (std::size_t i = 0; i < n; ++i) {
      Matrix d_yi = im_loss_logit_grad(stable_softmax_rows(trace.y_intra[i]));
      for (double& v : d_yi.flat()) v *= weights.lambda;
      if (learned)
        for (std::size_t k = 0; k < d_yi.size(); ++k) d_yi.flat()[k] += d_used[i].flat()[k];
      const Matrix& alpha = trace.intra.alpha[i];
      for (std::size_t m = 0; m < batch; ++m) {
        for (std::size_t j = 0; j < n; ++j) {
          d_alpha[j] = dot(d_yi.row(m), trace.outputs[i].row(m * n + j));
          axpy(alpha(m, j), d_yi.row(m), d_out[i].row(m * n + j));
        }
        std::fill(d_sims.begin(), d_sims.end(), 0.0);
        softmax_backward(alpha.row(m), d_alpha, d_sims);
        for (std::size_t h = 0; h < num_heads; ++h)
          for (std::size_t j = 0; j < n; ++j)
            cosine_backward(trace.inter.keys[h][i].row(m), trace.intra.out_embed[h][i].row(m * n + j),
                            d_sims[j] * inv_heads, d_keys[h][i].row(m),
                            d_oemb[h][i].row(m * n + j));
      }
    }
    for (std::size_t h = 0; h < num_heads; ++h)
      for (std::size_t i = 0; i < n; ++i) {
        const Matrix gw = matmul_tn(trace.outputs[i], d_oemb[h][i]);
        for (std::size_t k = 0; k < gw.size(); ++k) g.w_o[h].flat()[k] += gw.flat()[k];
        const Matrix back = matmul_nt(d_oemb[h][i], params.w_o[h]);
        for (std::size_t k = 0; k < back.size(); ++k) d_out[i].flat()[k] += back.flat()[k];
      }
  }

  // Keys phi^i W_F are shared by both levels.
  for (std::size_t h = 0; h < num_heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      const Matrix gw = matmul_tn(trace.features[i], d_keys[h][i]);
      for (std::size_t k = 0; k < gw.size(); ++k) g.w_f[h].flat()[k] += gw.flat()[k];
      const Matrix back = matmul_nt(d_keys[h][i], params.w_f[h]);
      for (std::size_t k = 0; k < back.size(); ++k) d_phi[i].flat()[k] += back.flat()[k];
    }

  // Cross-domain outputs: O^i_j = W_j phi^i + b_j with W_j frozen.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t m = 0; m < batch; ++m)
      for (std::size_t j = 0; j < n; ++j) {
        auto d_row = d_out[i].row(m * n + j);
        for (std::size_t c = 0; c < classes; ++c)
          axpy(d_row[c], heads[j].classifier_weight.row(c), d_phi[i].row(m));
      }

  // Bottleneck: batch norm, then the affine map.
  for (std::size_t i = 0; i < n; ++i) {
    detail::check_node(d_phi[i], "bottleneck features");
    const BnGradients bn = batchnorm_backward(trace.bn_caches[i], heads[i].bn_scale, d_phi[i]);
    auto& hg = g.heads[i];
    hg.bn_scale = bn.dscale;
    hg.bn_shift = bn.dshift;
    hg.bottleneck_weight = matmul_tn(backbone_batch[i], bn.dx);
    // Under batch statistics the bias cancels exactly; its gradient is zero.
    if (trace.bn_caches[i].mode == BnMode::kEval) hg.bottleneck_bias = column_sums(bn.dx);
    detail::check_node(hg.bottleneck_weight, "bottleneck weight");
  }
  return g;
}

// One training-mode loss evaluation, used by the finite-difference checker.
inline double evaluate_loss(const std::vector<Matrix>& backbone_batch,
                            const std::vector<SourceHead>& heads, const BiAtenParams& params,
                            const Labels& pseudo_labels, const LossWeights& weights,
                            const ForwardOptions& options) {
  const ForwardTrace t = full_forward(backbone_batch, heads, params, options);
  return compute_losses(t, pseudo_labels, weights).l_total;
}

struct TensorCheck {
  std::string name;
  std::size_t entries = 0;
  double max_rel_error = 0.0;
  double max_abs_analytic = 0.0;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

// Central differences of the total loss against the analytic gradient, one
// report per trainable tensor.
inline std::vector<TensorCheck> finite_diff_check(const std::vector<Matrix>& backbone_batch,
                                                  std::vector<SourceHead> heads,
                                                  BiAtenParams params, const Labels& pseudo_labels,
                                                  const LossWeights& weights,
                                                  const ForwardOptions& options, double step) {
  const ForwardTrace trace = full_forward(backbone_batch, heads, params, options);
  Gradients analytic = backward(trace, backbone_batch, heads, params, pseudo_labels, weights);
  auto grads = gradient_tensors(analytic);
  auto tensors = trainable_tensors(heads, params);

  std::vector<TensorCheck> report;
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    TensorCheck check{tensors[t].name, tensors[t].values.size()};
    for (std::size_t k = 0; k < tensors[t].values.size(); ++k) {
      double& slot = tensors[t].values[k];
      const double saved = slot;
      slot = saved + step;
      const double up = evaluate_loss(backbone_batch, heads, params, pseudo_labels, weights, options);
      slot = saved - step;
      const double down = evaluate_loss(backbone_batch, heads, params, pseudo_labels, weights, options);
      slot = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = grads[t].values[k];
      check.max_rel_error = std::max(check.max_rel_error, relative_error(a, numeric));
      check.max_abs_analytic = std::max(check.max_abs_analytic, std::abs(a));
    }
    report.push_back(std::move(check));
  }
  return report;
}

}  // namespace biaten
