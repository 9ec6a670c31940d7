#pragma once

// Training objectives. All losses are batch means so that lambda and gamma
// do not depend on the batch size.
//
//   L_IM(p)    = L_ent - L_div
//   L_ent      = mean_m  -sum_c p_mc log p_mc
//   L_div      = -sum_c pbar_c log pbar_c,  pbar = mean_m p_m
//   L_intra    = sum_i L_IM(softmax(ytilde^i))
//   L_inter    = gamma * CE_smooth(yfinal, pseudo) + L_IM(softmax(yfinal))
//   L          = L_inter + lambda * L_intra

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "biaten/bi_aten.hpp"
#include "biaten/numerics.hpp"

namespace biaten {

inline constexpr double kLogEps = 1e-12;
inline constexpr double kDefaultLabelSmoothing = 0.1;

using Labels = std::vector<std::uint32_t>;

struct ImLoss {
  double l_im = 0.0;
  double l_ent = 0.0;
  double l_div = 0.0;
};

struct LossWeights {
  double lambda = 1.0;
  double gamma = 0.1;
  double smoothing = kDefaultLabelSmoothing;
};

struct LossReport {
  double l_total = 0.0;
  double l_inter = 0.0;
  double l_intra = 0.0;
  double l_ce = 0.0;
  double l_ent = 0.0;  // of the final ensemble
  double l_div = 0.0;  // of the final ensemble
  std::size_t batch_size = 0;
};

namespace detail {

inline double safe_log(double p) { return std::log(std::max(p, kLogEps)); }

// d/dp [p log max(p, eps)]
inline double plogp_derivative(double p) { return safe_log(p) + (p > kLogEps ? 1.0 : 0.0); }

inline Vector batch_mean_rows(const Matrix& probs) {
  Vector mean = column_sums(probs);
  for (double& v : mean) v /= static_cast<double>(probs.rows());
  return mean;
}

}  // namespace detail

inline ImLoss im_loss(const Matrix& probs) {
  detail::require(probs.rows() > 0 && probs.cols() > 0, "im_loss: empty batch");
  for (std::size_t m = 0; m < probs.rows(); ++m) detail::require_simplex(probs.row(m), 1e-6, "im_loss");
  const double batch = static_cast<double>(probs.rows());
  ImLoss out;
  for (std::size_t m = 0; m < probs.rows(); ++m)
    for (double p : probs.row(m)) out.l_ent -= p * detail::safe_log(p);
  out.l_ent /= batch;
  for (double p : detail::batch_mean_rows(probs)) out.l_div -= p * detail::safe_log(p);
  out.l_im = out.l_ent - out.l_div;
  return out;
}

// dL_IM/dlogits for logits whose row-softmax is `probs`.
inline Matrix im_loss_logit_grad(const Matrix& probs) {
  const std::size_t batch = probs.rows();
  const std::size_t classes = probs.cols();
  const double inv_b = 1.0 / static_cast<double>(batch);
  const Vector mean = detail::batch_mean_rows(probs);
  Vector ddiv(classes);
  for (std::size_t c = 0; c < classes; ++c) ddiv[c] = detail::plogp_derivative(mean[c]);
  Matrix dlogits(batch, classes);
  Vector dprobs(classes);
  for (std::size_t m = 0; m < batch; ++m) {
    for (std::size_t c = 0; c < classes; ++c)
      dprobs[c] = -inv_b * detail::plogp_derivative(probs(m, c)) + inv_b * ddiv[c];
    softmax_backward(probs.row(m), dprobs, dlogits.row(m));
  }
  return dlogits;
}

inline void check_labels(const Labels& labels, std::size_t batch, std::size_t classes) {
  detail::require(labels.size() == batch, "labels: expected " + std::to_string(batch) +
                                              " labels, got " + std::to_string(labels.size()));
  for (auto y : labels)
    detail::require(y < classes, "labels: label " + std::to_string(y) + " outside [0, " +
                                     std::to_string(classes) + ")");
}

inline double ce_label_smoothing(const Matrix& logits, const Labels& labels, double smoothing) {
  detail::require(smoothing >= 0.0 && smoothing < 1.0, "ce_label_smoothing: epsilon must lie in [0, 1)");
  check_labels(labels, logits.rows(), logits.cols());
  const double classes = static_cast<double>(logits.cols());
  double total = 0.0;
  for (std::size_t m = 0; m < logits.rows(); ++m) {
    const Vector logp = log_softmax(logits.row(m));
    double row = 0.0;
    for (std::size_t c = 0; c < logits.cols(); ++c) {
      const double target = (c == labels[m] ? 1.0 - smoothing : 0.0) + smoothing / classes;
      row -= target * logp[c];
    }
    total += row;
  }
  return total / static_cast<double>(logits.rows());
}

inline Matrix ce_label_smoothing_grad(const Matrix& logits, const Labels& labels, double smoothing) {
  const double classes = static_cast<double>(logits.cols());
  const double inv_b = 1.0 / static_cast<double>(logits.rows());
  Matrix grad = stable_softmax_rows(logits);
  for (std::size_t m = 0; m < logits.rows(); ++m)
    for (std::size_t c = 0; c < logits.cols(); ++c) {
      const double target = (c == labels[m] ? 1.0 - smoothing : 0.0) + smoothing / classes;
      grad(m, c) = (grad(m, c) - target) * inv_b;
    }
  return grad;
}

inline double intra_objective(const ForwardTrace& trace) {
  detail::require(trace.has_learned_branch,
                  "intra_objective: trace has no learned-alpha branch");
  double total = 0.0;
  for (const auto& y : trace.y_intra) total += im_loss(stable_softmax_rows(y)).l_im;
  return total;
}

struct InterLoss {
  double l_inter = 0.0;
  double l_ce = 0.0;
  ImLoss im;
};

inline InterLoss inter_objective(const Matrix& y_final, const Labels& pseudo_labels, double gamma,
                                 double smoothing) {
  detail::require(!pseudo_labels.empty(), "inter_objective: pseudo labels are missing");
  InterLoss out;
  out.l_ce = ce_label_smoothing(y_final, pseudo_labels, smoothing);
  out.im = im_loss(stable_softmax_rows(y_final));
  out.l_inter = gamma * out.l_ce + out.im.l_im;
  return out;
}

inline double total_objective(double l_inter, double l_intra, double lambda) {
  return l_inter + lambda * l_intra;
}

// Full loss for one forward pass. Without a learned branch (single-level
// ensemble) the intra term is absent.
inline LossReport compute_losses(const ForwardTrace& trace, const Labels& pseudo_labels,
                                 const LossWeights& weights) {
  LossReport r;
  r.batch_size = trace.batch;
  const InterLoss inter =
      inter_objective(trace.y_final, pseudo_labels, weights.gamma, weights.smoothing);
  r.l_inter = inter.l_inter;
  r.l_ce = inter.l_ce;
  r.l_ent = inter.im.l_ent;
  r.l_div = inter.im.l_div;
  r.l_intra = trace.has_learned_branch ? intra_objective(trace) : 0.0;
  r.l_total = total_objective(r.l_inter, r.l_intra, weights.lambda);
  if (!std::isfinite(r.l_total)) throw NumericalError("loss is not finite");
  return r;
}

}  // namespace biaten
