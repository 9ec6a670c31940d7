#pragma once

// Alternate training loop.
//
//   iter = 0, epoch = 0
//   while iter < max_iter:
//     if iter % epoch_iter == 0: refresh pseudo labels; epoch += 1
//     alpha = learned if epoch % d_alter != 0 else one-hot
//     forward, loss, backward, SGD step at the cosine-decayed rate
//     iter += 1
//
// One-hot epochs still evaluate the learned-alpha branch so that the intra
// loss keeps training W_O and W_F; only the one-hot branch reaches the
// inter-domain level there.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "biaten/autograd.hpp"
#include "biaten/bi_aten.hpp"
#include "biaten/databank.hpp"
#include "biaten/objectives.hpp"
#include "biaten/pseudo_labeler.hpp"
#include "biaten/rng.hpp"

namespace biaten {

struct TrainConfig {
  double lambda = 1.0;
  double gamma = 0.1;
  double lr0 = 0.02;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::size_t d_alter = 2;
  double smoothing = kDefaultLabelSmoothing;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  EnsembleMode mode = EnsembleMode::kBiAten;
  std::size_t eval_every = 1;  // full-target evaluation every k epochs (0: final only)
};

inline void validate_config(const TrainConfig& c) {
  detail::require(c.lambda >= 0.0 && c.gamma >= 0.0, "config: lambda and gamma must be >= 0");
  detail::require(c.batch_size >= 2, "config: batch size must be at least 2");
  detail::require(c.d_alter >= 1, "config: d_alter must be at least 1");
  detail::require(c.smoothing >= 0.0 && c.smoothing < 1.0, "config: smoothing must lie in [0, 1)");
  detail::require(c.epochs >= 1, "config: at least one epoch is required");
  detail::require(c.lr0 >= 0.0 && c.momentum >= 0.0, "config: lr and momentum must be >= 0");
}

inline double cosine_lr(double lr0, std::size_t iter, std::size_t max_iter) {
  detail::require(max_iter > 0, "cosine_lr: max_iter must be positive");
  detail::require(iter <= max_iter, "cosine_lr: iter beyond max_iter");
  const double progress = static_cast<double>(iter) / static_cast<double>(max_iter);
  return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * progress));
}

// v <- momentum * v + g; theta <- theta - lr * v. Classifiers are not part
// of the trainable set, so they are never touched.
inline void sgd_step(std::vector<SourceHead>& heads, BiAtenParams& params, Gradients& grads,
                     double lr, double momentum, Gradients& velocity) {
  auto theta = trainable_tensors(heads, params);
  auto g = gradient_tensors(grads);
  auto v = gradient_tensors(velocity);
  detail::require(theta.size() == g.size() && theta.size() == v.size(),
                  "sgd_step: gradient tensor count mismatch");
  for (std::size_t t = 0; t < theta.size(); ++t) {
    detail::require(theta[t].values.size() == g[t].values.size() &&
                        theta[t].values.size() == v[t].values.size(),
                    "sgd_step: shape mismatch for " + theta[t].name);
    for (std::size_t k = 0; k < theta[t].values.size(); ++k) {
      v[t].values[k] = momentum * v[t].values[k] + g[t].values[k];
      theta[t].values[k] -= lr * v[t].values[k];
    }
  }
}

// Iterations per epoch: full batches plus a trailing partial batch when it
// holds at least two samples (batch norm needs two).
inline std::size_t iterations_per_epoch(std::size_t samples, std::size_t batch_size) {
  const std::size_t full = samples / batch_size;
  return full + (samples % batch_size >= 2 ? 1 : 0);
}

inline std::vector<Matrix> gather_rows(const FeatureBank& bank, std::span<const std::size_t> rows) {
  std::vector<Matrix> out;
  for (const auto& d : bank.domains) {
    Matrix m(rows.size(), d.features.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      auto src = d.features.row(rows[r]);
      std::copy(src.begin(), src.end(), m.row(r).begin());
    }
    out.push_back(std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full passes over the target set (running batch-norm statistics).

struct TargetPass {
  std::vector<Matrix> features;  // [domain] N x d_k
  Matrix y_final;                // N x C
  Matrix beta;                   // N x n
  std::vector<Matrix> alpha;     // [domain] N x n, alpha feeding the inter level
};

inline constexpr std::size_t kPassChunk = 256;

inline TargetPass target_pass(const FeatureBank& bank, const std::vector<SourceHead>& heads,
                              const BiAtenParams& params, AlphaMode alpha_mode) {
  const std::size_t total = bank.num_samples();
  const std::size_t n = heads.size();
  TargetPass pass;
  pass.features.assign(n, Matrix(total, heads.front().d_k()));
  pass.y_final = Matrix(total, heads.front().num_classes());
  pass.beta = Matrix(total, n);
  pass.alpha.assign(n, Matrix(total, n));
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < total; start += kPassChunk) {
    const std::size_t stop = std::min(total, start + kPassChunk);
    rows.clear();
    for (std::size_t r = start; r < stop; ++r) rows.push_back(r);
    const ForwardTrace t =
        full_forward(gather_rows(bank, rows), heads, params, {alpha_mode, BnMode::kEval, false});
    auto put = [&](Matrix& dst, const Matrix& src) {
      for (std::size_t r = 0; r < src.rows(); ++r)
        std::copy(src.row(r).begin(), src.row(r).end(), dst.row(start + r).begin());
    };
    put(pass.y_final, t.y_final);
    put(pass.beta, t.inter.beta);
    for (std::size_t i = 0; i < n; ++i) {
      put(pass.features[i], t.features[i]);
      put(pass.alpha[i], t.alpha_used[i]);
    }
  }
  return pass;
}

inline std::uint32_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < row.size(); ++c)
    if (row[c] > row[best]) best = c;
  return static_cast<std::uint32_t>(best);
}

inline Labels predictions(const Matrix& logits) {
  Labels out(logits.rows());
  for (std::size_t m = 0; m < logits.rows(); ++m) out[m] = argmax(logits.row(m));
  return out;
}

inline double accuracy(const Labels& predicted, const Labels& truth) {
  detail::require(predicted.size() == truth.size() && !truth.empty(), "accuracy: size mismatch");
  std::size_t hits = 0;
  for (std::size_t m = 0; m < truth.size(); ++m) hits += predicted[m] == truth[m];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

inline Vector column_means(const Matrix& m) {
  Vector v = column_sums(m);
  for (double& x : v) x /= static_cast<double>(m.rows());
  return v;
}

// ---------------------------------------------------------------------------
// Evaluation and weight analysis

struct EvalReport {
  std::optional<double> accuracy;
  Labels predicted;
  Labels groups;               // ground truth when present, else predictions
  Matrix beta;                 // N x n per-sample inter-domain weights
  std::vector<Matrix> alpha;   // [domain] N x n per-sample intra-domain weights
  Vector mean_beta;            // n
  Matrix class_mean_beta;      // C x n
  Matrix class_beta_deviation; // C x n, class mean minus domain mean
  std::vector<std::size_t> class_counts;
  Matrix mean_alpha;           // n x n, row i = mean alpha^i
};

// Group-by tables computed from per-sample weights.
inline void summarize_weights(EvalReport& r, std::size_t classes) {
  const std::size_t n = r.beta.cols();
  r.mean_beta = column_means(r.beta);
  r.class_counts.assign(classes, 0);
  r.class_mean_beta = Matrix(classes, n);
  for (std::size_t m = 0; m < r.beta.rows(); ++m) {
    ++r.class_counts[r.groups[m]];
    axpy(1.0, r.beta.row(m), r.class_mean_beta.row(r.groups[m]));
  }
  r.class_beta_deviation = Matrix(classes, n);
  for (std::size_t c = 0; c < classes; ++c) {
    if (r.class_counts[c] == 0) continue;
    for (std::size_t i = 0; i < n; ++i) {
      r.class_mean_beta(c, i) /= static_cast<double>(r.class_counts[c]);
      r.class_beta_deviation(c, i) = r.class_mean_beta(c, i) - r.mean_beta[i];
    }
  }
  r.mean_alpha = Matrix(n, n);
  for (std::size_t i = 0; i < r.alpha.size(); ++i) {
    const Vector mean = column_means(r.alpha[i]);
    std::copy(mean.begin(), mean.end(), r.mean_alpha.row(i).begin());
  }
}

inline AlphaMode inference_alpha(const BiAtenParams& params) {
  return params.mode == EnsembleMode::kBiAten ? AlphaMode::kLearned : AlphaMode::kOneHot;
}

inline EvalReport evaluate(const FeatureBank& bank, const std::vector<SourceHead>& heads,
                           const BiAtenParams& params) {
  check_bank_heads(bank, heads);
  TargetPass pass = target_pass(bank, heads, params, inference_alpha(params));
  EvalReport r;
  r.predicted = predictions(pass.y_final);
  if (bank.labels) r.accuracy = accuracy(r.predicted, *bank.labels);
  r.groups = bank.labels ? *bank.labels : r.predicted;
  r.beta = std::move(pass.beta);
  r.alpha = std::move(pass.alpha);
  summarize_weights(r, bank.num_classes);
  return r;
}

// ---------------------------------------------------------------------------
// Training

struct MetricsRow {
  std::size_t epoch = 0;
  std::size_t iter = 0;
  AlphaMode alpha_mode = AlphaMode::kLearned;
  double lr = 0.0;
  LossReport loss;
  std::optional<double> pseudo_label_agreement;  // at the latest refresh
  std::optional<double> accuracy;                // on the batch, when labels exist
  Vector mean_beta;                              // batch mean per domain
};

struct EpochSummary {
  std::size_t epoch = 0;
  AlphaMode alpha_mode = AlphaMode::kLearned;
  std::optional<double> pseudo_label_agreement;
  std::optional<double> pseudo_label_accuracy;
  std::optional<double> accuracy;  // full target set, after the epoch
  Vector mean_beta;                // full target set, after the epoch (when evaluated)
};

struct TrainResult {
  std::vector<SourceHead> heads;
  BiAtenParams params;
  std::vector<MetricsRow> metrics;
  std::vector<EpochSummary> epochs;
  std::optional<double> initial_accuracy;  // from the first refresh pass
  std::size_t refreshes = 0;
  std::size_t max_iter = 0;
  std::size_t epoch_iter = 0;
  Labels pseudo_labels;
};

struct PseudoLabelRefresh {
  Labels labels;
  std::optional<double> agreement;
  std::optional<double> accuracy_of_labels;
  std::optional<double> ensemble_accuracy;
};

inline PseudoLabelRefresh refresh_pseudo_labels(const FeatureBank& bank,
                                                const std::vector<SourceHead>& heads,
                                                const BiAtenParams& params, AlphaMode alpha_mode,
                                                const Labels& previous) {
  const TargetPass pass = target_pass(bank, heads, params, alpha_mode);
  const CentroidState state = compute_centroids(pass.features, stable_softmax_rows(pass.y_final));
  PseudoLabelRefresh out;
  out.labels = assign_labels(state, pass.features, pass.beta, previous);
  if (!previous.empty()) out.agreement = label_agreement(previous, out.labels);
  if (bank.labels) {
    out.accuracy_of_labels = accuracy(out.labels, *bank.labels);
    out.ensemble_accuracy = accuracy(predictions(pass.y_final), *bank.labels);
  }
  return out;
}

inline AlphaMode epoch_alpha_mode(std::size_t epoch, std::size_t d_alter, EnsembleMode mode) {
  if (mode == EnsembleMode::kAten) return AlphaMode::kOneHot;
  return epoch % d_alter != 0 ? AlphaMode::kLearned : AlphaMode::kOneHot;
}

inline TrainResult train(const FeatureBank& bank, std::vector<SourceHead> heads, BiAtenParams params,
                         const TrainConfig& config) {
  validate_config(config);
  validate_bank(bank);
  check_bank_heads(bank, heads);
  detail::require(params.mode == config.mode, "train: parameter mode differs from config mode");
  detail::require(bank.num_samples() >= 2, "train: need at least two target samples");
  const std::size_t n = heads.size();
  const std::size_t samples = bank.num_samples();
  const std::size_t batch_size = std::min(config.batch_size, samples);

  TrainResult result;
  result.epoch_iter = iterations_per_epoch(samples, batch_size);
  result.max_iter = config.epochs * result.epoch_iter;
  const LossWeights weights{config.lambda, config.gamma, config.smoothing};

  Rng shuffle_rng(config.seed ^ 0x5DEECE66DULL);
  std::vector<std::size_t> order(samples);
  Gradients velocity = zero_gradients(heads, params);
  Labels pseudo;
  std::optional<double> agreement;
  std::size_t epoch = 0;

  auto close_epoch = [&](bool final_epoch) {
    if (epoch == 0) return;
    EpochSummary& s = result.epochs.back();
    const bool due = config.eval_every > 0 && epoch % config.eval_every == 0;
    if (!(due || final_epoch)) return;
    const TargetPass pass = target_pass(bank, heads, params, inference_alpha(params));
    if (bank.labels) s.accuracy = accuracy(predictions(pass.y_final), *bank.labels);
    s.mean_beta = column_means(pass.beta);
  };

  for (std::size_t iter = 0; iter < result.max_iter; ++iter) {
    try {
      if (iter % result.epoch_iter == 0) {
        close_epoch(false);
        const AlphaMode next_mode = epoch_alpha_mode(epoch + 1, config.d_alter, config.mode);
        PseudoLabelRefresh refresh = refresh_pseudo_labels(bank, heads, params, next_mode, pseudo);
        if (result.refreshes == 0) result.initial_accuracy = refresh.ensemble_accuracy;
        ++result.refreshes;
        pseudo = std::move(refresh.labels);
        agreement = refresh.agreement;
        ++epoch;
        result.epochs.push_back(
            {epoch, next_mode, refresh.agreement, refresh.accuracy_of_labels, std::nullopt, {}});
        for (std::size_t k = 0; k < samples; ++k) order[k] = k;
        shuffle_rng.shuffle(order);
      }
      const AlphaMode alpha_mode = epoch_alpha_mode(epoch, config.d_alter, config.mode);
      const std::size_t start = (iter % result.epoch_iter) * batch_size;
      const std::size_t stop = std::min(samples, start + batch_size);
      const std::span<const std::size_t> rows(order.data() + start, stop - start);

      const std::vector<Matrix> batch = gather_rows(bank, rows);
      Labels batch_labels;
      for (auto r : rows) batch_labels.push_back(pseudo[r]);
      const ForwardOptions options{alpha_mode, BnMode::kTrain, config.mode == EnsembleMode::kBiAten};
      const ForwardTrace trace = full_forward(batch, heads, params, options);
      const LossReport loss = compute_losses(trace, batch_labels, weights);
      Gradients grads = backward(trace, batch, heads, params, batch_labels, weights);
      const double lr = cosine_lr(config.lr0, iter, result.max_iter);
      sgd_step(heads, params, grads, lr, config.momentum, velocity);
      for (std::size_t i = 0; i < n; ++i) heads[i].bn = trace.bn_states[i];

      MetricsRow row{epoch, iter, alpha_mode, lr, loss, agreement, std::nullopt,
                     column_means(trace.inter.beta)};
      if (bank.labels) {
        Labels truth;
        for (auto r : rows) truth.push_back((*bank.labels)[r]);
        row.accuracy = accuracy(predictions(trace.y_final), truth);
      }
      result.metrics.push_back(std::move(row));
    } catch (const ContractError& e) {
      throw ContractError("iteration " + std::to_string(iter) + ": " + e.what());
    } catch (const NumericalError& e) {
      throw NumericalError("iteration " + std::to_string(iter) + ": " + e.what());
    }
  }
  close_epoch(true);
  result.pseudo_labels = std::move(pseudo);
  result.heads = std::move(heads);
  result.params = std::move(params);
  return result;
}

}  // namespace biaten
