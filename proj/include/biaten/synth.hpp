#pragma once

// Seeded synthetic multi-source benchmark and supervised source-head
// pretraining.
//
// Latents are class-conditional Gaussians shared by every domain. Domain i
// applies its own rotation and translation, both growing with the shift
// strength, and a single fixed linear "backbone" maps latents to backbone
// features. The target domain uses a random convex mix of the source shifts
// plus a private component, so no source matches it exactly.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "biaten/databank.hpp"
#include "biaten/numerics.hpp"
#include "biaten/objectives.hpp"
#include "biaten/rng.hpp"
#include "biaten/source_heads.hpp"
#include "biaten/trainer.hpp"

namespace biaten {

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t domains = 3;
  std::size_t classes = 4;
  std::size_t per_class = 100;         // source samples per class and domain
  std::size_t target_per_class = 100;  // target samples per class
  std::size_t d_latent = 8;
  std::size_t d_backbone = 32;
  double shift = 1.0;
  double class_separation = 4.0;  // distance of class means from the origin
  double noise = 1.0;             // per-coordinate latent standard deviation
  std::vector<std::size_t> shuffled_label_domains;  // sources trained on permuted labels
};

struct SynthData {
  std::vector<FeatureBank> sources;  // one labeled single-domain bank per source
  FeatureBank target;                // n identical-width domains, labeled
  Matrix class_means;                // C x d_latent
  Matrix target_latents;             // N x d_latent, before the domain transform
};

namespace detail {

inline Vector random_unit(std::size_t dim, Rng& rng) {
  Vector v(dim);
  for (double& x : v) x = rng.normal();
  const double len = norm2(v);
  for (double& x : v) x /= len;
  return v;
}

// Modified Gram-Schmidt over the columns.
inline Matrix orthonormalize(Matrix a) {
  const std::size_t dim = a.rows();
  for (std::size_t j = 0; j < a.cols(); ++j) {
    for (std::size_t p = 0; p < j; ++p) {
      double proj = 0.0;
      for (std::size_t r = 0; r < dim; ++r) proj += a(r, p) * a(r, j);
      for (std::size_t r = 0; r < dim; ++r) a(r, j) -= proj * a(r, p);
    }
    double len = 0.0;
    for (std::size_t r = 0; r < dim; ++r) len += a(r, j) * a(r, j);
    len = std::sqrt(len);
    for (std::size_t r = 0; r < dim; ++r) a(r, j) /= len;
  }
  return a;
}

struct DomainShift {
  Matrix perturbation;  // d_latent x d_latent, pre-scaling
  Vector direction;     // unit translation direction
};

inline Matrix shift_rotation(const Matrix& perturbation, double shift) {
  const std::size_t d = perturbation.rows();
  Matrix a = Matrix::identity(d);
  const double scale = shift / std::sqrt(static_cast<double>(d));
  for (std::size_t k = 0; k < a.size(); ++k) a.flat()[k] += scale * perturbation.flat()[k];
  return orthonormalize(std::move(a));
}

}  // namespace detail

inline SynthData synth_generate(const SynthConfig& cfg) {
  detail::require(cfg.domains >= 1 && cfg.classes >= 1 && cfg.per_class >= 1 &&
                      cfg.target_per_class >= 1 && cfg.d_latent >= 1 && cfg.d_backbone >= 1,
                  "synth_generate: all counts must be at least 1");
  detail::require(cfg.shift >= 0.0, "synth_generate: shift strength must be >= 0");
  for (auto d : cfg.shuffled_label_domains)
    detail::require(d < cfg.domains, "synth_generate: shuffled domain index out of range");
  Rng rng(cfg.seed);
  const std::size_t dl = cfg.d_latent;

  SynthData out;
  out.class_means = Matrix(cfg.classes, dl);
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    const Vector u = detail::random_unit(dl, rng);
    for (std::size_t k = 0; k < dl; ++k) out.class_means(c, k) = cfg.class_separation * u[k];
  }
  Matrix backbone(dl, cfg.d_backbone);
  for (double& v : backbone.flat()) v = rng.normal() / std::sqrt(static_cast<double>(dl));

  std::vector<detail::DomainShift> shifts;
  for (std::size_t i = 0; i < cfg.domains; ++i) {
    detail::DomainShift s{Matrix(dl, dl), {}};
    for (double& v : s.perturbation.flat()) v = rng.normal();
    s.direction = detail::random_unit(dl, rng);
    shifts.push_back(std::move(s));
  }
  // Target: convex mix of the source shifts plus a private component.
  Vector mix(cfg.domains);
  for (double& w : mix) w = rng.uniform(0.5, 1.5);
  const double mix_total = std::accumulate(mix.begin(), mix.end(), 0.0);
  for (double& w : mix) w /= mix_total;
  detail::DomainShift target_shift{Matrix(dl, dl), Vector(dl, 0.0)};
  {
    Matrix private_part(dl, dl);
    for (double& v : private_part.flat()) v = rng.normal();
    const Vector private_dir = detail::random_unit(dl, rng);
    for (std::size_t k = 0; k < target_shift.perturbation.size(); ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < cfg.domains; ++i) acc += mix[i] * shifts[i].perturbation.flat()[k];
      target_shift.perturbation.flat()[k] = acc + private_part.flat()[k];
    }
    for (std::size_t k = 0; k < dl; ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < cfg.domains; ++i) acc += mix[i] * shifts[i].direction[k];
      target_shift.direction[k] = acc + 0.5 * private_dir[k];
    }
  }

  auto transform = [&](const Matrix& latents, const detail::DomainShift& s) {
    Matrix rotated = matmul(latents, detail::shift_rotation(s.perturbation, cfg.shift));
    Vector offset(dl);
    for (std::size_t k = 0; k < dl; ++k) offset[k] = cfg.shift * cfg.class_separation * 0.5 * s.direction[k];
    add_row_vector(rotated, offset);
    return matmul(rotated, backbone);
  };
  auto draw = [&](std::size_t per_class, Labels& labels) {
    Matrix z(per_class * cfg.classes, dl);
    labels.clear();
    for (std::size_t c = 0; c < cfg.classes; ++c)
      for (std::size_t s = 0; s < per_class; ++s) {
        const std::size_t r = c * per_class + s;
        for (std::size_t k = 0; k < dl; ++k) z(r, k) = out.class_means(c, k) + cfg.noise * rng.normal();
        labels.push_back(static_cast<std::uint32_t>(c));
      }
    return z;
  };

  for (std::size_t i = 0; i < cfg.domains; ++i) {
    Labels labels;
    const Matrix z = draw(cfg.per_class, labels);
    if (std::find(cfg.shuffled_label_domains.begin(), cfg.shuffled_label_domains.end(), i) !=
        cfg.shuffled_label_domains.end())
      rng.shuffle(labels);
    FeatureBank bank;
    bank.num_classes = cfg.classes;
    bank.domains.push_back({"src" + std::to_string(i), transform(z, shifts[i])});
    bank.labels = std::move(labels);
    out.sources.push_back(std::move(bank));
  }

  Labels target_labels;
  Matrix z = draw(cfg.target_per_class, target_labels);
  std::vector<std::size_t> perm(z.rows());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  rng.shuffle(perm);
  out.target_latents = Matrix(z.rows(), dl);
  Labels shuffled_labels(z.rows());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    std::copy(z.row(perm[r]).begin(), z.row(perm[r]).end(), out.target_latents.row(r).begin());
    shuffled_labels[r] = target_labels[perm[r]];
  }
  const Matrix target_features = transform(out.target_latents, target_shift);
  out.target.num_classes = cfg.classes;
  for (std::size_t i = 0; i < cfg.domains; ++i)
    out.target.domains.push_back({"src" + std::to_string(i), target_features});
  out.target.labels = std::move(shuffled_labels);
  return out;
}

// ---------------------------------------------------------------------------
// Source pretraining: bottleneck + classifier under label-smoothed cross
// entropy, SGD with momentum and cosine decay.

struct PretrainConfig {
  std::size_t d_k = kDefaultBottleneckWidth;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr0 = 0.01;
  double momentum = 0.9;
  double smoothing = kDefaultLabelSmoothing;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  SourceHead head;
  double train_accuracy = 0.0;
  double final_loss = 0.0;
};

inline PretrainResult pretrain_source_head(const FeatureBank& source, const std::string& name,
                                           const PretrainConfig& cfg) {
  validate_bank(source);
  detail::require(source.num_domains() == 1 && source.labels.has_value(),
                  "pretrain_source_head: need one labeled domain");
  detail::require(cfg.batch_size >= 2 && cfg.epochs >= 1, "pretrain_source_head: bad schedule");
  const Matrix& x = source.domains.front().features;
  const Labels& y = *source.labels;
  const std::size_t samples = x.rows();
  detail::require(samples >= 2, "pretrain_source_head: need at least two samples");
  Rng rng(cfg.seed);
  PretrainResult out;
  SourceHead& h = out.head;
  h = init_head(name, x.cols(), cfg.d_k, source.num_classes, rng);

  Matrix v_w(h.bottleneck_weight.rows(), h.bottleneck_weight.cols());
  Vector v_scale(cfg.d_k, 0.0), v_shift(cfg.d_k, 0.0);
  Matrix v_cw(h.classifier_weight.rows(), h.classifier_weight.cols());
  Vector v_cb(source.num_classes, 0.0);
  auto step = [&](std::span<double> theta, std::span<double> vel, std::span<const double> g, double lr) {
    for (std::size_t k = 0; k < theta.size(); ++k) {
      vel[k] = cfg.momentum * vel[k] + g[k];
      theta[k] -= lr * vel[k];
    }
  };

  const std::size_t batch_size = std::min(cfg.batch_size, samples);
  const std::size_t epoch_iter = iterations_per_epoch(samples, batch_size);
  const std::size_t max_iter = cfg.epochs * epoch_iter;
  std::vector<std::size_t> order(samples);
  std::size_t iter = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    for (std::size_t b = 0; b < epoch_iter; ++b, ++iter) {
      const std::size_t start = b * batch_size;
      const std::size_t stop = std::min(samples, start + batch_size);
      Matrix xb(stop - start, x.cols());
      Labels yb;
      for (std::size_t r = start; r < stop; ++r) {
        std::copy(x.row(order[r]).begin(), x.row(order[r]).end(), xb.row(r - start).begin());
        yb.push_back(y[order[r]]);
      }
      BnCache cache;
      const Matrix phi = bottleneck_forward(h, xb, BnMode::kTrain, h.bn, &cache);
      const Matrix logits = classify(h, phi);
      out.final_loss = ce_label_smoothing(logits, yb, cfg.smoothing);
      if (!std::isfinite(out.final_loss))
        throw NumericalError("pretrain_source_head: non-finite loss at iteration " + std::to_string(iter));
      const Matrix d_logits = ce_label_smoothing_grad(logits, yb, cfg.smoothing);
      const Matrix g_cw = matmul_tn(d_logits, phi);
      const Vector g_cb = column_sums(d_logits);
      const Matrix d_phi = matmul(d_logits, h.classifier_weight);
      const BnGradients bn = batchnorm_backward(cache, h.bn_scale, d_phi);
      const Matrix g_w = matmul_tn(xb, bn.dx);
      const double lr = cosine_lr(cfg.lr0, iter, max_iter);
      step(h.bottleneck_weight.flat(), v_w.flat(), g_w.flat(), lr);
      step(h.bn_scale, v_scale, bn.dscale, lr);
      step(h.bn_shift, v_shift, bn.dshift, lr);
      step(h.classifier_weight.flat(), v_cw.flat(), g_cw.flat(), lr);
      step(h.classifier_bias, v_cb, g_cb, lr);
    }
  }
  const Matrix logits = classify(h, bottleneck_forward(h, x, BnMode::kEval));
  out.train_accuracy = accuracy(predictions(logits), y);
  return out;
}

}  // namespace biaten
