#pragma once

// Seeded tiny problem for validating the hand-written backward pass:
// 3 domains, 5 classes, d_k = 8, d_emb = 16, 2 heads, batch of 4.

#include <cstdint>
#include <string>
#include <vector>

#include "biaten/autograd.hpp"
#include "biaten/bi_aten.hpp"
#include "biaten/rng.hpp"

namespace biaten {

struct TinyProblem {
  std::vector<Matrix> backbone_batch;
  std::vector<SourceHead> heads;
  BiAtenParams params;
  Labels pseudo_labels;
  LossWeights weights;
};

struct TinyProblemShape {
  std::size_t domains = 3;
  std::size_t classes = 5;
  std::size_t d_k = 8;
  std::size_t d_emb = 16;
  std::size_t heads = 2;
  std::size_t batch = 4;
};

inline TinyProblem make_tiny_problem(std::uint64_t seed, EnsembleMode mode = EnsembleMode::kBiAten,
                                     const TinyProblemShape& shape = {}) {
  Rng rng(seed);
  TinyProblem p;
  for (std::size_t i = 0; i < shape.domains; ++i) {
    const std::size_t d_backbone = 5 + i;  // heterogeneous backbones
    Matrix x(shape.batch, d_backbone);
    for (double& v : x.flat()) v = rng.normal();
    p.backbone_batch.push_back(std::move(x));
    SourceHead h = init_head("d" + std::to_string(i), d_backbone, shape.d_k, shape.classes, rng);
    for (double& v : h.bottleneck_bias) v = rng.uniform(-0.5, 0.5);
    for (double& v : h.bn_scale) v = rng.uniform(0.5, 1.5);
    for (double& v : h.bn_shift) v = rng.uniform(-0.5, 0.5);
    for (double& v : h.bn.running_mean) v = rng.uniform(-0.2, 0.2);
    for (double& v : h.bn.running_var) v = rng.uniform(0.5, 1.5);
    for (double& v : h.classifier_weight.flat()) v *= 3.0;
    for (double& v : h.classifier_bias) v = rng.uniform(-0.5, 0.5);
    p.heads.push_back(std::move(h));
  }
  p.params = init_params({shape.domains, shape.d_k, shape.classes, shape.d_emb, shape.heads}, mode,
                         rng.next_u64());
  for (std::size_t m = 0; m < shape.batch; ++m)
    p.pseudo_labels.push_back(static_cast<std::uint32_t>(rng.index(shape.classes)));
  p.weights = LossWeights{0.7, 0.5, kDefaultLabelSmoothing};
  return p;
}

struct GradcheckRun {
  std::string label;
  std::vector<TensorCheck> tensors;

  double worst() const {
    double w = 0.0;
    for (const auto& t : tensors) w = std::max(w, t.max_rel_error);
    return w;
  }
};

inline constexpr double kGradcheckStep = 1e-5;
inline constexpr double kGradcheckTolerance = 1e-4;

// Learned-alpha and dual-branch one-hot passes on the bi-level ensemble,
// plus the single-level ensemble.
inline std::vector<GradcheckRun> run_gradcheck(std::uint64_t seed, double step = kGradcheckStep) {
  std::vector<GradcheckRun> runs;
  {
    const TinyProblem p = make_tiny_problem(seed);
    runs.push_back({"bi-aten/learned-alpha",
                    finite_diff_check(p.backbone_batch, p.heads, p.params, p.pseudo_labels, p.weights,
                                      {AlphaMode::kLearned, BnMode::kTrain, false}, step)});
    runs.push_back({"bi-aten/one-hot-alpha(dual-branch)",
                    finite_diff_check(p.backbone_batch, p.heads, p.params, p.pseudo_labels, p.weights,
                                      {AlphaMode::kOneHot, BnMode::kTrain, true}, step)});
  }
  {
    const TinyProblem p = make_tiny_problem(seed, EnsembleMode::kAten);
    runs.push_back({"aten",
                    finite_diff_check(p.backbone_batch, p.heads, p.params, p.pseudo_labels, p.weights,
                                      {AlphaMode::kOneHot, BnMode::kTrain, false}, step)});
  }
  return runs;
}

}  // namespace biaten
