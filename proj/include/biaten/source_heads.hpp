#pragma once

// A source model's adaptable head: a trainable bottleneck (affine map
// followed by batch normalization) and a frozen affine classifier.

#include <cstddef>
#include <string>
#include <vector>

#include "biaten/numerics.hpp"
#include "biaten/rng.hpp"

namespace biaten {

struct SourceHead {
  std::string domain_name;
  Matrix bottleneck_weight;  // d_backbone x d_k
  Vector bottleneck_bias;    // d_k
  Vector bn_scale;           // d_k
  Vector bn_shift;           // d_k
  BnState bn;
  Matrix classifier_weight;  // C x d_k, frozen during adaptation
  Vector classifier_bias;    // C, frozen during adaptation

  std::size_t d_backbone() const { return bottleneck_weight.rows(); }
  std::size_t d_k() const { return bottleneck_weight.cols(); }
  std::size_t num_classes() const { return classifier_weight.rows(); }

  bool operator==(const SourceHead& other) const {
    return domain_name == other.domain_name && bottleneck_weight == other.bottleneck_weight &&
           bottleneck_bias == other.bottleneck_bias && bn_scale == other.bn_scale &&
           bn_shift == other.bn_shift && bn.running_mean == other.bn.running_mean &&
           bn.running_var == other.bn.running_var && bn.eps == other.bn.eps &&
           classifier_weight == other.classifier_weight &&
           classifier_bias == other.classifier_bias;
  }
};

inline void validate_head(const SourceHead& head) {
  const std::size_t dk = head.d_k();
  const std::string who = "head '" + head.domain_name + "'";
  detail::require(dk > 0 && head.d_backbone() > 0, who + ": empty bottleneck");
  detail::require(head.bottleneck_bias.size() == dk && head.bn_scale.size() == dk &&
                      head.bn_shift.size() == dk && head.bn.running_mean.size() == dk &&
                      head.bn.running_var.size() == dk,
                  who + ": bottleneck vectors must have length d_k=" + std::to_string(dk));
  detail::require(head.classifier_weight.cols() == dk,
                  who + ": classifier width " + std::to_string(head.classifier_weight.cols()) +
                      " != d_k " + std::to_string(dk));
  detail::require(head.classifier_bias.size() == head.num_classes(),
                  who + ": classifier bias length mismatch");
  for (double v : head.bn.running_var)
    detail::require(v > 0.0, who + ": running variance must be positive");
}

// Heads of one experiment must agree on d_k and C.
inline void validate_heads(const std::vector<SourceHead>& heads) {
  detail::require(!heads.empty(), "at least one source head is required");
  for (const auto& h : heads) {
    validate_head(h);
    detail::require(h.d_k() == heads.front().d_k(),
                    "head '" + h.domain_name + "': d_k differs across domains");
    detail::require(h.num_classes() == heads.front().num_classes(),
                    "head '" + h.domain_name + "': class count differs across domains");
  }
}

// Fresh head: uniform(+-1/sqrt(fan_in)) weights, zero biases, identity
// batch norm.
inline SourceHead init_head(std::string name, std::size_t d_backbone, std::size_t d_k,
                            std::size_t classes, Rng& rng) {
  detail::require(d_backbone > 0 && d_k > 0 && classes > 0, "init_head: empty dimension");
  SourceHead h;
  h.domain_name = std::move(name);
  h.bottleneck_weight = Matrix(d_backbone, d_k);
  const double bb = 1.0 / std::sqrt(static_cast<double>(d_backbone));
  for (double& v : h.bottleneck_weight.flat()) v = rng.uniform(-bb, bb);
  h.bottleneck_bias.assign(d_k, 0.0);
  h.bn_scale.assign(d_k, 1.0);
  h.bn_shift.assign(d_k, 0.0);
  h.bn = BnState::fresh(d_k);
  h.classifier_weight = Matrix(classes, d_k);
  const double bc = 1.0 / std::sqrt(static_cast<double>(d_k));
  for (double& v : h.classifier_weight.flat()) v = rng.uniform(-bc, bc);
  h.classifier_bias.assign(classes, 0.0);
  return h;
}

// Affine map then batch normalization. In train mode the bias cancels
// against the batch mean, so it is folded into the running mean only.
inline Matrix bottleneck_forward(const SourceHead& head, const Matrix& backbone_feats, BnMode mode,
                                 BnState& bn_state, BnCache* cache = nullptr) {
  detail::require(backbone_feats.cols() == head.d_backbone(),
                  "bottleneck_forward: head '" + head.domain_name + "' expects d_backbone=" +
                      std::to_string(head.d_backbone()) + ", got features " +
                      backbone_feats.shape());
  Matrix pre = matmul(backbone_feats, head.bottleneck_weight);
  if (mode == BnMode::kEval) {
    add_row_vector(pre, head.bottleneck_bias);
    return batchnorm_forward(pre, head.bn_scale, head.bn_shift, bn_state, mode, cache);
  }
  for (std::size_t c = 0; c < head.d_k(); ++c) bn_state.running_mean[c] -= head.bottleneck_bias[c];
  Matrix out = batchnorm_forward(pre, head.bn_scale, head.bn_shift, bn_state, mode, cache);
  for (std::size_t c = 0; c < head.d_k(); ++c) bn_state.running_mean[c] += head.bottleneck_bias[c];
  return out;
}

// Convenience overload that leaves the head's running statistics untouched.
inline Matrix bottleneck_forward(const SourceHead& head, const Matrix& backbone_feats,
                                 BnMode mode) {
  BnState scratch = head.bn;
  return bottleneck_forward(head, backbone_feats, mode, scratch);
}

// logits = features * W^T + b for one classifier.
inline Matrix classify(const SourceHead& head, const Matrix& features) {
  Matrix logits = matmul_nt(features, head.classifier_weight);
  add_row_vector(logits, head.classifier_bias);
  return logits;
}

// Cross-domain output stack for features of domain `domain`: row m*n + j
// holds classifier j applied to sample m's feature.
inline Matrix cross_domain_outputs(const std::vector<Matrix>& features,
                                   const std::vector<SourceHead>& heads, std::size_t domain) {
  const std::size_t n = heads.size();
  detail::require(domain < n && features.size() == n,
                  "cross_domain_outputs: domain index " + std::to_string(domain) +
                      " out of range for " + std::to_string(n) + " domains");
  const std::size_t classes = heads.front().num_classes();
  for (const auto& h : heads) {
    detail::require(h.num_classes() == classes && h.d_k() == heads.front().d_k(),
                    "cross_domain_outputs: classifier dimensions differ across domains");
  }
  const Matrix& phi = features[domain];
  detail::require(phi.cols() == heads.front().d_k(), "cross_domain_outputs: feature width != d_k");
  Matrix stack(phi.rows() * n, classes);
  for (std::size_t j = 0; j < n; ++j) {
    const Matrix logits = classify(heads[j], phi);
    for (std::size_t m = 0; m < phi.rows(); ++m) {
      auto dst = stack.row(m * n + j);
      auto src = logits.row(m);
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }
  return stack;
}

}  // namespace biaten
