#pragma once

// Dynamic-cluster pseudo labels.
//
// Per domain i and class c a soft centroid mu_c^i is formed from the whole
// target set, weighted by the ensemble's class probabilities. Each sample m
// then mixes both the centroids and its own per-domain features with its
// inter-domain weights beta^m, and takes the class whose mixed centroid is
// most cosine-similar to its mixed feature.

#include <cstddef>
#include <optional>
#include <vector>

#include "biaten/numerics.hpp"
#include "biaten/objectives.hpp"

namespace biaten {

struct CentroidState {
  std::vector<Matrix> centroids;  // [domain], C x d_k
  Vector class_mass;              // total soft mass per class
  std::vector<bool> class_empty;  // zero mass: skipped during assignment
  std::size_t refresh_epoch = 0;

  std::size_t classes() const { return class_mass.size(); }
  std::size_t domains() const { return centroids.size(); }
};

// features: [domain] N x d_k over the full target set; probs: N x C.
inline CentroidState compute_centroids(const std::vector<Matrix>& features, const Matrix& probs) {
  detail::require(!features.empty(), "compute_centroids: no features");
  const std::size_t samples = probs.rows();
  const std::size_t classes = probs.cols();
  for (const auto& f : features)
    detail::require(f.rows() == samples, "compute_centroids: feature rows != probability rows");
  CentroidState s;
  s.class_mass = column_sums(probs);
  s.class_empty.resize(classes);
  for (std::size_t c = 0; c < classes; ++c) s.class_empty[c] = !(s.class_mass[c] > 0.0);
  for (const auto& f : features) {
    Matrix mu(classes, f.cols());
    for (std::size_t m = 0; m < samples; ++m)
      for (std::size_t c = 0; c < classes; ++c) axpy(probs(m, c), f.row(m), mu.row(c));
    for (std::size_t c = 0; c < classes; ++c) {
      auto row = mu.row(c);
      if (s.class_empty[c]) {
        std::fill(row.begin(), row.end(), 0.0);
        continue;
      }
      for (double& v : row) v /= s.class_mass[c];
    }
    require_finite(mu.flat(), "class centroids");
    s.centroids.push_back(std::move(mu));
  }
  return s;
}

// mu~_c = sum_i beta_i mu_c^i, C x d_k.
inline Matrix dynamic_centroid(const CentroidState& state, std::span<const double> beta) {
  detail::require(beta.size() == state.domains(), "dynamic_centroid: beta length != domain count");
  detail::require_simplex(beta, 1e-6, "dynamic_centroid");
  Matrix out(state.classes(), state.centroids.front().cols());
  for (std::size_t i = 0; i < state.domains(); ++i)
    for (std::size_t c = 0; c < state.classes(); ++c) axpy(beta[i], state.centroids[i].row(c), out.row(c));
  return out;
}

// phi~ = sum_i beta_i phi^{m,i}.
inline Vector dynamic_feature(const std::vector<Matrix>& features, std::size_t sample,
                              std::span<const double> beta) {
  detail::require(beta.size() == features.size(), "dynamic_feature: beta length != domain count");
  detail::require_simplex(beta, 1e-6, "dynamic_feature");
  Vector out(features.front().cols(), 0.0);
  for (std::size_t i = 0; i < features.size(); ++i) axpy(beta[i], features[i].row(sample), out);
  return out;
}

// argmax over non-empty classes; ties go to the lowest index. Returns
// nullopt when every class is empty.
inline std::optional<std::uint32_t> nearest_class(std::span<const double> feature,
                                                  const Matrix& class_centroids,
                                                  const std::vector<bool>& class_empty) {
  std::optional<std::uint32_t> best;
  double best_score = 0.0;
  for (std::size_t c = 0; c < class_centroids.rows(); ++c) {
    if (class_empty[c]) continue;
    const double score = cosine(feature, class_centroids.row(c));
    if (!best || score > best_score) {
      best = static_cast<std::uint32_t>(c);
      best_score = score;
    }
  }
  return best;
}

// Labels for every sample. `previous` is returned unchanged when the state
// has no usable class at all.
inline Labels assign_labels(const CentroidState& state, const std::vector<Matrix>& features,
                            const Matrix& beta, const Labels& previous = {}) {
  const std::size_t samples = beta.rows();
  const bool any_class =
      std::find(state.class_empty.begin(), state.class_empty.end(), false) != state.class_empty.end();
  if (!any_class) {
    detail::require(previous.size() == samples,
                    "assign_labels: every class is empty and no previous labels exist");
    return previous;
  }
  Labels labels(samples);
  for (std::size_t m = 0; m < samples; ++m) {
    const Vector phi = dynamic_feature(features, m, beta.row(m));
    const Matrix mu = dynamic_centroid(state, beta.row(m));
    labels[m] = *nearest_class(phi, mu, state.class_empty);
  }
  return labels;
}

// Fraction of labels unchanged between two refreshes.
inline double label_agreement(const Labels& before, const Labels& after) {
  detail::require(before.size() == after.size() && !after.empty(), "label_agreement: size mismatch");
  std::size_t same = 0;
  for (std::size_t m = 0; m < after.size(); ++m) same += before[m] == after[m];
  return static_cast<double>(same) / static_cast<double>(after.size());
}

}  // namespace biaten
