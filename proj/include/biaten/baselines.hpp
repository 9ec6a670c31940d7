#pragma once

// Reference ensembles over unadapted source heads.

#include <vector>

#include "biaten/databank.hpp"
#include "biaten/source_heads.hpp"
#include "biaten/trainer.hpp"

namespace biaten {

// Own-domain prediction of each head on its bank domain (running BN stats).
inline std::vector<Matrix> source_logits(const FeatureBank& bank, const std::vector<SourceHead>& heads) {
  check_bank_heads(bank, heads);
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < heads.size(); ++i)
    out.push_back(classify(heads[i], bottleneck_forward(heads[i], bank.domains[i].features, BnMode::kEval)));
  return out;
}

inline std::vector<double> single_source_accuracies(const FeatureBank& bank,
                                                    const std::vector<SourceHead>& heads) {
  detail::require(bank.labels.has_value(), "single_source_accuracies: bank has no labels");
  std::vector<double> acc;
  for (const auto& logits : source_logits(bank, heads)) acc.push_back(accuracy(predictions(logits), *bank.labels));
  return acc;
}

// Uniform average of the sources' class probabilities.
inline Matrix average_ensemble_probs(const FeatureBank& bank, const std::vector<SourceHead>& heads) {
  const auto logits = source_logits(bank, heads);
  Matrix avg(bank.num_samples(), bank.num_classes);
  const double w = 1.0 / static_cast<double>(heads.size());
  for (const auto& l : logits) {
    const Matrix p = stable_softmax_rows(l);
    for (std::size_t k = 0; k < p.size(); ++k) avg.flat()[k] += w * p.flat()[k];
  }
  return avg;
}

inline double average_ensemble_accuracy(const FeatureBank& bank, const std::vector<SourceHead>& heads) {
  detail::require(bank.labels.has_value(), "average_ensemble_accuracy: bank has no labels");
  return accuracy(predictions(average_ensemble_probs(bank, heads)), *bank.labels);
}

}  // namespace biaten
