#pragma once

#include <gtest/gtest.h>

#include <span>
#include <string>
#include <vector>

#include "biaten/biaten.hpp"
#include "oracle_values.hpp"

namespace testing_support {

using namespace biaten;

inline void expect_near_all(std::span<const double> got, const std::vector<double>& want, double tol,
                            const std::string& what = "") {
  ASSERT_EQ(got.size(), want.size()) << what;
  for (std::size_t k = 0; k < want.size(); ++k)
    EXPECT_NEAR(got[k], want[k], tol) << what << " entry " << k;
}

inline SourceHead make_head(std::string name, std::size_t d_bb, std::size_t d_k, std::size_t classes,
                            const std::vector<double>& w, const std::vector<double>& b,
                            const std::vector<double>& scale, const std::vector<double>& shift,
                            const std::vector<double>& rmean, const std::vector<double>& rvar,
                            const std::vector<double>& cw, const std::vector<double>& cb) {
  SourceHead h;
  h.domain_name = std::move(name);
  h.bottleneck_weight = Matrix(d_bb, d_k, w);
  h.bottleneck_bias = b;
  h.bn_scale = scale;
  h.bn_shift = shift;
  h.bn = BnState{rmean, rvar};
  h.classifier_weight = Matrix(classes, d_k, cw);
  h.classifier_bias = cb;
  return h;
}

// Random bottleneck features plus heads and ensemble parameters; backbone
// inputs are not needed by the attention-level properties.
struct AttentionInstance {
  std::vector<Matrix> features;
  std::vector<SourceHead> heads;
  BiAtenParams params;
  std::vector<Matrix> outputs;
};

inline AttentionInstance random_attention(Rng& rng, std::size_t n, std::size_t classes, std::size_t d_k,
                                          std::size_t d_emb, std::size_t num_heads, std::size_t batch,
                                          EnsembleMode mode = EnsembleMode::kBiAten) {
  AttentionInstance a;
  for (std::size_t i = 0; i < n; ++i) {
    Matrix f(batch, d_k);
    for (double& v : f.flat()) v = rng.normal();
    a.features.push_back(std::move(f));
    SourceHead h = init_head("d" + std::to_string(i), 3, d_k, classes, rng);
    for (double& v : h.classifier_weight.flat()) v *= 3.0;
    for (double& v : h.classifier_bias) v = rng.uniform(-0.5, 0.5);
    a.heads.push_back(std::move(h));
  }
  a.params = init_params({n, d_k, classes, d_emb, num_heads}, mode, rng.next_u64());
  for (std::size_t i = 0; i < n; ++i) a.outputs.push_back(cross_domain_outputs(a.features, a.heads, i));
  return a;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) d = std::max(d, std::abs(a[k] - b[k]));
  return d;
}

}  // namespace testing_support
