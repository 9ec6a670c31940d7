#include "support.hpp"

using namespace biaten;

TEST(Synth, SameSeedSameData) {
  SynthConfig c;
  c.seed = 9;
  c.per_class = 10;
  c.target_per_class = 10;
  const SynthData a = synth_generate(c);
  const SynthData b = synth_generate(c);
  ASSERT_EQ(a.sources.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(encode_bank(a.sources[i]), encode_bank(b.sources[i]));
  EXPECT_EQ(encode_bank(a.target), encode_bank(b.target));
  c.seed = 10;
  EXPECT_NE(encode_bank(synth_generate(c).target), encode_bank(a.target));
}

TEST(Synth, ShapesAndLabels) {
  SynthConfig c;
  c.domains = 2;
  c.classes = 5;
  c.per_class = 6;
  c.target_per_class = 4;
  c.d_backbone = 12;
  const SynthData d = synth_generate(c);
  for (const auto& s : d.sources) {
    EXPECT_EQ(s.num_samples(), 30u);
    EXPECT_EQ(s.domains[0].features.cols(), 12u);
    validate_bank(s);
  }
  EXPECT_EQ(d.target.num_domains(), 2u);
  EXPECT_EQ(d.target.num_samples(), 20u);
  std::vector<int> counts(5, 0);
  for (auto y : *d.target.labels) ++counts[y];
  for (int n : counts) EXPECT_EQ(n, 4);
}

TEST(Synth, ZeroShiftDomainsShareOneDistribution) {
  SynthConfig c;
  c.seed = 4;
  c.shift = 0.0;
  c.per_class = 2000;
  c.target_per_class = 10;
  const SynthData d = synth_generate(c);
  const Vector m0 = column_means(d.sources[0].domains[0].features);
  for (std::size_t i = 1; i < d.sources.size(); ++i) {
    const Vector mi = column_means(d.sources[i].domains[0].features);
    for (std::size_t k = 0; k < m0.size(); ++k) EXPECT_NEAR(mi[k], m0[k], 0.1) << i << ',' << k;
  }
  c.shift = 2.0;
  const SynthData far = synth_generate(c);
  double gap = 0;
  const Vector f0 = column_means(far.sources[0].domains[0].features);
  const Vector f1 = column_means(far.sources[1].domains[0].features);
  for (std::size_t k = 0; k < f0.size(); ++k) gap = std::max(gap, std::abs(f0[k] - f1[k]));
  EXPECT_GT(gap, 0.5);
}

TEST(Synth, LatentClassesAreSeparable) {
  SynthConfig c;
  c.seed = 12;
  c.shift = 0.0;
  c.class_separation = 8.0;
  c.target_per_class = 500;
  const SynthData d = synth_generate(c);
  std::size_t right = 0;
  for (std::size_t m = 0; m < d.target_latents.rows(); ++m) {
    double best = 1e300;
    std::uint32_t arg = 0;
    for (std::size_t k = 0; k < c.classes; ++k) {
      double dist = 0;
      for (std::size_t t = 0; t < c.d_latent; ++t) {
        const double diff = d.target_latents(m, t) - d.class_means(k, t);
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        arg = static_cast<std::uint32_t>(k);
      }
    }
    right += arg == (*d.target.labels)[m];
  }
  EXPECT_GE(static_cast<double>(right) / d.target_latents.rows(), 0.99);
}

TEST(Synth, RejectsBadConfig) {
  SynthConfig c;
  c.classes = 0;
  EXPECT_THROW(synth_generate(c), ContractError);
  c = SynthConfig{};
  c.shuffled_label_domains = {3};
  EXPECT_THROW(synth_generate(c), ContractError);
}

TEST(Pretrain, FitsSeparableSource) {
  FeatureBank b;
  b.num_classes = 2;
  Matrix x(200, 3);
  Labels y;
  Rng rng(8);
  for (std::size_t r = 0; r < 200; ++r) {
    const std::uint32_t c = r % 2;
    x(r, 0) = (c ? 3.0 : -3.0) + 0.5 * rng.normal();
    x(r, 1) = rng.normal();
    x(r, 2) = rng.normal();
    y.push_back(c);
  }
  b.domains.push_back({"toy", x});
  b.labels = y;
  PretrainConfig pc;
  pc.d_k = 8;
  pc.seed = 1;
  const PretrainResult r = pretrain_source_head(b, "toy", pc);
  EXPECT_GE(r.train_accuracy, 0.99);
  EXPECT_TRUE(std::isfinite(r.final_loss));
  EXPECT_EQ(r.head.d_k(), 8u);
  EXPECT_EQ(encode_heads({r.head}), encode_heads({pretrain_source_head(b, "toy", pc).head}));
}

TEST(Pretrain, ShuffledLabelsLeaveTheTargetNearChance) {
  SynthConfig c;
  c.seed = 2;
  c.per_class = 60;
  c.target_per_class = 60;
  c.d_backbone = 16;
  c.shuffled_label_domains = {1};
  const SynthData d = synth_generate(c);
  PretrainConfig pc;
  pc.d_k = 16;
  pc.epochs = 15;
  std::vector<SourceHead> heads;
  for (std::size_t i = 0; i < 3; ++i) {
    pc.seed = i + 1;
    heads.push_back(pretrain_source_head(d.sources[i], "s", pc).head);
  }
  const auto acc = single_source_accuracies(d.target, heads);
  EXPECT_LT(acc[1], 0.5);
  EXPECT_GT(std::max(acc[0], acc[2]), 0.6);
}
