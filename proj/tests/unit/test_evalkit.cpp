#include <cmath>

#include <gtest/gtest.h>

#include "gvsl/errors.hpp"
#include "gvsl/evalkit.hpp"
#include "gvsl/phantom.hpp"
#include "gvsl/trainer.hpp"
#include "test_util.hpp"

namespace gvsl::evalkit {
namespace {

LabelGrid random_labels(const geometry::VolumeGrid& g, int classes, std::uint64_t seed) {
  Rng rng(seed);
  LabelGrid l{g, std::vector<std::int32_t>(g.voxels())};
  for (auto& v : l.labels) v = static_cast<std::int32_t>(rng.uniform_int(0, classes - 1));
  return l;
}

TEST(Dice, Examples) {
  const geometry::VolumeGrid g{4, 4, 4};
  LabelGrid a = random_labels(g, 3, 1);
  DiceReport same = dice(a, a, 3);
  for (double d : same.per_class) EXPECT_EQ(d, 1.0);
  EXPECT_EQ(same.mean_foreground, 1.0);

  std::vector<std::int32_t> p(64, 0), t(64, 0);
  for (int i = 0; i < 8; ++i) p[static_cast<std::size_t>(i)] = 1;
  for (int i = 8; i < 16; ++i) t[static_cast<std::size_t>(i)] = 1;
  EXPECT_EQ(dice(p, t, 2).per_class[1], 0.0);
  for (int i = 4; i < 12; ++i) t[static_cast<std::size_t>(i)] = 1;
  for (int i = 12; i < 16; ++i) t[static_cast<std::size_t>(i)] = 0;
  EXPECT_EQ(dice(p, t, 2).per_class[1], 0.5);
  // Class 2 absent from both scores 1.
  EXPECT_EQ(dice(p, t, 3).per_class[2], 1.0);
}

TEST(Dice, MatchesCountingOracleAndIsSymmetric) {
  const geometry::VolumeGrid g{8, 8, 8};
  for (std::uint64_t s = 0; s < 10; ++s) {
    LabelGrid a = random_labels(g, 4, s), b = random_labels(g, 4, s + 100);
    DiceReport r = dice(a, b, 4);
    double mean = 0.0;
    for (int c = 0; c < 4; ++c) {
      std::size_t inter = 0, np = 0, nt = 0;
      for (std::size_t i = 0; i < a.labels.size(); ++i) {
        np += a.labels[i] == c;
        nt += b.labels[i] == c;
        inter += a.labels[i] == c && b.labels[i] == c;
      }
      const double d = np + nt == 0 ? 1.0 : 2.0 * inter / static_cast<double>(np + nt);
      EXPECT_EQ(r.per_class[static_cast<std::size_t>(c)], d);
      if (c > 0) mean += d;
    }
    EXPECT_DOUBLE_EQ(r.mean_foreground, mean / 3.0);
    DiceReport back = dice(b, a, 4);
    EXPECT_EQ(back.per_class, r.per_class);
  }
}

TEST(Dice, Errors) {
  EXPECT_THROW(dice(random_labels({4, 4, 4}, 2, 1), random_labels({4, 4, 5}, 2, 1), 2), ShapeError);
  EXPECT_THROW(dice(random_labels({4, 4, 4}, 5, 1), random_labels({4, 4, 4}, 2, 1), 3), ShapeError);
}

TEST(Registration, TranslatedPairExamples) {
  phantom::Phantom p = phantom::generate_phantom(2);
  phantom::PhantomPair pair = phantom::translated_pair(p, {2.0, 0.0, 0.0});
  const auto grid = p.volume.grid();
  RegistrationReport zero = registration_eval(geometry::Dvf(grid), pair, 5);
  EXPECT_TRUE(zero.has_ground_truth);
  EXPECT_DOUBLE_EQ(zero.mean_endpoint_error, 2.0);
  EXPECT_DOUBLE_EQ(zero.max_endpoint_error, 2.0);
  RegistrationReport exact = registration_eval(pair.gt, pair, 5);
  EXPECT_EQ(exact.mean_endpoint_error, 0.0);
  EXPECT_EQ(exact.negative_jacobian_percent, 0.0);
  EXPECT_GT(exact.warped_dice.mean_foreground, zero.warped_dice.mean_foreground);
  EXPECT_DOUBLE_EQ(exact.mean_displacement[0], 2.0);

  phantom::PhantomPair self = phantom::translated_pair(p, {0.0, 0.0, 0.0});
  EXPECT_EQ(registration_eval(geometry::Dvf(grid), self, 5).warped_dice.mean_foreground, 1.0);
}

TEST(Registration, EndpointErrorTranslationEquivariant) {
  phantom::Phantom a = phantom::generate_phantom(3), b = phantom::generate_phantom(4);
  phantom::PhantomPair pair = phantom::phantom_pair(a, b);
  geometry::Dvf pred(test::random_tensor({3, 32, 32, 32}, 5, -1.0, 1.0));
  RegistrationReport r0 = registration_eval(pred, pair, 5);
  const std::size_t n = pred.field.numel() / 3;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < n; ++i) {
      const double shift = 0.5 + 0.25 * static_cast<double>(c);
      pred.field[c * n + i] += shift;
      pair.gt.field[c * n + i] += shift;
    }
  RegistrationReport r1 = registration_eval(pred, pair, 5);
  EXPECT_NEAR(r1.mean_endpoint_error, r0.mean_endpoint_error, 1e-12);
  EXPECT_NEAR(r1.max_endpoint_error, r0.max_endpoint_error, 1e-12);
}

TEST(Registration, NegativeJacobianAndNoGroundTruth) {
  const geometry::VolumeGrid g{8, 8, 8};
  geometry::Dvf fold(g);
  for (std::int64_t z = 0; z < 8; ++z)
    for (std::int64_t y = 0; y < 8; ++y)
      for (std::int64_t x = 0; x < 8; ++x) fold.field[static_cast<std::size_t>((z * 8 + y) * 8 + x)] = -1.5 * x;
  LabelGrid l = random_labels(g, 3, 9);
  RegistrationReport r = registration_eval(fold, l, l, 3);
  EXPECT_FALSE(r.has_ground_truth);
  // det = 1 - 1.5 < 0 except in the last x slice.
  EXPECT_DOUBLE_EQ(r.negative_jacobian_percent, 100.0 * 7.0 / 8.0);
  EXPECT_EQ(to_report(r).find("endpoint"), std::string::npos);
}

FeatureImage one_hot_image(const LabelGrid& l, int classes) {
  const std::size_t nv = l.labels.size();
  Tensor f({classes, l.grid.z, l.grid.y, l.grid.x});
  for (std::size_t i = 0; i < nv; ++i) f[static_cast<std::size_t>(l.labels[i]) * nv + i] = 1.0;
  return {f, l};
}

TEST(Clustering, OneHotFeaturesDiverge) {
  phantom::PhantomConfig cfg;
  cfg.extent = 16;
  std::vector<FeatureImage> images;
  for (std::uint64_t s = 0; s < 3; ++s) images.push_back(one_hot_image(phantom::generate_phantom(s, cfg).labels, 5));
  ClusteringReport r = clustering_contrast(images, 5, 16, 1);
  EXPECT_EQ(r.same_label_mean, 1.0);
  EXPECT_EQ(r.cross_label_mean, 0.0);
  EXPECT_EQ(r.ratio, kInfiniteRatio);
  EXPECT_NE(to_report(r).find("clustering.ratio=inf"), std::string::npos);
  EXPECT_GT(r.same_pairs, 0u);
  EXPECT_GT(r.cross_pairs, 0u);
}

TEST(Clustering, ConstantFeaturesGiveOne) {
  phantom::PhantomConfig cfg;
  cfg.extent = 16;
  std::vector<FeatureImage> images;
  for (std::uint64_t s = 0; s < 2; ++s) {
    LabelGrid l = phantom::generate_phantom(s, cfg).labels;
    images.push_back({Tensor({4, 16, 16, 16}, 0.7), l});
  }
  ClusteringReport r = clustering_contrast(images, 5, 8, 2);
  EXPECT_NEAR(r.ratio, 1.0, 1e-12);
  ClusteringReport again = clustering_contrast(images, 5, 8, 2);
  EXPECT_EQ(again.same_label_mean, r.same_label_mean);
  EXPECT_EQ(again.same_pairs, r.same_pairs);
}

TEST(Clustering, SkipsClassesWithoutInteriorAndValidates) {
  const geometry::VolumeGrid g{6, 6, 6};
  LabelGrid l{g, std::vector<std::int32_t>(g.voxels(), 1)};
  l.labels[0] = 2;  // a single corner voxel has no interior
  l.labels[1] = 3;
  std::vector<FeatureImage> images{one_hot_image(l, 4), one_hot_image(l, 4)};
  EXPECT_THROW(clustering_contrast(images, 4, 8, 0), ConfigError);
  for (std::int64_t z = 2; z < 6; ++z)
    for (std::int64_t y = 2; y < 6; ++y)
      for (std::int64_t x = 2; x < 6; ++x) l.labels[static_cast<std::size_t>((z * 6 + y) * 6 + x)] = 3;
  images = {one_hot_image(l, 4), one_hot_image(l, 4)};
  ClusteringReport r = clustering_contrast(images, 4, 8, 0);
  EXPECT_EQ(r.skipped_classes, std::vector<int>{2});
  EXPECT_THROW(clustering_contrast({images[0]}, 4, 8, 0), ConfigError);
  EXPECT_THROW(clustering_contrast(images, 2, 8, 0), ConfigError);
}

class ProbeTest : public ::testing::Test {
 protected:
  static std::vector<LabelledVolume> make(std::uint64_t seed, int count) {
    phantom::PhantomConfig cfg;
    cfg.extent = 16;
    std::vector<LabelledVolume> out;
    for (int i = 0; i < count; ++i) {
      phantom::Phantom p = phantom::generate_phantom(seed + static_cast<std::uint64_t>(i), cfg);
      out.push_back({p.volume, p.labels});
    }
    return out;
  }
};

TEST_F(ProbeTest, DeterministicAndWeightsUntouched) {
  models::ModelWeights w = models::init_weights(4, {});
  const auto hash = models::weights_hash(w);
  auto train = make(10, 2), test = make(20, 1);
  ProbeConfig cfg;
  cfg.iterations = 20;
  cfg.lr = 1e-2;
  cfg.classes = 5;
  ProbeResult a = linear_probe(w, train, test, cfg);
  ProbeResult b = linear_probe(w, train, test, cfg);
  EXPECT_EQ(a.dice.per_class, b.dice.per_class);
  EXPECT_EQ(a.loss_trace, b.loss_trace);
  EXPECT_EQ(a.loss_trace.size(), 20u);
  EXPECT_LT(a.loss_trace.back(), a.loss_trace.front());
  EXPECT_EQ(a.dice.per_class.size(), 5u);
  EXPECT_FALSE(a.degenerate);
  EXPECT_EQ(models::weights_hash(w), hash);

  cfg.frozen = false;
  cfg.iterations = 2;
  ProbeResult f = linear_probe(w, train, test, cfg);
  EXPECT_EQ(f.loss_trace.size(), 2u);
  EXPECT_EQ(models::weights_hash(w), hash);
}

TEST_F(ProbeTest, BackgroundOnlyLabelsAreDegenerate) {
  models::ModelWeights w = models::init_weights(4, {});
  auto train = make(30, 2), test = make(40, 1);
  for (auto& v : test) std::fill(v.labels.labels.begin(), v.labels.labels.end(), 0);
  ProbeConfig cfg;
  cfg.iterations = 3;
  cfg.classes = 5;
  ProbeResult r = linear_probe(w, train, test, cfg);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.dice.mean_foreground, 0.0);
}

TEST_F(ProbeTest, ConfigErrors) {
  ProbeConfig cfg;
  cfg.iterations = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.classes = 1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.iterations = 17;
  cfg.frozen = false;
  EXPECT_EQ(ProbeConfig::from_json(cfg.to_json()).to_json(), cfg.to_json());
  models::ModelWeights w = models::init_weights(4, {});
  EXPECT_THROW(linear_probe(w, {}, make(1, 1), ProbeConfig{}), ConfigError);
}

}  // namespace
}  // namespace gvsl::evalkit
