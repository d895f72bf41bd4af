#include <cmath>

#include <gtest/gtest.h>

#include "gvsl/classical.hpp"
#include "gvsl/errors.hpp"
#include "gvsl/phantom.hpp"

namespace gvsl::trainer {
namespace {

double mean_magnitude(const geometry::Dvf& d) {
  const std::size_t n = d.field.numel() / 3;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::hypot(d.field[i], d.field[n + i], d.field[2 * n + i]);
  return s / static_cast<double>(n);
}

TEST(Classical, ConfigValidationAndJson) {
  ClassicalConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.affine_iters = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.coarse_blur = 0.5;
  cfg.smooth_on_fused = true;
  cfg.deform_iters = 7;
  EXPECT_EQ(ClassicalConfig::from_json(cfg.to_json()).to_json(), cfg.to_json());
}

TEST(Classical, RecoversTranslation) {
  phantom::Phantom p = phantom::generate_phantom(3);
  phantom::PhantomPair pair = phantom::translated_pair(p, {2.0, 0.0, 0.0});
  ClassicalConfig cfg;
  cfg.deform_iters = 0;
  ClassicalResult r = classical_register(pair.moving, pair.fixed, cfg);
  EXPECT_NEAR(r.affine.translation[0], 2.0, 0.5);
  EXPECT_NEAR(r.affine.translation[1], 0.0, 0.5);
  EXPECT_NEAR(r.affine.translation[2], 0.0, 0.5);
  EXPECT_LE(r.final_ncc, r.initial_ncc);
  // Coarse and fine levels each log their starting point.
  EXPECT_EQ(static_cast<int>(r.affine_trace.size()), cfg.affine_iters + 2);
  EXPECT_EQ(r.deform_trace.size(), 1u);
}

TEST(Classical, IdenticalImagesStayAtIdentity) {
  phantom::Phantom p = phantom::generate_phantom(4);
  ClassicalResult r = classical_register(p.volume, p.volume);
  for (double t : r.affine.translation) EXPECT_LT(std::abs(t), 0.05);
  EXPECT_LE(r.final_ncc, r.initial_ncc);
}

TEST(Classical, SmoothnessWeightShrinksDeformation) {
  phantom::Phantom a = phantom::generate_phantom(5);
  phantom::Phantom b = phantom::generate_phantom(6);
  std::vector<double> magnitudes;
  for (double lambda : {1.0, 10.0, 100.0}) {
    ClassicalConfig cfg;
    cfg.affine_iters = 60;
    cfg.deform_iters = 60;
    cfg.deform_loss.smooth_weight = lambda;
    ClassicalResult r = classical_register(a.volume, b.volume, cfg);
    EXPECT_LE(r.final_ncc, r.initial_ncc);
    magnitudes.push_back(mean_magnitude(r.deform));
  }
  EXPECT_GT(magnitudes[0], magnitudes[1]);
  EXPECT_GT(magnitudes[1], magnitudes[2]);
}

TEST(Classical, GridMismatch) {
  phantom::PhantomConfig small;
  small.extent = 16;
  EXPECT_THROW(classical_register(phantom::generate_phantom(1).volume, phantom::generate_phantom(1, small).volume),
               ShapeError);
}

}  // namespace
}  // namespace gvsl::trainer
