#include <algorithm>
#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "gvsl/errors.hpp"
#include "gvsl/io.hpp"
#include "gvsl/phantom.hpp"
#include "test_util.hpp"

namespace gvsl::phantom {
namespace {

std::set<std::int32_t> label_set(const LabelGrid& l) { return {l.labels.begin(), l.labels.end()}; }

// Face-adjacent label pairs, computed independently of region_adjacency.
std::set<std::pair<int, int>> oracle_adjacency(const LabelGrid& l) {
  std::set<std::pair<int, int>> out;
  const auto& g = l.grid;
  for (std::int64_t z = 0; z < g.z; ++z)
    for (std::int64_t y = 0; y < g.y; ++y)
      for (std::int64_t x = 0; x < g.x; ++x) {
        const int a = l.at(x, y, z);
        const int n[3] = {x + 1 < g.x ? l.at(x + 1, y, z) : a, y + 1 < g.y ? l.at(x, y + 1, z) : a,
                          z + 1 < g.z ? l.at(x, y, z + 1) : a};
        for (int b : n)
          if (b != a) out.emplace(std::min(a, b), std::max(a, b));
      }
  return out;
}

TEST(Phantom, SameSeedIsBitIdentical) {
  Phantom a = generate_phantom(5);
  Phantom b = generate_phantom(5);
  EXPECT_EQ(a.volume.data, b.volume.data);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.gt_affine, b.gt_affine);
  EXPECT_EQ(a.gt_deform.field, b.gt_deform.field);
  EXPECT_NE(generate_phantom(6).volume.data, a.volume.data);
}

TEST(Phantom, InvariantsAcrossSeeds) {
  PhantomConfig cfg;
  const auto tmpl = template_labels(cfg);
  const auto tmpl_adj = oracle_adjacency(tmpl);
  std::vector<std::vector<double>> region_means;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Phantom p = generate_phantom(seed, cfg);
    EXPECT_EQ(label_set(p.labels), (std::set<std::int32_t>{0, 1, 2, 3, 4})) << seed;
    const auto adj = oracle_adjacency(p.labels);
    EXPECT_EQ(adj, tmpl_adj) << seed;
    EXPECT_EQ(region_adjacency(p.labels), adj);

    const auto fg = std::count_if(p.labels.labels.begin(), p.labels.labels.end(), [](int v) { return v != 0; });
    EXPECT_GE(static_cast<double>(fg) / p.labels.labels.size(), 0.05);

    for (double v : p.volume.data.data()) {
      ASSERT_TRUE(std::isfinite(v));
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
    Tensor jac = geometry::jacobian_determinant(p.gt_deform);
    EXPECT_GT(*std::min_element(jac.data().begin(), jac.data().end()), 0.0);
    double umax = 0.0;
    for (std::size_t i = 0; i < p.gt_deform.field.numel() / 3; ++i) {
      const std::size_t n = p.gt_deform.field.numel() / 3;
      umax = std::max(umax, std::hypot(p.gt_deform.field[i], p.gt_deform.field[n + i], p.gt_deform.field[2 * n + i]));
    }
    EXPECT_LE(umax, cfg.extent / 8.0 + 1e-12);

    const auto& a = p.gt_affine;
    for (double r : a.rotation) EXPECT_LE(std::abs(r), 0.2);
    for (double s : a.scaling) EXPECT_TRUE(s >= 0.9 && s <= 1.1);
    for (double t : a.translation) EXPECT_LE(std::abs(t), cfg.extent / 10.0);
    for (double s : a.shearing) EXPECT_LE(std::abs(s), 0.1);

    std::vector<double> sum(5, 0.0), cnt(5, 0.0);
    for (std::size_t i = 0; i < p.labels.labels.size(); ++i) {
      sum[static_cast<std::size_t>(p.labels.labels[i])] += p.volume.data[i];
      cnt[static_cast<std::size_t>(p.labels.labels[i])] += 1;
    }
    for (std::size_t k = 0; k < 5; ++k) sum[k] /= cnt[k];
    region_means.push_back(sum);
  }
  for (std::size_t k = 0; k < 5; ++k) {
    double lo = 1.0, hi = 0.0;
    for (const auto& m : region_means) lo = std::min(lo, m[k]), hi = std::max(hi, m[k]);
    EXPECT_GE(hi - lo, 0.02) << "region " << k;
  }
}

TEST(Phantom, RegionCountConfig) {
  for (int l : {2, 3}) {
    PhantomConfig cfg;
    cfg.regions = l;
    std::set<std::int32_t> want;
    for (int k = 0; k <= l; ++k) want.insert(k);
    EXPECT_EQ(label_set(generate_phantom(1, cfg).labels), want);
  }
}

TEST(Phantom, ConfigErrors) {
  PhantomConfig cfg;
  cfg.regions = 1;
  EXPECT_THROW(generate_phantom(0, cfg), ConfigError);
  cfg.regions = 4;
  cfg.extent = 15;
  EXPECT_THROW(generate_phantom(0, cfg), ConfigError);
  cfg.extent = 32;
  cfg.train_ratio = 0.9;
  cfg.val_ratio = 0.2;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Phantom, ConfigJsonRoundTrip) {
  PhantomConfig cfg;
  cfg.extent = 24;
  cfg.regions = 3;
  cfg.noise_sigma = 0.05;
  PhantomConfig back = PhantomConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
}

TEST(Pair, TranslatedPairLabelsAndField) {
  Phantom p = generate_phantom(3);
  PhantomPair pair = translated_pair(p, {2.0, 0.0, 0.0});
  const auto g = p.volume.grid();
  for (std::int64_t z = 0; z < g.z; ++z)
    for (std::int64_t y = 0; y < g.y; ++y)
      for (std::int64_t x = 0; x + 2 < g.x; ++x) {
        ASSERT_EQ(pair.fixed_labels.at(x, y, z), p.labels.at(x + 2, y, z));
        ASSERT_EQ(pair.fixed.data[static_cast<std::size_t>((z * g.y + y) * g.x + x)],
                  p.volume.data[static_cast<std::size_t>((z * g.y + y) * g.x + x + 2)]);
      }
  EXPECT_EQ(pair.gt.at(4, 5, 6), (std::array<double, 3>{2.0, 0.0, 0.0}));
}

// Trilinear sample of a field at a continuous position clamped to the grid.
std::array<double, 3> sample_field(const geometry::Dvf& d, double x, double y, double z) {
  const auto g = d.grid();
  auto clamp = [](double v, std::int64_t n) { return std::min(std::max(v, 0.0), static_cast<double>(n - 1)); };
  x = clamp(x, g.x);
  y = clamp(y, g.y);
  z = clamp(z, g.z);
  const auto x0 = std::min<std::int64_t>(static_cast<std::int64_t>(x), g.x - 2);
  const auto y0 = std::min<std::int64_t>(static_cast<std::int64_t>(y), g.y - 2);
  const auto z0 = std::min<std::int64_t>(static_cast<std::int64_t>(z), g.z - 2);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0), fz = z - static_cast<double>(z0);
  std::array<double, 3> r{};
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
        const auto v = d.at(x0 + dx, y0 + dy, z0 + dz);
        for (std::size_t c = 0; c < 3; ++c) r[c] += w * v[c];
      }
  return r;
}

TEST(Pair, GroundTruthSolvesFieldEquation) {
  // Both phantoms sample the template: moving at p + f_m(p), fixed at
  // p + f_f(p). The gt must satisfy gt(p) + f_m(p + gt(p)) = f_f(p).
  Phantom a = generate_phantom(11);
  Phantom b = generate_phantom(12);
  PhantomPair pair = phantom_pair(a, b);
  const auto g = a.volume.grid();
  double total = 0.0;
  std::size_t n = 0;
  for (std::int64_t z = 0; z < g.z; ++z)
    for (std::int64_t y = 0; y < g.y; ++y)
      for (std::int64_t x = 0; x < g.x; ++x) {
        const auto gt = pair.gt.at(x, y, z);
        const double q[3] = {static_cast<double>(x) + gt[0], static_cast<double>(y) + gt[1],
                             static_cast<double>(z) + gt[2]};
        if (q[0] < 0 || q[1] < 0 || q[2] < 0 || q[0] > static_cast<double>(g.x - 1) ||
            q[1] > static_cast<double>(g.y - 1) || q[2] > static_cast<double>(g.z - 1)) {
          continue;
        }
        const auto fm = sample_field(a.field, q[0], q[1], q[2]);
        const auto ff = b.field.at(x, y, z);
        double e = 0.0;
        for (std::size_t c = 0; c < 3; ++c) e = std::max(e, std::abs(gt[c] + fm[c] - ff[c]));
        total += e;
        ++n;
      }
  ASSERT_GT(n, g.voxels() / 2);
  EXPECT_LT(total / static_cast<double>(n), 1e-3);
}

TEST(Pair, GroundTruthImprovesLabelAgreement) {
  Phantom a = generate_phantom(11);
  Phantom b = generate_phantom(12);
  PhantomPair pair = phantom_pair(a, b);
  auto warped = geometry::warp_labels_nearest(a.labels.labels, a.labels.grid, pair.gt);
  std::size_t agree = 0, agree_before = 0;
  for (std::size_t i = 0; i < warped.size(); ++i) {
    if (b.labels.labels[i] == 0) continue;
    agree += warped[i] == b.labels.labels[i];
    agree_before += a.labels.labels[i] == b.labels.labels[i];
  }
  EXPECT_GT(agree, agree_before);
}

TEST(Dataset, SplitRule) {
  EXPECT_EQ(split_sizes(10, {}), (std::array<int, 3>{7, 1, 2}));
  EXPECT_EQ(split_sizes(20, {}), (std::array<int, 3>{14, 3, 3}));
  EXPECT_EQ(split_sizes(2, {}), (std::array<int, 3>{1, 0, 1}));
}

TEST(Dataset, ManifestChecksumsAndDeterminism) {
  test::TempDir a("ds_a"), b("ds_b");
  PhantomConfig cfg;
  cfg.extent = 16;
  auto ma = generate_dataset(7, 10, cfg, a.path());
  auto mb = generate_dataset(7, 10, cfg, b.path());
  ASSERT_EQ(ma.entries.size(), 10u);
  EXPECT_EQ(ma.split("train").size(), 7u);
  EXPECT_EQ(ma.split("val").size(), 1u);
  EXPECT_EQ(ma.split("test").size(), 2u);
  for (std::size_t i = 0; i < ma.entries.size(); ++i) {
    const auto& e = ma.entries[i];
    for (const auto& [key, file] : {std::pair{"volume", e.volume}, {"labels", e.labels}, {"gt_dvf", e.gt_dvf}}) {
      ASSERT_TRUE(std::filesystem::exists(ma.resolve(file))) << file;
      EXPECT_EQ(e.checksums.at(key), io::file_checksum(ma.resolve(file)));
    }
    EXPECT_EQ(e.checksums, mb.entries[i].checksums);
  }
  auto reread = io::read_manifest(a / "manifest.json");
  EXPECT_EQ(reread.entries.size(), 10u);
  Phantom loaded = load_phantom(reread, reread.entries[0]);
  Phantom direct = generate_phantom(reread.entries[0].seed, cfg);
  EXPECT_EQ(loaded.volume.data, direct.volume.data);
  EXPECT_EQ(loaded.labels, direct.labels);
  EXPECT_EQ(loaded.gt_affine, direct.gt_affine);
  EXPECT_THROW(generate_dataset(7, 1, cfg, a / "x"), ConfigError);
}

}  // namespace
}  // namespace gvsl::phantom
