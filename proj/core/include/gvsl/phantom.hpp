#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gvsl/geometry.hpp"
#include "gvsl/io.hpp"
#include "gvsl/volume.hpp"

namespace gvsl::phantom {

struct PhantomConfig {
  std::int64_t extent = 32;
  int regions = 4;

  // Jitter ranges.
  double max_rotation = 0.2;          // radians, per axis
  double scale_jitter = 0.1;          // s in [1 - j, 1 + j]
  double max_translation_frac = 0.1;  // |t| <= frac * extent
  double max_shear = 0.1;
  double deform_frac = 0.125;         // max |u| <= frac * extent
  double deform_sigma_frac = 0.2;     // smoothing sigma as a fraction of extent
  double intensity_jitter = 0.1;
  double noise_sigma = 0.02;
  double edge_sigma = 0.75;           // blur of the region map before noise, voxels
  int max_attempts = 200;

  // Dataset split ratios; the test split takes the remainder.
  double train_ratio = 0.70;
  double val_ratio = 0.15;

  void validate() const;
  nlohmann::json to_json() const;
  static PhantomConfig from_json(const nlohmann::json& j);
};

struct Phantom {
  Volume volume;
  LabelGrid labels;
  geometry::AffineParams gt_affine;
  geometry::Dvf gt_deform;
  /// Full template-sampling field: voxel p of this phantom shows template
  /// position p + field(p). Composition of gt_affine and gt_deform.
  geometry::Dvf field;
  std::uint64_t seed = 0;
};

/// Deterministic per (seed, cfg).
Phantom generate_phantom(std::uint64_t seed, const PhantomConfig& cfg = {});

/// Canonical region map before any jitter.
LabelGrid template_labels(const PhantomConfig& cfg);

/// Unordered label pairs (a < b) that touch across a voxel face.
std::set<std::pair<std::int32_t, std::int32_t>> region_adjacency(const LabelGrid& labels);

/// A moving/fixed pair with the displacement that aligns them:
/// moving(p + gt(p)) ~ fixed(p).
struct PhantomPair {
  Volume moving;
  Volume fixed;
  LabelGrid moving_labels;
  LabelGrid fixed_labels;
  geometry::Dvf gt;
};

/// fixed(p) = moving(p + t), t in (x, y, z) voxels; gt is the constant t.
PhantomPair translated_pair(const Phantom& moving, const std::array<double, 3>& t);

/// Pair of two phantoms from one template; gt by fixed-point inversion of the
/// moving phantom's field.
PhantomPair phantom_pair(const Phantom& moving, const Phantom& fixed, int iterations = 50);

/// Writes `count` phantoms and a manifest into `out_dir`. Phantom i uses the
/// i-th draw of a generator seeded with `seed`.
io::DatasetManifest generate_dataset(std::uint64_t seed, int count, const PhantomConfig& cfg,
                                     const std::filesystem::path& out_dir);

/// Split sizes for `count` items: floor for train and val, remainder to test.
std::array<int, 3> split_sizes(int count, const PhantomConfig& cfg);

/// Loads the phantom files referenced by one manifest entry. The stored field
/// is the composed one; gt_deform is left empty.
Phantom load_phantom(const io::DatasetManifest& manifest, const io::ManifestEntry& entry);

}  // namespace gvsl::phantom
