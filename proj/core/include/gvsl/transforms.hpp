#pragma once

#include <array>
#include <cstdint>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gvsl/volume.hpp"

namespace gvsl::transforms {

enum class TransformKind { Inpaint, Shuffle, Bezier };

std::string_view kind_name(TransformKind kind);
TransformKind parse_kind(std::string_view name);

/// Axis-aligned box, corner and extent in (z, y, x) voxels.
struct Box {
  std::array<std::int64_t, 3> corner{};
  std::array<std::int64_t, 3> extent{};
  friend bool operator==(const Box&, const Box&) = default;
};

/// Fully determines one appearance transform, so applying it is replayable.
struct TransformSpec {
  TransformKind kind = TransformKind::Bezier;
  std::uint64_t seed = 0;
  std::vector<Box> boxes;                    // inpaint / shuffle
  std::array<double, 2> p1{1.0 / 3.0, 1.0 / 3.0};  // bezier control points (x, y)
  std::array<double, 2> p2{2.0 / 3.0, 2.0 / 3.0};

  void validate(const geometry::VolumeGrid& grid) const;
  nlohmann::json to_json() const;
  static TransformSpec from_json(const nlohmann::json& j);
  friend bool operator==(const TransformSpec&, const TransformSpec&) = default;
};

struct TransformConfig {
  bool inpaint = true;
  bool shuffle = true;
  bool bezier = true;
  /// Number of transforms drawn per image by sample_chain; one by default.
  int chain_length = 1;
};

/// Draws one transform. Requires every grid extent >= 8.
TransformSpec sample_transform(std::uint64_t seed, const geometry::VolumeGrid& grid, const TransformConfig& cfg);
std::vector<TransformSpec> sample_chain(std::uint64_t seed, const geometry::VolumeGrid& grid,
                                        const TransformConfig& cfg);

/// Applies a transform to a volume with intensities in [0, 1].
Volume apply_transform(const Volume& volume, const TransformSpec& spec);
Volume apply_chain(const Volume& volume, const std::vector<TransformSpec>& chain);

constexpr std::size_t kBezierSamples = 1000;

/// (x(t), y(t)) at kBezierSamples evenly spaced t in [0, 1].
std::vector<std::array<double, 2>> bezier_table(const TransformSpec& spec);
/// y(x) by linear interpolation in a table from bezier_table.
double bezier_lookup(const std::vector<std::array<double, 2>>& table, double x);

}  // namespace gvsl::transforms
