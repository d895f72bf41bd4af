#include "gvsl/transforms.hpp"

#include <algorithm>
#include <cmath>

#include "gvsl/errors.hpp"
#include "gvsl/rng.hpp"

namespace gvsl::transforms {

std::string_view kind_name(TransformKind kind) {
  switch (kind) {
    case TransformKind::Inpaint: return "inpaint";
    case TransformKind::Shuffle: return "shuffle";
    case TransformKind::Bezier: return "bezier";
  }
  return "unknown";
}

TransformKind parse_kind(std::string_view name) {
  if (name == "inpaint") return TransformKind::Inpaint;
  if (name == "shuffle") return TransformKind::Shuffle;
  if (name == "bezier") return TransformKind::Bezier;
  throw ConfigError("unknown transform kind '" + std::string(name) + "'");
}

void TransformSpec::validate(const geometry::VolumeGrid& grid) const {
  const std::array<std::int64_t, 3> extents{grid.z, grid.y, grid.x};
  if (kind == TransformKind::Bezier) {
    for (double v : {p1[0], p1[1], p2[0], p2[1]}) {
      if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("bezier control points must lie in the unit square");
    }
    if (p1[0] > p2[0]) throw ConfigError("bezier control points must be sorted by x");
    return;
  }
  if (boxes.empty()) throw ConfigError(std::string(kind_name(kind)) + " transform needs at least one box");
  for (const Box& b : boxes) {
    for (std::size_t a = 0; a < 3; ++a) {
      if (b.extent[a] < 1 || b.corner[a] < 0 || b.corner[a] + b.extent[a] > extents[a]) {
        throw ShapeError("transform box lies outside the volume");
      }
    }
  }
}

nlohmann::json TransformSpec::to_json() const {
  nlohmann::json j;
  j["kind"] = kind_name(kind);
  j["seed"] = seed;
  if (kind == TransformKind::Bezier) {
    j["control_points"] = {{p1[0], p1[1]}, {p2[0], p2[1]}};
  } else {
    nlohmann::json list = nlohmann::json::array();
    for (const Box& b : boxes) list.push_back({{"corner", b.corner}, {"extent", b.extent}});
    j["boxes"] = list;
  }
  return j;
}

TransformSpec TransformSpec::from_json(const nlohmann::json& j) {
  try {
    TransformSpec s;
    s.kind = parse_kind(j.at("kind").get<std::string>());
    s.seed = j.at("seed").get<std::uint64_t>();
    if (s.kind == TransformKind::Bezier) {
      const auto& cp = j.at("control_points");
      s.p1 = {cp.at(0).at(0).get<double>(), cp.at(0).at(1).get<double>()};
      s.p2 = {cp.at(1).at(0).get<double>(), cp.at(1).at(1).get<double>()};
    } else {
      for (const auto& b : j.at("boxes")) {
        s.boxes.push_back({b.at("corner").get<std::array<std::int64_t, 3>>(),
                           b.at("extent").get<std::array<std::int64_t, 3>>()});
      }
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed transform spec: ") + e.what());
  }
}

namespace {

std::vector<Box> sample_boxes(Rng& rng, const std::array<std::int64_t, 3>& extents, bool inpaint) {
  const auto count = rng.uniform_int(1, 5);
  std::vector<Box> boxes;
  for (std::int64_t k = 0; k < count; ++k) {
    Box b;
    for (std::size_t a = 0; a < 3; ++a) {
      const std::int64_t n = extents[a];
      std::int64_t lo, hi;
      if (inpaint) {
        lo = std::max<std::int64_t>(1, (n + 9) / 10);
        hi = std::max(lo, n / 4);
      } else {
        lo = 2;
        hi = std::max<std::int64_t>(2, n / 4);
      }
      b.extent[a] = rng.uniform_int(lo, hi);
      b.corner[a] = rng.uniform_int(0, n - b.extent[a]);
    }
    boxes.push_back(b);
  }
  return boxes;
}

template <class F>
void for_each_voxel(const Box& b, const geometry::VolumeGrid& g, F&& f) {
  for (std::int64_t z = b.corner[0]; z < b.corner[0] + b.extent[0]; ++z) {
    for (std::int64_t y = b.corner[1]; y < b.corner[1] + b.extent[1]; ++y) {
      for (std::int64_t x = b.corner[2]; x < b.corner[2] + b.extent[2]; ++x) {
        f(static_cast<std::size_t>((z * g.y + y) * g.x + x));
      }
    }
  }
}

}  // namespace

TransformSpec sample_transform(std::uint64_t seed, const geometry::VolumeGrid& grid, const TransformConfig& cfg) {
  if (grid.z < 8 || grid.y < 8 || grid.x < 8) throw ConfigError("transform sampling needs extents >= 8");
  std::vector<TransformKind> enabled;
  if (cfg.inpaint) enabled.push_back(TransformKind::Inpaint);
  if (cfg.shuffle) enabled.push_back(TransformKind::Shuffle);
  if (cfg.bezier) enabled.push_back(TransformKind::Bezier);
  if (enabled.empty()) throw ConfigError("no transform kind enabled");

  Rng rng(seed);
  TransformSpec spec;
  spec.kind = enabled[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(enabled.size()) - 1))];
  const std::array<std::int64_t, 3> extents{grid.z, grid.y, grid.x};
  switch (spec.kind) {
    case TransformKind::Inpaint: spec.boxes = sample_boxes(rng, extents, true); break;
    case TransformKind::Shuffle: spec.boxes = sample_boxes(rng, extents, false); break;
    case TransformKind::Bezier:
      spec.p1 = {rng.uniform(), rng.uniform()};
      spec.p2 = {rng.uniform(), rng.uniform()};
      if (spec.p1[0] > spec.p2[0]) std::swap(spec.p1, spec.p2);
      break;
  }
  spec.seed = rng.next_u64();
  return spec;
}

std::vector<TransformSpec> sample_chain(std::uint64_t seed, const geometry::VolumeGrid& grid,
                                        const TransformConfig& cfg) {
  if (cfg.chain_length < 1) throw ConfigError("chain_length must be >= 1");
  Rng rng(seed);
  std::vector<TransformSpec> out;
  for (int i = 0; i < cfg.chain_length; ++i) out.push_back(sample_transform(rng.next_u64(), grid, cfg));
  return out;
}

std::vector<std::array<double, 2>> bezier_table(const TransformSpec& spec) {
  std::vector<std::array<double, 2>> table(kBezierSamples);
  for (std::size_t i = 0; i < kBezierSamples; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(kBezierSamples - 1);
    const double u = 1.0 - t;
    const double b1 = 3.0 * u * u * t, b2 = 3.0 * u * t * t, b3 = t * t * t;
    table[i] = {b1 * spec.p1[0] + b2 * spec.p2[0] + b3, b1 * spec.p1[1] + b2 * spec.p2[1] + b3};
  }
  return table;
}

double bezier_lookup(const std::vector<std::array<double, 2>>& table, double x) {
  if (x <= table.front()[0]) return table.front()[1];
  if (x >= table.back()[0]) return table.back()[1];
  const auto it = std::lower_bound(table.begin(), table.end(), x,
                                   [](const std::array<double, 2>& p, double v) { return p[0] < v; });
  const auto& hi = *it;
  const auto& lo = *(it - 1);
  const double dx = hi[0] - lo[0];
  if (dx <= 0.0) return hi[1];
  const double w = (x - lo[0]) / dx;
  return std::clamp(lo[1] + w * (hi[1] - lo[1]), 0.0, 1.0);
}

Volume apply_transform(const Volume& volume, const TransformSpec& spec) {
  const geometry::VolumeGrid grid = volume.grid();
  spec.validate(grid);
  for (double v : volume.data.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw NumericalError("transform input intensities must lie in [0, 1]");
  }
  Volume out = volume;
  const std::size_t vox = grid.voxels();
  const auto channels = static_cast<std::size_t>(volume.channels());
  Rng rng(spec.seed);
  switch (spec.kind) {
    case TransformKind::Inpaint:
      for (const Box& b : spec.boxes) {
        for_each_voxel(b, grid, [&](std::size_t i) {
          for (std::size_t c = 0; c < channels; ++c) out.data[c * vox + i] = rng.uniform();
        });
      }
      break;
    case TransformKind::Shuffle:
      for (const Box& b : spec.boxes) {
        std::vector<std::size_t> index;
        for_each_voxel(b, grid, [&](std::size_t i) { index.push_back(i); });
        std::vector<std::size_t> perm(index.size());
        for (std::size_t k = 0; k < perm.size(); ++k) perm[k] = k;
        for (std::size_t k = perm.size(); k > 1; --k) {
          const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(k) - 1));
          std::swap(perm[k - 1], perm[j]);
        }
        for (std::size_t c = 0; c < channels; ++c) {
          std::vector<double> values(index.size());
          for (std::size_t k = 0; k < index.size(); ++k) values[k] = out.data[c * vox + index[perm[k]]];
          for (std::size_t k = 0; k < index.size(); ++k) out.data[c * vox + index[k]] = values[k];
        }
      }
      break;
    case TransformKind::Bezier: {
      const auto table = bezier_table(spec);
      for (double& v : out.data.data()) v = bezier_lookup(table, v);
      break;
    }
  }
  return out;
}

Volume apply_chain(const Volume& volume, const std::vector<TransformSpec>& chain) {
  Volume out = volume;
  for (const auto& spec : chain) out = apply_transform(out, spec);
  return out;
}

}  // namespace gvsl::transforms
