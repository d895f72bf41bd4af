#include "gvsl/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "gvsl/errors.hpp"
#include "gvsl/rng.hpp"

namespace gvsl::phantom {
namespace {

using geometry::Dvf;
using geometry::VolumeGrid;

// Template geometry in units of the half-extent, relative to the grid centre.
struct Ellipsoid {
  std::array<double, 3> centre;
  std::array<double, 3> semi;
  bool contains(const std::array<double, 3>& q) const {
    double s = 0.0;
    for (int i = 0; i < 3; ++i) {
      const double d = (q[static_cast<std::size_t>(i)] - centre[static_cast<std::size_t>(i)]) /
                       semi[static_cast<std::size_t>(i)];
      s += d * d;
    }
    return s <= 1.0;
  }
};

constexpr Ellipsoid kBody{{0.0, 0.0, 0.0}, {0.66, 0.56, 0.50}};
// Inner regions are sized so the smallest one still spans a few voxels at
// extent 32, with a gap of about a voxel between the chain and the tube.
constexpr std::array<double, 3> kInnerCentre{-0.22, 0.0, 0.0};
constexpr std::array<double, 3> kInnerSemi{0.36, 0.34, 0.31};
constexpr double kInnerShrink = 0.68;
constexpr double kTubeX = 0.36, kTubeRadius = 0.14, kTubeHalfLength = 0.24;

std::int32_t template_label_at(const std::array<double, 3>& q, int regions) {
  if (!kBody.contains(q)) return 0;
  const double dx = q[0] - kTubeX;
  if (dx * dx + q[1] * q[1] <= kTubeRadius * kTubeRadius && std::abs(q[2]) <= kTubeHalfLength) return regions;
  std::int32_t label = 1;
  double f = 1.0;
  for (int k = 2; k < regions; ++k) {
    const Ellipsoid e{kInnerCentre, {kInnerSemi[0] * f, kInnerSemi[1] * f, kInnerSemi[2] * f}};
    if (!e.contains(q)) break;
    label = k;
    f *= kInnerShrink;
  }
  return label;
}


geometry::AffineParams draw_affine(Rng& rng, const PhantomConfig& cfg) {
  geometry::AffineParams p;
  for (auto& r : p.rotation) r = rng.uniform(-cfg.max_rotation, cfg.max_rotation);
  const double tmax = cfg.max_translation_frac * static_cast<double>(cfg.extent);
  for (auto& t : p.translation) t = rng.uniform(-tmax, tmax);
  for (auto& s : p.scaling) s = rng.uniform(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter);
  for (auto& sh : p.shearing) sh = rng.uniform(-cfg.max_shear, cfg.max_shear);
  return p;
}

Dvf draw_deformation(Rng& rng, const PhantomConfig& cfg, const VolumeGrid& grid) {
  Dvf d(grid);
  auto data = d.field.data();
  for (auto& v : data) v = rng.normal();
  const double sigma = cfg.deform_sigma_frac * static_cast<double>(cfg.extent);
  const std::size_t nv = grid.voxels();
  for (std::size_t c = 0; c < 3; ++c) gaussian_blur_block(data.data() + c * nv, grid, sigma);
  double peak = 0.0;
  for (std::size_t i = 0; i < nv; ++i) {
    const double ux = data[i], uy = data[nv + i], uz = data[2 * nv + i];
    peak = std::max(peak, std::sqrt(ux * ux + uy * uy + uz * uz));
  }
  const double amplitude = rng.uniform(0.5, 1.0) * cfg.deform_frac * static_cast<double>(cfg.extent);
  const double k = peak > 0.0 ? amplitude / peak : 0.0;
  for (auto& v : data) v *= k;
  return d;
}

// Trilinear sample of one field channel with coordinates clamped to the grid.
double sample_clamped(const double* channel, const VolumeGrid& grid, double x, double y, double z) {
  x = std::clamp(x, 0.0, static_cast<double>(grid.x - 1));
  y = std::clamp(y, 0.0, static_cast<double>(grid.y - 1));
  z = std::clamp(z, 0.0, static_cast<double>(grid.z - 1));
  const auto x0 = std::min<std::int64_t>(static_cast<std::int64_t>(x), grid.x - 2);
  const auto y0 = std::min<std::int64_t>(static_cast<std::int64_t>(y), grid.y - 2);
  const auto z0 = std::min<std::int64_t>(static_cast<std::int64_t>(z), grid.z - 2);
  const double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0), fz = z - static_cast<double>(z0);
  auto at = [&](std::int64_t xi, std::int64_t yi, std::int64_t zi) { return channel[(zi * grid.y + yi) * grid.x + xi]; };
  const double c00 = at(x0, y0, z0) * (1 - fx) + at(x0 + 1, y0, z0) * fx;
  const double c10 = at(x0, y0 + 1, z0) * (1 - fx) + at(x0 + 1, y0 + 1, z0) * fx;
  const double c01 = at(x0, y0, z0 + 1) * (1 - fx) + at(x0 + 1, y0, z0 + 1) * fx;
  const double c11 = at(x0, y0 + 1, z0 + 1) * (1 - fx) + at(x0 + 1, y0 + 1, z0 + 1) * fx;
  return (c00 * (1 - fy) + c10 * fy) * (1 - fz) + (c01 * (1 - fy) + c11 * fy) * fz;
}

std::set<std::int32_t> present_labels(const LabelGrid& labels) {
  return {labels.labels.begin(), labels.labels.end()};
}

}  // namespace

void PhantomConfig::validate() const {
  if (extent < 16) throw ConfigError("phantom extent must be >= 16, got " + std::to_string(extent));
  if (regions < 2 || regions > 6) throw ConfigError("phantom regions must lie in [2, 6], got " + std::to_string(regions));
  auto in = [](double v, double lo, double hi) { return std::isfinite(v) && v >= lo && v <= hi; };
  if (!in(max_rotation, 0, 1) || !in(scale_jitter, 0, 0.5) || !in(max_translation_frac, 0, 0.5) ||
      !in(max_shear, 0, 0.5) || !in(deform_frac, 0, 0.5) || !in(deform_sigma_frac, 0.01, 1) ||
      !in(intensity_jitter, 0, 0.5) || !in(noise_sigma, 0, 0.5) || !in(edge_sigma, 0, 5)) {
    throw ConfigError("phantom jitter parameter out of range");
  }
  if (max_attempts < 1) throw ConfigError("phantom max_attempts must be >= 1");
  if (!in(train_ratio, 0, 1) || !in(val_ratio, 0, 1) || train_ratio + val_ratio > 1.0) {
    throw ConfigError("split ratios must be non-negative and sum to at most 1");
  }
}

nlohmann::json PhantomConfig::to_json() const {
  return {{"extent", extent},
          {"regions", regions},
          {"max_rotation", max_rotation},
          {"scale_jitter", scale_jitter},
          {"max_translation_frac", max_translation_frac},
          {"max_shear", max_shear},
          {"deform_frac", deform_frac},
          {"deform_sigma_frac", deform_sigma_frac},
          {"intensity_jitter", intensity_jitter},
          {"noise_sigma", noise_sigma},
          {"edge_sigma", edge_sigma},
          {"max_attempts", max_attempts},
          {"train_ratio", train_ratio},
          {"val_ratio", val_ratio}};
}

PhantomConfig PhantomConfig::from_json(const nlohmann::json& j) {
  PhantomConfig c;
  c.extent = j.value("extent", c.extent);
  c.regions = j.value("regions", c.regions);
  c.max_rotation = j.value("max_rotation", c.max_rotation);
  c.scale_jitter = j.value("scale_jitter", c.scale_jitter);
  c.max_translation_frac = j.value("max_translation_frac", c.max_translation_frac);
  c.max_shear = j.value("max_shear", c.max_shear);
  c.deform_frac = j.value("deform_frac", c.deform_frac);
  c.deform_sigma_frac = j.value("deform_sigma_frac", c.deform_sigma_frac);
  c.intensity_jitter = j.value("intensity_jitter", c.intensity_jitter);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.edge_sigma = j.value("edge_sigma", c.edge_sigma);
  c.max_attempts = j.value("max_attempts", c.max_attempts);
  c.train_ratio = j.value("train_ratio", c.train_ratio);
  c.val_ratio = j.value("val_ratio", c.val_ratio);
  return c;
}

LabelGrid template_labels(const PhantomConfig& cfg) {
  cfg.validate();
  const VolumeGrid grid{cfg.extent, cfg.extent, cfg.extent};
  const auto c = grid.center();
  const double half = static_cast<double>(cfg.extent) / 2.0;
  LabelGrid out{grid, std::vector<std::int32_t>(grid.voxels())};
  std::size_t i = 0;
  for (std::int64_t z = 0; z < grid.z; ++z) {
    for (std::int64_t y = 0; y < grid.y; ++y) {
      for (std::int64_t x = 0; x < grid.x; ++x, ++i) {
        const std::array<double, 3> q{(static_cast<double>(x) - c[0]) / half, (static_cast<double>(y) - c[1]) / half,
                                      (static_cast<double>(z) - c[2]) / half};
        out.labels[i] = template_label_at(q, cfg.regions);
      }
    }
  }
  return out;
}

std::set<std::pair<std::int32_t, std::int32_t>> region_adjacency(const LabelGrid& labels) {
  std::set<std::pair<std::int32_t, std::int32_t>> edges;
  const auto& g = labels.grid;
  auto note = [&](std::int32_t a, std::int32_t b) {
    if (a != b) edges.emplace(std::min(a, b), std::max(a, b));
  };
  for (std::int64_t z = 0; z < g.z; ++z) {
    for (std::int64_t y = 0; y < g.y; ++y) {
      for (std::int64_t x = 0; x < g.x; ++x) {
        const std::int32_t v = labels.at(x, y, z);
        if (x + 1 < g.x) note(v, labels.at(x + 1, y, z));
        if (y + 1 < g.y) note(v, labels.at(x, y + 1, z));
        if (z + 1 < g.z) note(v, labels.at(x, y, z + 1));
      }
    }
  }
  return edges;
}

Phantom generate_phantom(std::uint64_t seed, const PhantomConfig& cfg) {
  cfg.validate();
  const LabelGrid tmpl = template_labels(cfg);
  const auto tmpl_present = present_labels(tmpl);
  if (static_cast<int>(tmpl_present.size()) != cfg.regions + 1) {
    throw ConfigError("extent " + std::to_string(cfg.extent) + " is too small to resolve " +
                      std::to_string(cfg.regions) + " regions");
  }
  const auto tmpl_edges = region_adjacency(tmpl);
  const VolumeGrid grid = tmpl.grid;
  Rng rng(seed);

  Phantom ph;
  ph.seed = seed;
  bool accepted = false;
  for (int attempt = 0; attempt < cfg.max_attempts && !accepted; ++attempt) {
    ph.gt_affine = draw_affine(rng, cfg);
    ph.gt_deform = draw_deformation(rng, cfg, grid);
    const Tensor jac = geometry::jacobian_determinant(ph.gt_deform);
    if (std::any_of(jac.data().begin(), jac.data().end(), [](double d) { return !(d > 0.0); })) continue;
    ph.field = geometry::compose_dvf(geometry::affine_matrix_from_params(ph.gt_affine), ph.gt_deform);
    ph.labels = LabelGrid{grid, geometry::warp_labels_nearest(tmpl.labels, grid, ph.field)};
    if (present_labels(ph.labels) != tmpl_present) continue;
    if (region_adjacency(ph.labels) != tmpl_edges) continue;
    accepted = true;
  }
  if (!accepted) {
    throw NumericalError("phantom seed " + std::to_string(seed) + ": no valid deformation after " +
                         std::to_string(cfg.max_attempts) + " attempts");
  }

  // Per-region intensities: evenly spaced bases with independent jitter.
  std::vector<double> intensity(static_cast<std::size_t>(cfg.regions + 1));
  intensity[0] = 0.1;
  for (int k = 1; k <= cfg.regions; ++k) {
    intensity[static_cast<std::size_t>(k)] = 0.3 + 0.55 * (k - 1) / std::max(1, cfg.regions - 1);
  }
  for (auto& v : intensity) v += rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter);

  Tensor img({1, grid.z, grid.y, grid.x});
  for (std::size_t i = 0; i < grid.voxels(); ++i) {
    img[i] = intensity[static_cast<std::size_t>(ph.labels.labels[i])];
  }
  gaussian_blur_block(img.data().data(), grid, cfg.edge_sigma);
  for (auto& v : img.data()) v = std::clamp(v + cfg.noise_sigma * rng.normal(), 0.0, 1.0);
  ph.volume = Volume(std::move(img));
  return ph;
}

PhantomPair translated_pair(const Phantom& moving, const std::array<double, 3>& t) {
  const VolumeGrid grid = moving.volume.grid();
  Dvf shift(grid);
  const std::size_t nv = grid.voxels();
  for (std::size_t c = 0; c < 3; ++c) {
    std::fill_n(shift.field.data().begin() + static_cast<std::ptrdiff_t>(c * nv), nv, t[c]);
  }
  PhantomPair pair;
  pair.moving = moving.volume;
  pair.moving_labels = moving.labels;
  pair.fixed = Volume(geometry::warp_trilinear(moving.volume.data, shift), moving.volume.spacing);
  pair.fixed_labels = LabelGrid{grid, geometry::warp_labels_nearest(moving.labels.labels, grid, shift)};
  pair.gt = std::move(shift);
  return pair;
}

PhantomPair phantom_pair(const Phantom& moving, const Phantom& fixed, int iterations) {
  const VolumeGrid grid = moving.volume.grid();
  if (!(fixed.volume.grid() == grid)) throw ShapeError("phantom pair grids differ");
  const std::size_t nv = grid.voxels();
  const double* fa = moving.field.field.data().data();
  const double* fb = fixed.field.field.data().data();
  Dvf gt(grid);
  double* u = gt.field.data().data();
  std::size_t i = 0;
  for (std::int64_t z = 0; z < grid.z; ++z) {
    for (std::int64_t y = 0; y < grid.y; ++y) {
      for (std::int64_t x = 0; x < grid.x; ++x, ++i) {
        // Solve p + u + psi_A(p + u) = p + psi_B(p) for u.
        std::array<double, 3> v{fb[i] - fa[i], fb[nv + i] - fa[nv + i], fb[2 * nv + i] - fa[2 * nv + i]};
        for (int it = 0; it < iterations; ++it) {
          const double px = static_cast<double>(x) + v[0];
          const double py = static_cast<double>(y) + v[1];
          const double pz = static_cast<double>(z) + v[2];
          for (std::size_t c = 0; c < 3; ++c) {
            v[c] = fb[c * nv + i] - sample_clamped(fa + c * nv, grid, px, py, pz);
          }
        }
        for (std::size_t c = 0; c < 3; ++c) u[c * nv + i] = v[c];
      }
    }
  }
  PhantomPair pair;
  pair.moving = moving.volume;
  pair.fixed = fixed.volume;
  pair.moving_labels = moving.labels;
  pair.fixed_labels = fixed.labels;
  pair.gt = std::move(gt);
  return pair;
}

std::array<int, 3> split_sizes(int count, const PhantomConfig& cfg) {
  const int train = static_cast<int>(std::floor(cfg.train_ratio * count));
  const int val = static_cast<int>(std::floor(cfg.val_ratio * count));
  return {train, val, count - train - val};
}

io::DatasetManifest generate_dataset(std::uint64_t seed, int count, const PhantomConfig& cfg,
                                     const std::filesystem::path& out_dir) {
  if (count < 2) throw ConfigError("dataset count must be >= 2");
  cfg.validate();
  const auto sizes = split_sizes(count, cfg);
  io::DatasetManifest manifest;
  manifest.seed = seed;
  manifest.config = cfg.to_json();
  manifest.root = out_dir;
  Rng seeds(seed);
  for (int i = 0; i < count; ++i) {
    const std::uint64_t s = seeds.next_u64();
    const Phantom ph = generate_phantom(s, cfg);
    char id[32];
    std::snprintf(id, sizeof id, "phantom_%03d", i);
    io::ManifestEntry e;
    e.id = id;
    e.volume = e.id + ".gvol";
    e.labels = e.id + "_labels.gvol";
    e.gt_dvf = e.id + "_field.gvol";
    e.gt_affine = ph.gt_affine;
    e.seed = s;
    e.split = i < sizes[0] ? "train" : i < sizes[0] + sizes[1] ? "val" : "test";
    io::write_volume(out_dir / e.volume, ph.volume);
    io::write_labels(out_dir / e.labels, ph.labels);
    io::write_dvf(out_dir / e.gt_dvf, ph.field);
    e.checksums = {{"volume", io::file_checksum(out_dir / e.volume)},
                   {"labels", io::file_checksum(out_dir / e.labels)},
                   {"gt_dvf", io::file_checksum(out_dir / e.gt_dvf)}};
    manifest.entries.push_back(std::move(e));
  }
  io::write_manifest(out_dir / "manifest.json", manifest);
  return manifest;
}

Phantom load_phantom(const io::DatasetManifest& manifest, const io::ManifestEntry& entry) {
  Phantom ph;
  ph.volume = io::read_volume(manifest.resolve(entry.volume));
  ph.labels = io::read_labels(manifest.resolve(entry.labels));
  ph.field = io::read_dvf(manifest.resolve(entry.gt_dvf));
  ph.gt_affine = entry.gt_affine;
  ph.seed = entry.seed;
  if (!(ph.labels.grid == ph.volume.grid()) || !(ph.field.grid() == ph.volume.grid())) {
    throw FormatError("entry " + entry.id + ": volume, labels and field grids differ");
  }
  return ph;
}

}  // namespace gvsl::phantom
