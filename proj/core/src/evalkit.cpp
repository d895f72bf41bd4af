#include "gvsl/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

#include "gvsl/errors.hpp"
#include "gvsl/ops.hpp"
#include "gvsl/optim.hpp"
#include "gvsl/rng.hpp"

namespace gvsl::evalkit {
namespace {

using geometry::VolumeGrid;

void check_labels(std::span<const std::int32_t> labels, int classes) {
  for (const std::int32_t l : labels) {
    if (l < 0 || l >= classes) {
      throw ShapeError("label " + std::to_string(l) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Argmax over classes of logits [K, Z, Y, X] per voxel; ties go to the lower class.
std::vector<std::int32_t> argmax_labels(const Tensor& logits, std::int64_t k, std::size_t nv) {
  std::vector<std::int32_t> out(nv, 0);
  const double* d = logits.data().data();
  for (std::size_t i = 0; i < nv; ++i) {
    double best = d[i];
    for (std::int64_t c = 1; c < k; ++c) {
      const double v = d[static_cast<std::size_t>(c) * nv + i];
      if (v > best) {
        best = v;
        out[i] = static_cast<std::int32_t>(c);
      }
    }
  }
  return out;
}

// logits [K, Z, Y, X] = W [K, C] * features [C, Z, Y, X] + b.
Tensor apply_probe(const Tensor& w, const Tensor& b, const Tensor& features) {
  const std::int64_t k = w.dim(0);
  const std::int64_t c = w.dim(1);
  const std::size_t nv = features.numel() / static_cast<std::size_t>(c);
  Tensor out({k, features.dim(1), features.dim(2), features.dim(3)});
  const double* f = features.data().data();
  double* o = out.data().data();
  for (std::int64_t ki = 0; ki < k; ++ki) {
    double* row = o + static_cast<std::size_t>(ki) * nv;
    std::fill_n(row, nv, b[static_cast<std::size_t>(ki)]);
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const double wv = w[static_cast<std::size_t>(ki * c + ci)];
      const double* fr = f + static_cast<std::size_t>(ci) * nv;
      for (std::size_t i = 0; i < nv; ++i) row[i] += wv * fr[i];
    }
  }
  return out;
}

Tensor stack_features(const std::vector<Tensor>& feats) {
  Shape s{static_cast<std::int64_t>(feats.size())};
  s.insert(s.end(), feats.front().shape().begin(), feats.front().shape().end());
  Tensor out(s);
  std::size_t off = 0;
  for (const Tensor& f : feats) {
    std::copy(f.data().begin(), f.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += f.numel();
  }
  return out;
}

Tensor stack_labels(const std::vector<LabelledVolume>& vols) {
  const VolumeGrid g = vols.front().labels.grid;
  Tensor out({static_cast<std::int64_t>(vols.size()), g.z, g.y, g.x});
  std::size_t i = 0;
  for (const auto& v : vols) {
    for (const std::int32_t l : v.labels.labels) out[i++] = static_cast<double>(l);
  }
  return out;
}

bool interior(const LabelGrid& lg, std::int64_t x, std::int64_t y, std::int64_t z) {
  const VolumeGrid& g = lg.grid;
  if (x <= 0 || y <= 0 || z <= 0 || x >= g.x - 1 || y >= g.y - 1 || z >= g.z - 1) return false;
  const std::int32_t l = lg.at(x, y, z);
  return lg.at(x - 1, y, z) == l && lg.at(x + 1, y, z) == l && lg.at(x, y - 1, z) == l &&
         lg.at(x, y + 1, z) == l && lg.at(x, y, z - 1) == l && lg.at(x, y, z + 1) == l;
}

// Cosine between voxel i of image a and voxel j of image b.
double cross_cosine(const Tensor& fa, const Tensor& fb, std::size_t nv, std::size_t i, std::size_t j) {
  const std::int64_t c = fa.dim(0);
  double dot = 0.0;
  double ni = 0.0;
  double nj = 0.0;
  const double* a = fa.data().data();
  const double* b = fb.data().data();
  for (std::int64_t k = 0; k < c; ++k) {
    const double u = a[static_cast<std::size_t>(k) * nv + i];
    const double v = b[static_cast<std::size_t>(k) * nv + j];
    dot += u * v;
    ni += u * u;
    nj += v * v;
  }
  if (ni == 0.0 || nj == 0.0) return 0.0;
  return dot / std::sqrt(ni * nj);
}

}  // namespace

DiceReport dice(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth, int classes) {
  if (classes < 1) throw ConfigError("dice needs at least one class");
  if (pred.size() != truth.size()) throw ShapeError("dice: label grids differ in size");
  check_labels(pred, classes);
  check_labels(truth, classes);
  const auto k = static_cast<std::size_t>(classes);
  std::vector<std::size_t> np(k, 0), nt(k, 0), both(k, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto p = static_cast<std::size_t>(pred[i]);
    const auto t = static_cast<std::size_t>(truth[i]);
    ++np[p];
    ++nt[t];
    if (p == t) ++both[p];
  }
  DiceReport r;
  r.per_class.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t denom = np[c] + nt[c];
    r.per_class[c] = denom == 0 ? 1.0 : 2.0 * static_cast<double>(both[c]) / static_cast<double>(denom);
  }
  if (k > 1) {
    r.mean_foreground = std::accumulate(r.per_class.begin() + 1, r.per_class.end(), 0.0) / static_cast<double>(k - 1);
  }
  return r;
}

DiceReport dice(const LabelGrid& pred, const LabelGrid& truth, int classes) {
  if (!(pred.grid == truth.grid)) throw ShapeError("dice: label grids differ");
  return dice(pred.labels, truth.labels, classes);
}

void ProbeConfig::validate() const {
  if (iterations < 1) throw ConfigError("probe iterations must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("probe learning rate must be finite and >= 0");
  if (classes != 0 && classes < 2) throw ConfigError("probe needs at least two classes");
}

nlohmann::json ProbeConfig::to_json() const {
  return {{"iterations", iterations}, {"lr", lr}, {"classes", classes}, {"frozen", frozen}, {"seed", seed}};
}

ProbeConfig ProbeConfig::from_json(const nlohmann::json& j) {
  ProbeConfig c;
  c.iterations = j.value("iterations", c.iterations);
  c.lr = j.value("lr", c.lr);
  c.classes = j.value("classes", c.classes);
  c.frozen = j.value("frozen", c.frozen);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

std::vector<LabelledVolume> load_split(const io::DatasetManifest& manifest, const std::string& split) {
  std::vector<LabelledVolume> out;
  for (const io::ManifestEntry* e : manifest.split(split)) {
    out.push_back({io::read_volume(manifest.resolve(e->volume)), io::read_labels(manifest.resolve(e->labels))});
  }
  return out;
}

ProbeResult linear_probe(const models::ModelWeights& weights, const std::vector<LabelledVolume>& train,
                         const std::vector<LabelledVolume>& test, const ProbeConfig& cfg) {
  cfg.validate();
  if (train.empty() || test.empty()) throw ConfigError("probe needs non-empty train and test sets");
  const VolumeGrid grid = train.front().labels.grid;
  for (const auto* set : {&train, &test}) {
    for (const auto& v : *set) {
      if (!(v.labels.grid == grid) || !(v.volume.grid() == grid)) throw ShapeError("probe volumes must share one grid");
    }
  }
  int classes = cfg.classes;
  if (classes == 0) {
    std::int32_t hi = 0;
    for (const auto* set : {&train, &test}) {
      for (const auto& v : *set) hi = std::max(hi, *std::max_element(v.labels.labels.begin(), v.labels.labels.end()));
    }
    classes = std::max(2, hi + 1);
  }
  for (const auto* set : {&train, &test}) {
    for (const auto& v : *set) check_labels(v.labels.labels, classes);
  }

  const std::int64_t cl = weights.arch.local_channels();
  const std::int64_t k = classes;
  const std::size_t nv = grid.voxels();
  ProbeResult res;
  res.classes = classes;
  res.train_volumes = train.size();
  res.test_volumes = test.size();

  // Probe weights start at zero, so every class begins equally likely.
  Tensor w({k, cl, 1, 1, 1});
  Tensor b({k});
  models::ModelWeights tuned = weights;

  if (cfg.frozen) {
    std::vector<Tensor> feats;
    feats.reserve(train.size());
    for (const auto& v : train) feats.push_back(models::local_features(weights, v.volume.data));
    ad::Graph g;
    const ad::Var x = g.constant(stack_features(feats));
    const ad::Var vw = g.parameter("probe.w", w.shape());
    const ad::Var vb = g.parameter("probe.b", b.shape());
    const ad::Var loss = ad::softmax_cross_entropy(g, ad::conv3d(g, x, vw, vb), stack_labels(train));
    ad::Bindings bind{{"probe.w", w}, {"probe.b", b}};
    ad::AdamState sw = ad::AdamState::zeros_like(w);
    ad::AdamState sb = ad::AdamState::zeros_like(b);
    for (int it = 0; it < cfg.iterations; ++it) {
      g.evaluate(bind);
      res.loss_trace.push_back(g.value(loss).item());
      const ad::TensorMap grads = g.backpropagate(loss);
      ad::adam_update(bind.at("probe.w"), grads.at("probe.w"), sw, cfg.lr);
      ad::adam_update(bind.at("probe.b"), grads.at("probe.b"), sb, cfg.lr);
    }
    w = bind.at("probe.w");
    b = bind.at("probe.b");
  } else {
    // Fine-tuning: one training volume per step in a seeded shuffled order,
    // Adam on the probe and on every backbone parameter. Labels are baked
    // into the loss node, so each step builds its own graph.
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(cfg.seed);
    std::map<std::string, ad::AdamState> states;
    std::size_t cursor = order.size();
    for (int it = 0; it < cfg.iterations; ++it) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) {
          const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
          std::swap(order[i - 1], order[j]);
        }
        cursor = 0;
      }
      const LabelledVolume& v = train[order[cursor++]];
      Tensor labels({1, grid.z, grid.y, grid.x});
      for (std::size_t i = 0; i < nv; ++i) labels[i] = static_cast<double>(v.labels.labels[i]);

      ad::Graph g;
      const models::ParamVars p = models::register_parameters(g, tuned);
      const ad::Var x = g.input("x", {1, 1, grid.z, grid.y, grid.x});
      const ad::Var vw = g.parameter("probe.w", w.shape());
      const ad::Var vb = g.parameter("probe.b", b.shape());
      const models::BackboneOutputs out = models::backbone_forward(g, p, x, tuned.arch);
      const ad::Var loss = ad::softmax_cross_entropy(g, ad::conv3d(g, out.local, vw, vb), std::move(labels));
      ad::Bindings bind{{"probe.w", w}, {"probe.b", b}, {"x", v.volume.batched()}};
      models::bind_weights(bind, tuned);
      g.evaluate(bind);
      res.loss_trace.push_back(g.value(loss).item());
      const ad::TensorMap grads = g.backpropagate(loss);
      for (const auto& [name, grad] : grads) {
        const bool probe = name == "probe.w" || name == "probe.b";
        if (!probe && (!tuned.params.contains(name) || models::namespace_of(name) != models::Namespace::Backbone)) {
          continue;
        }
        auto st = states.try_emplace(name, ad::AdamState::zeros_like(grad)).first;
        Tensor& target = name == "probe.w" ? w : name == "probe.b" ? b : tuned.params.at(name);
        ad::adam_update(target, grad, st->second, cfg.lr);
      }
    }
  }

  res.dice.per_class.assign(static_cast<std::size_t>(k), 0.0);
  bool any_foreground = false;
  const Tensor w2 = w.reshaped({k, cl});
  for (const auto& v : test) {
    const Tensor logits = apply_probe(w2, b, models::local_features(tuned, v.volume.data));
    const std::vector<std::int32_t> pred = argmax_labels(logits, k, nv);
    const DiceReport d = dice(pred, v.labels.labels, classes);
    for (std::size_t c = 0; c < d.per_class.size(); ++c) res.dice.per_class[c] += d.per_class[c];
    any_foreground = any_foreground || std::any_of(v.labels.labels.begin(), v.labels.labels.end(),
                                                   [](std::int32_t l) { return l != 0; });
  }
  for (auto& d : res.dice.per_class) d /= static_cast<double>(test.size());
  res.dice.mean_foreground =
      std::accumulate(res.dice.per_class.begin() + 1, res.dice.per_class.end(), 0.0) / static_cast<double>(k - 1);
  if (!any_foreground) {
    res.degenerate = true;
    res.dice.mean_foreground = 0.0;
  }
  return res;
}

ProbeResult linear_probe(const models::ModelWeights& weights, const io::DatasetManifest& manifest,
                         const ProbeConfig& cfg) {
  ProbeConfig c = cfg;
  if (c.classes == 0 && manifest.config.contains("regions")) c.classes = manifest.config.at("regions").get<int>() + 1;
  return linear_probe(weights, load_split(manifest, "train"), load_split(manifest, "test"), c);
}

RegistrationReport registration_eval(const geometry::Dvf& pred, const LabelGrid& moving_labels,
                                     const LabelGrid& fixed_labels, int classes) {
  const VolumeGrid grid = pred.grid();
  if (!(moving_labels.grid == grid) || !(fixed_labels.grid == grid)) {
    throw ShapeError("registration_eval: field and label grids differ");
  }
  RegistrationReport r;
  const std::vector<std::int32_t> warped = geometry::warp_labels_nearest(moving_labels.labels, grid, pred);
  r.warped_dice = dice(warped, fixed_labels.labels, classes);

  const Tensor jac = geometry::jacobian_determinant(pred);
  std::size_t negative = 0;
  for (const double v : jac.data()) negative += v <= 0.0 ? 1 : 0;
  r.negative_jacobian_percent = 100.0 * static_cast<double>(negative) / static_cast<double>(jac.numel());

  const std::size_t nv = grid.voxels();
  std::size_t count = 0;
  for (std::size_t i = 0; i < nv; ++i) {
    if (fixed_labels.labels[i] == 0) continue;
    ++count;
    for (std::size_t c = 0; c < 3; ++c) r.mean_displacement[c] += pred.field[c * nv + i];
  }
  if (count > 0) {
    for (auto& m : r.mean_displacement) m /= static_cast<double>(count);
  }
  return r;
}

RegistrationReport registration_eval(const geometry::Dvf& pred, const phantom::PhantomPair& pair, int classes) {
  RegistrationReport r = registration_eval(pred, pair.moving_labels, pair.fixed_labels, classes);
  const VolumeGrid grid = pred.grid();
  if (!(pair.gt.grid() == grid)) throw ShapeError("registration_eval: predicted and ground-truth grids differ");
  const std::size_t nv = grid.voxels();
  r.has_ground_truth = true;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < nv; ++i) {
    if (pair.fixed_labels.labels[i] == 0) continue;
    double sq = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double d = pred.field[c * nv + i] - pair.gt.field[c * nv + i];
      sq += d * d;
    }
    const double e = std::sqrt(sq);
    total += e;
    r.max_endpoint_error = std::max(r.max_endpoint_error, e);
    ++count;
  }
  r.mean_endpoint_error = count > 0 ? total / static_cast<double>(count) : 0.0;
  return r;
}

ClusteringReport clustering_contrast(const std::vector<FeatureImage>& images, int classes, int samples_per_class,
                                     std::uint64_t seed) {
  if (images.size() < 2) throw ConfigError("clustering contrast needs at least two images");
  if (classes < 3) throw ConfigError("clustering contrast needs at least two foreground classes");
  if (samples_per_class < 1) throw ConfigError("samples per class must be >= 1");
  const VolumeGrid grid = images.front().labels.grid;
  for (const auto& im : images) {
    if (!(im.labels.grid == grid) || im.features.rank() != 4 || im.features.dim(1) != grid.z ||
        im.features.dim(2) != grid.y || im.features.dim(3) != grid.x ||
        im.features.dim(0) != images.front().features.dim(0)) {
      throw ShapeError("clustering contrast: feature maps and labels must share one grid");
    }
  }
  const std::size_t nv = grid.voxels();

  // samples[image][class] = voxel indices.
  Rng rng(seed);
  std::vector<std::vector<std::vector<std::size_t>>> samples(images.size());
  std::vector<bool> usable(static_cast<std::size_t>(classes), true);
  usable[0] = false;
  for (std::size_t m = 0; m < images.size(); ++m) {
    std::vector<std::vector<std::size_t>> pool(static_cast<std::size_t>(classes));
    const LabelGrid& lg = images[m].labels;
    check_labels(lg.labels, classes);
    std::size_t i = 0;
    for (std::int64_t z = 0; z < grid.z; ++z) {
      for (std::int64_t y = 0; y < grid.y; ++y) {
        for (std::int64_t x = 0; x < grid.x; ++x, ++i) {
          if (lg.labels[i] != 0 && interior(lg, x, y, z)) pool[static_cast<std::size_t>(lg.labels[i])].push_back(i);
        }
      }
    }
    for (std::size_t c = 1; c < pool.size(); ++c) {
      auto& p = pool[c];
      if (p.size() < 2) usable[c] = false;
      const std::size_t take = std::min(p.size(), static_cast<std::size_t>(samples_per_class));
      for (std::size_t j = 0; j < take; ++j) {
        const auto pick = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(j),
                                                                   static_cast<std::int64_t>(p.size()) - 1));
        std::swap(p[j], p[pick]);
      }
      p.resize(take);
    }
    samples[m] = std::move(pool);
  }

  ClusteringReport r;
  for (int c = 1; c < classes; ++c) {
    if (!usable[static_cast<std::size_t>(c)]) r.skipped_classes.push_back(c);
  }
  double same = 0.0;
  double cross = 0.0;
  for (std::size_t m = 0; m + 1 < images.size(); ++m) {
    const Tensor& fa = images[m].features;
    const Tensor& fb = images[m + 1].features;
    for (std::size_t ca = 1; ca < usable.size(); ++ca) {
      if (!usable[ca]) continue;
      for (std::size_t cb = 1; cb < usable.size(); ++cb) {
        if (!usable[cb]) continue;
        for (const std::size_t i : samples[m][ca]) {
          for (const std::size_t j : samples[m + 1][cb]) {
            const double s = cross_cosine(fa, fb, nv, i, j);
            if (ca == cb) {
              same += s;
              ++r.same_pairs;
            } else {
              cross += s;
              ++r.cross_pairs;
            }
          }
        }
      }
    }
  }
  if (r.same_pairs == 0 || r.cross_pairs == 0) {
    throw ConfigError("clustering contrast: fewer than two usable foreground classes");
  }
  r.same_label_mean = same / static_cast<double>(r.same_pairs);
  r.cross_label_mean = cross / static_cast<double>(r.cross_pairs);
  r.ratio = r.cross_label_mean > 0.0 ? r.same_label_mean / r.cross_label_mean : kInfiniteRatio;
  return r;
}

ClusteringReport clustering_contrast(const models::ModelWeights& weights, const std::vector<LabelledVolume>& images,
                                     int classes, int samples_per_class, std::uint64_t seed) {
  std::vector<FeatureImage> feats;
  feats.reserve(images.size());
  for (const auto& v : images) feats.push_back({models::local_features(weights, v.volume.data), v.labels});
  return clustering_contrast(feats, classes, samples_per_class, seed);
}

std::string to_report(const DiceReport& d, const std::string& prefix) {
  std::string s;
  for (std::size_t c = 0; c < d.per_class.size(); ++c) {
    s += prefix + ".class" + std::to_string(c) + "=" + fmt(d.per_class[c]) + "\n";
  }
  s += prefix + ".mean_foreground=" + fmt(d.mean_foreground) + "\n";
  return s;
}

std::string to_report(const ProbeResult& r) {
  std::string s = to_report(r.dice, "probe.dice");
  s += "probe.degenerate=" + std::string(r.degenerate ? "true" : "false") + "\n";
  s += "probe.classes=" + std::to_string(r.classes) + "\n";
  s += "probe.train_volumes=" + std::to_string(r.train_volumes) + "\n";
  s += "probe.test_volumes=" + std::to_string(r.test_volumes) + "\n";
  if (!r.loss_trace.empty()) {
    s += "probe.loss_first=" + fmt(r.loss_trace.front()) + "\n";
    s += "probe.loss_last=" + fmt(r.loss_trace.back()) + "\n";
  }
  return s;
}

std::string to_report(const RegistrationReport& r) {
  std::string s = to_report(r.warped_dice, "registration.dice");
  if (r.has_ground_truth) {
    s += "registration.mean_endpoint_error=" + fmt(r.mean_endpoint_error) + "\n";
    s += "registration.max_endpoint_error=" + fmt(r.max_endpoint_error) + "\n";
  }
  s += "registration.negative_jacobian_percent=" + fmt(r.negative_jacobian_percent) + "\n";
  s += "registration.mean_displacement_x=" + fmt(r.mean_displacement[0]) + "\n";
  s += "registration.mean_displacement_y=" + fmt(r.mean_displacement[1]) + "\n";
  s += "registration.mean_displacement_z=" + fmt(r.mean_displacement[2]) + "\n";
  return s;
}

std::string to_report(const ClusteringReport& r) {
  std::string s;
  s += "clustering.same_label_mean=" + fmt(r.same_label_mean) + "\n";
  s += "clustering.cross_label_mean=" + fmt(r.cross_label_mean) + "\n";
  s += "clustering.ratio=" + fmt(r.ratio) + "\n";
  s += "clustering.same_pairs=" + std::to_string(r.same_pairs) + "\n";
  s += "clustering.cross_pairs=" + std::to_string(r.cross_pairs) + "\n";
  for (const int c : r.skipped_classes) s += "clustering.skipped_class=" + std::to_string(c) + "\n";
  return s;
}

nlohmann::json to_json(const DiceReport& d) {
  return {{"per_class", d.per_class}, {"mean_foreground", d.mean_foreground}};
}

nlohmann::json to_json(const ProbeResult& r) {
  return {{"dice", to_json(r.dice)},
          {"degenerate", r.degenerate},
          {"classes", r.classes},
          {"train_volumes", r.train_volumes},
          {"test_volumes", r.test_volumes},
          {"loss_trace", r.loss_trace}};
}

nlohmann::json to_json(const RegistrationReport& r) {
  nlohmann::json j{{"warped_dice", to_json(r.warped_dice)},
                   {"negative_jacobian_percent", r.negative_jacobian_percent},
                   {"mean_displacement", r.mean_displacement}};
  if (r.has_ground_truth) {
    j["mean_endpoint_error"] = r.mean_endpoint_error;
    j["max_endpoint_error"] = r.max_endpoint_error;
  }
  return j;
}

nlohmann::json to_json(const ClusteringReport& r) {
  // JSON has no infinity; the sentinel is written as null with a flag.
  nlohmann::json j{{"same_label_mean", r.same_label_mean},
                   {"cross_label_mean", r.cross_label_mean},
                   {"ratio_infinite", std::isinf(r.ratio)},
                   {"same_pairs", r.same_pairs},
                   {"cross_pairs", r.cross_pairs},
                   {"skipped_classes", r.skipped_classes}};
  j["ratio"] = std::isinf(r.ratio) ? nlohmann::json(nullptr) : nlohmann::json(r.ratio);
  return j;
}

}  // namespace gvsl::evalkit
