#include "gvsl/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "gvsl/errors.hpp"
#include "gvsl/ops.hpp"
#include "gvsl/phantom.hpp"

namespace gvsl::trainer {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  if (batch < 1) throw ConfigError("batch size must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and non-negative");
  if (warmup_restoration_iters < 0) throw ConfigError("warmup iterations must be >= 0");
  if (warmup_restoration_iters > 0 && !restoration) {
    throw ConfigError("a restoration warmup needs the restoration loss enabled");
  }
  if (checkpoint_every < 0) throw ConfigError("checkpoint cadence must be >= 0");
  if (loss.ncc_window < 1 || loss.ncc_window % 2 == 0) throw ConfigError("ncc window must be odd and positive");
  if (!(loss.ncc_eps > 0.0) || !(loss.smooth_weight >= 0.0)) throw ConfigError("loss weights out of range");
  if (!transforms.inpaint && !transforms.shuffle && !transforms.bezier) {
    throw ConfigError("at least one appearance transform kind must be enabled");
  }
  if (transforms.chain_length < 1) throw ConfigError("transform chain length must be >= 1");
  arch.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"iterations", iterations},
          {"batch", batch},
          {"lr", lr},
          {"ncc_window", loss.ncc_window},
          {"ncc_eps", loss.ncc_eps},
          {"smooth_weight", loss.smooth_weight},
          {"warmup_restoration_iters", warmup_restoration_iters},
          {"restoration", restoration},
          {"smooth_on_fused", smooth_on_fused},
          {"seed", seed},
          {"checkpoint_every", checkpoint_every},
          {"arch", arch.to_json()},
          {"transforms",
           {{"inpaint", transforms.inpaint},
            {"shuffle", transforms.shuffle},
            {"bezier", transforms.bezier},
            {"chain_length", transforms.chain_length}}}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.iterations = j.value("iterations", c.iterations);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.loss.ncc_window = j.value("ncc_window", c.loss.ncc_window);
  c.loss.ncc_eps = j.value("ncc_eps", c.loss.ncc_eps);
  c.loss.smooth_weight = j.value("smooth_weight", c.loss.smooth_weight);
  c.warmup_restoration_iters = j.value("warmup_restoration_iters", c.warmup_restoration_iters);
  c.restoration = j.value("restoration", c.restoration);
  c.smooth_on_fused = j.value("smooth_on_fused", c.smooth_on_fused);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  if (j.contains("arch")) c.arch = models::BackboneArch::from_json(j.at("arch"));
  if (j.contains("transforms")) {
    const auto& t = j.at("transforms");
    c.transforms.inpaint = t.value("inpaint", c.transforms.inpaint);
    c.transforms.shuffle = t.value("shuffle", c.transforms.shuffle);
    c.transforms.bezier = t.value("bezier", c.transforms.bezier);
    c.transforms.chain_length = t.value("chain_length", c.transforms.chain_length);
  }
  return c;
}

// ---------------------------------------------------------------------------
// State

io::Checkpoint TrainState::to_checkpoint() const {
  io::Checkpoint ck;
  ck.arch = weights.arch.to_json();
  ck.iteration = iteration;
  ck.rng_state = rng.serialize();
  ck.tensors = weights.params;
  ck.adam = adam;
  ck.history = history;
  return ck;
}

TrainState TrainState::from_checkpoint(const io::Checkpoint& ck) {
  TrainState s;
  s.weights.arch = models::BackboneArch::from_json(ck.arch);
  io::check_compatible(ck, models::init_weights(0, s.weights.arch).shapes());
  s.weights.params = ck.tensors;
  s.adam = ck.adam;
  for (const auto& [name, st] : s.adam) {
    auto it = s.weights.params.find(name);
    if (it == s.weights.params.end() || st.m.shape() != it->second.shape() || st.v.shape() != it->second.shape()) {
      throw CompatibilityError("optimiser state does not match parameter " + name);
    }
  }
  s.rng.deserialize(ck.rng_state);
  s.iteration = ck.iteration;
  s.history = ck.history;
  if (s.history.size() != s.iteration) throw FormatError("checkpoint history length differs from its iteration count");
  return s;
}

TrainState init_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  Rng seeder(cfg.seed);
  s.weights = models::init_weights(seeder.next_u64(), cfg.arch);
  s.rng = Rng(seeder.next_u64());
  for (const auto& [name, t] : s.weights.params) s.adam.emplace(name, ad::AdamState::zeros_like(t));
  return s;
}

// ---------------------------------------------------------------------------
// Step

GvslStep::GvslStep(const TrainConfig& cfg, const geometry::VolumeGrid& grid) : cfg_(cfg), grid_(grid) {
  cfg_.validate();
  grid_.validate();
  cfg_.arch.validate_grid(grid_);
  const Shape vol{1, 1, grid.z, grid.y, grid.x};
  cfg_.loss.validate(vol);

  params_ = models::register_parameters(g_, models::init_weights(0, cfg_.arch));
  std::vector<ad::Var> gvsl_terms, mse_terms;
  for (int i = 0; i < cfg_.batch; ++i) {
    Member m;
    const std::string k = std::to_string(i);
    m.xa = "x_a/" + k;
    m.xat = "x_at/" + k;
    m.xb = "x_b/" + k;
    const ad::Var xa = g_.input(m.xa, vol);
    const ad::Var xat = g_.input(m.xat, vol);
    const ad::Var xb = g_.input(m.xb, vol);

    const models::BackboneOutputs fa = models::backbone_forward(g_, params_, xat, cfg_.arch);
    const models::BackboneOutputs fb = models::backbone_forward(g_, params_, xb, cfg_.arch);

    m.restored = models::restoration_head_forward(g_, params_, fa.local, cfg_.arch);
    m.mse = losses::restoration_mse(g_, m.restored, xa);

    const models::ZMatchOutputs z = models::zmatch_forward(g_, params_, fa, fb, grid_, cfg_.arch);
    m.fused = z.fused;
    // The original, untransformed x_A is warped.
    const ad::Var warped = geometry::warp(g_, xa, z.fused);
    m.ncc = losses::local_ncc_loss(g_, warped, xb, cfg_.loss);
    m.smooth = losses::smoothness_loss(g_, cfg_.smooth_on_fused ? z.fused : z.deform);

    gvsl_terms.push_back(losses::gvsl_total(g_, m.ncc, m.smooth, cfg_.loss));
    mse_terms.push_back(m.mse);
    members_.push_back(std::move(m));
  }
  auto batch_mean = [&](const std::vector<ad::Var>& terms) {
    ad::Var acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) acc = ad::add(g_, acc, terms[i]);
    return ad::scale(g_, acc, 1.0 / static_cast<double>(terms.size()));
  };
  gvsl_ = batch_mean(gvsl_terms);
  mse_only_ = batch_mean(mse_terms);
  joint_ = ad::add(g_, gvsl_, mse_only_);
}

Metrics GvslStep::run(TrainState& state, std::span<const Volume* const> a, std::span<const Volume* const> b) {
  const auto n = static_cast<std::size_t>(cfg_.batch);
  if (a.size() != n || b.size() != n) {
    throw ConfigError("batch holds " + std::to_string(a.size()) + "/" + std::to_string(b.size()) +
                      " volumes, step expects " + std::to_string(n));
  }
  if (!(state.weights.arch == cfg_.arch)) throw CompatibilityError("train state architecture differs from the step");
  const std::uint64_t iter = state.iteration + 1;

  ad::Bindings bind;
  models::bind_weights(bind, state.weights);
  for (std::size_t i = 0; i < n; ++i) {
    for (const Volume* v : {a[i], b[i]}) {
      if (!(v->grid() == grid_) || v->channels() != 1) {
        throw ShapeError("batch volume grid differs from the training grid");
      }
    }
    const auto chain = transforms::sample_chain(state.rng.next_u64(), grid_, cfg_.transforms);
    bind.insert_or_assign(members_[i].xa, a[i]->batched());
    bind.insert_or_assign(members_[i].xat, transforms::apply_chain(*a[i], chain).batched());
    bind.insert_or_assign(members_[i].xb, b[i]->batched());
  }

  try {
    g_.evaluate(bind);
  } catch (const NumericalError& e) {
    throw NumericalError("iteration " + std::to_string(iter) + ": " + e.what());
  }

  Metrics m;
  for (const auto& mem : members_) {
    m.ncc += g_.value(mem.ncc).item();
    m.smooth += g_.value(mem.smooth).item();
    m.mse += g_.value(mem.mse).item();
  }
  m.ncc /= static_cast<double>(n);
  m.smooth /= static_cast<double>(n);
  m.mse /= static_cast<double>(n);
  m.total = m.ncc + cfg_.loss.smooth_weight * m.smooth + (cfg_.restoration ? m.mse : 0.0);
  if (!std::isfinite(m.total)) throw NumericalError("iteration " + std::to_string(iter) + ": non-finite loss");

  const bool warmup = state.iteration < static_cast<std::uint64_t>(cfg_.warmup_restoration_iters);
  const ad::Var loss = warmup ? mse_only_ : cfg_.restoration ? joint_ : gvsl_;
  const ad::TensorMap grads = g_.backpropagate(loss);
  for (auto& [name, param] : state.weights.params) {
    const models::Namespace ns = models::namespace_of(name);
    if (ns == models::Namespace::ZMatch && warmup) continue;
    if (ns == models::Namespace::Restore && !cfg_.restoration) continue;
    const Tensor& grad = grads.at(name);
    if (!grad.all_finite()) throw NumericalError("iteration " + std::to_string(iter) + ": non-finite gradient for " + name);
    auto st = state.adam.find(name);
    if (st == state.adam.end()) st = state.adam.emplace(name, ad::AdamState::zeros_like(param)).first;
    ad::adam_update(param, grad, st->second, cfg_.lr);
  }
  state.iteration = iter;
  state.history.push_back(m);
  return m;
}

const Tensor& GvslStep::restored(std::size_t i) const { return g_.value(members_.at(i).restored); }
const Tensor& GvslStep::fused(std::size_t i) const { return g_.value(members_.at(i).fused); }

Metrics gvsl_train_step(TrainState& state, GvslStep& step, std::span<const Volume* const> a,
                        std::span<const Volume* const> b) {
  return step.run(state, a, b);
}

std::vector<std::pair<std::size_t, std::size_t>> sample_pairs(Rng& rng, std::size_t count, std::size_t pairs) {
  if (count < 2) throw ConfigError("pair sampling needs at least 2 volumes");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (count >= 2 * pairs) {
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t k = 0; k < 2 * pairs; ++k) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(k),
                                                              static_cast<std::int64_t>(count - 1)));
      std::swap(idx[k], idx[j]);
    }
    for (std::size_t p = 0; p < pairs; ++p) out.emplace_back(idx[2 * p], idx[2 * p + 1]);
    return out;
  }
  for (std::size_t p = 0; p < pairs; ++p) {
    const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(count - 1)));
    auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(count - 2)));
    if (j >= i) ++j;
    out.emplace_back(i, j);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loop

void write_metrics_log(const fs::path& path, const std::vector<Metrics>& history) {
  std::string text = "iter,ncc,smooth,mse,total\n";
  char line[160];
  for (std::size_t i = 0; i < history.size(); ++i) {
    const auto& m = history[i];
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g\n", i + 1, m.ncc, m.smooth, m.mse, m.total);
    text += line;
  }
  io::atomic_write(path, text);
}

std::vector<Metrics> read_metrics_log(const fs::path& path) {
  std::istringstream in(io::read_file(path));
  std::string line;
  if (!std::getline(in, line) || line != "iter,ncc,smooth,mse,total") {
    throw FormatError(path.string() + ": missing metrics header");
  }
  std::vector<Metrics> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Metrics m;
    std::size_t iter = 0;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%lf", &iter, &m.ncc, &m.smooth, &m.mse, &m.total) != 5 ||
        iter != out.size() + 1) {
      throw FormatError(path.string() + ": malformed metrics row " + std::to_string(out.size() + 1));
    }
    out.push_back(m);
  }
  return out;
}

models::ModelWeights load_weights(const fs::path& checkpoint, const models::BackboneArch* expected) {
  const io::Checkpoint ck = io::load_checkpoint(checkpoint);
  models::ModelWeights w;
  w.arch = expected ? *expected : models::BackboneArch::from_json(ck.arch);
  io::check_compatible(ck, models::init_weights(0, w.arch).shapes());
  w.params = ck.tensors;
  return w;
}

PretrainResult pretrain(const io::DatasetManifest& manifest, const TrainConfig& cfg, const fs::path& out_dir,
                        const std::optional<fs::path>& resume,
                        const std::function<void(std::uint64_t, const Metrics&)>& progress) {
  cfg.validate();
  const auto train = manifest.split("train");
  if (train.size() < 2) {
    throw ConfigError("dataset too small: " + std::to_string(train.size()) + " training volumes, need >= 2");
  }
  std::vector<Volume> volumes;
  for (const auto* e : train) volumes.push_back(io::read_volume(manifest.resolve(e->volume)));
  const geometry::VolumeGrid grid = volumes.front().grid();
  for (const auto& v : volumes) {
    if (!(v.grid() == grid)) throw ShapeError("training volumes do not share one grid");
  }

  PretrainResult result;
  result.state = resume ? TrainState::from_checkpoint(io::load_checkpoint(*resume)) : init_state(cfg);
  TrainState& state = result.state;
  if (!(state.weights.arch == cfg.arch)) throw CompatibilityError("checkpoint architecture differs from the config");

  result.final_checkpoint = out_dir / "final.gvck";
  result.best_checkpoint = out_dir / "best.gvck";
  result.metrics_log = out_dir / "metrics.csv";
  const fs::path last = out_dir / "last.gvck";
  io::atomic_write(out_dir / "train_config.json", cfg.to_json().dump(2) + "\n");

  double best = std::numeric_limits<double>::infinity();
  for (const auto& m : state.history) best = std::min(best, m.total);

  GvslStep step(cfg, grid);
  const auto n = static_cast<std::size_t>(cfg.batch);
  std::vector<const Volume*> a(n), b(n);
  while (state.iteration < static_cast<std::uint64_t>(cfg.iterations)) {
    const auto pairs = sample_pairs(state.rng, volumes.size(), n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = &volumes[pairs[i].first];
      b[i] = &volumes[pairs[i].second];
    }
    const Metrics m = step.run(state, a, b);
    if (m.total < best) {
      best = m.total;
      io::save_checkpoint(result.best_checkpoint, state.to_checkpoint());
    }
    if (cfg.checkpoint_every > 0 && state.iteration % static_cast<std::uint64_t>(cfg.checkpoint_every) == 0) {
      io::save_checkpoint(last, state.to_checkpoint());
      write_metrics_log(result.metrics_log, state.history);
    }
    if (progress) progress(state.iteration, m);
  }
  io::save_checkpoint(result.final_checkpoint, state.to_checkpoint());
  if (!fs::exists(result.best_checkpoint)) io::save_checkpoint(result.best_checkpoint, state.to_checkpoint());
  write_metrics_log(result.metrics_log, state.history);
  return result;
}

NetworkRegistration network_register(const models::ModelWeights& weights, const Volume& moving, const Volume& fixed) {
  if (!(moving.grid() == fixed.grid()) || moving.channels() != fixed.channels()) {
    throw ShapeError("moving and fixed volumes must share one grid");
  }
  const geometry::VolumeGrid grid = moving.grid();
  weights.arch.validate_grid(grid);
  ad::Graph g;
  const models::ParamVars p = models::register_parameters(g, weights);
  const Tensor xm = moving.batched();
  const Tensor xf = fixed.batched();
  const ad::Var vm = g.input("moving", xm.shape());
  const ad::Var vf = g.input("fixed", xf.shape());
  const models::BackboneOutputs fa = models::backbone_forward(g, p, vm, weights.arch);
  const models::BackboneOutputs fb = models::backbone_forward(g, p, vf, weights.arch);
  const models::ZMatchOutputs z = models::zmatch_forward(g, p, fa, fb, grid, weights.arch);
  g.mark_output("params", z.affine.params);
  g.mark_output("deform", z.deform);
  g.mark_output("fused", z.fused);
  ad::Bindings b{{"moving", xm}, {"fixed", xf}};
  models::bind_weights(b, weights);
  const ad::TensorMap out = g.evaluate(b);
  auto unbatch = [&](const Tensor& t) { return geometry::Dvf(t.reshaped({3, grid.z, grid.y, grid.x})); };
  NetworkRegistration r;
  r.affine = geometry::AffineParams::from_flat(out.at("params").data());
  r.deform = unbatch(out.at("deform"));
  r.fused = unbatch(out.at("fused"));
  return r;
}

}  // namespace gvsl::trainer
