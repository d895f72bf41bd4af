#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gvsl/io.hpp"
#include "gvsl/losses.hpp"
#include "gvsl/models.hpp"
#include "gvsl/optim.hpp"
#include "gvsl/rng.hpp"
#include "gvsl/transforms.hpp"

namespace gvsl::trainer {

struct TrainConfig {
  int iterations = 500;
  int batch = 2;
  double lr = 1e-4;
  losses::LossConfig loss;
  /// Iterations at the start that optimise only the restoration loss.
  int warmup_restoration_iters = 0;
  /// false trains geometric matching alone (no restoration loss, restore/*
  /// never updated).
  bool restoration = true;
  /// Smoothness on the fused field; false applies it to the local field only.
  bool smooth_on_fused = true;
  std::uint64_t seed = 0;
  /// Save "last.gvck" every this many iterations (0: only at the end).
  int checkpoint_every = 0;
  models::BackboneArch arch;
  transforms::TransformConfig transforms;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

using Metrics = io::HistoryRow;

struct TrainState {
  models::ModelWeights weights;
  std::map<std::string, ad::AdamState> adam;
  Rng rng;
  std::uint64_t iteration = 0;
  std::vector<Metrics> history;

  io::Checkpoint to_checkpoint() const;
  static TrainState from_checkpoint(const io::Checkpoint& checkpoint);
};

/// Fresh weights and optimiser state. Weights and the sampling generator are
/// both derived from cfg.seed.
TrainState init_state(const TrainConfig& cfg);

/// One joint training step as a reusable graph for a fixed grid and batch
/// size. Parameter nodes are shared by both members of every pair.
class GvslStep {
 public:
  GvslStep(const TrainConfig& cfg, const geometry::VolumeGrid& grid);

  /// Draws an appearance transform per batch member from state.rng, runs the
  /// forward and backward passes and applies one Adam step per namespace.
  /// Appends the metrics to state.history and increments state.iteration.
  Metrics run(TrainState& state, std::span<const Volume* const> a, std::span<const Volume* const> b);

  /// Restored intensities of the last run for batch member i, [1, 1, Z, Y, X].
  const Tensor& restored(std::size_t i) const;
  /// Fused displacement of the last run for batch member i, [1, 3, Z, Y, X].
  const Tensor& fused(std::size_t i) const;

 private:
  struct Member {
    std::string xa, xat, xb;
    ad::Var ncc, smooth, mse, restored, fused;
  };

  TrainConfig cfg_;
  geometry::VolumeGrid grid_;
  ad::Graph g_;
  models::ParamVars params_;
  std::vector<Member> members_;
  ad::Var joint_{}, gvsl_{}, mse_only_{};
};

/// Convenience wrapper over GvslStep for one batch.
Metrics gvsl_train_step(TrainState& state, GvslStep& step, std::span<const Volume* const> a,
                        std::span<const Volume* const> b);

/// Indices of `pairs` (A, B) pairs over `count` items with A != B. Uses 2N
/// distinct items when count allows, otherwise distinct within each pair.
std::vector<std::pair<std::size_t, std::size_t>> sample_pairs(Rng& rng, std::size_t count, std::size_t pairs);

struct PretrainResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;
  std::filesystem::path metrics_log;
  TrainState state;
};

/// Runs the training loop over the train split of a dataset. With `resume`,
/// continues from a checkpoint written by an earlier run with the same
/// config. `progress` (optional) is called after every iteration.
PretrainResult pretrain(const io::DatasetManifest& manifest, const TrainConfig& cfg,
                        const std::filesystem::path& out_dir,
                        const std::optional<std::filesystem::path>& resume = std::nullopt,
                        const std::function<void(std::uint64_t, const Metrics&)>& progress = {});

/// "iter,ncc,smooth,mse,total" rows, values printed with 17 significant
/// digits.
void write_metrics_log(const std::filesystem::path& path, const std::vector<Metrics>& history);
std::vector<Metrics> read_metrics_log(const std::filesystem::path& path);

/// Loads a checkpoint's weights, checking tensor names and shapes against the
/// architecture stored in the checkpoint, or against `expected` when given.
models::ModelWeights load_weights(const std::filesystem::path& checkpoint,
                                  const models::BackboneArch* expected = nullptr);

/// Geometric-matching prediction of a trained model for one pair.
struct NetworkRegistration {
  geometry::AffineParams affine;
  geometry::Dvf deform;  // local field before fusion
  geometry::Dvf fused;   // field that warps moving onto fixed
};

/// Runs backbone and geometric-matching head on (moving, fixed).
NetworkRegistration network_register(const models::ModelWeights& weights, const Volume& moving, const Volume& fixed);

}  // namespace gvsl::trainer
