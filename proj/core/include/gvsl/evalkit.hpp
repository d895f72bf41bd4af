#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gvsl/geometry.hpp"
#include "gvsl/io.hpp"
#include "gvsl/models.hpp"
#include "gvsl/phantom.hpp"
#include "gvsl/volume.hpp"

namespace gvsl::evalkit {

/// Per-class Dice plus the mean over foreground classes 1..classes-1.
struct DiceReport {
  std::vector<double> per_class;
  double mean_foreground = 0.0;
};

/// 2|P∩T| / (|P|+|T|) per class; a class absent from both grids scores 1.
DiceReport dice(std::span<const std::int32_t> pred, std::span<const std::int32_t> truth, int classes);
DiceReport dice(const LabelGrid& pred, const LabelGrid& truth, int classes);

struct ProbeConfig {
  int iterations = 300;
  double lr = 1e-4;
  /// Number of classes, background included; 0 takes regions + 1 from the manifest.
  int classes = 0;
  /// Frozen backbone trains only the 1x1x1 conv; otherwise the backbone is fine-tuned too.
  bool frozen = true;
  /// Orders training volumes when fine-tuning; the frozen probe is full-batch.
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static ProbeConfig from_json(const nlohmann::json& j);
};

struct ProbeResult {
  DiceReport dice;  // averaged over test volumes
  /// Set when the test labels hold no foreground; mean_foreground is then 0.
  bool degenerate = false;
  std::vector<double> loss_trace;  // training cross entropy per iteration
  int classes = 0;
  std::size_t train_volumes = 0;
  std::size_t test_volumes = 0;
};

/// Volume + label pair for probing.
struct LabelledVolume {
  Volume volume;
  LabelGrid labels;
};

/// Loads a manifest split into memory.
std::vector<LabelledVolume> load_split(const io::DatasetManifest& manifest, const std::string& split);

/// Trains a 1x1x1 conv + softmax on the local features of `train` and
/// reports Dice on `test`. The input weights are never modified.
ProbeResult linear_probe(const models::ModelWeights& weights, const std::vector<LabelledVolume>& train,
                         const std::vector<LabelledVolume>& test, const ProbeConfig& cfg);
/// Uses the manifest's train and test splits.
ProbeResult linear_probe(const models::ModelWeights& weights, const io::DatasetManifest& manifest,
                         const ProbeConfig& cfg);

struct RegistrationReport {
  DiceReport warped_dice;                 // moving labels warped by pred vs fixed labels
  bool has_ground_truth = false;          // endpoint errors are only set when true
  double mean_endpoint_error = 0.0;       // voxels, over fixed-label foreground
  double max_endpoint_error = 0.0;
  double negative_jacobian_percent = 0.0;
  std::array<double, 3> mean_displacement{0.0, 0.0, 0.0};  // (x, y, z) over fixed-label foreground
};

/// Scores a predicted field against the pair's ground truth.
RegistrationReport registration_eval(const geometry::Dvf& pred, const phantom::PhantomPair& pair, int classes);

/// Same, for volumes without a ground-truth field.
RegistrationReport registration_eval(const geometry::Dvf& pred, const LabelGrid& moving_labels,
                                     const LabelGrid& fixed_labels, int classes);

inline constexpr double kInfiniteRatio = std::numeric_limits<double>::infinity();

struct ClusteringReport {
  double same_label_mean = 0.0;   // mean cosine, same label, different images
  double cross_label_mean = 0.0;  // mean cosine, different labels, different images
  /// same / cross; kInfiniteRatio when cross <= 0.
  double ratio = 0.0;
  std::size_t same_pairs = 0;
  std::size_t cross_pairs = 0;
  std::vector<int> skipped_classes;  // fewer than two interior voxels in some image
};

/// One image's feature map [C, Z, Y, X] and labels.
struct FeatureImage {
  Tensor features;
  LabelGrid labels;
};

/// Samples up to `samples_per_class` interior voxels per foreground class in
/// each image and compares feature vectors across each consecutive image
/// pair (0,1), (1,2), ... Deterministic in `seed`.
ClusteringReport clustering_contrast(const std::vector<FeatureImage>& images, int classes, int samples_per_class,
                                     std::uint64_t seed);
/// Runs the backbone on each volume first.
ClusteringReport clustering_contrast(const models::ModelWeights& weights, const std::vector<LabelledVolume>& images,
                                     int classes, int samples_per_class, std::uint64_t seed);

/// Line-oriented key=value reports.
std::string to_report(const DiceReport& d, const std::string& prefix = "dice");
std::string to_report(const ProbeResult& r);
std::string to_report(const RegistrationReport& r);
std::string to_report(const ClusteringReport& r);

nlohmann::json to_json(const DiceReport& d);
nlohmann::json to_json(const ProbeResult& r);
nlohmann::json to_json(const RegistrationReport& r);
nlohmann::json to_json(const ClusteringReport& r);

}  // namespace gvsl::evalkit
