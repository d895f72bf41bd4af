#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "gvsl/geometry.hpp"
#include "gvsl/graph.hpp"

namespace gvsl::models {

/// Small 3D U-Net backbone description.
struct BackboneArch {
  int levels = 2;
  int base_channels = 8;
  int groups = 4;
  int in_channels = 1;

  void validate() const;
  /// Throws ConfigError unless every extent is divisible by 2^levels.
  void validate_grid(const geometry::VolumeGrid& grid) const;

  /// Channels of encoder level i (base * 2^min(i, 1)); widths stop growing
  /// after the first level to keep desk-scale cost low.
  int channels_at(int level) const;
  /// Bottleneck (global feature) channels.
  int global_channels() const { return channels_at(levels - 1); }
  /// Final decoder (local feature) channels.
  int local_channels() const { return base_channels; }

  nlohmann::json to_json() const;
  static BackboneArch from_json(const nlohmann::json& j);
  friend bool operator==(const BackboneArch&, const BackboneArch&) = default;
};

enum class Namespace { Backbone, ZMatch, Restore };

/// backbone/* -> Backbone, zmatch.affine/* and zmatch.deform/* -> ZMatch,
/// restore/* -> Restore. Throws ConfigError for anything else.
Namespace namespace_of(std::string_view parameter_name);
std::string_view namespace_name(Namespace ns);

struct ModelWeights {
  BackboneArch arch;
  ad::TensorMap params;

  std::map<std::string, Shape> shapes() const;
  friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

/// Kaiming fan-in normal weights, zero biases, unit GroupNorm scales; the
/// final layers of the affine and deformable heads are zero.
ModelWeights init_weights(std::uint64_t seed, const BackboneArch& arch);

/// Parameter nodes registered in one graph, keyed by parameter name.
class ParamVars {
 public:
  ad::Var at(const std::string& name) const;
  void add(const std::string& name, ad::Var v) { vars_.emplace(name, v); }
  const std::map<std::string, ad::Var>& all() const { return vars_; }

 private:
  std::map<std::string, ad::Var> vars_;
};

/// Adds one parameter node per weight; bind values with `bind_weights`.
ParamVars register_parameters(ad::Graph& g, const ModelWeights& weights);
void bind_weights(ad::Bindings& bindings, const ModelWeights& weights);

struct BackboneOutputs {
  ad::Var global;  // bottleneck, [N, Cg, Z / 2^L, Y / 2^L, X / 2^L]
  ad::Var local;   // final layer, [N, Cl, Z, Y, X]
};

BackboneOutputs backbone_forward(ad::Graph& g, const ParamVars& p, ad::Var x, const BackboneArch& arch);

struct AffineHeadOutputs {
  ad::Var params;  // [N, 15]: rotation, translation, 1 + scaling, shearing
  ad::Var matrix;  // [N, 4, 4]
};

AffineHeadOutputs affine_head_forward(ad::Graph& g, const ParamVars& p, ad::Var global_a, ad::Var global_b);

/// Deformable field [N, 3, Z, Y, X] from the affinely aligned local features
/// of A and the local features of B.
ad::Var deformable_head_forward(ad::Graph& g, const ParamVars& p, ad::Var local_a_aligned, ad::Var local_b,
                                const BackboneArch& arch);

/// Sigmoid intensities [N, 1, Z, Y, X].
ad::Var restoration_head_forward(ad::Graph& g, const ParamVars& p, ad::Var local, const BackboneArch& arch);

struct ZMatchOutputs {
  AffineHeadOutputs affine;
  ad::Var affine_field;  // displacement of the affine map
  ad::Var deform;        // local field before fusion
  ad::Var fused;         // deform composed with the affine field
};

/// Full geometric-matching head on the features of A and B.
ZMatchOutputs zmatch_forward(ad::Graph& g, const ParamVars& p, const BackboneOutputs& a, const BackboneOutputs& b,
                             const geometry::VolumeGrid& grid, const BackboneArch& arch);

/// Convenience: evaluates the backbone on one [C, Z, Y, X] volume and
/// returns the local feature map [Cl, Z, Y, X].
Tensor local_features(const ModelWeights& weights, const Tensor& volume);

/// Order-sensitive FNV-1a hash over names, shapes and values.
std::uint64_t weights_hash(const ModelWeights& weights);

}  // namespace gvsl::models
