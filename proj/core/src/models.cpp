#include "gvsl/models.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <vector>

#include "gvsl/errors.hpp"
#include "gvsl/ops.hpp"
#include "gvsl/rng.hpp"

namespace gvsl::models {
namespace {

enum class Init { Kaiming, Zero, One };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
  std::int64_t fan_in = 1;
};

void conv_group_specs(std::vector<ParamSpec>& out, const std::string& prefix, std::int64_t ci, std::int64_t co) {
  out.push_back({prefix + ".conv.w", {co, ci, 3, 3, 3}, Init::Kaiming, ci * 27});
  out.push_back({prefix + ".conv.b", {co}, Init::Zero});
  out.push_back({prefix + ".gn.gamma", {co}, Init::One});
  out.push_back({prefix + ".gn.beta", {co}, Init::Zero});
}

std::vector<ParamSpec> param_table(const BackboneArch& a) {
  std::vector<ParamSpec> t;
  const int L = a.levels;
  conv_group_specs(t, "backbone/enc0", a.in_channels, a.channels_at(0));
  for (int i = 1; i < L; ++i) {
    conv_group_specs(t, "backbone/down" + std::to_string(i), a.channels_at(i - 1), a.channels_at(i));
    conv_group_specs(t, "backbone/enc" + std::to_string(i), a.channels_at(i), a.channels_at(i));
  }
  const std::int64_t cb = a.global_channels();
  conv_group_specs(t, "backbone/down" + std::to_string(L), a.channels_at(L - 1), cb);
  conv_group_specs(t, "backbone/bottleneck", cb, cb);
  for (int i = L - 1; i >= 0; --i) {
    const std::int64_t below = (i == L - 1) ? cb : a.channels_at(i + 1);
    conv_group_specs(t, "backbone/dec" + std::to_string(i), below + a.channels_at(i), a.channels_at(i));
  }

  const std::array<std::pair<const char*, std::int64_t>, 4> heads{
      {{"rotation", 3}, {"translation", 3}, {"scaling", 3}, {"shearing", 6}}};
  for (const auto& [head, width] : heads) {
    const std::string prefix = std::string("zmatch.affine/") + head;
    t.push_back({prefix + ".w", {width, 2 * cb}, Init::Zero});
    t.push_back({prefix + ".b", {width}, Init::Zero});
  }

  const std::int64_t cl = a.local_channels();
  conv_group_specs(t, "zmatch.deform/cg0", 2 * cl, cl);
  conv_group_specs(t, "zmatch.deform/cg1", cl, cl);
  t.push_back({"zmatch.deform/out.w", {3, cl, 3, 3, 3}, Init::Zero});
  t.push_back({"zmatch.deform/out.b", {3}, Init::Zero});

  conv_group_specs(t, "restore/cg", cl, cl);
  t.push_back({"restore/out.w", {1, cl, 3, 3, 3}, Init::Kaiming, cl * 27});
  t.push_back({"restore/out.b", {1}, Init::Zero});
  return t;
}

ad::Var conv_group(ad::Graph& g, const ParamVars& p, const std::string& prefix, ad::Var x, int groups,
                   int stride = 1) {
  ad::Var y = ad::conv3d(g, x, p.at(prefix + ".conv.w"), p.at(prefix + ".conv.b"), stride);
  y = ad::group_norm(g, y, p.at(prefix + ".gn.gamma"), p.at(prefix + ".gn.beta"), groups);
  return ad::leaky_relu(g, y);
}

}  // namespace

void BackboneArch::validate() const {
  if (levels < 1 || levels > 5) throw ConfigError("backbone levels must lie in [1, 5]");
  if (base_channels < 1 || groups < 1) throw ConfigError("backbone channels and groups must be positive");
  if (base_channels % groups != 0) {
    throw ConfigError("base channels (" + std::to_string(base_channels) + ") must be divisible by groups (" +
                      std::to_string(groups) + ")");
  }
  if (in_channels < 1) throw ConfigError("backbone input channels must be positive");
}

void BackboneArch::validate_grid(const geometry::VolumeGrid& grid) const {
  const std::int64_t f = std::int64_t{1} << levels;
  for (auto e : {grid.z, grid.y, grid.x}) {
    if (e % f != 0 || e < f) {
      throw ConfigError("volume extent " + std::to_string(e) + " is not divisible by 2^levels = " +
                        std::to_string(f));
    }
  }
}

int BackboneArch::channels_at(int level) const { return level == 0 ? base_channels : 2 * base_channels; }

nlohmann::json BackboneArch::to_json() const {
  return {{"levels", levels}, {"base_channels", base_channels}, {"groups", groups}, {"in_channels", in_channels}};
}

BackboneArch BackboneArch::from_json(const nlohmann::json& j) {
  BackboneArch a;
  a.levels = j.value("levels", a.levels);
  a.base_channels = j.value("base_channels", a.base_channels);
  a.groups = j.value("groups", a.groups);
  a.in_channels = j.value("in_channels", a.in_channels);
  a.validate();
  return a;
}

Namespace namespace_of(std::string_view name) {
  if (name.starts_with("backbone/")) return Namespace::Backbone;
  if (name.starts_with("zmatch.affine/") || name.starts_with("zmatch.deform/")) return Namespace::ZMatch;
  if (name.starts_with("restore/")) return Namespace::Restore;
  throw ConfigError("parameter outside every namespace: " + std::string(name));
}

std::string_view namespace_name(Namespace ns) {
  switch (ns) {
    case Namespace::Backbone: return "backbone";
    case Namespace::ZMatch: return "zmatch";
    case Namespace::Restore: return "restore";
  }
  return "?";
}

std::map<std::string, Shape> ModelWeights::shapes() const {
  std::map<std::string, Shape> out;
  for (const auto& [name, t] : params) out.emplace(name, t.shape());
  return out;
}

ModelWeights init_weights(std::uint64_t seed, const BackboneArch& arch) {
  arch.validate();
  ModelWeights w;
  w.arch = arch;
  Rng rng(seed);
  for (const auto& spec : param_table(arch)) {
    Tensor t(spec.shape);
    switch (spec.init) {
      case Init::Zero: break;
      case Init::One: t.fill(1.0); break;
      case Init::Kaiming: {
        const double sd = std::sqrt(2.0 / static_cast<double>(spec.fan_in));
        for (auto& v : t.data()) v = sd * rng.normal();
        break;
      }
    }
    w.params.emplace(spec.name, std::move(t));
  }
  return w;
}

ad::Var ParamVars::at(const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ConfigError("missing model parameter " + name);
  return it->second;
}

ParamVars register_parameters(ad::Graph& g, const ModelWeights& weights) {
  ParamVars p;
  for (const auto& [name, t] : weights.params) p.add(name, g.parameter(name, t.shape()));
  return p;
}

void bind_weights(ad::Bindings& bindings, const ModelWeights& weights) {
  for (const auto& [name, t] : weights.params) bindings.insert_or_assign(name, t);
}

BackboneOutputs backbone_forward(ad::Graph& g, const ParamVars& p, ad::Var x, const BackboneArch& arch) {
  const Shape s = g.shape(x);
  if (s.size() != 5 || s[1] != arch.in_channels) {
    throw ShapeError("backbone input must be [N," + std::to_string(arch.in_channels) + ",Z,Y,X], got " + to_string(s));
  }
  arch.validate_grid({s[2], s[3], s[4]});
  const int L = arch.levels;
  std::vector<ad::Var> skips;
  ad::Var h = conv_group(g, p, "backbone/enc0", x, arch.groups);
  skips.push_back(h);
  for (int i = 1; i < L; ++i) {
    h = conv_group(g, p, "backbone/down" + std::to_string(i), h, arch.groups, 2);
    h = conv_group(g, p, "backbone/enc" + std::to_string(i), h, arch.groups);
    skips.push_back(h);
  }
  h = conv_group(g, p, "backbone/down" + std::to_string(L), h, arch.groups, 2);
  h = conv_group(g, p, "backbone/bottleneck", h, arch.groups);
  const ad::Var global = h;
  for (int i = L - 1; i >= 0; --i) {
    h = ad::upsample2x(g, h);
    h = ad::concat(g, {h, skips[static_cast<std::size_t>(i)]}, 1);
    h = conv_group(g, p, "backbone/dec" + std::to_string(i), h, arch.groups);
  }
  return {global, h};
}

AffineHeadOutputs affine_head_forward(ad::Graph& g, const ParamVars& p, ad::Var global_a, ad::Var global_b) {
  if (g.shape(global_a) != g.shape(global_b)) {
    throw ShapeError("affine head inputs differ: " + to_string(g.shape(global_a)) + " vs " +
                     to_string(g.shape(global_b)));
  }
  const ad::Var pooled = ad::global_avg_pool(g, ad::concat(g, {global_a, global_b}, 1));
  auto head = [&](const char* name) {
    const std::string prefix = std::string("zmatch.affine/") + name;
    return ad::linear(g, pooled, p.at(prefix + ".w"), p.at(prefix + ".b"));
  };
  const ad::Var rotation = head("rotation");
  const ad::Var translation = head("translation");
  const ad::Var scaling = ad::add_scalar(g, head("scaling"), 1.0);
  const ad::Var shearing = head("shearing");
  const ad::Var params = ad::concat(g, {rotation, translation, scaling, shearing}, 1);
  return {params, geometry::affine_matrix(g, params)};
}

ad::Var deformable_head_forward(ad::Graph& g, const ParamVars& p, ad::Var local_a_aligned, ad::Var local_b,
                                const BackboneArch& arch) {
  if (g.shape(local_a_aligned) != g.shape(local_b)) {
    throw ShapeError("deformable head inputs differ: " + to_string(g.shape(local_a_aligned)) + " vs " +
                     to_string(g.shape(local_b)));
  }
  ad::Var h = ad::concat(g, {local_a_aligned, local_b}, 1);
  h = conv_group(g, p, "zmatch.deform/cg0", h, arch.groups);
  h = conv_group(g, p, "zmatch.deform/cg1", h, arch.groups);
  return ad::conv3d(g, h, p.at("zmatch.deform/out.w"), p.at("zmatch.deform/out.b"));
}

ad::Var restoration_head_forward(ad::Graph& g, const ParamVars& p, ad::Var local, const BackboneArch& arch) {
  ad::Var h = conv_group(g, p, "restore/cg", local, arch.groups);
  h = ad::conv3d(g, h, p.at("restore/out.w"), p.at("restore/out.b"));
  return ad::sigmoid(g, h);
}

ZMatchOutputs zmatch_forward(ad::Graph& g, const ParamVars& p, const BackboneOutputs& a, const BackboneOutputs& b,
                             const geometry::VolumeGrid& grid, const BackboneArch& arch) {
  ZMatchOutputs out;
  out.affine = affine_head_forward(g, p, a.global, b.global);
  out.affine_field = geometry::affine_field(g, out.affine.matrix, grid);
  const ad::Var aligned = geometry::warp(g, a.local, out.affine_field);
  out.deform = deformable_head_forward(g, p, aligned, b.local, arch);
  out.fused = geometry::compose(g, out.affine_field, out.deform);
  return out;
}

Tensor local_features(const ModelWeights& weights, const Tensor& volume) {
  if (volume.rank() != 4) throw ShapeError("local_features expects [C,Z,Y,X]");
  ad::Graph g;
  const ParamVars p = register_parameters(g, weights);
  Shape batched{1};
  batched.insert(batched.end(), volume.shape().begin(), volume.shape().end());
  const ad::Var x = g.input("x", batched);
  const BackboneOutputs out = backbone_forward(g, p, x, weights.arch);
  g.mark_output("local", out.local);
  ad::Bindings b;
  bind_weights(b, weights);
  b.emplace("x", volume.reshaped(batched));
  ad::TensorMap r = g.evaluate(b);
  const Shape ls = g.shape(out.local);
  return std::move(r.at("local")).reshaped({ls[1], ls[2], ls[3], ls[4]});
}

std::uint64_t weights_hash(const ModelWeights& weights) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= c[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, t] : weights.params) {
    mix(name.data(), name.size());
    for (auto d : t.shape()) mix(&d, sizeof d);
    mix(t.data().data(), t.storage().size() * sizeof(double));
  }
  return h;
}

}  // namespace gvsl::models
