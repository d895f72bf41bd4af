#include "commands.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gvsl/classical.hpp"
#include "gvsl/errors.hpp"
#include "gvsl/evalkit.hpp"
#include "gvsl/io.hpp"
#include "gvsl/losses.hpp"
#include "gvsl/phantom.hpp"
#include "gvsl/trainer.hpp"
#include "gvsl/transforms.hpp"

namespace gvsl::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kResolvedConfig = "resolved_config.json";

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path);
  try {
    json j = json::parse(in);
    if (!j.is_object()) throw ConfigError("config file " + path + " must hold a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::atomic_write(path, text);
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

fs::path manifest_path(const std::string& data) {
  const fs::path p(data);
  return fs::is_directory(p) ? p / "manifest.json" : p;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool given(const CLI::Option* o) { return o != nullptr && o->count() > 0; }

// Labels for the classes count: the largest id present plus one.
int classes_from(std::initializer_list<const LabelGrid*> grids) {
  std::int32_t hi = 0;
  for (const LabelGrid* g : grids) {
    if (g != nullptr && !g->labels.empty()) hi = std::max(hi, *std::max_element(g->labels.begin(), g->labels.end()));
  }
  return std::max(2, hi + 1);
}

models::ModelWeights weights_from(const std::string& checkpoint, std::uint64_t seed, const json& cfg) {
  const models::BackboneArch arch =
      cfg.contains("arch") ? models::BackboneArch::from_json(cfg.at("arch")) : models::BackboneArch{};
  if (checkpoint == "none") return models::init_weights(seed, arch);
  return trainer::load_weights(checkpoint, cfg.contains("arch") ? &arch : nullptr);
}

std::string affine_report(const geometry::AffineParams& a) {
  std::string s;
  const char* axes[] = {"x", "y", "z"};
  for (std::size_t i = 0; i < 3; ++i) s += std::string("affine.translation_") + axes[i] + "=" + fmt(a.translation[i]) + "\n";
  for (std::size_t i = 0; i < 3; ++i) s += std::string("affine.rotation_") + axes[i] + "=" + fmt(a.rotation[i]) + "\n";
  for (std::size_t i = 0; i < 3; ++i) s += std::string("affine.scaling_") + axes[i] + "=" + fmt(a.scaling[i]) + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// phantom

struct PhantomArgs {
  std::string config;
  std::uint64_t seed = 0;
  int count = 10;
  int extent = 32;
  int regions = 4;
  std::string out;
  CLI::Option* o_seed = nullptr;
  CLI::Option* o_count = nullptr;
  CLI::Option* o_extent = nullptr;
  CLI::Option* o_regions = nullptr;
};

int cmd_phantom(const PhantomArgs& a, std::ostream& out) {
  const json file = load_config(a.config);
  phantom::PhantomConfig cfg = phantom::PhantomConfig::from_json(file);
  std::uint64_t seed = file.value("seed", std::uint64_t{0});
  int count = file.value("count", 10);
  if (given(a.o_seed)) seed = a.seed;
  if (given(a.o_count)) count = a.count;
  if (given(a.o_extent)) cfg.extent = a.extent;
  if (given(a.o_regions)) cfg.regions = a.regions;
  cfg.validate();
  if (count < 2) throw ConfigError("--count must be >= 2");

  const io::DatasetManifest m = phantom::generate_dataset(seed, count, cfg, a.out);
  json resolved = cfg.to_json();
  resolved["seed"] = seed;
  resolved["count"] = count;
  write_json(fs::path(a.out) / kResolvedConfig, resolved);
  const auto sizes = phantom::split_sizes(count, cfg);
  out << "phantom: wrote " << m.entries.size() << " phantoms to " << a.out << " (train " << sizes[0] << ", val "
      << sizes[1] << ", test " << sizes[2] << ")\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainArgs {
  std::string config;
  std::string data;
  int iters = 500;
  int batch = 2;
  double lr = 1e-4;
  double smooth_weight = 1.0;
  std::uint64_t seed = 0;
  int warmup = 0;
  bool no_restoration = false;
  int checkpoint_every = 0;
  std::string resume;
  std::string out;
  int log_every = 0;
  CLI::Option* o_iters = nullptr;
  CLI::Option* o_batch = nullptr;
  CLI::Option* o_lr = nullptr;
  CLI::Option* o_smooth_weight = nullptr;
  CLI::Option* o_seed = nullptr;
  CLI::Option* o_warmup = nullptr;
  CLI::Option* o_no_restoration = nullptr;
  CLI::Option* o_checkpoint_every = nullptr;
};

int cmd_pretrain(const PretrainArgs& a, std::ostream& out) {
  const json file = load_config(a.config);
  trainer::TrainConfig cfg = trainer::TrainConfig::from_json(file);
  if (given(a.o_iters)) cfg.iterations = a.iters;
  if (given(a.o_batch)) cfg.batch = a.batch;
  if (given(a.o_lr)) cfg.lr = a.lr;
  if (given(a.o_smooth_weight)) cfg.loss.smooth_weight = a.smooth_weight;
  if (given(a.o_seed)) cfg.seed = a.seed;
  if (given(a.o_warmup)) cfg.warmup_restoration_iters = a.warmup;
  if (given(a.o_no_restoration)) cfg.restoration = false;
  if (given(a.o_checkpoint_every)) cfg.checkpoint_every = a.checkpoint_every;
  cfg.validate();

  const io::DatasetManifest m = io::read_manifest(manifest_path(a.data));
  json resolved = cfg.to_json();
  resolved["data"] = a.data;
  write_json(fs::path(a.out) / kResolvedConfig, resolved);

  std::optional<fs::path> resume;
  if (!a.resume.empty()) resume = a.resume;
  const int every = a.log_every;
  const trainer::PretrainResult r =
      trainer::pretrain(m, cfg, a.out, resume, [&](std::uint64_t it, const trainer::Metrics& row) {
        if (every > 0 && it % static_cast<std::uint64_t>(every) == 0) {
          out << "iter=" << it << " ncc=" << fmt(row.ncc) << " smooth=" << fmt(row.smooth) << " mse=" << fmt(row.mse)
              << "\n";
        }
      });
  const auto& h = r.state.history;
  out << "pretrain: iterations=" << r.state.iteration;
  if (!h.empty()) {
    out << " first_ncc=" << fmt(h.front().ncc) << " last_ncc=" << fmt(h.back().ncc) << " first_mse="
        << fmt(h.front().mse) << " last_mse=" << fmt(h.back().mse);
  }
  out << " checkpoint=" << r.final_checkpoint.string() << " metrics=" << r.metrics_log.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// register

struct RegisterArgs {
  std::string config;
  std::string fixed;
  std::string moving;
  std::string mode = "classical";
  std::string checkpoint = "none";
  std::uint64_t seed = 0;
  std::string moving_labels;
  std::string fixed_labels;
  std::string gt;
  int classes = 0;
  int affine_iters = 150;
  int deform_iters = 100;
  std::string out;
  CLI::Option* o_affine_iters = nullptr;
  CLI::Option* o_deform_iters = nullptr;
};

int cmd_register(const RegisterArgs& a, std::ostream& out) {
  const json file = load_config(a.config);
  const Volume moving = io::read_volume(a.moving);
  const Volume fixed = io::read_volume(a.fixed);
  if (!(moving.grid() == fixed.grid()) || moving.channels() != fixed.channels()) {
    throw ShapeError("--moving and --fixed volumes have different grids");
  }

  json resolved{{"fixed", a.fixed}, {"moving", a.moving}, {"mode", a.mode}};
  std::string report = "mode=" + a.mode + "\n";
  geometry::Dvf field;
  if (a.mode == "classical") {
    trainer::ClassicalConfig cfg = trainer::ClassicalConfig::from_json(file.value("classical", json::object()));
    if (given(a.o_affine_iters)) cfg.affine_iters = a.affine_iters;
    if (given(a.o_deform_iters)) cfg.deform_iters = a.deform_iters;
    cfg.validate();
    resolved["classical"] = cfg.to_json();
    const trainer::ClassicalResult r = trainer::classical_register(moving, fixed, cfg);
    report += affine_report(r.affine);
    report += "classical.initial_ncc=" + fmt(r.initial_ncc) + "\n";
    report += "classical.final_ncc=" + fmt(r.final_ncc) + "\n";
    field = r.fused;
  } else if (a.mode == "network") {
    const models::ModelWeights w = weights_from(a.checkpoint, a.seed, file);
    resolved["checkpoint"] = a.checkpoint;
    resolved["seed"] = a.seed;
    resolved["arch"] = w.arch.to_json();
    const trainer::NetworkRegistration r = trainer::network_register(w, moving, fixed);
    report += affine_report(r.affine);
    field = r.fused;
  } else {
    throw ConfigError("--mode must be network or classical");
  }
  const losses::LossConfig ncc_cfg;
  const Tensor warped = geometry::warp_trilinear(moving.data, field);
  report += "ncc.before=" + fmt(losses::local_ncc(moving.data, fixed.data, ncc_cfg)) + "\n";
  report += "ncc.after=" + fmt(losses::local_ncc(warped, fixed.data, ncc_cfg)) + "\n";

  if (!a.moving_labels.empty() && !a.fixed_labels.empty()) {
    phantom::PhantomPair pair;
    pair.moving_labels = io::read_labels(a.moving_labels);
    pair.fixed_labels = io::read_labels(a.fixed_labels);
    const int classes = a.classes > 0 ? a.classes : classes_from({&pair.moving_labels, &pair.fixed_labels});
    evalkit::RegistrationReport rr;
    if (!a.gt.empty()) {
      pair.gt = io::read_dvf(a.gt);
      rr = evalkit::registration_eval(field, pair, classes);
    } else {
      rr = evalkit::registration_eval(field, pair.moving_labels, pair.fixed_labels, classes);
    }
    report += evalkit::to_report(rr);
    resolved["moving_labels"] = a.moving_labels;
    resolved["fixed_labels"] = a.fixed_labels;
    resolved["gt"] = a.gt;
    resolved["classes"] = classes;
  }

  const fs::path dir(a.out);
  fs::create_directories(dir);
  io::write_dvf(dir / "dvf.gvol", field);
  io::write_volume(dir / "warped.gvol", Volume(warped, moving.spacing));
  write_text(dir / "report.txt", report);
  write_json(dir / kResolvedConfig, resolved);
  out << report;
  return kOk;
}

// ---------------------------------------------------------------------------
// augment

struct AugmentArgs {
  std::string in;
  std::string kind;
  std::uint64_t seed = 0;
  std::string spec;
  std::string out;
};

int cmd_augment(const AugmentArgs& a, std::ostream& out) {
  const Volume v = io::read_volume(a.in);
  transforms::TransformSpec spec;
  if (!a.spec.empty()) {
    spec = transforms::TransformSpec::from_json(load_config(a.spec));
  } else {
    if (a.kind.empty()) throw ConfigError("--kind or --spec is required");
    const transforms::TransformKind kind = transforms::parse_kind(a.kind);
    transforms::TransformConfig tc;
    tc.inpaint = kind == transforms::TransformKind::Inpaint;
    tc.shuffle = kind == transforms::TransformKind::Shuffle;
    tc.bezier = kind == transforms::TransformKind::Bezier;
    spec = transforms::sample_transform(a.seed, v.grid(), tc);
  }
  spec.validate(v.grid());
  const Volume result = transforms::apply_transform(v, spec);
  const fs::path o(a.out);
  if (o.has_parent_path()) fs::create_directories(o.parent_path());
  io::write_volume(o, result);
  fs::path spec_path = o;
  spec_path.replace_extension(".spec.json");
  write_json(spec_path, spec.to_json());
  fs::path cfg_path = o;
  cfg_path.replace_extension(".config.json");
  write_json(cfg_path, {{"in", a.in}, {"kind", std::string(transforms::kind_name(spec.kind))}, {"seed", spec.seed},
                        {"spec", spec.to_json()}});
  out << "augment: kind=" << transforms::kind_name(spec.kind) << " out=" << o.string()
      << " spec=" << spec_path.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// probe

struct ProbeArgs {
  std::string config;
  std::string checkpoint;
  std::string data;
  int iters = 300;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  int classes = 0;
  bool finetune = false;
  std::string out;
  CLI::Option* o_iters = nullptr;
  CLI::Option* o_lr = nullptr;
  CLI::Option* o_seed = nullptr;
  CLI::Option* o_classes = nullptr;
  CLI::Option* o_finetune = nullptr;
};

int cmd_probe(const ProbeArgs& a, std::ostream& out) {
  const json file = load_config(a.config);
  evalkit::ProbeConfig cfg = evalkit::ProbeConfig::from_json(file.value("probe", json::object()));
  if (given(a.o_iters)) cfg.iterations = a.iters;
  if (given(a.o_lr)) cfg.lr = a.lr;
  if (given(a.o_seed)) cfg.seed = a.seed;
  if (given(a.o_classes)) cfg.classes = a.classes;
  if (given(a.o_finetune)) cfg.frozen = false;
  cfg.validate();
  const io::DatasetManifest m = io::read_manifest(manifest_path(a.data));
  const models::ModelWeights w = weights_from(a.checkpoint, cfg.seed, file);
  const evalkit::ProbeResult r = evalkit::linear_probe(w, m, cfg);
  const std::string report = "checkpoint=" + a.checkpoint + "\n" + evalkit::to_report(r);
  if (!a.out.empty()) {
    const fs::path dir(a.out);
    write_text(dir / "report.txt", report);
    write_json(dir / kResolvedConfig, {{"checkpoint", a.checkpoint},
                                       {"data", a.data},
                                       {"probe", cfg.to_json()},
                                       {"arch", w.arch.to_json()}});
  }
  out << report;
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string config;
  // dice
  std::string pred;
  std::string truth;
  // clustering
  std::string checkpoint;
  std::string data;
  std::string split = "test";
  int samples = 32;
  std::uint64_t seed = 0;
  // registration
  std::string dvf;
  std::string moving_labels;
  std::string fixed_labels;
  std::string gt;
  int classes = 0;
  std::string out;
};

void emit(const EvalArgs& a, const std::string& report, const json& resolved, std::ostream& out) {
  if (!a.out.empty()) {
    const fs::path dir(a.out);
    write_text(dir / "report.txt", report);
    write_json(dir / kResolvedConfig, resolved);
  }
  out << report;
}

int cmd_eval_dice(const EvalArgs& a, std::ostream& out) {
  const LabelGrid p = io::read_labels(a.pred);
  const LabelGrid t = io::read_labels(a.truth);
  const int classes = a.classes > 0 ? a.classes : classes_from({&p, &t});
  emit(a, evalkit::to_report(evalkit::dice(p, t, classes)),
       {{"pred", a.pred}, {"truth", a.truth}, {"classes", classes}}, out);
  return kOk;
}

int cmd_eval_clustering(const EvalArgs& a, std::ostream& out) {
  const json file = load_config(a.config);
  const io::DatasetManifest m = io::read_manifest(manifest_path(a.data));
  const models::ModelWeights w = weights_from(a.checkpoint, a.seed, file);
  const std::vector<evalkit::LabelledVolume> images = evalkit::load_split(m, a.split);
  int classes = a.classes;
  if (classes == 0) {
    classes = m.config.contains("regions") ? m.config.at("regions").get<int>() + 1 : 0;
    for (const auto& im : images) classes = std::max(classes, classes_from({&im.labels}));
  }
  const evalkit::ClusteringReport r = evalkit::clustering_contrast(w, images, classes, a.samples, a.seed);
  emit(a, "checkpoint=" + a.checkpoint + "\n" + evalkit::to_report(r),
       {{"checkpoint", a.checkpoint},
        {"data", a.data},
        {"split", a.split},
        {"samples", a.samples},
        {"seed", a.seed},
        {"classes", classes}},
       out);
  return kOk;
}

int cmd_eval_registration(const EvalArgs& a, std::ostream& out) {
  const geometry::Dvf field = io::read_dvf(a.dvf);
  phantom::PhantomPair pair;
  pair.moving_labels = io::read_labels(a.moving_labels);
  pair.fixed_labels = io::read_labels(a.fixed_labels);
  const int classes = a.classes > 0 ? a.classes : classes_from({&pair.moving_labels, &pair.fixed_labels});
  evalkit::RegistrationReport r;
  if (!a.gt.empty()) {
    pair.gt = io::read_dvf(a.gt);
    r = evalkit::registration_eval(field, pair, classes);
  } else {
    r = evalkit::registration_eval(field, pair.moving_labels, pair.fixed_labels, classes);
  }
  emit(a, evalkit::to_report(r),
       {{"dvf", a.dvf},
        {"moving_labels", a.moving_labels},
        {"fixed_labels", a.fixed_labels},
        {"gt", a.gt},
        {"classes", classes}},
       out);
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Geometric visual similarity learning on synthetic volumes", "gvsl"};
  app.require_subcommand(1);

  PhantomArgs pa;
  auto* ph = app.add_subcommand("phantom", "Generate a synthetic phantom dataset");
  ph->add_option("--config", pa.config, "JSON config (PhantomConfig keys, seed, count)");
  pa.o_seed = ph->add_option("--seed", pa.seed, "Dataset seed");
  pa.o_count = ph->add_option("--count", pa.count, "Number of phantoms")->check(CLI::Range(2, 100000));
  pa.o_extent = ph->add_option("--extent", pa.extent, "Grid extent per axis")->check(CLI::Range(16, 1024));
  pa.o_regions = ph->add_option("--regions", pa.regions, "Number of labelled regions L")->check(CLI::Range(2, 6));
  ph->add_option("--out", pa.out, "Output directory")->required();

  PretrainArgs pt;
  auto* pr = app.add_subcommand("pretrain", "Self-supervised pretraining on a phantom dataset");
  pr->add_option("--config", pt.config, "JSON config (TrainConfig keys)");
  pr->add_option("--data", pt.data, "Dataset directory or manifest.json")->required();
  pt.o_iters = pr->add_option("--iters", pt.iters, "Training iterations")->check(CLI::NonNegativeNumber);
  pt.o_batch = pr->add_option("--batch", pt.batch, "Pairs per step")->check(CLI::PositiveNumber);
  pt.o_lr = pr->add_option("--lr", pt.lr, "Adam learning rate")->check(CLI::NonNegativeNumber);
  pt.o_smooth_weight =
      pr->add_option("--smooth-weight", pt.smooth_weight, "Weight of the smoothness loss")->check(CLI::NonNegativeNumber);
  pt.o_seed = pr->add_option("--seed", pt.seed, "Training seed");
  pt.o_warmup = pr->add_option("--warmup", pt.warmup, "Restoration-only warmup iterations")->check(CLI::NonNegativeNumber);
  pt.o_no_restoration = pr->add_flag("--no-restoration", pt.no_restoration, "Train geometric matching alone");
  pt.o_checkpoint_every = pr->add_option("--checkpoint-every", pt.checkpoint_every, "Save last.gvck every N iterations");
  pr->add_option("--resume", pt.resume, "Checkpoint to resume from");
  pr->add_option("--log-every", pt.log_every, "Print metrics every N iterations (0: summary only)");
  pr->add_option("--out", pt.out, "Output directory")->required();

  RegisterArgs ra;
  auto* rg = app.add_subcommand("register", "Register a moving volume onto a fixed volume");
  rg->add_option("--config", ra.config, "JSON config (\"classical\" object, \"arch\")");
  rg->add_option("--fixed", ra.fixed, "Fixed volume")->required();
  rg->add_option("--moving", ra.moving, "Moving volume")->required();
  rg->add_option("--mode", ra.mode, "network or classical")->check(CLI::IsMember({"network", "classical"}));
  rg->add_option("--checkpoint", ra.checkpoint, "Checkpoint for network mode, or none for fresh weights");
  rg->add_option("--seed", ra.seed, "Weight seed when --checkpoint none");
  rg->add_option("--moving-labels", ra.moving_labels, "Labels of the moving volume");
  rg->add_option("--fixed-labels", ra.fixed_labels, "Labels of the fixed volume");
  rg->add_option("--gt", ra.gt, "Ground-truth displacement field");
  rg->add_option("--classes", ra.classes, "Label classes including background (default: from labels)");
  ra.o_affine_iters = rg->add_option("--affine-iters", ra.affine_iters, "Classical affine iterations");
  ra.o_deform_iters = rg->add_option("--deform-iters", ra.deform_iters, "Classical deformable iterations");
  rg->add_option("--out", ra.out, "Output directory")->required();

  AugmentArgs aa;
  auto* au = app.add_subcommand("augment", "Apply one appearance transform");
  au->add_option("--in", aa.in, "Input volume")->required();
  au->add_option("--kind", aa.kind, "inpaint, shuffle or bezier");
  au->add_option("--seed", aa.seed, "Transform seed");
  au->add_option("--spec", aa.spec, "Replay a saved transform spec instead of sampling");
  au->add_option("--out", aa.out, "Output volume path")->required();

  ProbeArgs pb;
  auto* po = app.add_subcommand("probe", "Linear probe of frozen local features");
  po->add_option("--config", pb.config, "JSON config (\"probe\" object, \"arch\")");
  po->add_option("--checkpoint", pb.checkpoint, "Checkpoint, or none for the scratch baseline")->required();
  po->add_option("--data", pb.data, "Dataset directory or manifest.json")->required();
  pb.o_iters = po->add_option("--iters", pb.iters, "Probe iterations")->check(CLI::PositiveNumber);
  pb.o_lr = po->add_option("--lr", pb.lr, "Probe learning rate")->check(CLI::NonNegativeNumber);
  pb.o_seed = po->add_option("--seed", pb.seed, "Probe seed (also seeds scratch weights)");
  pb.o_classes = po->add_option("--classes", pb.classes, "Classes including background (default: regions + 1)");
  pb.o_finetune = po->add_flag("--finetune", pb.finetune, "Also train the backbone");
  po->add_option("--out", pb.out, "Directory for report.txt and the resolved config");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Metric reports");
  ev->require_subcommand(1);
  auto* ed = ev->add_subcommand("dice", "Dice between two label volumes");
  ed->add_option("--pred", ea.pred, "Predicted labels")->required();
  ed->add_option("--truth", ea.truth, "Reference labels")->required();
  ed->add_option("--classes", ea.classes, "Classes including background");
  ed->add_option("--out", ea.out, "Directory for report.txt");
  auto* ec = ev->add_subcommand("clustering", "Clustering contrast of local features");
  ec->add_option("--config", ea.config, "JSON config (\"arch\")");
  ec->add_option("--checkpoint", ea.checkpoint, "Checkpoint, or none for random weights")->required();
  ec->add_option("--data", ea.data, "Dataset directory or manifest.json")->required();
  ec->add_option("--split", ea.split, "Dataset split")->check(CLI::IsMember({"train", "val", "test"}));
  ec->add_option("--samples", ea.samples, "Samples per class per image")->check(CLI::PositiveNumber);
  ec->add_option("--seed", ea.seed, "Sampling seed (also seeds random weights)");
  ec->add_option("--classes", ea.classes, "Classes including background");
  ec->add_option("--out", ea.out, "Directory for report.txt");
  auto* er = ev->add_subcommand("registration", "Score a displacement field against labels");
  er->add_option("--dvf", ea.dvf, "Predicted displacement field")->required();
  er->add_option("--moving-labels", ea.moving_labels, "Labels of the moving volume")->required();
  er->add_option("--fixed-labels", ea.fixed_labels, "Labels of the fixed volume")->required();
  er->add_option("--gt", ea.gt, "Ground-truth displacement field");
  er->add_option("--classes", ea.classes, "Classes including background");
  er->add_option("--out", ea.out, "Directory for report.txt");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (ph->parsed()) return cmd_phantom(pa, out);
    if (pr->parsed()) return cmd_pretrain(pt, out);
    if (rg->parsed()) return cmd_register(ra, out);
    if (au->parsed()) return cmd_augment(aa, out);
    if (po->parsed()) return cmd_probe(pb, out);
    if (ed->parsed()) return cmd_eval_dice(ea, out);
    if (ec->parsed()) return cmd_eval_clustering(ea, out);
    if (er->parsed()) return cmd_eval_registration(ea, out);
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ShapeError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const CompatibilityError& e) {
    err << "incompatible checkpoint: " << e.what() << "\n";
    return kCompatibility;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  }
  return kUsage;
}

}  // namespace gvsl::cli
