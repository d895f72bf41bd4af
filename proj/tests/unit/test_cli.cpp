#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "../../tools/commands.hpp"
#include "gvsl/io.hpp"
#include "gvsl/models.hpp"
#include "gvsl/phantom.hpp"
#include "gvsl/trainer.hpp"
#include "gvsl/transforms.hpp"
#include "test_util.hpp"

namespace gvsl {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

CliRun cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  CliRun r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

// key=value lines of a report.
std::map<std::string, std::string> parse_report(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

std::string slurp(const fs::path& p) { return io::read_file(p); }

void write_json(const fs::path& p, const json& j) { io::atomic_write(p, j.dump(2)); }

// A small dataset shared by the slower tests.
class CliData : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new test::TempDir("cli_data");
    const CliRun r = cli({"phantom", "--seed", "5", "--count", "6", "--extent", "16", "--out", data().string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path data() { return dir_->path() / "data"; }

  test::TempDir tmp_{"cli"};

 private:
  static test::TempDir* dir_;
};
test::TempDir* CliData::dir_ = nullptr;

TEST(CliUsage, NoArgumentsIsUsageError) { EXPECT_EQ(cli({}).code, 2); }

TEST(CliUsage, RegionsOutOfRange) {
  test::TempDir d("cli_regions");
  const CliRun r = cli({"phantom", "--regions", "1", "--out", (d / "x").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(fs::exists(d / "x" / "manifest.json"));
}

TEST(CliUsage, MissingInputIsIoError) {
  test::TempDir d("cli_missing");
  const CliRun r = cli({"augment", "--in", (d / "nope.gvol").string(), "--kind", "bezier", "--out",
                     (d / "o.gvol").string()});
  EXPECT_EQ(r.code, 3);
}

TEST(CliPhantom, DeterministicAndDefaultExtent) {
  test::TempDir d("cli_phantom");
  ASSERT_EQ(cli({"phantom", "--seed", "9", "--count", "2", "--out", (d / "a").string()}).code, 0);
  ASSERT_EQ(cli({"phantom", "--seed", "9", "--count", "2", "--out", (d / "b").string()}).code, 0);
  const json resolved = json::parse(slurp(d / "a" / "resolved_config.json"));
  EXPECT_EQ(resolved.at("extent").get<int>(), 32);
  EXPECT_EQ(resolved.at("seed").get<int>(), 9);
  const auto m = io::read_manifest(d / "a" / "manifest.json");
  ASSERT_EQ(m.entries.size(), 2u);
  for (const auto& e : m.entries) {
    for (const std::string* f : {&e.volume, &e.labels, &e.gt_dvf}) {
      EXPECT_EQ(slurp(d / "a" / *f), slurp(d / "b" / *f)) << *f;
    }
  }
  EXPECT_EQ(slurp(d / "a" / "manifest.json"), slurp(d / "b" / "manifest.json"));
}

TEST(CliAugment, UnknownKindIsUsageError) {
  test::TempDir d("cli_aug_kind");
  io::write_volume(d / "v.gvol", phantom::generate_phantom(1, {.extent = 16}).volume);
  const CliRun r = cli({"augment", "--in", (d / "v.gvol").string(), "--kind", "blur", "--out", (d / "o.gvol").string()});
  EXPECT_EQ(r.code, 2);
}

TEST(CliAugment, ReplayIsBitIdentical) {
  test::TempDir d("cli_aug_replay");
  io::write_volume(d / "v.gvol", phantom::generate_phantom(2, {.extent = 16}).volume);
  for (const char* kind : {"inpaint", "shuffle", "bezier"}) {
    const std::string k(kind);
    ASSERT_EQ(cli({"augment", "--in", (d / "v.gvol").string(), "--kind", k, "--seed", "4", "--out",
                   (d / (k + "1.gvol")).string()})
                  .code,
              0);
    ASSERT_EQ(cli({"augment", "--in", (d / "v.gvol").string(), "--spec", (d / (k + "1.spec.json")).string(),
                   "--out", (d / (k + "2.gvol")).string()})
                  .code,
              0);
    EXPECT_EQ(slurp(d / (k + "1.gvol")), slurp(d / (k + "2.gvol"))) << k;
    EXPECT_EQ(slurp(d / (k + "1.spec.json")), slurp(d / (k + "2.spec.json"))) << k;
  }
}

TEST(CliAugment, DiagonalBezierKeepsVolume) {
  test::TempDir d("cli_aug_diag");
  const Volume v = phantom::generate_phantom(3, {.extent = 16}).volume;
  io::write_volume(d / "v.gvol", v);
  transforms::TransformSpec s;
  s.kind = transforms::TransformKind::Bezier;
  s.p1 = {0.25, 0.25};
  s.p2 = {0.75, 0.75};
  write_json(d / "diag.json", s.to_json());
  ASSERT_EQ(cli({"augment", "--in", (d / "v.gvol").string(), "--spec", (d / "diag.json").string(), "--out",
                 (d / "o.gvol").string()})
                .code,
            0);
  const Volume o = io::read_volume(d / "o.gvol");
  ASSERT_EQ(o.data.numel(), v.data.numel());
  for (std::size_t i = 0; i < v.data.numel(); ++i) EXPECT_NEAR(o.data[i], v.data[i], 1e-6);
}

TEST(CliAugment, ShufflePreservesHistogram) {
  test::TempDir d("cli_aug_shuffle");
  const Volume v = phantom::generate_phantom(4, {.extent = 16}).volume;
  io::write_volume(d / "v.gvol", v);
  ASSERT_EQ(cli({"augment", "--in", (d / "v.gvol").string(), "--kind", "shuffle", "--seed", "8", "--out",
                 (d / "o.gvol").string()})
                .code,
            0);
  const Volume o = io::read_volume(d / "o.gvol");
  std::vector<double> a(v.data.data().begin(), v.data.data().end()), b(o.data.data().begin(), o.data.data().end());
  EXPECT_NE(a, b);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
}

TEST(CliRegister, ClassicalIdenticalInputs) {
  test::TempDir d("cli_reg_same");
  io::write_volume(d / "v.gvol", phantom::generate_phantom(6, {.extent = 16}).volume);
  const CliRun r = cli({"register", "--mode", "classical", "--fixed", (d / "v.gvol").string(), "--moving",
                     (d / "v.gvol").string(), "--affine-iters", "20", "--deform-iters", "0", "--out",
                     (d / "out").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto kv = parse_report(r.out);
  for (const char* k : {"affine.translation_x", "affine.translation_y", "affine.translation_z"}) {
    EXPECT_LT(std::abs(std::stod(kv.at(k))), 0.05) << k;
  }
  EXPECT_TRUE(fs::exists(d / "out" / "dvf.gvol"));
  EXPECT_TRUE(fs::exists(d / "out" / "warped.gvol"));
  EXPECT_EQ(slurp(d / "out" / "report.txt"), r.out);
  EXPECT_TRUE(fs::exists(d / "out" / "resolved_config.json"));
}

TEST(CliRegister, FreshNetworkGivesZeroField) {
  test::TempDir d("cli_reg_net");
  const phantom::Phantom p = phantom::generate_phantom(7, {.extent = 16});
  const phantom::PhantomPair pair = phantom::translated_pair(p, {2.0, 0.0, 0.0});
  io::write_volume(d / "m.gvol", pair.moving);
  io::write_volume(d / "f.gvol", pair.fixed);
  io::write_labels(d / "ml.gvol", pair.moving_labels);
  io::write_labels(d / "fl.gvol", pair.fixed_labels);
  io::write_dvf(d / "gt.gvol", pair.gt);
  const CliRun r = cli({"register", "--mode", "network", "--checkpoint", "none", "--fixed", (d / "f.gvol").string(),
                     "--moving", (d / "m.gvol").string(), "--moving-labels", (d / "ml.gvol").string(),
                     "--fixed-labels", (d / "fl.gvol").string(), "--gt", (d / "gt.gvol").string(), "--out",
                     (d / "out").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const geometry::Dvf f = io::read_dvf(d / "out" / "dvf.gvol");
  EXPECT_TRUE(std::all_of(f.field.data().begin(), f.field.data().end(), [](double v) { return v == 0.0; }));
  const auto kv = parse_report(r.out);
  EXPECT_DOUBLE_EQ(std::stod(kv.at("registration.mean_endpoint_error")), 2.0);
  EXPECT_DOUBLE_EQ(std::stod(kv.at("registration.negative_jacobian_percent")), 0.0);
}

TEST(CliRegister, GridMismatchIsUsageError) {
  test::TempDir d("cli_reg_grid");
  io::write_volume(d / "a.gvol", phantom::generate_phantom(1, {.extent = 16}).volume);
  io::write_volume(d / "b.gvol", phantom::generate_phantom(1, {.extent = 32}).volume);
  const CliRun r = cli({"register", "--fixed", (d / "a.gvol").string(), "--moving", (d / "b.gvol").string(), "--out",
                     (d / "out").string()});
  EXPECT_EQ(r.code, 2);
}

TEST_F(CliData, PretrainRowsRerunAndFrozenWeights) {
  const std::string data_dir = data().string();
  ASSERT_EQ(cli({"pretrain", "--data", data_dir, "--iters", "3", "--seed", "1", "--out", (tmp_ / "a").string()}).code,
            0);
  ASSERT_EQ(cli({"pretrain", "--data", data_dir, "--iters", "3", "--seed", "1", "--out", (tmp_ / "b").string()}).code,
            0);
  EXPECT_EQ(trainer::read_metrics_log(tmp_ / "a" / "metrics.csv").size(), 3u);
  EXPECT_EQ(slurp(tmp_ / "a" / "final.gvck"), slurp(tmp_ / "b" / "final.gvck"));
  EXPECT_EQ(slurp(tmp_ / "a" / "metrics.csv"), slurp(tmp_ / "b" / "metrics.csv"));

  const CliRun r = cli({"pretrain", "--data", data_dir, "--iters", "2", "--lr", "0", "--seed", "1", "--out",
                     (tmp_ / "frozen").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  trainer::TrainConfig cfg;
  cfg.seed = 1;
  EXPECT_EQ(models::weights_hash(trainer::load_weights(tmp_ / "frozen" / "final.gvck")),
            models::weights_hash(trainer::init_state(cfg).weights));
}

TEST_F(CliData, PretrainFlagsReachResolvedConfig) {
  const CliRun r = cli({"pretrain", "--data", data().string(), "--iters", "1", "--smooth-weight", "0.25", "--lr",
                        "0.002", "--no-restoration", "--out", (tmp_ / "run").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const json resolved = json::parse(slurp(tmp_ / "run" / "resolved_config.json"));
  EXPECT_EQ(resolved.at("smooth_weight").get<double>(), 0.25);
  EXPECT_EQ(resolved.at("lr").get<double>(), 0.002);
  EXPECT_FALSE(resolved.at("restoration").get<bool>());
  const auto h = trainer::read_metrics_log(tmp_ / "run" / "metrics.csv");
  ASSERT_EQ(h.size(), 1u);
  EXPECT_EQ(h[0].total, h[0].ncc + 0.25 * h[0].smooth);
}

TEST_F(CliData, ArchMismatchIsCompatibilityError) {
  ASSERT_EQ(cli({"pretrain", "--data", data().string(), "--iters", "1", "--out", (tmp_ / "run").string()}).code, 0);
  models::BackboneArch other;
  other.base_channels = 4;
  other.groups = 2;
  write_json(tmp_ / "arch.json", {{"arch", other.to_json()}});
  const auto m = io::read_manifest(data() / "manifest.json");
  const std::string vol = m.resolve(m.entries[0].volume).string();
  const CliRun r = cli({"register", "--mode", "network", "--checkpoint", (tmp_ / "run" / "final.gvck").string(),
                     "--config", (tmp_ / "arch.json").string(), "--fixed", vol, "--moving", vol, "--out",
                     (tmp_ / "reg").string()});
  EXPECT_EQ(r.code, 5);
  EXPECT_NE(r.err.find("incompatible"), std::string::npos);
}

TEST_F(CliData, ProbeDeterministicWithPerClassLines) {
  const std::vector<std::string> args = {"probe", "--checkpoint", "none",         "--data", data().string(),
                                         "--iters", "5",          "--seed",       "2"};
  const CliRun a = cli(args);
  const CliRun b = cli(args);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
  const auto kv = parse_report(a.out);
  EXPECT_EQ(kv.at("checkpoint"), "none");
  EXPECT_EQ(kv.at("probe.classes"), "5");
  for (int c = 0; c < 5; ++c) EXPECT_TRUE(kv.count("probe.dice.class" + std::to_string(c))) << c;
  EXPECT_TRUE(kv.count("probe.dice.mean_foreground"));
}

TEST_F(CliData, EvalDiceOfLabelsWithThemselves) {
  const auto m = io::read_manifest(data() / "manifest.json");
  const std::string lab = m.resolve(m.entries[0].labels).string();
  const CliRun r = cli({"eval", "dice", "--pred", lab, "--truth", lab, "--out", (tmp_ / "dice").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_DOUBLE_EQ(std::stod(parse_report(r.out).at("dice.mean_foreground")), 1.0);
  EXPECT_TRUE(fs::exists(tmp_ / "dice" / "report.txt"));
}

TEST_F(CliData, EvalClusteringReportsRatio) {
  const CliRun r = cli({"eval", "clustering", "--checkpoint", "none", "--data", data().string(), "--samples", "8"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(parse_report(r.out).count("clustering.ratio"));
}

}  // namespace
}  // namespace gvsl
