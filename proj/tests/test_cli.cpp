#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include <fodfkit/cli.hpp>

#include "test_helpers.hpp"

using namespace fodf;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "fodfkit");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), err);
  return {code, err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path write_config(const fs::path& dir, const std::string& name, const json& j) {
  const auto p = dir / name;
  std::ofstream(p) << j.dump(1);
  return p;
}

json inputs(const fs::path& ph) {
  return {{"dwi", (ph / "dwi.dwv.json").string()},
          {"bval", (ph / "dwi.bval").string()},
          {"bvec", (ph / "dwi.bvec").string()},
          {"mask", (ph / "mask.dwv.json").string()}};
}

}  // namespace

TEST(Cli, NoArgumentsPrintsUsage) {
  const auto r = run({});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
}

TEST(Cli, UsageErrors) {
  const auto dir = test::scratch_dir("cli");
  EXPECT_EQ(run({"bogus"}).code, 1);
  EXPECT_EQ(run({"scheme-gen"}).code, 1);  // no --out
  EXPECT_EQ(run({"scheme-gen", "--out", dir.string(), "--threads", "0"}).code, 1);
  EXPECT_EQ(run({"scheme-gen", "--out", dir.string(), "--config", (dir / "missing.json").string()}).code, 1);

  const auto unknown = write_config(dir, "unknown.json", {{"n_dirs", 10}, {"colour", "red"}});
  auto r = run({"scheme-gen", "--config", unknown.string(), "--out", (dir / "a").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("colour"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir / "a" / "resolved_config.json"));

  const auto nested = write_config(dir, "nested.json", {{"scan", {{"snr", 10}, {"noise", 1}}}});
  EXPECT_EQ(run({"phantom-gen", "--config", nested.string(), "--out", (dir / "b").string()}).code, 1);

  const auto model = write_config(dir, "model.json", {{"subjects", {inputs(dir)}}, {"model", {{"arch", "cnn"}, {"depth", 3}}}});
  EXPECT_EQ(run({"train", "--config", model.string(), "--out", (dir / "c").string()}).code, 1);

  std::ofstream(dir / "broken.json") << "{\"n_dirs\": ";
  EXPECT_EQ(run({"scheme-gen", "--config", (dir / "broken.json").string(), "--out", (dir / "d").string()}).code, 1);

  EXPECT_EQ(run({"sh-fit", "--out", (dir / "e").string()}).code, 1);  // required paths missing
  EXPECT_EQ(run({"predict", "--seed", "3", "--out", (dir / "f").string()}).code, 1);  // takes no seed

  const auto wrong_type = write_config(dir, "type.json", {{"n_dirs", "many"}});
  EXPECT_EQ(run({"scheme-gen", "--config", wrong_type.string(), "--out", (dir / "g").string()}).code, 1);
}

TEST(Cli, DataErrors) {
  const auto dir = test::scratch_dir("cli");
  std::ofstream(dir / "asym.csv") << "0,1,2\n1,0,1\n3,1,0\n";
  const auto cfg = write_config(dir, "cm.json", {{"connectome", (dir / "asym.csv").string()}});
  auto r = run({"connectome-metrics", "--config", cfg.string(), "--out", (dir / "a").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("AsymmetricMatrix"), std::string::npos);

  auto sh = inputs(dir / "nowhere");
  sh.erase("mask");
  const auto missing = write_config(dir, "sh.json", sh);
  EXPECT_EQ(run({"sh-fit", "--config", missing.string(), "--out", (dir / "b").string()}).code, 2);

  const auto few = write_config(dir, "keep.json", {{"n_dirs", 12}, {"n_b0", 1}});
  ASSERT_EQ(run({"scheme-gen", "--config", few.string(), "--out", (dir / "s").string()}).code, 0);
  const auto drop = write_config(dir, "drop.json",
                                 {{"bval", (dir / "s/scheme.bval").string()}, {"bvec", (dir / "s/scheme.bvec").string()}, {"keep", 44}});
  r = run({"scheme-drop", "--config", drop.string(), "--out", (dir / "c").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("KeepBelowShMinimum"), std::string::npos);
}

TEST(Cli, SchemeGenAndDrop) {
  const auto dir = test::scratch_dir("cli");
  ASSERT_EQ(run({"scheme-gen", "--seed", "5", "--out", (dir / "s").string()}).code, 0);
  const auto g = read_gradients(dir / "s/scheme.bval", dir / "s/scheme.bvec");
  EXPECT_EQ(g.size(), 102u);
  EXPECT_EQ(json::parse(slurp(dir / "s/resolved_config.json"))["seed"], 5);

  const auto cfg = write_config(dir, "drop.json",
                                {{"bval", (dir / "s/scheme.bval").string()}, {"bvec", (dir / "s/scheme.bvec").string()}, {"keep", 50}});
  ASSERT_EQ(run({"scheme-drop", "--config", cfg.string(), "--out", (dir / "d").string()}).code, 0);
  const auto sub = read_gradients(dir / "d/scheme.bval", dir / "d/scheme.bvec");
  EXPECT_EQ(sub.dw_indices().size(), 50u);
  EXPECT_EQ(sub.b0_indices().size(), 6u);
  const auto kept = json::parse(slurp(dir / "d/dropout.json"))["kept_indices"].get<std::vector<std::size_t>>();
  ASSERT_EQ(kept.size(), 56u);
  for (std::size_t i = 0; i < kept.size(); ++i) 
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(sub.bvecs[i][k], g.bvecs[kept[i]][k], 1e-9);
}

TEST(Cli, WilcoxonAndConnectomeOnFiles) {
  const auto dir = test::scratch_dir("cli");
  std::ofstream(dir / "x.json") << "[1, 2, 3, 4, 5, 6, 7, 8]";
  std::ofstream(dir / "y.json") << "[0, 0, 0, 0, 0, 0, 0, 0]";
  const auto cfg = write_config(dir, "w.json", {{"x", (dir / "x.json").string()}, {"y", (dir / "y.json").string()}});
  ASSERT_EQ(run({"wilcoxon", "--config", cfg.string(), "--out", (dir / "w").string()}).code, 0);
  const auto w = json::parse(slurp(dir / "w/wilcoxon.json"));
  EXPECT_EQ(w["w_plus"], 36.0);
  EXPECT_NEAR(w["p_value"].get<double>(), 2.0 / 256.0, 1e-15);

  std::ofstream(dir / "g.csv") << "0 1 0 0\n1 0 1 0\n0 1 0 1\n0 0 1 0\n";
  const auto cm = write_config(dir, "cm.json", {{"connectome", (dir / "g.csv").string()}});
  ASSERT_EQ(run({"connectome-metrics", "--config", cm.string(), "--out", (dir / "c").string()}).code, 0);
  const auto m = json::parse(slurp(dir / "c/metrics.json"));
  for (const char* k : {"modularity", "avg_betweenness", "char_path_length", "global_efficiency"}) EXPECT_TRUE(m.contains(k)) << k;
  EXPECT_NEAR(m["char_path_length"].get<double>(), 20.0 / 12.0, 1e-12);
}

// phantom-gen -> csd-fit -> train (beta 0.5) -> predict -> evaluate on a 16^3 phantom, then every stage again
// from its resolved config.
class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new fs::path(fs::temp_directory_path() / "fodfkit_cli_pipeline");
    fs::remove_all(*dir_);
    fs::create_directories(*dir_);
    const auto& d = *dir_;
    ASSERT_EQ(run({"phantom-gen", "--seed", "7", "--out", (d / "ph").string()}).code, 0);
    const auto ph = d / "ph";
    ASSERT_EQ(run({"csd-fit", "--config", write_config(d, "csd.json", inputs(ph)).string(), "--out", (d / "csd").string()}).code, 0);
    auto subject = inputs(ph);
    subject["rescan"] = (ph / "rescan.dwv.json").string();
    subject["label"] = (d / "csd/fodf.dwv.json").string();
    const json train = {{"subjects", {subject}},
                        {"model", {{"arch", "cnn"}, {"channels", 8}, {"hidden", 16}}},
                        {"epochs", 2},
                        {"beta", 0.5},
                        {"augmentation", {{"variants", 1}, {"keep_min", 60}}}};
    ASSERT_EQ(run({"train", "--config", write_config(d, "train.json", train).string(), "--out", (d / "train").string()}).code, 0);
    auto pred = inputs(ph);
    pred["model"] = (d / "train/model.model.json").string();
    ASSERT_EQ(run({"predict", "--config", write_config(d, "pred.json", pred).string(), "--out", (d / "pred").string()}).code, 0);
    const json ev = {{"a", (d / "pred/fodf.dwv.json").string()},
                     {"b", (d / "csd/fodf.dwv.json").string()},
                     {"mask", (ph / "mask.dwv.json").string()},
                     {"interior_only", true}};
    ASSERT_EQ(run({"evaluate", "--config", write_config(d, "eval.json", ev).string(), "--out", (d / "eval").string()}).code, 0);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static inline fs::path* dir_ = nullptr;
};

TEST_F(Pipeline, EmitsDeclaredFiles) {
  ASSERT_NE(dir_, nullptr);
  const std::map<std::string, std::vector<std::string>> expected{
      {"ph", {"dwi.dwv.json", "dwi.dwv.raw", "rescan.dwv.json", "mask.dwv.json", "gt_fodf.dwv.json", "dwi.bval", "dwi.bvec", "phantom.json"}},
      {"csd", {"fodf.dwv.json", "fodf.dwv.raw", "response.json", "qc.json"}},
      {"train", {"model.model.json", "model.model.raw", "training_log.json"}},
      {"pred", {"fodf.dwv.json", "fodf.dwv.raw"}},
      {"eval", {"acc.json", "acc_map.dwv.json", "md_map.dwv.json", "md.json"}}};
  for (const auto& [stage, files] : expected) {
    EXPECT_TRUE(fs::exists(*dir_ / stage / "resolved_config.json")) << stage;
    for (const auto& f : files) EXPECT_TRUE(fs::exists(*dir_ / stage / f)) << stage << "/" << f;
  }
  const auto ph = json::parse(slurp(*dir_ / "ph/phantom.json"));
  EXPECT_EQ(ph["phantom"]["geometry_seed"], 7);
  const auto vol = read_volume(*dir_ / "ph/dwi.dwv.json");
  EXPECT_EQ(vol.nx(), 16u);
  const auto log = json::parse(slurp(*dir_ / "train/training_log.json"));
  EXPECT_EQ(log["epochs"].size(), 2u);
  EXPECT_GT(log["pair_samples"].get<int>(), 0);
  const auto acc = json::parse(slurp(*dir_ / "eval/acc.json"));
  EXPECT_GT(acc["included_voxels"].get<int>(), 0);
  EXPECT_GT(acc["mean_acc"].get<double>(), 0.0);
}

TEST_F(Pipeline, RerunFromResolvedConfigIsByteIdentical) {
  ASSERT_NE(dir_, nullptr);
  const std::vector<std::pair<std::string, std::vector<std::string>>> stages{
      {"phantom-gen", {"phantom.json", "dwi.dwv.raw", "rescan.dwv.raw"}},
      {"csd-fit", {"qc.json", "response.json", "fodf.dwv.raw"}},
      {"train", {"training_log.json", "model.model.json", "model.model.raw"}},
      {"predict", {"fodf.dwv.raw"}},
      {"evaluate", {"acc.json", "md.json"}}};
  const std::map<std::string, std::string> dirs{
      {"phantom-gen", "ph"}, {"csd-fit", "csd"}, {"train", "train"}, {"predict", "pred"}, {"evaluate", "eval"}};
  for (const auto& [cmd, files] : stages) {
    const auto src = *dir_ / dirs.at(cmd);
    const auto again = *dir_ / (dirs.at(cmd) + "_rerun");
    ASSERT_EQ(run({cmd, "--config", (src / "resolved_config.json").string(), "--threads", "2", "--out", again.string()}).code, 0)
        << cmd;
    EXPECT_EQ(slurp(src / "resolved_config.json"), slurp(again / "resolved_config.json")) << cmd;
    for (const auto& f : files) EXPECT_EQ(slurp(src / f), slurp(again / f)) << cmd << " " << f;
  }
}

TEST_F(Pipeline, DegradeWilcoxonAndEnvThreads) {
  ASSERT_NE(dir_, nullptr);
  const auto& d = *dir_;
  auto cfg = inputs(d / "ph");
  cfg["reference"] = (d / "csd/fodf.dwv.json").string();
  cfg["counts"] = {60, 96};
  cfg["repeats"] = 2;
  const auto path = write_config(d, "degrade.json", cfg);
  ASSERT_EQ(run({"degrade", "--config", path.string(), "--out", (d / "deg1").string()}).code, 0);
  ::setenv("FODF_KIT_THREADS", "3", 1);
  set_thread_count(0);
  EXPECT_EQ(thread_count(), 3u);
  ASSERT_EQ(run({"degrade", "--config", path.string(), "--out", (d / "deg2").string()}).code, 0);
  ::unsetenv("FODF_KIT_THREADS");
  EXPECT_EQ(slurp(d / "deg1/degradation.json"), slurp(d / "deg2/degradation.json"));
  const auto curve = json::parse(slurp(d / "deg1/degradation.json"));
  ASSERT_EQ(curve["points"].size(), 2u);
  EXPECT_NEAR(curve["points"][1]["mean_acc"].get<double>(), 1.0, 1e-9);

  const json w = {{"x", (d / "eval/acc_map.dwv.json").string()},
                  {"y", (d / "eval_rerun/acc_map.dwv.json").string()},
                  {"mask", (d / "ph/mask.dwv.json").string()}};
  // Identical maps leave no nonzero differences.
  EXPECT_EQ(run({"wilcoxon", "--config", write_config(d, "w.json", w).string(), "--out", (d / "w").string()}).code, 2);
}
