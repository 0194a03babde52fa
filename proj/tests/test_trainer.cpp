#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include <fodfkit/csd.hpp>
#include <fodfkit/phantom.hpp>
#include <fodfkit/trainer.hpp>

#include "test_helpers.hpp"

using namespace fodf;

namespace {

const GradientScheme& scheme96() {
  static const GradientScheme g = default_phantom_scheme();
  return g;
}

Volume4D ramp_sh(std::size_t n) {
  Volume4D v({n, n, n, 45}, VolumeKind::sh_signal, 8);
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = static_cast<float>(i % 1009) * 0.001f;
  return v;
}

Volume4D mask_of(std::size_t n, bool fill) {
  Volume4D m({n, n, n, 1}, VolumeKind::mask);
  if (fill) std::fill(m.data.begin(), m.data.end(), 1.0f);
  return m;
}

nlohmann::json tiny_cnn() { return {{"arch", "cnn"}, {"channels", 4}, {"hidden", 8}}; }
nlohmann::json tiny_mlp() { return {{"arch", "mlp"}, {"widths", {45, 16, 45}}}; }

// Two small noisy subjects with CSD labels, dropout variants and scan/rescan pairs.
struct Cohort {
  std::vector<SubjectData> subjects;
};

SubjectData make_subject(std::uint64_t geometry_seed, std::uint64_t noise_seed, std::size_t n) {
  PhantomConfig cfg;
  cfg.shape = {n, n, n};
  cfg.geometry_seed = geometry_seed;
  ScanProfile scan;
  scan.snr = 30.0;
  scan.seed = noise_seed;
  const auto ph = generate_phantom(cfg, scheme96(), scan);
  ScanProfile re = scan;
  re.seed = noise_seed + 100;
  const auto rescan = make_rescan(ph.scan, scheme96(), re);
  const auto rf = estimate_response(ph.scan.dwi, scheme96(), ph.mask);
  SubjectData s;
  s.inputs.push_back(fit_signal_sh(ph.scan.dwi, scheme96(), 8));
  s.input_directions.push_back(96);
  for (auto& a : augment_subject(ph.scan.dwi, scheme96(), 2, {60, 80}, noise_seed)) {
    s.inputs.push_back(std::move(a.sh));
    s.input_directions.push_back(a.kept_directions);
  }
  s.label = fit_volume(ph.scan.dwi, scheme96(), ph.mask, rf).fodf;
  s.mask = ph.mask;
  s.pair = std::make_pair(s.inputs.front(), fit_signal_sh(rescan.dwi, scheme96(), 8));
  return s;
}

const Cohort& cohort() {
  static const Cohort c = [] {
    Cohort c;
    c.subjects.push_back(make_subject(1, 11, 7));
    c.subjects.push_back(make_subject(2, 22, 7));
    return c;
  }();
  return c;
}

TrainConfig small_config(const nlohmann::json& model, std::size_t epochs, double beta) {
  TrainConfig c;
  c.model = model;
  c.epochs = epochs;
  c.batch_size = 16;
  c.weights = {1.0, beta};
  c.seed = 5;
  return c;
}

}  // namespace

TEST(ExtractPatches, CenterOnlyMaskGivesOnePatch) {
  auto m = mask_of(3, false);
  m.data[m.voxel_index(1, 1, 1)] = 1.0f;
  const auto patches = extract_patches(ramp_sh(3), m);
  ASSERT_EQ(patches.size(), 1u);
  EXPECT_EQ(patches[0].voxel, m.voxel_index(1, 1, 1));
  EXPECT_EQ(patches[0].patch.size(), 27u * 45u);
}

TEST(ExtractPatches, FullMaskSkipsBoundary) {
  EXPECT_EQ(extract_patches(ramp_sh(5), mask_of(5, true)).size(), 27u);
}

TEST(ExtractPatches, CenterMatchesVoxelAndNeighborsInOrder) {
  const auto sh = ramp_sh(5);
  for (const auto& p : extract_patches(sh, mask_of(5, true))) {
    const auto [x, y, z] = sh.voxel_coords(p.voxel);
    for (std::size_t dx = 0; dx < 3; ++dx)
      for (std::size_t dy = 0; dy < 3; ++dy)
        for (std::size_t dz = 0; dz < 3; ++dz) {
          const auto src = sh.voxel(sh.voxel_index(x + dx - 1, y + dy - 1, z + dz - 1));
          const std::size_t k = (dx * 3 + dy) * 3 + dz;
          for (std::size_t c = 0; c < 45; ++c) ASSERT_EQ(p.patch[k * 45 + c], src[c]);
        }
  }
}

TEST(ExtractPatches, OutOfMaskNeighborsKeptAsContext) {
  auto m = mask_of(3, false);
  m.data[m.voxel_index(1, 1, 1)] = 1.0f;
  const auto sh = ramp_sh(3);
  const auto p = extract_patches(sh, m).at(0);
  EXPECT_EQ(p.patch[0], sh.voxel(0)[0]);
}

TEST(ExtractPatches, Preconditions) {
  Volume4D dwi({5, 5, 5, 45}, VolumeKind::dwi_signal);
  EXPECT_FODF_ERROR(extract_patches(dwi, mask_of(5, true)), ErrorCode::ShapeMismatch);
  EXPECT_FODF_ERROR(extract_patches(ramp_sh(5), mask_of(4, true)), ErrorCode::DimsMismatch);
}

class Augment : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    PhantomConfig cfg;
    cfg.shape = {5, 5, 5};
    ScanProfile p;
    p.seed = 9;
    dwi_ = new Volume4D(generate_phantom(cfg, scheme96(), p).scan.dwi);
  }
  static void TearDownTestSuite() { delete dwi_; }
  static inline Volume4D* dwi_ = nullptr;
};

TEST_F(Augment, KeepAllEqualsUnaugmented) {
  const auto v = augment_subject(*dwi_, scheme96(), 2, {96, 96}, 4);
  const auto full = fit_signal_sh(*dwi_, scheme96(), 8);
  ASSERT_EQ(v.size(), 2u);
  for (const auto& a : v) {
    EXPECT_EQ(a.kept_directions, 96u);
    EXPECT_EQ(a.sh.kind, VolumeKind::sh_signal);
    EXPECT_EQ(a.sh.data, full.data);
  }
}

TEST_F(Augment, TenDropoutsAtFloorAreDistinctAndUniform) {
  const auto v = augment_subject(*dwi_, scheme96(), 10, {45, 45}, 17);
  ASSERT_EQ(v.size(), 10u);
  const auto full_dirs = dw_directions(scheme96());
  std::set<std::vector<std::size_t>> seen;
  for (const auto& a : v) {
    EXPECT_EQ(a.kept_directions, 45u);
    EXPECT_EQ(a.kept_indices.size(), 45u + scheme96().b0_indices().size());
    const auto sub = subset_scheme(scheme96(), a.kept_indices);
    EXPECT_TRUE(uniformity_check(dw_directions(sub), full_dirs));
    seen.insert(a.kept_indices);
  }
  EXPECT_EQ(seen.size(), 10u);
}

TEST_F(Augment, SeededAndCountsInRange) {
  const auto a = augment_subject(*dwi_, scheme96(), 6, {50, 90}, 3);
  const auto b = augment_subject(*dwi_, scheme96(), 6, {50, 90}, 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_GE(a[i].kept_directions, 50u);
    EXPECT_LE(a[i].kept_directions, 90u);
    EXPECT_EQ(a[i].kept_indices, b[i].kept_indices);
    EXPECT_EQ(a[i].sh.data, b[i].sh.data);
  }
}

TEST_F(Augment, RangeErrors) {
  EXPECT_FODF_ERROR(augment_subject(*dwi_, scheme96(), 1, {44, 60}, 0), ErrorCode::KeepBelowShMinimum);
  EXPECT_FODF_ERROR(augment_subject(*dwi_, scheme96(), 1, {60, 97}, 0), ErrorCode::InvariantViolation);
  EXPECT_FODF_ERROR(augment_subject(*dwi_, scheme96(), 1, {60, 50}, 0), ErrorCode::InvariantViolation);
}

TEST(Predict, MatchesSinglePatchForward) {
  const auto p = init_model<float>(tiny_cnn(), 1);
  const auto sh = ramp_sh(5);
  auto m = mask_of(5, true);
  const auto out = predict_volume(p, sh, m);
  EXPECT_EQ(out.kind, VolumeKind::sh_fodf);
  for (const auto& patch : extract_patches(sh, m)) {
    const auto y = forward_cnn(p, std::span<const float>(patch.patch));
    const auto o = out.voxel(patch.voxel);
    for (std::size_t k = 0; k < 45; ++k) EXPECT_NEAR(o[k], y.c[static_cast<Eigen::Index>(k)], 1e-5);
  }
  for (float x : out.voxel(0)) EXPECT_EQ(x, 0.0f);
}

TEST(Predict, MlpCoversEveryMaskedVoxel) {
  const auto p = init_model<float>(tiny_mlp(), 1);
  const auto sh = ramp_sh(4);
  const auto out = predict_volume(p, sh, mask_of(4, true));
  const auto y = forward_mlp(p, ShCoeffs::from_span(8, sh.voxel(0)));
  for (std::size_t k = 0; k < 45; ++k) EXPECT_NEAR(out.voxel(0)[k], y.c[static_cast<Eigen::Index>(k)], 1e-5);
}

TEST(Predict, IndependentOfThreadCount) {
  const auto p = init_model<float>(tiny_cnn(), 2);
  const auto sh = ramp_sh(12);
  set_thread_count(1);
  const auto a = predict_volume(p, sh, mask_of(12, true));
  set_thread_count(3);
  const auto b = predict_volume(p, sh, mask_of(12, true));
  set_thread_count(0);
  EXPECT_EQ(a.data, b.data);
}

TEST(Train, Preconditions) {
  EXPECT_FODF_ERROR(train(small_config(tiny_cnn(), 1, 0.0), {}), ErrorCode::EmptyMask);
  auto s = cohort().subjects;
  for (auto& x : s) x.pair.reset();
  EXPECT_FODF_ERROR(train(small_config(tiny_cnn(), 1, 0.5), s), ErrorCode::NoPairsForBeta);
  EXPECT_NO_THROW(train(small_config(tiny_cnn(), 1, 0.0), s));
}

TEST(Train, NonFiniteLossIsDivergence) {
  auto s = cohort().subjects;
  std::fill(s[0].label.data.begin(), s[0].label.data.end(), std::numeric_limits<float>::quiet_NaN());
  EXPECT_FODF_ERROR(train(small_config(tiny_mlp(), 2, 0.0), s), ErrorCode::DivergenceDetected);
}

TEST(Train, IdenticalRunsGiveIdenticalLogsAndParams) {
  const auto cfg = small_config(tiny_cnn(), 3, 0.5);
  const auto a = train(cfg, cohort().subjects);
  set_thread_count(3);
  const auto b = train(cfg, cohort().subjects);
  set_thread_count(0);
  EXPECT_EQ(to_json(a.log).dump(), to_json(b.log).dump());
  EXPECT_TRUE(a.params == b.params);
}

TEST(Train, SelectsBestValidationEpoch) {
  const auto r = train(small_config(tiny_mlp(), 6, 0.5), cohort().subjects);
  ASSERT_EQ(r.log.epochs.size(), 6u);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& e : r.log.epochs) best = std::min(best, e.val_loss1);
  EXPECT_EQ(r.log.best_val_loss1, best);
  EXPECT_EQ(r.log.epochs.at(r.log.best_epoch - 1).val_loss1, best);
}

TEST(Train, ReducesValidationLoss) {
  auto cfg = small_config(tiny_mlp(), 15, 0.0);
  cfg.lr = 3e-3;
  const auto r = train(cfg, cohort().subjects);
  EXPECT_LT(r.log.best_val_loss1, 0.5 * r.log.epochs.front().val_loss1);
  EXPECT_GT(r.log.epochs.at(r.log.best_epoch - 1).val_acc, r.log.epochs.front().val_acc);
}

TEST(Train, HoldsOutTrailingSlabs) {
  const auto r = train(small_config(tiny_cnn(), 1, 0.0), cohort().subjects);
  std::size_t total = 0;
  for (const auto& s : cohort().subjects) total += patch_voxels(s.mask).size();
  EXPECT_EQ(r.log.train_samples + r.log.val_samples, total);
  EXPECT_GT(r.log.val_samples, 0u);
  EXPECT_LT(r.log.val_samples, r.log.train_samples);
}

TEST(Train, LogsRetainedDirectionCounts) {
  const auto r = train(small_config(tiny_mlp(), 4, 0.0), cohort().subjects);
  std::set<std::size_t> available, drawn;
  for (const auto& s : cohort().subjects) available.insert(s.input_directions.begin(), s.input_directions.end());
  std::size_t total = 0;
  for (const auto& [n, c] : r.log.direction_counts) {
    drawn.insert(n);
    total += c;
  }
  EXPECT_EQ(drawn, available);
  EXPECT_EQ(total, 4 * r.log.train_samples);
}

TEST(Train, PairsFromOtherSubjectUnlessAlone) {
  const auto two = train(small_config(tiny_mlp(), 1, 0.5), cohort().subjects);
  EXPECT_FALSE(two.log.pairs_same_subject);
  EXPECT_TRUE(two.log.warnings.empty());
  const std::vector<SubjectData> one{cohort().subjects[0]};
  const auto single = train(small_config(tiny_mlp(), 1, 0.5), one);
  EXPECT_TRUE(single.log.pairs_same_subject);
  EXPECT_EQ(single.log.warnings.size(), 1u);
}

TEST(Train, BetaZeroIgnoresPairs) {
  auto with = cohort().subjects;
  auto without = cohort().subjects;
  for (auto& s : without) s.pair.reset();
  const auto a = train(small_config(tiny_cnn(), 2, 0.0), with);
  const auto b = train(small_config(tiny_cnn(), 2, 0.0), without);
  EXPECT_TRUE(a.params == b.params);
}
