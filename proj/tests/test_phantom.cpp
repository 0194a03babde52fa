#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include <fodfkit/csd.hpp>
#include <fodfkit/phantom.hpp>

#include "test_helpers.hpp"

using namespace fodf;

namespace {

const GradientScheme& scheme96() {
  static const GradientScheme g = default_phantom_scheme();
  return g;
}

// Direct evaluation: build each diffusion tensor as a 3x3 matrix and exponentiate the quadratic form.
double tensor_signal(const VoxelModel& m, double b, const Vec3& g) {
  double s = 0.0;
  for (const auto& c : m.compartments) {
    const Vec3 e = c.principal_dir.normalized();
    const Eigen::Matrix3d D = c.rd * Eigen::Matrix3d::Identity() + (c.ad - c.rd) * e * e.transpose();
    s += c.fraction * std::exp(-b * g.dot(D * g));
  }
  return m.s0 * s;
}

double mean_masked_acc(const Volume4D& a, const Volume4D& b, const Volume4D& mask) {
  double sum = 0.0;
  int n = 0;
  for (std::size_t v = 0; v < mask.voxel_count(); ++v) {
    if (!mask.masked(v)) continue;
    auto r = try_acc(ShCoeffs::from_span(a.sh_order, a.voxel(v)), ShCoeffs::from_span(b.sh_order, b.voxel(v)));
    if (!r) continue;
    sum += *r;
    ++n;
  }
  return sum / n;
}

}  // namespace

TEST(SimulateSignal, AllBZeroGivesS0) {
  GradientScheme g;
  for (int i = 0; i < 5; ++i) {
    g.bvals.push_back(0.0);
    g.bvecs.push_back({0.0, 0.0, 0.0});
  }
  VoxelModel m;
  m.s0 = 3.5;
  m.compartments.push_back({1.0, Vec3::UnitX(), 1.7e-3, 0.2e-3});
  auto s = simulate_signal(m, g);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(s[i], 3.5);
}

TEST(SimulateSignal, IsotropicClosedForm) {
  VoxelModel m = VoxelModel::isotropic(1.1e-3, 2.0);
  auto s = simulate_signal(m, scheme96());
  for (std::size_t i = 0; i < scheme96().size(); ++i)
    EXPECT_NEAR(s[static_cast<Eigen::Index>(i)], 2.0 * std::exp(-scheme96().bvals[i] * 1.1e-3), 1e-14);
}

TEST(SimulateSignal, CrossingMatchesDirectTensorEvaluation) {
  VoxelModel m;
  m.compartments.push_back({0.5, Vec3::UnitX(), 1.7e-3, 0.2e-3});
  m.compartments.push_back({0.5, Vec3::UnitY(), 1.7e-3, 0.2e-3});
  auto grid = fibonacci_sphere(5000);
  GradientScheme g;
  for (const auto& d : grid.dirs) {
    g.bvals.push_back(2000.0);
    g.bvecs.push_back({d.x(), d.y(), d.z()});
  }
  auto s = simulate_signal(m, g);
  for (std::size_t i = 0; i < grid.size(); ++i)
    EXPECT_NEAR(s[static_cast<Eigen::Index>(i)], tensor_signal(m, 2000.0, grid[i]), 1e-13);
  // Each fiber axis is the signal minimum on the great circle through it and the plane normal (z);
  // within the fiber plane the in-between diagonals are lower still, so the axes are saddles.
  for (const Vec3& axis : {Vec3::UnitX(), Vec3::UnitY()}) {
    const double on_axis = tensor_signal(m, 2000.0, axis);
    for (int a = 1; a < 360; ++a) {
      const double t = a * std::numbers::pi / 180.0;
      const Vec3 d = std::cos(t) * axis + std::sin(t) * Vec3::UnitZ();
      if (a != 180) EXPECT_GT(tensor_signal(m, 2000.0, d), on_axis);
    }
  }
  const double diag = tensor_signal(m, 2000.0, Vec3(1, 1, 0).normalized());
  double grid_min = s.minCoeff();
  EXPECT_NEAR(grid_min, diag, 5e-3);
  EXPECT_LT(diag, tensor_signal(m, 2000.0, Vec3::UnitX()));
}

TEST(GroundTruthFodf, SingleFiberAlongZIsZonal) {
  VoxelModel m;
  m.compartments.push_back({1.0, Vec3::UnitZ(), 1.7e-3, 0.2e-3});
  auto c = ground_truth_fodf(m, 8);
  for (int k = 0; k <= 8; k += 2)
    for (int m_ = -k; m_ <= k; ++m_)
      if (m_ != 0) EXPECT_NEAR(c[sh_index(k, m_)], 0.0, 1e-10);
  EXPECT_GT(c[sh_index(2, 0)], 0.0);
}

TEST(GroundTruthFodf, EqualCrossingPeaksOnAxes) {
  VoxelModel m;
  m.compartments.push_back({0.5, Vec3::UnitX(), 1.7e-3, 0.2e-3});
  m.compartments.push_back({0.5, Vec3::UnitY(), 1.7e-3, 0.2e-3});
  auto c = ground_truth_fodf(m, 8);
  auto grid = fibonacci_sphere(20000);
  auto amp = eval_sh(c, grid);
  // Local maxima: grid points above every neighbor within 10 degrees, and at least half the global max.
  std::vector<Vec3> peaks;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (amp[static_cast<Eigen::Index>(i)] < 0.5 * amp.maxCoeff()) continue;
    bool is_max = true;
    for (std::size_t j = 0; j < grid.size() && is_max; ++j)
      if (j != i && grid[i].dot(grid[j]) > std::cos(10.0 * std::numbers::pi / 180.0) &&
          amp[static_cast<Eigen::Index>(j)] > amp[static_cast<Eigen::Index>(i)])
        is_max = false;
    if (is_max) peaks.push_back(grid[i]);
  }
  ASSERT_EQ(peaks.size(), 4u);  // +-x and +-y
  for (const auto& p : peaks)
    EXPECT_LT(std::min(axis_angle_deg(p, Vec3::UnitX()), axis_angle_deg(p, Vec3::UnitY())), 1.5);
}

TEST(GroundTruthFodf, MixtureDegeneracy) {
  const Vec3 d = Vec3(1, 2, 3).normalized();
  VoxelModel a, b;
  a.compartments.push_back({1.0, d, 1.7e-3, 0.2e-3});
  b.compartments.push_back({0.5, d, 1.7e-3, 0.2e-3});
  b.compartments.push_back({0.5, d, 1.7e-3, 0.2e-3});
  auto ca = ground_truth_fodf(a), cb = ground_truth_fodf(b);
  for (std::size_t i = 0; i < ca.size(); ++i) EXPECT_NEAR(ca[i], cb[i], 1e-15);
}

TEST(GroundTruthFodf, AntipodalFiberIsSameFiber) {
  VoxelModel a, b;
  const Vec3 d = Vec3(0.3, -0.2, 0.9).normalized();
  a.compartments.push_back({1.0, d, 1.7e-3, 0.2e-3});
  b.compartments.push_back({1.0, -d, 1.7e-3, 0.2e-3});
  auto ca = ground_truth_fodf(a), cb = ground_truth_fodf(b);
  for (std::size_t i = 0; i < ca.size(); ++i) EXPECT_NEAR(ca[i], cb[i], 1e-14);
}

TEST(GeneratePhantom, ShapeTooSmall) {
  PhantomConfig cfg;
  cfg.shape = {2, 8, 8};
  EXPECT_FODF_ERROR(generate_phantom(cfg, scheme96(), {}), ErrorCode::ShapeTooSmall);
}

TEST(GeneratePhantom, NoiselessReproducesSimulateSignal) {
  PhantomConfig cfg;
  cfg.shape = {6, 5, 4};
  ScanProfile p;
  p.snr = 1e6;
  auto ph = generate_phantom(cfg, scheme96(), p);
  for (std::size_t v = 0; v < ph.scan.dwi.voxel_count(); ++v) {
    const auto [x, y, z] = ph.scan.dwi.voxel_coords(v);
    const auto s = simulate_signal(phantom_voxel_model(cfg, x, y, z), scheme96());
    const auto vox = ph.scan.dwi.voxel(v);
    for (std::size_t i = 0; i < vox.size(); ++i) ASSERT_EQ(vox[i], static_cast<float>(s[static_cast<Eigen::Index>(i)]));
  }
}

TEST(GeneratePhantom, DeterministicForSameSeed) {
  PhantomConfig cfg;
  cfg.shape = {6, 6, 6};
  cfg.geometry_seed = 4;
  ScanProfile p;
  p.seed = 9;
  auto a = generate_phantom(cfg, scheme96(), p);
  auto b = generate_phantom(cfg, scheme96(), p);
  EXPECT_EQ(a.scan.dwi.data, b.scan.dwi.data);
  EXPECT_EQ(a.gt_fodf.data, b.gt_fodf.data);
  EXPECT_EQ(a.mask.data, b.mask.data);
  p.seed = 10;
  auto c = generate_phantom(cfg, scheme96(), p);
  EXPECT_NE(a.scan.dwi.data, c.scan.dwi.data);
}

TEST(GeneratePhantom, IndependentOfThreadCount) {
  PhantomConfig cfg;
  cfg.shape = {6, 6, 6};
  set_thread_count(1);
  auto a = generate_phantom(cfg, scheme96(), {});
  set_thread_count(3);
  auto b = generate_phantom(cfg, scheme96(), {});
  set_thread_count(0);
  EXPECT_EQ(a.scan.dwi.data, b.scan.dwi.data);
}

TEST(GeneratePhantom, MixedCrossingFraction) {
  for (double ratio : {0.25, 0.5, 0.75}) {
    PhantomConfig cfg;
    cfg.crossing_ratio = ratio;
    ScanProfile p;
    p.snr = 1e6;
    auto ph = generate_phantom(cfg, scheme96(), p);
    std::size_t fib = 0, cross = 0;
    for (auto c : ph.fiber_count) {
      fib += c > 0;
      cross += c == 2;
    }
    EXPECT_EQ(fib, 14u * 14u * 14u);
    EXPECT_NEAR(static_cast<double>(cross) / static_cast<double>(fib), ratio, 0.05);
  }
}

TEST(GeneratePhantom, MaskMarksFiberVoxels) {
  PhantomConfig cfg;
  cfg.shape = {5, 5, 5};
  auto ph = generate_phantom(cfg, scheme96(), {});
  for (std::size_t v = 0; v < ph.mask.voxel_count(); ++v)
    EXPECT_EQ(ph.mask.masked(v), ph.fiber_count[v] > 0);
  EXPECT_TRUE(ph.mask.masked(ph.mask.voxel_index(2, 2, 2)));
  EXPECT_FALSE(ph.mask.masked(ph.mask.voxel_index(0, 2, 2)));
}

TEST(GeneratePhantom, RicianNoiseLevel) {
  // Isotropic interior at b=0: noisy magnitude has mean sqrt(pi/2)*sigma*L_{1/2}(-s^2/2sigma^2); with s=1,
  // sigma=0.05 the bias is below 1e-3 and the spread is sigma.
  PhantomConfig cfg;
  cfg.shape = {12, 12, 12};
  cfg.isotropic_interior = true;
  ScanProfile p;
  p.snr = 20.0;
  auto ph = generate_phantom(cfg, scheme96(), p);
  double sum = 0.0, sq = 0.0;
  int n = 0;
  for (std::size_t v = 0; v < ph.scan.dwi.voxel_count(); ++v)
    for (auto i : scheme96().b0_indices()) {
      const double s = ph.scan.dwi.voxel(v)[i];
      sum += s;
      sq += s * s;
      ++n;
    }
  const double mean = sum / n;
  const double sd = std::sqrt(sq / n - mean * mean);
  EXPECT_NEAR(mean, 1.0, 5e-3);
  EXPECT_NEAR(sd, 0.05, 2.5e-3);
}

TEST(MakeRescan, MissingNoiselessSource) {
  PhantomScan s{Volume4D({3, 3, 3, scheme96().size()}, VolumeKind::dwi_signal), std::nullopt};
  EXPECT_FODF_ERROR(make_rescan(s, scheme96(), {}), ErrorCode::MissingNoiselessSource);
}

TEST(MakeRescan, SameProfileIsBitIdentical) {
  PhantomConfig cfg;
  cfg.shape = {5, 5, 5};
  ScanProfile p;
  p.seed = 3;
  auto ph = generate_phantom(cfg, scheme96(), p);
  auto r = make_rescan(ph.scan, scheme96(), p);
  EXPECT_EQ(r.dwi.data, ph.scan.dwi.data);
}

class RescanCsd : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    PhantomConfig cfg;
    cfg.shape = {8, 8, 8};
    cfg.geometry_seed = 1;
    ScanProfile p;
    p.seed = 100;
    ph_ = new PhantomData(generate_phantom(cfg, scheme96(), p));
    rf_ = new ResponseFunction(estimate_response(ph_->scan.dwi, scheme96(), ph_->mask));
  }
  static void TearDownTestSuite() {
    delete ph_;
    delete rf_;
  }
  static Volume4D fit(const Volume4D& dwi) { return fit_volume(dwi, scheme96(), ph_->mask, *rf_).fodf; }
  static inline PhantomData* ph_ = nullptr;
  static inline ResponseFunction* rf_ = nullptr;
};

TEST_F(RescanCsd, IndependentNoiseDecorrelates) {
  ScanProfile p;
  p.seed = 101;
  auto r = make_rescan(ph_->scan, scheme96(), p);
  const double a = mean_masked_acc(fit(ph_->scan.dwi), fit(r.dwi), ph_->mask);
  EXPECT_LT(a, 1.0);
  EXPECT_GT(a, 0.8);
}

TEST_F(RescanCsd, GainScalesSignalButNotShape) {
  ScanProfile p;
  p.seed = 100;
  p.gain = 1.1;
  auto r = make_rescan(ph_->scan, scheme96(), p);
  for (std::size_t i = 0; i < r.dwi.data.size(); ++i)
    ASSERT_NEAR(r.dwi.data[i], 1.1 * ph_->scan.dwi.data[i], 1e-6 * std::max(1.0f, std::abs(r.dwi.data[i])));
  EXPECT_GT(mean_masked_acc(fit(ph_->scan.dwi), fit(r.dwi), ph_->mask), 1.0 - 1e-5);
}

TEST_F(RescanCsd, JitterPerturbsSignal) {
  ScanProfile p;
  p.snr = 1e6;
  p.direction_jitter_deg = 3.0;
  auto r = make_rescan(ph_->scan, scheme96(), p);
  ScanProfile clean;
  clean.snr = 1e6;
  auto c = make_rescan(ph_->scan, scheme96(), clean);
  EXPECT_NE(r.dwi.data, c.dwi.data);
  const double a = mean_masked_acc(fit(c.dwi), fit(r.dwi), ph_->mask);
  EXPECT_LT(a, 1.0);
  EXPECT_GT(a, 0.9);
}

TEST(ScanProfile, JsonRoundTrip) {
  ScanProfile p;
  p.snr = 12.5;
  p.direction_jitter_deg = 2.0;
  p.gain = 0.9;
  p.seed = 77;
  auto q = scan_profile_from_json(to_json(p));
  EXPECT_EQ(q.snr, p.snr);
  EXPECT_EQ(q.direction_jitter_deg, p.direction_jitter_deg);
  EXPECT_EQ(q.gain, p.gain);
  EXPECT_EQ(q.seed, p.seed);
}
