#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "error.hpp"
#include "geometry.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "sh.hpp"
#include "sphere.hpp"
#include "volume_io.hpp"

namespace fodf {

inline constexpr double kDefaultAxialDiffusivity = 1.7e-3;
inline constexpr double kDefaultRadialDiffusivity = 0.2e-3;
inline constexpr double kFreeWaterDiffusivity = 3.0e-3;

struct Compartment {
  double fraction = 1.0;
  Vec3 principal_dir = Vec3::UnitZ();
  double ad = kDefaultAxialDiffusivity;  // mm^2/s
  double rd = kDefaultRadialDiffusivity;

  bool is_fiber() const { return ad > rd; }
};

/// Multi-tensor voxel: S(b, g) = s0 * sum_i f_i exp(-b g^T D_i g).
struct VoxelModel {
  std::vector<Compartment> compartments;
  double s0 = 1.0;

  void validate() const {
    double total = 0.0;
    for (const auto& c : compartments) {
      if (c.fraction < 0.0 || c.fraction > 1.0) fail(ErrorCode::InvariantViolation, "fraction outside [0,1]");
      if (!(c.ad >= c.rd && c.rd >= 0.0)) fail(ErrorCode::InvariantViolation, "need ad >= rd >= 0");
      total += c.fraction;
    }
    if (std::abs(total - 1.0) > 1e-9) fail(ErrorCode::InvariantViolation, "fractions must sum to 1");
  }

  std::size_t fiber_count() const {
    std::size_t n = 0;
    for (const auto& c : compartments) n += c.is_fiber() ? 1 : 0;
    return n;
  }

  static VoxelModel isotropic(double d = kFreeWaterDiffusivity, double s0 = 1.0) {
    return {{{1.0, Vec3::UnitZ(), d, d}}, s0};
  }
};

struct ScanProfile {
  double snr = 20.0;  // relative to s0; >= 1e6 disables noise
  double direction_jitter_deg = 0.0;
  double gain = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(snr > 0.0)) fail(ErrorCode::InvariantViolation, "snr must be positive");
    if (!(gain > 0.0)) fail(ErrorCode::InvariantViolation, "gain must be positive");
    if (direction_jitter_deg < 0.0) fail(ErrorCode::InvariantViolation, "jitter must be nonnegative");
  }
  bool noiseless() const { return snr >= 1e6; }
};

inline nlohmann::json to_json(const ScanProfile& p) {
  return {{"snr", p.snr}, {"direction_jitter_deg", p.direction_jitter_deg}, {"gain", p.gain}, {"seed", p.seed}};
}

inline ScanProfile scan_profile_from_json(const nlohmann::json& j) {
  ScanProfile p;
  p.snr = j.value("snr", p.snr);
  p.direction_jitter_deg = j.value("direction_jitter_deg", p.direction_jitter_deg);
  p.gain = j.value("gain", p.gain);
  p.seed = j.value("seed", p.seed);
  p.validate();
  return p;
}

/// Noiseless multi-tensor signal for every entry of the scheme.
inline Eigen::VectorXd simulate_signal(const VoxelModel& m, const GradientScheme& scheme) {
  Eigen::VectorXd s(static_cast<Eigen::Index>(scheme.size()));
  for (std::size_t i = 0; i < scheme.size(); ++i) {
    const double b = scheme.bvals[i];
    const Vec3 g(scheme.bvecs[i][0], scheme.bvecs[i][1], scheme.bvecs[i][2]);
    double v = 0.0;
    for (const auto& c : m.compartments) {
      const double cos2 = b > 0.0 ? std::pow(g.dot(c.principal_dir.normalized()), 2) : 0.0;
      v += c.fraction * std::exp(-b * (c.rd + (c.ad - c.rd) * cos2));
    }
    s[static_cast<Eigen::Index>(i)] = m.s0 * v;
  }
  return s;
}

/// SH projection of sum_i f_i * delta(+-d_i) over the fiber compartments. The even-order projection of a
/// point mass at d is Y_j(d), so the coefficients are exact rather than quadrature approximations.
inline ShCoeffs ground_truth_fodf(const VoxelModel& m, int order = 8) {
  ShCoeffs out(order);
  for (const auto& c : m.compartments) {
    if (!c.is_fiber() || c.fraction == 0.0) continue;
    out.c += c.fraction * sh_basis(c.principal_dir.normalized(), order);
  }
  return out;
}

enum class PhantomLayout { single_fiber_slab, crossing_slab, mixed };

inline PhantomLayout parse_layout(std::string_view s) {
  if (s == "single_fiber_slab") return PhantomLayout::single_fiber_slab;
  if (s == "crossing_slab") return PhantomLayout::crossing_slab;
  if (s == "mixed") return PhantomLayout::mixed;
  fail(ErrorCode::InvariantViolation, "unknown layout '" + std::string(s) + "'");
}

constexpr std::string_view to_string(PhantomLayout l) {
  switch (l) {
    case PhantomLayout::single_fiber_slab: return "single_fiber_slab";
    case PhantomLayout::crossing_slab: return "crossing_slab";
    case PhantomLayout::mixed: return "mixed";
  }
  return "?";
}

/// Geometry of a synthetic subject. The one-voxel border is free water outside the mask; interior voxels
/// carry one or two fiber populations whose orientations vary smoothly with position.
struct PhantomConfig {
  std::array<std::size_t, 3> shape{16, 16, 16};
  PhantomLayout layout = PhantomLayout::mixed;
  double crossing_ratio = 0.5;  // mixed layout: share of interior voxels with two fibers
  std::uint64_t geometry_seed = 0;
  double ad = kDefaultAxialDiffusivity;
  double rd = kDefaultRadialDiffusivity;
  double s0 = 1.0;
  std::optional<Vec3> uniform_direction;  // fixes every primary fiber to this axis
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  bool isotropic_interior = false;  // replaces all fibers with free water (no anisotropy)
};

inline nlohmann::json to_json(const PhantomConfig& c) {
  nlohmann::json j = {{"shape", c.shape},
                      {"layout", std::string(to_string(c.layout))},
                      {"crossing_ratio", c.crossing_ratio},
                      {"geometry_seed", c.geometry_seed},
                      {"ad", c.ad},
                      {"rd", c.rd},
                      {"s0", c.s0},
                      {"isotropic_interior", c.isotropic_interior}};
  if (c.uniform_direction)
    j["uniform_direction"] = {c.uniform_direction->x(), c.uniform_direction->y(), c.uniform_direction->z()};
  return j;
}

struct PhantomScan {
  Volume4D dwi;
  std::optional<Volume4D> noiseless;
};

struct PhantomData {
  PhantomScan scan;
  Volume4D mask;
  Volume4D gt_fodf;
  std::vector<std::uint8_t> fiber_count;  // per voxel: 0 background, 1 single, 2 crossing
};

/// Voxel model at integer position (x, y, z) for a phantom configuration.
inline VoxelModel phantom_voxel_model(const PhantomConfig& cfg, std::size_t x, std::size_t y, std::size_t z) {
  const auto [X, Y, Z] = cfg.shape;
  const bool border = x == 0 || y == 0 || z == 0 || x + 1 == X || y + 1 == Y || z + 1 == Z;
  if (border || cfg.isotropic_interior) return VoxelModel::isotropic(kFreeWaterDiffusivity, cfg.s0);

  // Smooth per-subject orientation field.
  Rng rng = make_rng(hash_seed(cfg.geometry_seed, 0xF1E1Dull));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double phase_a = 2.0 * std::numbers::pi * u(rng);
  const double phase_b = 2.0 * std::numbers::pi * u(rng);
  const double phase_c = 2.0 * std::numbers::pi * u(rng);
  const double phi0 = 2.0 * std::numbers::pi * u(rng);
  const double tilt0 = 0.6 * (u(rng) - 0.5);
  const Eigen::Matrix3d subject_rot =
      Eigen::AngleAxisd(2.0 * std::numbers::pi * u(rng), Vec3::UnitZ()).toRotationMatrix() *
      Eigen::AngleAxisd(std::numbers::pi * (u(rng) - 0.5) * 0.5, Vec3::UnitX()).toRotationMatrix();

  const double fx = static_cast<double>(x) / static_cast<double>(X);
  const double fy = static_cast<double>(y) / static_cast<double>(Y);
  const double fz = static_cast<double>(z) / static_cast<double>(Z);
  const double phi = phi0 + 0.9 * std::sin(2.0 * std::numbers::pi * fy + phase_a) + 0.6 * fx;
  const double theta = std::numbers::pi / 2.0 + tilt0 + 0.35 * std::sin(2.0 * std::numbers::pi * fz + phase_b);
  Vec3 d1 = cfg.uniform_direction ? cfg.uniform_direction->normalized()
                                  : Vec3(subject_rot * from_spherical(theta, phi));

  bool crossing = false;
  const std::size_t interior_x = X - 2;
  switch (cfg.layout) {
    case PhantomLayout::single_fiber_slab: crossing = false; break;
    case PhantomLayout::crossing_slab: crossing = true; break;
    case PhantomLayout::mixed: {
      const auto n_cross = static_cast<std::size_t>(std::llround(cfg.crossing_ratio * static_cast<double>(interior_x)));
      crossing = (x - 1) < n_cross;
      break;
    }
  }

  VoxelModel m;
  m.s0 = cfg.s0;
  d1 = (cfg.rotation * d1).normalized();
  if (!crossing) {
    m.compartments.push_back({1.0, d1, cfg.ad, cfg.rd});
    return m;
  }
  // Second population 60-90 degrees from the first, in a smoothly rotating plane.
  Vec3 helper = std::abs(d1.z()) < 0.9 ? Vec3::UnitZ() : Vec3::UnitX();
  Vec3 e1 = d1.cross(helper).normalized();
  Vec3 e2 = d1.cross(e1).normalized();
  const double psi = 2.0 * std::numbers::pi * fz + phase_c;
  const Vec3 ortho = std::cos(psi) * e1 + std::sin(psi) * e2;
  const double alpha = (75.0 + 15.0 * std::sin(2.0 * std::numbers::pi * fy + phase_c)) * std::numbers::pi / 180.0;
  const Vec3 d2 = (std::cos(alpha) * d1 + std::sin(alpha) * ortho).normalized();
  const double f1 = 0.5 + 0.1 * std::sin(2.0 * std::numbers::pi * fx + phase_a);
  m.compartments.push_back({f1, d1, cfg.ad, cfg.rd});
  m.compartments.push_back({1.0 - f1, d2, cfg.ad, cfg.rd});
  return m;
}

namespace detail {

/// Per-direction rotations applied to the DW directions of a rescan; deterministic in the seed.
inline std::vector<Vec3> jittered_directions(const GradientScheme& scheme, double jitter_deg, std::uint64_t seed) {
  Rng rng = make_rng(hash_seed(seed, 0x717Eull));
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<Vec3> out;
  for (auto i : scheme.dw_indices()) {
    Vec3 g(scheme.bvecs[i][0], scheme.bvecs[i][1], scheme.bvecs[i][2]);
    Vec3 axis(n(rng), n(rng), n(rng));
    axis = (axis - axis.dot(g) * g).normalized();
    const double angle = jitter_deg * std::numbers::pi / 180.0 * n(rng);
    out.push_back((Eigen::AngleAxisd(angle, axis) * g).normalized());
  }
  return out;
}

/// Applies scanner effects to a noiseless DWI volume: optional direction jitter (resampling of the
/// order-8 SH fit of each voxel's DW signal), Rician noise and gain.
inline Volume4D apply_scan(const Volume4D& noiseless, const GradientScheme& scheme, const ScanProfile& profile) {
  profile.validate();
  if (noiseless.channels() != scheme.size()) fail(ErrorCode::ShapeMismatch, "volume channels differ from scheme size");
  Volume4D out = noiseless;
  const auto dw = scheme.dw_indices();

  std::optional<Eigen::MatrixXd> resample;
  if (profile.direction_jitter_deg > 0.0 && !dw.empty()) {
    DirectionSet nominal = dw_directions(scheme);
    DirectionSet jittered{jittered_directions(scheme, profile.direction_jitter_deg, profile.seed), true};
    const int order = std::min(8, max_order_for(dw.size()));
    const auto Bn = build_design_matrix(nominal, order).B;
    const auto Bj = build_design_matrix(jittered, order).B;
    resample = Bj * (Bn.transpose() * Bn).ldlt().solve(Bn.transpose());
  }

  const double s0_ref = 1.0;
  parallel_for(out.voxel_count(), [&](std::size_t v) {
    auto vox = out.voxel(v);
    if (resample) {
      Eigen::VectorXd s(static_cast<Eigen::Index>(dw.size()));
      for (std::size_t i = 0; i < dw.size(); ++i) s[static_cast<Eigen::Index>(i)] = vox[dw[i]];
      Eigen::VectorXd r = *resample * s;
      for (std::size_t i = 0; i < dw.size(); ++i) vox[dw[i]] = static_cast<float>(r[static_cast<Eigen::Index>(i)]);
    }
    if (!profile.noiseless()) {
      const auto [x, y, z] = out.voxel_coords(v);
      Rng rng(hash_seed(profile.seed, x, y, z));
      // Noise level is set relative to the voxel's own b=0 level (s0).
      const auto b0 = scheme.b0_indices();
      double s0 = s0_ref;
      if (!b0.empty()) {
        s0 = 0.0;
        for (auto i : b0) s0 += noiseless.voxel(v)[i];
        s0 /= static_cast<double>(b0.size());
      }
      std::normal_distribution<double> n(0.0, s0 / profile.snr);
      for (auto& s : vox) {
        const double n1 = n(rng);
        const double n2 = n(rng);
        s = static_cast<float>(std::sqrt(std::pow(s + n1, 2) + n2 * n2));
      }
    }
    if (profile.gain != 1.0)
      for (auto& s : vox) s = static_cast<float>(profile.gain * s);
  });
  return out;
}

}  // namespace detail

/// Noiseless DWI, mask and ground-truth fODF for a configuration, then one noisy scan.
inline PhantomData generate_phantom(const PhantomConfig& cfg, const GradientScheme& scheme, const ScanProfile& profile,
                                    int gt_order = 8) {
  for (auto d : cfg.shape)
    if (d < 3) fail(ErrorCode::ShapeTooSmall, "phantom needs at least 3 voxels per axis");
  scheme.validate();
  profile.validate();
  const auto [X, Y, Z] = cfg.shape;
  PhantomData out;
  Volume4D noiseless({X, Y, Z, scheme.size()}, VolumeKind::dwi_signal);
  out.mask = Volume4D({X, Y, Z, 1}, VolumeKind::mask);
  out.gt_fodf = Volume4D({X, Y, Z, sh_count(gt_order)}, VolumeKind::sh_fodf, gt_order);
  out.fiber_count.assign(X * Y * Z, 0);
  parallel_for(noiseless.voxel_count(), [&](std::size_t v) {
    const auto [x, y, z] = noiseless.voxel_coords(v);
    const VoxelModel m = phantom_voxel_model(cfg, x, y, z);
    const auto s = simulate_signal(m, scheme);
    auto vox = noiseless.voxel(v);
    for (std::size_t i = 0; i < vox.size(); ++i) vox[i] = static_cast<float>(s[static_cast<Eigen::Index>(i)]);
    const auto fibers = m.fiber_count();
    out.fiber_count[v] = static_cast<std::uint8_t>(fibers);
    out.mask.data[v] = fibers > 0 ? 1.0f : 0.0f;
    if (fibers > 0) {
      const auto gt = ground_truth_fodf(m, gt_order);
      auto g = out.gt_fodf.voxel(v);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(gt[i]);
    }
  });
  out.scan.dwi = detail::apply_scan(noiseless, scheme, profile);
  out.scan.noiseless = std::move(noiseless);
  return out;
}

/// Second acquisition of the same noiseless truth under a different scanner profile.
inline PhantomScan make_rescan(const PhantomScan& source, const GradientScheme& scheme, const ScanProfile& rescan) {
  if (!source.noiseless) fail(ErrorCode::MissingNoiselessSource, "rescan needs the stored noiseless signal");
  return {detail::apply_scan(*source.noiseless, scheme, rescan), source.noiseless};
}

/// Default acquisition used by the phantom tools: `n_b0` b=0 volumes plus a 96-direction shell.
inline GradientScheme default_phantom_scheme(std::size_t n_dirs = 96, double bval = 2000.0, std::size_t n_b0 = 6,
                                             std::uint64_t seed = 2023) {
  return make_shell_scheme(generate_scheme(n_dirs, seed), bval, n_b0);
}

}  // namespace fodf
