#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "error.hpp"
#include "geometry.hpp"
#include "parallel.hpp"
#include "sh.hpp"
#include "sphere.hpp"
#include "volume_io.hpp"

namespace fodf {

/// Axially symmetric single-fiber response: one m=0 coefficient per even order (signal normalized by b=0).
struct ResponseFunction {
  int order = 8;
  std::vector<double> zonal;  // zonal[k/2]

  void validate() const {
    require_even_order(order);
    if (zonal.size() != static_cast<std::size_t>(order / 2 + 1))
      fail(ErrorCode::ShapeMismatch, "response needs one coefficient per even order");
    if (!(zonal[0] > 0.0)) fail(ErrorCode::InvariantViolation, "response k=0 coefficient must be positive");
  }

  /// Per-order convolution eigenvalue: sqrt(4 pi / (2k+1)) * zonal_k.
  double rotational_harmonic(int k) const {
    return std::sqrt(4.0 * std::numbers::pi / (2.0 * k + 1.0)) * zonal[static_cast<std::size_t>(k / 2)];
  }
};

inline nlohmann::json to_json(const ResponseFunction& r) { return {{"order", r.order}, {"zonal", r.zonal}}; }

inline ResponseFunction response_from_json(const nlohmann::json& j) {
  ResponseFunction r{j.at("order").get<int>(), j.at("zonal").get<std::vector<double>>()};
  r.validate();
  return r;
}

struct TensorFit {
  double fa = 0.0;
  double md = 0.0;
  Vec3 principal = Vec3::UnitZ();
};

/// Log-linear tensor fitter for one scheme; signal entries are raw (un-normalized) intensities.
class TensorFitter {
 public:
  explicit TensorFitter(const GradientScheme& scheme) : b0_(scheme.b0_indices()), dw_(scheme.dw_indices()) {
    Eigen::MatrixXd A(static_cast<Eigen::Index>(dw_.size()), 6);
    for (std::size_t r = 0; r < dw_.size(); ++r) {
      const double b = scheme.bvals[dw_[r]];
      const auto& g = scheme.bvecs[dw_[r]];
      A.row(static_cast<Eigen::Index>(r)) << -b * g[0] * g[0], -b * g[1] * g[1], -b * g[2] * g[2],
          -2 * b * g[0] * g[1], -2 * b * g[0] * g[2], -2 * b * g[1] * g[2];
    }
    pinv_ = (A.transpose() * A).ldlt().solve(A.transpose());
  }

  std::optional<TensorFit> fit(std::span<const float> signal) const {
    if (b0_.empty() || dw_.size() < 6) return std::nullopt;
    double s0 = 0.0;
    for (auto i : b0_) s0 += signal[i];
    s0 /= static_cast<double>(b0_.size());
    if (!(s0 > 0.0)) return std::nullopt;
    Eigen::VectorXd y(static_cast<Eigen::Index>(dw_.size()));
    for (std::size_t r = 0; r < dw_.size(); ++r)
      y[static_cast<Eigen::Index>(r)] = std::log(std::clamp(signal[dw_[r]] / s0, 1e-6, 1.0));
    const Eigen::VectorXd d = pinv_ * y;
    Eigen::Matrix3d D;
    D << d[0], d[3], d[4], d[3], d[1], d[5], d[4], d[5], d[2];
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(D);
    const Eigen::Vector3d ev = es.eigenvalues();
    const double md = ev.mean();
    const double num = (ev.array() - md).square().sum();
    const double den = ev.array().square().sum();
    TensorFit t;
    t.md = md;
    t.fa = den > 0.0 ? std::sqrt(1.5 * num / den) : 0.0;
    t.principal = es.eigenvectors().col(2).normalized();
    return t;
  }

 private:
  std::vector<std::size_t> b0_, dw_;
  Eigen::MatrixXd pinv_;
};

struct ResponseOptions {
  int order = 8;
  std::size_t top_voxels = 300;
  std::size_t min_voxels = 30;
  double min_fa = 0.2;  // voxels below this count as isotropic
};

/// Single-fiber response from the most anisotropic mask voxels, each reoriented so its principal
/// eigenvector lies along z, pooled into one zonal (m=0) SH fit.
inline ResponseFunction estimate_response(const Volume4D& dwi, const GradientScheme& scheme, const Volume4D& mask,
                                          const ResponseOptions& opt = {}) {
  if (!dwi.same_grid(mask)) fail(ErrorCode::DimsMismatch, "mask grid differs from DWI grid");
  if (dwi.channels() != scheme.size()) fail(ErrorCode::ShapeMismatch, "DWI channels differ from scheme size");
  std::vector<std::size_t> in_mask;
  for (std::size_t v = 0; v < mask.voxel_count(); ++v)
    if (mask.masked(v)) in_mask.push_back(v);
  if (in_mask.empty()) fail(ErrorCode::EmptyMask, "response estimation needs a nonempty mask");

  TensorFitter tf(scheme);
  std::vector<std::optional<TensorFit>> fits(in_mask.size());
  parallel_for(in_mask.size(), [&](std::size_t i) { fits[i] = tf.fit(dwi.voxel(in_mask[i])); });

  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < fits.size(); ++i)
    if (fits[i] && std::isfinite(fits[i]->fa) && fits[i]->fa >= opt.min_fa) candidates.push_back(i);
  if (candidates.size() < opt.min_voxels)
    fail(ErrorCode::TooFewAnisotropicVoxels,
         std::to_string(candidates.size()) + " anisotropic voxels, need " + std::to_string(opt.min_voxels));
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](std::size_t a, std::size_t b) { return fits[a]->fa > fits[b]->fa; });
  if (candidates.size() > opt.top_voxels) candidates.resize(opt.top_voxels);

  const auto b0 = scheme.b0_indices();
  const auto dw = scheme.dw_indices();
  const int nz = opt.order / 2 + 1;
  Eigen::MatrixXd normal = Eigen::MatrixXd::Zero(nz, nz);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(nz);
  for (auto i : candidates) {
    const auto sig = dwi.voxel(in_mask[i]);
    double s0 = 0.0;
    for (auto j : b0) s0 += sig[j];
    s0 /= static_cast<double>(b0.size());
    const Eigen::Matrix3d R = rotation_to_z(fits[i]->principal);
    for (auto j : dw) {
      const Vec3 g = R * Vec3(scheme.bvecs[j][0], scheme.bvecs[j][1], scheme.bvecs[j][2]);
      const double ct = std::clamp(g.z(), -1.0, 1.0);
      Eigen::VectorXd row(nz);
      for (int k = 0; k <= opt.order; k += 2)
        row[k / 2] = std::sph_legendre(static_cast<unsigned>(k), 0u, std::acos(ct));
      normal += row * row.transpose();
      rhs += row * (sig[j] / s0);
    }
  }
  const Eigen::VectorXd z = normal.ldlt().solve(rhs);
  ResponseFunction rf{opt.order, std::vector<double>(z.data(), z.data() + z.size())};
  rf.validate();
  return rf;
}

struct CsdParams {
  double lambda = 1.0;
  double tau = 0.1;
  int max_iter = 50;
};

inline nlohmann::json to_json(const CsdParams& p) {
  return {{"lambda", p.lambda}, {"tau", p.tau}, {"max_iter", p.max_iter}};
}

struct CsdResult {
  ShCoeffs fodf;
  bool converged = true;
  int iterations = 0;
};

/// Constrained deconvolution of signal SH coefficients against one response. Holds the constraint grid
/// and the per-coefficient rotational harmonics so voxel solves share them.
class CsdSolver {
 public:
  CsdSolver(const ResponseFunction& rf, const CsdParams& params = {},
            const DirectionSet& grid = dense_sphere_724())
      : params_(params), order_(rf.order) {
    rf.validate();
    const auto n = static_cast<Eigen::Index>(sh_count(order_));
    rh_.resize(n);
    const auto orders = sh_orders_of(order_);
    for (Eigen::Index i = 0; i < n; ++i) rh_[i] = rf.rotational_harmonic(orders[static_cast<std::size_t>(i)]);
    for (Eigen::Index i = 0; i < n; ++i)
      if (rh_[i] == 0.0) fail(ErrorCode::SingularSystem, "response has a zero rotational harmonic");
    B_ = build_design_matrix(grid, order_).B;
    // Constraint weight scaled to the data term as in common CSD practice.
    lambda_eff_ = params.lambda * static_cast<double>(n) * rh_[0] / static_cast<double>(B_.rows());
  }

  int order() const { return order_; }
  const Eigen::MatrixXd& grid_matrix() const { return B_; }
  const Eigen::VectorXd& rotational_harmonics() const { return rh_; }

  CsdResult deconvolve(const ShCoeffs& signal_sh) const {
    if (signal_sh.order != order_) fail(ErrorCode::ShapeMismatch, "signal order differs from response order");
    const Eigen::VectorXd& s = signal_sh.c;
    CsdResult r;
    Eigen::VectorXd f = s.cwiseQuotient(rh_);
    if (params_.max_iter <= 0 || params_.lambda == 0.0) {
      r.fodf = ShCoeffs(order_, f);
      return r;
    }
    const double threshold = params_.tau * (B_ * f).mean();
    const Eigen::VectorXd rh2 = rh_.cwiseProduct(rh_);
    const Eigen::VectorXd rhs = rh_.cwiseProduct(s);
    const double l2 = lambda_eff_ * lambda_eff_;

    std::set<std::vector<Eigen::Index>> seen;
    std::vector<Eigen::Index> prev;
    r.converged = false;
    for (int it = 0; it < params_.max_iter; ++it) {
      const Eigen::VectorXd amp = B_ * f;
      std::vector<Eigen::Index> active;
      for (Eigen::Index i = 0; i < amp.size(); ++i)
        if (amp[i] < threshold) active.push_back(i);
      if (!seen.insert(active).second) {
        r.converged = true;
        break;
      }
      Eigen::MatrixXd M = rh2.asDiagonal();
      if (!active.empty()) {
        Eigen::MatrixXd Bw(static_cast<Eigen::Index>(active.size()), B_.cols());
        for (std::size_t a = 0; a < active.size(); ++a) Bw.row(static_cast<Eigen::Index>(a)) = B_.row(active[a]);
        M.noalias() += l2 * Bw.transpose() * Bw;
      }
      f = M.llt().solve(rhs);
      r.iterations = it + 1;
    }
    if (!r.converged) {
      const Eigen::VectorXd amp = B_ * f;
      std::vector<Eigen::Index> active;
      for (Eigen::Index i = 0; i < amp.size(); ++i)
        if (amp[i] < threshold) active.push_back(i);
      r.converged = seen.contains(active);
    }
    r.fodf = ShCoeffs(order_, f);
    return r;
  }

 private:
  CsdParams params_;
  int order_;
  Eigen::VectorXd rh_;
  Eigen::MatrixXd B_;
  double lambda_eff_ = 0.0;
};

inline CsdResult deconvolve(const ShCoeffs& signal_sh, const ResponseFunction& rf, const CsdParams& params = {}) {
  return CsdSolver(rf, params).deconvolve(signal_sh);
}

struct QcEntry {
  std::size_t voxel = 0;
  std::array<std::size_t, 3> xyz{};
  std::string reason;
};

struct QcReport {
  std::size_t masked_voxels = 0;
  std::size_t fitted_voxels = 0;
  std::size_t nonconverged_voxels = 0;
  std::vector<QcEntry> flagged;  // ordered by voxel index
};

inline nlohmann::ordered_json to_json(const QcReport& q) {
  nlohmann::ordered_json j;
  j["masked_voxels"] = q.masked_voxels;
  j["fitted_voxels"] = q.fitted_voxels;
  j["nonconverged_voxels"] = q.nonconverged_voxels;
  j["flagged"] = nlohmann::ordered_json::array();
  for (const auto& e : q.flagged) j["flagged"].push_back({{"voxel", e.voxel}, {"xyz", e.xyz}, {"reason", e.reason}});
  return j;
}

/// Per-voxel signal SH (DW signal divided by mean b=0) for every voxel of the grid; voxels without a
/// positive b=0 level are left at zero. The result is the network input representation.
inline Volume4D fit_signal_sh(const Volume4D& dwi, const GradientScheme& scheme, int order = 8,
                              std::vector<std::uint8_t>* valid = nullptr) {
  if (dwi.channels() != scheme.size()) fail(ErrorCode::ShapeMismatch, "DWI channels differ from scheme size");
  const auto b0 = scheme.b0_indices();
  const auto dw = scheme.dw_indices();
  if (b0.empty()) fail(ErrorCode::ShapeMismatch, "scheme has no b=0 volume for normalization");
  const ShFitter fitter(build_design_matrix(dw_directions(scheme), order));
  Volume4D out({dwi.nx(), dwi.ny(), dwi.nz(), sh_count(order)}, VolumeKind::sh_signal, order);
  if (valid) valid->assign(dwi.voxel_count(), 0);
  parallel_for(dwi.voxel_count(), [&](std::size_t v) {
    const auto sig = dwi.voxel(v);
    double s0 = 0.0;
    for (auto i : b0) s0 += sig[i];
    s0 /= static_cast<double>(b0.size());
    bool any_dw = false;
    for (auto i : dw) any_dw = any_dw || sig[i] != 0.0f;
    if (!(s0 > 0.0) || !std::isfinite(s0) || !any_dw) return;
    Eigen::VectorXd y(static_cast<Eigen::Index>(dw.size()));
    for (std::size_t i = 0; i < dw.size(); ++i) y[static_cast<Eigen::Index>(i)] = sig[dw[i]] / s0;
    if (!y.allFinite()) return;
    const auto c = fitter.fit(y);
    auto o = out.voxel(v);
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<float>(c[i]);
    if (valid) (*valid)[v] = 1;
  });
  return out;
}

struct CsdFit {
  Volume4D fodf;
  QcReport qc;
};

/// Full-volume CSD: normalize by mean b=0, SH-fit, deconvolve each masked voxel. Unmasked voxels are zero.
inline CsdFit fit_volume(const Volume4D& dwi, const GradientScheme& scheme, const Volume4D& mask,
                         const ResponseFunction& rf, const CsdParams& params = {}) {
  if (!dwi.same_grid(mask)) fail(ErrorCode::DimsMismatch, "mask grid differs from DWI grid");
  std::vector<std::uint8_t> valid;
  const Volume4D sh = fit_signal_sh(dwi, scheme, rf.order, &valid);
  const CsdSolver solver(rf, params);
  CsdFit out{Volume4D({dwi.nx(), dwi.ny(), dwi.nz(), sh_count(rf.order)}, VolumeKind::sh_fodf, rf.order), {}};
  std::vector<std::uint8_t> status(dwi.voxel_count(), 0);  // 1 fitted, 2 flagged zero, 3 nonconverged
  parallel_for(dwi.voxel_count(), [&](std::size_t v) {
    if (!mask.masked(v)) return;
    if (!valid[v]) {
      status[v] = 2;
      return;
    }
    const auto r = solver.deconvolve(ShCoeffs::from_span(rf.order, sh.voxel(v)));
    auto o = out.fodf.voxel(v);
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<float>(r.fodf[i]);
    status[v] = r.converged ? 1 : 3;
  });
  for (std::size_t v = 0; v < status.size(); ++v) {
    if (!mask.masked(v)) continue;
    ++out.qc.masked_voxels;
    if (status[v] == 1 || status[v] == 3) ++out.qc.fitted_voxels;
    if (status[v] == 2) out.qc.flagged.push_back({v, dwi.voxel_coords(v), "degenerate_signal"});
    if (status[v] == 3) {
      ++out.qc.nonconverged_voxels;
      out.qc.flagged.push_back({v, dwi.voxel_coords(v), "nonconvergence"});
    }
  }
  return out;
}

}  // namespace fodf
