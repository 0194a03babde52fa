#pragma once

// Real, orthonormal, antipodally symmetric spherical harmonics (even orders only).
//
// Flat coefficient index over (k, m), k = 0,2,...,L and m = -k..k, lexicographic:
//   index(k, m) = k(k+1)/2 + m
// Basis functions:
//   m < 0 : sqrt(2) * Im Y_k^|m|
//   m = 0 : Y_k^0
//   m > 0 : sqrt(2) * (-1)^m * Re Y_k^m
// The legacy tournier07 variant differs only by dropping the sqrt(2) on m != 0 terms; convert with
// to_legacy_tournier / from_legacy_tournier.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "geometry.hpp"
#include "volume_io.hpp"

namespace fodf {

constexpr std::size_t sh_index(int k, int m) { return static_cast<std::size_t>(k * (k + 1) / 2 + m); }

/// Order of each flat coefficient index.
inline std::vector<int> sh_orders_of(int order) {
  std::vector<int> out;
  for (int k = 0; k <= order; k += 2)
    for (int m = -k; m <= k; ++m) out.push_back(k);
  return out;
}

/// Largest even order whose coefficient count is <= n.
constexpr int max_order_for(std::size_t n) {
  int L = 0;
  while (sh_count(L + 2) <= n) L += 2;
  return L;
}

inline void require_even_order(int order) {
  if (order < 0 || order % 2 != 0) fail(ErrorCode::OddOrder, "SH order must be even and >= 0, got " + std::to_string(order));
}

struct ShCoeffs {
  int order = 0;
  Eigen::VectorXd c;

  ShCoeffs() : c(Eigen::VectorXd::Zero(1)) {}
  explicit ShCoeffs(int L) : order(L), c(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(sh_count(L)))) {
    require_even_order(L);
  }
  ShCoeffs(int L, Eigen::VectorXd coeffs) : order(L), c(std::move(coeffs)) {
    require_even_order(L);
    if (static_cast<std::size_t>(c.size()) != sh_count(L))
      fail(ErrorCode::ShapeMismatch, "coefficient vector length does not match order");
  }

  static ShCoeffs from_span(int L, std::span<const float> v) {
    ShCoeffs s(L);
    if (v.size() != sh_count(L)) fail(ErrorCode::ShapeMismatch, "coefficient span length does not match order");
    for (std::size_t i = 0; i < v.size(); ++i) s.c[static_cast<Eigen::Index>(i)] = v[i];
    return s;
  }

  std::size_t size() const { return static_cast<std::size_t>(c.size()); }
  double operator[](std::size_t i) const { return c[static_cast<Eigen::Index>(i)]; }
  double& operator[](std::size_t i) { return c[static_cast<Eigen::Index>(i)]; }

  bool finite() const { return c.allFinite(); }

  /// The isotropic function with constant value `amplitude` on the sphere.
  static ShCoeffs isotropic(int L, double amplitude = 1.0) {
    ShCoeffs s(L);
    s.c[0] = amplitude * std::sqrt(4.0 * std::numbers::pi);
    return s;
  }
};

/// Values of every basis function up to `order` at one direction.
inline Eigen::VectorXd sh_basis(const Vec3& dir, int order) {
  require_even_order(order);
  const auto [theta, phi] = to_spherical(dir);
  Eigen::VectorXd row(static_cast<Eigen::Index>(sh_count(order)));
  for (int k = 0; k <= order; k += 2) {
    for (int m = -k; m <= k; ++m) {
      const unsigned am = static_cast<unsigned>(std::abs(m));
      const double p = std::sph_legendre(static_cast<unsigned>(k), am, theta);
      double v;
      if (m == 0)
        v = p;
      else if (m > 0)
        v = std::numbers::sqrt2 * ((m % 2) ? -1.0 : 1.0) * p * std::cos(m * phi);
      else
        v = std::numbers::sqrt2 * p * std::sin(static_cast<double>(am) * phi);
      row[static_cast<Eigen::Index>(sh_index(k, m))] = v;
    }
  }
  return row;
}

struct DesignMatrix {
  int order = 0;
  Eigen::MatrixXd B;  // rows = directions, cols = basis functions

  Eigen::Index rows() const { return B.rows(); }
  Eigen::Index cols() const { return B.cols(); }
};

inline DesignMatrix build_design_matrix(std::span<const Vec3> dirs, int order) {
  require_even_order(order);
  DesignMatrix dm{order, Eigen::MatrixXd(static_cast<Eigen::Index>(dirs.size()),
                                         static_cast<Eigen::Index>(sh_count(order)))};
  for (std::size_t i = 0; i < dirs.size(); ++i) dm.B.row(static_cast<Eigen::Index>(i)) = sh_basis(dirs[i], order).transpose();
  return dm;
}

inline DesignMatrix build_design_matrix(const DirectionSet& dirs, int order) {
  return build_design_matrix(std::span<const Vec3>(dirs.dirs), order);
}

/// Least-squares SH fitter with a cached factorization; reuse across voxels sharing one design.
class ShFitter {
 public:
  ShFitter(const DesignMatrix& dm, double regularize = 0.0) : order_(dm.order), rows_(dm.rows()) {
    if (regularize < 0.0) fail(ErrorCode::ShapeMismatch, "regularization must be nonnegative");
    if (regularize == 0.0 && dm.rows() < dm.cols())
      fail(ErrorCode::UnderdeterminedFit, std::to_string(dm.rows()) + " samples for " + std::to_string(dm.cols()) +
                                              " coefficients");
    Eigen::MatrixXd normal = dm.B.transpose() * dm.B;
    normal.diagonal().array() += regularize;
    llt_.compute(normal);
    if (llt_.info() != Eigen::Success) fail(ErrorCode::SingularSystem, "normal matrix is not positive definite");
    // Reject numerically singular systems that LLT lets through.
    const double dmin = llt_.matrixL().toDenseMatrix().diagonal().minCoeff();
    const double dmax = llt_.matrixL().toDenseMatrix().diagonal().maxCoeff();
    if (!(dmin > 1e-10 * dmax)) fail(ErrorCode::SingularSystem, "normal matrix is numerically singular");
    Bt_ = dm.B.transpose();
  }

  ShCoeffs fit(const Eigen::VectorXd& signal) const {
    if (signal.size() != rows_) fail(ErrorCode::ShapeMismatch, "signal length does not match design rows");
    return ShCoeffs(order_, llt_.solve(Bt_ * signal));
  }

  int order() const { return order_; }

 private:
  int order_;
  Eigen::Index rows_;
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::MatrixXd Bt_;
};

/// c = argmin |B c - s|^2 + regularize * |c|^2.
inline ShCoeffs fit_sh(const Eigen::VectorXd& signal, const DesignMatrix& dm, double regularize = 0.0) {
  return ShFitter(dm, regularize).fit(signal);
}

inline Eigen::VectorXd eval_sh(const ShCoeffs& c, const DesignMatrix& dm) {
  if (dm.order != c.order) fail(ErrorCode::ShapeMismatch, "design order differs from coefficient order");
  return dm.B * c.c;
}

inline Eigen::VectorXd eval_sh(const ShCoeffs& c, const DirectionSet& dirs) {
  return eval_sh(c, build_design_matrix(dirs, c.order));
}

/// Angular correlation coefficient over orders k >= 2; nullopt when either side has no anisotropic power.
inline std::optional<double> try_acc(const ShCoeffs& u, const ShCoeffs& v) {
  if (u.order != v.order) fail(ErrorCode::ShapeMismatch, "acc needs matching orders");
  const auto n = u.c.size() - 1;
  const auto ua = u.c.tail(n);
  const auto va = v.c.tail(n);
  const double nu = ua.squaredNorm();
  const double nv = va.squaredNorm();
  if (nu == 0.0 || nv == 0.0) return std::nullopt;
  const double r = ua.dot(va) / (std::sqrt(nu) * std::sqrt(nv));
  return std::clamp(r, -1.0, 1.0);
}

inline double acc(const ShCoeffs& u, const ShCoeffs& v) {
  auto r = try_acc(u, v);
  if (!r) fail(ErrorCode::DegenerateAnisotropy, "all k>=2 coefficients are zero");
  return *r;
}

/// The k=0 coefficient; sqrt(4 pi) times the sphere average of the function.
inline double mean_diffusivity_proxy(const ShCoeffs& c) { return c.c[0]; }

inline ShCoeffs to_legacy_tournier(const ShCoeffs& c) {
  ShCoeffs out = c;
  for (int k = 0; k <= c.order; k += 2)
    for (int m = -k; m <= k; ++m)
      if (m != 0) out.c[static_cast<Eigen::Index>(sh_index(k, m))] *= std::numbers::sqrt2;
  return out;
}

inline ShCoeffs from_legacy_tournier(const ShCoeffs& c) {
  ShCoeffs out = c;
  for (int k = 0; k <= c.order; k += 2)
    for (int m = -k; m <= k; ++m)
      if (m != 0) out.c[static_cast<Eigen::Index>(sh_index(k, m))] /= std::numbers::sqrt2;
  return out;
}

}  // namespace fodf
