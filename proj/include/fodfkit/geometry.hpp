#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace fodf {

using Vec3 = Eigen::Vector3d;

/// (theta, phi): polar angle from +z and azimuth from +x.
inline std::pair<double, double> to_spherical(const Vec3& d) {
  const double n = d.norm();
  const double theta = std::acos(std::clamp(d.z() / n, -1.0, 1.0));
  const double phi = std::atan2(d.y(), d.x());
  return {theta, phi};
}

inline Vec3 from_spherical(double theta, double phi) {
  return {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
}

/// Angle between two axes in degrees, ignoring sign.
inline double axis_angle_deg(const Vec3& a, const Vec3& b) {
  const double c = std::abs(a.normalized().dot(b.normalized()));
  return std::acos(std::min(1.0, c)) * 180.0 / std::numbers::pi;
}

/// Rotation taking unit vector `from` onto +z.
inline Eigen::Matrix3d rotation_to_z(const Vec3& from) {
  return Eigen::Quaterniond::FromTwoVectors(from.normalized(), Vec3::UnitZ()).toRotationMatrix();
}

/// Unit directions on the sphere; `antipodal_symmetric` means each entry stands for the axis +-d.
struct DirectionSet {
  std::vector<Vec3> dirs;
  bool antipodal_symmetric = true;

  std::size_t size() const { return dirs.size(); }
  const Vec3& operator[](std::size_t i) const { return dirs[i]; }

  friend bool operator==(const DirectionSet& a, const DirectionSet& b) {
    return a.antipodal_symmetric == b.antipodal_symmetric && a.dirs == b.dirs;
  }
};

/// Deterministic near-uniform full-sphere grid (golden-angle spiral).
inline DirectionSet fibonacci_sphere(std::size_t n) {
  DirectionSet out;
  out.antipodal_symmetric = false;
  out.dirs.reserve(n);
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (std::size_t i = 0; i < n; ++i) {
    const double z = 1.0 - (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(n);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * static_cast<double>(i);
    out.dirs.emplace_back(r * std::cos(phi), r * std::sin(phi), z);
  }
  return out;
}

/// The 724-point constraint / quadrature grid used by CSD and ground-truth checks.
inline const DirectionSet& dense_sphere_724() {
  static const DirectionSet grid = fibonacci_sphere(724);
  return grid;
}

}  // namespace fodf
