#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "geometry.hpp"
#include "rng.hpp"
#include "sh.hpp"
#include "volume_io.hpp"

namespace fodf {

/// Largest accepted cond(B_subset) / cond(B_reference). Calibrated so that random 45-of-96 subsets of a
/// repulsion scheme pass about 95% of the time while clustered subsets (e.g. one octant) fail.
inline constexpr double kDefaultConditionRatio = 2000.0;
inline constexpr int kDefaultDropRetries = 50;

/// Antipodal electrostatic energy: sum over pairs of 1/|a-b| + 1/|a+b|.
inline double repulsion_energy(std::span<const Vec3> dirs) {
  double e = 0.0;
  for (std::size_t i = 0; i < dirs.size(); ++i)
    for (std::size_t j = i + 1; j < dirs.size(); ++j)
      e += 1.0 / (dirs[i] - dirs[j]).norm() + 1.0 / (dirs[i] + dirs[j]).norm();
  return e;
}

inline double repulsion_energy(const DirectionSet& d) { return repulsion_energy(std::span<const Vec3>(d.dirs)); }

struct SchemeOptions {
  int restarts = 4;
  int max_iters = 3000;
  double rel_tol = 1e-13;
};

struct SchemeResult {
  DirectionSet set;
  double energy = 0.0;
  std::vector<double> energy_trace;  // accepted energies of the winning restart
};

namespace detail {

inline std::vector<Vec3> repulsion_gradient(const std::vector<Vec3>& x) {
  std::vector<Vec3> g(x.size(), Vec3::Zero());
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t j = i + 1; j < x.size(); ++j) {
      const Vec3 dm = x[i] - x[j];
      const Vec3 dp = x[i] + x[j];
      const double rm = dm.norm();
      const double rp = dp.norm();
      const Vec3 fm = dm / (rm * rm * rm);
      const Vec3 fp = dp / (rp * rp * rp);
      // dE/dx_i of 1/|x_i - x_j| + 1/|x_i + x_j|
      g[i] -= fm + fp;
      g[j] += fm - fp;
    }
  }
  // Project onto the tangent planes.
  for (std::size_t i = 0; i < x.size(); ++i) g[i] -= g[i].dot(x[i]) * x[i];
  return g;
}

}  // namespace detail

/// Gradient descent with backtracking from one starting configuration; energy never increases.
inline SchemeResult optimize_repulsion(std::vector<Vec3> x, const SchemeOptions& opt = {}) {
  SchemeResult r;
  double energy = repulsion_energy(std::span<const Vec3>(x));
  r.energy_trace.push_back(energy);
  double step = 0.1 / static_cast<double>(x.size());
  for (int it = 0; it < opt.max_iters; ++it) {
    const auto g = detail::repulsion_gradient(x);
    double gmax = 0.0;
    for (const auto& v : g) gmax = std::max(gmax, v.norm());
    if (gmax == 0.0) break;
    bool accepted = false;
    for (int tries = 0; tries < 40; ++tries) {
      std::vector<Vec3> trial(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) trial[i] = (x[i] - (step / gmax) * g[i]).normalized();
      const double e = repulsion_energy(std::span<const Vec3>(trial));
      if (e < energy) {
        const double rel = (energy - e) / energy;
        x = std::move(trial);
        energy = e;
        r.energy_trace.push_back(energy);
        step *= 1.5;
        accepted = true;
        if (rel < opt.rel_tol) it = opt.max_iters;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
  }
  for (auto& v : x)
    if (v.z() < 0.0 || (v.z() == 0.0 && (v.y() < 0.0 || (v.y() == 0.0 && v.x() < 0.0)))) v = -v;
  r.set.dirs = std::move(x);
  r.set.antipodal_symmetric = true;
  r.energy = energy;
  return r;
}

/// n directions minimizing antipodal repulsion energy; best of seeded random restarts.
inline SchemeResult optimize_scheme(std::size_t n, std::uint64_t seed, const SchemeOptions& opt = {}) {
  if (n < 6) fail(ErrorCode::TooFewDirections, "need at least 6 directions, got " + std::to_string(n));
  SchemeResult best;
  bool have = false;
  for (int restart = 0; restart < std::max(1, opt.restarts); ++restart) {
    Rng rng = make_rng(hash_seed(seed, static_cast<std::uint64_t>(restart)));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Vec3> x(n);
    for (auto& v : x) {
      do {
        v = Vec3(normal(rng), normal(rng), normal(rng));
      } while (v.norm() < 1e-6);
      v.normalize();
    }
    auto r = optimize_repulsion(std::move(x), opt);
    if (!have || r.energy < best.energy) {
      best = std::move(r);
      have = true;
    }
  }
  return best;
}

inline DirectionSet generate_scheme(std::size_t n, std::uint64_t seed) { return optimize_scheme(n, seed).set; }

inline double design_condition_number(const DirectionSet& d, int order) {
  const auto dm = build_design_matrix(d, order);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(dm.B);
  const auto& s = svd.singularValues();
  const double smin = s[s.size() - 1];
  return smin > 0.0 ? s[0] / smin : std::numeric_limits<double>::infinity();
}

/// True when the subset's SH design is not much worse conditioned than the reference's.
inline bool uniformity_check(const DirectionSet& subset, const DirectionSet& reference, int order = 8,
                             double max_ratio = kDefaultConditionRatio) {
  require_even_order(order);
  const std::size_t need = sh_count(order);
  if (subset.size() < need || reference.size() < need)
    fail(ErrorCode::UnderdeterminedDesign,
         std::to_string(subset.size()) + " directions for " + std::to_string(need) + " coefficients");
  if (subset == reference) return true;
  return design_condition_number(subset, order) <= max_ratio * design_condition_number(reference, order);
}

struct DropOptions {
  int order = 8;
  int max_retries = kDefaultDropRetries;
  double max_ratio = kDefaultConditionRatio;
};

/// Sorted indices into `full` of a uniformly random size-`keep` subset that passes uniformity_check.
inline std::vector<std::size_t> drop_direction_indices(const DirectionSet& full, std::size_t keep, std::uint64_t seed,
                                                       const DropOptions& opt = {}) {
  const std::size_t floor = sh_count(opt.order);
  if (keep < floor)
    fail(ErrorCode::KeepBelowShMinimum,
         "keep " + std::to_string(keep) + " is below the " + std::to_string(floor) + " directions order " +
             std::to_string(opt.order) + " needs");
  if (keep > full.size())
    fail(ErrorCode::InvariantViolation, "keep " + std::to_string(keep) + " exceeds " + std::to_string(full.size()));
  std::vector<std::size_t> all(full.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (keep == full.size()) return all;
  Rng rng = make_rng(seed);
  for (int attempt = 0; attempt <= opt.max_retries; ++attempt) {
    std::vector<std::size_t> idx = all;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(keep);
    std::sort(idx.begin(), idx.end());
    DirectionSet sub;
    sub.antipodal_symmetric = full.antipodal_symmetric;
    for (auto i : idx) sub.dirs.push_back(full.dirs[i]);
    if (uniformity_check(sub, full, opt.order, opt.max_ratio)) return idx;
  }
  fail(ErrorCode::UniformityUnattainable,
       "no well-conditioned subset of " + std::to_string(keep) + " found in " + std::to_string(opt.max_retries) +
           " retries");
}

inline DirectionSet drop_directions(const DirectionSet& full, std::size_t keep, std::uint64_t seed,
                                    int max_retries = kDefaultDropRetries) {
  DropOptions opt;
  opt.max_retries = max_retries;
  const auto idx = drop_direction_indices(full, keep, seed, opt);
  DirectionSet out;
  out.antipodal_symmetric = full.antipodal_symmetric;
  for (auto i : idx) out.dirs.push_back(full.dirs[i]);
  return out;
}

/// Diffusion-weighted directions of a scheme as a DirectionSet.
inline DirectionSet dw_directions(const GradientScheme& g) {
  DirectionSet d;
  for (auto i : g.dw_indices()) d.dirs.emplace_back(g.bvecs[i][0], g.bvecs[i][1], g.bvecs[i][2]);
  return d;
}

/// Single-shell acquisition: `n_b0` b=0 volumes followed by the directions at `bval`.
inline GradientScheme make_shell_scheme(const DirectionSet& dirs, double bval, std::size_t n_b0 = 1) {
  GradientScheme g;
  for (std::size_t i = 0; i < n_b0; ++i) {
    g.bvals.push_back(0.0);
    g.bvecs.push_back({0.0, 0.0, 0.0});
  }
  for (const auto& d : dirs.dirs) {
    g.bvals.push_back(bval);
    g.bvecs.push_back({d.x(), d.y(), d.z()});
  }
  return g;
}

/// Volume indices retained when dropping DW directions to `keep`; b=0 volumes are always kept.
inline std::vector<std::size_t> drop_scheme_indices(const GradientScheme& g, std::size_t keep, std::uint64_t seed,
                                                    const DropOptions& opt = {}) {
  const auto dw = g.dw_indices();
  const auto picked = drop_direction_indices(dw_directions(g), keep, seed, opt);
  std::vector<std::size_t> out = g.b0_indices();
  for (auto p : picked) out.push_back(dw[p]);
  std::sort(out.begin(), out.end());
  return out;
}

inline GradientScheme subset_scheme(const GradientScheme& g, std::span<const std::size_t> idx) {
  GradientScheme out;
  for (auto i : idx) {
    out.bvals.push_back(g.bvals[i]);
    out.bvecs.push_back(g.bvecs[i]);
  }
  return out;
}

}  // namespace fodf
