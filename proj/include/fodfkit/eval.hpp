#pragma once

// ACC maps, direction-dropout degradation curves, Wilcoxon signed-rank testing and the MD/ACC panel.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <tuple>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "csd.hpp"
#include "error.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "sh.hpp"
#include "sphere.hpp"
#include "trainer.hpp"
#include "volume_io.hpp"

namespace fodf {

inline constexpr std::size_t kAccHistogramBins = 100;

struct AccReport {
  std::string label;
  Volume4D map;  // one channel; ACC on included voxels, 0 elsewhere
  double mean = 0.0;
  double std = 0.0;
  std::size_t included = 0;
  std::size_t excluded = 0;  // masked voxels where either side has no k>=2 content
  std::array<std::size_t, kAccHistogramBins> histogram{};
  std::vector<double> values;  // included voxels in voxel-index order
};

inline nlohmann::ordered_json to_json(const AccReport& r) {
  nlohmann::ordered_json j;
  j["label"] = r.label;
  j["mean_acc"] = r.mean;
  j["std_acc"] = r.std;
  j["included_voxels"] = r.included;
  j["excluded_voxels"] = r.excluded;
  j["histogram"] = {{"range", {-1.0, 1.0}}, {"bins", r.histogram}};
  return j;
}

namespace detail {

inline std::pair<double, double> mean_std(std::span<const double> v) {
  if (v.empty()) return {0.0, 0.0};
  double s = 0.0;
  for (double x : v) s += x;
  const double m = s / static_cast<double>(v.size());
  double q = 0.0;
  for (double x : v) q += (x - m) * (x - m);
  return {m, std::sqrt(q / static_cast<double>(v.size()))};
}

inline void require_same_sh_grid(const Volume4D& a, const Volume4D& b, const Volume4D& mask) {
  if (!a.same_grid(b) || a.channels() != b.channels() || a.sh_order != b.sh_order)
    fail(ErrorCode::DimsMismatch, "SH volumes differ in grid, channels or order");
  if (!a.same_grid(mask)) fail(ErrorCode::DimsMismatch, "mask grid differs from SH volume grid");
}

}  // namespace detail

/// Per-voxel ACC between two SH volumes over the mask, with mean/std over voxels where both are anisotropic.
inline AccReport acc_map(const Volume4D& a, const Volume4D& b, const Volume4D& mask, std::string label = "") {
  detail::require_same_sh_grid(a, b, mask);
  const int order = a.sh_order;
  std::vector<std::optional<double>> per(a.voxel_count());
  parallel_for(a.voxel_count(), [&](std::size_t v) {
    if (mask.masked(v)) per[v] = try_acc(ShCoeffs::from_span(order, a.voxel(v)), ShCoeffs::from_span(order, b.voxel(v)));
  });
  AccReport r;
  r.label = std::move(label);
  r.map = Volume4D({a.nx(), a.ny(), a.nz(), 1}, VolumeKind::dwi_signal);
  r.map.voxel_size_mm = a.voxel_size_mm;
  for (std::size_t v = 0; v < a.voxel_count(); ++v) {
    if (!mask.masked(v)) continue;
    if (!per[v]) {
      ++r.excluded;
      continue;
    }
    const double x = *per[v];
    r.values.push_back(x);
    r.map.data[v] = static_cast<float>(x);
    const auto bin = static_cast<std::size_t>(std::floor((x + 1.0) * 0.5 * kAccHistogramBins));
    ++r.histogram[std::min(bin, kAccHistogramBins - 1)];
  }
  r.included = r.values.size();
  std::tie(r.mean, r.std) = detail::mean_std(r.values);
  return r;
}

/// Mask of the voxels a patch model predicts: masked voxels with an in-bounds 3x3x3 neighborhood.
inline Volume4D patch_mask(const Volume4D& mask) {
  Volume4D out({mask.nx(), mask.ny(), mask.nz(), 1}, VolumeKind::mask);
  out.voxel_size_mm = mask.voxel_size_mm;
  for (auto v : patch_voxels(mask)) out.data[v] = 1.0f;
  return out;
}

/// Either full-volume CSD with a given response, or a trained network applied to the order-8 signal SH.
struct Estimator {
  enum class Kind { csd, model };
  Kind kind = Kind::csd;
  ResponseFunction rf;
  CsdParams csd;
  std::optional<ModelParams<float>> model;

  static Estimator from_csd(ResponseFunction r, CsdParams p = {}) { return {Kind::csd, std::move(r), p, std::nullopt}; }
  static Estimator from_model(ModelParams<float> m) { return {Kind::model, {}, {}, std::move(m)}; }
  std::string name() const { return kind == Kind::csd ? "csd" : "model"; }
};

inline Volume4D estimate(const Estimator& e, const Volume4D& dwi, const GradientScheme& scheme, const Volume4D& mask) {
  if (e.kind == Estimator::Kind::csd) return fit_volume(dwi, scheme, mask, e.rf, e.csd).fodf;
  return predict_volume(*e.model, fit_signal_sh(dwi, scheme, 8), mask);
}

/// Scheme indices kept by repeat r of the dropout to `count` DW directions.
inline std::vector<std::size_t> dropout_indices(const GradientScheme& scheme, std::size_t count, std::size_t repeat,
                                                std::uint64_t seed) {
  return drop_scheme_indices(scheme, count, hash_seed(seed, count, repeat));
}

/// 45, 50, ... up to the full count, which closes the list even when it is off the step.
inline std::vector<std::size_t> default_dropout_counts(std::size_t n_dw, std::size_t step = 5) {
  std::vector<std::size_t> out;
  for (std::size_t c = sh_count(8); c <= n_dw; c += step) out.push_back(c);
  if (out.empty() || out.back() != n_dw) out.push_back(n_dw);
  return out;
}

struct DegradationCurve {
  std::string estimator;
  std::vector<std::size_t> counts;
  std::vector<double> mean;         // over all included voxels of all repeats
  std::vector<double> std;          // pooled over voxels and repeats
  std::vector<double> repeat_std;   // spread of the per-repeat means
  std::vector<std::size_t> excluded;
  std::size_t repeats = 0;
};

inline nlohmann::ordered_json to_json(const DegradationCurve& c) {
  nlohmann::ordered_json j;
  j["estimator"] = c.estimator;
  j["repeats"] = c.repeats;
  j["points"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < c.counts.size(); ++i)
    j["points"].push_back({{"directions", c.counts[i]},
                           {"mean_acc", c.mean[i]},
                           {"std_acc", c.std[i]},
                           {"repeat_std", c.repeat_std[i]},
                           {"excluded_voxels", c.excluded[i]}});
  return j;
}

/// For each count and repeat: drop DW directions, run the estimator on the survivors and compare with the
/// reference fODF over the mask.
inline DegradationCurve degradation_experiment(const Volume4D& dwi, const GradientScheme& scheme, const Volume4D& mask,
                                               const Volume4D& reference, const Estimator& est,
                                               std::span<const std::size_t> counts, std::size_t repeats,
                                               std::uint64_t seed) {
  if (repeats == 0) fail(ErrorCode::InvariantViolation, "repeats must be at least 1");
  if (counts.empty()) fail(ErrorCode::InvariantViolation, "no direction counts");
  const std::size_t n_dw = scheme.dw_indices().size();
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (i > 0 && counts[i] <= counts[i - 1]) fail(ErrorCode::InvariantViolation, "counts must be strictly increasing");
    if (counts[i] < sh_count(8)) fail(ErrorCode::KeepBelowShMinimum, "count below the order-8 minimum of 45");
    if (counts[i] > n_dw) fail(ErrorCode::InvariantViolation, "count exceeds the scheme's DW directions");
  }
  DegradationCurve c;
  c.estimator = est.name();
  c.repeats = repeats;
  for (auto n : counts) {
    std::vector<double> pooled, means;
    std::size_t excluded = 0;
    for (std::size_t r = 0; r < repeats; ++r) {
      const auto idx = dropout_indices(scheme, n, r, seed);
      const auto fodf = estimate(est, select_channels(dwi, idx), subset_scheme(scheme, idx), mask);
      const auto rep = acc_map(fodf, reference, mask);
      pooled.insert(pooled.end(), rep.values.begin(), rep.values.end());
      means.push_back(rep.mean);
      excluded += rep.excluded;
    }
    const auto [m, s] = detail::mean_std(pooled);
    c.counts.push_back(n);
    c.mean.push_back(m);
    c.std.push_back(s);
    c.repeat_std.push_back(detail::mean_std(means).second);
    c.excluded.push_back(excluded);
  }
  return c;
}

struct WilcoxonResult {
  double statistic = 0.0;  // min(W+, W-)
  double w_plus = 0.0;
  double w_minus = 0.0;
  std::size_t n = 0;       // nonzero differences
  double p_value = 1.0;    // two-sided
  bool exact = false;
};

inline nlohmann::ordered_json to_json(const WilcoxonResult& w) {
  nlohmann::ordered_json j;
  j["statistic"] = w.statistic;
  j["w_plus"] = w.w_plus;
  j["w_minus"] = w.w_minus;
  j["n"] = w.n;
  j["p_value"] = w.p_value;
  j["method"] = w.exact ? "exact" : "normal";
  return j;
}

namespace detail {

// Mid-ranks of |d| (1-based), ties share the average rank.
inline std::vector<double> mid_ranks(std::span<const double> absd) {
  std::vector<std::size_t> order(absd.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return absd[a] < absd[b]; });
  std::vector<double> rank(absd.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && absd[order[j + 1]] == absd[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j + 2);
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace detail

inline constexpr std::size_t kWilcoxonExactMaxN = 25;

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences are dropped; the null
/// distribution is enumerated exactly (conditional on ties) up to 25 pairs, otherwise a tie-corrected
/// normal approximation with continuity correction is used.
inline WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) fail(ErrorCode::DimsMismatch, "paired samples differ in length");
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] - y[i] != 0.0) d.push_back(x[i] - y[i]);
  if (d.size() < 6)
    fail(ErrorCode::TooFewNonzeroPairs, std::to_string(d.size()) + " nonzero differences, at least 6 needed");
  std::vector<double> absd(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) absd[i] = std::abs(d[i]);
  const auto rank = detail::mid_ranks(absd);

  WilcoxonResult w;
  w.n = d.size();
  for (std::size_t i = 0; i < d.size(); ++i) (d[i] > 0.0 ? w.w_plus : w.w_minus) += rank[i];
  w.statistic = std::min(w.w_plus, w.w_minus);
  const double n = static_cast<double>(w.n);

  if (w.n <= kWilcoxonExactMaxN) {
    w.exact = true;
    // Doubled mid-ranks are integers; count sign patterns by their doubled W+.
    std::vector<std::size_t> r2(w.n);
    std::size_t total = 0;
    for (std::size_t i = 0; i < w.n; ++i) {
      r2[i] = static_cast<std::size_t>(std::llround(2.0 * rank[i]));
      total += r2[i];
    }
    std::vector<double> ways(total + 1, 0.0);
    ways[0] = 1.0;
    std::size_t reach = 0;
    for (auto r : r2) {
      for (std::size_t s = reach + 1; s-- > 0;)
        if (ways[s] != 0.0) ways[s + r] += ways[s];
      reach += r;
    }
    const auto t = static_cast<std::size_t>(std::llround(2.0 * w.statistic));
    double tail = 0.0;
    for (std::size_t s = 0; s <= t; ++s) tail += ways[s];
    w.p_value = std::min(1.0, 2.0 * tail / std::ldexp(1.0, static_cast<int>(w.n)));
    return w;
  }

  double ties = 0.0;
  std::sort(absd.begin(), absd.end());
  for (std::size_t i = 0; i < absd.size();) {
    std::size_t j = i;
    while (j + 1 < absd.size() && absd[j + 1] == absd[i]) ++j;
    const double c = static_cast<double>(j - i + 1);
    ties += c * c * c - c;
    i = j + 1;
  }
  const double mean = n * (n + 1.0) / 4.0;
  const double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ties / 48.0;
  if (var <= 0.0) {
    w.p_value = 1.0;
    return w;
  }
  const double z = std::max(0.0, std::abs(w.w_plus - mean) - 0.5) / std::sqrt(var);
  w.p_value = std::min(1.0, std::erfc(z / std::numbers::sqrt2));
  return w;
}

struct MdAccPanel {
  Volume4D md;  // one channel: c00 of the prediction on the mask
  AccReport acc;
  double md_mean = 0.0;
  double md_std = 0.0;
};

inline nlohmann::ordered_json to_json(const MdAccPanel& p) {
  nlohmann::ordered_json j;
  j["md_mean"] = p.md_mean;
  j["md_std"] = p.md_std;
  j["acc"] = to_json(p.acc);
  return j;
}

/// The c00 map of the prediction and its ACC agreement map against a reference.
inline MdAccPanel md_acc_panel(const Volume4D& pred, const Volume4D& reference, const Volume4D& mask) {
  MdAccPanel p;
  p.acc = acc_map(pred, reference, mask, "pred_vs_reference");
  p.md = Volume4D({pred.nx(), pred.ny(), pred.nz(), 1}, VolumeKind::dwi_signal);
  p.md.voxel_size_mm = pred.voxel_size_mm;
  std::vector<double> md;
  for (std::size_t v = 0; v < pred.voxel_count(); ++v) {
    if (!mask.masked(v)) continue;
    const double m = mean_diffusivity_proxy(ShCoeffs::from_span(pred.sh_order, pred.voxel(v)));
    p.md.data[v] = static_cast<float>(m);
    md.push_back(m);
  }
  std::tie(p.md_mean, p.md_std) = detail::mean_std(md);
  return p;
}

}  // namespace fodf
