#pragma once

// Dataset assembly and the training loop for the patch CNN and the voxel MLP.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "csd.hpp"
#include "error.hpp"
#include "net.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "sh.hpp"
#include "sphere.hpp"
#include "volume_io.hpp"

namespace fodf {

/// Masked voxels whose full 3x3x3 neighborhood lies inside the grid, in voxel-index order.
inline std::vector<std::size_t> patch_voxels(const Volume4D& mask) {
  std::vector<std::size_t> out;
  for (std::size_t v = 0; v < mask.voxel_count(); ++v) {
    if (!mask.masked(v)) continue;
    const auto [x, y, z] = mask.voxel_coords(v);
    if (x == 0 || y == 0 || z == 0 || x + 1 >= mask.nx() || y + 1 >= mask.ny() || z + 1 >= mask.nz()) continue;
    out.push_back(v);
  }
  return out;
}

/// Copies the [3,3,3,C] neighborhood of voxel v into out (27*C values, row-major).
template <typename T>
void copy_patch(const Volume4D& vol, std::size_t v, T* out) {
  const auto [x, y, z] = vol.voxel_coords(v);
  const std::size_t c = vol.channels();
  for (std::size_t dx = 0; dx < 3; ++dx)
    for (std::size_t dy = 0; dy < 3; ++dy)
      for (std::size_t dz = 0; dz < 3; ++dz) {
        const auto src = vol.voxel(vol.voxel_index(x + dx - 1, y + dy - 1, z + dz - 1));
        for (std::size_t i = 0; i < c; ++i) *out++ = static_cast<T>(src[i]);
      }
}

struct IndexedPatch {
  std::size_t voxel = 0;
  std::vector<float> patch;  // [3,3,3,C]
};

/// One patch per masked voxel with an in-bounds neighborhood; unmasked neighbors are kept as context.
inline std::vector<IndexedPatch> extract_patches(const Volume4D& sh_vol, const Volume4D& mask) {
  if (sh_vol.kind != VolumeKind::sh_signal) fail(ErrorCode::ShapeMismatch, "patches are cut from sh_signal volumes");
  if (!sh_vol.same_grid(mask)) fail(ErrorCode::DimsMismatch, "mask grid differs from SH volume grid");
  if (sh_vol.nx() < 3 || sh_vol.ny() < 3 || sh_vol.nz() < 3) fail(ErrorCode::ShapeTooSmall, "patches need 3 voxels per axis");
  std::vector<IndexedPatch> out;
  for (auto v : patch_voxels(mask)) {
    IndexedPatch p{v, std::vector<float>(27 * sh_vol.channels())};
    copy_patch(sh_vol, v, p.patch.data());
    out.push_back(std::move(p));
  }
  return out;
}

/// Keeps the listed channels of a 4D volume, in the given order.
inline Volume4D select_channels(const Volume4D& vol, std::span<const std::size_t> idx) {
  Volume4D out({vol.nx(), vol.ny(), vol.nz(), idx.size()}, vol.kind, vol.sh_order);
  out.voxel_size_mm = vol.voxel_size_mm;
  for (std::size_t v = 0; v < vol.voxel_count(); ++v) {
    const auto src = vol.voxel(v);
    auto dst = out.voxel(v);
    for (std::size_t i = 0; i < idx.size(); ++i) dst[i] = src[idx[i]];
  }
  return out;
}

struct AugmentedInput {
  Volume4D sh;                 // sh_signal, order 8
  std::size_t kept_directions;  // DW directions that survived the dropout
  std::vector<std::size_t> kept_indices;  // scheme indices (b=0 included)
};

/// Direction-dropout variants of one acquisition. Each variant keeps a seeded count in [lo, hi] of the DW
/// directions (all b=0 volumes are kept) and refits the signal SH at order 8.
inline std::vector<AugmentedInput> augment_subject(const Volume4D& dwi, const GradientScheme& scheme,
                                                   std::size_t n_variants, std::pair<std::size_t, std::size_t> keep_range,
                                                   std::uint64_t seed, int order = 8) {
  const std::size_t n_dw = scheme.dw_indices().size();
  const auto [lo, hi] = keep_range;
  if (lo < sh_count(order)) fail(ErrorCode::KeepBelowShMinimum, "keep_range lower bound below the SH minimum");
  if (hi < lo || hi > n_dw) fail(ErrorCode::InvariantViolation, "keep_range must satisfy lo <= hi <= DW directions");
  Rng rng = make_rng(hash_seed(seed, 0xA06ull));
  std::uniform_int_distribution<std::size_t> count(lo, hi);
  std::vector<AugmentedInput> out;
  for (std::size_t i = 0; i < n_variants; ++i) {
    const std::size_t keep = count(rng);
    auto idx = drop_scheme_indices(scheme, keep, hash_seed(seed, i));
    const GradientScheme sub = subset_scheme(scheme, idx);
    out.push_back({fit_signal_sh(select_channels(dwi, idx), sub, order), keep, std::move(idx)});
  }
  return out;
}

/// Training data from one subject: signal SH inputs (first entry is the full acquisition, the rest are
/// dropout variants), the full-direction CSD label, the mask and an optional registered scan/rescan pair.
struct SubjectData {
  std::vector<Volume4D> inputs;
  std::vector<std::size_t> input_directions;
  Volume4D label;
  Volume4D mask;
  std::optional<std::pair<Volume4D, Volume4D>> pair;
};

struct TrainConfig {
  nlohmann::json model = {{"arch", "cnn"}};
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  LossWeights weights{1.0, 0.5};
  std::uint64_t seed = 0;
  double validation_fraction = 0.2;  // trailing z-slabs of each subject held out
};

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["model"] = c.model;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["alpha"] = c.weights.alpha;
  j["beta"] = c.weights.beta;
  j["seed"] = c.seed;
  j["validation_fraction"] = c.validation_fraction;
  return j;
}

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_loss1 = 0.0;
  double train_loss2 = 0.0;
  double val_loss1 = 0.0;
  double val_acc = 0.0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss1 = 0.0;
  std::size_t train_samples = 0;
  std::size_t val_samples = 0;
  std::size_t pair_samples = 0;
  bool pairs_same_subject = false;
  std::vector<std::pair<std::size_t, std::size_t>> direction_counts;  // (kept DW directions, samples drawn)
  std::vector<std::string> warnings;
};

inline nlohmann::ordered_json to_json(const TrainLog& log) {
  nlohmann::ordered_json j;
  j["best_epoch"] = log.best_epoch;
  j["best_val_loss1"] = log.best_val_loss1;
  j["train_samples"] = log.train_samples;
  j["val_samples"] = log.val_samples;
  j["pair_samples"] = log.pair_samples;
  j["pairs_same_subject"] = log.pairs_same_subject;
  j["direction_counts"] = nlohmann::ordered_json::array();
  for (const auto& [n, c] : log.direction_counts) j["direction_counts"].push_back({{"directions", n}, {"samples", c}});
  j["warnings"] = log.warnings;
  j["epochs"] = nlohmann::ordered_json::array();
  for (const auto& e : log.epochs)
    j["epochs"].push_back({{"epoch", e.epoch},
                           {"train_loss", e.train_loss},
                           {"train_loss1", e.train_loss1},
                           {"train_loss2", e.train_loss2},
                           {"val_loss1", e.val_loss1},
                           {"val_acc", e.val_acc}});
  return j;
}

struct TrainResult {
  ModelParams<float> params;
  TrainLog log;
};

/// Writes the network input of voxel v (a patch for the CNN, the voxel vector for the MLP) into out.
template <typename T>
void copy_input(const ModelParams<T>& p, const Volume4D& sh, std::size_t v, T* out) {
  if (p.arch == "cnn") {
    copy_patch(sh, v, out);
    return;
  }
  const auto src = sh.voxel(v);
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = static_cast<T>(src[i]);
}

/// Eval-mode prediction for the listed voxels, in fixed 256-voxel chunks so results do not depend on the
/// number of workers. Returns one row per voxel.
inline Mat<float> predict_voxels(const ModelParams<float>& p, const Volume4D& sh, std::span<const std::size_t> voxels) {
  const std::size_t in = input_size(p);
  const std::size_t out = output_size(p);
  if (p.arch == "cnn" && sh.channels() * 27 != in) fail(ErrorCode::ShapeMismatch, "input channels differ from the model");
  if (p.arch == "mlp" && sh.channels() != in) fail(ErrorCode::ShapeMismatch, "input channels differ from the model");
  constexpr std::size_t chunk = 256;
  Mat<float> result(static_cast<Eigen::Index>(voxels.size()), static_cast<Eigen::Index>(out));
  const std::size_t n_chunks = (voxels.size() + chunk - 1) / chunk;
  parallel_for(n_chunks, [&](std::size_t c) {
    const std::size_t b = c * chunk;
    const std::size_t e = std::min(voxels.size(), b + chunk);
    Mat<float> x(static_cast<Eigen::Index>(e - b), static_cast<Eigen::Index>(in));
    for (std::size_t i = b; i < e; ++i) copy_input(p, sh, voxels[i], x.row(static_cast<Eigen::Index>(i - b)).data());
    result.middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e - b)) = forward(p, x, false);
  });
  return result;
}

/// Full-volume prediction: fODF SH at every voxel the model can see (masked voxels with an in-bounds
/// neighborhood for the CNN, all masked voxels for the MLP); other voxels are zero.
inline Volume4D predict_volume(const ModelParams<float>& p, const Volume4D& sh, const Volume4D& mask, int order = 8) {
  if (!sh.same_grid(mask)) fail(ErrorCode::DimsMismatch, "mask grid differs from SH volume grid");
  validate_model(p);
  std::vector<std::size_t> voxels;
  if (p.arch == "cnn") {
    voxels = patch_voxels(mask);
  } else {
    for (std::size_t v = 0; v < mask.voxel_count(); ++v)
      if (mask.masked(v)) voxels.push_back(v);
  }
  const Mat<float> y = predict_voxels(p, sh, voxels);
  Volume4D out({sh.nx(), sh.ny(), sh.nz(), static_cast<std::size_t>(y.cols())}, VolumeKind::sh_fodf, order);
  out.voxel_size_mm = sh.voxel_size_mm;
  for (std::size_t i = 0; i < voxels.size(); ++i) {
    auto o = out.voxel(voxels[i]);
    for (std::size_t k = 0; k < o.size(); ++k) o[k] = y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
  }
  return out;
}

namespace detail {

struct SampleRef {
  std::size_t subject = 0;
  std::size_t voxel = 0;
};

// Training and validation voxels of one subject: the trailing z-slabs (validation_fraction of the
// usable z range) are held out.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_voxels(const std::vector<std::size_t>& voxels,
                                                                                  const Volume4D& mask, double val_fraction) {
  if (voxels.empty()) return {};
  std::size_t zmin = mask.nz(), zmax = 0;
  for (auto v : voxels) {
    const auto z = mask.voxel_coords(v)[2];
    zmin = std::min(zmin, z);
    zmax = std::max(zmax, z);
  }
  const std::size_t span = zmax - zmin + 1;
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(span)));
  const std::size_t z_cut = zmax + 1 - std::min(n_val, span);
  std::vector<std::size_t> train, val;
  for (auto v : voxels) (mask.voxel_coords(v)[2] >= z_cut ? val : train).push_back(v);
  return {train, val};
}

}  // namespace detail

/// Mean loss1 and ACC of the model against labels over the given samples (eval mode).
inline std::pair<double, double> evaluate_samples(const ModelParams<float>& p, const std::vector<SubjectData>& subjects,
                                                  const std::vector<detail::SampleRef>& samples) {
  if (samples.empty()) return {0.0, 0.0};
  double loss1 = 0.0, acc_sum = 0.0;
  std::size_t acc_n = 0;
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    std::vector<std::size_t> voxels;
    for (const auto& r : samples)
      if (r.subject == s) voxels.push_back(r.voxel);
    if (voxels.empty()) continue;
    const Mat<float> y = predict_voxels(p, subjects[s].inputs.front(), voxels);
    const int order = subjects[s].label.sh_order;
    for (std::size_t i = 0; i < voxels.size(); ++i) {
      const ShCoeffs label = ShCoeffs::from_span(order, subjects[s].label.voxel(voxels[i]));
      const ShCoeffs pred(order, y.row(static_cast<Eigen::Index>(i)).transpose().cast<double>());
      loss1 += (pred.c - label.c).squaredNorm();
      if (auto a = try_acc(pred, label)) {
        acc_sum += *a;
        ++acc_n;
      }
    }
  }
  return {loss1 / static_cast<double>(samples.size()), acc_n ? acc_sum / static_cast<double>(acc_n) : 0.0};
}

/// Mini-batch Adam training of alpha*loss1 + beta*loss2. Returns the parameters of the epoch with the
/// lowest validation loss1 together with the per-epoch log.
inline TrainResult train(const TrainConfig& cfg, const std::vector<SubjectData>& subjects) {
  cfg.weights.validate();
  if (subjects.empty()) fail(ErrorCode::EmptyMask, "training needs at least one labeled subject");
  if (cfg.batch_size == 0) fail(ErrorCode::InvariantViolation, "batch_size must be positive");

  ModelParams<float> params = init_model<float>(cfg.model, cfg.seed);
  const bool cnn = params.arch == "cnn";
  TrainResult result;
  TrainLog& log = result.log;

  std::vector<detail::SampleRef> train_refs, val_refs;
  std::vector<std::vector<std::size_t>> pair_pool(subjects.size());
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    const auto& sub = subjects[s];
    if (sub.inputs.empty()) fail(ErrorCode::ShapeMismatch, "subject has no input volume");
    if (!sub.label.same_grid(sub.mask)) fail(ErrorCode::DimsMismatch, "label grid differs from mask grid");
    for (const auto& in : sub.inputs)
      if (!in.same_grid(sub.mask)) fail(ErrorCode::DimsMismatch, "input grid differs from mask grid");
    std::vector<std::size_t> voxels;
    if (cnn) {
      voxels = patch_voxels(sub.mask);
    } else {
      for (std::size_t v = 0; v < sub.mask.voxel_count(); ++v)
        if (sub.mask.masked(v)) voxels.push_back(v);
    }
    auto [tr, va] = detail::split_voxels(voxels, sub.mask, cfg.validation_fraction);
    for (auto v : tr) train_refs.push_back({s, v});
    for (auto v : va) val_refs.push_back({s, v});
    if (sub.pair) pair_pool[s] = tr;
  }
  if (train_refs.empty()) fail(ErrorCode::EmptyMask, "no training voxels");

  std::vector<std::size_t> pair_subjects;
  for (std::size_t s = 0; s < subjects.size(); ++s)
    if (!pair_pool[s].empty()) pair_subjects.push_back(s);
  const bool use_pairs = cfg.weights.beta > 0.0;
  if (use_pairs && pair_subjects.empty()) fail(ErrorCode::NoPairsForBeta, "beta > 0 but no scan/rescan pairs");
  if (use_pairs && pair_subjects.size() == 1 && subjects.size() == 1) {
    log.pairs_same_subject = true;
    log.warnings.push_back("only one subject: paired patches come from the labeled subject");
  }
  log.train_samples = train_refs.size();
  log.val_samples = val_refs.size();
  for (auto s : pair_subjects) log.pair_samples += pair_pool[s].size();

  const Eigen::Index in = static_cast<Eigen::Index>(input_size(params));
  const Eigen::Index out = static_cast<Eigen::Index>(output_size(params));
  Rng rng = make_rng(hash_seed(cfg.seed, 0x7EA1Eull));
  AdamState<float> adam;
  std::vector<std::size_t> order(train_refs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::size_t> pair_cursor(subjects.size(), 0);
  std::vector<std::vector<std::size_t>> pair_order = pair_pool;
  std::map<std::size_t, std::size_t> direction_counts;

  // Next paired voxel from a subject other than `avoid` when one exists; each subject's pool is walked
  // in a reshuffled order.
  auto next_pair = [&](std::size_t avoid) -> detail::SampleRef {
    std::vector<std::size_t> candidates;
    for (auto s : pair_subjects)
      if (s != avoid) candidates.push_back(s);
    if (candidates.empty()) candidates = pair_subjects;
    const std::size_t s = candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)];
    if (pair_cursor[s] == 0) std::shuffle(pair_order[s].begin(), pair_order[s].end(), rng);
    const std::size_t v = pair_order[s][pair_cursor[s]];
    pair_cursor[s] = (pair_cursor[s] + 1) % pair_order[s].size();
    return {s, v};
  };

  double best = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum_loss = 0.0, sum_l1 = 0.0, sum_l2 = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      // A single-sample batch has no batch statistics to normalize with.
      if (cnn && e - b < 2) continue;
      Batch<float> batch;
      batch.x.resize(static_cast<Eigen::Index>(e - b), in);
      batch.target.resize(static_cast<Eigen::Index>(e - b), out);
      if (use_pairs) {
        batch.u.resize(static_cast<Eigen::Index>(e - b), in);
        batch.v.resize(static_cast<Eigen::Index>(e - b), in);
      }
      for (std::size_t i = b; i < e; ++i) {
        const auto& ref = train_refs[order[i]];
        const auto& sub = subjects[ref.subject];
        const std::size_t variant =
            std::uniform_int_distribution<std::size_t>(0, sub.inputs.size() - 1)(rng);
        ++direction_counts[sub.input_directions.empty() ? 0 : sub.input_directions[variant]];
        const auto row = static_cast<Eigen::Index>(i - b);
        copy_input(params, sub.inputs[variant], ref.voxel, batch.x.row(row).data());
        const auto lab = sub.label.voxel(ref.voxel);
        for (Eigen::Index k = 0; k < out; ++k) batch.target(row, k) = lab[static_cast<std::size_t>(k)];
        if (use_pairs) {
          const auto pr = next_pair(ref.subject);
          copy_input(params, subjects[pr.subject].pair->first, pr.voxel, batch.u.row(row).data());
          copy_input(params, subjects[pr.subject].pair->second, pr.voxel, batch.v.row(row).data());
        }
      }
      auto lg = loss_and_gradient(params, batch, cfg.weights);
      if (!std::isfinite(lg.loss))
        fail(ErrorCode::DivergenceDetected, "loss is not finite at epoch " + std::to_string(epoch));
      update_running_stats(params, lg.labeled_cache);
      adam_step(params, lg.grads, adam, cfg.lr);
      sum_loss += lg.loss;
      sum_l1 += lg.loss1;
      sum_l2 += lg.loss2;
      ++n_batches;
    }
    EpochLog el;
    el.epoch = epoch;
    if (n_batches) {
      el.train_loss = sum_loss / static_cast<double>(n_batches);
      el.train_loss1 = sum_l1 / static_cast<double>(n_batches);
      el.train_loss2 = sum_l2 / static_cast<double>(n_batches);
    }
    const auto [vl, va] = evaluate_samples(params, subjects, val_refs.empty() ? train_refs : val_refs);
    el.val_loss1 = vl;
    el.val_acc = va;
    if (!std::isfinite(vl)) fail(ErrorCode::DivergenceDetected, "validation loss is not finite");
    log.epochs.push_back(el);
    if (vl < best) {
      best = vl;
      log.best_epoch = epoch;
      log.best_val_loss1 = vl;
      result.params = params;
    }
  }
  if (cfg.epochs == 0) result.params = params;
  for (const auto& [n, c] : direction_counts) log.direction_counts.emplace_back(n, c);
  return result;
}

}  // namespace fodf
