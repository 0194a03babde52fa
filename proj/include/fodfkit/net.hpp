#pragma once

// Patch CNN and voxel MLP with hand-written reverse mode.
//
// Activations are row-major matrices. For the CNN a batch of B patches is held as (B*27) x C: row
// b*27 + p is voxel p = (x*3 + y)*3 + z of patch b, which is also the memory order of a
// [3,3,3,C] patch tensor. Convolutions are pad-same 3x3x3 via im2col; the im2col column block k
// = (kx*3 + ky)*3 + kz matches the [3,3,3,in,out] weight layout, so the weight array maps directly
// onto a (27*in) x out matrix.
//
// CNN:  conv1 -> bn1 -> relu (a1) -> conv2 -> bn2 -> relu -> conv3 -> bn3, + a1 -> relu
//       -> flatten -> dense1 -> relu -> dense2
// MLP:  dense1 -> relu -> dense2 -> relu -> ... -> denseN

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "error.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "sh.hpp"

namespace fodf {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

inline constexpr std::size_t kPatchVoxels = 27;

struct CnnConfig {
  std::size_t in_channels = 45;
  std::size_t channels = 64;
  std::size_t hidden = 256;
  std::size_t out = 45;
  double output_init_scale = 0.0;  // multiplies the LeCun bound of the output layer
};

struct MlpConfig {
  std::vector<std::size_t> widths{45, 400, 45, 200, 45};
  double output_init_scale = 0.0;
};

struct BnConfig {
  double momentum = 0.1;
  double eps = 1e-5;
};

namespace detail {

template <typename T>
ParamArray<T> uniform_array(std::string name, std::vector<std::size_t> shape, double bound, Rng& rng) {
  ParamArray<T> a{std::move(name), std::move(shape), {}};
  a.data.resize(shape_product(a.shape));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& x : a.data) x = static_cast<T>(u(rng));
  return a;
}

template <typename T>
ParamArray<T> filled_array(std::string name, std::size_t n, T value) {
  return {std::move(name), {n}, ParamData<T>(n, value)};
}

template <typename T>
Layer<T> conv_layer(std::string name, std::size_t in, std::size_t out, Rng& rng) {
  Layer<T> l{std::move(name), LayerKind::conv3, {}};
  l.arrays.push_back(uniform_array<T>("weight", {3, 3, 3, in, out}, std::sqrt(6.0 / (27.0 * in)), rng));
  return l;
}

template <typename T>
Layer<T> bn_layer(std::string name, std::size_t c) {
  Layer<T> l{std::move(name), LayerKind::batchnorm, {}};
  l.arrays.push_back(filled_array<T>("gamma", c, T(1)));
  l.arrays.push_back(filled_array<T>("beta", c, T(0)));
  l.arrays.push_back(filled_array<T>("running_mean", c, T(0)));
  l.arrays.push_back(filled_array<T>("running_var", c, T(1)));
  return l;
}

// He-uniform for layers followed by a ReLU, LeCun-uniform for the linear output layer.
template <typename T>
Layer<T> dense_layer(std::string name, std::size_t in, std::size_t out, bool relu_follows, Rng& rng,
                     double scale = 1.0) {
  Layer<T> l{std::move(name), LayerKind::dense, {}};
  l.arrays.push_back(uniform_array<T>("weight", {in, out}, scale * std::sqrt((relu_follows ? 6.0 : 3.0) / in), rng));
  l.arrays.push_back(filled_array<T>("bias", out, T(0)));
  return l;
}

}  // namespace detail

template <typename T = float>
ModelParams<T> init_cnn(const CnnConfig& cfg, std::uint64_t seed, const BnConfig& bn = {}) {
  ModelParams<T> p;
  p.arch = "cnn";
  p.hyper = {{"arch", "cnn"},
             {"in_channels", cfg.in_channels},
             {"channels", cfg.channels},
             {"hidden", cfg.hidden},
             {"out", cfg.out},
             {"bn_momentum", bn.momentum},
             {"bn_eps", bn.eps},
             {"output_init_scale", cfg.output_init_scale}};
  Rng rng = make_rng(hash_seed(seed, 0xC0417ull));
  p.layers.push_back(detail::conv_layer<T>("conv1", cfg.in_channels, cfg.channels, rng));
  p.layers.push_back(detail::bn_layer<T>("bn1", cfg.channels));
  p.layers.push_back(detail::conv_layer<T>("conv2", cfg.channels, cfg.channels, rng));
  p.layers.push_back(detail::bn_layer<T>("bn2", cfg.channels));
  p.layers.push_back(detail::conv_layer<T>("conv3", cfg.channels, cfg.channels, rng));
  p.layers.push_back(detail::bn_layer<T>("bn3", cfg.channels));
  p.layers.push_back(detail::dense_layer<T>("dense1", kPatchVoxels * cfg.channels, cfg.hidden, true, rng));
  p.layers.push_back(detail::dense_layer<T>("dense2", cfg.hidden, cfg.out, false, rng, cfg.output_init_scale));
  return p;
}

template <typename T = float>
ModelParams<T> init_mlp(const MlpConfig& cfg, std::uint64_t seed) {
  if (cfg.widths.size() < 2) fail(ErrorCode::ShapeMismatch, "MLP needs at least input and output widths");
  ModelParams<T> p;
  p.arch = "mlp";
  p.hyper = {{"arch", "mlp"}, {"widths", cfg.widths}, {"output_init_scale", cfg.output_init_scale}};
  Rng rng = make_rng(hash_seed(seed, 0x3A1Full));
  for (std::size_t i = 0; i + 1 < cfg.widths.size(); ++i)
    p.layers.push_back(detail::dense_layer<T>("dense" + std::to_string(i + 1), cfg.widths[i], cfg.widths[i + 1],
                                              i + 2 < cfg.widths.size(), rng,
                                              i + 2 < cfg.widths.size() ? 1.0 : cfg.output_init_scale));
  return p;
}

/// Input row length of one sample: 27*in for the CNN, widths[0] for the MLP.
template <typename T>
std::size_t input_size(const ModelParams<T>& p) {
  if (p.arch == "cnn") return kPatchVoxels * p.layer("conv1").array("weight").shape[3];
  if (p.arch == "mlp") return p.layers.front().array("weight").shape[0];
  fail(ErrorCode::ShapeMismatch, "unknown architecture '" + p.arch + "'");
}

template <typename T>
std::size_t output_size(const ModelParams<T>& p) {
  return p.layers.back().array("weight").shape[1];
}

/// Checks that layer shapes compose for the declared architecture.
template <typename T>
void validate_model(const ModelParams<T>& p) {
  auto expect = [](bool ok, const std::string& what) {
    if (!ok) fail(ErrorCode::ShapeMismatch, what);
  };
  for (const auto& l : p.layers)
    for (const auto& a : l.arrays) expect(a.data.size() == shape_product(a.shape), "array size in " + l.name);
  if (p.arch == "cnn") {
    expect(p.layers.size() == 8, "cnn expects 8 layers");
    const auto& w1 = p.layer("conv1").array("weight").shape;
    expect(w1.size() == 5 && w1[0] == 3 && w1[1] == 3 && w1[2] == 3, "conv1 kernel must be 3x3x3");
    const std::size_t c = w1[4];
    for (const char* n : {"conv2", "conv3"}) {
      const auto& w = p.layer(n).array("weight").shape;
      expect(w == std::vector<std::size_t>{3, 3, 3, c, c}, std::string(n) + " shape");
    }
    for (const char* n : {"bn1", "bn2", "bn3"})
      for (const char* a : {"gamma", "beta", "running_mean", "running_var"})
        expect(p.layer(n).array(a).shape == std::vector<std::size_t>{c}, std::string(n) + " channels");
    const auto& d1 = p.layer("dense1").array("weight").shape;
    expect(d1.size() == 2 && d1[0] == kPatchVoxels * c, "dense1 input must be 27*channels");
    const auto& d2 = p.layer("dense2").array("weight").shape;
    expect(d2.size() == 2 && d2[0] == d1[1], "dense2 input");
    expect(p.layer("dense1").array("bias").size() == d1[1] && p.layer("dense2").array("bias").size() == d2[1],
           "dense bias");
  } else if (p.arch == "mlp") {
    expect(!p.layers.empty(), "mlp has no layers");
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
      const auto& l = p.layers[i];
      expect(l.kind == LayerKind::dense, "mlp layers are dense");
      const auto& w = l.array("weight").shape;
      expect(w.size() == 2 && l.array("bias").size() == w[1], l.name + " shape");
      if (i) expect(w[0] == p.layers[i - 1].array("weight").shape[1], l.name + " input width");
    }
  } else {
    fail(ErrorCode::ShapeMismatch, "unknown architecture '" + p.arch + "'");
  }
}

namespace detail {

// nb[p][k]: voxel feeding output voxel p through kernel tap k, or -1 outside the patch.
inline const std::array<std::array<int, 27>, 27>& neighbor_table() {
  static const auto table = [] {
    std::array<std::array<int, 27>, 27> t{};
    for (int x = 0; x < 3; ++x)
      for (int y = 0; y < 3; ++y)
        for (int z = 0; z < 3; ++z)
          for (int kx = 0; kx < 3; ++kx)
            for (int ky = 0; ky < 3; ++ky)
              for (int kz = 0; kz < 3; ++kz) {
                const int qx = x + kx - 1, qy = y + ky - 1, qz = z + kz - 1;
                const bool in = qx >= 0 && qx < 3 && qy >= 0 && qy < 3 && qz >= 0 && qz < 3;
                t[(x * 3 + y) * 3 + z][(kx * 3 + ky) * 3 + kz] = in ? (qx * 3 + qy) * 3 + qz : -1;
              }
    return t;
  }();
  return table;
}

template <typename T>
Mat<T> im2col(const Mat<T>& x) {
  const Eigen::Index c = x.cols();
  const Eigen::Index batch = x.rows() / 27;
  Mat<T> col = Mat<T>::Zero(x.rows(), 27 * c);
  const auto& nb = neighbor_table();
  for (Eigen::Index b = 0; b < batch; ++b)
    for (int p = 0; p < 27; ++p)
      for (int k = 0; k < 27; ++k)
        if (nb[p][k] >= 0) col.block(b * 27 + p, k * c, 1, c) = x.row(b * 27 + nb[p][k]);
  return col;
}

template <typename T>
Mat<T> col2im(const Mat<T>& dcol, Eigen::Index c) {
  const Eigen::Index batch = dcol.rows() / 27;
  Mat<T> dx = Mat<T>::Zero(dcol.rows(), c);
  const auto& nb = neighbor_table();
  for (Eigen::Index b = 0; b < batch; ++b)
    for (int p = 0; p < 27; ++p)
      for (int k = 0; k < 27; ++k)
        if (nb[p][k] >= 0) dx.row(b * 27 + nb[p][k]) += dcol.block(b * 27 + p, k * c, 1, c);
  return dx;
}

template <typename T>
Eigen::Map<const Mat<T>> weight_matrix(const ParamArray<T>& a) {
  const auto in = static_cast<Eigen::Index>(a.shape.size() == 5 ? 27 * a.shape[3] : a.shape[0]);
  const auto out = static_cast<Eigen::Index>(a.shape.back());
  return Eigen::Map<const Mat<T>>(a.data.data(), in, out);
}

template <typename T>
Eigen::Map<const RowVec<T>> row_vector(const ParamArray<T>& a) {
  return Eigen::Map<const RowVec<T>>(a.data.data(), static_cast<Eigen::Index>(a.size()));
}

template <typename T>
Eigen::Map<Mat<T>> weight_matrix(ParamArray<T>& a) {
  const auto in = static_cast<Eigen::Index>(a.shape.size() == 5 ? 27 * a.shape[3] : a.shape[0]);
  const auto out = static_cast<Eigen::Index>(a.shape.back());
  return Eigen::Map<Mat<T>>(a.data.data(), in, out);
}

template <typename T>
Eigen::Map<RowVec<T>> row_vector(ParamArray<T>& a) {
  return Eigen::Map<RowVec<T>>(a.data.data(), static_cast<Eigen::Index>(a.size()));
}

template <typename T>
Mat<T> relu(const Mat<T>& x) {
  return x.cwiseMax(T(0));
}

template <typename T>
Mat<T> relu_backward(const Mat<T>& dy, const Mat<T>& pre) {
  return (pre.array() > T(0)).select(dy, T(0));
}

template <typename T>
struct BnCache {
  Mat<T> xhat;
  RowVec<T> inv_std;
  RowVec<T> batch_mean;
  RowVec<T> batch_var;  // unbiased, for the running estimate
  bool batch_stats = false;
};

template <typename T>
Mat<T> bn_forward(const Layer<T>& l, const Mat<T>& z, bool train, T eps, BnCache<T>& cache) {
  const auto n = static_cast<T>(z.rows());
  RowVec<T> mean, var;
  if (train) {
    mean = z.colwise().mean();
    var = (z.rowwise() - mean).array().square().colwise().sum() / n;
    cache.batch_mean = mean;
    cache.batch_var = z.rows() > 1 ? RowVec<T>(var * (n / (n - T(1)))) : var;
  } else {
    mean = row_vector(l.array("running_mean"));
    var = row_vector(l.array("running_var"));
  }
  cache.batch_stats = train;
  cache.inv_std = (var.array() + eps).rsqrt();
  cache.xhat = (z.rowwise() - mean).array().rowwise() * cache.inv_std.array();
  return (cache.xhat.array().rowwise() * row_vector(l.array("gamma")).array()).rowwise() +
         row_vector(l.array("beta")).array();
}

template <typename T>
Mat<T> bn_backward(const Layer<T>& l, const Mat<T>& dy, const BnCache<T>& cache, Layer<T>& grad) {
  row_vector(grad.array("gamma")) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  row_vector(grad.array("beta")) += dy.colwise().sum();
  const Mat<T> dxhat = dy.array().rowwise() * row_vector(l.array("gamma")).array();
  if (!cache.batch_stats) return dxhat.array().rowwise() * cache.inv_std.array();
  const auto n = static_cast<T>(dy.rows());
  const RowVec<T> sum_dxhat = dxhat.colwise().sum();
  const RowVec<T> sum_dxhat_xhat = (dxhat.array() * cache.xhat.array()).colwise().sum();
  Mat<T> dz = (dxhat.array() * n).rowwise() - sum_dxhat.array();
  dz.array() -= cache.xhat.array().rowwise() * sum_dxhat_xhat.array();
  return dz.array().rowwise() * (cache.inv_std.array() / n);
}

}  // namespace detail

/// Intermediate values kept by a forward pass for the backward pass and the BN running update.
template <typename T>
struct ForwardCache {
  bool train = false;
  std::vector<Mat<T>> cols;             // CNN im2col inputs of conv1..3
  std::vector<Mat<T>> pre;              // pre-ReLU values, in network order
  std::vector<Mat<T>> acts;             // inputs of dense layers
  std::vector<detail::BnCache<T>> bn;   // bn1..3
};

/// Batch forward pass. X holds one sample per row (input_size columns); returns B x out.
template <typename T>
Mat<T> forward(const ModelParams<T>& p, const Mat<T>& X, bool train, ForwardCache<T>* cache = nullptr) {
  if (static_cast<std::size_t>(X.cols()) != input_size(p))
    fail(ErrorCode::ShapeMismatch, "input width " + std::to_string(X.cols()) + ", model expects " +
                                       std::to_string(input_size(p)));
  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  c = ForwardCache<T>{};
  c.train = train;
  const Eigen::Index B = X.rows();

  if (p.arch == "mlp") {
    Mat<T> a = X;
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
      const auto& l = p.layers[i];
      c.acts.push_back(a);
      Mat<T> z = a * detail::weight_matrix(l.array("weight"));
      z.rowwise() += detail::row_vector(l.array("bias"));
      if (i + 1 == p.layers.size()) return z;
      c.pre.push_back(z);
      a = detail::relu(z);
    }
  }

  const T eps = static_cast<T>(p.hyper.value("bn_eps", 1e-5));
  const auto cin = static_cast<Eigen::Index>(input_size(p) / kPatchVoxels);
  const Mat<T> x = Eigen::Map<const Mat<T>>(X.data(), B * 27, cin);
  c.bn.resize(3);
  auto block = [&](const Mat<T>& in, int i) {
    c.cols.push_back(detail::im2col(in));
    const Mat<T> z = c.cols.back() * detail::weight_matrix(p.layers[2 * i].array("weight"));
    return detail::bn_forward(p.layers[2 * i + 1], z, train, eps, c.bn[static_cast<std::size_t>(i)]);
  };
  const Mat<T> y1 = block(x, 0);
  const Mat<T> a1 = detail::relu(y1);
  const Mat<T> y2 = block(a1, 1);
  const Mat<T> a2 = detail::relu(y2);
  const Mat<T> h = block(a2, 2) + a1;
  c.pre = {y1, y2, h};
  const Mat<T> r = detail::relu(h);
  const Mat<T> flat = Eigen::Map<const Mat<T>>(r.data(), B, r.size() / B);
  c.acts.push_back(flat);
  Mat<T> d1 = flat * detail::weight_matrix(p.layer("dense1").array("weight"));
  d1.rowwise() += detail::row_vector(p.layer("dense1").array("bias"));
  c.pre.push_back(d1);
  c.acts.push_back(detail::relu(d1));
  Mat<T> out = c.acts.back() * detail::weight_matrix(p.layer("dense2").array("weight"));
  out.rowwise() += detail::row_vector(p.layer("dense2").array("bias"));
  return out;
}

/// Zero-valued gradient container with the same layout as p.
template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& p) {
  ModelParams<T> g = p;
  for (auto& l : g.layers)
    for (auto& a : l.arrays) std::fill(a.data.begin(), a.data.end(), T(0));
  return g;
}

/// Accumulates parameter gradients of sum(dOut .* out) into grads.
template <typename T>
void backward(const ModelParams<T>& p, const ForwardCache<T>& c, const Mat<T>& dout, ModelParams<T>& grads) {
  const Eigen::Index B = dout.rows();
  if (p.arch == "mlp") {
    Mat<T> d = dout;
    for (std::size_t i = p.layers.size(); i-- > 0;) {
      const auto& l = p.layers[i];
      auto& g = grads.layers[i];
      detail::weight_matrix(g.array("weight")).noalias() += c.acts[i].transpose() * d;
      detail::row_vector(g.array("bias")) += d.colwise().sum();
      if (i == 0) break;
      d = detail::relu_backward<T>(d * detail::weight_matrix(l.array("weight")).transpose(), c.pre[i - 1]);
    }
    return;
  }

  auto gl = [&](const char* n) -> Layer<T>& { return grads.layer(n); };
  const auto& w_d2 = p.layer("dense2").array("weight");
  detail::weight_matrix(gl("dense2").array("weight")).noalias() += c.acts[1].transpose() * dout;
  detail::row_vector(gl("dense2").array("bias")) += dout.colwise().sum();
  const Mat<T> dd1 = detail::relu_backward<T>(dout * detail::weight_matrix(w_d2).transpose(), c.pre[3]);
  detail::weight_matrix(gl("dense1").array("weight")).noalias() += c.acts[0].transpose() * dd1;
  detail::row_vector(gl("dense1").array("bias")) += dd1.colwise().sum();
  const Mat<T> dflat = dd1 * detail::weight_matrix(p.layer("dense1").array("weight")).transpose();
  const Eigen::Index ch = c.pre[2].cols();
  const Mat<T> dr = Eigen::Map<const Mat<T>>(dflat.data(), B * 27, ch);
  const Mat<T> dh = detail::relu_backward<T>(dr, c.pre[2]);

  auto block_back = [&](const Mat<T>& dy, int i, bool need_input) {
    const auto& conv = p.layers[static_cast<std::size_t>(2 * i)];
    const Mat<T> dz = detail::bn_backward(p.layers[static_cast<std::size_t>(2 * i + 1)], dy,
                                          c.bn[static_cast<std::size_t>(i)], grads.layers[static_cast<std::size_t>(2 * i + 1)]);
    detail::weight_matrix(grads.layers[static_cast<std::size_t>(2 * i)].array("weight")).noalias() +=
        c.cols[static_cast<std::size_t>(i)].transpose() * dz;
    if (!need_input) return Mat<T>();
    const auto& w = conv.array("weight");
    return detail::col2im<T>(dz * detail::weight_matrix(w).transpose(), static_cast<Eigen::Index>(w.shape[3]));
  };
  const Mat<T> da2 = block_back(dh, 2, true);
  const Mat<T> da1 = block_back(detail::relu_backward<T>(da2, c.pre[1]), 1, true) + dh;
  block_back(detail::relu_backward<T>(da1, c.pre[0]), 0, false);
}

/// Moves BN running statistics towards the batch statistics recorded in a train-mode cache.
template <typename T>
void update_running_stats(ModelParams<T>& p, const ForwardCache<T>& c) {
  if (p.arch != "cnn" || !c.train) return;
  const T mom = static_cast<T>(p.hyper.value("bn_momentum", 0.1));
  for (std::size_t i = 0; i < c.bn.size(); ++i) {
    auto& l = p.layers[2 * i + 1];
    auto rm = detail::row_vector(l.array("running_mean"));
    auto rv = detail::row_vector(l.array("running_var"));
    rm = (T(1) - mom) * rm + mom * c.bn[i].batch_mean;
    rv = (T(1) - mom) * rv + mom * c.bn[i].batch_var;
  }
}

/// Single CNN sample: patch is a [3,3,3,in] tensor in row-major order.
template <typename T>
ShCoeffs forward_cnn(const ModelParams<T>& p, std::span<const T> patch, bool train_mode = false, int order = 8) {
  if (p.arch != "cnn") fail(ErrorCode::ShapeMismatch, "model is not a CNN");
  if (patch.size() != input_size(p)) fail(ErrorCode::ShapeMismatch, "patch size does not match the model");
  Mat<T> x = Eigen::Map<const Mat<T>>(patch.data(), 1, static_cast<Eigen::Index>(patch.size()));
  const Mat<T> y = forward(p, x, train_mode);
  return ShCoeffs(order, y.row(0).transpose().template cast<double>());
}

template <typename T>
ShCoeffs forward_mlp(const ModelParams<T>& p, const ShCoeffs& signal_sh) {
  if (p.arch != "mlp") fail(ErrorCode::ShapeMismatch, "model is not an MLP");
  if (signal_sh.size() != input_size(p)) fail(ErrorCode::ShapeMismatch, "input length does not match the model");
  Mat<T> x = signal_sh.c.transpose().template cast<T>();
  const Mat<T> y = forward(p, x, false);
  return ShCoeffs(signal_sh.order, y.row(0).transpose().template cast<double>());
}

struct LossWeights {
  double alpha = 1.0;
  double beta = 0.5;

  void validate() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0) || !(alpha + beta > 0.0))
      fail(ErrorCode::InvariantViolation, "loss weights must be nonnegative with alpha + beta > 0");
  }
};

/// Per-sample loss: alpha*|pred - truth|^2 + beta*|pred_u - pred_v|^2.
inline double loss(const ShCoeffs& pred, const ShCoeffs& truth, const ShCoeffs& pred_u, const ShCoeffs& pred_v,
                   const LossWeights& w) {
  if (pred.order != truth.order || pred_u.order != pred_v.order)
    fail(ErrorCode::ShapeMismatch, "loss needs matching SH orders");
  const double l1 = (pred.c - truth.c).squaredNorm();
  if (w.beta == 0.0) return w.alpha * l1;
  return w.alpha * l1 + w.beta * (pred_u.c - pred_v.c).squaredNorm();
}

/// Training batch: labeled rows x/target and optional paired rows u/v (same voxel, two acquisitions).
template <typename T>
struct Batch {
  Mat<T> x, target;
  Mat<T> u, v;

  bool has_pairs() const { return u.rows() > 0; }
};

template <typename T>
struct LossGrad {
  double loss = 0.0;
  double loss1 = 0.0;  // mean over labeled rows of |pred - target|^2
  double loss2 = 0.0;  // mean over pairs of |pred_u - pred_v|^2
  ModelParams<T> grads;
  ForwardCache<T> labeled_cache;
};

/// Batch loss alpha*mean(loss1) + beta*mean(loss2) and its gradient. The labeled and paired branches
/// are separate forward passes, so beta = 0 leaves the paired branch out of the graph entirely.
template <typename T>
LossGrad<T> loss_and_gradient(const ModelParams<T>& p, const Batch<T>& batch, const LossWeights& w,
                              bool with_gradient = true) {
  w.validate();
  LossGrad<T> r;
  if (with_gradient) r.grads = zeros_like(p);
  if (batch.x.rows() > 0) {
    const Mat<T> pred = forward(p, batch.x, true, &r.labeled_cache);
    const Mat<T> diff = pred - batch.target;
    const auto n = static_cast<double>(batch.x.rows());
    r.loss1 = static_cast<double>(diff.template cast<double>().squaredNorm()) / n;
    if (with_gradient && w.alpha != 0.0) backward(p, r.labeled_cache, Mat<T>(diff * static_cast<T>(2.0 * w.alpha / n)), r.grads);
  }
  if (w.beta != 0.0) {
    if (!batch.has_pairs()) fail(ErrorCode::NoPairsForBeta, "beta > 0 needs paired samples");
    const Eigen::Index n_pairs = batch.u.rows();
    Mat<T> uv(2 * n_pairs, batch.u.cols());
    uv << batch.u, batch.v;
    ForwardCache<T> cache;
    const Mat<T> out = forward(p, uv, true, &cache);
    const Mat<T> diff = out.topRows(n_pairs) - out.bottomRows(n_pairs);
    const auto n = static_cast<double>(n_pairs);
    r.loss2 = static_cast<double>(diff.template cast<double>().squaredNorm()) / n;
    if (with_gradient) {
      Mat<T> dout(2 * n_pairs, diff.cols());
      const T s = static_cast<T>(2.0 * w.beta / n);
      dout << diff * s, diff * -s;
      backward(p, cache, dout, r.grads);
    }
  }
  r.loss = w.alpha * r.loss1 + w.beta * r.loss2;
  return r;
}

inline bool is_trainable(std::string_view array_name) {
  return array_name != "running_mean" && array_name != "running_var";
}

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m, v;  // per trainable array, in layer order
};

/// Bias-corrected Adam update of every trainable array.
template <typename T>
void adam_step(ModelParams<T>& p, const ModelParams<T>& grads, AdamState<T>& s, double lr) {
  if (s.m.empty())
    for (const auto& l : p.layers)
      for (const auto& a : l.arrays)
        if (is_trainable(a.name)) {
          s.m.emplace_back(a.size(), 0.0);
          s.v.emplace_back(a.size(), 0.0);
        }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  std::size_t k = 0;
  for (std::size_t li = 0; li < p.layers.size(); ++li)
    for (std::size_t ai = 0; ai < p.layers[li].arrays.size(); ++ai) {
      auto& a = p.layers[li].arrays[ai];
      if (!is_trainable(a.name)) continue;
      const auto& g = grads.layers[li].arrays[ai].data;
      if (g.size() != a.size()) fail(ErrorCode::ShapeMismatch, "gradient layout differs from parameters");
      auto& m = s.m[k];
      auto& v = s.v[k];
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * gi;
        v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * gi * gi;
        a.data[i] = static_cast<T>(static_cast<double>(a.data[i]) - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + s.eps));
      }
      ++k;
    }
}

/// Builds an initialized model from a hyperparameter object ({"arch": "cnn"|"mlp", ...}).
template <typename T = float>
ModelParams<T> init_model(const nlohmann::json& hyper, std::uint64_t seed) {
  const std::string arch = hyper.value("arch", "cnn");
  if (arch == "cnn") {
    CnnConfig c;
    c.in_channels = hyper.value("in_channels", c.in_channels);
    c.channels = hyper.value("channels", c.channels);
    c.hidden = hyper.value("hidden", c.hidden);
    c.out = hyper.value("out", c.out);
    c.output_init_scale = hyper.value("output_init_scale", c.output_init_scale);
    BnConfig bn;
    bn.momentum = hyper.value("bn_momentum", bn.momentum);
    bn.eps = hyper.value("bn_eps", bn.eps);
    return init_cnn<T>(c, seed, bn);
  }
  if (arch == "mlp") {
    MlpConfig c;
    if (hyper.contains("widths")) c.widths = hyper.at("widths").get<std::vector<std::size_t>>();
    c.output_init_scale = hyper.value("output_init_scale", c.output_init_scale);
    return init_mlp<T>(c, seed);
  }
  fail(ErrorCode::ShapeMismatch, "unknown architecture '" + arch + "'");
}

}  // namespace fodf
