#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "error.hpp"

namespace fodf {

enum class LayerKind { conv3, dense, batchnorm };

constexpr std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv3: return "conv3";
    case LayerKind::dense: return "dense";
    case LayerKind::batchnorm: return "batchnorm";
  }
  return "?";
}

inline LayerKind parse_layer_kind(std::string_view s) {
  if (s == "conv3") return LayerKind::conv3;
  if (s == "dense") return LayerKind::dense;
  if (s == "batchnorm") return LayerKind::batchnorm;
  fail(ErrorCode::UnknownLayerKind, "layer kind '" + std::string(s) + "'");
}

inline std::size_t shape_product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// Parameter storage is aligned to Eigen's packet size so vectorized kernels over it take the same path
// on every allocation; otherwise results could differ in the last bit between otherwise identical runs.
template <typename T>
using ParamData = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
struct ParamArray {
  std::string name;
  std::vector<std::size_t> shape;
  ParamData<T> data;

  std::size_t size() const { return data.size(); }
};

/// One layer of a network. Array names by kind:
///   conv3:     weight [3,3,3,in,out]
///   dense:     weight [in,out], bias [out]
///   batchnorm: gamma, beta, running_mean, running_var  (all [channels])
template <typename T>
struct Layer {
  std::string name;
  LayerKind kind = LayerKind::dense;
  std::vector<ParamArray<T>> arrays;

  ParamArray<T>& array(std::string_view n) {
    for (auto& a : arrays)
      if (a.name == n) return a;
    fail(ErrorCode::ShapeMismatch, "layer '" + name + "' has no array '" + std::string(n) + "'");
  }
  const ParamArray<T>& array(std::string_view n) const {
    return const_cast<Layer*>(this)->array(n);
  }
};

/// Layer-structured weights plus the architecture tag and hyperparameters needed to rebuild the net.
template <typename T = float>
struct ModelParams {
  std::string arch;
  nlohmann::json hyper = nlohmann::json::object();
  std::vector<Layer<T>> layers;

  Layer<T>& layer(std::string_view n) {
    for (auto& l : layers)
      if (l.name == n) return l;
    fail(ErrorCode::ShapeMismatch, "model has no layer '" + std::string(n) + "'");
  }
  const Layer<T>& layer(std::string_view n) const { return const_cast<ModelParams*>(this)->layer(n); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers)
      for (const auto& a : l.arrays) n += a.size();
    return n;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.arch = arch;
    out.hyper = hyper;
    for (const auto& l : layers) {
      Layer<U> nl{l.name, l.kind, {}};
      for (const auto& a : l.arrays)
        nl.arrays.push_back({a.name, a.shape, ParamData<U>(a.data.begin(), a.data.end())});
      out.layers.push_back(std::move(nl));
    }
    return out;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    if (a.arch != b.arch || a.hyper != b.hyper || a.layers.size() != b.layers.size()) return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
      const auto& la = a.layers[i];
      const auto& lb = b.layers[i];
      if (la.name != lb.name || la.kind != lb.kind || la.arrays.size() != lb.arrays.size()) return false;
      for (std::size_t j = 0; j < la.arrays.size(); ++j) {
        const auto& x = la.arrays[j];
        const auto& y = lb.arrays[j];
        if (x.name != y.name || x.shape != y.shape || x.data != y.data) return false;
      }
    }
    return true;
  }
};

}  // namespace fodf
