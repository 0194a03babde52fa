#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "model.hpp"

namespace fodf {

namespace fs = std::filesystem;

enum class VolumeKind { dwi_signal, sh_signal, sh_fodf, mask };

constexpr std::string_view to_string(VolumeKind k) {
  switch (k) {
    case VolumeKind::dwi_signal: return "dwi_signal";
    case VolumeKind::sh_signal: return "sh_signal";
    case VolumeKind::sh_fodf: return "sh_fodf";
    case VolumeKind::mask: return "mask";
  }
  return "?";
}

inline std::optional<VolumeKind> parse_volume_kind(std::string_view s) {
  if (s == "dwi_signal") return VolumeKind::dwi_signal;
  if (s == "sh_signal") return VolumeKind::sh_signal;
  if (s == "sh_fodf") return VolumeKind::sh_fodf;
  if (s == "mask") return VolumeKind::mask;
  return std::nullopt;
}

/// Number of real even-order SH coefficients up to order L.
constexpr std::size_t sh_count(int order) {
  return static_cast<std::size_t>((order + 1) * (order + 2) / 2);
}

/// X*Y*Z*C grid of 32-bit floats, index order [x][y][z][c] with c fastest.
struct Volume4D {
  std::array<std::size_t, 4> dims{1, 1, 1, 1};
  std::array<double, 3> voxel_size_mm{1.0, 1.0, 1.0};
  VolumeKind kind = VolumeKind::dwi_signal;
  int sh_order = -1;  // set for sh_signal / sh_fodf
  std::vector<float> data;

  Volume4D() = default;
  Volume4D(std::array<std::size_t, 4> d, VolumeKind k, int order = -1)
      : dims(d), kind(k), sh_order(order), data(d[0] * d[1] * d[2] * d[3], 0.0f) {}

  std::size_t nx() const { return dims[0]; }
  std::size_t ny() const { return dims[1]; }
  std::size_t nz() const { return dims[2]; }
  std::size_t channels() const { return dims[3]; }
  std::size_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }

  std::size_t voxel_index(std::size_t x, std::size_t y, std::size_t z) const {
    return (x * dims[1] + y) * dims[2] + z;
  }
  std::array<std::size_t, 3> voxel_coords(std::size_t v) const {
    return {v / (dims[1] * dims[2]), (v / dims[2]) % dims[1], v % dims[2]};
  }

  float& at(std::size_t x, std::size_t y, std::size_t z, std::size_t c) {
    return data[voxel_index(x, y, z) * dims[3] + c];
  }
  float at(std::size_t x, std::size_t y, std::size_t z, std::size_t c) const {
    return data[voxel_index(x, y, z) * dims[3] + c];
  }

  std::span<float> voxel(std::size_t v) { return {data.data() + v * dims[3], dims[3]}; }
  std::span<const float> voxel(std::size_t v) const { return {data.data() + v * dims[3], dims[3]}; }

  bool same_grid(const Volume4D& o) const {
    return dims[0] == o.dims[0] && dims[1] == o.dims[1] && dims[2] == o.dims[2];
  }

  /// Throws InvariantViolation when the type invariants do not hold.
  void validate() const {
    for (auto d : dims)
      if (d == 0) fail(ErrorCode::InvariantViolation, "volume dimension is zero");
    for (auto s : voxel_size_mm)
      if (!(s > 0.0)) fail(ErrorCode::InvariantViolation, "voxel size must be positive");
    if (data.size() != dims[0] * dims[1] * dims[2] * dims[3])
      fail(ErrorCode::InvariantViolation, "data length does not match dims");
    if (kind == VolumeKind::sh_signal || kind == VolumeKind::sh_fodf) {
      if (sh_order < 0 || sh_order % 2 != 0 || sh_count(sh_order) != dims[3])
        fail(ErrorCode::InvariantViolation,
             "SH volume channel count " + std::to_string(dims[3]) + " does not match order " +
                 std::to_string(sh_order));
    }
    if (kind == VolumeKind::mask) {
      for (float v : data)
        if (v != 0.0f && v != 1.0f) fail(ErrorCode::InvariantViolation, "mask value not in {0,1}");
    }
  }

  bool masked(std::size_t v) const { return data[v * dims[3]] != 0.0f; }
};

/// Per-direction b-values (s/mm^2) and gradient directions.
struct GradientScheme {
  std::vector<double> bvals;
  std::vector<std::array<double, 3>> bvecs;

  std::size_t size() const { return bvals.size(); }
  bool is_b0(std::size_t i, double b0_threshold = 50.0) const { return bvals[i] <= b0_threshold; }

  std::vector<std::size_t> b0_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (is_b0(i)) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> dw_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (!is_b0(i)) out.push_back(i);
    return out;
  }

  void validate() const {
    if (bvals.size() != bvecs.size())
      fail(ErrorCode::ColumnCountMismatch, "bvals and bvecs differ in length");
    for (std::size_t i = 0; i < size(); ++i) {
      if (bvals[i] <= 0.0) continue;
      const auto& g = bvecs[i];
      const double n = std::sqrt(g[0] * g[0] + g[1] * g[1] + g[2] * g[2]);
      if (std::abs(n - 1.0) > 1e-6)
        fail(ErrorCode::NonUnitVector, "direction " + std::to_string(i) + " has norm " + std::to_string(n));
    }
  }
};

namespace detail {

inline void put_f32le(std::vector<char>& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

inline float get_f32le(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

inline std::vector<char> read_bytes(const fs::path& p, ErrorCode missing = ErrorCode::IoFailure) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(missing, "cannot open " + p.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_bytes(const fs::path& p, const std::vector<char>& bytes) {
  if (p.has_parent_path() && !p.parent_path().empty()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
  }
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoFailure, "cannot create " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoFailure, "write failed for " + p.string());
}

inline void write_text(const fs::path& p, const std::string& text) {
  write_bytes(p, std::vector<char>(text.begin(), text.end()));
}

inline std::string read_text(const fs::path& p) {
  auto b = read_bytes(p);
  return std::string(b.begin(), b.end());
}

inline std::string strip_suffix(const std::string& s, std::string_view suffix) {
  if (s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0)
    return s.substr(0, s.size() - suffix.size());
  return s;
}

inline std::vector<float> decode_f32le(const std::vector<char>& bytes) {
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = get_f32le(bytes.data() + 4 * i);
  return out;
}

inline std::vector<char> encode_f32le(std::span<const float> values) {
  std::vector<char> out;
  out.reserve(values.size() * 4);
  for (float v : values) put_f32le(out, v);
  return out;
}

}  // namespace detail

/// `name`, `name.dwv.json` or `name.dwv.raw` all resolve to the same pair of files.
inline std::string volume_basename(const fs::path& p) {
  std::string s = p.string();
  s = detail::strip_suffix(s, ".dwv.json");
  s = detail::strip_suffix(s, ".dwv.raw");
  return s;
}

inline void write_volume(const Volume4D& v, const fs::path& path) {
  v.validate();
  const std::string base = volume_basename(path);
  nlohmann::ordered_json h;
  h["format"] = "dwv";
  h["version"] = 1;
  h["dims"] = v.dims;
  h["voxel_size_mm"] = v.voxel_size_mm;
  h["dtype"] = "f32le";
  h["kind"] = std::string(to_string(v.kind));
  if (v.kind == VolumeKind::sh_signal || v.kind == VolumeKind::sh_fodf) h["sh_order"] = v.sh_order;
  detail::write_text(base + ".dwv.json", h.dump(2) + "\n");
  detail::write_bytes(base + ".dwv.raw", detail::encode_f32le(v.data));
}

inline Volume4D read_volume(const fs::path& path) {
  const std::string base = volume_basename(path);
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(detail::read_text(base + ".dwv.json"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::MalformedHeader, base + ".dwv.json: " + e.what());
  } catch (const Error& e) {
    fail(ErrorCode::MalformedHeader, e.what());
  }
  Volume4D v;
  try {
    if (!h.is_object()) fail(ErrorCode::MalformedHeader, "header is not an object");
    const auto dtype = h.at("dtype").get<std::string>();
    if (dtype != "f32le") fail(ErrorCode::UnsupportedDtype, "dtype '" + dtype + "'");
    const auto dims = h.at("dims");
    if (!dims.is_array() || dims.size() != 4) fail(ErrorCode::MalformedHeader, "dims must have 4 entries");
    for (std::size_t i = 0; i < 4; ++i) {
      if (!dims[i].is_number_integer() || dims[i].get<long long>() <= 0)
        fail(ErrorCode::MalformedHeader, "dims must be positive integers");
      v.dims[i] = dims[i].get<std::size_t>();
    }
    if (h.contains("voxel_size_mm")) v.voxel_size_mm = h.at("voxel_size_mm").get<std::array<double, 3>>();
    auto kind = parse_volume_kind(h.at("kind").get<std::string>());
    if (!kind) fail(ErrorCode::MalformedHeader, "unknown kind");
    v.kind = *kind;
    if (h.contains("sh_order")) v.sh_order = h.at("sh_order").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::MalformedHeader, base + ".dwv.json: " + e.what());
  }
  const auto payload = detail::read_bytes(base + ".dwv.raw");
  const std::size_t expected = v.dims[0] * v.dims[1] * v.dims[2] * v.dims[3] * 4;
  if (payload.size() != expected)
    fail(ErrorCode::PayloadSizeMismatch,
         "expected " + std::to_string(expected) + " bytes, found " + std::to_string(payload.size()));
  v.data = detail::decode_f32le(payload);
  try {
    v.validate();
  } catch (const Error& e) {
    fail(ErrorCode::MalformedHeader, e.what());
  }
  return v;
}

namespace detail {

inline std::vector<std::vector<double>> parse_rows(const fs::path& p) {
  std::ifstream in(p);
  if (!in) fail(ErrorCode::IoFailure, "cannot open " + p.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<double> row;
    std::string tok;
    while (ls >> tok) {
      std::size_t used = 0;
      double val = 0.0;
      try {
        val = std::stod(tok, &used);
      } catch (const std::exception&) {
        fail(ErrorCode::ParseError, p.string() + ": cannot parse '" + tok + "'");
      }
      if (used != tok.size()) fail(ErrorCode::ParseError, p.string() + ": cannot parse '" + tok + "'");
      row.push_back(val);
    }
    if (!row.empty()) rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string format_row(std::span<const double> values) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < values.size(); ++i) os << (i ? " " : "") << values[i];
  os << "\n";
  return os.str();
}

}  // namespace detail

/// Reads FSL-style text: one row of b-values, three rows of x, y, z components.
/// Directions with b > 0 whose norm is off by at most 1e-3 are renormalized.
inline GradientScheme read_gradients(const fs::path& bval_path, const fs::path& bvec_path) {
  const auto bval_rows = detail::parse_rows(bval_path);
  const auto bvec_rows = detail::parse_rows(bvec_path);
  if (bval_rows.size() != 1) fail(ErrorCode::ParseError, "bval file must contain exactly one row");
  if (bvec_rows.size() != 3) fail(ErrorCode::ParseError, "bvec file must contain exactly three rows");
  const std::size_t n = bval_rows[0].size();
  for (const auto& r : bvec_rows)
    if (r.size() != n)
      fail(ErrorCode::ColumnCountMismatch,
           "bvec row has " + std::to_string(r.size()) + " columns, bval has " + std::to_string(n));
  GradientScheme g;
  g.bvals = bval_rows[0];
  g.bvecs.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::array<double, 3> v{bvec_rows[0][i], bvec_rows[1][i], bvec_rows[2][i]};
    if (g.bvals[i] > 0.0) {
      const double norm = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
      if (std::abs(norm - 1.0) > 1e-3)
        fail(ErrorCode::NonUnitVector, "direction " + std::to_string(i) + " has norm " + std::to_string(norm));
      if (norm != 1.0)
        for (auto& c : v) c /= norm;
    }
    g.bvecs[i] = v;
  }
  g.validate();
  return g;
}

inline void write_gradients(const GradientScheme& g, const fs::path& bval_path, const fs::path& bvec_path) {
  g.validate();
  detail::write_text(bval_path, detail::format_row(g.bvals));
  std::string rows;
  for (int c = 0; c < 3; ++c) {
    std::vector<double> comp(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) comp[i] = g.bvecs[i][c];
    rows += detail::format_row(comp);
  }
  detail::write_text(bvec_path, rows);
}

inline std::string model_basename(const fs::path& p) {
  std::string s = p.string();
  s = detail::strip_suffix(s, ".model.json");
  s = detail::strip_suffix(s, ".model.raw");
  return s;
}

/// Writes `<name>.model.json` (layer manifest) and `<name>.model.raw` (concatenated f32le arrays).
inline void write_model(const ModelParams<float>& params, const fs::path& path) {
  const std::string base = model_basename(path);
  nlohmann::ordered_json m;
  m["format"] = "fodf-model";
  m["version"] = 1;
  m["dtype"] = "f32le";
  m["arch"] = params.arch;
  m["hyper"] = params.hyper;
  m["layers"] = nlohmann::ordered_json::array();
  std::vector<char> blob;
  std::size_t offset = 0;
  for (const auto& l : params.layers) {
    nlohmann::ordered_json jl;
    jl["name"] = l.name;
    jl["kind"] = std::string(to_string(l.kind));
    jl["arrays"] = nlohmann::ordered_json::array();
    for (const auto& a : l.arrays) {
      if (shape_product(a.shape) != a.data.size())
        fail(ErrorCode::ShapeBlobMismatch, "array " + l.name + "." + a.name + " shape/data mismatch");
      jl["arrays"].push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}, {"count", a.data.size()}});
      auto bytes = detail::encode_f32le(a.data);
      blob.insert(blob.end(), bytes.begin(), bytes.end());
      offset += a.data.size();
    }
    m["layers"].push_back(std::move(jl));
  }
  m["total_count"] = offset;
  detail::write_text(base + ".model.json", m.dump(2) + "\n");
  detail::write_bytes(base + ".model.raw", blob);
}

inline ModelParams<float> read_model(const fs::path& path) {
  const std::string base = model_basename(path);
  ModelParams<float> params;
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(detail::read_text(base + ".model.json"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::MalformedHeader, base + ".model.json: " + e.what());
  }
  const auto blob = detail::decode_f32le(detail::read_bytes(base + ".model.raw"));
  try {
    if (m.value("dtype", std::string("f32le")) != "f32le") fail(ErrorCode::UnsupportedDtype, "model dtype");
    params.arch = m.at("arch").get<std::string>();
    params.hyper = m.value("hyper", nlohmann::json::object());
    std::size_t consumed = 0;
    for (const auto& jl : m.at("layers")) {
      Layer<float> l;
      l.name = jl.at("name").get<std::string>();
      l.kind = parse_layer_kind(jl.at("kind").get<std::string>());
      for (const auto& ja : jl.at("arrays")) {
        ParamArray<float> a;
        a.name = ja.at("name").get<std::string>();
        a.shape = ja.at("shape").get<std::vector<std::size_t>>();
        const std::size_t count = shape_product(a.shape);
        const std::size_t offset = ja.value("offset", consumed);
        if (ja.contains("count") && ja.at("count").get<std::size_t>() != count)
          fail(ErrorCode::ShapeBlobMismatch, l.name + "." + a.name + ": count differs from shape product");
        if (offset + count > blob.size())
          fail(ErrorCode::ShapeBlobMismatch, l.name + "." + a.name + ": blob too short for shape");
        a.data.assign(blob.begin() + static_cast<std::ptrdiff_t>(offset),
                      blob.begin() + static_cast<std::ptrdiff_t>(offset + count));
        consumed = offset + count;
        l.arrays.push_back(std::move(a));
      }
      params.layers.push_back(std::move(l));
    }
    if (consumed != blob.size())
      fail(ErrorCode::ShapeBlobMismatch,
           "blob holds " + std::to_string(blob.size()) + " floats, manifest uses " + std::to_string(consumed));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::MalformedHeader, base + ".model.json: " + e.what());
  }
  return params;
}

}  // namespace fodf
