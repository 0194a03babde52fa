#pragma once

// Weighted-graph measures on connectome matrices. Edge length is 1/weight; zero weight means no edge.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <queue>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "error.hpp"
#include "rng.hpp"

namespace fodf {

inline constexpr double kSymmetryTolerance = 1e-6;

struct Connectome {
  Eigen::MatrixXd w;
  std::vector<std::string> labels;

  std::size_t size() const { return static_cast<std::size_t>(w.rows()); }
};

/// Validates and symmetrizes a weight matrix; the diagonal is cleared.
inline Connectome make_connectome(Eigen::MatrixXd w, std::vector<std::string> labels = {}) {
  if (w.rows() != w.cols()) fail(ErrorCode::ColumnCountMismatch, "connectome matrix is not square");
  if (!labels.empty() && labels.size() != static_cast<std::size_t>(w.rows()))
    fail(ErrorCode::ColumnCountMismatch, "label count differs from matrix size");
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      if (!std::isfinite(w(i, j))) fail(ErrorCode::ParseError, "non-finite weight");
      if (w(i, j) < 0.0) fail(ErrorCode::NegativeWeight, "negative weight at " + std::to_string(i) + "," + std::to_string(j));
      if (std::abs(w(i, j) - w(j, i)) > kSymmetryTolerance)
        fail(ErrorCode::AsymmetricMatrix, "w[" + std::to_string(i) + "][" + std::to_string(j) + "] differs from its transpose");
    }
  Eigen::MatrixXd s = 0.5 * (w + w.transpose());
  s.diagonal().setZero();
  return {std::move(s), std::move(labels)};
}

namespace detail {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

inline bool same_length(double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(a)); }

struct ShortestPaths {
  std::vector<double> dist;
  std::vector<double> sigma;                 // number of shortest paths from the source
  std::vector<std::vector<std::size_t>> pred;
  std::vector<std::size_t> order;            // nodes by nondecreasing distance
};

inline ShortestPaths dijkstra(const Connectome& g, std::size_t s) {
  const std::size_t n = g.size();
  ShortestPaths r{std::vector<double>(n, kInf), std::vector<double>(n, 0.0), std::vector<std::vector<std::size_t>>(n), {}};
  std::vector<bool> done(n, false);
  r.dist[s] = 0.0;
  r.sigma[s] = 1.0;
  for (;;) {
    std::size_t u = n;
    for (std::size_t v = 0; v < n; ++v)
      if (!done[v] && r.dist[v] < kInf && (u == n || r.dist[v] < r.dist[u])) u = v;
    if (u == n) break;
    done[u] = true;
    r.order.push_back(u);
    for (std::size_t v = 0; v < n; ++v) {
      const double wt = g.w(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(v));
      if (wt <= 0.0 || done[v]) continue;
      const double d = r.dist[u] + 1.0 / wt;
      if (r.dist[v] < kInf && same_length(d, r.dist[v])) {
        r.sigma[v] += r.sigma[u];
        r.pred[v].push_back(u);
      } else if (d < r.dist[v]) {
        r.dist[v] = d;
        r.sigma[v] = r.sigma[u];
        r.pred[v] = {u};
      }
    }
  }
  return r;
}

}  // namespace detail

/// Shortest-path distance matrix; unreachable pairs are +inf.
inline Eigen::MatrixXd distance_matrix(const Connectome& g) {
  const auto n = static_cast<Eigen::Index>(g.size());
  Eigen::MatrixXd d(n, n);
  for (Eigen::Index s = 0; s < n; ++s) {
    const auto sp = detail::dijkstra(g, static_cast<std::size_t>(s));
    for (Eigen::Index t = 0; t < n; ++t) d(s, t) = sp.dist[static_cast<std::size_t>(t)];
  }
  return d;
}

inline double characteristic_path_length(const Connectome& g) {
  const std::size_t n = g.size();
  if (n < 2) fail(ErrorCode::InvariantViolation, "path length needs at least 2 nodes");
  const auto d = distance_matrix(g);
  double s = 0.0;
  for (Eigen::Index i = 0; i < d.rows(); ++i)
    for (Eigen::Index j = 0; j < d.cols(); ++j) {
      if (i == j) continue;
      if (!std::isfinite(d(i, j))) fail(ErrorCode::DisconnectedGraph, "graph is not connected");
      s += d(i, j);
    }
  return s / static_cast<double>(n * (n - 1));
}

inline double global_efficiency(const Connectome& g) {
  const std::size_t n = g.size();
  if (n < 2) fail(ErrorCode::InvariantViolation, "efficiency needs at least 2 nodes");
  const auto d = distance_matrix(g);
  double s = 0.0;
  for (Eigen::Index i = 0; i < d.rows(); ++i)
    for (Eigen::Index j = 0; j < d.cols(); ++j)
      if (i != j && std::isfinite(d(i, j))) s += 1.0 / d(i, j);
  return s / static_cast<double>(n * (n - 1));
}

/// Per-node betweenness (Brandes), normalized by (n-1)(n-2)/2.
inline std::vector<double> betweenness_centrality(const Connectome& g) {
  const std::size_t n = g.size();
  if (n < 3) fail(ErrorCode::InvariantViolation, "betweenness needs at least 3 nodes");
  std::vector<double> bc(n, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    const auto sp = detail::dijkstra(g, s);
    std::vector<double> delta(n, 0.0);
    for (auto it = sp.order.rbegin(); it != sp.order.rend(); ++it) {
      const std::size_t w = *it;
      for (auto v : sp.pred[w]) delta[v] += sp.sigma[v] / sp.sigma[w] * (1.0 + delta[w]);
      if (w != s) bc[w] += delta[w];
    }
  }
  const double norm = static_cast<double>((n - 1) * (n - 2));  // each unordered pair was counted twice
  for (auto& b : bc) b /= norm;
  return bc;
}

inline double avg_betweenness_centrality(const Connectome& g) {
  const auto bc = betweenness_centrality(g);
  return std::accumulate(bc.begin(), bc.end(), 0.0) / static_cast<double>(bc.size());
}

/// Weighted Newman modularity of a partition (community ids per node) with resolution gamma.
inline double modularity_of(const Connectome& g, const std::vector<std::size_t>& part, double gamma = 1.0) {
  const double two_m = g.w.sum();
  if (!(two_m > 0.0)) fail(ErrorCode::ZeroWeightGraph, "modularity needs positive total weight");
  const Eigen::VectorXd k = g.w.rowwise().sum();
  const std::size_t nc = part.empty() ? 0 : *std::max_element(part.begin(), part.end()) + 1;
  std::vector<double> inside(nc, 0.0), tot(nc, 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) {
    tot[part[i]] += k[static_cast<Eigen::Index>(i)];
    for (std::size_t j = 0; j < g.size(); ++j)
      if (part[i] == part[j]) inside[part[i]] += g.w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  double q = 0.0;
  for (std::size_t c = 0; c < nc; ++c) q += inside[c] / two_m - gamma * (tot[c] / two_m) * (tot[c] / two_m);
  return q;
}

struct ModularityResult {
  double q = 0.0;
  std::vector<std::size_t> partition;  // community ids numbered by first appearance
};

namespace detail {

inline std::vector<std::size_t> relabel(const std::vector<std::size_t>& part) {
  std::vector<std::size_t> map(part.size() + 1, std::numeric_limits<std::size_t>::max());
  std::vector<std::size_t> out(part.size());
  std::size_t next = 0;
  for (std::size_t i = 0; i < part.size(); ++i) {
    if (map[part[i]] == std::numeric_limits<std::size_t>::max()) map[part[i]] = next++;
    out[i] = map[part[i]];
  }
  return out;
}

// Moves nodes of the (aggregated) graph a between communities while modularity improves. A node may
// also leave for a fresh singleton community.
inline void local_moves(const Eigen::MatrixXd& a, std::vector<std::size_t>& comm, double gamma, double two_m, Rng& rng) {
  const std::size_t n = static_cast<std::size_t>(a.rows());
  const Eigen::VectorXd k = a.rowwise().sum();
  std::vector<double> tot(n, 0.0);
  std::vector<std::size_t> size(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    tot[comm[i]] += k[static_cast<Eigen::Index>(i)];
    ++size[comm[i]];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  for (bool moved = true; moved;) {
    moved = false;
    for (auto i : order) {
      const auto ii = static_cast<Eigen::Index>(i);
      const std::size_t own = comm[i];
      tot[own] -= k[ii];
      --size[own];
      std::vector<double> link(n, 0.0);
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) link[comm[j]] += a(ii, static_cast<Eigen::Index>(j));
      auto gain = [&](std::size_t c) { return link[c] - gamma * tot[c] * k[ii] / two_m; };
      std::size_t best = own;
      double best_gain = gain(own);
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t c = comm[j];
        if (c == own || a(ii, static_cast<Eigen::Index>(j)) <= 0.0) continue;
        if (gain(c) > best_gain + 1e-14) {
          best = c;
          best_gain = gain(c);
        }
      }
      if (size[own] > 0 && best_gain < -1e-14) {
        for (std::size_t c = 0; c < n; ++c)
          if (size[c] == 0) {
            best = c;
            break;
          }
      }
      tot[best] += k[ii];
      ++size[best];
      if (best != own) {
        comm[i] = best;
        moved = true;
      }
    }
  }
}

// One multi-level Louvain pass starting from a given partition of the original nodes; levels are
// aggregated until a level merges nothing.
inline std::vector<std::size_t> louvain_from(const Connectome& g, std::vector<std::size_t> member, double gamma,
                                             Rng& rng) {
  const double two_m = g.w.sum();
  Eigen::MatrixXd a = g.w;  // aggregated adjacency; the diagonal holds internal weight
  std::vector<std::size_t> comm = std::move(member);
  member.resize(g.size());
  std::iota(member.begin(), member.end(), std::size_t{0});
  for (;;) {
    const std::size_t n = static_cast<std::size_t>(a.rows());
    local_moves(a, comm, gamma, two_m, rng);
    const auto lab = relabel(comm);
    for (auto& m : member) m = lab[m];
    const std::size_t nc = *std::max_element(lab.begin(), lab.end()) + 1;
    if (nc == n) break;
    Eigen::MatrixXd agg = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(nc), static_cast<Eigen::Index>(nc));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        agg(static_cast<Eigen::Index>(lab[i]), static_cast<Eigen::Index>(lab[j])) +=
            a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    a = std::move(agg);
    comm.resize(nc);
    std::iota(comm.begin(), comm.end(), std::size_t{0});
  }
  return relabel(member);
}

inline constexpr std::size_t kLouvainKicks = 20;

// Louvain from singletons, then iterated local search: reassign a random ~30% of nodes to random
// communities, rerun Louvain from there and keep the result when Q improves.
inline std::vector<std::size_t> louvain_once(const Connectome& g, double gamma, Rng& rng) {
  const std::size_t n = g.size();
  std::vector<std::size_t> part(n);
  std::iota(part.begin(), part.end(), std::size_t{0});
  part = louvain_from(g, part, gamma, rng);
  double q = modularity_of(g, part, gamma);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t k = 0; k < kLouvainKicks; ++k) {
    auto next = part;
    const std::size_t nc = *std::max_element(part.begin(), part.end()) + 1;
    std::uniform_int_distribution<std::size_t> pick(0, nc);  // nc means a fresh community
    for (auto& c : next)
      if (u(rng) < 0.3) c = pick(rng);
    next = louvain_from(g, relabel(next), gamma, rng);
    const double qn = modularity_of(g, next, gamma);
    if (qn > q + 1e-12) {
      part = std::move(next);
      q = qn;
    }
  }
  return part;
}

}  // namespace detail

inline constexpr std::size_t kLouvainRestarts = 10;

/// Louvain optimization of weighted modularity; the best of 10 seeded restarts is kept.
inline ModularityResult modularity(const Connectome& g, double gamma = 1.0, std::uint64_t seed = 0) {
  if (!(g.w.sum() > 0.0)) fail(ErrorCode::ZeroWeightGraph, "modularity needs positive total weight");
  ModularityResult best;
  best.q = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < kLouvainRestarts; ++r) {
    Rng rng = make_rng(hash_seed(seed, 0x10C7ull, r));
    auto part = detail::louvain_once(g, gamma, rng);
    const double q = modularity_of(g, part, gamma);
    if (q > best.q + 1e-12) best = {q, std::move(part)};
  }
  return best;
}

struct GraphMetrics {
  double modularity = 0.0;
  double avg_betweenness = 0.0;
  double char_path_length = 0.0;
  double global_efficiency = 0.0;
};

inline GraphMetrics graph_metrics(const Connectome& g, double gamma = 1.0, std::uint64_t seed = 0) {
  return {modularity(g, gamma, seed).q, avg_betweenness_centrality(g), characteristic_path_length(g),
          global_efficiency(g)};
}

inline nlohmann::ordered_json to_json(const GraphMetrics& m) {
  nlohmann::ordered_json j;
  j["modularity"] = m.modularity;
  j["avg_betweenness"] = m.avg_betweenness;
  j["char_path_length"] = m.char_path_length;
  j["global_efficiency"] = m.global_efficiency;
  return j;
}

/// Reads a CSV matrix (comma or whitespace separated) or a JSON file holding either a bare array of rows
/// or {"weights": [...], "labels": [...]}.
inline Connectome load_connectome(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoFailure, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  std::vector<std::vector<double>> rows;
  std::vector<std::string> labels;
  if (path.extension() == ".json") {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
      const auto& m = j.is_object() ? j.at("weights") : j;
      rows = m.get<std::vector<std::vector<double>>>();
      if (j.is_object() && j.contains("labels")) labels = j.at("labels").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::ParseError, path.string() + ": " + e.what());
    }
  } else {
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
      std::replace(line.begin(), line.end(), ',', ' ');
      std::istringstream tok(line);
      std::vector<double> row;
      std::string t;
      while (tok >> t) {
        std::size_t used = 0;
        double v = 0.0;
        try {
          v = std::stod(t, &used);
        } catch (const std::exception&) {
          used = 0;
        }
        if (used != t.size()) fail(ErrorCode::ParseError, "bad number '" + t + "' in " + path.string());
        row.push_back(v);
      }
      if (!row.empty()) rows.push_back(std::move(row));
    }
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  Eigen::MatrixXd w(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)].size()) != n)
      fail(ErrorCode::ColumnCountMismatch, "row " + std::to_string(i) + " has the wrong number of columns");
    for (Eigen::Index j = 0; j < n; ++j) w(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  return make_connectome(std::move(w), std::move(labels));
}

/// Writes CSV, or JSON when the extension is .json; values use round-trip precision.
inline void save_connectome(const Connectome& g, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
  const auto n = g.w.rows();
  if (path.extension() == ".json") {
    nlohmann::ordered_json j;
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) rows[static_cast<std::size_t>(i)].push_back(g.w(i, j));
    if (!g.labels.empty()) j["labels"] = g.labels;
    j["weights"] = rows;
    out << j.dump(1) << '\n';
  } else {
    out.precision(17);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) out << (j ? "," : "") << g.w(i, j);
      out << '\n';
    }
  }
  if (!out) fail(ErrorCode::IoFailure, "write failed for " + path.string());
}

}  // namespace fodf
