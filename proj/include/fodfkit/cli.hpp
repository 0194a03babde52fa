#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "connectome.hpp"
#include "csd.hpp"
#include "error.hpp"
#include "eval.hpp"
#include "parallel.hpp"
#include "phantom.hpp"
#include "sphere.hpp"
#include "trainer.hpp"
#include "volume_io.hpp"

namespace fodf::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

// Objects whose contents are replaced wholesale rather than merged key by key.
inline const std::set<std::string>& opaque_keys() {
  static const std::set<std::string> k{"model"};
  return k;
}

inline ojson merge(const ojson& defaults, const ojson& user, const std::string& where) {
  if (!user.is_object()) throw UsageError("config " + (where.empty() ? std::string("root") : where) + " must be an object");
  ojson out = defaults;
  for (const auto& [k, v] : user.items()) {
    if (!defaults.contains(k)) throw UsageError("unknown config key '" + where + k + "'");
    if (defaults[k].is_object() && !opaque_keys().contains(k))
      out[k] = merge(defaults[k], v, where + k + ".");
    else
      out[k] = v;
  }
  return out;
}

inline void check_keys(const ojson& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw UsageError("config " + where + " must be an object");
  for (const auto& [k, v] : obj.items())
    if (!allowed.contains(k)) throw UsageError("unknown config key '" + where + "." + k + "'");
}

template <typename T>
T get(const ojson& cfg, const std::string& key) {
  if (!cfg.contains(key) || cfg.at(key).is_null()) throw UsageError("missing required config key '" + key + "'");
  try {
    return cfg.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw UsageError("config key '" + key + "' has the wrong type");
  }
}

inline fs::path path_of(const ojson& cfg, const std::string& key) { return get<std::string>(cfg, key); }

inline std::optional<fs::path> optional_path(const ojson& cfg, const std::string& key) {
  if (!cfg.contains(key) || cfg.at(key).is_null()) return std::nullopt;
  return path_of(cfg, key);
}

// Rewrites the named path entries as absolute paths so the resolved config works from any directory.
inline void absolutize(ojson& cfg, const std::vector<std::string>& keys) {
  for (const auto& k : keys)
    if (cfg.contains(k) && cfg[k].is_string()) cfg[k] = fs::absolute(cfg[k].get<std::string>()).lexically_normal().string();
}

inline void write_json(const fs::path& p, const ojson& j) { fodf::detail::write_text(p, j.dump(2) + "\n"); }

inline GradientScheme read_scheme(const ojson& cfg) { return read_gradients(path_of(cfg, "bval"), path_of(cfg, "bvec")); }

inline ScanProfile profile_from(const ojson& j, std::uint64_t seed) {
  ScanProfile p;
  p.snr = get<double>(j, "snr");
  p.direction_jitter_deg = get<double>(j, "direction_jitter_deg");
  p.gain = get<double>(j, "gain");
  p.seed = seed;
  p.validate();
  return p;
}

inline CsdParams csd_params(const ojson& cfg) {
  CsdParams p;
  p.lambda = get<double>(cfg, "lambda");
  p.tau = get<double>(cfg, "tau");
  p.max_iter = get<int>(cfg, "max_iter");
  return p;
}

inline ResponseFunction response_for(const ojson& cfg, const Volume4D& dwi, const GradientScheme& scheme,
                                     const Volume4D& mask, int order) {
  if (auto p = optional_path(cfg, "response")) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(fodf::detail::read_text(*p));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::ParseError, "response file: " + std::string(e.what()));
    }
    return response_from_json(j);
  }
  ResponseOptions opt;
  opt.order = order;
  return estimate_response(dwi, scheme, mask, opt);
}

// One map value per voxel from a volume (optionally restricted to a mask) or a JSON array of numbers.
inline std::vector<double> read_values(const fs::path& p, const std::optional<Volume4D>& mask) {
  if (p.string().ends_with(".dwv.json") || p.string().ends_with(".dwv.raw")) {
    const auto v = read_volume(p);
    if (v.channels() != 1) fail(ErrorCode::ShapeMismatch, "value maps must have one channel");
    if (mask && !v.same_grid(*mask)) fail(ErrorCode::DimsMismatch, "mask grid differs from value map grid");
    std::vector<double> out;
    for (std::size_t i = 0; i < v.voxel_count(); ++i)
      if (!mask || mask->masked(i)) out.push_back(v.data[i]);
    return out;
  }
  try {
    return nlohmann::json::parse(fodf::detail::read_text(p)).get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ParseError, p.string() + ": " + e.what());
  }
}

}  // namespace detail

struct Command {
  std::string name;
  std::string help;
  ojson defaults;
  std::vector<std::string> path_keys;
  std::function<void(ojson& cfg)> prepare;  // validates nested entries and absolutizes nested paths
  std::function<void(const ojson& cfg, const fs::path& out)> run;
};

inline ojson csd_defaults() { return {{"lambda", 1.0}, {"tau", 0.1}, {"max_iter", 50}}; }

inline std::vector<Command> commands() {
  using detail::get;
  using detail::path_of;
  std::vector<Command> cmds;

  cmds.push_back(
      {"phantom-gen",
       "Simulate a synthetic subject with an optional rescan",
       {{"seed", 0},
        {"shape", {16, 16, 16}},
        {"layout", "mixed"},
        {"crossing_ratio", 0.5},
        {"ad", kDefaultAxialDiffusivity},
        {"rd", kDefaultRadialDiffusivity},
        {"s0", 1.0},
        {"scheme", {{"n_dirs", 96}, {"bval", 2000.0}, {"n_b0", 6}, {"seed", 2023}}},
        {"scan", {{"snr", 20.0}, {"direction_jitter_deg", 0.0}, {"gain", 1.0}}},
        {"rescan", {{"enabled", true}, {"snr", 20.0}, {"direction_jitter_deg", 0.0}, {"gain", 1.0}}}},
       {},
       {},
       [](const ojson& c, const fs::path& out) {
         const auto seed = get<std::uint64_t>(c, "seed");
         PhantomConfig pc;
         pc.shape = get<std::array<std::size_t, 3>>(c, "shape");
         try {
           pc.layout = parse_layout(get<std::string>(c, "layout"));
         } catch (const Error&) {
           throw UsageError("unknown layout '" + get<std::string>(c, "layout") + "'");
         }
         pc.crossing_ratio = get<double>(c, "crossing_ratio");
         pc.geometry_seed = seed;
         pc.ad = get<double>(c, "ad");
         pc.rd = get<double>(c, "rd");
         pc.s0 = get<double>(c, "s0");
         const auto& sc = c.at("scheme");
         const auto scheme = default_phantom_scheme(get<std::size_t>(sc, "n_dirs"), get<double>(sc, "bval"),
                                                    get<std::size_t>(sc, "n_b0"), get<std::uint64_t>(sc, "seed"));
         const auto scan = detail::profile_from(c.at("scan"), hash_seed(seed, 1));
         const auto ph = generate_phantom(pc, scheme, scan);
         write_volume(ph.scan.dwi, out / "dwi.dwv.json");
         write_volume(ph.mask, out / "mask.dwv.json");
         write_volume(ph.gt_fodf, out / "gt_fodf.dwv.json");
         write_gradients(scheme, out / "dwi.bval", out / "dwi.bvec");
         ojson side;
         side["phantom"] = to_json(pc);
         side["scheme"] = sc;
         side["scan"] = to_json(scan);
         const auto& rc = c.at("rescan");
         if (get<bool>(rc, "enabled")) {
           const auto re = detail::profile_from(rc, hash_seed(seed, 2));
           write_volume(make_rescan(ph.scan, scheme, re).dwi, out / "rescan.dwv.json");
           side["rescan"] = to_json(re);
         }
         std::size_t counts[3] = {0, 0, 0};
         for (auto f : ph.fiber_count) ++counts[f];
         side["voxels"] = {{"background", counts[0]}, {"single_fiber", counts[1]}, {"crossing", counts[2]}};
         detail::write_json(out / "phantom.json", side);
       }});

  cmds.push_back({"scheme-gen",
                  "Generate a single-shell electrostatic-repulsion scheme",
                  {{"seed", 0}, {"n_dirs", 96}, {"bval", 2000.0}, {"n_b0", 6}},
                  {},
                  {},
                  [](const ojson& c, const fs::path& out) {
                    const auto r = optimize_scheme(get<std::size_t>(c, "n_dirs"), get<std::uint64_t>(c, "seed"));
                    const auto g = make_shell_scheme(r.set, get<double>(c, "bval"), get<std::size_t>(c, "n_b0"));
                    write_gradients(g, out / "scheme.bval", out / "scheme.bvec");
                    detail::write_json(out / "scheme.json",
                                       {{"directions", r.set.dirs.size()}, {"b0_volumes", g.b0_indices().size()},
                                        {"energy", r.energy}});
                  }});

  cmds.push_back(
      {"scheme-drop",
       "Keep a well-distributed random subset of the DW directions",
       {{"seed", 0}, {"bval", nullptr}, {"bvec", nullptr}, {"keep", 45}, {"max_retries", kDefaultDropRetries},
        {"dwi", nullptr}},
       {"bval", "bvec", "dwi"},
       {},
       [](const ojson& c, const fs::path& out) {
         const auto g = detail::read_scheme(c);
         DropOptions opt;
         opt.max_retries = get<int>(c, "max_retries");
         const auto idx = drop_scheme_indices(g, get<std::size_t>(c, "keep"), get<std::uint64_t>(c, "seed"), opt);
         write_gradients(subset_scheme(g, idx), out / "scheme.bval", out / "scheme.bvec");
         detail::write_json(out / "dropout.json", {{"keep", get<std::size_t>(c, "keep")}, {"kept_indices", idx}});
         if (auto d = detail::optional_path(c, "dwi")) {
           const auto dwi = read_volume(*d);
           if (dwi.channels() != g.size()) fail(ErrorCode::ShapeMismatch, "DWI channels differ from scheme size");
           write_volume(select_channels(dwi, idx), out / "dwi.dwv.json");
         }
       }});

  cmds.push_back({"sh-fit",
                  "Fit the signal SH (normalized by mean b=0) in every voxel",
                  {{"dwi", nullptr}, {"bval", nullptr}, {"bvec", nullptr}, {"order", 8}},
                  {"dwi", "bval", "bvec"},
                  {},
                  [](const ojson& c, const fs::path& out) {
                    const auto dwi = read_volume(path_of(c, "dwi"));
                    write_volume(fit_signal_sh(dwi, detail::read_scheme(c), get<int>(c, "order")),
                                 out / "signal_sh.dwv.json");
                  }});

  {
    ojson d = {{"dwi", nullptr}, {"bval", nullptr}, {"bvec", nullptr}, {"mask", nullptr}, {"order", 8},
               {"response", nullptr}};
    d.update(csd_defaults());
    cmds.push_back({"csd-fit",
                    "Constrained spherical deconvolution over a mask",
                    d,
                    {"dwi", "bval", "bvec", "mask", "response"},
                    {},
                    [](const ojson& c, const fs::path& out) {
                      const auto dwi = read_volume(path_of(c, "dwi"));
                      const auto mask = read_volume(path_of(c, "mask"));
                      const auto g = detail::read_scheme(c);
                      const auto rf = detail::response_for(c, dwi, g, mask, get<int>(c, "order"));
                      const auto fit = fit_volume(dwi, g, mask, rf, detail::csd_params(c));
                      write_volume(fit.fodf, out / "fodf.dwv.json");
                      detail::write_json(out / "response.json", to_json(rf));
                      detail::write_json(out / "qc.json", to_json(fit.qc));
                    }});
  }

  cmds.push_back(
      {"train",
       "Train the patch CNN or voxel MLP on CSD labels",
       {{"seed", 0},
        {"subjects", ojson::array()},
        {"model", {{"arch", "cnn"}, {"channels", 64}, {"hidden", 256}}},
        {"epochs", 200},
        {"batch_size", 32},
        {"lr", 1e-3},
        {"alpha", 1.0},
        {"beta", 0.5},
        {"validation_fraction", 0.2},
        {"augmentation", {{"variants", 4}, {"keep_min", 45}, {"keep_max", nullptr}}},
        {"csd", csd_defaults()}},
       {},
       [](ojson& c) {
         if (!c["subjects"].is_array() || c["subjects"].empty()) throw UsageError("config 'subjects' must be a nonempty list");
         for (auto& s : c["subjects"]) {
           detail::check_keys(s, {"dwi", "bval", "bvec", "mask", "rescan", "label"}, "subjects[]");
           detail::absolutize(s, {"dwi", "bval", "bvec", "mask", "rescan", "label"});
         }
         detail::check_keys(c["model"], {"arch", "channels", "hidden", "in_channels", "out", "output_init_scale",
                                         "bn_momentum", "bn_eps", "widths"},
                            "model");
       },
       [](const ojson& c, const fs::path& out) {
         const auto seed = get<std::uint64_t>(c, "seed");
         const auto& aug = c.at("augmentation");
         const auto& csd = c.at("csd");
         std::vector<SubjectData> subjects;
         for (std::size_t i = 0; i < c.at("subjects").size(); ++i) {
           const auto& sc = c.at("subjects")[i];
           const auto dwi = read_volume(path_of(sc, "dwi"));
           const auto g = detail::read_scheme(sc);
           SubjectData s;
           s.mask = read_volume(path_of(sc, "mask"));
           s.inputs.push_back(fit_signal_sh(dwi, g, 8));
           const std::size_t n_dw = g.dw_indices().size();
           s.input_directions.push_back(n_dw);
           const std::size_t hi = aug.at("keep_max").is_null() ? n_dw : get<std::size_t>(aug, "keep_max");
           for (auto& a : augment_subject(dwi, g, get<std::size_t>(aug, "variants"),
                                          {get<std::size_t>(aug, "keep_min"), hi}, hash_seed(seed, 0xA0, i))) {
             s.inputs.push_back(std::move(a.sh));
             s.input_directions.push_back(a.kept_directions);
           }
           if (auto l = detail::optional_path(sc, "label")) {
             s.label = read_volume(*l);
           } else {
             const auto rf = estimate_response(dwi, g, s.mask);
             s.label = fit_volume(dwi, g, s.mask, rf, detail::csd_params(csd)).fodf;
           }
           if (auto r = detail::optional_path(sc, "rescan"))
             s.pair = std::make_pair(s.inputs.front(), fit_signal_sh(read_volume(*r), g, 8));
           subjects.push_back(std::move(s));
         }
         TrainConfig tc;
         tc.model = nlohmann::json::parse(c.at("model").dump());
         tc.epochs = get<std::size_t>(c, "epochs");
         tc.batch_size = get<std::size_t>(c, "batch_size");
         tc.lr = get<double>(c, "lr");
         tc.weights = {get<double>(c, "alpha"), get<double>(c, "beta")};
         tc.seed = seed;
         tc.validation_fraction = get<double>(c, "validation_fraction");
         const auto r = train(tc, subjects);
         write_model(r.params, out / "model.model.json");
         detail::write_json(out / "training_log.json", to_json(r.log));
       }});

  cmds.push_back({"predict",
                  "Apply a trained model to a DWI volume",
                  {{"model", nullptr}, {"dwi", nullptr}, {"bval", nullptr}, {"bvec", nullptr}, {"mask", nullptr}},
                  {"model", "dwi", "bval", "bvec", "mask"},
                  {},
                  [](const ojson& c, const fs::path& out) {
                    const auto est = Estimator::from_model(read_model(path_of(c, "model")));
                    const auto fodf = estimate(est, read_volume(path_of(c, "dwi")), detail::read_scheme(c),
                                               read_volume(path_of(c, "mask")));
                    write_volume(fodf, out / "fodf.dwv.json");
                  }});

  cmds.push_back({"evaluate",
                  "Voxel-wise ACC between two fODF volumes",
                  {{"a", nullptr}, {"b", nullptr}, {"mask", nullptr}, {"label", "a_vs_b"}, {"interior_only", false}},
                  {"a", "b", "mask"},
                  {},
                  [](const ojson& c, const fs::path& out) {
                    const auto a = read_volume(path_of(c, "a"));
                    const auto b = read_volume(path_of(c, "b"));
                    auto mask = read_volume(path_of(c, "mask"));
                    if (get<bool>(c, "interior_only")) mask = patch_mask(mask);
                    auto panel = md_acc_panel(a, b, mask);
                    panel.acc.label = get<std::string>(c, "label");
                    write_volume(panel.acc.map, out / "acc_map.dwv.json");
                    write_volume(panel.md, out / "md_map.dwv.json");
                    detail::write_json(out / "acc.json", to_json(panel.acc));
                    detail::write_json(out / "md.json", {{"md_mean", panel.md_mean}, {"md_std", panel.md_std}});
                  }});

  {
    ojson d = {{"seed", 0},         {"dwi", nullptr},   {"bval", nullptr},     {"bvec", nullptr},
               {"mask", nullptr},   {"reference", nullptr}, {"estimator", "csd"}, {"model", nullptr},
               {"counts", nullptr}, {"step", 5},        {"repeats", 10},       {"response", nullptr},
               {"interior_only", false}};
    d.update(csd_defaults());
    cmds.push_back({"degrade",
                    "ACC against a reference as DW directions are dropped",
                    d,
                    {"dwi", "bval", "bvec", "mask", "reference", "model", "response"},
                    {},
                    [](const ojson& c, const fs::path& out) {
                      const auto dwi = read_volume(path_of(c, "dwi"));
                      auto mask = read_volume(path_of(c, "mask"));
                      const auto g = detail::read_scheme(c);
                      const auto ref = read_volume(path_of(c, "reference"));
                      const auto kind = get<std::string>(c, "estimator");
                      std::optional<Estimator> est;
                      if (kind == "csd")
                        est = Estimator::from_csd(detail::response_for(c, dwi, g, mask, 8), detail::csd_params(c));
                      else if (kind == "model")
                        est = Estimator::from_model(read_model(path_of(c, "model")));
                      else
                        throw UsageError("estimator must be 'csd' or 'model'");
                      if (get<bool>(c, "interior_only")) mask = patch_mask(mask);
                      const auto counts = c.at("counts").is_null()
                                              ? default_dropout_counts(g.dw_indices().size(), get<std::size_t>(c, "step"))
                                              : get<std::vector<std::size_t>>(c, "counts");
                      const auto curve = degradation_experiment(dwi, g, mask, ref, *est, counts,
                                                                get<std::size_t>(c, "repeats"), get<std::uint64_t>(c, "seed"));
                      detail::write_json(out / "degradation.json", to_json(curve));
                    }});
  }

  cmds.push_back({"wilcoxon",
                  "Paired Wilcoxon signed-rank test on two value maps or JSON arrays",
                  {{"x", nullptr}, {"y", nullptr}, {"mask", nullptr}},
                  {"x", "y", "mask"},
                  {},
                  [](const ojson& c, const fs::path& out) {
                    std::optional<Volume4D> mask;
                    if (auto m = detail::optional_path(c, "mask")) mask = read_volume(*m);
                    const auto x = detail::read_values(path_of(c, "x"), mask);
                    const auto y = detail::read_values(path_of(c, "y"), mask);
                    const auto w = wilcoxon_signed_rank(x, y);
                    ojson j = to_json(w);
                    double mx = 0.0, my = 0.0;
                    for (std::size_t i = 0; i < x.size(); ++i) {
                      mx += x[i];
                      my += y[i];
                    }
                    j["pairs"] = x.size();
                    j["mean_x"] = mx / static_cast<double>(x.size());
                    j["mean_y"] = my / static_cast<double>(y.size());
                    detail::write_json(out / "wilcoxon.json", j);
                  }});

  cmds.push_back({"connectome-metrics",
                  "Graph measures of a weighted connectome (CSV or JSON matrix)",
                  {{"seed", 0}, {"connectome", nullptr}, {"gamma", 1.0}},
                  {"connectome"},
                  {},
                  [](const ojson& c, const fs::path& out) {
                    const auto g = load_connectome(path_of(c, "connectome"));
                    detail::write_json(out / "metrics.json",
                                       to_json(graph_metrics(g, get<double>(c, "gamma"), get<std::uint64_t>(c, "seed"))));
                  }});
  return cmds;
}

/// Parses argv, runs one subcommand and maps failures to exit codes. Messages go to `err` only.
inline int run(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  CLI::App app{"fodfkit: fODF estimation, scan/rescan evaluation and connectome metrics"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  app.add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Seed; overrides the config value");
  app.add_option("--threads", threads, "Worker threads (FODF_KIT_THREADS when omitted)")->check(CLI::PositiveNumber);
  app.add_option("--out", out_dir, "Output directory");
  const auto cmds = commands();
  std::map<std::string, CLI::App*> subs;
  for (const auto& c : cmds) subs[c.name] = app.add_subcommand(c.name, c.help)->fallthrough();
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    err << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (argc <= 1)
      err << app.help();
    else
      err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kExitUsage;
  }
  const Command* cmd = nullptr;
  for (const auto& c : cmds)
    if (subs[c.name]->parsed()) cmd = &c;

  ojson cfg;
  try {
    if (out_dir.empty()) throw UsageError("--out is required");
    ojson user = ojson::object();
    if (!config_path.empty()) {
      try {
        std::ifstream in(config_path);
        user = ojson::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw UsageError("config is not valid JSON: " + std::string(e.what()));
      }
    }
    cfg = detail::merge(cmd->defaults, user, "");
    if (seed) {
      if (!cfg.contains("seed")) throw UsageError(cmd->name + " takes no seed");
      cfg["seed"] = *seed;
    }
    detail::absolutize(cfg, cmd->path_keys);
    if (cmd->prepare) cmd->prepare(cfg);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  if (threads) set_thread_count(*threads);

  try {
    const fs::path out(out_dir);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) fail(ErrorCode::IoFailure, "cannot create " + out.string() + ": " + ec.message());
    detail::write_json(out / "resolved_config.json", cfg);
    cmd->run(cfg, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}

}  // namespace fodf::cli
