#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "graphem/graphem.hpp"

namespace fs = std::filesystem;
using namespace graphem;

namespace {

constexpr const char* kVersion = "1.0.0";

std::string eigen_version() {
  return std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
         std::to_string(EIGEN_MINOR_VERSION);
}

struct Common {
  std::uint64_t seed = 7;
  unsigned jobs = 1;
  std::string out;
  Index smooth = 1;
};

void add_common(CLI::App* sub, Common& c, bool with_smooth = false) {
  sub->add_option("--seed", c.seed, "Master seed")->capture_default_str();
  sub->add_option("--jobs", c.jobs, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--out", c.out, "Output directory (default: out)");
  if (with_smooth) sub->add_option("--smooth", c.smooth, "Moving-average width for series outputs")->check(CLI::PositiveNumber);
}

/// Collects what a run read and wrote, then emits manifest.json.
class Run {
 public:
  Run(std::string command, const Common& c, std::string fallback_out = "out")
      : command_(std::move(command)), seed_(c.seed), dir_(c.out.empty() ? fallback_out : c.out) {
    fs::create_directories(dir_);
  }

  const fs::path& dir() const { return dir_; }
  Json& config() { return config_; }

  void input(const std::string& path) { inputs_[path] = file_digest(path); }

  std::ofstream output(const std::string& rel) {
    outputs_.push_back(rel);
    return open_output(dir_ / rel);
  }

  void json_output(const std::string& rel, const Json& j) {
    auto out = output(rel);
    out << j.dump(2) << '\n';
  }

  void finish() {
    Json outs = Json::array();
    for (const auto& rel : outputs_) outs.push_back({{"path", (dir_ / rel).generic_string()}, {"digest", file_digest(dir_ / rel)}});
    Json ins = Json::object();
    for (const auto& [path, digest] : inputs_) ins[path] = digest;
    const Json m = {{"command", command_},
                    {"config", config_},
                    {"seed", seed_},
                    {"versions", {{"graphem", kVersion}, {"eigen", eigen_version()}, {"cli11", CLI11_VERSION}}},
                    {"inputs", ins},
                    {"outputs", outs}};
    auto out = open_output(dir_ / "manifest.json");
    out << m.dump(2) << '\n';
  }

 private:
  std::string command_;
  std::uint64_t seed_;
  fs::path dir_;
  Json config_ = Json::object();
  std::map<std::string, std::string> inputs_;
  std::vector<std::string> outputs_;
};

RowRange parse_range(const std::string& s, const std::string& what) {
  const auto colon = s.find(':');
  if (colon == std::string::npos) throw ArgumentError(what + ": expected BEGIN:END, got '" + s + "'");
  try {
    std::size_t used = 0;
    const auto a = std::stoll(s.substr(0, colon), &used);
    if (used != colon) throw std::invalid_argument(s);
    const auto b = std::stoll(s.substr(colon + 1), &used);
    if (used != s.size() - colon - 1) throw std::invalid_argument(s);
    return {static_cast<Index>(a), static_cast<Index>(b)};
  } catch (const std::logic_error&) {
    throw ArgumentError(what + ": expected BEGIN:END, got '" + s + "'");
  }
}

std::string range_string(RowRange r) { return std::to_string(r.begin) + ":" + std::to_string(r.end); }

/// The rows where every temperature column is observed; they must be contiguous.
RowRange infer_instrumental(const DataMatrix& x, const FieldGeometry& geom) {
  const auto temps = geom.temperature_indices();
  if (temps.empty()) throw ValidationError("geometry has no temperature columns");
  Index first = -1, last = -1;
  for (Index i = 0; i < x.rows(); ++i) {
    bool all = true;
    for (Index j : temps) all = all && x.observed(i, j);
    if (!all) continue;
    if (first < 0) first = i;
    else if (last != i - 1) throw ArgumentError("fully observed temperature rows are not contiguous; pass the range explicitly");
    last = i;
  }
  if (first < 0) throw ArgumentError("no row has every temperature observed; pass the range explicitly");
  return {first, last + 1};
}

/// The complement of `r` in [0, n) when it is a single interval.
RowRange complement(RowRange r, Index n) {
  if (r.begin == 0 && r.end < n) return {r.end, n};
  if (r.end == n && r.begin > 0) return {0, r.begin};
  throw ArgumentError("the rows outside " + range_string(r) + " are not one interval; pass the range explicitly");
}

struct Inputs {
  FieldGeometry geom;
  DataMatrix x;
};

Inputs load_inputs(Run& run, const std::string& data, const std::string& geometry) {
  Inputs in;
  in.geom = read_geometry(geometry);
  run.input(geometry);
  in.x = load_data(data, in.geom);
  run.input(data);
  return in;
}

/// Columns of `t` named like the temperature columns of `geom`, in geometry order.
Matrix temperature_block(const Table& t, const FieldGeometry& geom, const std::string& source) {
  const auto temps = geom.temperature_indices();
  Matrix out(t.data.rows(), static_cast<Index>(temps.size()));
  for (std::size_t k = 0; k < temps.size(); ++k) {
    const auto& name = geom.names[static_cast<std::size_t>(temps[k])];
    const auto it = std::find(t.names.begin(), t.names.end(), name);
    if (it == t.names.end()) throw ValidationError(source + ": no column named '" + name + "'");
    const auto j = static_cast<Index>(it - t.names.begin());
    if (t.data.missing_count(j) > 0) throw ValidationError(source + ": column '" + name + "' has missing values");
    out.col(static_cast<Index>(k)) = t.data.values().col(j);
  }
  return out;
}

void write_series(std::ostream& out, const std::vector<std::pair<std::string, Vector>>& cols) {
  for (std::size_t c = 0; c < cols.size(); ++c) out << (c ? "," : "t,") << cols[c].first;
  out << '\n';
  const Index n = cols.empty() ? 0 : cols.front().second.size();
  for (Index t = 0; t < n; ++t) {
    out << t;
    for (const auto& [name, v] : cols) out << ',' << format_double(v(t));
    out << '\n';
  }
}

void add_smoothed(std::vector<std::pair<std::string, Vector>>& cols, Index w) {
  if (w <= 1) return;
  const auto n = cols.size();
  for (std::size_t c = 0; c < n; ++c) cols.emplace_back(cols[c].first + "_smooth", moving_average(cols[c].second, w));
}

void write_metric_map(std::ostream& out, const MetricReport& r, const FieldGeometry& t_geom) {
  const bool rel = r.rel_mse_diff.size() > 0;
  out << "name,lat,lon,mse,re,ce,bias" << (rel ? ",rel_mse_diff" : "") << '\n';
  for (Index j = 0; j < t_geom.size(); ++j) {
    const auto u = static_cast<std::size_t>(j);
    out << t_geom.names[u] << ',' << format_double(t_geom.lat[u]) << ',' << format_double(t_geom.lon[u]) << ','
        << format_double(r.mse(j)) << ',' << format_double(r.re(j)) << ',' << format_double(r.ce(j)) << ','
        << format_double(r.bias(j));
    if (rel) out << ',' << format_double(r.rel_mse_diff(j));
    out << '\n';
  }
}

Json summary_json(const MetricReport& r) {
  auto ms = [](const MeanSd& m) { return Json{{"mean", m.mean}, {"sd", m.sd}}; };
  Json j = {{"mse", ms(r.mse_summary)}, {"re", ms(r.re_summary)}, {"ce", ms(r.ce_summary)}, {"bias", ms(r.bias_summary)},
            {"undefined_entries", r.undefined_count()}};
  if (r.rel_mse_diff.size()) j["rel_mse_diff"] = ms(r.rel_summary);
  return j;
}

// Reconstruction method flags shared by reconstruct and bootstrap.
struct MethodFlags {
  std::string method = "graphem";
  std::string graph_file;
  std::optional<double> radius_km;
  std::string variant = "neigh";
  int k = 5;
  int max_iter = 200;
  double rel_tol = 1e-4;
  bool standardize = false;

  void add(CLI::App* sub) {
    sub->add_option("--method", method, "graphem or ttls")->check(CLI::IsMember({"graphem", "ttls"}))->capture_default_str();
    sub->add_option("--graph", graph_file, "Graph JSON for GraphEM");
    sub->add_option("--radius-km", radius_km, "Neighbourhood radius for GraphEM when no graph file is given");
    sub->add_option("--variant", variant, "Neighbourhood variant")->capture_default_str();
    sub->add_option("--k", k, "TTLS truncation")->capture_default_str();
    sub->add_option("--max-iter", max_iter, "EM iteration cap")->capture_default_str();
    sub->add_option("--rel-tol", rel_tol, "EM stopping tolerance")->capture_default_str();
    sub->add_flag("--standardize", standardize,
                  "Fit on columns scaled to mean 0, variance 1 over their observed rows; outputs stay in data units");
  }

  EmOptions em() const {
    EmOptions o;
    o.max_iter = max_iter;
    o.rel_tol = rel_tol;
    o.validate();
    return o;
  }

  MethodSpec resolve(Run& run, const FieldGeometry& geom) const {
    MethodSpec spec;
    Json& cfg = run.config();
    cfg["method"] = method;
    cfg["max_iter"] = max_iter;
    cfg["rel_tol"] = rel_tol;
    cfg["standardize"] = standardize;
    if (method == "ttls") {
      if (k < 1) throw ArgumentError("--k must be at least 1");
      spec.method = Method::ttls;
      spec.ttls_k = k;
      cfg["k"] = k;
      return spec;
    }
    spec.method = Method::graphem;
    if (!graph_file.empty()) {
      if (radius_km) throw ArgumentError("give either --graph or --radius-km, not both");
      spec.graph = read_graph(graph_file);
      run.input(graph_file);
      if (spec.graph.size() != geom.size())
        throw ValidationError(graph_file + ": graph has " + std::to_string(spec.graph.size()) + " vertices, geometry has " +
                              std::to_string(geom.size()));
      cfg["graph"] = graph_file;
    } else {
      if (!radius_km) throw ArgumentError("GraphEM needs --graph FILE or --radius-km R");
      NeighborhoodSpec ns{*radius_km, parse_variant(variant)};
      ns.validate();
      spec.graph = neighborhood_graph(geom, ns);
      cfg["radius_km"] = *radius_km;
      cfg["variant"] = variant;
    }
    return spec;
  }
};

// ---------------------------------------------------------------------------

struct GraphCmd {
  Common common;
  std::string data, geometry, method = "neigh";
  double radius_km = 800.0;
  std::vector<double> sparsity;
  double sparsity_tol = 0.001;

  void setup(CLI::App& app) {
    auto* sub = app.add_subcommand("graph", "Estimate a graph (neighbourhood variants or l1 sparsity search)");
    add_common(sub, common);
    sub->add_option("--data", data, "Data CSV (needed for l1)");
    sub->add_option("--geometry", geometry, "Geometry JSON")->required();
    sub->add_option("--method", method, "neigh, ind_pp, car_tp, car_tt, car_tt_tp or l1")->capture_default_str();
    sub->add_option("--radius-km", radius_km, "Neighbourhood radius")->capture_default_str();
    sub->add_option("--target-sparsity", sparsity, "l1 target: one fraction, or TT,TP,PP")->delimiter(',');
    sub->add_option("--sparsity-tolerance", sparsity_tol, "l1 target tolerance")->capture_default_str();
    sub->callback([this] { run(); });
  }

  void run() {
    Run r("graph", common);
    r.config() = {{"method", method}};
    FieldGeometry geom;
    Graph g;
    Json info = {{"method", method}};
    if (method == "l1") {
      if (data.empty()) throw ArgumentError("--method l1 needs --data");
      const auto in = load_inputs(r, data, geometry);
      geom = in.geom;
      SparsityTarget target;
      if (sparsity.size() == 1) target.target = {sparsity[0], sparsity[0], sparsity[0]};
      else if (sparsity.size() == 3) target.target = {sparsity[0], sparsity[1], sparsity[2]};
      else if (!sparsity.empty()) throw ArgumentError("--target-sparsity takes one or three values");
      target.tolerance = sparsity_tol;
      const auto found = sparsity_search(training_covariance(in.x), geom, target);
      g = graph_from_precision(found.estimate.omega, 0.0);
      r.config()["target_sparsity"] = {target.target.tt, target.target.tp, target.target.pp};
      r.config()["sparsity_tolerance"] = sparsity_tol;
      info["penalties"] = {{"TT", found.penalty.rho_tt}, {"TP", found.penalty.rho_tp}, {"PP", found.penalty.rho_pp}};
      info["achieved_sparsity"] = {{"TT", found.achieved.tt}, {"TP", found.achieved.tp}, {"PP", found.achieved.pp}};
      info["solves"] = found.solves;
    } else {
      geom = read_geometry(geometry);
      r.input(geometry);
      NeighborhoodSpec ns{radius_km, parse_variant(method)};
      ns.validate();
      g = neighborhood_graph(geom, ns);
      r.config()["radius_km"] = radius_km;
      info["radius_km"] = radius_km;
    }
    info["vertices"] = g.size();
    info["edges"] = g.edge_count();
    r.json_output("graph.json", graph_to_json(g));
    r.json_output("graph_info.json", info);
    auto out = r.output("block_stats.csv");
    out << "block,vertices,mean_degree,sd_degree,mean_neighbor_distance_km\n";
    for (const auto& st : graph_block_stats(g, geom)) {
      const auto dist = mean_sd(st.mean_neighbor_distance_km);
      out << to_string(st.block) << ',' << st.vertices << ',' << format_double(st.mean_degree) << ','
          << format_double(st.sd_degree) << ',' << format_double(dist.mean) << '\n';
    }
    out.close();
    r.finish();
  }
};

struct ReconstructCmd {
  Common common;
  std::string data, geometry;
  MethodFlags mf;

  void setup(CLI::App& app) {
    auto* sub = app.add_subcommand("reconstruct", "Fill the missing values with GraphEM or RegEM-TTLS");
    add_common(sub, common, true);
    sub->add_option("--data", data, "Data CSV")->required();
    sub->add_option("--geometry", geometry, "Geometry JSON")->required();
    mf.add(sub);
    sub->callback([this] { run(); });
  }

  void run() {
    Run r("reconstruct", common);
    const auto in = load_inputs(r, data, geometry);
    const auto spec = mf.resolve(r, in.geom);
    std::optional<ColumnScaling> sc;
    if (mf.standardize) sc = ColumnScaling::observed(in.x);
    auto res = reconstruct(sc ? sc->apply(in.x) : in.x, spec, mf.em());
    if (sc) {
      res.completed = sc->restore(res.completed, in.x);
      auto mc = sc->restore(MeanCov{res.mu_hat, res.sigma_hat});
      res.mu_hat = std::move(mc.mu);
      res.sigma_hat = std::move(mc.sigma);
    }

    {
      auto out = r.output("reconstruction.csv");
      write_csv(out, in.geom.names, res.completed);
    }
    {
      auto out = r.output("trace.csv");
      const bool g = spec.method == Method::graphem;
      out << "iteration,change,objective" << (g ? ",mstep_objective,mstep_sweeps" : "") << '\n';
      for (std::size_t i = 0; i < res.change_trace.size(); ++i) {
        out << i + 1 << ',' << format_double(res.change_trace[i]) << ','
            << (i < res.objective_trace.size() ? format_double(res.objective_trace[i]) : "NaN");
        if (g) out << ',' << format_double(res.mstep_trace[i]) << ',' << res.mstep_sweeps[i];
        out << '\n';
      }
    }
    {
      auto out = r.output("mean.csv");
      write_csv(out, in.geom.names, Matrix(res.mu_hat.transpose()));
    }
    {
      auto out = r.output("covariance.csv");
      write_csv(out, in.geom.names, res.sigma_hat);
    }
    const auto temps = in.geom.temperature_indices();
    if (!temps.empty()) {
      std::vector<std::pair<std::string, Vector>> cols{
          {"spatial_mean", spatial_average(res.completed(Eigen::all, temps), in.geom.subset(temps))}};
      add_smoothed(cols, common.smooth);
      auto out = r.output("series.csv");
      write_series(out, cols);
    }
    r.config()["smooth"] = common.smooth;
    r.json_output("summary.json", {{"iterations", res.iterations}, {"converged", res.converged}});
    r.finish();
  }
};

struct ExperimentCmd {
  Common common;
  std::string config;
  std::optional<int> realizations;
  bool seed_given = false;

  void setup(CLI::App& app) {
    auto* sub = app.add_subcommand("experiment", "Pseudoproxy experiment: generate, reconstruct, score");
    add_common(sub, common);
    sub->add_option("--config", config, "Experiment config (key = value)");
    sub->add_option("--realizations", realizations, "Override the number of noise realizations");
    sub->callback([this, sub] {
      seed_given = sub->count("--seed") > 0;
      run();
    });
  }

  void run() {
    ExperimentConfig cfg;
    if (!config.empty()) {
      auto in = open_input(config);
      cfg = parse_experiment_config(in);
    }
    if (seed_given) cfg.seed = common.seed;
    if (realizations) cfg.realizations = *realizations;
    cfg.validate();
    Common c = common;
    c.seed = cfg.seed;
    Run r("experiment", c, cfg.output_dir);
    if (!config.empty()) r.input(config);
    r.config() = {{"grid", {{"rows", cfg.grid.rows}, {"cols", cfg.grid.cols}, {"lat0", cfg.grid.lat0},
                            {"lon0", cfg.grid.lon0}, {"spacing_deg", cfg.grid.spacing_deg}}},
                  {"n_time", cfg.n_time}, {"n_calib", cfg.n_calib}, {"n_proxies", cfg.n_proxies},
                  {"snr", std::isinf(cfg.snr) ? Json("inf") : Json(cfg.snr)},
                  {"truth_radius_km", cfg.truth_radius_km}, {"truth_kappa", cfg.truth_kappa},
                  {"realizations", cfg.realizations}, {"run_graphem", cfg.run_graphem}, {"run_ttls", cfg.run_ttls},
                  {"ttls_k", cfg.ttls_k}, {"variant", to_string(cfg.variant)}, {"cv_radii", cfg.cv_radii},
                  {"cv_folds", cfg.cv_folds}, {"em_max_iter", cfg.em.max_iter}, {"em_rel_tol", cfg.em.rel_tol}};
    if (cfg.radius_km) r.config()["radius_km"] = *cfg.radius_km;

    const auto res = run_experiment(cfg, common.jobs);
    const auto& s = res.setup;

    if (res.cv) {
      auto out = r.output("cv.csv");
      write_cv(out, *res.cv);
    }
    std::vector<std::pair<std::string, bool>> methods;
    if (cfg.run_graphem) methods.emplace_back("graphem", true);
    if (cfg.run_ttls) methods.emplace_back("ttls", false);

    auto table = r.output("realizations.csv");
    table << "method,realization,ok,iterations,converged,mse,re,ce,bias,rel_mse_diff,error\n";
    for (const auto& [name, is_g] : methods) {
      for (std::size_t k = 0; k < res.realizations.size(); ++k) {
        const auto& m = is_g ? res.realizations[k].graphem : res.realizations[k].ttls;
        table << name << ',' << k << ',' << (m.ok ? 1 : 0) << ',' << m.iterations << ',' << (m.converged ? 1 : 0);
        if (m.ok) {
          const auto& mr = m.metrics;
          table << ',' << format_double(mr.mse_summary.mean) << ',' << format_double(mr.re_summary.mean) << ','
                << format_double(mr.ce_summary.mean) << ',' << format_double(mr.bias_summary.mean) << ','
                << (mr.rel_mse_diff.size() ? format_double(mr.rel_summary.mean) : "NaN") << ",\n";
          auto map = r.output("metrics/" + name + "_r" + std::to_string(k) + ".csv");
          write_metric_map(map, mr, s.t_geom);
        } else {
          std::string err = m.error;
          std::replace(err.begin(), err.end(), ',', ';');
          std::replace(err.begin(), err.end(), '\n', ' ');
          table << ",NaN,NaN,NaN,NaN,NaN," << err << '\n';
        }
      }
    }
    table.close();

    auto summary = r.output("summary.csv");
    summary << "method,successes,mse_mean,mse_sd,re_mean,re_sd,ce_mean,ce_sd,bias_mean,bias_sd,rel_mse_diff_mean,"
               "rel_mse_diff_sd\n";
    for (const auto& [name, is_g] : methods) {
      const auto m = summarize(res.realizations, is_g);
      summary << name << ',' << m.successes;
      for (const auto* v : {&m.mse, &m.re, &m.ce, &m.bias, &m.rel_mse_diff})
        summary << ',' << format_double(v->mean) << ',' << format_double(v->sd);
      summary << '\n';
    }
    summary.close();
    r.json_output("experiment.json", {{"radius_km", res.radius_km},
                                      {"graph_edges", res.graph.edge_count()},
                                      {"calibration", range_string(s.calibration)},
                                      {"validation", range_string(s.validation)}});
    r.finish();
  }

  static void write_cv(std::ostream& out, const CvResult& cv) {
    const auto folds = cv.table.empty() ? 0 : cv.table.front().fold_mse.size();
    out << "candidate";
    for (std::size_t f = 0; f < folds; ++f) out << ",fold_" << f;
    out << ",mean_mse,selected,reason\n";
    for (std::size_t c = 0; c < cv.table.size(); ++c) {
      const auto& s = cv.table[c];
      out << s.label;
      for (double v : s.fold_mse) out << ',' << format_double(v);
      std::string reason = s.reason;
      std::replace(reason.begin(), reason.end(), ',', ';');
      std::replace(reason.begin(), reason.end(), '\n', ' ');
      out << ',' << format_double(s.mean_mse) << ',' << (c == cv.best ? 1 : 0) << ',' << reason << '\n';
    }
  }
};

struct CvCmd {
  Common common;
  std::string data, geometry, calibration, variant = "neigh";
  std::vector<double> radii{600.0, 800.0, 1000.0, 1200.0};
  std::vector<double> sparsity;
  int folds = 5;
  int max_iter = 200;
  double rel_tol = 1e-4;
  bool standardize = false;

  void setup(CLI::App& app) {
    auto* sub = app.add_subcommand("cv", "Select a graph by k-fold cross-validation over the calibration rows");
    add_common(sub, common);
    sub->add_option("--data", data, "Data CSV")->required();
    sub->add_option("--geometry", geometry, "Geometry JSON")->required();
    sub->add_option("--calibration", calibration, "Calibration rows BEGIN:END (default: rows with every temperature observed)");
    sub->add_option("--radii", radii, "Candidate radii in km")->delimiter(',');
    sub->add_option("--variant", variant, "Neighbourhood variant")->capture_default_str();
    sub->add_option("--sparsity", sparsity, "Uniform l1 sparsity targets to add as candidates")->delimiter(',');
    sub->add_option("--folds", folds, "Number of folds")->capture_default_str();
    sub->add_option("--max-iter", max_iter, "EM iteration cap")->capture_default_str();
    sub->add_option("--rel-tol", rel_tol, "EM stopping tolerance")->capture_default_str();
    sub->add_flag("--standardize", standardize,
                  "Fit and score on columns scaled to mean 0, variance 1 over their observed rows");
    sub->callback([this] { run(); });
  }

  void run() {
    Run r("cv", common);
    const auto in = load_inputs(r, data, geometry);
    const RowRange calib = calibration.empty() ? infer_instrumental(in.x, in.geom) : parse_range(calibration, "--calibration");
    std::vector<CvCandidate> cands;
    const auto v = parse_variant(variant);
    for (double rad : radii) {
      NeighborhoodSpec ns{rad, v};
      ns.validate();
      cands.emplace_back(ns);
    }
    for (double s : sparsity) {
      SparsityTarget t;
      t.target = {s, s, s};
      t.tolerance = std::min(t.tolerance, 0.5 * s);
      cands.emplace_back(t);
    }
    CvOptions opts{folds, calib, {}, common.jobs};
    opts.em.max_iter = max_iter;
    opts.em.rel_tol = rel_tol;
    opts.em.validate();
    r.config() = {{"calibration", range_string(calib)}, {"radii", radii}, {"variant", variant}, {"sparsity", sparsity},
                  {"folds", folds}, {"max_iter", max_iter}, {"rel_tol", rel_tol}, {"standardize", standardize}};
    const auto cv = crossval_select(standardize ? ColumnScaling::observed(in.x).apply(in.x) : in.x, in.geom, cands, opts);
    {
      auto out = r.output("cv.csv");
      ExperimentCmd::write_cv(out, cv);
    }
    r.json_output("selection.json", {{"selected", cv.table[cv.best].label}, {"mean_mse", cv.table[cv.best].mean_mse}});
    r.finish();
  }
};

struct BootstrapCmd {
  Common common;
  std::string data, geometry, instrumental, truth, reference = "instrumental";
  MethodFlags mf;
  int samples = 100;
  Index blocksize = 2;
  double level = 0.95;
  std::optional<double> inflate_to;

  void setup(CLI::App& app) {
    auto* sub = app.add_subcommand("bootstrap", "Block-bootstrap prediction bands for the spatial-mean temperature");
    add_common(sub, common, true);
    sub->add_option("--data", data, "Data CSV")->required();
    sub->add_option("--geometry", geometry, "Geometry JSON")->required();
    mf.add(sub);
    sub->add_option("--samples", samples, "Bootstrap samples N")->capture_default_str();
    sub->add_option("--blocksize", blocksize, "Block length b")->capture_default_str();
    sub->add_option("--level", level, "Band level")->capture_default_str();
    sub->add_option("--instrumental", instrumental, "Instrumental rows BEGIN:END (default: rows with every temperature observed)");
    sub->add_option("--truth", truth, "Temperature truth CSV, for coverage outside the instrumental period");
    sub->add_option("--inflate-to", inflate_to, "Find the inflation reaching this coverage on the reference period");
    sub->add_option("--reference", reference, "instrumental or validation")
        ->check(CLI::IsMember({"instrumental", "validation"}))
        ->capture_default_str();
    sub->callback([this] { run(); });
  }

  void run() {
    if (samples < 2) throw ArgumentError("--samples must be at least 2");
    Run r("bootstrap", common);
    const auto in = load_inputs(r, data, geometry);
    const auto temps = in.geom.temperature_indices();
    if (temps.empty()) throw ValidationError("geometry has no temperature columns");
    const auto t_geom = in.geom.subset(temps);
    const RowRange inst = instrumental.empty() ? infer_instrumental(in.x, in.geom) : parse_range(instrumental, "--instrumental");
    if (!inst.within(in.x.rows()) || inst.size() < 1) throw ArgumentError("instrumental range lies outside the data");
    const auto spec = mf.resolve(r, in.geom);

    BootstrapConfig bc;
    bc.n_samples = samples;
    bc.blocksize = blocksize;
    bc.method = spec;
    bc.seed = common.seed;
    bc.level = level;
    bc.em = mf.em();
    bc.jobs = common.jobs;
    r.config().update({{"samples", samples}, {"blocksize", blocksize}, {"level", level},
                       {"instrumental", range_string(inst)}, {"reference", reference}, {"smooth", common.smooth}});
    if (inflate_to) r.config()["inflate_to"] = *inflate_to;

    // Every temperature entry is reconstructed from the proxies, so the
    // instrumental period can be checked against the observations.
    Mask target_mask = in.x.mask();
    for (Index j : temps) target_mask.col(j).setConstant(false);
    const DataMatrix target(in.x.values(), target_mask);
    auto ens = [&] {
      if (!mf.standardize) return bootstrap_ensemble(in.x, inst, bc, &target);
      const auto sc = ColumnScaling::observed(in.x);
      const DataMatrix z_target = sc.apply(target);
      auto e = bootstrap_ensemble(sc.apply(in.x), inst, bc, &z_target);
      for (auto& m : e.members) m = sc.restore(m, target);
      return e;
    }();

    std::vector<Vector> series;
    for (const auto& m : ens.members) series.push_back(spatial_average(m(Eigen::all, temps), t_geom));
    const auto bands = prediction_interval(series, level);

    Vector observed = Vector::Constant(in.x.rows(), std::numeric_limits<double>::quiet_NaN());
    observed.segment(inst.begin, inst.size()) =
        spatial_average(in.x.values()(Eigen::seq(inst.begin, inst.end - 1), temps), t_geom);
    std::optional<Vector> truth_series;
    if (!truth.empty()) {
      const auto t = read_csv(truth);
      r.input(truth);
      const Matrix block = temperature_block(t, in.geom, truth);
      if (block.rows() != in.x.rows()) throw ValidationError(truth + ": row count differs from the data");
      truth_series = spatial_average(block, t_geom);
    }

    Json report = {{"members", ens.members.size()}, {"failures", ens.failures}, {"mean_width", bands.mean_width},
                   {"level", level}};
    report["coverage_instrumental"] = coverage(bands, observed, inst);
    std::optional<RowRange> valid;
    if (truth_series) {
      valid = complement(inst, in.x.rows());
      report["validation"] = range_string(*valid);
      report["coverage_validation"] = coverage(bands, *truth_series, *valid);
    }
    std::optional<IntervalBands> inflated;
    if (inflate_to) {
      if (reference == "validation" && !truth_series) throw ArgumentError("--reference validation needs --truth");
      const bool on_inst = reference == "instrumental";
      const auto res = coverage_and_inflation(bands, on_inst ? observed : *truth_series, on_inst ? inst : *valid, *inflate_to);
      Json path = Json::array();
      for (const auto& [c, cov] : res.path) path.push_back({c, cov});
      report["inflation"] = {{"target", *inflate_to}, {"reference", reference}, {"factor", res.inflation},
                             {"coverage_before", res.coverage}, {"path", path}};
      inflated = inflate(bands, res.inflation);
      report["inflation"]["coverage_instrumental_after"] = coverage(*inflated, observed, inst);
      if (truth_series) report["inflation"]["coverage_validation_after"] = coverage(*inflated, *truth_series, *valid);
    }

    std::vector<std::pair<std::string, Vector>> cols{{"lower", bands.lower}, {"median", bands.median}, {"upper", bands.upper}};
    if (inflated) {
      cols.emplace_back("inflated_lower", inflated->lower);
      cols.emplace_back("inflated_upper", inflated->upper);
    }
    add_smoothed(cols, common.smooth);
    cols.emplace_back("observed", observed);
    if (truth_series) cols.emplace_back("truth", *truth_series);
    {
      auto out = r.output("bands.csv");
      write_series(out, cols);
    }
    r.json_output("report.json", report);
    r.finish();
  }
};

struct MetricsCmd {
  Common common;
  std::string truth, recon, baseline, geometry, calibration, validation;

  void setup(CLI::App& app) {
    auto* sub = app.add_subcommand("metrics", "Score a reconstruction against the truth (MSE, RE, CE, bias)");
    add_common(sub, common);
    sub->add_option("--truth", truth, "Truth CSV")->required();
    sub->add_option("--reconstruction", recon, "Reconstruction CSV")->required();
    sub->add_option("--baseline", baseline, "Baseline reconstruction CSV for the relative MSE difference");
    sub->add_option("--geometry", geometry, "Geometry JSON")->required();
    sub->add_option("--calibration", calibration, "Calibration rows BEGIN:END")->required();
    sub->add_option("--validation", validation, "Validation rows BEGIN:END (default: the other rows)");
    sub->callback([this] { run(); });
  }

  void run() {
    Run r("metrics", common);
    const auto geom = read_geometry(geometry);
    r.input(geometry);
    auto load = [&](const std::string& path) {
      const auto t = read_csv(path);
      r.input(path);
      return temperature_block(t, geom, path);
    };
    const Matrix t = load(truth), t_hat = load(recon);
    std::optional<Matrix> base;
    if (!baseline.empty()) base = load(baseline);
    const RowRange calib = parse_range(calibration, "--calibration");
    if (!calib.within(t.rows())) throw ArgumentError("--calibration lies outside the data");
    const RowRange valid = validation.empty() ? complement(calib, t.rows()) : parse_range(validation, "--validation");
    r.config() = {{"calibration", range_string(calib)}, {"validation", range_string(valid)}};
    const auto rep = compute_metrics(t, t_hat, calib, valid, base ? &*base : nullptr);
    {
      auto out = r.output("metrics.csv");
      write_metric_map(out, rep, geom.subset(geom.temperature_indices()));
    }
    r.json_output("summary.json", summary_json(rep));
    r.finish();
  }
};

struct SimulateCmd {
  Common common;
  std::string config;
  int realization = 0;
  bool seed_given = false;

  void setup(CLI::App& app) {
    auto* sub = app.add_subcommand("simulate", "Write one pseudoproxy data set (data, geometry, truth)");
    add_common(sub, common);
    sub->add_option("--config", config, "Experiment config (key = value)");
    sub->add_option("--realization", realization, "Noise realization index")->capture_default_str();
    sub->callback([this, sub] {
      seed_given = sub->count("--seed") > 0;
      run();
    });
  }

  void run() {
    ExperimentConfig cfg;
    if (!config.empty()) {
      auto in = open_input(config);
      cfg = parse_experiment_config(in);
    }
    if (seed_given) cfg.seed = common.seed;
    if (realization < 0) throw ArgumentError("--realization must be non-negative");
    Common c = common;
    c.seed = cfg.seed;
    Run r("simulate", c);
    if (!config.empty()) r.input(config);
    const auto s = make_setup(cfg);
    const auto x = realization_data(s, cfg, realization);
    r.config() = {{"realization", realization}, {"grid_rows", cfg.grid.rows}, {"grid_cols", cfg.grid.cols},
                  {"n_time", cfg.n_time}, {"n_calib", cfg.n_calib}, {"n_proxies", cfg.n_proxies},
                  {"snr", std::isinf(cfg.snr) ? Json("inf") : Json(cfg.snr)},
                  {"truth_radius_km", cfg.truth_radius_km}, {"truth_kappa", cfg.truth_kappa}};
    {
      auto out = r.output("data.csv");
      write_csv(out, s.geom.names, x);
    }
    {
      auto out = r.output("truth.csv");
      write_csv(out, s.t_geom.names, s.truth);
    }
    r.json_output("geometry.json", geometry_to_json(s.geom));
    r.json_output("setup.json", {{"calibration", range_string(s.calibration)}, {"validation", range_string(s.validation)}});
    r.finish();
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GraphEM: climate field reconstruction with Gaussian Markov random fields"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  GraphCmd graph;
  ReconstructCmd recon;
  ExperimentCmd experiment;
  CvCmd cv;
  BootstrapCmd boot;
  MetricsCmd metrics;
  SimulateCmd simulate;
  graph.setup(app);
  recon.setup(app);
  experiment.setup(app);
  cv.setup(app);
  boot.setup(app);
  metrics.setup(app);
  simulate.setup(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 4;
  }
  return 0;
}
