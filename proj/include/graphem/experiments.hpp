#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "graphem/data.hpp"
#include "graphem/em.hpp"
#include "graphem/error.hpp"
#include "graphem/geodesy.hpp"
#include "graphem/glasso.hpp"
#include "graphem/gmrf.hpp"
#include "graphem/graph.hpp"
#include "graphem/linalg.hpp"
#include "graphem/neighgraph.hpp"
#include "graphem/parallel.hpp"
#include "graphem/random.hpp"

namespace graphem {

// ---------------------------------------------------------------------------
// Synthetic truth

/// Regular lat/lon grid of temperature points, row-major from (lat0, lon0).
struct GridSpec {
  Index rows = 16;
  Index cols = 16;
  double lat0 = -37.5;
  double lon0 = 0.0;
  double spacing_deg = 5.0;
};

inline FieldGeometry make_grid(const GridSpec& spec) {
  if (spec.rows < 1 || spec.cols < 1) throw ArgumentError("grid must have at least one row and column");
  if (!(spec.spacing_deg > 0.0)) throw ArgumentError("grid spacing must be positive");
  const double top = spec.lat0 + static_cast<double>(spec.rows - 1) * spec.spacing_deg;
  if (spec.lat0 < -90.0 || top > 90.0) throw ArgumentError("grid latitudes leave [-90, 90]");
  FieldGeometry g;
  g.grid_spacing = spec.spacing_deg;
  for (Index r = 0; r < spec.rows; ++r) {
    for (Index c = 0; c < spec.cols; ++c) {
      const double lat = spec.lat0 + static_cast<double>(r) * spec.spacing_deg;
      double lon = std::fmod(spec.lon0 + static_cast<double>(c) * spec.spacing_deg + 180.0, 360.0);
      if (lon < 0.0) lon += 360.0;
      lon -= 180.0;
      g.add("T_r" + std::to_string(r) + "_c" + std::to_string(c), ColumnKind::temperature, lat, lon);
    }
  }
  return g;
}

/// Zero-mean Gaussian Markov random field: `precision` must vanish off `graph`.
struct GmrfModel {
  Graph graph;
  Matrix precision;
};

/// kappa * I + graph Laplacian of the radius neighbourhood graph over the
/// temperature columns of `geom`.
inline GmrfModel neighborhood_gmrf(const FieldGeometry& geom, double radius_km, double kappa) {
  if (!(kappa > 0.0)) throw ArgumentError("GMRF kappa must be positive");
  NeighborhoodSpec spec;
  spec.radius_km = radius_km;
  GmrfModel m{neighborhood_graph(geom, spec), Matrix::Zero(geom.size(), geom.size())};
  for (Index j = 0; j < geom.size(); ++j) {
    m.precision(j, j) = kappa + static_cast<double>(m.graph.degree(j));
    for (Index i : m.graph.neighbors(j)) m.precision(i, j) = -1.0;
  }
  return m;
}

/// n independent draws from N(0, Omega^{-1}) through the Cholesky factor of
/// Omega, then each column standardized to mean 0 and variance 1 (divisor n).
inline Matrix generate_field(const FieldGeometry& geom, const GmrfModel& model, Index n, std::uint64_t seed) {
  const Index p = model.precision.rows();
  if (model.precision.cols() != p || geom.size() != p || model.graph.size() != p)
    throw ValidationError("generate_field: geometry, graph and precision sizes differ");
  if (n < 2) throw ArgumentError("generate_field: need at least two draws");
  for (Index j = 0; j < p; ++j)
    for (Index i = 0; i < p; ++i)
      if (i != j && model.precision(i, j) != 0.0 && !model.graph.has_edge(i, j))
        throw ValidationError("generate_field: precision has an entry off the model graph");
  auto llt = try_cholesky(model.precision);
  if (!llt) throw NumericalError("generate_field: precision matrix is not positive definite");

  Rng rng(seed);
  Matrix z = standard_normal(p, n, rng);
  // Omega = L L^T, so x = L^{-T} z has covariance Omega^{-1}.
  Matrix x = llt->matrixU().solve(z);
  Matrix out = x.transpose();
  for (Index j = 0; j < p; ++j) {
    auto col = out.col(j);
    col.array() -= col.mean();
    const double sd = std::sqrt(col.squaredNorm() / static_cast<double>(n));
    if (sd > 0.0) col /= sd;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pseudoproxies

struct PseudoproxyConfig {
  double snr = 0.5;  // may be +infinity
  std::vector<LatLon> locations;
  RowRange calibration;
  std::uint64_t seed = 0;

  void validate(Index n) const {
    if (!(snr > 0.0)) throw ArgumentError("pseudoproxy SNR must be positive");
    if (!calibration.within(n)) throw ArgumentError("calibration range lies outside the data");
  }
};

struct Pseudoproxies {
  Matrix values;      // n x number of locations
  IndexList sources;  // temperature column feeding each proxy
};

/// Index of the temperature column nearest to `where`; ties go to the lowest index.
inline Index nearest_temperature_column(const FieldGeometry& geom, LatLon where) {
  Index best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (Index j : geom.temperature_indices()) {
    const auto u = static_cast<std::size_t>(j);
    const double d = great_circle_distance(where, {geom.lat[u], geom.lon[u]});
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  if (best < 0) throw ValidationError("no temperature column to sample pseudoproxies from");
  return best;
}

/// P(l, t) = T(l, t) + xi(l, t) / SNR with xi i.i.d. standard normal.
inline Pseudoproxies make_pseudoproxies(const Matrix& t, const FieldGeometry& t_geom, const PseudoproxyConfig& cfg) {
  cfg.validate(t.rows());
  if (t_geom.size() != t.cols()) throw ValidationError("make_pseudoproxies: geometry does not match the field");
  Pseudoproxies out;
  for (const auto& loc : cfg.locations) out.sources.push_back(nearest_temperature_column(t_geom, loc));
  out.values = t(Eigen::all, out.sources);
  if (std::isinf(cfg.snr)) return out;
  Rng rng(cfg.seed);
  out.values += standard_normal(t.rows(), static_cast<Index>(out.sources.size()), rng) / cfg.snr;
  return out;
}

// ---------------------------------------------------------------------------
// Verification metrics

struct MeanSd {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double sd = std::numeric_limits<double>::quiet_NaN();
  Index count = 0;
};

/// Mean and sample standard deviation (divisor count - 1) of the finite entries.
inline MeanSd mean_sd(const std::vector<double>& v) {
  MeanSd out;
  double sum = 0.0;
  for (double x : v)
    if (std::isfinite(x)) {
      sum += x;
      ++out.count;
    }
  if (out.count == 0) return out;
  out.mean = sum / static_cast<double>(out.count);
  if (out.count < 2) {
    out.sd = 0.0;
    return out;
  }
  double sq = 0.0;
  for (double x : v)
    if (std::isfinite(x)) sq += (x - out.mean) * (x - out.mean);
  out.sd = std::sqrt(sq / static_cast<double>(out.count - 1));
  return out;
}

inline MeanSd mean_sd(const Vector& v) { return mean_sd(std::vector<double>(v.data(), v.data() + v.size())); }

/// Per-location skill over the validation range. Undefined entries (a
/// reference with zero mean squared error) are NaN and excluded from the
/// spatial summaries.
struct MetricReport {
  Vector mse, re, ce, bias;
  Vector rel_mse_diff;  // empty unless a baseline was given
  MeanSd mse_summary, re_summary, ce_summary, bias_summary, rel_summary;

  Index undefined_count() const {
    auto bad = [](const Vector& v) { return static_cast<Index>((!v.array().isFinite()).count()); };
    return bad(re) + bad(ce) + (rel_mse_diff.size() ? bad(rel_mse_diff) : 0);
  }
};

inline MetricReport compute_metrics(const Matrix& t, const Matrix& t_hat, RowRange calib, RowRange valid,
                                    const Matrix* baseline = nullptr) {
  const Index n = t.rows(), p = t.cols();
  if (t_hat.rows() != n || t_hat.cols() != p) throw ValidationError("compute_metrics: reconstruction shape differs");
  if (baseline && (baseline->rows() != n || baseline->cols() != p))
    throw ValidationError("compute_metrics: baseline shape differs");
  if (!calib.within(n) || !valid.within(n) || calib.size() < 1 || valid.size() < 1)
    throw ArgumentError("compute_metrics: ranges must be non-empty and inside the data");
  if (calib.overlaps(valid)) throw ArgumentError("compute_metrics: calibration and validation ranges overlap");

  const double nan = std::numeric_limits<double>::quiet_NaN();
  MetricReport r;
  r.mse.resize(p);
  r.re.resize(p);
  r.ce.resize(p);
  r.bias.resize(p);
  if (baseline) r.rel_mse_diff.resize(p);
  const auto nv = static_cast<double>(valid.size());
  for (Index j = 0; j < p; ++j) {
    const double mean_c = t.col(j).segment(calib.begin, calib.size()).mean();
    const double mean_v = t.col(j).segment(valid.begin, valid.size()).mean();
    double mse = 0.0, ref_c = 0.0, ref_v = 0.0, bias = 0.0, mse_base = 0.0;
    for (Index i = valid.begin; i < valid.end; ++i) {
      const double e = t_hat(i, j) - t(i, j);
      mse += e * e;
      bias += e;
      ref_c += (t(i, j) - mean_c) * (t(i, j) - mean_c);
      ref_v += (t(i, j) - mean_v) * (t(i, j) - mean_v);
      if (baseline) mse_base += ((*baseline)(i, j) - t(i, j)) * ((*baseline)(i, j) - t(i, j));
    }
    mse /= nv;
    ref_c /= nv;
    ref_v /= nv;
    mse_base /= nv;
    r.mse(j) = mse;
    r.bias(j) = bias / nv;
    r.re(j) = ref_c > 0.0 ? 1.0 - mse / ref_c : nan;
    r.ce(j) = ref_v > 0.0 ? 1.0 - mse / ref_v : nan;
    if (baseline) r.rel_mse_diff(j) = mse_base > 0.0 ? (mse_base - mse) / mse_base : nan;
  }
  r.mse_summary = mean_sd(r.mse);
  r.re_summary = mean_sd(r.re);
  r.ce_summary = mean_sd(r.ce);
  r.bias_summary = mean_sd(r.bias);
  if (baseline) r.rel_summary = mean_sd(r.rel_mse_diff);
  return r;
}

/// Area-weighted (cos latitude) mean of every row.
inline Vector spatial_average(const Matrix& field, const FieldGeometry& geom) {
  if (geom.size() != field.cols()) throw ValidationError("spatial_average: geometry does not match the field");
  if (field.cols() == 0) throw ValidationError("spatial_average: empty field");
  Vector w(field.cols());
  for (Index j = 0; j < field.cols(); ++j)
    w(j) = std::max(0.0, std::cos(geom.lat[static_cast<std::size_t>(j)] * std::numbers::pi / 180.0));
  const double total = w.sum();
  if (!(total > 0.0)) throw ValidationError("spatial_average: all weights vanish (every point at a pole)");
  return field * (w / total);
}

// ---------------------------------------------------------------------------
// Cross-validation

using CvCandidate = std::variant<NeighborhoodSpec, SparsityTarget>;

inline std::string describe(const CvCandidate& c) {
  std::ostringstream os;
  if (const auto* n = std::get_if<NeighborhoodSpec>(&c)) {
    os << to_string(n->variant) << ":radius_km=" << n->radius_km;
  } else {
    const auto& s = std::get<SparsityTarget>(c);
    os << "l1:tt=" << s.target.tt << ",tp=" << s.target.tp << ",pp=" << s.target.pp;
  }
  return os.str();
}

/// Sample covariance of the fully observed rows, or of the column-mean imputed
/// matrix when fewer than two rows are complete.
inline Matrix training_covariance(const DataMatrix& x) {
  IndexList complete;
  for (Index i = 0; i < x.rows(); ++i)
    if (x.mask().row(i).all()) complete.push_back(i);
  if (complete.size() >= 2) return sample_mean_cov(x.values()(complete, Eigen::all)).sigma;
  return sample_mean_cov(column_mean_impute(x)).sigma;
}

/// Graph implied by a candidate on training data `x`.
inline Graph candidate_graph(const CvCandidate& c, const DataMatrix& x, const FieldGeometry& geom) {
  if (const auto* n = std::get_if<NeighborhoodSpec>(&c)) return neighborhood_graph(geom, *n);
  const auto found = sparsity_search(training_covariance(x), geom, std::get<SparsityTarget>(c));
  return graph_from_precision(found.estimate.omega, 0.0);
}

struct CvOptions {
  int folds = 5;
  RowRange calibration;  // rows whose temperature values may be withheld
  EmOptions em;
  unsigned jobs = 1;
};

struct CvScore {
  std::string label;
  std::vector<double> fold_mse;
  double mean_mse = std::numeric_limits<double>::quiet_NaN();
  bool disqualified = false;
  std::string reason;
};

struct CvResult {
  std::size_t best = 0;
  std::vector<CvScore> table;
};

/// Contiguous fold `f` of `k` over `range`; the first (size % k) folds get one extra row.
inline RowRange fold_range(RowRange range, int k, int f) {
  const Index base = range.size() / k, extra = range.size() % k;
  const Index begin = range.begin + f * base + std::min<Index>(f, extra);
  return {begin, begin + base + (f < extra ? 1 : 0)};
}

/// k-fold cross-validation over contiguous blocks of the calibration rows:
/// each fold withholds one block's temperature values, every candidate graph
/// is fitted by GraphEM, and the candidate with the lowest mean squared error
/// on the withheld values wins. A candidate that fails on any fold is
/// disqualified.
inline CvResult crossval_select(const DataMatrix& x, const FieldGeometry& geom, const std::vector<CvCandidate>& candidates,
                                const CvOptions& opts) {
  if (candidates.empty()) throw ArgumentError("crossval_select: no candidates");
  if (opts.folds < 2) throw ArgumentError("crossval_select: need at least two folds");
  if (geom.size() != x.cols()) throw ValidationError("crossval_select: geometry does not match the data");
  if (!opts.calibration.within(x.rows()) || opts.calibration.size() < opts.folds)
    throw ArgumentError("crossval_select: calibration period too short for " + std::to_string(opts.folds) + " folds");
  const auto temps = geom.temperature_indices();

  const auto nc = candidates.size(), nf = static_cast<std::size_t>(opts.folds);
  std::vector<double> mse(nc * nf, std::numeric_limits<double>::quiet_NaN());
  std::vector<std::string> errors(nc * nf);

  parallel_for(nc * nf, opts.jobs, [&](std::size_t job) {
    const auto c = job / nf, f = job % nf;
    const RowRange held = fold_range(opts.calibration, opts.folds, static_cast<int>(f));
    Mask withhold = Mask::Constant(x.rows(), x.cols(), false);
    for (Index i = held.begin; i < held.end; ++i)
      for (Index j : temps) withhold(i, j) = x.observed(i, j);
    const DataMatrix train = x.with_missing(withhold);
    try {
      const Graph g = candidate_graph(candidates[c], train, geom);
      const auto res = graphem(train, g, opts.em);
      double sum = 0.0;
      Index count = 0;
      for (Index j : temps)
        for (Index i = held.begin; i < held.end; ++i)
          if (withhold(i, j)) {
            const double e = res.completed(i, j) - x.values()(i, j);
            sum += e * e;
            ++count;
          }
      mse[job] = count ? sum / static_cast<double>(count) : 0.0;
    } catch (const std::exception& e) {
      errors[job] = "fold " + std::to_string(f) + ": " + e.what();
    }
  });

  CvResult out;
  double best = std::numeric_limits<double>::infinity();
  bool found = false;
  for (std::size_t c = 0; c < nc; ++c) {
    CvScore s;
    s.label = describe(candidates[c]);
    double sum = 0.0;
    for (std::size_t f = 0; f < nf; ++f) {
      const auto job = c * nf + f;
      s.fold_mse.push_back(mse[job]);
      if (!errors[job].empty() && !s.disqualified) {
        s.disqualified = true;
        s.reason = errors[job];
      }
      sum += mse[job];
    }
    if (!s.disqualified) {
      s.mean_mse = sum / static_cast<double>(nf);
      if (s.mean_mse < best) {
        best = s.mean_mse;
        out.best = c;
        found = true;
      }
    }
    out.table.push_back(std::move(s));
  }
  if (!found) throw NumericalError("crossval_select: every candidate failed (" + out.table.front().reason + ")");
  return out;
}

// ---------------------------------------------------------------------------
// Pseudoproxy experiment harness

struct ExperimentConfig {
  GridSpec grid;
  Index n_time = 300;
  Index n_calib = 40;
  Index n_proxies = 24;
  double snr = 0.5;
  double truth_radius_km = 800.0;
  double truth_kappa = 0.05;
  std::uint64_t seed = 7;
  int realizations = 20;
  bool run_graphem = true;
  bool run_ttls = true;
  int ttls_k = 5;
  GraphVariant variant = GraphVariant::neigh;
  std::optional<double> radius_km;  // fixed radius; cross-validated when absent
  std::vector<double> cv_radii{600.0, 800.0, 1000.0, 1200.0};
  int cv_folds = 5;
  EmOptions em;
  std::string output_dir = "experiment_out";

  void validate() const {
    if (grid.rows < 1 || grid.cols < 1 || !(grid.spacing_deg > 0.0)) throw ArgumentError("invalid grid");
    if (n_time < 4) throw ArgumentError("n_time must be at least 4");
    if (n_calib < 2 || n_calib >= n_time) throw ArgumentError("n_calib must lie in [2, n_time)");
    if (n_proxies < 1 || n_proxies > grid.rows * grid.cols)
      throw ArgumentError("n_proxies must lie in [1, number of grid points]");
    if (!(snr > 0.0)) throw ArgumentError("snr must be positive");
    if (!(truth_radius_km > 0.0) || !(truth_kappa > 0.0)) throw ArgumentError("truth radius and kappa must be positive");
    if (realizations < 1) throw ArgumentError("realizations must be at least 1");
    if (!run_graphem && !run_ttls) throw ArgumentError("no method selected");
    if (ttls_k < 1) throw ArgumentError("ttls_k must be at least 1");
    if (radius_km && !(*radius_km > 0.0)) throw ArgumentError("radius_km must be positive");
    if (!radius_km && run_graphem) {
      if (cv_radii.empty()) throw ArgumentError("cv_radii is empty and no fixed radius_km given");
      if (cv_folds < 2 || cv_folds > n_calib) throw ArgumentError("cv_folds must lie in [2, n_calib]");
    }
    em.validate();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline double parse_real(const std::string& key, const std::string& v) {
  std::string lower = v;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char ch) { return std::tolower(ch); });
  if (lower == "inf" || lower == "infinity") return std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw ParseError("config key '" + key + "': '" + v + "' is not a number");
  }
  if (used != v.size()) throw ParseError("config key '" + key + "': '" + v + "' is not a number");
  return out;
}

inline long long parse_integer(const std::string& key, const std::string& v) {
  const double d = parse_real(key, v);
  if (!std::isfinite(d) || d != std::floor(d)) throw ParseError("config key '" + key + "': '" + v + "' is not an integer");
  return static_cast<long long>(d);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ParseError("config key '" + key + "': '" + v + "' is not a boolean");
}

}  // namespace detail

/// Reads `key = value` lines; '#' starts a comment. Unknown keys are errors.
inline ExperimentConfig parse_experiment_config(std::istream& in) {
  ExperimentConfig c;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq)), v = detail::trim(line.substr(eq + 1));
    using namespace detail;
    if (key == "grid_rows") c.grid.rows = parse_integer(key, v);
    else if (key == "grid_cols") c.grid.cols = parse_integer(key, v);
    else if (key == "lat0") c.grid.lat0 = parse_real(key, v);
    else if (key == "lon0") c.grid.lon0 = parse_real(key, v);
    else if (key == "spacing_deg") c.grid.spacing_deg = parse_real(key, v);
    else if (key == "n_time") c.n_time = parse_integer(key, v);
    else if (key == "n_calib") c.n_calib = parse_integer(key, v);
    else if (key == "n_proxies") c.n_proxies = parse_integer(key, v);
    else if (key == "snr") c.snr = parse_real(key, v);
    else if (key == "truth_radius_km") c.truth_radius_km = parse_real(key, v);
    else if (key == "truth_kappa") c.truth_kappa = parse_real(key, v);
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_integer(key, v));
    else if (key == "realizations") c.realizations = static_cast<int>(parse_integer(key, v));
    else if (key == "methods") {
      c.run_graphem = c.run_ttls = false;
      std::stringstream ss(v);
      for (std::string m; std::getline(ss, m, ',');) {
        m = trim(m);
        if (m == "graphem") c.run_graphem = true;
        else if (m == "ttls") c.run_ttls = true;
        else throw ParseError("config key 'methods': unknown method '" + m + "'");
      }
    } else if (key == "ttls_k") c.ttls_k = static_cast<int>(parse_integer(key, v));
    else if (key == "variant") c.variant = parse_variant(v);
    else if (key == "radius_km") c.radius_km = parse_real(key, v);
    else if (key == "cv_radii") {
      c.cv_radii.clear();
      std::stringstream ss(v);
      for (std::string r; std::getline(ss, r, ',');) c.cv_radii.push_back(parse_real(key, trim(r)));
    } else if (key == "cv_folds") c.cv_folds = static_cast<int>(parse_integer(key, v));
    else if (key == "em_max_iter") c.em.max_iter = static_cast<int>(parse_integer(key, v));
    else if (key == "em_rel_tol") c.em.rel_tol = parse_real(key, v);
    else if (key == "output_dir") c.output_dir = v;
    else throw ParseError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

/// Everything about a pseudoproxy experiment that does not depend on the
/// noise realization. Columns of the data matrix are the temperature grid
/// followed by the proxies; the calibration period is the last n_calib rows.
struct ExperimentSetup {
  FieldGeometry t_geom;
  FieldGeometry geom;
  Matrix truth;  // n x p_T
  std::vector<LatLon> sites;
  RowRange calibration;
  RowRange validation;
};

inline ExperimentSetup make_setup(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentSetup s;
  s.t_geom = make_grid(cfg.grid);
  const auto model = neighborhood_gmrf(s.t_geom, cfg.truth_radius_km, cfg.truth_kappa);
  s.truth = generate_field(s.t_geom, model, cfg.n_time, derive_seed(cfg.seed, 0));

  std::vector<Index> order(static_cast<std::size_t>(s.t_geom.size()));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(derive_seed(cfg.seed, 1));
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(cfg.n_proxies));
  std::sort(order.begin(), order.end());

  s.geom = s.t_geom;
  for (std::size_t q = 0; q < order.size(); ++q) {
    const auto u = static_cast<std::size_t>(order[q]);
    s.sites.push_back({s.t_geom.lat[u], s.t_geom.lon[u]});
    s.geom.add("P" + std::to_string(q), ColumnKind::proxy, s.t_geom.lat[u], s.t_geom.lon[u]);
  }
  s.calibration = {cfg.n_time - cfg.n_calib, cfg.n_time};
  s.validation = {0, cfg.n_time - cfg.n_calib};
  return s;
}

/// Seed of the proxy noise in realization r.
inline std::uint64_t realization_seed(const ExperimentConfig& cfg, int r) {
  return derive_seed(derive_seed(cfg.seed, 2), static_cast<std::uint64_t>(r));
}

/// Data matrix of realization r: temperatures withheld outside the
/// calibration period, proxies observed throughout.
inline DataMatrix realization_data(const ExperimentSetup& s, const ExperimentConfig& cfg, int r) {
  PseudoproxyConfig pc{cfg.snr, s.sites, s.calibration, realization_seed(cfg, r)};
  const auto proxies = make_pseudoproxies(s.truth, s.t_geom, pc);
  const Index n = s.truth.rows(), pt = s.truth.cols(), pp = proxies.values.cols();
  Matrix values(n, pt + pp);
  values << s.truth, proxies.values;
  Mask mask = Mask::Constant(n, pt + pp, true);
  for (Index i = s.validation.begin; i < s.validation.end; ++i) mask.row(i).head(pt).setConstant(false);
  return DataMatrix(std::move(values), std::move(mask));
}

/// Scores of one method in one realization.
struct MethodOutcome {
  bool ok = false;
  std::string error;
  MetricReport metrics;
  Matrix reconstruction;  // n x p_T
  int iterations = 0;
  bool converged = false;
  std::vector<double> objective_trace;
};

struct RealizationOutcome {
  MethodOutcome graphem;
  MethodOutcome ttls;
};

struct ExperimentResult {
  ExperimentSetup setup;
  double radius_km = 0.0;
  std::optional<CvResult> cv;
  Graph graph;
  std::vector<RealizationOutcome> realizations;
};

/// Generates the truth, selects the GraphEM neighbourhood radius by
/// cross-validation on realization 0 (unless fixed), then reconstructs every
/// realization with each enabled method and scores the temperature block over
/// the validation period.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, unsigned jobs = 1) {
  ExperimentResult out;
  out.setup = make_setup(cfg);
  const auto& s = out.setup;
  const Index pt = s.truth.cols();

  if (cfg.run_graphem) {
    if (cfg.radius_km) {
      out.radius_km = *cfg.radius_km;
    } else {
      std::vector<CvCandidate> cands;
      for (double r : cfg.cv_radii) cands.emplace_back(NeighborhoodSpec{r, cfg.variant});
      CvOptions cv{cfg.cv_folds, s.calibration, cfg.em, jobs};
      out.cv = crossval_select(realization_data(s, cfg, 0), s.geom, cands, cv);
      out.radius_km = cfg.cv_radii[out.cv->best];
    }
    out.graph = neighborhood_graph(s.geom, NeighborhoodSpec{out.radius_km, cfg.variant});
  }

  out.realizations.resize(static_cast<std::size_t>(cfg.realizations));
  parallel_for(out.realizations.size(), jobs, [&](std::size_t r) {
    const auto x = realization_data(s, cfg, static_cast<int>(r));
    auto run = [&](MethodOutcome& m, const MethodSpec& spec) {
      try {
        const auto res = reconstruct(x, spec, cfg.em);
        m.reconstruction = res.completed.leftCols(pt);
        m.iterations = res.iterations;
        m.converged = res.converged;
        m.objective_trace = res.objective_trace;
        m.ok = true;
      } catch (const std::exception& e) {
        m.error = e.what();
      }
    };
    auto& o = out.realizations[r];
    if (cfg.run_graphem) run(o.graphem, MethodSpec{Method::graphem, out.graph, cfg.ttls_k});
    if (cfg.run_ttls) run(o.ttls, MethodSpec{Method::ttls, Graph{}, cfg.ttls_k});
    if (o.ttls.ok) o.ttls.metrics = compute_metrics(s.truth, o.ttls.reconstruction, s.calibration, s.validation);
    if (o.graphem.ok)
      o.graphem.metrics = compute_metrics(s.truth, o.graphem.reconstruction, s.calibration, s.validation,
                                          o.ttls.ok ? &o.ttls.reconstruction : nullptr);
  });
  return out;
}

/// Mean and standard deviation over successful realizations of each spatial
/// summary, for one method.
struct MethodSummary {
  Index successes = 0;
  MeanSd mse, re, ce, bias, rel_mse_diff;
};

inline MethodSummary summarize(const std::vector<RealizationOutcome>& rs, bool graphem_method) {
  std::vector<double> mse, re, ce, bias, rel;
  MethodSummary out;
  for (const auto& r : rs) {
    const auto& m = graphem_method ? r.graphem : r.ttls;
    if (!m.ok) continue;
    ++out.successes;
    mse.push_back(m.metrics.mse_summary.mean);
    re.push_back(m.metrics.re_summary.mean);
    ce.push_back(m.metrics.ce_summary.mean);
    bias.push_back(m.metrics.bias_summary.mean);
    rel.push_back(m.metrics.rel_summary.mean);
  }
  out.mse = mean_sd(mse);
  out.re = mean_sd(re);
  out.ce = mean_sd(ce);
  out.bias = mean_sd(bias);
  out.rel_mse_diff = mean_sd(rel);
  return out;
}

}  // namespace graphem
