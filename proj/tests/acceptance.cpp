// Acceptance run: one PASS/FAIL line per criterion. With arguments, only the
// listed criteria run (e.g. `acceptance 1 2 7`).
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "graphem/graphem.hpp"
#include "support.hpp"

using namespace graphem;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Maximum cardinality search followed by the perfect elimination check.
bool is_chordal(const Graph& g) {
  const Index p = g.size();
  std::vector<Index> weight(static_cast<std::size_t>(p), 0), order;
  std::vector<bool> done(static_cast<std::size_t>(p), false);
  std::vector<Index> position(static_cast<std::size_t>(p), -1);
  for (Index step = 0; step < p; ++step) {
    Index best = -1;
    for (Index v = 0; v < p; ++v)
      if (!done[static_cast<std::size_t>(v)] && (best < 0 || weight[static_cast<std::size_t>(v)] > weight[static_cast<std::size_t>(best)]))
        best = v;
    done[static_cast<std::size_t>(best)] = true;
    position[static_cast<std::size_t>(best)] = step;
    order.push_back(best);
    for (Index u : g.neighbors(best))
      if (!done[static_cast<std::size_t>(u)]) ++weight[static_cast<std::size_t>(u)];
  }
  // In MCS order, the earlier neighbours of every vertex must form a clique.
  for (Index v : order) {
    IndexList earlier;
    for (Index u : g.neighbors(v))
      if (position[static_cast<std::size_t>(u)] < position[static_cast<std::size_t>(v)]) earlier.push_back(u);
    for (std::size_t a = 0; a < earlier.size(); ++a)
      for (std::size_t b = a + 1; b < earlier.size(); ++b)
        if (!g.has_edge(earlier[a], earlier[b])) return false;
  }
  return true;
}

bool non_decreasing(const std::vector<double>& trace, double slack = 1e-8) {
  return oracle::non_decreasing(trace, slack);
}

// ---------------------------------------------------------------------------

Verdict criterion1() {
  std::mt19937_64 rng(derive_seed(101, 0));
  double worst_closed = 0.0, worst_kkt = 0.0, worst_zero = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const Index p = 2 + static_cast<Index>(rep % 7);
    const auto d = oracle::random_decomposable(p, rng);
    const Matrix s = oracle::random_spd(p, rng);
    const auto est = graphical_mle(s, d.graph, {1e-10, 5000});
    const Matrix omega = oracle::decomposable_mle_precision(s, d);
    worst_closed = std::max(worst_closed, (est.omega - omega).cwiseAbs().maxCoeff());
    worst_closed = std::max(worst_closed, (est.sigma - omega.inverse()).cwiseAbs().maxCoeff());
  }
  int made = 0, rejected = 0;
  while (made < 200) {
    const Index p = 4 + static_cast<Index>(made % 9);
    const Graph g = oracle::random_graph(p, 0.4, rng);
    if (is_chordal(g)) {
      ++rejected;
      continue;
    }
    ++made;
    const Matrix s = oracle::random_spd(p, rng);
    const auto est = graphical_mle(s, g);
    const Matrix sigma = est.omega.inverse();
    for (Index j = 0; j < p; ++j)
      for (Index i = 0; i < p; ++i) {
        if (i == j || g.has_edge(i, j)) worst_kkt = std::max(worst_kkt, std::abs(sigma(i, j) - s(i, j)));
        else worst_zero = std::max(worst_zero, std::abs(est.omega(i, j)));
      }
  }
  const bool ok = worst_closed <= 1e-6 && worst_kkt <= 1e-6 && worst_zero == 0.0;
  return {ok, "closed-form max err " + fmt(worst_closed) + " over 200 decomposable; moment gap " + fmt(worst_kkt) +
                  ", off-graph max |omega| " + fmt(worst_zero) + " over 200 non-chordal (" + std::to_string(rejected) +
                  " chordal draws skipped)"};
}

Verdict criterion2() {
  std::mt19937_64 rng(derive_seed(102, 0));
  std::uniform_real_distribution<double> frac(0.02, 0.95);
  double worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const Index p = 2 + static_cast<Index>(rep % 19);
    const Matrix s = oracle::random_spd(p, rng);
    const double rho = frac(rng) * rho_max(s);
    const auto est = glasso_solve(s, rho);
    const Matrix sigma = est.omega.inverse();
    for (Index j = 0; j < p; ++j)
      for (Index i = 0; i < p; ++i) {
        const double gap = sigma(i, j) - s(i, j), w = est.omega(i, j);
        const double v = w != 0.0 ? std::abs(gap - rho * (w > 0.0 ? 1.0 : -1.0)) : std::max(0.0, std::abs(gap) - rho);
        worst = std::max(worst, v);
      }
  }
  int exact = 0, tried = 0;
  for (int rep = 0; rep < 50; ++rep) {
    const Index p = 2 + static_cast<Index>(rep % 19);
    const Matrix s = oracle::random_spd(p, rng);
    const double rho = rho_max(s) * (rep % 2 == 0 ? 1.0 : 1.0 + frac(rng));
    const auto est = glasso_solve(s, rho);
    ++tried;
    bool same = true;
    for (Index j = 0; j < p; ++j)
      for (Index i = 0; i < p; ++i)
        same = same && est.sigma(i, j) == (i == j ? s(i, i) + rho : 0.0) && (i == j || est.omega(i, j) == 0.0);
    exact += same;
  }
  return {worst <= 1e-4 && exact == tried, "max subgradient violation " + fmt(worst) + " over 100; diagonal exact in " +
                                               std::to_string(exact) + "/" + std::to_string(tried) + " at rho >= rho_max"};
}

// Criterion 4 and what depends on it.
struct Experiment4 {
  ExperimentConfig cfg;
  ExperimentResult result;
  double seconds = 0.0;
};

const Experiment4& experiment4() {
  static std::optional<Experiment4> e;
  if (!e) {
    e.emplace();
    const auto t0 = std::chrono::steady_clock::now();
    e->result = run_experiment(e->cfg);
    e->seconds = seconds_since(t0);
  }
  return *e;
}

Verdict criterion4() {
  const auto& e = experiment4();
  const auto& rs = e.result.realizations;
  int better = 0, failed = 0, iters = 0;
  for (const auto& r : rs) {
    if (!r.graphem.ok || !r.ttls.ok) {
      ++failed;
      continue;
    }
    iters += r.graphem.iterations;
    better += r.graphem.metrics.mse_summary.mean < r.ttls.metrics.mse_summary.mean;
  }
  const auto g = summarize(rs, true), t = summarize(rs, false);
  const double need = 0.9 * static_cast<double>(rs.size());
  const bool a = static_cast<double>(better) >= need;
  const bool b = g.re.mean > 0.0 && g.ce.mean > 0.0;
  const bool c = g.ce.sd < t.ce.sd;
  const bool fast = e.seconds < 600.0;
  std::ostringstream os;
  os << "CV radius " << e.result.radius_km << " km; GraphEM better in " << better << "/" << rs.size()
     << " (spatial-mean MSE " << fmt(g.mse.mean) << " vs " << fmt(t.mse.mean) << "); GraphEM RE " << fmt(g.re.mean)
     << " CE " << fmt(g.ce.mean) << "; CE sd " << fmt(g.ce.sd) << " vs " << fmt(t.ce.sd) << "; failures " << failed
     << "; mean EM iterations " << fmt(static_cast<double>(iters) / std::max<double>(1.0, static_cast<double>(rs.size() - failed)))
     << "; " << fmt(e.seconds) << " s (limit 600)";
  return {a && b && c && fast && failed == 0, os.str()};
}

Verdict criterion3() {
  const auto& e = experiment4();
  int checked = 0, bad = 0;
  for (const auto& r : e.result.realizations) {
    if (!r.graphem.ok) continue;
    ++checked;
    bad += !non_decreasing(r.graphem.objective_trace);
  }
  // Further fits with varied sizes, graphs and missingness.
  std::mt19937_64 rng(derive_seed(103, 0));
  std::bernoulli_distribution drop(0.4);
  for (int rep = 0; rep < 40; ++rep) {
    const Index p = 4 + static_cast<Index>(rep % 12);
    const Matrix sigma = oracle::random_spd(p, rng);
    const Matrix l = Eigen::LLT<Matrix>(sigma).matrixL();
    Rng draw(derive_seed(103, static_cast<std::uint64_t>(rep) + 1));
    Matrix v = standard_normal(25 + 4 * rep, p, draw) * l.transpose();
    for (Index i = 0; i < v.rows(); ++i)
      for (Index j = 1; j < p; ++j)
        if (drop(rng)) v(i, j) = std::numeric_limits<double>::quiet_NaN();
    const auto res = graphem::graphem(DataMatrix::from_nan(v), oracle::random_graph(p, 0.3, rng));
    ++checked;
    bad += !non_decreasing(res.objective_trace);
  }
  return {bad == 0, std::to_string(checked - bad) + "/" + std::to_string(checked) +
                        " GraphEM objective traces non-decreasing (relative slack 1e-8)"};
}

Verdict criterion5() {
  constexpr double r_star = 800.0;
  int hits = 0;
  std::ostringstream picks;
  const auto t0 = std::chrono::steady_clock::now();
  for (int rep = 0; rep < 10; ++rep) {
    ExperimentConfig cfg;
    cfg.grid.rows = cfg.grid.cols = 12;
    cfg.n_proxies = 16;
    cfg.truth_radius_km = r_star;
    cfg.seed = derive_seed(2024, static_cast<std::uint64_t>(rep));
    const auto s = make_setup(cfg);
    const auto x = realization_data(s, cfg, 0);
    const std::vector<CvCandidate> cands{NeighborhoodSpec{0.5 * r_star}, NeighborhoodSpec{r_star},
                                         NeighborhoodSpec{2.0 * r_star}};
    const auto res = crossval_select(x, s.geom, cands, CvOptions{5, s.calibration, {}, 1});
    const double picked = std::get<NeighborhoodSpec>(cands[res.best]).radius_km;
    picks << (rep ? "," : "") << picked;
    hits += picked == r_star;
  }
  const double secs = seconds_since(t0);
  return {hits >= 7 && secs < 300.0, "picked R*=800 in " + std::to_string(hits) + "/10 (choices " + picks.str() + "); " +
                                         fmt(secs) + " s (limit 300)"};
}

Verdict criterion6() {
  const auto& e = experiment4();
  const auto& s = e.result.setup;
  const auto x = realization_data(s, e.cfg, 0);
  const Index pt = s.truth.cols();
  Mask all_t = x.mask();
  all_t.leftCols(pt).setConstant(false);
  const DataMatrix target(x.values(), all_t);
  const Vector truth = spatial_average(s.truth, s.t_geom);

  const auto t0 = std::chrono::steady_clock::now();
  double cov_sum = 0.0;
  bool finite = true, monotone = true;
  std::ostringstream per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    BootstrapConfig bc;
    bc.n_samples = 100;
    bc.blocksize = 2;
    bc.method = MethodSpec{Method::graphem, e.result.graph, 5};
    bc.seed = seed;
    const auto ens = bootstrap_ensemble(x, s.calibration, bc, &target);
    std::vector<Vector> series;
    for (const auto& m : ens.members) series.push_back(spatial_average(m.leftCols(pt), s.t_geom));
    const auto bands = prediction_interval(series, 0.95);
    const double cov = coverage(bands, truth, s.validation);
    cov_sum += cov;
    double factor = std::numeric_limits<double>::infinity();
    try {
      const auto inf = coverage_and_inflation(bands, truth, s.calibration, 0.95);
      factor = inf.inflation;
      auto path = inf.path;
      std::sort(path.begin(), path.end());
      for (std::size_t k = 1; k < path.size(); ++k) monotone = monotone && path[k].second >= path[k - 1].second;
    } catch (const NumericalError&) {
    }
    finite = finite && std::isfinite(factor);
    per_seed << (seed > 1 ? ", " : "") << fmt(cov, 3) << "/x" << fmt(factor, 3) << "/" << ens.members.size();
  }
  const double secs = seconds_since(t0);
  const double mean_cov = cov_sum / 5.0;
  const bool ok = mean_cov >= 0.88 && mean_cov <= 0.98 && finite && monotone && secs < 900.0;
  return {ok, "mean validation coverage " + fmt(mean_cov) + " (per seed coverage/inflation/members: " + per_seed.str() +
                  "); path monotone " + (monotone ? "yes" : "no") + "; " + fmt(secs) + " s (limit 900)"};
}

Verdict criterion7() {
  const auto geom = make_grid({24, 72, -57.5, -180.0, 5.0});
  std::vector<double> deg;
  for (double r : {600.0, 800.0, 1000.0, 1200.0}) {
    const auto g = neighborhood_graph(geom, {r});
    deg.push_back(2.0 * static_cast<double>(g.edge_count()) / static_cast<double>(g.size()));
  }
  const bool band = std::abs(deg[1] - 8.42) <= 1.0;
  const bool strict = deg[0] < deg[1] && deg[1] < deg[2] && deg[2] < deg[3];
  const auto full = make_grid({36, 72, -87.5, -180.0, 5.0});
  const auto gf = neighborhood_graph(full, {800.0});
  const double full_deg = 2.0 * static_cast<double>(gf.edge_count()) / static_cast<double>(gf.size());
  return {band && strict, "|lat| < 60 grid: mean TT degree " + fmt(deg[0]) + " < " + fmt(deg[1]) + " < " + fmt(deg[2]) +
                              " < " + fmt(deg[3]) + " at 600/800/1000/1200 km (pole-to-pole grid at 800 km: " +
                              fmt(full_deg) + ")"};
}

Verdict criterion8() {
  std::mt19937_64 rng(derive_seed(108, 0));
  std::uniform_real_distribution<double> weight(0.05, 0.45);
  std::bernoulli_distribution observed(0.35);
  double worst = 0.0;
  int pairs = 0;
  for (int rep = 0; rep < 200; ++rep) {
    const Index p = 4 + static_cast<Index>(rep % 13);
    Matrix omega = Matrix::Identity(p, p);
    for (Index i = 0; i + 1 < p; ++i) omega(i, i + 1) = omega(i + 1, i) = -weight(rng);
    const Matrix sigma = omega.inverse();
    Eigen::Matrix<bool, Eigen::Dynamic, 1> obs(p);
    Vector x(p), mu = Vector::Zero(p);
    for (Index j = 0; j < p; ++j) {
      obs(j) = observed(rng);
      x(j) = obs(j) ? std::normal_distribution<double>()(rng) : std::numeric_limits<double>::quiet_NaN();
    }
    const auto r = estep_impute_row(x, obs, mu, sigma);
    for (Index j = 0; j < p; ++j)
      for (Index k = j + 2; k < p; ++k) {
        if (obs(j) || obs(k)) continue;
        bool separated = false;
        for (Index m = j + 1; m < k; ++m) separated = separated || obs(m);
        if (!separated) continue;
        ++pairs;
        worst = std::max(worst, std::abs(r.residual_cov(j, k)));
      }
  }
  return {pairs > 0 && worst <= 1e-8,
          "max |residual cov| " + fmt(worst) + " over " + std::to_string(pairs) + " separated missing pairs on 200 chains"};
}

// Criterion 9: every subcommand twice into the same directory.
using Snapshot = std::map<std::string, std::string>;

Snapshot snapshot(const fs::path& dir) {
  Snapshot out;
  if (!fs::exists(dir)) return out;
  for (const auto& f : fs::recursive_directory_iterator(dir)) {
    if (!f.is_regular_file()) continue;
    std::ifstream in(f.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    out[fs::relative(f.path(), dir).string()] = ss.str();
  }
  return out;
}

Verdict criterion9() {
  const fs::path root = fs::temp_directory_path() / ("graphem_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  {
    std::ofstream cfg(root / "small.cfg");
    cfg << "grid_rows = 6\ngrid_cols = 6\nn_time = 80\nn_calib = 20\nn_proxies = 6\nsnr = 0.5\n"
           "realizations = 2\ncv_radii = 600, 1200\ncv_folds = 3\nttls_k = 3\n";
  }
  const std::string cli = GRAPHEM_CLI_PATH;
  const std::string r = root.string();
  const std::string sim = r + "/sim", data = sim + "/data.csv", geom = sim + "/geometry.json", truth = sim + "/truth.csv";
  const std::vector<std::pair<std::string, std::string>> runs{
      {"simulate", "simulate --config " + r + "/small.cfg --seed 11 --out " + sim},
      {"graph", "graph --geometry " + geom + " --radius-km 800 --out " + r + "/graph"},
      {"graph l1", "graph --geometry " + geom + " --data " + data +
                       " --method l1 --target-sparsity 0.3 --sparsity-tolerance 0.05 --out " + r + "/graph_l1"},
      {"reconstruct graphem", "reconstruct --data " + data + " --geometry " + geom + " --graph " + r +
                                  "/graph/graph.json --smooth 5 --out " + r + "/rec_g"},
      {"reconstruct ttls", "reconstruct --data " + data + " --geometry " + geom + " --method ttls --k 3 --out " + r + "/rec_t"},
      {"cv", "cv --data " + data + " --geometry " + geom + " --radii 600 1200 --sparsity 0.3 --folds 3 --out " + r + "/cv"},
      {"experiment", "experiment --config " + r + "/small.cfg --seed 5 --out " + r + "/exp"},
      {"bootstrap", "bootstrap --data " + data + " --geometry " + geom + " --radius-km 800 --samples 12 --truth " + truth +
                        " --inflate-to 0.8 --out " + r + "/boot"},
      {"metrics", "metrics --truth " + truth + " --reconstruction " + r + "/rec_g/reconstruction.csv --baseline " + r +
                      "/rec_t/reconstruction.csv --geometry " + geom + " --calibration 60:80 --out " + r + "/metrics"},
  };
  std::vector<std::string> failures;
  std::size_t files = 0;
  for (const auto& [label, args] : runs) {
    const std::string out_dir = args.substr(args.rfind("--out ") + 6);
    const std::string cmd = cli + " " + args + " > " + r + "/log.txt 2>&1";
    const int first = std::system(cmd.c_str());
    const auto a = snapshot(out_dir);
    const int second = std::system(cmd.c_str());
    const auto b = snapshot(out_dir);
    if (first != 0 || second != 0) {
      std::ifstream log(r + "/log.txt");
      std::string line;
      std::getline(log, line);
      failures.push_back(label + " exited " + std::to_string(first) + "/" + std::to_string(second) + ": " + line);
    } else if (a.empty() || a != b) {
      failures.push_back(label + " outputs differ");
    }
    files += a.size();
  }
  fs::remove_all(root);
  std::string detail = std::to_string(runs.size() - failures.size()) + "/" + std::to_string(runs.size()) +
                       " commands byte-identical on rerun (" + std::to_string(files) + " files)";
  for (const auto& f : failures) detail += "; " + f;
  return {failures.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<int, std::function<Verdict()>>> all{
      {1, criterion1}, {2, criterion2}, {3, criterion3}, {4, criterion4}, {5, criterion5},
      {6, criterion6}, {7, criterion7}, {8, criterion8}, {9, criterion9}};
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  std::map<int, std::pair<Verdict, double>> results;
  for (const auto& [id, fn] : all) {
    if (!wanted.empty() && !wanted.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    if (id == 1 && secs >= 30.0) v = {false, v.detail + "; over the 30 s limit"};
    if (id == 2 && secs >= 60.0) v = {false, v.detail + "; over the 60 s limit"};
    results[id] = {v, secs};
    std::cout << "criterion " << id << ": " << (v.pass ? "PASS" : "FAIL") << " (" << v.detail << ") [" << fmt(secs)
              << " s]" << std::endl;
  }
  int failed = 0;
  for (const auto& [id, r] : results) failed += !r.first.pass;
  std::cout << "summary: " << results.size() - static_cast<std::size_t>(failed) << "/" << results.size() << " criteria passed"
            << std::endl;
  return failed == 0 ? 0 : 1;
}
