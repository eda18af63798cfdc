#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>

#include "graphem/data.hpp"
#include "graphem/em.hpp"
#include "graphem/error.hpp"
#include "graphem/linalg.hpp"
#include "graphem/parallel.hpp"
#include "graphem/random.hpp"

namespace graphem {

struct BootstrapConfig {
  int n_samples = 100;
  Index blocksize = 2;
  MethodSpec method;
  std::uint64_t seed = 0;
  double level = 0.95;
  EmOptions em;
  unsigned jobs = 1;

  void validate() const {
    if (n_samples < 2) throw ArgumentError("bootstrap needs at least 2 samples");
    if (blocksize < 1) throw ArgumentError("bootstrap blocksize must be at least 1");
    if (!(level > 0.0 && level < 1.0)) throw ArgumentError("interval level must lie in (0, 1)");
    em.validate();
  }
};

namespace detail {

/// ceil(len / b) blocks of b consecutive entries of `rows`, starts uniform on
/// [0, len - b], concatenated and cut back to len.
inline IndexList resample_blocks(const IndexList& rows, Index b, Rng& rng) {
  const auto len = static_cast<Index>(rows.size());
  if (len == 0) return {};
  std::uniform_int_distribution<Index> start(0, len - b);
  IndexList out;
  out.reserve(static_cast<std::size_t>(len + b));
  const Index blocks = (len + b - 1) / b;
  for (Index k = 0; k < blocks; ++k) {
    const Index s = start(rng);
    for (Index t = 0; t < b; ++t) out.push_back(rows[static_cast<std::size_t>(s + t)]);
  }
  out.resize(static_cast<std::size_t>(len));
  return out;
}

}  // namespace detail

/// Moving-block bootstrap of the rows of `x`, stratified into the instrumental
/// rows and the remaining rows. Each stratum keeps its positions in the output
/// and is refilled from its own rows; masks travel with their rows.
inline DataMatrix block_bootstrap_sample(const DataMatrix& x, RowRange instrumental, Index b, std::uint64_t seed) {
  if (!instrumental.within(x.rows())) throw ArgumentError("instrumental range lies outside the data");
  if (b < 1) throw ArgumentError("blocksize must be at least 1");
  IndexList inst, rest;
  for (Index i = 0; i < x.rows(); ++i) (instrumental.contains(i) ? inst : rest).push_back(i);
  for (const auto* s : {&inst, &rest})
    if (!s->empty() && static_cast<Index>(s->size()) < b)
      throw ArgumentError("blocksize " + std::to_string(b) + " exceeds a stratum of " + std::to_string(s->size()) +
                          " rows");

  Rng rng(seed);
  const IndexList inst_draw = detail::resample_blocks(inst, b, rng);
  const IndexList rest_draw = detail::resample_blocks(rest, b, rng);
  IndexList source(static_cast<std::size_t>(x.rows()));
  for (std::size_t k = 0; k < inst.size(); ++k) source[static_cast<std::size_t>(inst[k])] = inst_draw[k];
  for (std::size_t k = 0; k < rest.size(); ++k) source[static_cast<std::size_t>(rest[k])] = rest_draw[k];
  return DataMatrix(x.values()(source, Eigen::all), x.mask()(source, Eigen::all));
}

/// Square root factor F with F F^T = c for a positive semidefinite c.
inline Matrix psd_factor(const Matrix& c) {
  if (c.size() == 0) return c;
  if (auto llt = try_cholesky(c)) return llt->matrixL();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(c);
  if (eig.info() != Eigen::Success) throw NumericalError("conditional covariance eigendecomposition failed");
  return eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

/// Adds one draw of N(0, S_mm - S_ma S_aa^{-1} S_am) to the missing entries of
/// every row of `completed`, rows in index order.
inline void add_conditional_noise(Matrix& completed, const Mask& mask, const Vector& mu, const Matrix& sigma, Rng& rng) {
  const auto patterns = group_patterns(mask);
  std::vector<Matrix> factor(patterns.size());
  std::vector<std::size_t> row_pat(static_cast<std::size_t>(mask.rows()));
  for (std::size_t q = 0; q < patterns.size(); ++q) {
    for (Index r : patterns[q].rows) row_pat[static_cast<std::size_t>(r)] = q;
    if (patterns[q].missing.empty()) continue;
    ConditionalRegression reg(mu, sigma, patterns[q].available, patterns[q].missing);
    factor[q] = psd_factor(reg.residual_cov());
  }
  for (Index i = 0; i < mask.rows(); ++i) {
    const auto q = row_pat[static_cast<std::size_t>(i)];
    const auto& miss = patterns[q].missing;
    if (miss.empty()) continue;
    const Vector z = standard_normal(static_cast<Index>(miss.size()), 1, rng);
    const Vector e = factor[q] * z;
    for (std::size_t t = 0; t < miss.size(); ++t) completed(i, miss[t]) += e(static_cast<Index>(t));
  }
}

struct BootstrapEnsemble {
  std::vector<Matrix> members;      // successful members in member order
  std::vector<int> member_ids;      // index i of each retained member
  std::vector<std::string> failures;
};

/// Bootstrap ensemble of completed data matrices. Member i resamples `x` with
/// seed derive_seed(seed, i), refits the method to the resample, fills the
/// missing entries of `target` (default: `x`) by the regression step under the
/// refitted (mu, Sigma), and adds conditional Gaussian noise under the same
/// parameters. Failed members are skipped; fewer than 0.8 N successes is an
/// error.
inline BootstrapEnsemble bootstrap_ensemble(const DataMatrix& x, RowRange instrumental, const BootstrapConfig& cfg,
                                            const DataMatrix* target = nullptr) {
  cfg.validate();
  const DataMatrix& tgt = target ? *target : x;
  if (tgt.rows() != x.rows() || tgt.cols() != x.cols()) throw ValidationError("bootstrap target shape differs from data");
  if (instrumental.size() < cfg.blocksize)
    throw ArgumentError("blocksize exceeds the number of instrumental rows");

  const auto n = static_cast<std::size_t>(cfg.n_samples);
  std::vector<Matrix> members(n);
  std::vector<std::string> errors(n);
  parallel_for(n, cfg.jobs, [&](std::size_t i) {
    const auto seed = derive_seed(cfg.seed, i);
    try {
      const auto sample = block_bootstrap_sample(x, instrumental, cfg.blocksize, derive_seed(seed, 0));
      const auto fit = reconstruct(sample, cfg.method, cfg.em);
      Matrix filled = regression_step(tgt, fit.mu_hat, fit.sigma_hat, cfg.method);
      if (tgt.total_missing() > 0) {
        Rng rng(derive_seed(seed, 1));
        add_conditional_noise(filled, tgt.mask(), fit.mu_hat, fit.sigma_hat, rng);
      }
      members[i] = std::move(filled);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });

  BootstrapEnsemble out;
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i].empty()) {
      out.members.push_back(std::move(members[i]));
      out.member_ids.push_back(static_cast<int>(i));
    } else {
      out.failures.push_back("member " + std::to_string(i) + ": " + errors[i]);
    }
  }
  if (static_cast<double>(out.members.size()) < 0.8 * static_cast<double>(n))
    throw NumericalError("bootstrap ensemble: only " + std::to_string(out.members.size()) + " of " + std::to_string(n) +
                         " members succeeded" + (out.failures.empty() ? "" : " (first failure: " + out.failures.front() + ")"));
  return out;
}

struct IntervalBands {
  Vector lower, upper, median;
  double level = 0.0;
  double mean_width = 0.0;
};

/// Quantile q of sorted values, linear interpolation between order statistics
/// at position (n - 1) q.
inline double sorted_quantile(const std::vector<double>& sorted, double q) {
  const double h = static_cast<double>(sorted.size() - 1) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

/// Percentile band at the given level for every time step of an ensemble of series.
inline IntervalBands prediction_interval(const std::vector<Vector>& ensemble, double level) {
  if (ensemble.size() < 2) throw ArgumentError("prediction_interval: need at least two ensemble members");
  if (!(level > 0.0 && level < 1.0)) throw ArgumentError("prediction_interval: level must lie in (0, 1)");
  const Index len = ensemble.front().size();
  for (const auto& m : ensemble)
    if (m.size() != len) throw ValidationError("prediction_interval: ensemble members differ in length");
  IntervalBands b;
  b.level = level;
  b.lower.resize(len);
  b.upper.resize(len);
  b.median.resize(len);
  const double tail = 0.5 * (1.0 - level);
  std::vector<double> v(ensemble.size());
  for (Index t = 0; t < len; ++t) {
    for (std::size_t k = 0; k < ensemble.size(); ++k) v[k] = ensemble[k](t);
    std::sort(v.begin(), v.end());
    b.lower(t) = sorted_quantile(v, tail);
    b.upper(t) = sorted_quantile(v, 1.0 - tail);
    b.median(t) = sorted_quantile(v, 0.5);
  }
  b.mean_width = len ? (b.upper - b.lower).mean() : 0.0;
  return b;
}

/// Band widened by factor c about the median.
inline IntervalBands inflate(const IntervalBands& b, double c) {
  IntervalBands out = b;
  out.lower = b.median - c * (b.median - b.lower);
  out.upper = b.median + c * (b.upper - b.median);
  out.mean_width = c * b.mean_width;
  return out;
}

inline double coverage(const IntervalBands& b, const Vector& target, RowRange reference) {
  if (target.size() != b.lower.size()) throw ValidationError("coverage: target and band lengths differ");
  if (!reference.within(target.size()) || reference.size() < 1)
    throw ArgumentError("coverage: reference range must be non-empty and inside the series");
  Index inside = 0;
  for (Index t = reference.begin; t < reference.end; ++t)
    if (target(t) >= b.lower(t) && target(t) <= b.upper(t)) ++inside;
  return static_cast<double>(inside) / static_cast<double>(reference.size());
}

struct InflationResult {
  double coverage = 0.0;   // of the uninflated band
  double inflation = 1.0;  // smallest factor reaching the target, to 1e-3
  /// Every (factor, coverage) pair evaluated during the search, in order.
  std::vector<std::pair<double, double>> path;
};

inline InflationResult coverage_and_inflation(const IntervalBands& bands, const Vector& target, RowRange reference,
                                              double target_coverage) {
  if (!(target_coverage > 0.0 && target_coverage <= 1.0))
    throw ArgumentError("target coverage must lie in (0, 1]");
  InflationResult out;
  auto eval = [&](double c) {
    const double cov = coverage(inflate(bands, c), target, reference);
    out.path.emplace_back(c, cov);
    return cov;
  };
  out.coverage = eval(1.0);
  if (out.coverage >= target_coverage) return out;
  constexpr double c_max = 100.0;
  if (const double top = eval(c_max); top < target_coverage)
    throw NumericalError("coverage " + std::to_string(target_coverage) + " unattainable; inflating by " +
                         std::to_string(c_max) + " reaches only " + std::to_string(top));
  double lo = 1.0, hi = c_max;
  while (hi - lo > 1e-3) {
    const double mid = 0.5 * (lo + hi);
    (eval(mid) >= target_coverage ? hi : lo) = mid;
  }
  out.inflation = hi;
  return out;
}

/// Centered moving average of width w (odd widths are symmetric); the window
/// is truncated at the ends. Display only.
inline Vector moving_average(const Vector& series, Index w) {
  if (w < 1) throw ArgumentError("smoothing window must be at least 1");
  const Index n = series.size(), half_lo = (w - 1) / 2, half_hi = w / 2;
  Vector out(n);
  for (Index t = 0; t < n; ++t) {
    const Index a = std::max<Index>(0, t - half_lo), b = std::min<Index>(n - 1, t + half_hi);
    out(t) = series.segment(a, b - a + 1).mean();
  }
  return out;
}

}  // namespace graphem
