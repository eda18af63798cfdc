#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include "graphem/data.hpp"
#include "graphem/error.hpp"
#include "graphem/gmrf.hpp"
#include "graphem/graph.hpp"
#include "graphem/linalg.hpp"

namespace graphem {

struct EmOptions {
  int max_iter = 200;
  /// Stop when ||X_miss(i+1) - X_miss(i)||_F / ||X_miss(i)||_F < rel_tol.
  double rel_tol = 1e-4;
  /// Graph-constrained M-step solver settings.
  GraphicalMleOptions mle{1e-6, 500, false, 1.7};

  void validate() const {
    if (max_iter < 1) throw ArgumentError("EM max_iter must be at least 1");
    if (!(rel_tol > 0.0)) throw ArgumentError("EM rel_tol must be positive");
  }
};

struct ReconstructionResult {
  Matrix completed;
  Vector mu_hat;
  Matrix sigma_hat;
  Matrix omega_hat;  // GraphEM only; exact zeros off `graph`
  Graph graph;       // GraphEM only; size 0 for the TTLS baseline
  /// Observed-data log-likelihood per row after each iteration.
  std::vector<double> objective_trace;
  /// log det(Omega) - tr(S Omega) of each graphical M-step against the
  /// expected sufficient statistics it was fitted to (GraphEM only).
  std::vector<double> mstep_trace;
  std::vector<double> change_trace;
  std::vector<int> mstep_sweeps;  // graphical MLE sweeps per iteration (GraphEM only)
  int iterations = 0;
  bool converged = false;
};

/// Rows sharing one missingness pattern.
struct MissingPattern {
  IndexList available;
  IndexList missing;
  IndexList rows;  // increasing
};

/// Groups rows by missingness pattern; patterns are ordered by first row.
inline std::vector<MissingPattern> group_patterns(const Mask& mask) {
  std::vector<MissingPattern> out;
  std::map<std::vector<bool>, std::size_t> index;
  std::vector<bool> key(static_cast<std::size_t>(mask.cols()));
  for (Index i = 0; i < mask.rows(); ++i) {
    for (Index j = 0; j < mask.cols(); ++j) key[static_cast<std::size_t>(j)] = mask(i, j);
    auto [it, fresh] = index.try_emplace(key, out.size());
    if (fresh) {
      MissingPattern pat;
      for (Index j = 0; j < mask.cols(); ++j) (mask(i, j) ? pat.available : pat.missing).push_back(j);
      out.push_back(std::move(pat));
    }
    out[it->second].rows.push_back(i);
  }
  return out;
}

/// Gaussian conditional-mean regression of the missing block on the
/// available block for one pattern:
///   x_m = mu_m + S_ma S_aa^{-1} (x_a - mu_a),   C_mm = S_mm - S_ma S_aa^{-1} S_am.
class ConditionalRegression {
 public:
  ConditionalRegression(const Vector& mu, const Matrix& sigma, IndexList avail, IndexList miss)
      : avail_(std::move(avail)), miss_(std::move(miss)), mu_a_(mu(avail_)), mu_m_(mu(miss_)) {
    if (!avail_.empty()) {
      auto chol = cholesky_with_jitter(sigma(avail_, avail_), "available-block covariance");
      chol_ = std::move(chol.llt);
      jitter_ = chol.jitter;
      log_det_aa_ = log_det(chol_);
    }
    sigma_ma_ = sigma(miss_, avail_);
    resid_ = sigma(miss_, miss_);
    if (!avail_.empty() && !miss_.empty()) {
      const Matrix solved = chol_.solve(sigma_ma_.transpose());  // S_aa^{-1} S_am
      resid_.noalias() -= sigma_ma_ * solved;
      resid_ = 0.5 * (resid_ + resid_.transpose());
    }
  }

  /// Fills the missing entries of `row` in place. Returns the row's
  /// contribution to the observed-data log-likelihood.
  double impute(Eigen::Ref<Vector> row) const {
    if (avail_.empty()) {
      row(miss_) = mu_m_;
      return 0.0;
    }
    const Vector centered = row(avail_) - mu_a_;
    const Vector z = chol_.solve(centered);
    if (!miss_.empty()) row(miss_) = mu_m_ + sigma_ma_ * z;
    const double a = static_cast<double>(avail_.size());
    return -0.5 * (a * std::log(2.0 * std::numbers::pi) + log_det_aa_ + centered.dot(z));
  }

  const Matrix& residual_cov() const noexcept { return resid_; }
  const IndexList& missing() const noexcept { return miss_; }
  double jitter() const noexcept { return jitter_; }

 private:
  IndexList avail_;
  IndexList miss_;
  Vector mu_a_, mu_m_;
  Eigen::LLT<Matrix> chol_;
  Matrix sigma_ma_;
  Matrix resid_;
  double jitter_ = 0.0;
  double log_det_aa_ = 0.0;
};

struct RowImputation {
  Vector row;
  Matrix residual_cov;  // p x p, zero outside the missing block
};

/// E-step for a single row: conditional mean of the missing entries given the
/// observed ones, and the conditional covariance of the missing block.
inline RowImputation estep_impute_row(const Vector& x, const Eigen::Matrix<bool, Eigen::Dynamic, 1>& observed,
                                      const Vector& mu, const Matrix& sigma) {
  const Index p = x.size();
  if (observed.size() != p || mu.size() != p || sigma.rows() != p || sigma.cols() != p)
    throw ValidationError("estep_impute_row: shape mismatch");
  IndexList avail, miss;
  for (Index j = 0; j < p; ++j) (observed(j) ? avail : miss).push_back(j);
  RowImputation out{x, Matrix::Zero(p, p)};
  try {
    ConditionalRegression reg(mu, sigma, avail, miss);
    reg.impute(out.row);
    out.residual_cov(miss, miss) = reg.residual_cov();
  } catch (const NumericalError& e) {
    throw NumericalError(std::string("estep_impute_row: ") + e.what());
  }
  return out;
}

namespace detail {

inline MeanCov combine_moments(const Matrix& completed, const Matrix& residual_sum) {
  MeanCov mc = sample_mean_cov(completed);
  mc.sigma += residual_sum / static_cast<double>(completed.rows());
  mc.sigma = 0.5 * (mc.sigma + mc.sigma.transpose());
  return mc;
}

}  // namespace detail

/// M-step: column means of the completed data and
///   Sigma = (1/n) sum_i (x_i - mu)(x_i - mu)^T + (1/n) sum_i C_i.
/// Repeated residual matrices are summed as count * C, in order of first
/// appearance, which is also how the pattern-grouped E-step accumulates them.
inline MeanCov mstep_update(const Matrix& completed, const std::vector<Matrix>& residuals) {
  if (static_cast<Index>(residuals.size()) != completed.rows())
    throw ValidationError("mstep_update: need one residual covariance per row");
  const Index p = completed.cols();
  std::vector<std::pair<const Matrix*, double>> distinct;
  for (const auto& c : residuals) {
    if (c.rows() != p || c.cols() != p) throw ValidationError("mstep_update: residual covariance has wrong shape");
    auto it = std::find_if(distinct.begin(), distinct.end(), [&](const auto& d) { return *d.first == c; });
    if (it == distinct.end()) distinct.emplace_back(&c, 1.0);
    else it->second += 1.0;
  }
  Matrix sum_c = Matrix::Zero(p, p);
  for (const auto& [c, count] : distinct) sum_c += count * *c;
  return detail::combine_moments(completed, sum_c);
}

// ---------------------------------------------------------------------------
// Truncated total least squares

/// Leading eigenvectors of the covariance after scaling every variable to
/// unit variance.
struct TtlsBasis {
  Vector scale;    // sqrt(diag(sigma))
  Matrix vectors;  // p x k, leading eigenvectors of the correlation matrix
  Vector values;   // the matching k eigenvalues, descending
};

inline TtlsBasis ttls_basis(const Matrix& sigma, int k) {
  const Index p = sigma.rows();
  if (k < 1 || k > p) throw ArgumentError("TTLS truncation must lie in [1, p]");
  TtlsBasis b;
  b.scale = sigma.diagonal().cwiseSqrt();
  if (!(b.scale.array() > 0.0).all()) throw NumericalError("TTLS: covariance has a zero variance");
  const Vector inv = b.scale.cwiseInverse();
  const Matrix corr = inv.asDiagonal() * sigma * inv.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(corr);
  if (eig.info() != Eigen::Success) throw NumericalError("TTLS: eigendecomposition failed");
  const Vector& vals = eig.eigenvalues();  // ascending
  if (!(vals(p - k) > 1e-12 * std::max(vals(p - 1), 1e-300)))
    throw ArgumentError("TTLS truncation " + std::to_string(k) + " exceeds the rank of the covariance");
  b.vectors = eig.eigenvectors().rightCols(k).rowwise().reverse();
  b.values = vals.tail(k).reverse();
  return b;
}

/// Regression matrix B^T (m x a, original units) of the rank-k TTLS solution:
/// in standardized units z_m = V_m V_a^+ z_a, where V_a, V_m are the rows of
/// the retained eigenvectors belonging to the available and missing variables.
inline Matrix ttls_coefficients(const TtlsBasis& basis, const IndexList& avail, const IndexList& miss) {
  const auto k = basis.vectors.cols();
  if (static_cast<Index>(avail.size()) < k)
    throw ArgumentError("TTLS truncation exceeds the number of available variables");
  const Matrix va = basis.vectors(avail, Eigen::all);
  Eigen::JacobiSVD<Matrix> svd(va);
  const auto& sv = svd.singularValues();
  if (!(sv(k - 1) > 1e-10 * sv(0)))
    throw ArgumentError("TTLS truncation exceeds the rank of the available block");
  const Matrix pinv = va.completeOrthogonalDecomposition().pseudoInverse();  // k x a
  Matrix bt = basis.vectors(miss, Eigen::all) * pinv;                       // m x a, standardized
  return basis.scale(miss).asDiagonal() * bt * basis.scale(avail).cwiseInverse().asDiagonal();
}

/// Rank-k TTLS imputation of one row's missing entries under (mu, sigma).
inline Vector ttls_regress(const Vector& x, const Eigen::Matrix<bool, Eigen::Dynamic, 1>& observed, const Vector& mu,
                           const Matrix& sigma, int k) {
  IndexList avail, miss;
  for (Index j = 0; j < x.size(); ++j) (observed(j) ? avail : miss).push_back(j);
  Vector out = x;
  if (miss.empty()) return out;
  if (avail.empty()) {
    out(miss) = mu(miss);
    return out;
  }
  const auto basis = ttls_basis(sigma, k);
  const Matrix bt = ttls_coefficients(basis, avail, miss);
  out(miss) = mu(miss) + bt * (x(avail) - mu(avail));
  return out;
}

// ---------------------------------------------------------------------------
// EM drivers

enum class Method { graphem, ttls };

/// Reconstruction method and its structural parameter.
struct MethodSpec {
  Method method = Method::graphem;
  Graph graph;      // GraphEM
  int ttls_k = 5;   // RegEM-TTLS truncation
};

namespace detail {

struct EStepOutput {
  Matrix completed;
  Matrix residual_sum;  // sum over rows of C_i
  double loglik = 0.0;  // observed-data log-likelihood, summed over rows
};

inline EStepOutput conditional_estep(const DataMatrix& x, const std::vector<MissingPattern>& patterns,
                                     const Vector& mu, const Matrix& sigma) {
  const Index p = x.cols();
  EStepOutput out{x.values(), Matrix::Zero(p, p), 0.0};
  std::vector<std::size_t> row_pat(static_cast<std::size_t>(x.rows()));
  std::vector<ConditionalRegression> regs;
  regs.reserve(patterns.size());
  for (std::size_t q = 0; q < patterns.size(); ++q) {
    const auto& pat = patterns[q];
    try {
      regs.emplace_back(mu, sigma, pat.available, pat.missing);
    } catch (const NumericalError& e) {
      throw NumericalError("E-step at row " + std::to_string(pat.rows.front()) + ": " + e.what());
    }
    for (Index r : pat.rows) row_pat[static_cast<std::size_t>(r)] = q;
  }
  Vector row(p);
  for (Index i = 0; i < x.rows(); ++i) {
    const auto& reg = regs[row_pat[static_cast<std::size_t>(i)]];
    row = out.completed.row(i).transpose();
    out.loglik += reg.impute(row);
    out.completed.row(i) = row.transpose();
  }
  for (std::size_t q = 0; q < patterns.size(); ++q) {
    if (patterns[q].missing.empty()) continue;
    const auto count = static_cast<double>(patterns[q].rows.size());
    out.residual_sum(patterns[q].missing, patterns[q].missing) += count * regs[q].residual_cov();
  }
  return out;
}

inline EStepOutput ttls_estep(const DataMatrix& x, const std::vector<MissingPattern>& patterns, const Vector& mu,
                              const Matrix& sigma, int k) {
  const Index p = x.cols();
  EStepOutput out{x.values(), Matrix::Zero(p, p), 0.0};
  bool any_missing = false;
  for (const auto& pat : patterns) any_missing |= !pat.missing.empty();
  if (!any_missing) return out;
  const auto basis = ttls_basis(sigma, k);
  std::vector<Matrix> resid(patterns.size());
  std::vector<std::size_t> row_pat(static_cast<std::size_t>(x.rows()));
  std::vector<Matrix> coef(patterns.size());
  for (std::size_t q = 0; q < patterns.size(); ++q) {
    const auto& pat = patterns[q];
    for (Index r : pat.rows) row_pat[static_cast<std::size_t>(r)] = q;
    if (pat.missing.empty()) continue;
    const Matrix s_mm = sigma(pat.missing, pat.missing);
    if (pat.available.empty()) {
      resid[q] = s_mm;
      continue;
    }
    coef[q] = ttls_coefficients(basis, pat.available, pat.missing);
    // Variance of the missing block carried by the discarded components.
    const Matrix lead = basis.scale(pat.missing).asDiagonal() * basis.vectors(pat.missing, Eigen::all);
    Matrix c = s_mm - lead * basis.values.asDiagonal() * lead.transpose();
    resid[q] = 0.5 * (c + c.transpose());
  }
  for (Index i = 0; i < x.rows(); ++i) {
    const auto q = row_pat[static_cast<std::size_t>(i)];
    const auto& pat = patterns[q];
    if (pat.missing.empty()) continue;
    if (pat.available.empty()) {
      for (Index j : pat.missing) out.completed(i, j) = mu(j);
    } else {
      const Vector centered = x.values()(i, pat.available).transpose() - mu(pat.available);
      const Vector filled = mu(pat.missing) + coef[q] * centered;
      for (std::size_t t = 0; t < pat.missing.size(); ++t)
        out.completed(i, pat.missing[t]) = filled(static_cast<Index>(t));
    }
  }
  for (std::size_t q = 0; q < patterns.size(); ++q) {
    if (patterns[q].missing.empty()) continue;
    const auto count = static_cast<double>(patterns[q].rows.size());
    out.residual_sum(patterns[q].missing, patterns[q].missing) += count * resid[q];
  }
  return out;
}

inline double observed_loglik(const DataMatrix& x, const std::vector<MissingPattern>& patterns, const Vector& mu,
                              const Matrix& sigma) {
  double total = 0.0;
  Vector row(x.cols());
  for (const auto& pat : patterns) {
    if (pat.available.empty()) continue;
    ConditionalRegression reg(mu, sigma, pat.available, IndexList{});
    for (Index r : pat.rows) {
      row = x.values().row(r).transpose();
      total += reg.impute(row);
    }
  }
  return total;
}

inline double missing_change(const Matrix& a, const Matrix& b, const Mask& mask) {
  double diff = 0.0, ref = 0.0;
  for (Index j = 0; j < mask.cols(); ++j) {
    for (Index i = 0; i < mask.rows(); ++i) {
      if (mask(i, j)) continue;
      const double d = a(i, j) - b(i, j);
      diff += d * d;
      ref += b(i, j) * b(i, j);
    }
  }
  if (ref == 0.0) return std::sqrt(diff);
  return std::sqrt(diff / ref);
}

}  // namespace detail

/// EM imputation with the covariance constrained to the Gaussian Markov
/// random field of `g`. Each iteration regresses the missing values on the
/// available ones under the current (mu, Sigma_G), re-estimates mu and Sigma
/// from the completed data plus residual covariances, then projects Sigma onto
/// the graph by graph-constrained maximum likelihood (warm-started from the
/// previous Sigma_G).
inline ReconstructionResult graphem(const DataMatrix& x, const Graph& g, const EmOptions& opts = {}) {
  opts.validate();
  const Index n = x.rows(), p = x.cols();
  if (g.size() != p) throw ValidationError("graphem: graph has " + std::to_string(g.size()) + " vertices, data has " +
                                           std::to_string(p) + " columns");
  x.require_observed_columns();

  const auto patterns = group_patterns(x.mask());
  Matrix previous = column_mean_impute(x);
  MeanCov start = sample_mean_cov(previous);
  Vector mu = start.mu;
  Matrix sigma_g = start.sigma;

  ReconstructionResult res;
  res.graph = g;
  const bool nothing_missing = x.total_missing() == 0;
  for (int it = 1; it <= opts.max_iter; ++it) {
    auto e = detail::conditional_estep(x, patterns, mu, sigma_g);
    if (it > 1) res.objective_trace.push_back(e.loglik / static_cast<double>(n));

    MeanCov m = detail::combine_moments(e.completed, e.residual_sum);
    PrecisionEstimate est;
    try {
      est = graphical_mle(m.sigma, g, opts.mle, it > 1 ? &sigma_g : nullptr);
    } catch (const NumericalError& err) {
      throw NumericalError("graphem: M-step failed at iteration " + std::to_string(it) + ": " + err.what());
    }
    res.mstep_trace.push_back(est.objective);
    res.mstep_sweeps.push_back(est.sweeps);

    const double change = nothing_missing ? 0.0 : detail::missing_change(e.completed, previous, x.mask());
    res.change_trace.push_back(change);
    mu = std::move(m.mu);
    sigma_g = std::move(est.sigma);
    res.omega_hat = std::move(est.omega);
    previous = std::move(e.completed);
    res.iterations = it;
    if (nothing_missing || change < opts.rel_tol) {
      res.converged = true;
      break;
    }
  }
  res.objective_trace.push_back(detail::observed_loglik(x, patterns, mu, sigma_g) / static_cast<double>(n));
  res.completed = std::move(previous);
  res.mu_hat = std::move(mu);
  res.sigma_hat = std::move(sigma_g);
  return res;
}

/// RegEM with truncated total least squares regressions (rank k) in place of
/// the conditional-mean regressions, and an unconstrained M-step.
inline ReconstructionResult regem_ttls(const DataMatrix& x, int k, const EmOptions& opts = {}) {
  opts.validate();
  const Index n = x.rows(), p = x.cols();
  if (k < 1 || k > p) throw ArgumentError("regem_ttls: truncation must lie in [1, p]");
  x.require_observed_columns();

  const auto patterns = group_patterns(x.mask());
  Matrix previous = column_mean_impute(x);
  MeanCov m = sample_mean_cov(previous);

  ReconstructionResult res;
  const bool nothing_missing = x.total_missing() == 0;
  for (int it = 1; it <= opts.max_iter; ++it) {
    auto e = detail::ttls_estep(x, patterns, m.mu, m.sigma, k);
    MeanCov next = detail::combine_moments(e.completed, e.residual_sum);

    const double change = nothing_missing ? 0.0 : detail::missing_change(e.completed, previous, x.mask());
    res.change_trace.push_back(change);
    m = std::move(next);
    previous = std::move(e.completed);
    res.iterations = it;
    try {
      res.objective_trace.push_back(detail::observed_loglik(x, patterns, m.mu, m.sigma) / static_cast<double>(n));
    } catch (const NumericalError&) {
      // Singular available block; the baseline has no likelihood guarantee to trace.
    }
    if (nothing_missing || change < opts.rel_tol) {
      res.converged = true;
      break;
    }
  }
  res.completed = std::move(previous);
  res.mu_hat = std::move(m.mu);
  res.sigma_hat = std::move(m.sigma);
  return res;
}

inline ReconstructionResult reconstruct(const DataMatrix& x, const MethodSpec& method, const EmOptions& opts = {}) {
  if (method.method == Method::graphem) return graphem(x, method.graph, opts);
  return regem_ttls(x, method.ttls_k, opts);
}

/// One regression step under fixed parameters: fills the missing entries of
/// `x` with the method's regression (conditional mean for GraphEM, rank-k TTLS
/// for the baseline).
inline Matrix regression_step(const DataMatrix& x, const Vector& mu, const Matrix& sigma, const MethodSpec& method) {
  const auto patterns = group_patterns(x.mask());
  if (method.method == Method::graphem) return detail::conditional_estep(x, patterns, mu, sigma).completed;
  return detail::ttls_estep(x, patterns, mu, sigma, method.ttls_k).completed;
}

}  // namespace graphem
