#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "graphem/em.hpp"
#include "graphem/random.hpp"
#include "support.hpp"

using namespace graphem;

namespace {

const double kNaN = std::numeric_limits<double>::quiet_NaN();

/// n draws from N(0, sigma) with roughly `frac` of the entries of the last
/// columns removed; the first `keep` columns stay complete.
DataMatrix gappy_sample(const Matrix& sigma, Index n, Index keep, double frac, std::uint64_t seed) {
  Rng rng(seed);
  const Index p = sigma.rows();
  const Matrix l = Eigen::LLT<Matrix>(sigma).matrixL();
  Matrix v = standard_normal(n, p, rng) * l.transpose();
  std::bernoulli_distribution drop(frac);
  for (Index i = 0; i < n; ++i)
    for (Index j = keep; j < p; ++j)
      if (drop(rng)) v(i, j) = kNaN;
  return DataMatrix::from_nan(v);
}

Matrix chain_covariance(Index p, double rho) {
  Matrix omega = Matrix::Zero(p, p);
  for (Index i = 0; i < p; ++i) omega(i, i) = 1.0 + 2.0 * rho;
  for (Index i = 0; i + 1 < p; ++i) omega(i, i + 1) = omega(i + 1, i) = -rho;
  return omega.inverse();
}

Graph chain(Index p) {
  Graph g(p);
  for (Index i = 0; i + 1 < p; ++i) g.add_edge(i, i + 1);
  return g;
}

}  // namespace

TEST(EStep, BivariateConditional) {
  Matrix sigma(2, 2);
  sigma << 1.0, 0.5, 0.5, 1.0;
  Vector x(2);
  x << 1.0, kNaN;
  Eigen::Matrix<bool, Eigen::Dynamic, 1> obs(2);
  obs << true, false;
  const auto r = estep_impute_row(x, obs, Vector::Zero(2), sigma);
  EXPECT_NEAR(r.row(1), 0.5, 1e-15);
  EXPECT_NEAR(r.residual_cov(1, 1), 0.75, 1e-15);
  EXPECT_EQ(r.residual_cov(0, 0), 0.0);
  EXPECT_EQ(r.residual_cov(0, 1), 0.0);
}

TEST(EStep, FullyObservedAndFullyMissingRows) {
  Matrix sigma(2, 2);
  sigma << 2.0, 0.3, 0.3, 1.0;
  Vector mu(2);
  mu << 1.0, -1.0;
  Eigen::Matrix<bool, Eigen::Dynamic, 1> all(2), none(2);
  all << true, true;
  none << false, false;
  Vector x(2);
  x << 4.0, 5.0;
  EXPECT_EQ(estep_impute_row(x, all, mu, sigma).row, x);
  const auto r = estep_impute_row(Vector::Constant(2, kNaN), none, mu, sigma);
  EXPECT_EQ(r.row, mu);
  EXPECT_EQ(r.residual_cov, sigma);
}

TEST(MStep, TwoRowOracle) {
  Matrix completed(2, 2);
  completed << 1.0, 2.0, -1.0, 0.0;
  Matrix c0 = Matrix::Zero(2, 2), c1 = Matrix::Zero(2, 2);
  c0(0, 0) = 0.2;
  c1(1, 1) = 0.5;
  const auto mc = mstep_update(completed, {c0, c1});
  EXPECT_DOUBLE_EQ(mc.mu(0), 0.0);
  EXPECT_DOUBLE_EQ(mc.mu(1), 1.0);
  EXPECT_NEAR(mc.sigma(0, 0), 1.1, 1e-15);
  EXPECT_NEAR(mc.sigma(0, 1), 1.0, 1e-15);
  EXPECT_NEAR(mc.sigma(1, 1), 1.25, 1e-15);
}

TEST(EStep, SeparatedMissingPairsHaveZeroResidual) {
  // On a chain, variables on opposite sides of an observed vertex are
  // conditionally independent given the observations.
  for (Index p : {5, 7, 9}) {
    const Matrix sigma = chain_covariance(p, 0.4);
    for (Index cut = 1; cut + 1 < p; ++cut) {
      Eigen::Matrix<bool, Eigen::Dynamic, 1> obs = Eigen::Matrix<bool, Eigen::Dynamic, 1>::Constant(p, false);
      obs(cut) = true;
      Vector x = Vector::Constant(p, kNaN);
      x(cut) = 0.7;
      const auto r = estep_impute_row(x, obs, Vector::Zero(p), sigma);
      for (Index j = 0; j < cut; ++j)
        for (Index k = cut + 1; k < p; ++k) EXPECT_LE(std::abs(r.residual_cov(j, k)), 1e-8) << p << " " << j << " " << k;
      // Same side: dependent.
      if (cut >= 2) EXPECT_GT(std::abs(r.residual_cov(0, 1)), 1e-3);
    }
  }
}

TEST(EStep, GroupedMatchesRowByRowExactly) {
  const Matrix sigma = chain_covariance(6, 0.3);
  const auto x = gappy_sample(sigma, 40, 1, 0.4, 17);
  Vector mu = Vector::LinSpaced(6, -0.2, 0.3);
  const auto patterns = group_patterns(x.mask());
  const auto grouped = detail::conditional_estep(x, patterns, mu, sigma);
  const auto grouped_mc = detail::combine_moments(grouped.completed, grouped.residual_sum);

  Matrix completed(x.rows(), x.cols());
  std::vector<Matrix> residuals;
  for (Index i = 0; i < x.rows(); ++i) {
    const auto r = estep_impute_row(x.values().row(i).transpose(), x.mask().row(i).transpose(), mu, sigma);
    completed.row(i) = r.row.transpose();
    residuals.push_back(r.residual_cov);
  }
  const auto naive = mstep_update(completed, residuals);
  EXPECT_EQ(completed, grouped.completed);
  EXPECT_EQ(naive.mu, grouped_mc.mu);
  EXPECT_EQ(naive.sigma, grouped_mc.sigma);
}

TEST(GraphEm, CompleteGraphMatchesTextbookEm) {
  std::mt19937_64 rng(41);
  for (Index p : {2, 3, 4}) {
    const Matrix sigma = oracle::random_spd(p, rng) + Matrix::Identity(p, p);
    const auto x = gappy_sample(sigma, 60, 1, 0.3, 100 + static_cast<std::uint64_t>(p));
    EmOptions opts;
    opts.rel_tol = 1e-12;
    opts.max_iter = 2000;
    const auto res = graphem::graphem(x, Graph::complete(p), opts);
    const auto ref = oracle::textbook_em(x.values(), res.iterations);
    EXPECT_LE((res.sigma_hat - ref.sigma).cwiseAbs().maxCoeff(), 1e-6) << "p=" << p;
    EXPECT_LE((res.mu_hat - ref.mu).cwiseAbs().maxCoeff(), 1e-6) << "p=" << p;
    EXPECT_TRUE(oracle::non_decreasing(res.objective_trace));
  }
}

TEST(GraphEm, SparseGraphEstimateHonoursGraph) {
  const Matrix sigma = chain_covariance(8, 0.45);
  const auto x = gappy_sample(sigma, 120, 2, 0.3, 5);
  const auto g = chain(8);
  const auto res = graphem::graphem(x, g);
  EXPECT_TRUE(res.converged);
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j < 8; ++j)
      if (i != j && !g.has_edge(i, j)) EXPECT_EQ(res.omega_hat(i, j), 0.0);
  EXPECT_TRUE(oracle::non_decreasing(res.objective_trace));
  for (Index i = 0; i < x.rows(); ++i)
    for (Index j = 0; j < 8; ++j)
      if (x.observed(i, j)) EXPECT_EQ(res.completed(i, j), x.values()(i, j));
}

TEST(GraphEm, ObjectiveTraceMonotoneOnVariedProblems) {
  std::mt19937_64 rng(43);
  for (int rep = 0; rep < 12; ++rep) {
    const Index p = 5 + rep % 6;
    const Matrix sigma = oracle::random_spd(p, rng);
    const auto x = gappy_sample(sigma, 30 + 5 * rep, 1, 0.5, 300 + static_cast<std::uint64_t>(rep));
    const Graph g = oracle::random_graph(p, 0.4, rng);
    const auto res = graphem::graphem(x, g);
    EXPECT_TRUE(oracle::non_decreasing(res.objective_trace)) << "rep " << rep;
  }
}

TEST(GraphEm, Deterministic) {
  const Matrix sigma = chain_covariance(6, 0.4);
  const auto x = gappy_sample(sigma, 50, 1, 0.4, 9);
  const auto a = graphem::graphem(x, chain(6)), b = graphem::graphem(x, chain(6));
  EXPECT_EQ(a.completed, b.completed);
  EXPECT_EQ(a.sigma_hat, b.sigma_hat);
  EXPECT_EQ(a.objective_trace, b.objective_trace);
}

TEST(GraphEm, NothingMissingConvergesImmediately) {
  const Matrix sigma = chain_covariance(4, 0.3);
  const auto x = gappy_sample(sigma, 30, 4, 0.0, 3);
  const auto res = graphem::graphem(x, chain(4));
  EXPECT_EQ(res.iterations, 1);
  EXPECT_TRUE(res.converged);
  EXPECT_EQ(res.completed, x.values());
}

TEST(GraphEm, Errors) {
  const Matrix sigma = chain_covariance(4, 0.3);
  const auto x = gappy_sample(sigma, 30, 1, 0.3, 3);
  EXPECT_THROW(graphem::graphem(x, chain(5)), ValidationError);
  Matrix v = x.values();
  v.col(3).setConstant(kNaN);
  EXPECT_THROW(graphem::graphem(DataMatrix::from_nan(v), chain(4)), ValidationError);
  EmOptions bad;
  bad.max_iter = 0;
  EXPECT_THROW(graphem::graphem(x, chain(4), bad), ArgumentError);
}

TEST(Ttls, ExactRankMatchesConditionalMean) {
  Vector mu = Vector::LinSpaced(5, 0.0, 1.0);
  Vector x(5);
  x << 0.3, -0.2, 1.1, kNaN, kNaN;
  Eigen::Matrix<bool, Eigen::Dynamic, 1> obs(5);
  obs << true, true, true, false, false;
  // On a rank-3 covariance with three available entries the rank-3 TTLS
  // regression is the conditional mean.
  Rng rng(51);
  const Matrix a = standard_normal(5, 3, rng);
  const Matrix low = a * a.transpose();
  const Vector t = ttls_regress(x, obs, mu, low, 3);
  const Vector c = estep_impute_row(x, obs, mu, low).row;
  EXPECT_LE((t - c).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Ttls, ReconstructionRunsAndKeepsObserved) {
  const Matrix sigma = chain_covariance(8, 0.45);
  const auto x = gappy_sample(sigma, 80, 3, 0.3, 12);
  const auto res = regem_ttls(x, 3);
  for (Index i = 0; i < x.rows(); ++i)
    for (Index j = 0; j < 8; ++j)
      if (x.observed(i, j)) EXPECT_EQ(res.completed(i, j), x.values()(i, j));
  EXPECT_TRUE(res.completed.allFinite());
  EXPECT_THROW(regem_ttls(x, 0), ArgumentError);
  EXPECT_THROW(regem_ttls(x, 9), ArgumentError);
}

TEST(Patterns, GroupedByFirstRow) {
  Mask m(4, 2);
  m << true, false, true, true, true, false, false, true;
  const auto pats = group_patterns(m);
  ASSERT_EQ(pats.size(), 3u);
  EXPECT_EQ(pats[0].rows, (IndexList{0, 2}));
  EXPECT_EQ(pats[0].missing, (IndexList{1}));
  EXPECT_EQ(pats[1].rows, (IndexList{1}));
  EXPECT_EQ(pats[2].available, (IndexList{1}));
}

TEST(Ttls, MatchesDiscardedComponentForm) {
  // Classical TTLS coefficients -V12 V22^+ from the discarded eigenvectors of
  // the standardized covariance, mapped back to data units.
  Rng rng(61);
  const Index p = 12, k = 3;
  const Matrix m = standard_normal(p, p, rng);
  const Matrix sigma = m * m.transpose() + 0.1 * Matrix::Identity(p, p);
  const Vector d = sigma.diagonal().cwiseSqrt();
  const Matrix corr = d.cwiseInverse().asDiagonal() * sigma * d.cwiseInverse().asDiagonal();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(corr);
  const Matrix discarded = eig.eigenvectors().leftCols(p - k);  // ascending order
  IndexList avail{0, 2, 3, 5, 8}, miss{1, 4, 6, 7, 9, 10, 11};
  const Matrix v12 = discarded(avail, Eigen::all), v22 = discarded(miss, Eigen::all);
  const Matrix b = -v12 * v22.completeOrthogonalDecomposition().pseudoInverse();  // a x m, standardized
  const Matrix expect = d(miss).asDiagonal() * b.transpose() * d(avail).cwiseInverse().asDiagonal();
  const Matrix got = ttls_coefficients(ttls_basis(sigma, static_cast<int>(k)), avail, miss);
  EXPECT_LE((got - expect).cwiseAbs().maxCoeff(), 1e-9);
}
