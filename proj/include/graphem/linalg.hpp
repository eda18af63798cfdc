#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "graphem/error.hpp"

namespace graphem {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Mask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;
using Index = Eigen::Index;
/// Column or row subset; usable directly as an Eigen slicing argument.
using IndexList = std::vector<Index>;

/// Cholesky factor together with the diagonal shift that made it succeed.
struct JitteredCholesky {
  Eigen::LLT<Matrix> llt;
  double jitter = 0.0;
};

inline std::optional<Eigen::LLT<Matrix>> try_cholesky(const Matrix& a) {
  Eigen::LLT<Matrix> llt(a);
  if (llt.info() != Eigen::Success) return std::nullopt;
  // Eigen's LLT reports success on some semidefinite inputs; a non-positive
  // pivot still means the matrix is not usable as a covariance.
  const auto d = llt.matrixLLT().diagonal();
  for (Eigen::Index i = 0; i < d.size(); ++i)
    if (!(d(i) > 0.0) || !std::isfinite(d(i))) return std::nullopt;
  return llt;
}

/// Cholesky with the shared jitter policy: on failure add lambda*I with
/// lambda = 1e-8 * trace/p and retry, doubling lambda up to three times.
inline JitteredCholesky cholesky_with_jitter(const Matrix& a, const std::string& what = "matrix") {
  if (auto llt = try_cholesky(a)) return {std::move(*llt), 0.0};
  const auto p = static_cast<double>(std::max<Eigen::Index>(a.rows(), 1));
  double lambda = 1e-8 * std::abs(a.trace()) / p;
  if (!(lambda > 0.0)) lambda = 1e-8;
  for (int attempt = 0; attempt < 4; ++attempt, lambda *= 2.0) {
    Matrix shifted = a;
    shifted.diagonal().array() += lambda;
    if (auto llt = try_cholesky(shifted)) return {std::move(*llt), lambda};
  }
  throw NumericalError(what + " is not positive definite within the jitter budget");
}

inline double log_det(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

/// Inverse of an SPD matrix from its factor, symmetrized.
inline Matrix spd_inverse(const Eigen::LLT<Matrix>& llt) {
  const auto p = llt.matrixLLT().rows();
  Matrix inv = llt.solve(Matrix::Identity(p, p));
  return 0.5 * (inv + inv.transpose());
}

inline bool is_symmetric(const Matrix& a, double rel_tol) {
  if (a.rows() != a.cols()) return false;
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  return (a - a.transpose()).cwiseAbs().maxCoeff() <= rel_tol * scale;
}

}  // namespace graphem
