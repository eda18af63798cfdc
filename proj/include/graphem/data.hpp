#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "graphem/error.hpp"
#include "graphem/linalg.hpp"

namespace graphem {

/// Half-open row interval [begin, end).
struct RowRange {
  Index begin = 0;
  Index end = 0;

  Index size() const noexcept { return end - begin; }
  bool contains(Index r) const noexcept { return r >= begin && r < end; }
  bool overlaps(const RowRange& o) const noexcept { return begin < o.end && o.begin < end; }
  bool within(Index n) const noexcept { return begin >= 0 && begin <= end && end <= n; }
  friend bool operator==(const RowRange&, const RowRange&) = default;
};

/// An n x p observation matrix with an explicit missingness mask. Rows are
/// time steps, columns are field or proxy variables. `mask(i, j)` is true when
/// entry (i, j) was observed; missing entries hold NaN in `values`.
class DataMatrix {
 public:
  DataMatrix() = default;

  DataMatrix(Matrix values, Mask mask) : values_(std::move(values)), mask_(std::move(mask)) {
    if (values_.rows() != mask_.rows() || values_.cols() != mask_.cols())
      throw ValidationError("values and mask shapes differ");
    for (Index j = 0; j < values_.cols(); ++j)
      for (Index i = 0; i < values_.rows(); ++i)
        if (!mask_(i, j)) values_(i, j) = std::numeric_limits<double>::quiet_NaN();
  }

  /// Missing entries are the non-finite ones.
  static DataMatrix from_nan(const Matrix& values) {
    Mask mask = values.array().isFinite();
    return DataMatrix(values, std::move(mask));
  }

  static DataMatrix complete(const Matrix& values) {
    return DataMatrix(values, Mask::Constant(values.rows(), values.cols(), true));
  }

  Index rows() const noexcept { return values_.rows(); }
  Index cols() const noexcept { return values_.cols(); }
  const Matrix& values() const noexcept { return values_; }
  const Mask& mask() const noexcept { return mask_; }
  bool observed(Index i, Index j) const { return mask_(i, j); }

  Index observed_count(Index j) const { return mask_.col(j).count(); }
  Index missing_count(Index j) const { return rows() - observed_count(j); }
  Index total_missing() const { return mask_.size() - mask_.count(); }

  /// Copy with the given entries additionally marked missing.
  DataMatrix with_missing(const Mask& extra_missing) const {
    Mask m = mask_.array() && !extra_missing.array();
    return DataMatrix(values_, std::move(m));
  }

  /// Throws ValidationError naming the first column without observations.
  void require_observed_columns(const std::vector<std::string>& names = {}) const {
    for (Index j = 0; j < cols(); ++j) {
      if (observed_count(j) == 0) {
        const auto name = static_cast<std::size_t>(j) < names.size()
                              ? names[static_cast<std::size_t>(j)]
                              : "#" + std::to_string(j);
        throw ValidationError("column " + name + " has no observed values");
      }
    }
  }

 private:
  Matrix values_;
  Mask mask_;
};

enum class ColumnKind { temperature, proxy };

/// Blocks of a temperature/proxy precision matrix.
enum class Block { tt, tp, pp };

inline const char* to_string(ColumnKind k) { return k == ColumnKind::temperature ? "temperature" : "proxy"; }

inline const char* to_string(Block b) {
  switch (b) {
    case Block::tt: return "TT";
    case Block::tp: return "TP";
    case Block::pp: return "PP";
  }
  return "?";
}

/// Per-column metadata: kind and location, plus the T/P partition.
struct FieldGeometry {
  std::vector<std::string> names;
  std::vector<ColumnKind> kinds;
  std::vector<double> lat;  // degrees, [-90, 90]
  std::vector<double> lon;  // degrees, [-180, 180)
  std::optional<double> grid_spacing;

  Index size() const noexcept { return static_cast<Index>(kinds.size()); }

  ColumnKind kind(Index j) const { return kinds[static_cast<std::size_t>(j)]; }
  bool is_temperature(Index j) const { return kind(j) == ColumnKind::temperature; }

  Block block_of(Index i, Index j) const {
    const bool ti = is_temperature(i), tj = is_temperature(j);
    if (ti && tj) return Block::tt;
    if (!ti && !tj) return Block::pp;
    return Block::tp;
  }

  IndexList temperature_indices() const { return indices_of(ColumnKind::temperature); }
  IndexList proxy_indices() const { return indices_of(ColumnKind::proxy); }

  void add(std::string name, ColumnKind k, double la, double lo) {
    names.push_back(std::move(name));
    kinds.push_back(k);
    lat.push_back(la);
    lon.push_back(lo);
  }

  void validate() const {
    const auto p = kinds.size();
    if (names.size() != p || lat.size() != p || lon.size() != p)
      throw ValidationError("geometry field lengths differ");
    for (std::size_t j = 0; j < p; ++j) {
      if (!(lat[j] >= -90.0 && lat[j] <= 90.0))
        throw ValidationError("latitude out of range for column " + names[j]);
      if (!(lon[j] >= -180.0 && lon[j] < 180.0))
        throw ValidationError("longitude out of range for column " + names[j]);
    }
    if (grid_spacing && !(*grid_spacing > 0.0)) throw ValidationError("grid spacing must be positive");
  }

  /// Restriction to a subset of columns, in the given order.
  FieldGeometry subset(const IndexList& cols) const {
    FieldGeometry g;
    g.grid_spacing = grid_spacing;
    for (auto j : cols) {
      const auto u = static_cast<std::size_t>(j);
      g.add(names[u], kinds[u], lat[u], lon[u]);
    }
    return g;
  }

 private:
  IndexList indices_of(ColumnKind k) const {
    IndexList out;
    for (std::size_t j = 0; j < kinds.size(); ++j)
      if (kinds[j] == k) out.push_back(static_cast<Index>(j));
    return out;
  }
};

struct MeanCov {
  Vector mu;
  Matrix sigma;
};

/// Replaces each missing entry by the mean of its column's observed entries.
inline Matrix column_mean_impute(const DataMatrix& x) {
  Matrix out = x.values();
  for (Index j = 0; j < x.cols(); ++j) {
    double sum = 0.0;
    Index count = 0;
    for (Index i = 0; i < x.rows(); ++i) {
      if (x.observed(i, j)) {
        sum += x.values()(i, j);
        ++count;
      }
    }
    if (count == 0) throw ValidationError("column #" + std::to_string(j) + " has no observed values");
    const double mean = sum / static_cast<double>(count);
    for (Index i = 0; i < x.rows(); ++i)
      if (!x.observed(i, j)) out(i, j) = mean;
  }
  return out;
}

/// Column-wise affine scaling to mean 0 and variance 1 (divisor n_obs) over
/// the observed entries. Columns with zero observed spread are only centered.
struct ColumnScaling {
  Vector center, scale;

  static ColumnScaling observed(const DataMatrix& x) {
    ColumnScaling s;
    s.center.resize(x.cols());
    s.scale.resize(x.cols());
    for (Index j = 0; j < x.cols(); ++j) {
      double sum = 0.0, sq = 0.0;
      Index count = 0;
      for (Index i = 0; i < x.rows(); ++i)
        if (x.observed(i, j)) {
          sum += x.values()(i, j);
          ++count;
        }
      if (count == 0) throw ValidationError("column #" + std::to_string(j) + " has no observed values");
      const double mean = sum / static_cast<double>(count);
      for (Index i = 0; i < x.rows(); ++i)
        if (x.observed(i, j)) sq += (x.values()(i, j) - mean) * (x.values()(i, j) - mean);
      const double sd = std::sqrt(sq / static_cast<double>(count));
      s.center(j) = mean;
      s.scale(j) = sd > 0.0 ? sd : 1.0;
    }
    return s;
  }

  DataMatrix apply(const DataMatrix& x) const {
    Matrix z = (x.values().rowwise() - center.transpose()).array().rowwise() / scale.transpose().array();
    return DataMatrix(std::move(z), x.mask());
  }

  /// Rows of z back in original units; observed entries of `original` are
  /// copied through unchanged.
  Matrix restore(const Matrix& z, const DataMatrix& original) const {
    Matrix out = (z.array().rowwise() * scale.transpose().array()).rowwise() + center.transpose().array();
    return original.mask().select(original.values(), out);
  }

  MeanCov restore(const MeanCov& m) const {
    return {center + scale.cwiseProduct(m.mu), scale.asDiagonal() * m.sigma * scale.asDiagonal()};
  }
};

/// Sample mean and covariance with 1/n normalization (the maximum likelihood
/// convention, not the unbiased 1/(n-1) one).
inline MeanCov sample_mean_cov(const Matrix& xc) {
  if (xc.rows() == 0) throw ValidationError("sample_mean_cov: empty input");
  const double n = static_cast<double>(xc.rows());
  MeanCov out;
  out.mu = xc.colwise().mean().transpose();
  const Matrix centered = xc.rowwise() - out.mu.transpose();
  out.sigma = Matrix::Zero(xc.cols(), xc.cols());
  out.sigma.selfadjointView<Eigen::Lower>().rankUpdate(centered.transpose(), 1.0 / n);
  out.sigma = out.sigma.selfadjointView<Eigen::Lower>();
  return out;
}

}  // namespace graphem
