#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace isslab {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;

/// Raised by numerical kernels on invalid input or breakdown.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace numerics {

/// log(sum(exp(v))) shifted by max(v), so entries of magnitude up to ~700
/// never overflow.
template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& values) {
  using Scalar = typename Derived::Scalar;
  if (values.size() == 0) throw NumericError("empty reduction");
  const Scalar shift = values.maxCoeff();
  Scalar acc = 0;
  for (Eigen::Index i = 0; i < values.size(); ++i) acc += std::exp(values(i) - shift);
  return shift + std::log(acc);
}

/// Softmax of `logits` restricted to the entries listed in `subset`.
/// Output entry k corresponds to logits[subset[k]].
template <typename Derived>
VectorX<typename Derived::Scalar> softmax_subset(const Eigen::MatrixBase<Derived>& logits,
                                                 std::span<const int> subset) {
  using Scalar = typename Derived::Scalar;
  if (subset.empty()) throw NumericError("empty reduction");
  VectorX<Scalar> gathered(static_cast<Eigen::Index>(subset.size()));
  for (std::size_t k = 0; k < subset.size(); ++k) {
    const int idx = subset[k];
    if (idx < 0 || idx >= logits.size())
      throw NumericError("softmax_subset: index " + std::to_string(idx) + " out of range");
    gathered(static_cast<Eigen::Index>(k)) = logits(idx);
  }
  const Scalar lse = log_sum_exp(gathered);
  return (gathered.array() - lse).exp().matrix();
}

/// Full softmax over every entry.
template <typename Derived>
VectorX<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  const Scalar lse = log_sum_exp(logits);
  return (logits.array() - lse).exp().matrix();
}

/// LU factorisation with partial (row) pivoting, P A = L U.
///
/// A pivot whose magnitude falls below `kPivotFloor` marks the matrix
/// singular; `solve` refuses to proceed in that case while `determinant`
/// simply reports zero.
template <typename Scalar>
class LuDecomposition {
 public:
  static constexpr double kPivotFloor = 1e-12;

  explicit LuDecomposition(const MatrixX<Scalar>& a) : lu_(a), perm_(a.rows()) {
    if (a.rows() != a.cols()) throw NumericError("LU: matrix must be square");
    const Eigen::Index n = a.rows();
    for (Eigen::Index i = 0; i < n; ++i) perm_[static_cast<std::size_t>(i)] = i;
    for (Eigen::Index k = 0; k < n; ++k) {
      Eigen::Index pivot = k;
      Scalar best = std::abs(lu_(k, k));
      for (Eigen::Index i = k + 1; i < n; ++i) {
        const Scalar mag = std::abs(lu_(i, k));
        if (mag > best) {
          best = mag;
          pivot = i;
        }
      }
      if (best < static_cast<Scalar>(kPivotFloor)) {
        singular_ = true;
        continue;
      }
      if (pivot != k) {
        lu_.row(k).swap(lu_.row(pivot));
        std::swap(perm_[static_cast<std::size_t>(k)], perm_[static_cast<std::size_t>(pivot)]);
        sign_ = -sign_;
      }
      const Scalar inv = Scalar(1) / lu_(k, k);
      for (Eigen::Index i = k + 1; i < n; ++i) {
        lu_(i, k) *= inv;
        const Scalar factor = lu_(i, k);
        if (factor != Scalar(0))
          lu_.row(i).tail(n - k - 1) -= factor * lu_.row(k).tail(n - k - 1);
      }
    }
  }

  bool singular() const { return singular_; }

  Scalar determinant() const {
    if (singular_) return Scalar(0);
    Scalar det = static_cast<Scalar>(sign_);
    for (Eigen::Index i = 0; i < lu_.rows(); ++i) det *= lu_(i, i);
    return det;
  }

  MatrixX<Scalar> solve(const MatrixX<Scalar>& b) const {
    if (singular_) throw NumericError("singular matrix");
    if (b.rows() != lu_.rows()) throw NumericError("LU solve: row mismatch");
    const Eigen::Index n = lu_.rows();
    RowMajor x(n, b.cols());
    for (Eigen::Index i = 0; i < n; ++i) x.row(i) = b.row(perm_[static_cast<std::size_t>(i)]);
    // forward substitution, unit lower
    for (Eigen::Index i = 1; i < n; ++i)
      for (Eigen::Index j = 0; j < i; ++j)
        if (lu_(i, j) != Scalar(0)) x.row(i) -= lu_(i, j) * x.row(j);
    for (Eigen::Index i = n - 1; i >= 0; --i) {
      for (Eigen::Index j = i + 1; j < n; ++j)
        if (lu_(i, j) != Scalar(0)) x.row(i) -= lu_(i, j) * x.row(j);
      x.row(i) /= lu_(i, i);
    }
    return MatrixX<Scalar>(x);
  }

 private:
  using RowMajor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMajor lu_;
  std::vector<Eigen::Index> perm_;
  int sign_ = 1;
  bool singular_ = false;
};

/// Solves A X = B.  Throws NumericError("singular matrix") when a pivot
/// drops below 1e-12.
template <typename Scalar>
MatrixX<Scalar> linear_solve(const MatrixX<Scalar>& a, const MatrixX<Scalar>& b) {
  if (a.rows() != a.cols()) throw NumericError("linear_solve: matrix must be square");
  return LuDecomposition<Scalar>(a).solve(b);
}

template <typename Scalar>
Scalar lu_det(const MatrixX<Scalar>& a) {
  return LuDecomposition<Scalar>(a).determinant();
}

}  // namespace numerics
}  // namespace isslab
