#pragma once

#include "isslab/numerics.hpp"

#include <cmath>
#include <stdexcept>

namespace isslab {

/// Number of free parameters of a D x D skew-symmetric matrix.
constexpr Eigen::Index skew_param_count(Eigen::Index dim) { return dim * (dim - 1) / 2; }

/// Strictly-lower-triangle parameterisation of a skew-symmetric matrix.
///
/// Parameter k walks the lower triangle row by row, (1,0), (2,0), (2,1), ...;
/// it is written to (i,j) with a plus sign and to (j,i) with a minus sign, so
/// the expanded matrix is exactly antisymmetric.
template <typename Scalar>
struct SkewParamsT {
  Eigen::Index dim = 0;
  VectorX<Scalar> values;

  static SkewParamsT zeros(Eigen::Index d) {
    return SkewParamsT{d, VectorX<Scalar>::Zero(skew_param_count(d))};
  }

  MatrixX<Scalar> expand() const {
    if (values.size() != skew_param_count(dim)) throw NumericError("skew parameter count mismatch");
    MatrixX<Scalar> s = MatrixX<Scalar>::Zero(dim, dim);
    Eigen::Index k = 0;
    for (Eigen::Index i = 1; i < dim; ++i)
      for (Eigen::Index j = 0; j < i; ++j, ++k) {
        s(i, j) = values(k);
        s(j, i) = -values(k);
      }
    return s;
  }
};

using SkewParams = SkewParamsT<double>;

/// Adjoint of `expand`: gradient w.r.t. the parameters given the gradient
/// w.r.t. every entry of the expanded matrix.
template <typename Scalar>
VectorX<Scalar> fold_skew_gradient(const MatrixX<Scalar>& full_grad) {
  const Eigen::Index d = full_grad.rows();
  VectorX<Scalar> g(skew_param_count(d));
  Eigen::Index k = 0;
  for (Eigen::Index i = 1; i < d; ++i)
    for (Eigen::Index j = 0; j < i; ++j, ++k) g(k) = full_grad(i, j) - full_grad(j, i);
  return g;
}

/// R = (I - S)(I + S)^{-1}.  The two factors commute, so this is evaluated
/// as the solve (I + S) R = (I - S).
template <typename Scalar>
MatrixX<Scalar> cayley(const SkewParamsT<Scalar>& skew) {
  const MatrixX<Scalar> s = skew.expand();
  const MatrixX<Scalar> eye = MatrixX<Scalar>::Identity(skew.dim, skew.dim);
  return numerics::linear_solve<Scalar>(eye + s, eye - s);
}

/// Reverse-mode step through `cayley`.  With A = I + S,
/// dR = -A^{-1} dS (I + R), hence dL/dS = -A^{-T} G (I + R)^T where
/// G = dL/dR; A^T = I - S.
template <typename Scalar>
VectorX<Scalar> cayley_backward(const MatrixX<Scalar>& upstream, const SkewParamsT<Scalar>& skew) {
  const MatrixX<Scalar> s = skew.expand();
  const MatrixX<Scalar> eye = MatrixX<Scalar>::Identity(skew.dim, skew.dim);
  const MatrixX<Scalar> r = numerics::linear_solve<Scalar>(eye + s, eye - s);
  const MatrixX<Scalar> full = -numerics::linear_solve<Scalar>(eye - s, upstream) * (eye + r).transpose();
  return fold_skew_gradient<Scalar>(full);
}

}  // namespace isslab
