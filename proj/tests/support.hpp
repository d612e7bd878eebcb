#pragma once

// Random fixtures shared by the unit tests and the acceptance binary.

#include <Eigen/Dense>

#include "npv/gaussian_manifold.hpp"
#include "npv/rng.hpp"

namespace npv::testing {

inline Matrix random_matrix(CounterRng& rng, Index r, Index c) {
  Matrix m(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) m(i, j) = rng.normal();
  return m;
}

inline Vector random_vector(CounterRng& rng, Index n, double scale = 1.0) {
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = scale * rng.normal();
  return v;
}

// Haar-ish orthogonal factor from Householder QR, independent of the
// library's Jacobi solver.
inline Matrix random_orthogonal(CounterRng& rng, Index d) {
  Eigen::HouseholderQR<Matrix> qr(random_matrix(rng, d, d));
  return qr.householderQ() * Matrix::Identity(d, d);
}

inline SymMatrix random_sym(CounterRng& rng, Index d, double frob = 1.0) {
  const Matrix a = random_matrix(rng, d, d);
  Matrix s = 0.5 * (a + a.transpose());
  s *= frob / std::max(s.norm(), 1e-300);
  return SymMatrix(s);
}

/// Q diag(exp(u)) Q^T with u uniform in [-spread, spread].
inline Matrix random_spd_matrix(CounterRng& rng, Index d, double spread = 1.0) {
  const Matrix q = random_orthogonal(rng, d);
  Vector l(d);
  for (Index i = 0; i < d; ++i) l[i] = std::exp(rng.uniform(-spread, spread));
  return q * l.asDiagonal() * q.transpose();
}

inline SpdMatrix random_spd(CounterRng& rng, Index d, double spread = 1.0) {
  return make_spd(random_spd_matrix(rng, d, spread));
}

inline GaussianPoint random_point(CounterRng& rng, Index d, double mean_scale = 1.0, double spread = 1.0) {
  return {random_vector(rng, d, mean_scale), random_spd(rng, d, spread)};
}

inline TangentVector random_tangent(CounterRng& rng, Index d, double scale = 1.0) {
  return {random_vector(rng, d, scale), random_sym(rng, d, scale)};
}

inline double max_abs(const Matrix& m) { return m.cwiseAbs().maxCoeff(); }

}  // namespace npv::testing
