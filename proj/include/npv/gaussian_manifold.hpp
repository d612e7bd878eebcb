#pragma once

// The manifold of non-singular Gaussian measures with the product metric:
// Euclidean on means, affine-invariant on covariances. Everything here is a
// pure function of its arguments.

#include <cmath>
#include <cstddef>
#include <sstream>
#include <utility>
#include <vector>

#include "npv/errors.hpp"
#include "npv/sym_matrix.hpp"

namespace npv {

struct GaussianPoint {
  Vector mean;
  SpdMatrix cov;

  Index dim() const noexcept { return mean.size(); }

  static GaussianPoint standard(Index d) { return {Vector::Zero(d), SpdMatrix::identity(d)}; }

  friend bool operator==(const GaussianPoint& a, const GaussianPoint& b) {
    return a.mean.size() == b.mean.size() && a.mean == b.mean && a.cov == b.cov;
  }
};

/// Validated constructor: checks shapes and the covariance floor.
inline GaussianPoint make_gaussian(const Vector& mean, const Matrix& cov, const MatrixPolicy& policy = {}) {
  if (cov.rows() != mean.size() || cov.cols() != mean.size())
    throw DimensionError("make_gaussian: mean and covariance dimensions differ");
  return {mean, make_spd(cov, policy)};
}

/// Element of the tangent space R^d x Sym(d).
struct TangentVector {
  Vector mean_dir;
  SymMatrix sym_dir;

  Index dim() const noexcept { return mean_dir.size(); }
  static TangentVector zero(Index d) { return {Vector::Zero(d), SymMatrix::zero(d)}; }

  TangentVector& operator+=(const TangentVector& o) {
    mean_dir += o.mean_dir;
    sym_dir += o.sym_dir;
    return *this;
  }
  TangentVector& operator*=(double s) {
    mean_dir *= s;
    sym_dir *= s;
    return *this;
  }
  friend TangentVector operator*(double s, TangentVector v) { return v *= s; }
  friend TangentVector operator+(TangentVector a, const TangentVector& b) { return a += b; }
};

/// Finitely supported law on the manifold.
struct EmpiricalLaw {
  std::vector<std::pair<double, GaussianPoint>> atoms;

  static EmpiricalLaw uniform(std::vector<GaussianPoint> points) {
    EmpiricalLaw law;
    const double w = 1.0 / static_cast<double>(points.size());
    for (auto& p : points) law.atoms.emplace_back(w, std::move(p));
    return law;
  }

  void validate() const {
    if (atoms.empty()) throw DomainError("EmpiricalLaw: at least one atom is required");
    double total = 0.0;
    const Index d = atoms.front().second.dim();
    for (const auto& [w, p] : atoms) {
      if (!(w > 0.0 && w <= 1.0)) throw DomainError("EmpiricalLaw: weights must lie in (0, 1]");
      if (p.dim() != d) throw DimensionError("EmpiricalLaw: atoms of different dimensions");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-12) {
      std::ostringstream os;
      os << "EmpiricalLaw: weights sum to " << total << ", expected 1";
      throw DomainError(os.str());
    }
  }
};

namespace detail {
inline void check_dims(const GaussianPoint& p, const GaussianPoint& q, const char* who) {
  if (p.dim() != q.dim() || p.cov.dim() != q.cov.dim()) {
    throw DimensionError(std::string(who) + ": dimension mismatch");
  }
}
}  // namespace detail

/// ||mean_dir||^2 + 1/2 tr((Sigma^{-1} X)^2) at the base point p.
inline double metric_norm_squared(const GaussianPoint& p, const TangentVector& v,
                                  const MatrixPolicy& policy = {}) {
  const SqrtPair sp = sqrt_pair(p.cov, policy);
  const Matrix y = sp.inv_sqrt * v.sym_dir.matrix() * sp.inv_sqrt;
  return v.mean_dir.squaredNorm() + 0.5 * y.squaredNorm();
}

inline double metric_norm(const GaussianPoint& p, const TangentVector& v, const MatrixPolicy& policy = {}) {
  return std::sqrt(metric_norm_squared(p, v, policy));
}

/// Squared geodesic distance: ||m0 - m1||^2 + 1/2 sum ln(lambda_i)^2 with
/// lambda the eigenvalues of Sigma0^{-1} Sigma1, taken from the symmetric
/// similar matrix Sigma0^{-1/2} Sigma1 Sigma0^{-1/2}.
inline double distance_squared(const GaussianPoint& p, const GaussianPoint& q, const MatrixPolicy& policy = {}) {
  detail::check_dims(p, q, "distance");
  const SqrtPair sp = sqrt_pair(p.cov, policy);
  const SymMatrix inner(Matrix(sp.inv_sqrt * q.cov.matrix() * sp.inv_sqrt));
  SpectralDecomposition sd = spectral_decompose(inner);
  detail::enforce_floor(sd, policy, "distance");
  double acc = 0.0;
  for (Index i = 0; i < sd.dim(); ++i) {
    const double l = std::log(sd.eigenvalues[i]);
    acc += l * l;
  }
  return (p.mean - q.mean).squaredNorm() + 0.5 * acc;
}

inline double distance(const GaussianPoint& p, const GaussianPoint& q, const MatrixPolicy& policy = {}) {
  return std::sqrt(distance_squared(p, q, policy));
}

/// Riemannian exponential: N(m + m~, S^{1/2} exp(S^{-1/2} X S^{-1/2}) S^{1/2}).
inline GaussianPoint exp_map(const GaussianPoint& p, const TangentVector& v, const MatrixPolicy& policy = {}) {
  if (v.dim() != p.dim() || v.sym_dir.dim() != p.dim()) throw DimensionError("exp_map: dimension mismatch");
  const SqrtPair sp = sqrt_pair(p.cov, policy);
  const SymMatrix inner(Matrix(sp.inv_sqrt * v.sym_dir.matrix() * sp.inv_sqrt));
  const SpdMatrix e = mat_exp(inner);
  return {p.mean + v.mean_dir, SpdMatrix(sp.sqrt * e.matrix() * sp.sqrt, SpdMatrix::Trusted{})};
}

/// Inverse of exp_map: (m1 - m0, S0^{1/2} log(S0^{-1/2} S1 S0^{-1/2}) S0^{1/2}).
inline TangentVector log_map(const GaussianPoint& p, const GaussianPoint& q, const MatrixPolicy& policy = {}) {
  detail::check_dims(p, q, "log_map");
  const SqrtPair sp = sqrt_pair(p.cov, policy);
  const SpdMatrix inner(sp.inv_sqrt * q.cov.matrix() * sp.inv_sqrt, SpdMatrix::Trusted{});
  const SymMatrix l = mat_log(inner, policy);
  return {q.mean - p.mean, SymMatrix(Matrix(sp.sqrt * l.matrix() * sp.sqrt))};
}

inline GaussianPoint geodesic_point(const GaussianPoint& p, const GaussianPoint& q, double t,
                                    const MatrixPolicy& policy = {}) {
  return exp_map(p, t * log_map(p, q, policy), policy);
}

struct KarcherOptions {
  double tol = 1e-10;
  int max_iter = 200;
  MatrixPolicy policy{};
};

struct KarcherResult {
  GaussianPoint point;
  int iterations = 0;
  double gradient_norm = 0.0;
};

/// Weighted sum of log maps from z; the negative Riemannian gradient of
/// the barycenter objective up to a factor 2.
inline TangentVector barycenter_direction(const GaussianPoint& z, const EmpiricalLaw& law,
                                          const MatrixPolicy& policy = {}) {
  TangentVector acc = TangentVector::zero(z.dim());
  for (const auto& [w, x] : law.atoms) acc += w * log_map(z, x, policy);
  return acc;
}

/// Fixed-point iteration z <- Exp_z(sum_i w_i Log_z(x_i)) started at the
/// heaviest atom (first on ties). Unit steps are valid on this
/// non-positively curved manifold.
inline KarcherResult karcher_mean_detailed(const EmpiricalLaw& law, const KarcherOptions& opt = {}) {
  law.validate();
  if (!(opt.tol > 0.0)) throw DomainError("karcher_mean: tol must be positive");
  std::size_t start = 0;
  for (std::size_t i = 1; i < law.atoms.size(); ++i)
    if (law.atoms[i].first > law.atoms[start].first) start = i;

  KarcherResult r{law.atoms[start].second, 0, 0.0};
  if (law.atoms.size() == 1) return r;
  for (int it = 0; it <= opt.max_iter; ++it) {
    const TangentVector step = barycenter_direction(r.point, law, opt.policy);
    r.gradient_norm = metric_norm(r.point, step, opt.policy);
    r.iterations = it;
    if (r.gradient_norm < opt.tol) return r;
    if (it == opt.max_iter) break;
    r.point = exp_map(r.point, step, opt.policy);
  }
  std::ostringstream os;
  os << "karcher_mean: no convergence after " << opt.max_iter << " iterations (gradient norm "
     << r.gradient_norm << ")";
  throw ConvergenceError(os.str(), r.gradient_norm);
}

inline GaussianPoint karcher_mean(const EmpiricalLaw& law, double tol = 1e-10, int max_iter = 200,
                                  const MatrixPolicy& policy = {}) {
  return karcher_mean_detailed(law, {tol, max_iter, policy}).point;
}

// ---------------------------------------------------------------------------
// Flat record (d, mean[d], vec(cov)[d(d+1)/2]) used by dataset files.

inline Index record_size(Index d) { return d + packed_size(d); }

inline void to_record(const GaussianPoint& p, double* out) {
  const Index d = p.dim();
  for (Index i = 0; i < d; ++i) out[i] = p.mean[i];
  const Vector v = vec(p.cov);
  for (Index k = 0; k < v.size(); ++k) out[d + k] = v[k];
}

inline GaussianPoint from_record(Index d, const double* in, const MatrixPolicy& policy = {}) {
  Vector mean(d);
  for (Index i = 0; i < d; ++i) mean[i] = in[i];
  Vector packed(packed_size(d));
  for (Index k = 0; k < packed.size(); ++k) packed[k] = in[d + k];
  return make_gaussian(mean, sym(packed).matrix(), policy);
}

}  // namespace npv
