#pragma once

// Dense symmetric / SPD matrix algebra: sym/vec packing, a cyclic Jacobi
// eigensolver, and spectral matrix functions (exp, log, fractional powers)
// together with the adjoints of their Frechet derivatives.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "npv/errors.hpp"

namespace npv {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

inline constexpr double kDefaultEigFloor = 1e-12;

/// How SPD operands with tiny eigenvalues are treated. By default an
/// eigenvalue at or below `eig_floor` raises SingularityError; with
/// `clamp` set it is replaced by the floor instead.
struct MatrixPolicy {
  double eig_floor = kDefaultEigFloor;
  bool clamp = false;
};

/// Real symmetric matrix. Symmetry is exact: every constructor mirrors the
/// upper and lower triangles to the same values.
class SymMatrix {
 public:
  SymMatrix() = default;
  explicit SymMatrix(Index d) : m_(Matrix::Zero(d, d)) {}

  /// Takes the symmetric part (M + M^T) / 2.
  explicit SymMatrix(const Matrix& m) {
    if (m.rows() != m.cols()) throw DimensionError("SymMatrix requires a square matrix");
    m_ = m;
    symmetrize_in_place(m_);
  }

  static SymMatrix zero(Index d) { return SymMatrix(d); }
  static SymMatrix identity(Index d) { return SymMatrix(Matrix(Matrix::Identity(d, d))); }
  static SymMatrix scaled_identity(Index d, double c) {
    return SymMatrix(Matrix(c * Matrix::Identity(d, d)));
  }

  Index dim() const noexcept { return m_.rows(); }
  const Matrix& matrix() const noexcept { return m_; }
  double operator()(Index i, Index j) const { return m_(i, j); }
  double frobenius_norm() const { return m_.norm(); }
  double trace() const { return m_.trace(); }
  bool all_finite() const { return m_.allFinite(); }

  SymMatrix& operator+=(const SymMatrix& o) {
    check_same(o);
    m_ += o.m_;
    return *this;
  }
  SymMatrix& operator-=(const SymMatrix& o) {
    check_same(o);
    m_ -= o.m_;
    return *this;
  }
  SymMatrix& operator*=(double s) {
    m_ *= s;
    return *this;
  }
  friend SymMatrix operator+(SymMatrix a, const SymMatrix& b) { return a += b; }
  friend SymMatrix operator-(SymMatrix a, const SymMatrix& b) { return a -= b; }
  friend SymMatrix operator*(double s, SymMatrix a) { return a *= s; }
  friend SymMatrix operator*(SymMatrix a, double s) { return a *= s; }
  friend bool operator==(const SymMatrix& a, const SymMatrix& b) {
    return a.dim() == b.dim() && a.m_ == b.m_;
  }

  static void symmetrize_in_place(Matrix& m) {
    for (Index i = 0; i < m.rows(); ++i) {
      for (Index j = i + 1; j < m.cols(); ++j) {
        const double v = 0.5 * (m(i, j) + m(j, i));
        m(i, j) = v;
        m(j, i) = v;
      }
    }
  }

 private:
  void check_same(const SymMatrix& o) const {
    if (o.dim() != dim()) throw DimensionError("SymMatrix dimension mismatch");
  }
  Matrix m_;
};

class SpdMatrix;
SpdMatrix make_spd(const Matrix& m, const MatrixPolicy& policy = {});

/// Symmetric positive-definite matrix. Instances created through
/// make_spd() have been checked against the eigenvalue floor; instances
/// returned by matrix functions are positive by construction.
class SpdMatrix {
 public:
  SpdMatrix() = default;

  static SpdMatrix identity(Index d) { return SpdMatrix(Matrix(Matrix::Identity(d, d)), Trusted{}); }

  Index dim() const noexcept { return m_.rows(); }
  const Matrix& matrix() const noexcept { return m_; }
  double operator()(Index i, Index j) const { return m_(i, j); }
  SymMatrix sym() const { return SymMatrix(m_); }
  double frobenius_norm() const { return m_.norm(); }
  friend bool operator==(const SpdMatrix& a, const SpdMatrix& b) {
    return a.dim() == b.dim() && a.m_ == b.m_;
  }

  struct Trusted {};
  /// Wraps an already-symmetrized matrix known to be positive definite.
  SpdMatrix(Matrix m, Trusted) : m_(std::move(m)) { SymMatrix::symmetrize_in_place(m_); }

 private:
  Matrix m_;
};

// ---------------------------------------------------------------------------
// sym / vec

inline bool is_triangular_number(std::size_t n, Index* d_out = nullptr) {
  const auto d = static_cast<Index>((std::sqrt(8.0 * static_cast<double>(n) + 1.0) - 1.0) / 2.0 + 0.5);
  const bool ok = static_cast<std::size_t>(d * (d + 1) / 2) == n && n > 0;
  if (ok && d_out) *d_out = d;
  return ok;
}

inline constexpr Index packed_size(Index d) { return d * (d + 1) / 2; }

/// Packs a vector of length d(d+1)/2 into a symmetric matrix, filling the
/// upper triangle row by row (v_1..v_d on the first row) and mirroring.
inline SymMatrix sym(const Vector& v) {
  Index d = 0;
  if (!is_triangular_number(static_cast<std::size_t>(v.size()), &d)) {
    std::ostringstream os;
    os << "sym: length " << v.size() << " is not of the form d(d+1)/2";
    throw DimensionError(os.str());
  }
  Matrix m(d, d);
  Index k = 0;
  for (Index i = 0; i < d; ++i) {
    for (Index j = i; j < d; ++j) {
      m(i, j) = v[k];
      m(j, i) = v[k];
      ++k;
    }
  }
  return SymMatrix(m);
}

/// Inverse of sym(): reads the upper triangle row by row.
inline Vector vec(const SymMatrix& s) {
  const Index d = s.dim();
  Vector v(packed_size(d));
  Index k = 0;
  for (Index i = 0; i < d; ++i)
    for (Index j = i; j < d; ++j) v[k++] = s(i, j);
  return v;
}

inline Vector vec(const SpdMatrix& s) { return vec(s.sym()); }

/// Adjoint of sym(): maps a gradient with respect to the matrix entries to
/// the gradient with respect to the packed vector. Off-diagonal entries
/// appear twice in the matrix, so both contributions are summed.
inline Vector sym_adjoint(const Matrix& g) {
  const Index d = g.rows();
  Vector v(packed_size(d));
  Index k = 0;
  for (Index i = 0; i < d; ++i) {
    for (Index j = i; j < d; ++j) v[k++] = (i == j) ? g(i, i) : g(i, j) + g(j, i);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Spectral decomposition

struct SpectralDecomposition {
  Vector eigenvalues;   // ascending
  Matrix eigenvectors;  // columns, orthonormal

  Index dim() const noexcept { return eigenvalues.size(); }

  /// Q diag(f(lambda)) Q^T, symmetrized.
  template <typename F>
  Matrix apply(F&& f) const {
    const Index d = dim();
    Vector fv(d);
    for (Index i = 0; i < d; ++i) fv[i] = f(eigenvalues[i]);
    Matrix out = eigenvectors * fv.asDiagonal() * eigenvectors.transpose();
    SymMatrix::symmetrize_in_place(out);
    return out;
  }

  Matrix reconstruct() const {
    return apply([](double x) { return x; });
  }
};

struct JacobiOptions {
  int max_sweeps = 100;
  double relative_tolerance = 1e-14;
};

/// Cyclic Jacobi eigensolver for a symmetric matrix. Eigenvalues are
/// returned in ascending order; eigenvectors are orthonormal columns.
inline SpectralDecomposition spectral_decompose(const SymMatrix& s, const JacobiOptions& opt = {}) {
  const Index n = s.dim();
  if (!s.all_finite()) throw NumericalError("spectral_decompose: non-finite entries");
  Matrix a = s.matrix();
  Matrix v = Matrix::Identity(n, n);
  const double scale = a.norm();

  auto off_norm = [&] {
    double acc = 0.0;
    for (Index i = 0; i < n; ++i)
      for (Index j = i + 1; j < n; ++j) acc += 2.0 * a(i, j) * a(i, j);
    return std::sqrt(acc);
  };

  if (scale > 0.0 && n > 1) {
    const double tol = opt.relative_tolerance * scale;
    bool converged = false;
    for (int sweep = 0; sweep < opt.max_sweeps; ++sweep) {
      if (off_norm() <= tol) {
        converged = true;
        break;
      }
      for (Index p = 0; p < n - 1; ++p) {
        for (Index q = p + 1; q < n; ++q) {
          const double apq = a(p, q);
          if (apq == 0.0) continue;
          const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
          const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(1.0 + theta * theta));
          const double c = 1.0 / std::sqrt(1.0 + t * t);
          const double sn = t * c;
          // A <- J^T A J with J the (p, q) rotation.
          for (Index k = 0; k < n; ++k) {
            const double akp = a(k, p);
            const double akq = a(k, q);
            a(k, p) = c * akp - sn * akq;
            a(k, q) = sn * akp + c * akq;
          }
          for (Index k = 0; k < n; ++k) {
            const double apk = a(p, k);
            const double aqk = a(q, k);
            a(p, k) = c * apk - sn * aqk;
            a(q, k) = sn * apk + c * aqk;
          }
          a(p, q) = 0.0;
          a(q, p) = 0.0;
          for (Index k = 0; k < n; ++k) {
            const double vkp = v(k, p);
            const double vkq = v(k, q);
            v(k, p) = c * vkp - sn * vkq;
            v(k, q) = sn * vkp + c * vkq;
          }
        }
      }
    }
    if (!converged && off_norm() > tol) {
      throw ConvergenceError("spectral_decompose: Jacobi sweeps exhausted", off_norm());
    }
  }

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index i, Index j) { return a(i, i) < a(j, j); });

  SpectralDecomposition out;
  out.eigenvalues.resize(n);
  out.eigenvectors.resize(n, n);
  for (Index k = 0; k < n; ++k) {
    out.eigenvalues[k] = a(order[k], order[k]);
    out.eigenvectors.col(k) = v.col(order[k]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix functions

namespace detail {

inline double max_exp_argument() { return std::log(std::numeric_limits<double>::max()); }

inline void check_exp_range(const Vector& eig) {
  for (Index i = 0; i < eig.size(); ++i) {
    if (eig[i] > max_exp_argument()) {
      std::ostringstream os;
      os << "mat_exp: eigenvalue " << eig[i] << " overflows exp";
      throw NumericalError(os.str());
    }
    if (std::exp(eig[i]) <= 0.0) {
      std::ostringstream os;
      os << "mat_exp: eigenvalue " << eig[i] << " underflows exp to zero";
      throw NumericalError(os.str());
    }
  }
}

// Enforces the floor on a decomposition of an SPD operand; clamps in place
// when the policy asks for it.
inline void enforce_floor(SpectralDecomposition& sd, const MatrixPolicy& policy, const char* who) {
  for (Index i = 0; i < sd.eigenvalues.size(); ++i) {
    const double lam = sd.eigenvalues[i];
    if (!(lam > policy.eig_floor)) {
      if (policy.clamp && std::isfinite(lam)) {
        sd.eigenvalues[i] = policy.eig_floor;
        continue;
      }
      std::ostringstream os;
      os << who << ": eigenvalue " << lam << " is not above the floor " << policy.eig_floor
         << " (near-singular covariance)";
      throw SingularityError(os.str(), lam);
    }
  }
}

}  // namespace detail

/// Decomposes an SPD operand and validates it against the floor.
inline SpectralDecomposition spd_decompose(const SpdMatrix& p, const MatrixPolicy& policy = {},
                                           const char* who = "spd_decompose") {
  SpectralDecomposition sd = spectral_decompose(p.sym());
  detail::enforce_floor(sd, policy, who);
  return sd;
}

inline SpdMatrix make_spd(const Matrix& m, const MatrixPolicy& policy) {
  SymMatrix s(m);
  SpectralDecomposition sd = spectral_decompose(s);
  detail::enforce_floor(sd, policy, "make_spd");
  if (policy.clamp) return SpdMatrix(sd.reconstruct(), SpdMatrix::Trusted{});
  return SpdMatrix(s.matrix(), SpdMatrix::Trusted{});
}

inline SpdMatrix mat_exp(const SpectralDecomposition& sd) {
  detail::check_exp_range(sd.eigenvalues);
  return SpdMatrix(sd.apply([](double x) { return std::exp(x); }), SpdMatrix::Trusted{});
}

inline SpdMatrix mat_exp(const SymMatrix& s) { return mat_exp(spectral_decompose(s)); }

inline SymMatrix mat_log(const SpdMatrix& p, const MatrixPolicy& policy = {}) {
  const SpectralDecomposition sd = spd_decompose(p, policy, "mat_log");
  return SymMatrix(sd.apply([](double x) { return std::log(x); }));
}

/// P^t computed as exp(t log P).
inline SpdMatrix mat_pow(const SpdMatrix& p, double t, const MatrixPolicy& policy = {}) {
  const SpectralDecomposition sd = spd_decompose(p, policy, "mat_pow");
  return SpdMatrix(sd.apply([t](double x) { return std::exp(t * std::log(x)); }), SpdMatrix::Trusted{});
}

/// P^{1/2} and P^{-1/2} from one decomposition.
struct SqrtPair {
  Matrix sqrt;
  Matrix inv_sqrt;
};

inline SqrtPair sqrt_pair(const SpdMatrix& p, const MatrixPolicy& policy = {}) {
  const SpectralDecomposition sd = spd_decompose(p, policy, "sqrt_pair");
  return {sd.apply([](double x) { return std::sqrt(x); }),
          sd.apply([](double x) { return 1.0 / std::sqrt(x); })};
}

// ---------------------------------------------------------------------------
// Frechet derivatives of spectral functions (Daleckii-Krein)

/// exp divided difference (e^a - e^b) / (a - b), stable for a close to b.
inline double exp_divided_difference(double a, double b) {
  const double delta = a - b;
  if (std::abs(delta) < 1e-300) return std::exp(b);
  return std::exp(b) * std::expm1(delta) / delta;
}

/// Adjoint of the Frechet derivative of the matrix exponential at S (given
/// by its decomposition), applied to the gradient G with respect to exp(S).
/// The map is self-adjoint, so this also evaluates D exp(S)[G].
inline Matrix exp_frechet(const SpectralDecomposition& sd, const Matrix& g) {
  const Index n = sd.dim();
  const Matrix& q = sd.eigenvectors;
  Matrix h = q.transpose() * g * q;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j)
      h(i, j) *= exp_divided_difference(sd.eigenvalues[i], sd.eigenvalues[j]);
  Matrix out = q * h * q.transpose();
  return out;
}

}  // namespace npv
