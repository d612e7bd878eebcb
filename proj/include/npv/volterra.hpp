#pragma once

// Discrete-time Volterra processes with non-singular diffusion.
//
// Two process families live here:
//  * VolterraSpec: the general process driven by a Volterra kernel,
//      x_{t+1} = x_t + sum_r k(t,r) mu(t, x_r)
//                    + exp(1/2 sum_r k(t,r) [sigma(t, x_r) + s_r]) W_t.
//  * AblationProcess: the two-step process used by the ablation study,
//      x_{t+1} = x_t + w mu(x_t) + (1-w) mu(x_{t-1})
//                    + (varsigma(x_t) sigma + lambda B_t I) W_t.
//
// Both store paths in a PathSet indexed t = -1..T.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "npv/binary_io.hpp"
#include "npv/errors.hpp"
#include "npv/gaussian_manifold.hpp"
#include "npv/parallel.hpp"
#include "npv/rng.hpp"
#include "npv/sym_matrix.hpp"

namespace npv {

// ---------------------------------------------------------------------------
// Kernels

namespace kernel {
struct ExponentialDecay {
  double C;
  double alpha;  // (0, 1)
};
struct PolynomialDecay {
  double C;
  double alpha;  // < -1 inside the decay regime
};
struct Delay {
  long n_tau;
};
struct TwoStep {
  double w;  // weight on x_t; 1 - w on x_{t-1}
};
/// Explicit weights by lag: by_lag[k] = k(t, t - k).
struct Table {
  std::vector<double> by_lag;
};
}  // namespace kernel

using KernelSpec =
    std::variant<kernel::ExponentialDecay, kernel::PolynomialDecay, kernel::Delay, kernel::TwoStep, kernel::Table>;

namespace detail {

// Sum of raw (unnormalized) weights over r = 1..t for the decaying kernels.
inline double raw_mass(const KernelSpec& spec, long t) {
  if (const auto* e = std::get_if<kernel::ExponentialDecay>(&spec)) {
    if (t == 0) return e->C;
    return e->C * (1.0 - std::pow(e->alpha, static_cast<double>(t))) / (1.0 - e->alpha);
  }
  const auto& p = std::get<kernel::PolynomialDecay>(spec);
  if (t == 0) return p.C;
  double acc = 0.0;
  for (long lag = 0; lag < t; ++lag) acc += p.C * std::pow(static_cast<double>(lag + 1), p.alpha);
  return acc;
}

}  // namespace detail

/// All weights k(t, r) for r = 0..t.
///
/// Decaying kernels use raw weights C a^{t-r} (exponential) or
/// C (t-r+1)^a (polynomial), rescaled per t by max(1, raw mass) so the
/// total never exceeds one. For t > 0 the weight on r = 0 is always zero.
inline std::vector<double> kernel_weights(const KernelSpec& spec, long t) {
  if (t < 0) throw DomainError("kernel_weights: t must be nonnegative");
  std::vector<double> w(static_cast<std::size_t>(t + 1), 0.0);
  const long r_min = t > 0 ? 1 : 0;
  std::visit(
      [&](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, kernel::ExponentialDecay> || std::is_same_v<K, kernel::PolynomialDecay>) {
          const double norm = std::max(1.0, detail::raw_mass(spec, t));
          if constexpr (std::is_same_v<K, kernel::ExponentialDecay>) {
            double a_pow = 1.0;
            for (long r = t; r >= r_min; --r) {
              w[static_cast<std::size_t>(r)] = k.C * a_pow / norm;
              a_pow *= k.alpha;
            }
          } else {
            for (long r = t; r >= r_min; --r)
              w[static_cast<std::size_t>(r)] = k.C * std::pow(static_cast<double>(t - r + 1), k.alpha) / norm;
          }
        } else if constexpr (std::is_same_v<K, kernel::Delay>) {
          const long r = t - k.n_tau;
          if (r >= r_min) w[static_cast<std::size_t>(r)] = 1.0;
        } else if constexpr (std::is_same_v<K, kernel::TwoStep>) {
          w[static_cast<std::size_t>(t)] = k.w;
          if (t - 1 >= r_min) w[static_cast<std::size_t>(t - 1)] = 1.0 - k.w;
        } else {
          for (std::size_t lag = 0; lag < k.by_lag.size(); ++lag) {
            const long r = t - static_cast<long>(lag);
            if (r >= r_min) w[static_cast<std::size_t>(r)] = k.by_lag[lag];
          }
        }
      },
      spec);
  return w;
}

inline double kernel_weight(const KernelSpec& spec, long t, long r) {
  if (r < 0 || r > t) {
    std::ostringstream os;
    os << "kernel_weight: r = " << r << " outside [0, " << t << "]";
    throw DomainError(os.str());
  }
  return kernel_weights(spec, t)[static_cast<std::size_t>(r)];
}

/// Largest lag with nonzero weight for finite-support kernels, 0 otherwise.
inline long kernel_support_lag(const KernelSpec& spec) {
  if (const auto* d = std::get_if<kernel::Delay>(&spec)) return d->n_tau;
  if (const auto* two = std::get_if<kernel::TwoStep>(&spec)) return two->w < 1.0 ? 1 : 0;
  if (const auto* tab = std::get_if<kernel::Table>(&spec)) return static_cast<long>(tab->by_lag.size()) - 1;
  return 0;
}

/// Checks parameter ranges and, for t = 1..horizon, that every weight is in
/// [0, 1], k(t, 0) = 0 and 0 < sum_r k(t, r) <= 1. Finite-support kernels
/// are only checked once their support lies past r = 0 (t > max lag).
inline void validate_kernel(const KernelSpec& spec, long horizon) {
  std::visit(
      [](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, kernel::ExponentialDecay>) {
          if (!(k.C > 0.0) || !(k.alpha > 0.0 && k.alpha < 1.0))
            throw DomainError("ExponentialDecay requires C > 0 and alpha in (0, 1)");
        } else if constexpr (std::is_same_v<K, kernel::PolynomialDecay>) {
          if (!(k.C > 0.0) || !(k.alpha < 0.0)) throw DomainError("PolynomialDecay requires C > 0 and alpha < 0");
        } else if constexpr (std::is_same_v<K, kernel::Delay>) {
          if (k.n_tau < 1) throw DomainError("Delay requires n_tau >= 1");
        } else if constexpr (std::is_same_v<K, kernel::TwoStep>) {
          if (!(k.w > 0.0 && k.w <= 1.0)) throw DomainError("TwoStep requires w in (0, 1]");
        } else {
          if (k.by_lag.empty()) throw DomainError("Table kernel needs at least one weight");
        }
      },
      spec);
  const long first = kernel_support_lag(spec) + 1;
  for (long t = std::max(1L, first); t <= horizon; ++t) {
    const auto w = kernel_weights(spec, t);
    double total = 0.0;
    for (double v : w) {
      if (!(v >= 0.0 && v <= 1.0)) throw DomainError("kernel weight outside [0, 1]");
      total += v;
    }
    if (w[0] != 0.0 || !(total > 0.0) || total > 1.0 + 1e-12) {
      std::ostringstream os;
      os << "kernel not admissible at t = " << t << " (mass " << total << ")";
      throw DomainError(os.str());
    }
  }
}

/// True for polynomial kernels whose exponent is in [-1, 0): the formula
/// is evaluated but the decay guarantees are not claimed there.
inline bool outside_decay_regime(const KernelSpec& spec) {
  if (const auto* p = std::get_if<kernel::PolynomialDecay>(&spec)) return p->alpha >= -1.0;
  return false;
}

// ---------------------------------------------------------------------------
// Latent factor

/// Sym(d)-valued latent factor S_t with an almost-sure Frobenius bound.
class FactorSpec {
 public:
  enum class Kind { Zero, BernoulliScaled, Custom };
  using Sampler = std::function<SymMatrix(long t, CounterRng& rng)>;

  static FactorSpec zero(Index d) { return FactorSpec(Kind::Zero, d, 0.0, nullptr, 0.0); }

  /// S_t = lambda B_t I_d with B_t a fair coin.
  static FactorSpec bernoulli_scaled(Index d, double lambda) {
    if (!(lambda >= 0.0)) throw DomainError("BernoulliScaled requires lambda >= 0");
    return FactorSpec(Kind::BernoulliScaled, d, lambda, nullptr, lambda * std::sqrt(static_cast<double>(d)));
  }

  static FactorSpec custom(Index d, Sampler sampler, double bound_R) {
    return FactorSpec(Kind::Custom, d, 0.0, std::move(sampler), bound_R);
  }

  Kind kind() const noexcept { return kind_; }
  Index dim() const noexcept { return d_; }
  double lambda() const noexcept { return lambda_; }
  double bound() const noexcept { return bound_; }

  SymMatrix sample(long t, CounterRng& rng) const {
    switch (kind_) {
      case Kind::Zero:
        return SymMatrix::zero(d_);
      case Kind::BernoulliScaled: {
        const int b = rng.bernoulli();
        return SymMatrix::scaled_identity(d_, lambda_ * b);
      }
      case Kind::Custom: {
        SymMatrix s = sampler_(t, rng);
        if (s.dim() != d_) throw DimensionError("factor sampler returned wrong dimension");
        if (s.frobenius_norm() > bound_ * (1.0 + 1e-12)) {
          std::ostringstream os;
          os << "factor sample at t = " << t << " exceeds its bound R = " << bound_;
          throw DomainError(os.str());
        }
        return s;
      }
    }
    return SymMatrix::zero(d_);
  }

 private:
  FactorSpec(Kind k, Index d, double lambda, Sampler s, double bound)
      : kind_(k), d_(d), lambda_(lambda), sampler_(std::move(s)), bound_(bound) {}

  Kind kind_;
  Index d_;
  double lambda_;
  Sampler sampler_;
  double bound_;
};

/// s_0..s_T drawn in order from rng.
inline std::vector<SymMatrix> sample_factor_path(const FactorSpec& spec, long T, CounterRng& rng) {
  if (T < 0) throw DomainError("sample_factor_path: T must be nonnegative");
  std::vector<SymMatrix> out;
  out.reserve(static_cast<std::size_t>(T + 1));
  for (long t = 0; t <= T; ++t) out.push_back(spec.sample(t, rng));
  return out;
}

// ---------------------------------------------------------------------------
// General process

enum class InitMode { Fixed, StandardNormal };

struct VolterraSpec {
  Index d = 1;
  std::function<Vector(long t, const Vector& x)> mu;
  std::function<SymMatrix(long t, const Vector& x)> sigma;
  KernelSpec kernel = kernel::TwoStep{1.0};
  FactorSpec factor = FactorSpec::zero(1);
  double bound_M = 0.0;  // sup ||sigma(t, x)||_F
  Vector x0;             // used by InitMode::Fixed; empty means zeros
  InitMode init = InitMode::Fixed;

  Vector initial_state() const { return x0.size() == 0 ? Vector(Vector::Zero(d)) : x0; }
  double bound_R() const { return factor.bound(); }

  /// Shape checks, kernel admissibility up to `horizon`, and a probe of
  /// ||sigma||_F <= bound_M on a small grid around the origin.
  void validate(long horizon = 64) const {
    if (d < 1) throw DomainError("VolterraSpec: d must be positive");
    if (!mu || !sigma) throw DomainError("VolterraSpec: mu and sigma are required");
    if (factor.dim() != d) throw DimensionError("VolterraSpec: factor dimension differs from d");
    if (x0.size() != 0 && x0.size() != d) throw DimensionError("VolterraSpec: x0 has wrong length");
    validate_kernel(kernel, horizon);
    for (double a : {-4.0, -1.0, 0.0, 1.0, 4.0}) {
      const Vector x = Vector::Constant(d, a);
      for (long t : {0L, 1L, horizon}) {
        const SymMatrix s = sigma(t, x);
        if (s.dim() != d) throw DimensionError("VolterraSpec: sigma returned wrong dimension");
        if (s.frobenius_norm() > bound_M * (1.0 + 1e-12)) {
          std::ostringstream os;
          os << "VolterraSpec: ||sigma||_F = " << s.frobenius_norm() << " exceeds bound_M = " << bound_M;
          throw DomainError(os.str());
        }
      }
      if (mu(0, x).size() != d) throw DimensionError("VolterraSpec: mu returned wrong dimension");
    }
  }
};

using StateSpan = std::span<const Vector>;

inline Vector drift(const VolterraSpec& spec, long t, StateSpan path) {
  if (static_cast<long>(path.size()) != t + 1) throw DimensionError("drift: path must hold t + 1 states");
  const auto w = kernel_weights(spec.kernel, t);
  Vector acc = Vector::Zero(spec.d);
  for (long r = 0; r <= t; ++r) {
    const double k = w[static_cast<std::size_t>(r)];
    if (k != 0.0) acc += k * spec.mu(t, path[static_cast<std::size_t>(r)]);
  }
  return acc;
}

/// 1/2 sum_r k(t, r) [sigma(t, x_r) + s_r], the logarithm of Diffusion.
inline SymMatrix diffusion_tangent(const VolterraSpec& spec, long t, StateSpan path,
                                   std::span<const SymMatrix> s_path) {
  if (static_cast<long>(path.size()) != t + 1 || static_cast<long>(s_path.size()) != t + 1)
    throw DimensionError("diffusion_tangent: path and factor path must hold t + 1 entries");
  const auto w = kernel_weights(spec.kernel, t);
  SymMatrix acc = SymMatrix::zero(spec.d);
  for (long r = 0; r <= t; ++r) {
    const double k = w[static_cast<std::size_t>(r)];
    if (k != 0.0) acc += k * (spec.sigma(t, path[static_cast<std::size_t>(r)]) + s_path[static_cast<std::size_t>(r)]);
  }
  return 0.5 * acc;
}

inline SpdMatrix diffusion(const VolterraSpec& spec, long t, StateSpan path, std::span<const SymMatrix> s_path) {
  return mat_exp(diffusion_tangent(spec, t, path, s_path));
}

// ---------------------------------------------------------------------------
// Path storage

/// N paths of d-dimensional states at t = -1..T, plus optional factor
/// paths (vec of S_t for t = 0..T).
class PathSet {
 public:
  PathSet() = default;
  PathSet(Index d, long n_paths, long horizon, std::uint64_t seed, bool with_factor)
      : d_(d),
        n_(n_paths),
        T_(horizon),
        seed_(seed),
        states_(static_cast<std::size_t>(n_paths * (horizon + 2) * d), 0.0) {
    if (with_factor) factors_.assign(static_cast<std::size_t>(n_paths * (horizon + 1) * packed_size(d)), 0.0);
  }

  Index dim() const noexcept { return d_; }
  long n_paths() const noexcept { return n_; }
  long horizon() const noexcept { return T_; }
  std::uint64_t seed() const noexcept { return seed_; }
  bool has_factor() const noexcept { return !factors_.empty(); }

  /// t in [-1, T].
  Vector state(long n, long t) const {
    return Eigen::Map<const Vector>(states_.data() + state_offset(n, t), d_);
  }
  void set_state(long n, long t, const Vector& x) {
    Eigen::Map<Vector>(states_.data() + state_offset(n, t), d_) = x;
  }
  /// States x_{a..b} of path n (inclusive), a >= -1.
  std::vector<Vector> window(long n, long a, long b) const {
    std::vector<Vector> out;
    for (long t = a; t <= b; ++t) out.push_back(state(n, t));
    return out;
  }

  SymMatrix factor(long n, long t) const {
    const Index k = packed_size(d_);
    return sym(Eigen::Map<const Vector>(factors_.data() + factor_offset(n, t), k));
  }
  void set_factor(long n, long t, const SymMatrix& s) {
    const Index k = packed_size(d_);
    Eigen::Map<Vector>(factors_.data() + factor_offset(n, t), k) = vec(s);
  }

  const std::vector<double>& raw_states() const noexcept { return states_; }
  std::vector<double>& raw_states() noexcept { return states_; }
  const std::vector<double>& raw_factors() const noexcept { return factors_; }
  std::vector<double>& raw_factors() noexcept { return factors_; }

  friend bool operator==(const PathSet& a, const PathSet& b) {
    return a.d_ == b.d_ && a.n_ == b.n_ && a.T_ == b.T_ && a.seed_ == b.seed_ && a.states_ == b.states_ &&
           a.factors_ == b.factors_;
  }

 private:
  std::size_t state_offset(long n, long t) const {
    if (n < 0 || n >= n_ || t < -1 || t > T_) throw DomainError("PathSet: index out of range");
    return static_cast<std::size_t>((n * (T_ + 2) + (t + 1)) * d_);
  }
  std::size_t factor_offset(long n, long t) const {
    if (!has_factor() || n < 0 || n >= n_ || t < 0 || t > T_) throw DomainError("PathSet: factor index out of range");
    return static_cast<std::size_t>((n * (T_ + 1) + t) * packed_size(d_));
  }

  Index d_ = 0;
  long n_ = 0;
  long T_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<double> states_;
  std::vector<double> factors_;
};

namespace detail {
inline void check_finite_state(const Vector& x, long n, long t) {
  if (!x.allFinite()) {
    std::ostringstream os;
    os << "simulation produced a non-finite state on path " << n << " at t = " << t;
    throw SimulationError(os.str(), n, t);
  }
}
inline Vector standard_normal(Index d, CounterRng& rng) {
  Vector z(d);
  for (Index i = 0; i < d; ++i) z[i] = rng.normal();
  return z;
}
}  // namespace detail

/// Simulates N independent paths up to T. Path n draws from its own stream
/// keyed by (seed, n), so results do not depend on thread scheduling. Each
/// path consumes: initial states (StandardNormal only), the factor path
/// s_0..s_T, then one Gaussian vector per step.
inline PathSet simulate_paths(const VolterraSpec& spec, long N, long T, std::uint64_t seed) {
  if (N < 1 || T < 1) throw DomainError("simulate_paths: N and T must be positive");
  spec.validate(T);
  const bool store_factor = spec.factor.kind() != FactorSpec::Kind::Zero;
  PathSet out(spec.d, N, T, seed, store_factor);
  parallel_for(static_cast<std::size_t>(N), [&](std::size_t ni) {
    const long n = static_cast<long>(ni);
    CounterRng rng(derive_seed(seed, "simulate", ni));
    std::vector<Vector> xs;
    xs.reserve(static_cast<std::size_t>(T + 1));
    if (spec.init == InitMode::StandardNormal) {
      out.set_state(n, -1, detail::standard_normal(spec.d, rng));
      xs.push_back(detail::standard_normal(spec.d, rng));
    } else {
      out.set_state(n, -1, spec.initial_state());
      xs.push_back(spec.initial_state());
    }
    out.set_state(n, 0, xs.back());
    const auto s_path = sample_factor_path(spec.factor, T, rng);
    if (store_factor)
      for (long t = 0; t <= T; ++t) out.set_factor(n, t, s_path[static_cast<std::size_t>(t)]);
    for (long t = 0; t < T; ++t) {
      const StateSpan past(xs.data(), static_cast<std::size_t>(t + 1));
      const std::span<const SymMatrix> s_past(s_path.data(), static_cast<std::size_t>(t + 1));
      const Vector w = detail::standard_normal(spec.d, rng);
      Vector next = xs.back() + drift(spec, t, past) + diffusion(spec, t, past, s_past).matrix() * w;
      detail::check_finite_state(next, n, t + 1);
      xs.push_back(next);
      out.set_state(n, t + 1, next);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Ablation-study process

struct AblationProcess {
  Index d = 2;
  std::function<Vector(const Vector&)> mu;
  std::function<double(const Vector&)> varsigma;
  SpdMatrix sigma;
  double lambda = 0.0;
  double w = 1.0;
  InitMode init = InitMode::Fixed;  // Fixed means x_{-1} = x_0 = 0

  void validate() const {
    if (d < 1) throw DomainError("AblationProcess: d must be positive");
    if (!mu || !varsigma) throw DomainError("AblationProcess: mu and varsigma are required");
    if (sigma.dim() != d) throw DimensionError("AblationProcess: sigma must be d x d");
    if (!(lambda >= 0.0)) throw DomainError("AblationProcess: lambda must be nonnegative");
    if (!(w > 0.0 && w <= 1.0)) throw DomainError("AblationProcess: w must lie in (0, 1]");
  }

  /// w mu(x_t) + (1 - w) mu(x_{t-1}).
  Vector drift(const Vector& x_prev, const Vector& x_t) const { return w * mu(x_t) + (1.0 - w) * mu(x_prev); }

  double varsigma_checked(const Vector& x) const {
    const double v = varsigma(x);
    if (!(v > 0.0)) throw DomainError("AblationProcess: varsigma must be positive");
    return v;
  }

  /// varsigma(x_t) sigma + s.
  Matrix diffusion(const Vector& x_t, const SymMatrix& s) const {
    return varsigma_checked(x_t) * sigma.matrix() + s.matrix();
  }

  FactorSpec factor() const { return FactorSpec::bernoulli_scaled(d, lambda); }

  /// Conditional law of the next-step Gaussian given the factor value s:
  /// N(x_t + Drift, (varsigma(x_t) sigma + s)^2).
  GaussianPoint psi(const Vector& x_prev, const Vector& x_t, const SymMatrix& s,
                    const MatrixPolicy& policy = {}) const {
    const Matrix diff = diffusion(x_t, s);
    return make_gaussian(x_t + drift(x_prev, x_t), diff * diff, policy);
  }
};

/// Paths of the ablation process, t = -1..T. Path n consumes from its own
/// stream: initial states (StandardNormal only), then per step one fair
/// coin B_t followed by a standard Gaussian vector.
inline PathSet simulate_paths(const AblationProcess& proc, long N, long T, std::uint64_t seed) {
  if (N < 1 || T < 1) throw DomainError("simulate_paths: N and T must be positive");
  proc.validate();
  PathSet out(proc.d, N, T, seed, true);
  const FactorSpec factor = proc.factor();
  parallel_for(static_cast<std::size_t>(N), [&](std::size_t ni) {
    const long n = static_cast<long>(ni);
    CounterRng rng(derive_seed(seed, "simulate", ni));
    Vector prev = Vector::Zero(proc.d);
    Vector cur = Vector::Zero(proc.d);
    if (proc.init == InitMode::StandardNormal) {
      prev = detail::standard_normal(proc.d, rng);
      cur = detail::standard_normal(proc.d, rng);
    }
    out.set_state(n, -1, prev);
    out.set_state(n, 0, cur);
    for (long t = 0; t <= T; ++t) {
      const SymMatrix s = factor.sample(t, rng);
      out.set_factor(n, t, s);
      if (t == T) break;
      const Vector z = detail::standard_normal(proc.d, rng);
      Vector next = cur + proc.drift(prev, cur) + proc.diffusion(cur, s) * z;
      detail::check_finite_state(next, n, t + 1);
      out.set_state(n, t + 1, next);
      prev = std::move(cur);
      cur = std::move(next);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// PathSet files
//
// Binary layout (little-endian):
//   "NPVS1" | u32 d | u32 N | u32 T | u64 seed | u8 has_factor
//   | f64 states[N][T+2][d] | f64 factors[N][T+1][d(d+1)/2] (if has_factor)

inline constexpr std::string_view kPathSetMagic = "NPVS1";

inline void write_pathset(std::ostream& os, const PathSet& ps) {
  io::write_magic(os, kPathSetMagic);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ps.dim()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ps.n_paths()));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ps.horizon()));
  io::write_le<std::uint64_t>(os, ps.seed());
  io::write_le<std::uint8_t>(os, ps.has_factor() ? 1 : 0);
  io::write_doubles(os, ps.raw_states());
  if (ps.has_factor()) io::write_doubles(os, ps.raw_factors());
}

inline PathSet read_pathset(std::istream& is) {
  io::expect_magic(is, kPathSetMagic);
  const auto d = io::read_le<std::uint32_t>(is);
  const auto n = io::read_le<std::uint32_t>(is);
  const auto T = io::read_le<std::uint32_t>(is);
  const auto seed = io::read_le<std::uint64_t>(is);
  const auto has_factor = io::read_le<std::uint8_t>(is);
  if (d == 0 || n == 0 || T == 0 || has_factor > 1) throw FormatError("PathSet header is invalid");
  PathSet ps(d, n, T, seed, has_factor == 1);
  io::read_doubles(is, ps.raw_states());
  if (has_factor) io::read_doubles(is, ps.raw_factors());
  for (double v : ps.raw_states())
    if (!std::isfinite(v)) throw FormatError("PathSet contains non-finite states");
  return ps;
}

inline void save_pathset(const std::string& path, const PathSet& ps) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("cannot open " + path + " for writing");
  write_pathset(os, ps);
  if (!os) throw ValidationError("failed writing " + path);
}

inline PathSet load_pathset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open " + path);
  return read_pathset(is);
}

/// CSV export: path, t, x1..xd.
inline void write_pathset_csv(std::ostream& os, const PathSet& ps) {
  os << "path,t";
  for (Index i = 0; i < ps.dim(); ++i) os << ",x" << (i + 1);
  os << '\n' << std::setprecision(17);
  for (long n = 0; n < ps.n_paths(); ++n) {
    for (long t = -1; t <= ps.horizon(); ++t) {
      os << n << ',' << t;
      const Vector x = ps.state(n, t);
      for (Index i = 0; i < ps.dim(); ++i) os << ',' << x[i];
      os << '\n';
    }
  }
}

}  // namespace npv
