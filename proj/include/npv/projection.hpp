#pragma once

// Non-parametric projections: the Frechet mean, on the Gaussian manifold, of
// the conditional law psi(x_{[0:t]}, S_{[0:t]}) over the latent factor.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "npv/binary_io.hpp"
#include "npv/errors.hpp"
#include "npv/gaussian_manifold.hpp"
#include "npv/parallel.hpp"
#include "npv/rng.hpp"
#include "npv/volterra.hpp"

namespace npv {

struct ProjectionMode {
  enum class Kind : std::uint8_t { ClosedForm = 0, MonteCarlo = 1 };
  Kind kind = Kind::ClosedForm;
  long samples = 0;

  static constexpr long kDefaultSamples = 1024;

  static ProjectionMode closed_form() { return {}; }
  static ProjectionMode monte_carlo(long n) {
    if (n < 1) throw DomainError("Monte Carlo projection needs at least one sample");
    return {Kind::MonteCarlo, n};
  }

  /// "closed_form", "mc" (1024 samples) or "mc:<n>".
  static ProjectionMode parse(const std::string& s) {
    if (s == "closed_form") return closed_form();
    if (s == "mc") return monte_carlo(kDefaultSamples);
    if (s.rfind("mc:", 0) == 0) {
      long n = 0;
      const char* first = s.data() + 3;
      const char* last = s.data() + s.size();
      const auto [ptr, ec] = std::from_chars(first, last, n);
      if (ec == std::errc{} && ptr == last && n > 0) return monte_carlo(n);
    }
    throw DomainError("unknown projection mode '" + s + "' (expected closed_form or mc:<n>)");
  }

  std::string to_string() const {
    return kind == Kind::ClosedForm ? "closed_form" : "mc:" + std::to_string(samples);
  }
};

/// psi = N(x_t + Drift, exp(sum_r k(t,r) [sigma(t, x_r) + s_r])).
inline GaussianPoint psi(const VolterraSpec& spec, long t, StateSpan path, std::span<const SymMatrix> s_path) {
  const SymMatrix log_cov = 2.0 * diffusion_tangent(spec, t, path, s_path);
  return {path.back() + drift(spec, t, path), mat_exp(log_cov)};
}

/// Empirical law of the given points with exact duplicates merged. Atoms
/// keep the order of their first occurrence.
inline EmpiricalLaw merged_law(const std::vector<GaussianPoint>& points) {
  if (points.empty()) throw DomainError("merged_law: no points");
  const Index d = points.front().dim();
  const Index rs = record_size(d);
  std::map<std::vector<double>, std::size_t> index;
  std::vector<std::size_t> counts;
  std::vector<const GaussianPoint*> uniq;
  std::vector<double> rec(static_cast<std::size_t>(rs));
  for (const auto& p : points) {
    to_record(p, rec.data());
    auto [it, inserted] = index.try_emplace(rec, uniq.size());
    if (inserted) {
      uniq.push_back(&p);
      counts.push_back(0);
    }
    ++counts[it->second];
  }
  EmpiricalLaw law;
  const double n = static_cast<double>(points.size());
  for (std::size_t i = 0; i < uniq.size(); ++i) law.atoms.emplace_back(static_cast<double>(counts[i]) / n, *uniq[i]);
  return law;
}

/// Karcher mean of n conditional laws psi(x_{[0:t]}, s^{(i)}_{[0:t]}), with
/// factor path i drawn from the stream keyed by (seed, i).
inline GaussianPoint project_monte_carlo(const VolterraSpec& spec, long t, StateSpan path, long n_samples,
                                         std::uint64_t seed, const KarcherOptions& opt = {}) {
  if (n_samples < 1) throw DomainError("project_monte_carlo: n_samples must be positive");
  std::vector<GaussianPoint> pts;
  pts.reserve(static_cast<std::size_t>(n_samples));
  for (long i = 0; i < n_samples; ++i) {
    CounterRng rng(derive_seed(seed, "mc", static_cast<std::uint64_t>(i)));
    const auto s = sample_factor_path(spec.factor, t, rng);
    pts.push_back(psi(spec, t, path, s));
  }
  return karcher_mean_detailed(merged_law(pts), opt).point;
}

/// Projection for the general process. ClosedForm is exact only when the
/// factor is identically zero (the law is then a single atom).
inline GaussianPoint project(const VolterraSpec& spec, long t, StateSpan path, const ProjectionMode& mode,
                             std::uint64_t seed, const KarcherOptions& opt = {}) {
  if (mode.kind == ProjectionMode::Kind::ClosedForm) {
    if (spec.factor.kind() != FactorSpec::Kind::Zero)
      throw DomainError("closed-form projection of a general process requires a zero factor");
    const std::vector<SymMatrix> zeros(static_cast<std::size_t>(t + 1), SymMatrix::zero(spec.d));
    return psi(spec, t, path, zeros);
  }
  return project_monte_carlo(spec, t, path, mode.samples, seed, opt);
}

// ---------------------------------------------------------------------------
// Ablation process

/// Karcher mean of n conditional laws with i.i.d. fair coins B^{(i)}.
inline GaussianPoint project_monte_carlo(const AblationProcess& proc, const Vector& x_prev, const Vector& x_t,
                                         long n_samples, std::uint64_t seed, const KarcherOptions& opt = {}) {
  if (n_samples < 1) throw DomainError("project_monte_carlo: n_samples must be positive");
  CounterRng rng(derive_seed(seed, "mc", 0));
  const SymMatrix s_on = SymMatrix::scaled_identity(proc.d, proc.lambda);
  const SymMatrix s_off = SymMatrix::zero(proc.d);
  std::vector<GaussianPoint> pts;
  pts.reserve(static_cast<std::size_t>(n_samples));
  const GaussianPoint on = proc.psi(x_prev, x_t, s_on, opt.policy);
  const GaussianPoint off = proc.psi(x_prev, x_t, s_off, opt.policy);
  for (long i = 0; i < n_samples; ++i) pts.push_back(rng.bernoulli() ? on : off);
  return karcher_mean_detailed(merged_law(pts), opt).point;
}

/// Exact barycenter of the two equally weighted atoms
/// N(m, (vs sigma)^2) and N(m, (vs sigma + lambda I)^2):
/// N(m, vs sigma^2 (sigma^{-2} (lambda I + vs sigma)^2)^{1/2}).
inline GaussianPoint project_two_atom_closed_form(const AblationProcess& proc, const Vector& x_prev,
                                                  const Vector& x_t, const MatrixPolicy& policy = {}) {
  const double vs = proc.varsigma_checked(x_t);
  const Index d = proc.d;
  if (proc.lambda == 0.0) return proc.psi(x_prev, x_t, SymMatrix::zero(d), policy);  // the atoms coincide
  const Matrix& s = proc.sigma.matrix();
  const Matrix s2 = s * s;
  const Matrix s_inv2 = mat_pow(proc.sigma, -2.0, policy).matrix();
  const Matrix shifted = proc.lambda * Matrix::Identity(d, d) + vs * s;
  const Matrix inner = s_inv2 * shifted * shifted;
  const SpdMatrix root = mat_pow(make_spd(inner, policy), 0.5, policy);
  return make_gaussian(x_t + proc.drift(x_prev, x_t), vs * s2 * root.matrix(), policy);
}

// ---------------------------------------------------------------------------
// Target datasets

/// Projection targets for every path n and time t = 0..T, row n (T+1) + t.
struct ProjectionTargets {
  Index d = 0;
  long n_paths = 0;
  long horizon = 0;
  ProjectionMode mode{};
  std::vector<GaussianPoint> points;

  const GaussianPoint& at(long n, long t) const {
    if (n < 0 || n >= n_paths || t < 0 || t > horizon) throw DomainError("ProjectionTargets: index out of range");
    return points[static_cast<std::size_t>(n * (horizon + 1) + t)];
  }
};

inline std::uint64_t target_seed(std::uint64_t seed, long n, long t, long horizon) {
  return derive_seed(seed, "project", static_cast<std::uint64_t>(n * (horizon + 1) + t));
}

inline ProjectionTargets build_projection_targets(const AblationProcess& proc, const PathSet& paths,
                                                  const ProjectionMode& mode, std::uint64_t seed,
                                                  const KarcherOptions& opt = {}) {
  proc.validate();
  if (paths.dim() != proc.d) throw DimensionError("build_projection_targets: path dimension differs from d");
  ProjectionTargets out{proc.d, paths.n_paths(), paths.horizon(), mode, {}};
  const long T = paths.horizon();
  out.points.resize(static_cast<std::size_t>(paths.n_paths() * (T + 1)));
  parallel_for(static_cast<std::size_t>(paths.n_paths()), [&](std::size_t ni) {
    const long n = static_cast<long>(ni);
    for (long t = 0; t <= T; ++t) {
      const Vector prev = paths.state(n, t - 1);
      const Vector cur = paths.state(n, t);
      auto& slot = out.points[static_cast<std::size_t>(n * (T + 1) + t)];
      if (mode.kind == ProjectionMode::Kind::ClosedForm)
        slot = project_two_atom_closed_form(proc, prev, cur, opt.policy);
      else
        slot = project_monte_carlo(proc, prev, cur, mode.samples, target_seed(seed, n, t, T), opt);
    }
  });
  return out;
}

inline ProjectionTargets build_projection_targets(const VolterraSpec& spec, const PathSet& paths,
                                                  const ProjectionMode& mode, std::uint64_t seed,
                                                  const KarcherOptions& opt = {}) {
  if (paths.dim() != spec.d) throw DimensionError("build_projection_targets: path dimension differs from d");
  ProjectionTargets out{spec.d, paths.n_paths(), paths.horizon(), mode, {}};
  const long T = paths.horizon();
  out.points.resize(static_cast<std::size_t>(paths.n_paths() * (T + 1)));
  parallel_for(static_cast<std::size_t>(paths.n_paths()), [&](std::size_t ni) {
    const long n = static_cast<long>(ni);
    const auto xs = paths.window(n, 0, T);
    for (long t = 0; t <= T; ++t) {
      const StateSpan past(xs.data(), static_cast<std::size_t>(t + 1));
      out.points[static_cast<std::size_t>(n * (T + 1) + t)] =
          project(spec, t, past, mode, target_seed(seed, n, t, T), opt);
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Finite-memory approximation

/// Projection computed from the last M + 1 states only: the path is
/// x_{[t-M:t]} left-padded with zeros to length t + 1. With a Monte Carlo
/// mode the factor draws match the untruncated projection for equal seeds.
inline GaussianPoint truncated_projection(const VolterraSpec& spec, long t, long M, StateSpan tail,
                                          const ProjectionMode& mode, std::uint64_t seed,
                                          const KarcherOptions& opt = {}) {
  if (M < 0 || M >= t) throw DomainError("truncated_projection: M must lie in [0, t)");
  if (static_cast<long>(tail.size()) != M + 1) throw DimensionError("truncated_projection: tail must hold M + 1 states");
  std::vector<Vector> padded(static_cast<std::size_t>(t - M), Vector::Zero(spec.d));
  padded.insert(padded.end(), tail.begin(), tail.end());
  return project(spec, t, StateSpan(padded.data(), padded.size()), mode, seed, opt);
}

/// Upper bound on d(P_t, P_t^{(M)}) for kernels with geometric or
/// polynomial decay:
///   exponential: c diam C alpha (alpha^t - alpha^M) / (alpha - 1)
///   polynomial:  c diam C (M + 1)^alpha (t - M)
inline double memory_decay_bound(const KernelSpec& kernel, long t, long M, double diam, double c) {
  if (M < 0 || M >= t) throw DomainError("memory_decay_bound: M must lie in [0, t)");
  if (!(diam >= 0.0) || !(c >= 0.0)) throw DomainError("memory_decay_bound: diam and c must be nonnegative");
  if (const auto* e = std::get_if<kernel::ExponentialDecay>(&kernel)) {
    const double a = e->alpha;
    return c * diam * e->C * a / (a - 1.0) * (std::pow(a, static_cast<double>(t)) - std::pow(a, static_cast<double>(M)));
  }
  if (const auto* p = std::get_if<kernel::PolynomialDecay>(&kernel)) {
    return c * diam * p->C * std::pow(static_cast<double>(M + 1), p->alpha) * static_cast<double>(t - M);
  }
  throw DomainError("memory_decay_bound: only decaying kernels have a bound");
}

// ---------------------------------------------------------------------------
// Target files
//
//   "NPPT1" | u32 d | u32 N | u32 T | u8 mode | u32 mc_samples
//   | f64 records[N (T+1)][d + d(d+1)/2]    (mean then vec(cov))

inline constexpr std::string_view kTargetsMagic = "NPPT1";

inline void write_targets(std::ostream& os, const ProjectionTargets& pt) {
  io::write_magic(os, kTargetsMagic);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(pt.d));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(pt.n_paths));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(pt.horizon));
  io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(pt.mode.kind));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(pt.mode.samples));
  std::vector<double> rec(static_cast<std::size_t>(record_size(pt.d)));
  for (const auto& p : pt.points) {
    to_record(p, rec.data());
    io::write_doubles(os, rec);
  }
}

inline ProjectionTargets read_targets(std::istream& is) {
  io::expect_magic(is, kTargetsMagic);
  ProjectionTargets pt;
  pt.d = io::read_le<std::uint32_t>(is);
  pt.n_paths = io::read_le<std::uint32_t>(is);
  pt.horizon = io::read_le<std::uint32_t>(is);
  const auto kind = io::read_le<std::uint8_t>(is);
  const auto samples = io::read_le<std::uint32_t>(is);
  if (pt.d == 0 || pt.n_paths == 0 || kind > 1) throw FormatError("targets header is invalid");
  pt.mode = kind == 0 ? ProjectionMode::closed_form() : ProjectionMode::monte_carlo(samples);
  const std::size_t rows = static_cast<std::size_t>(pt.n_paths * (pt.horizon + 1));
  std::vector<double> rec(static_cast<std::size_t>(record_size(pt.d)));
  pt.points.reserve(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    io::read_doubles(is, rec);
    pt.points.push_back(from_record(pt.d, rec.data()));
  }
  return pt;
}

/// CSV mirror: path, t, m1..md, then the packed covariance c11, c12, ...
inline void write_targets_csv(std::ostream& os, const ProjectionTargets& pt) {
  os << "path,t";
  for (Index i = 0; i < pt.d; ++i) os << ",m" << (i + 1);
  for (Index i = 0; i < pt.d; ++i)
    for (Index j = i; j < pt.d; ++j) os << ",c" << (i + 1) << (j + 1);
  os << '\n' << std::setprecision(17);
  std::vector<double> rec(static_cast<std::size_t>(record_size(pt.d)));
  for (long n = 0; n < pt.n_paths; ++n) {
    for (long t = 0; t <= pt.horizon; ++t) {
      to_record(pt.at(n, t), rec.data());
      os << n << ',' << t;
      for (double v : rec) os << ',' << v;
      os << '\n';
    }
  }
}

inline void save_targets(const std::string& path, const ProjectionTargets& pt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("cannot open " + path + " for writing");
  write_targets(os, pt);
  if (!os) throw ValidationError("failed writing " + path);
}

inline ProjectionTargets load_targets(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open " + path);
  return read_targets(is);
}

}  // namespace npv
