// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.
//
//   acceptance [--only 1,4,9]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../support.hpp"
#include "CLI11.hpp"
#include "npv/harness.hpp"

using namespace npv;
using namespace npv::testing;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

double gap(const GaussianPoint& a, const GaussianPoint& b) {
  return (a.mean - b.mean).norm() + (a.cov.matrix() - b.cov.matrix()).norm();
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", x);
  return buf;
}

// 1. exp/log round trip, symmetry, triangle and NPC midpoint inequalities.
Outcome geometry() {
  CounterRng rng(101);
  const Index dims[] = {1, 2, 5, 10};
  double round_trip = 0.0, asym = 0.0, triangle = 0.0, npc = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const Index d = dims[k % 4];
    const GaussianPoint p = random_point(rng, d), q = random_point(rng, d), r = random_point(rng, d);
    round_trip = std::max(round_trip, gap(exp_map(p, log_map(p, q)), q) / (1.0 + q.cov.frobenius_norm()));
    const double pq = distance(p, q), qp = distance(q, p);
    asym = std::max(asym, std::abs(pq - qp));
    triangle = std::max(triangle, distance(p, r) - pq - distance(q, r));
    const GaussianPoint m = geodesic_point(p, q, 0.5);
    const double rp = distance(r, p), rq = distance(r, q), rm = distance(r, m);
    npc = std::max(npc, rm * rm - (0.5 * rp * rp + 0.5 * rq * rq - 0.25 * pq * pq));
  }
  Outcome o;
  o.pass = round_trip < 1e-8 && asym < 1e-12 && triangle <= 1e-9 && npc <= 1e-8;
  o.detail = "round trip " + fmt(round_trip) + ", asymmetry " + fmt(asym) + ", triangle excess " + fmt(triangle) +
             ", midpoint excess " + fmt(npc);
  return o;
}

// 2. Closed-form distances on identity and diagonal covariances.
Outcome distance_oracle() {
  CounterRng rng(102);
  double worst = 0.0;
  for (int k = 0; k < 200; ++k) {
    const Index d = 1 + k % 6;
    const Vector m0 = random_vector(rng, d), m1 = random_vector(rng, d);
    worst = std::max(worst, std::abs(distance({m0, SpdMatrix::identity(d)}, {m1, SpdMatrix::identity(d)}) -
                                     (m0 - m1).norm()));
    Vector a(d), b(d);
    for (Index i = 0; i < d; ++i) {
      a[i] = std::exp(rng.uniform(-2.0, 2.0));
      b[i] = std::exp(rng.uniform(-2.0, 2.0));
    }
    double hand = (m0 - m1).squaredNorm();
    for (Index i = 0; i < d; ++i) hand += 0.5 * std::pow(std::log(b[i] / a[i]), 2);
    const GaussianPoint p = make_gaussian(m0, a.asDiagonal().toDenseMatrix());
    const GaussianPoint q = make_gaussian(m1, b.asDiagonal().toDenseMatrix());
    worst = std::max(worst, std::abs(distance(p, q) - std::sqrt(hand)));
  }
  const GaussianPoint e2{Vector::Zero(2), make_spd(std::exp(2.0) * Matrix::Identity(2, 2))};
  const double example = distance(GaussianPoint::standard(2), e2);
  worst = std::max(worst, std::abs(example - 2.0));
  return {worst < 1e-12, "max deviation " + fmt(worst) + ", e^2 I example " + fmt(example)};
}

// Exact W1 between two-atom laws: the coupling has one free mass s and a
// linear cost, so the optimum sits at an end of its feasible interval.
double w1_two_atoms(const EmpiricalLaw& p, const EmpiricalLaw& q) {
  const double p1 = p.atoms[0].first, q1 = q.atoms[0].first;
  double c[2][2];
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) c[i][j] = distance(p.atoms[i].second, q.atoms[j].second);
  auto cost = [&](double s) {
    return s * c[0][0] + (p1 - s) * c[0][1] + (q1 - s) * c[1][0] + (1.0 - p1 - q1 + s) * c[1][1];
  };
  return std::min(cost(std::max(0.0, p1 + q1 - 1.0)), cost(std::min(p1, q1)));
}

// 3. Barycenters: midpoint, single atom, contraction against W1.
Outcome barycenter() {
  CounterRng rng(103);
  double mid = 0.0;
  bool single = true;
  for (int k = 0; k < 500; ++k) {
    const Index d = 1 + k % 5;
    const GaussianPoint p = random_point(rng, d), q = random_point(rng, d);
    mid = std::max(mid, gap(karcher_mean(EmpiricalLaw::uniform({p, q})), geodesic_point(p, q, 0.5)));
    single = single && karcher_mean(EmpiricalLaw::uniform({p})) == p;
  }
  double excess = -1e300;
  for (int k = 0; k < 200; ++k) {
    const Index d = 1 + k % 4;
    auto law = [&] {
      const double w = rng.uniform(0.05, 0.95);
      EmpiricalLaw l;
      l.atoms = {{w, random_point(rng, d)}, {1.0 - w, random_point(rng, d)}};
      return l;
    };
    const EmpiricalLaw a = law(), b = law();
    excess = std::max(excess, distance(karcher_mean(a), karcher_mean(b)) - w1_two_atoms(a, b));
  }
  return {mid < 1e-8 && single && excess <= 1e-6, "midpoint gap " + fmt(mid) + ", single atom " +
                                                      (single ? "exact" : "inexact") + ", contraction excess " +
                                                      fmt(excess)};
}

AblationProcess random_ablation(CounterRng& rng, Index d, double lambda) {
  AblationProcess p;
  p.d = d;
  const Vector a = random_vector(rng, d, 0.3);
  p.mu = [a](const Vector& x) { return Vector((a.array() * x.array().sin()).matrix()); };
  const double c = rng.uniform(0.05, 1.5);
  p.varsigma = [c](const Vector& x) { return c * (1.0 + 0.1 * std::tanh(x.sum())); };
  p.sigma = random_spd(rng, d, 0.8);
  p.lambda = lambda;
  p.w = rng.uniform(0.05, 1.0);
  return p;
}

// 4. Two-atom closed form against the Karcher mean, and the lambda = 0 collapse.
Outcome closed_form() {
  CounterRng rng(104);
  double worst = 0.0;
  for (int k = 0; k < 500; ++k) {
    const Index d = k % 2 ? 5 : 2;
    const AblationProcess p = random_ablation(rng, d, rng.uniform(0.0, 2.0));
    const Vector xp = random_vector(rng, d), xt = random_vector(rng, d);
    const GaussianPoint off = p.psi(xp, xt, SymMatrix::zero(d));
    const GaussianPoint on = p.psi(xp, xt, SymMatrix::scaled_identity(d, p.lambda));
    worst = std::max(worst, gap(project_two_atom_closed_form(p, xp, xt), karcher_mean(EmpiricalLaw::uniform({off, on}))));
  }
  bool collapse = true;
  for (int k = 0; k < 100; ++k) {
    const Index d = k % 2 ? 5 : 2;
    const AblationProcess p = random_ablation(rng, d, 0.0);
    const Vector xp = random_vector(rng, d), xt = random_vector(rng, d);
    const Matrix vs_sigma = p.varsigma(xt) * p.sigma.matrix();
    collapse = collapse && project_two_atom_closed_form(p, xp, xt).cov.matrix() == vs_sigma * vs_sigma;
  }
  return {worst < 1e-8 && collapse,
          "max gap to Karcher " + fmt(worst) + ", lambda = 0 " + (collapse ? "exact" : "inexact")};
}

// 5. Analytic gradient against central differences.
Outcome gradients() {
  CounterRng rng(105);
  double worst = 0.0;
  for (int k = 0; k < 50; ++k) {
    GdnArch a;
    a.input_dim = 2;
    a.output_dim = 2;
    a.memory = k % 3;
    a.hidden = std::vector<Index>(static_cast<std::size_t>(k % 3), 3 + k % 4);
    a.train_base = k % 5 != 4;
    const Vector theta = random_vector(rng, a.param_count(), 0.4);
    std::vector<GdnSample> batch;
    for (int i = 0; i < 1 + k % 4; ++i) {
      GdnSample s;
      for (Index m = 0; m < a.window(); ++m) s.window.push_back(random_vector(rng, 2));
      s.target = random_point(rng, 2, 1.0, 0.7);
      batch.push_back(std::move(s));
    }
    const Vector g = imse_gradient(theta, a, batch);
    const GdnLayout lay(a);
    const Index n = a.train_base ? lay.total : lay.x_offset;
    const double h = 1e-5;
    Vector tp = theta;
    for (Index i = 0; i < n; ++i) {
      tp[i] = theta[i] + h;
      const double up = imse_loss(tp, a, batch);
      tp[i] = theta[i] - h;
      const double down = imse_loss(tp, a, batch);
      tp[i] = theta[i];
      const double fd = (up - down) / (2 * h);
      const double diff = std::abs(g[i] - fd);
      if (diff < 1e-8) continue;  // below the difference quotient's own noise
      worst = std::max(worst, diff / std::max(std::abs(g[i]), std::abs(fd)));
    }
  }
  return {worst < 1e-4, "max relative error " + fmt(worst)};
}

// 6. Truncation error decays geometrically at rate alpha.
Outcome memory_decay() {
  const Index d = 2;
  const double alpha = 0.5;
  VolterraSpec spec;
  spec.d = d;
  spec.mu = [](long, const Vector& x) { return Vector(0.5 * x.array().tanh().square().matrix()); };
  spec.sigma = [d](long, const Vector& x) {
    Matrix m = Matrix::Zero(d, d);
    for (Index i = 0; i < d; ++i) m(i, i) = -4.0 + std::tanh(x[i]) * std::tanh(x[i]);
    return SymMatrix(m);
  };
  spec.bound_M = 4.0 * std::sqrt(static_cast<double>(d));
  spec.kernel = kernel::ExponentialDecay{0.5, alpha};
  spec.factor = FactorSpec::zero(d);
  spec.x0 = Vector::Constant(d, 1.0);
  const long t = 20;
  const PathSet paths = simulate_paths(spec, 1, t, 106);
  const std::vector<Vector> xs = paths.window(0, 0, t);
  const GaussianPoint full = project(spec, t, xs, ProjectionMode::closed_form(), 0);
  std::vector<double> err;
  for (long M = 0; M < t; ++M) {
    const StateSpan tail(xs.data() + (t - M), static_cast<std::size_t>(M + 1));
    err.push_back(distance(full, truncated_projection(spec, t, M, tail, ProjectionMode::closed_form(), 0)));
  }
  bool monotone = true;
  for (std::size_t M = 1; M < err.size(); ++M) monotone = monotone && err[M] <= err[M - 1];
  // err[t - 1] drops only x_0, whose weight is zero for t > 0, so it vanishes.
  double sx = 0, sy = 0, sxx = 0, sxy = 0, n = 0;
  for (long M = 1; M <= t - 2; ++M) {
    const double y = std::log(err[static_cast<std::size_t>(M)]);
    sx += M;
    sy += y;
    sxx += static_cast<double>(M) * M;
    sxy += M * y;
    n += 1;
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  const double rel = std::abs(slope / std::log(alpha) - 1.0);
  return {monotone && rel <= 0.25, std::string(monotone ? "nonincreasing" : "not monotone") + ", slope " +
                                       fmt(slope) + " vs ln alpha " + fmt(std::log(alpha)) + " (off by " +
                                       fmt(100 * rel) + "%), error at M = t - 1 " + fmt(err.back())};
}

double mean(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

ExperimentConfig desk_config() { return ExperimentConfig{}; }

// 7. GDN test loss against lambda at desk scale.
Outcome lambda_trend() {
  const double lambdas[] = {0.0, 0.25, 0.5, 1.0};
  const std::uint64_t seeds[] = {0, 1, 2};
  std::vector<std::vector<double>> loss(3);
  for (std::size_t s = 0; s < 3; ++s)
    for (double l : lambdas) {
      ExperimentConfig c = desk_config();
      c.seed = seeds[s];
      c.process.lambda = l;
      loss[s].push_back(mean(run_pipeline(c).gdn));
    }
  std::vector<double> avg(4, 0.0);
  for (const auto& row : loss)
    for (std::size_t i = 0; i < 4; ++i) avg[i] += row[i] / 3.0;
  int monotone_seeds = 0;
  for (const auto& row : loss) monotone_seeds += std::is_sorted(row.begin(), row.end());
  Outcome o;
  o.pass = avg[0] < 1e-3 && avg[3] >= 10.0 * avg[0] && monotone_seeds >= 2;
  o.detail = "mean GDN loss by lambda";
  for (std::size_t i = 0; i < 4; ++i) o.detail += " " + fmt(avg[i]);
  o.detail += ", ratio " + fmt(avg[3] / avg[0]) + ", monotone in " + std::to_string(monotone_seeds) + "/3 seeds";
  return o;
}

// 8. HGN matches the experts on a constant sequence and stays within 100x of
// them on the base run.
Outcome hgn_fidelity() {
  const ExperimentConfig c = desk_config();
  PipelineArtifacts a;
  const Report base = run_pipeline(c, {}, &a);

  ExpertSequence constant;
  constant.thetas.assign(a.experts->thetas.size(), a.experts->thetas[static_cast<std::size_t>(c.train_end) - 1]);
  auto [spec, hyper] = train_hgn_stage(c, constant);
  const Report r = evaluate_stage(c, *a.paths, *a.targets, constant, spec, hyper.vartheta, hyper.hyper_mse);
  double worst = 0.0;
  for (std::size_t i = 0; i < r.times.size(); ++i) {
    worst = std::max(worst, std::abs(r.hgn_one_step[i] - r.gdn[i]));
    worst = std::max(worst, std::abs(r.hgn_recurrent[i] - r.gdn[i]));
  }
  const double ratio = mean(base.hgn_recurrent) / mean(base.gdn);
  return {hyper.hyper_mse < 1e-6 && worst <= 1e-10 && ratio <= 100.0,
          "constant sequence hyper-MSE " + fmt(hyper.hyper_mse) + ", max loss gap " + fmt(worst) +
              "; base run recurrent/GDN " + fmt(ratio) + " (hyper-MSE " + fmt(base.hyper_mse) + ")"};
}

// 9. Identical config and seed give identical numbers.
Outcome determinism() {
  const ExperimentConfig c = desk_config();
  const std::string a = report_payload(run_pipeline(c)).dump();
  const std::string b = report_payload(run_pipeline(c)).dump();
  return {a == b, std::to_string(a.size()) + " payload bytes, " + (a == b ? "identical" : "different")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> only;
  app.add_option("--only", only, "Criteria to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"geometry", geometry},           {"distance oracle", distance_oracle}, {"barycenter", barycenter},
      {"closed-form projection", closed_form}, {"gradient", gradients},   {"memory decay", memory_decay},
      {"lambda trend", lambda_trend},   {"HGN fidelity", hgn_fidelity},       {"determinism", determinism},
  };
  const std::set<int> chosen(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!chosen.empty() && !chosen.count(id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << ". " << criteria[i].first << ": " << o.detail << " ["
              << fmt(secs) << " s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
