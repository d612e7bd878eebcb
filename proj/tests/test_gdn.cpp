#include <gtest/gtest.h>

#include <sstream>

#include "npv/gdn.hpp"
#include "npv/projection.hpp"
#include "support.hpp"

using namespace npv;
using namespace npv::testing;

namespace {

GdnArch small_arch(Index d = 2, long memory = 1, std::vector<Index> hidden = {4, 8, 4}) {
  GdnArch a;
  a.input_dim = d;
  a.memory = memory;
  a.output_dim = d;
  a.hidden = std::move(hidden);
  return a;
}

std::vector<GdnSample> random_batch(CounterRng& rng, const GdnArch& arch, int n) {
  std::vector<GdnSample> out;
  for (int i = 0; i < n; ++i) {
    GdnSample s;
    for (Index m = 0; m < arch.window(); ++m) s.window.push_back(random_vector(rng, arch.input_dim));
    s.target = random_point(rng, arch.output_dim, 1.0, 0.7);
    out.push_back(std::move(s));
  }
  return out;
}

Vector random_theta(CounterRng& rng, const GdnArch& arch, double scale = 0.5) {
  return random_vector(rng, arch.param_count(), scale);
}

// Forward pass rebuilt from the manifold primitives.
GaussianPoint forward_oracle(const Vector& theta, const GdnArch& arch, const std::vector<Vector>& window) {
  const GdnParams p = unpack(theta, arch);
  Vector h(arch.in_features());
  for (Index m = 0; m < arch.window(); ++m)
    h.segment(m * arch.input_dim, arch.input_dim) = window[m] - p.x_offsets[m];
  for (std::size_t j = 0; j < p.weights.size(); ++j) {
    h = p.weights[j] * h + p.biases[j];
    if (j + 1 < p.weights.size()) h = h.cwiseMax(0.0);
  }
  const Index d = arch.output_dim;
  const TangentVector ty{p.y_offset.head(d), sym(Vector(p.y_offset.tail(packed_size(d))))};
  const TangentVector tv{h.head(d), sym(Vector(h.tail(packed_size(d))))};
  return exp_map(exp_map(GaussianPoint::standard(d), ty), tv);
}

double max_rel_error(const Vector& g, const Vector& fd) {
  double worst = 0.0;
  for (Index i = 0; i < g.size(); ++i) {
    const double diff = std::abs(g[i] - fd[i]);
    if (diff < 1e-8) continue;
    worst = std::max(worst, diff / std::max(std::abs(g[i]), std::abs(fd[i])));
  }
  return worst;
}

Vector central_differences(const Vector& theta, const GdnArch& arch, std::span<const GdnSample> batch, double h) {
  Vector fd(theta.size());
  Vector tp = theta;
  for (Index i = 0; i < theta.size(); ++i) {
    tp[i] = theta[i] + h;
    const double up = imse_loss(tp, arch, batch);
    tp[i] = theta[i] - h;
    const double down = imse_loss(tp, arch, batch);
    tp[i] = theta[i];
    fd[i] = (up - down) / (2 * h);
  }
  return fd;
}

}  // namespace

TEST(Params, CountMatchesFormula) {
  GdnArch a;
  a.input_dim = 2;
  a.memory = 0;
  a.output_dim = 1;  // d_out = 1 + 1 = 2
  a.hidden = {3};
  EXPECT_EQ(a.widths(), (std::vector<Index>{2, 3, 2}));
  EXPECT_EQ(a.param_count(), 21);

  const GdnArch b = small_arch(2, 1, {64, 64, 64});
  // (1+M)D + d_out + sum d_{j+1}(1+d_j) with d = (4, 64, 64, 64, 5)
  EXPECT_EQ(b.param_count(), 2 * 2 + 5 + 64 * 5 + 64 * 65 + 64 * 65 + 5 * 65);
}

TEST(Params, PackUnpackLossless) {
  CounterRng rng(1);
  for (const auto& arch : {small_arch(), small_arch(3, 2, {5}), small_arch(1, 0, {}), small_arch(2, 1, {7, 3})}) {
    const Vector theta = random_theta(rng, arch);
    EXPECT_EQ(pack(unpack(theta, arch), arch), theta);
    const GdnParams z = unpack(Vector::Zero(arch.param_count()), arch);
    for (const auto& w : z.weights) EXPECT_EQ(w.norm(), 0.0);
    for (const auto& x : z.x_offsets) EXPECT_EQ(x.norm(), 0.0);
    EXPECT_EQ(z.y_offset.norm(), 0.0);
  }
  EXPECT_THROW(unpack(Vector::Zero(3), small_arch()), DimensionError);
}

TEST(Params, LayoutIsLayerMajorRowMajor) {
  const GdnArch a = small_arch(1, 0, {2});  // widths (1, 2, 2)
  Vector theta(a.param_count());
  for (Index i = 0; i < theta.size(); ++i) theta[i] = static_cast<double>(i);
  const GdnParams p = unpack(theta, a);
  EXPECT_EQ(p.weights[0](1, 0), 1.0);
  EXPECT_EQ(p.biases[0][0], 2.0);
  EXPECT_EQ(p.weights[1](0, 1), 5.0);
  EXPECT_EQ(p.weights[1](1, 0), 6.0);
  EXPECT_EQ(p.biases[1][1], 9.0);
  EXPECT_EQ(p.x_offsets[0][0], 10.0);
  EXPECT_EQ(p.y_offset[1], 12.0);
}

TEST(Params, GlorotInitIsDeterministicAndBounded) {
  const GdnArch a = small_arch();
  const Vector t0 = init_gdn_params(a, 3);
  EXPECT_EQ(t0, init_gdn_params(a, 3));
  EXPECT_NE(t0, init_gdn_params(a, 4));
  const GdnParams p = unpack(t0, a);
  const auto w = a.widths();
  for (std::size_t j = 0; j < p.weights.size(); ++j) {
    EXPECT_LE(p.weights[j].cwiseAbs().maxCoeff(), std::sqrt(6.0 / static_cast<double>(w[j] + w[j + 1])));
    EXPECT_EQ(p.biases[j].norm(), 0.0);
  }
}

TEST(Forward, ZeroParametersGiveTheAnchor) {
  CounterRng rng(2);
  const GdnArch a = small_arch();
  const Vector zero = Vector::Zero(a.param_count());
  for (int k = 0; k < 5; ++k) {
    const auto b = random_batch(rng, a, 1);
    EXPECT_EQ(gdn_forward(zero, a, b[0].window), GaussianPoint::standard(2));
  }
}

TEST(Forward, LinearLayerIsTheChart) {
  CounterRng rng(3);
  const GdnArch a = small_arch(2, 1, {});
  GdnParams p = unpack(Vector::Zero(a.param_count()), a);
  p.weights[0] = random_matrix(rng, 5, 4);
  p.biases[0] = random_vector(rng, 5);
  const Vector theta = pack(p, a);
  const std::vector<Vector> w{random_vector(rng, 2), random_vector(rng, 2)};
  Vector x(4);
  x << w[0], w[1];
  const Vector uv = p.weights[0] * x + p.biases[0];
  const GaussianPoint out = gdn_forward(theta, a, w);
  EXPECT_LT((out.mean - uv.head(2)).norm(), 1e-14);
  EXPECT_LT((out.cov.matrix() - mat_exp(sym(Vector(uv.tail(3)))).matrix()).norm(), 1e-12);
}

TEST(Forward, MatchesManifoldOracle) {
  CounterRng rng(4);
  for (int k = 0; k < 20; ++k) {
    const GdnArch a = small_arch(1 + k % 3, k % 3, {6, 5});
    const Vector theta = random_theta(rng, a, 0.4);
    const auto b = random_batch(rng, a, 1);
    const GaussianPoint got = gdn_forward(theta, a, b[0].window);
    const GaussianPoint want = forward_oracle(theta, a, b[0].window);
    EXPECT_LT((got.mean - want.mean).norm(), 1e-12);
    EXPECT_LT((got.cov.matrix() - want.cov.matrix()).norm(), 1e-10 * want.cov.frobenius_norm());
  }
}

TEST(Forward, WindowChecked) {
  const GdnArch a = small_arch();
  EXPECT_THROW(gdn_forward(Vector::Zero(a.param_count()), a, std::vector<Vector>{Vector::Zero(2)}), DimensionError);
  EXPECT_THROW(gdn_forward(Vector::Zero(a.param_count()), a, std::vector<Vector>(2, Vector::Zero(3))), DimensionError);
}

TEST(Forward, SampledSlopeIsBoundedAndStable) {
  CounterRng rng(5);
  const GdnArch a = small_arch();
  const Vector theta = random_theta(rng, a, 0.3);
  auto probe = [&] {
    CounterRng r(55);
    double worst = 0.0;
    for (int k = 0; k < 500; ++k) {
      std::vector<Vector> w{random_vector(r, 2), random_vector(r, 2)};
      std::vector<Vector> v = w;
      v[k % 2] += random_vector(r, 2, 1e-4);
      const double dx = (v[k % 2] - w[k % 2]).norm();
      worst = std::max(worst, distance(gdn_forward(theta, a, w), gdn_forward(theta, a, v)) / dx);
    }
    return worst;
  };
  const double s = probe();
  EXPECT_TRUE(std::isfinite(s));
  EXPECT_LT(s, 1e3);
  EXPECT_EQ(s, probe());
}

TEST(Loss, BasicCases) {
  CounterRng rng(6);
  const GdnArch a = small_arch();
  const Vector theta = random_theta(rng, a, 0.3);
  auto b = random_batch(rng, a, 4);
  for (auto& s : b) s.target = gdn_forward(theta, a, s.window);
  EXPECT_LT(imse_loss(theta, a, b), 1e-20);

  const Vector zero = Vector::Zero(a.param_count());
  const Vector m = random_vector(rng, 2);
  std::vector<GdnSample> one{{b[0].window, {m, SpdMatrix::identity(2)}}};
  EXPECT_NEAR(imse_loss(zero, a, one), m.squaredNorm(), 1e-14);
  EXPECT_THROW(imse_loss(zero, a, std::span<const GdnSample>{}), DomainError);
}

TEST(Loss, BruteForceSumAndPermutation) {
  CounterRng rng(7);
  const GdnArch a = small_arch();
  const Vector theta = random_theta(rng, a, 0.3);
  auto b = random_batch(rng, a, 9);
  double want = 0.0;
  for (const auto& s : b) want += distance_squared(forward_oracle(theta, a, s.window), s.target);
  const double got = imse_loss(theta, a, b);
  EXPECT_NEAR(got, want, 1e-10 * want);
  std::reverse(b.begin(), b.end());
  EXPECT_NEAR(imse_loss(theta, a, b), got, 1e-12 * got);
}

TEST(Gradient, CovarianceGradientMatchesDifferences) {
  CounterRng rng(8);
  for (int k = 0; k < 10; ++k) {
    const GaussianPoint q = random_point(rng, 3);
    const SpdMatrix c = random_spd(rng, 3);
    const Matrix g = detail::covariance_distance_gradient(c, q.cov);
    const SymMatrix e = random_sym(rng, 3);
    const double h = 1e-6;
    const GaussianPoint cp{q.mean, make_spd(c.matrix() + h * e.matrix())};
    const GaussianPoint cm{q.mean, make_spd(c.matrix() - h * e.matrix())};
    const double fd = (distance_squared(cp, q) - distance_squared(cm, q)) / (2 * h);
    EXPECT_NEAR((g.array() * e.matrix().array()).sum(), fd, 1e-7 * (1 + std::abs(fd)));
  }
}

TEST(Gradient, MatchesCentralDifferences) {
  CounterRng rng(9);
  for (int k = 0; k < 6; ++k) {
    GdnArch a = small_arch();
    a.train_base = k % 3 != 2;
    const Vector theta = random_theta(rng, a, 0.4);
    const auto b = random_batch(rng, a, 3);
    const Vector g = imse_gradient(theta, a, b);
    const Vector fd = central_differences(theta, a, b, 1e-5);
    const GdnLayout lay(a);
    const Index n = a.train_base ? lay.total : lay.x_offset;  // frozen offsets get no gradient
    EXPECT_LT(max_rel_error(g.head(n), fd.head(n)), 1e-4) << "config " << k;
    if (!a.train_base) {
      EXPECT_EQ(g.tail(lay.total - lay.x_offset).norm(), 0.0);
    }
  }
}

TEST(Gradient, StationaryAtExactFit) {
  CounterRng rng(10);
  const GdnArch a = small_arch();
  const Vector theta = random_theta(rng, a, 0.3);
  auto b = random_batch(rng, a, 5);
  for (auto& s : b) s.target = gdn_forward(theta, a, s.window);
  EXPECT_LT(imse_gradient(theta, a, b).norm(), 1e-8);
}

TEST(Gradient, DoubledBatchDoublesGradient) {
  CounterRng rng(11);
  const GdnArch a = small_arch();
  const Vector theta = random_theta(rng, a, 0.3);
  const auto b = random_batch(rng, a, 4);
  auto bb = b;
  bb.insert(bb.end(), b.begin(), b.end());
  const Vector g = imse_gradient(theta, a, b);
  EXPECT_LT((imse_gradient(theta, a, bb) - 2.0 * g).norm(), 1e-12 * g.norm());
}

TEST(Adam, ZeroGradientLeavesParameters) {
  AdamState st;
  st.m = Vector::Constant(3, 1.0);
  st.v = Vector::Constant(3, 1.0);
  st.step = 4;
  Vector theta = Vector::Constant(3, 2.0);
  const AdamConfig cfg{};
  adam_step(st, theta, Vector::Zero(3), cfg);
  EXPECT_EQ(st.m, Vector::Constant(3, 0.9));
  EXPECT_EQ(st.v, Vector::Constant(3, 0.999));
  // the parameters still move along the remaining momentum; with fresh state they do not
  AdamState fresh;
  Vector t2 = Vector::Constant(3, 2.0);
  adam_step(fresh, t2, Vector::Zero(3), cfg);
  EXPECT_EQ(t2, Vector::Constant(3, 2.0));
}

TEST(Adam, FirstStepClosedForm) {
  AdamState st;
  Vector theta = (Vector(3) << 1.0, -2.0, 0.5).finished();
  const Vector g = (Vector(3) << 0.3, -4.0, 1e-3).finished();
  AdamConfig cfg;
  cfg.lr = 0.01;
  const Vector before = theta;
  adam_step(st, theta, g, cfg);
  for (Index i = 0; i < 3; ++i)
    EXPECT_NEAR(theta[i], before[i] - 0.01 * g[i] / (std::abs(g[i]) + 1e-8), 1e-15);
}

TEST(Adam, ClipsToGlobalNorm) {
  AdamState st;
  Vector theta = Vector::Zero(2);
  AdamConfig cfg;
  cfg.clip = 1.0;
  adam_step(st, theta, (Vector(2) << 6.0, 8.0).finished(), cfg);
  EXPECT_NEAR(st.m.norm(), 0.1 * 1.0, 1e-15);
  EXPECT_NEAR(st.m[0] / st.m[1], 0.75, 1e-15);
}

TEST(Adam, RejectsNonFinite) {
  AdamState st;
  Vector theta = Vector::Zero(2);
  EXPECT_THROW(adam_step(st, theta, (Vector(2) << 1.0, std::nan("")).finished(), {}), OptimizerError);
  EXPECT_THROW(adam_step(st, theta, Vector::Zero(3), {}), DimensionError);
}

namespace {

std::vector<GdnSample> linear_dataset(long n_paths) {
  AblationProcess p;
  p.d = 2;
  p.mu = [](const Vector& x) { return Vector(-0.5 * x + Vector::Constant(2, 0.005)); };
  p.varsigma = [](const Vector&) { return 0.5; };
  p.sigma = make_spd((Matrix(2, 2) << 1.0, 0.3, 0.3, 0.8).finished());
  p.lambda = 0.0;
  p.w = 0.5;
  const PathSet ps = simulate_paths(p, n_paths, 4, 21);
  std::vector<GdnSample> out;
  for (long n = 0; n < n_paths; ++n)
    for (long t = 0; t <= 4; ++t)
      out.push_back({ps.window(n, t - 1, t), project_two_atom_closed_form(p, ps.state(n, t - 1), ps.state(n, t))});
  return out;
}

}  // namespace

TEST(Train, ZeroEpochsReturnsInit) {
  CounterRng rng(12);
  const GdnArch a = small_arch();
  const auto b = random_batch(rng, a, 8);
  const Vector init = init_gdn_params(a, 1);
  const auto r = train_gdn(b, a, init, {0, 4, {}, 0});
  EXPECT_EQ(r.theta, init);
  EXPECT_TRUE(r.trace.empty());
}

TEST(Train, LinearTargetsAreLearned) {
  const auto data = linear_dataset(16);
  const GdnArch a = small_arch(2, 1, {});
  GdnTrainOptions opt;
  opt.epochs = 200;
  opt.batch_size = 8;
  opt.adam.lr = 1e-2;
  const auto r = train_gdn(data, a, init_gdn_params(a, 2), opt);
  EXPECT_LT(r.best_loss, 1e-3);
  EXPECT_EQ(r.trace.size(), 200u);
  EXPECT_NEAR(imse_loss(r.theta, a, data) / static_cast<double>(data.size()), r.best_loss, 1e-12);
}

TEST(Train, DeterministicForSeed) {
  const auto data = linear_dataset(4);
  const GdnArch a = small_arch();
  GdnTrainOptions opt;
  opt.epochs = 5;
  opt.batch_size = 3;
  opt.seed = 9;
  const auto r1 = train_gdn(data, a, init_gdn_params(a, 2), opt);
  const auto r2 = train_gdn(data, a, init_gdn_params(a, 2), opt);
  EXPECT_EQ(r1.trace, r2.trace);
  EXPECT_EQ(r1.theta, r2.theta);
  opt.seed = 10;
  EXPECT_NE(train_gdn(data, a, init_gdn_params(a, 2), opt).trace, r1.trace);
}

TEST(Train, WarmRestartDoesNotIncreaseLoss) {
  const auto data = linear_dataset(4);
  const GdnArch a = small_arch();
  GdnTrainOptions opt;
  opt.epochs = 5;
  opt.batch_size = 4;
  opt.adam.lr = 5e-2;
  const auto first = train_gdn(data, a, init_gdn_params(a, 3), opt);
  const auto second = train_gdn(data, a, first.theta, opt);
  EXPECT_NEAR(second.initial_loss, first.best_loss, 1e-12);
  EXPECT_LE(second.best_loss, second.initial_loss + 1e-9);
}

TEST(Train, NonFiniteDataReportsContext) {
  CounterRng rng(13);
  const GdnArch a = small_arch();
  auto b = random_batch(rng, a, 4);
  b[2].window[0][0] = std::numeric_limits<double>::infinity();
  try {
    (void)train_gdn(b, a, init_gdn_params(a, 1), {3, 2, {}, 0});
    FAIL() << "expected a numerical failure";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.epoch(), 0);
  } catch (const NumericalError&) {
  }
  EXPECT_THROW(train_gdn(std::span<const GdnSample>{}, a, init_gdn_params(a, 1), {}), DomainError);
}

TEST(Checkpoint, RoundTripAndTrace) {
  CounterRng rng(14);
  GdnArch a = small_arch(3, 2, {5, 6});
  a.train_base = false;
  const Vector theta = random_theta(rng, a);
  std::stringstream ss;
  write_gdn(ss, a, theta);
  const auto [arch, back] = read_gdn(ss);
  EXPECT_EQ(arch, a);
  EXPECT_EQ(back, theta);

  std::string bytes = [&] {
    std::ostringstream os;
    write_gdn(os, a, theta);
    return os.str();
  }();
  std::istringstream cut(bytes.substr(0, bytes.size() - 9));
  EXPECT_THROW(read_gdn(cut), FormatError);

  std::ostringstream os;
  const std::vector<double> tr{0.5, 0.25};
  write_loss_trace_csv(os, tr);
  EXPECT_EQ(os.str(), "epoch,loss\n1,0.5\n2,0.25\n");
}
