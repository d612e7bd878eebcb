#pragma once

// Static geometric deep network f_theta: (R^D)^{M+1} -> N_d.
//
//   features  x^(0) = (x_0 - x~_0, ..., x_M - x~_M)
//   core      ReLU on hidden layers, affine output v in R^{d + d(d+1)/2}
//   readout   Exp at ybar = N(y~_m, exp(sym(y~_s))) of (v[:d], sym(v[d:]))
//
// Parameters live in one flat vector, layer-major: for each layer its
// row-major weight matrix then its bias, then the offsets x~_0..x~_M,
// then y~ (mean part first, then the packed symmetric part).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "npv/binary_io.hpp"
#include "npv/errors.hpp"
#include "npv/gaussian_manifold.hpp"
#include "npv/parallel.hpp"
#include "npv/rng.hpp"
#include "npv/sym_matrix.hpp"

namespace npv {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct GdnArch {
  Index input_dim = 2;   // D, dimension of one input state
  long memory = 1;       // M; the window holds M + 1 states
  Index output_dim = 2;  // d of the output Gaussian
  std::vector<Index> hidden{64, 64, 64};
  bool train_base = true;  // false freezes x~ and y~

  Index window() const { return static_cast<Index>(memory + 1); }
  Index in_features() const { return window() * input_dim; }
  Index out_features() const { return output_dim + packed_size(output_dim); }

  /// [d_0, hidden..., d_out].
  std::vector<Index> widths() const {
    std::vector<Index> w{in_features()};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(out_features());
    return w;
  }

  Index param_count() const {
    const auto w = widths();
    Index p = window() * input_dim + out_features();
    for (std::size_t j = 0; j + 1 < w.size(); ++j) p += w[j + 1] * (1 + w[j]);
    return p;
  }

  void validate() const {
    if (input_dim < 1 || output_dim < 1 || memory < 0) throw DomainError("GdnArch: dimensions must be positive");
    for (Index h : hidden)
      if (h < 1) throw DomainError("GdnArch: hidden widths must be positive");
  }

  friend bool operator==(const GdnArch&, const GdnArch&) = default;
};

/// Offsets of each block inside the flat parameter vector.
struct GdnLayout {
  std::vector<Index> weight_offset;
  std::vector<Index> bias_offset;
  std::vector<Index> widths;
  Index x_offset = 0;
  Index y_offset = 0;
  Index total = 0;

  explicit GdnLayout(const GdnArch& arch) : widths(arch.widths()) {
    Index k = 0;
    for (std::size_t j = 0; j + 1 < widths.size(); ++j) {
      weight_offset.push_back(k);
      k += widths[j + 1] * widths[j];
      bias_offset.push_back(k);
      k += widths[j + 1];
    }
    x_offset = k;
    k += arch.window() * arch.input_dim;
    y_offset = k;
    k += arch.out_features();
    total = k;
  }

  std::size_t layers() const { return weight_offset.size(); }
};

struct GdnParams {
  std::vector<Matrix> weights;  // weights[j] is d_{j+1} x d_j
  std::vector<Vector> biases;
  std::vector<Vector> x_offsets;  // M + 1 vectors of length D
  Vector y_offset;                // length d + d(d+1)/2
};

namespace detail {
inline void check_length(const Vector& theta, const GdnArch& arch) {
  if (theta.size() != arch.param_count()) {
    std::ostringstream os;
    os << "GDN parameter vector has length " << theta.size() << ", expected " << arch.param_count();
    throw DimensionError(os.str());
  }
}
}  // namespace detail

inline GdnParams unpack(const Vector& theta, const GdnArch& arch) {
  detail::check_length(theta, arch);
  const GdnLayout lay(arch);
  GdnParams p;
  for (std::size_t j = 0; j < lay.layers(); ++j) {
    const Index rows = lay.widths[j + 1], cols = lay.widths[j];
    p.weights.emplace_back(Eigen::Map<const RowMatrix>(theta.data() + lay.weight_offset[j], rows, cols));
    p.biases.emplace_back(theta.segment(lay.bias_offset[j], rows));
  }
  for (Index m = 0; m < arch.window(); ++m)
    p.x_offsets.emplace_back(theta.segment(lay.x_offset + m * arch.input_dim, arch.input_dim));
  p.y_offset = theta.segment(lay.y_offset, arch.out_features());
  return p;
}

inline Vector pack(const GdnParams& p, const GdnArch& arch) {
  const GdnLayout lay(arch);
  if (p.weights.size() != lay.layers() || p.biases.size() != lay.layers() ||
      static_cast<Index>(p.x_offsets.size()) != arch.window() || p.y_offset.size() != arch.out_features())
    throw DimensionError("pack: structured parameters do not match the architecture");
  Vector theta(lay.total);
  for (std::size_t j = 0; j < lay.layers(); ++j) {
    const Index rows = lay.widths[j + 1], cols = lay.widths[j];
    if (p.weights[j].rows() != rows || p.weights[j].cols() != cols || p.biases[j].size() != rows)
      throw DimensionError("pack: layer shape mismatch");
    Eigen::Map<RowMatrix>(theta.data() + lay.weight_offset[j], rows, cols) = p.weights[j];
    theta.segment(lay.bias_offset[j], rows) = p.biases[j];
  }
  for (Index m = 0; m < arch.window(); ++m) {
    if (p.x_offsets[static_cast<std::size_t>(m)].size() != arch.input_dim)
      throw DimensionError("pack: input offset length mismatch");
    theta.segment(lay.x_offset + m * arch.input_dim, arch.input_dim) = p.x_offsets[static_cast<std::size_t>(m)];
  }
  theta.segment(lay.y_offset, arch.out_features()) = p.y_offset;
  return theta;
}

/// Glorot-uniform weights, zero biases and offsets.
inline Vector init_gdn_params(const GdnArch& arch, std::uint64_t seed) {
  arch.validate();
  const GdnLayout lay(arch);
  Vector theta = Vector::Zero(lay.total);
  CounterRng rng(derive_seed(seed, "gdn-init"));
  for (std::size_t j = 0; j < lay.layers(); ++j) {
    const Index n = lay.widths[j + 1] * lay.widths[j];
    const double a = std::sqrt(6.0 / static_cast<double>(lay.widths[j] + lay.widths[j + 1]));
    for (Index k = 0; k < n; ++k) theta[lay.weight_offset[j] + k] = rng.uniform(-a, a);
  }
  return theta;
}

// ---------------------------------------------------------------------------
// Forward pass

/// Intermediate values kept for the backward pass.
struct GdnTrace {
  std::vector<Vector> inputs;  // input of each layer (inputs[0] = features)
  std::vector<Vector> pre;     // pre-activation of each layer
  Vector out_mean;
  Matrix e_half;      // exp(Sbar / 2) = ybar^{1/2}
  Matrix e_mhalf;     // exp(-Sbar / 2)
  SpectralDecomposition sd_half;  // of Sbar / 2
  Matrix x;           // sym(v[d:])
  SpectralDecomposition sd_y;     // of e_mhalf X e_mhalf
  Matrix k;           // exp of the above
  GaussianPoint output;
};

namespace detail {

inline GdnTrace gdn_trace(const Vector& theta, const GdnArch& arch, std::span<const Vector> window) {
  detail::check_length(theta, arch);
  if (static_cast<Index>(window.size()) != arch.window()) {
    std::ostringstream os;
    os << "gdn_forward: window holds " << window.size() << " states, expected " << arch.window();
    throw DimensionError(os.str());
  }
  const GdnLayout lay(arch);
  const Index d = arch.output_dim;
  GdnTrace tr;

  Vector h(arch.in_features());
  for (Index m = 0; m < arch.window(); ++m) {
    const Vector& xm = window[static_cast<std::size_t>(m)];
    if (xm.size() != arch.input_dim) throw DimensionError("gdn_forward: input state has wrong dimension");
    h.segment(m * arch.input_dim, arch.input_dim) =
        xm - theta.segment(lay.x_offset + m * arch.input_dim, arch.input_dim);
  }
  for (std::size_t j = 0; j < lay.layers(); ++j) {
    const Index rows = lay.widths[j + 1], cols = lay.widths[j];
    Eigen::Map<const RowMatrix> a(theta.data() + lay.weight_offset[j], rows, cols);
    Vector z = a * h + theta.segment(lay.bias_offset[j], rows);
    tr.inputs.push_back(std::move(h));
    h = (j + 1 < lay.layers()) ? Vector(z.cwiseMax(0.0)) : z;
    tr.pre.push_back(std::move(z));
  }
  const Vector& v = tr.pre.back();
  const Vector y = theta.segment(lay.y_offset, arch.out_features());

  tr.sd_half = spectral_decompose(0.5 * sym(Vector(y.tail(packed_size(d)))));
  tr.e_half = mat_exp(tr.sd_half).matrix();
  tr.e_mhalf = tr.sd_half.apply([](double l) { return std::exp(-l); });
  tr.x = sym(Vector(v.tail(packed_size(d)))).matrix();
  tr.sd_y = spectral_decompose(SymMatrix(Matrix(tr.e_mhalf * tr.x * tr.e_mhalf)));
  tr.k = mat_exp(tr.sd_y).matrix();
  tr.out_mean = y.head(d) + v.head(d);
  tr.output = {tr.out_mean, SpdMatrix(tr.e_half * tr.k * tr.e_half, SpdMatrix::Trusted{})};
  if (!tr.output.cov.matrix().allFinite()) throw NumericalError("gdn_forward: non-finite output covariance");
  return tr;
}

}  // namespace detail

inline GaussianPoint gdn_forward(const Vector& theta, const GdnArch& arch, std::span<const Vector> window) {
  return detail::gdn_trace(theta, arch, window).output;
}

// ---------------------------------------------------------------------------
// Loss and gradient

struct GdnSample {
  std::vector<Vector> window;
  GaussianPoint target;
};

/// Sum of squared geodesic distances between predictions and targets,
/// accumulated in index order.
inline double imse_loss(const Vector& theta, const GdnArch& arch, std::span<const GdnSample> batch) {
  if (batch.empty()) throw DomainError("imse_loss: empty batch");
  std::vector<double> per(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    per[i] = distance_squared(gdn_forward(theta, arch, batch[i].window), batch[i].target);
  });
  return std::accumulate(per.begin(), per.end(), 0.0);
}

namespace detail {

/// Euclidean gradient of C -> d^2(N(m, C), target) with respect to the
/// covariance entries: Q^{-1/2} (A^{-1} log A) Q^{-1/2}, A = Q^{-1/2} C Q^{-1/2}.
inline Matrix covariance_distance_gradient(const SpdMatrix& c, const SpdMatrix& q) {
  const SqrtPair qs = sqrt_pair(q);
  const SpectralDecomposition sd = spectral_decompose(SymMatrix(Matrix(qs.inv_sqrt * c.matrix() * qs.inv_sqrt)));
  const Matrix f = sd.apply([](double l) { return std::log(l) / l; });
  return qs.inv_sqrt * f * qs.inv_sqrt;
}

/// Loss of one sample and its gradient added into grad.
inline double sample_loss_gradient(const Vector& theta, const GdnArch& arch, const GdnSample& s, Vector& grad) {
  const GdnTrace tr = gdn_trace(theta, arch, s.window);
  const double loss = distance_squared(tr.output, s.target);
  const GdnLayout lay(arch);
  const Index d = arch.output_dim;

  const Vector g_mean = 2.0 * (tr.out_mean - s.target.mean);
  const Matrix g_c = covariance_distance_gradient(tr.output.cov, s.target.cov);

  // C = E K E with E = exp(Sbar/2), K = exp(Y), Y = E^- X E^-, E^- = exp(-Sbar/2).
  const Matrix& e = tr.e_half;
  const Matrix& em = tr.e_mhalf;
  const Matrix g_e = g_c * e * tr.k + tr.k * e * g_c;
  const Matrix g_k = e * g_c * e;
  const Matrix g_y = exp_frechet(tr.sd_y, g_k);
  const Matrix g_x = em * g_y * em;

  Vector delta(arch.out_features());
  delta.head(d) = g_mean;
  delta.tail(packed_size(d)) = sym_adjoint(g_x);

  if (arch.train_base) {
    const Matrix g_em = g_y * em * tr.x + tr.x * em * g_y;
    SpectralDecomposition sd_neg = tr.sd_half;
    sd_neg.eigenvalues = -sd_neg.eigenvalues;
    const Matrix g_s = 0.5 * exp_frechet(tr.sd_half, g_e) - 0.5 * exp_frechet(sd_neg, g_em);
    grad.segment(lay.y_offset, d) += g_mean;
    grad.segment(lay.y_offset + d, packed_size(d)) += sym_adjoint(g_s);
  }

  for (std::size_t jj = lay.layers(); jj-- > 0;) {
    const Index rows = lay.widths[jj + 1], cols = lay.widths[jj];
    Eigen::Map<RowMatrix>(grad.data() + lay.weight_offset[jj], rows, cols).noalias() +=
        delta * tr.inputs[jj].transpose();
    grad.segment(lay.bias_offset[jj], rows) += delta;
    Eigen::Map<const RowMatrix> a(theta.data() + lay.weight_offset[jj], rows, cols);
    Vector back = a.transpose() * delta;
    if (jj > 0) {
      const Vector& z = tr.pre[jj - 1];
      for (Index i = 0; i < back.size(); ++i)
        if (!(z[i] > 0.0)) back[i] = 0.0;
    }
    delta = std::move(back);
  }
  if (arch.train_base) grad.segment(lay.x_offset, arch.in_features()) -= delta;
  return loss;
}

/// Loss and gradient summed over batch[idx[i]] in index order.
inline double loss_and_gradient(const Vector& theta, const GdnArch& arch, std::span<const GdnSample> data,
                                std::span<const std::size_t> idx, Vector& grad) {
  const Index p = arch.param_count();
  std::vector<Vector> grads(idx.size());
  std::vector<double> losses(idx.size());
  parallel_for(idx.size(), [&](std::size_t i) {
    grads[i] = Vector::Zero(p);
    losses[i] = sample_loss_gradient(theta, arch, data[idx[i]], grads[i]);
  });
  grad = Vector::Zero(p);
  double loss = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    grad += grads[i];
    loss += losses[i];
  }
  return loss;
}

}  // namespace detail

/// Exact gradient of imse_loss by reverse accumulation.
inline Vector imse_gradient(const Vector& theta, const GdnArch& arch, std::span<const GdnSample> batch) {
  if (batch.empty()) throw DomainError("imse_gradient: empty batch");
  std::vector<std::size_t> idx(batch.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Vector grad;
  detail::loss_and_gradient(theta, arch, batch, idx, grad);
  return grad;
}

// ---------------------------------------------------------------------------
// ADAM

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 10.0;  // global gradient-norm clip
};

struct AdamState {
  Vector m;
  Vector v;
  long step = 0;
};

/// One bias-corrected ADAM update after clipping the gradient to norm clip.
inline void adam_step(AdamState& state, Vector& theta, Vector grad, const AdamConfig& cfg) {
  if (grad.size() != theta.size()) throw DimensionError("adam_step: gradient and parameter lengths differ");
  if (!grad.allFinite()) throw OptimizerError("adam_step: non-finite gradient");
  if (state.m.size() == 0) {
    state.m = Vector::Zero(theta.size());
    state.v = Vector::Zero(theta.size());
  }
  if (state.m.size() != theta.size()) throw DimensionError("adam_step: optimizer state length differs");
  const double norm = grad.norm();
  if (norm > cfg.clip) grad *= cfg.clip / norm;
  ++state.step;
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  theta.array() -= cfg.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + cfg.eps);
}

// ---------------------------------------------------------------------------
// Training

struct GdnTrainOptions {
  long epochs = 20;
  long batch_size = 16;
  AdamConfig adam{};
  std::uint64_t seed = 0;
};

struct GdnTrainResult {
  Vector theta;               // best parameters seen, initial ones included
  std::vector<double> trace;  // mean loss over the dataset after each epoch
  double initial_loss = 0.0;  // mean loss at the initial parameters
  double best_loss = 0.0;
};

/// Minibatch ADAM on the mean IMSE. Each epoch reshuffles with a stream
/// keyed by (seed, epoch). The returned parameters are the best among the
/// initial point and the end of every epoch.
inline GdnTrainResult train_gdn(std::span<const GdnSample> data, const GdnArch& arch, const Vector& init,
                                const GdnTrainOptions& opt) {
  if (data.empty()) throw DomainError("train_gdn: empty dataset");
  if (opt.batch_size < 1 || opt.epochs < 0) throw DomainError("train_gdn: invalid epochs or batch size");
  detail::check_length(init, arch);
  const double n = static_cast<double>(data.size());

  GdnTrainResult res;
  res.theta = init;
  res.initial_loss = imse_loss(init, arch, data) / n;
  res.best_loss = res.initial_loss;
  if (!std::isfinite(res.initial_loss)) throw TrainingError("train_gdn: non-finite initial loss", 0, 0);

  Vector theta = init;
  AdamState state;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Vector grad;
  for (long epoch = 0; epoch < opt.epochs; ++epoch) {
    CounterRng rng(derive_seed(opt.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    long batch = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size), ++batch) {
      const std::size_t len = std::min(order.size() - start, static_cast<std::size_t>(opt.batch_size));
      const std::span<const std::size_t> idx(order.data() + start, len);
      try {
        const double loss = detail::loss_and_gradient(theta, arch, data, idx, grad);
        if (!std::isfinite(loss) || !grad.allFinite()) throw OptimizerError("non-finite loss or gradient");
        adam_step(state, theta, grad / static_cast<double>(len), opt.adam);
      } catch (const NumericalError& e) {
        std::ostringstream os;
        os << "train_gdn: exploding or non-finite values at epoch " << epoch << ", batch " << batch << ": "
           << e.what();
        throw TrainingError(os.str(), epoch, batch);
      }
    }
    double loss = 0.0;
    try {
      loss = imse_loss(theta, arch, data) / n;
    } catch (const NumericalError& e) {
      throw TrainingError(std::string("train_gdn: evaluation failed: ") + e.what(), epoch, batch);
    }
    if (!std::isfinite(loss)) throw TrainingError("train_gdn: non-finite epoch loss", epoch, batch);
    res.trace.push_back(loss);
    if (loss < res.best_loss) {
      res.best_loss = loss;
      res.theta = theta;
    }
  }
  return res;
}

inline void write_loss_trace_csv(std::ostream& os, std::span<const double> trace) {
  os << "epoch,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < trace.size(); ++i) os << (i + 1) << ',' << trace[i] << '\n';
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "NPGD1" | u32 D | u32 M | u32 d | u8 train_base | u32 J | u32 hidden[J]
//   | u64 P | f64 theta[P]

inline constexpr std::string_view kGdnMagic = "NPGD1";

inline void write_gdn_arch(std::ostream& os, const GdnArch& arch) {
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(arch.input_dim));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(arch.memory));
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(arch.output_dim));
  io::write_le<std::uint8_t>(os, arch.train_base ? 1 : 0);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(arch.hidden.size()));
  for (Index h : arch.hidden) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(h));
}

inline GdnArch read_gdn_arch(std::istream& is) {
  GdnArch arch;
  arch.input_dim = io::read_le<std::uint32_t>(is);
  arch.memory = io::read_le<std::uint32_t>(is);
  arch.output_dim = io::read_le<std::uint32_t>(is);
  arch.train_base = io::read_le<std::uint8_t>(is) != 0;
  const auto j = io::read_le<std::uint32_t>(is);
  if (j > 4096) throw FormatError("GDN architecture has an implausible layer count");
  arch.hidden.clear();
  for (std::uint32_t i = 0; i < j; ++i) arch.hidden.push_back(io::read_le<std::uint32_t>(is));
  arch.validate();
  return arch;
}

inline void write_gdn(std::ostream& os, const GdnArch& arch, const Vector& theta) {
  detail::check_length(theta, arch);
  io::write_magic(os, kGdnMagic);
  write_gdn_arch(os, arch);
  io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(theta.size()));
  io::write_doubles(os, std::span<const double>(theta.data(), static_cast<std::size_t>(theta.size())));
}

inline std::pair<GdnArch, Vector> read_gdn(std::istream& is) {
  io::expect_magic(is, kGdnMagic);
  GdnArch arch = read_gdn_arch(is);
  const auto p = io::read_le<std::uint64_t>(is);
  if (static_cast<Index>(p) != arch.param_count()) throw FormatError("GDN checkpoint length does not match its architecture");
  Vector theta(static_cast<Index>(p));
  io::read_doubles(is, std::span<double>(theta.data(), static_cast<std::size_t>(p)));
  return {arch, theta};
}

}  // namespace npv
