#pragma once

// Hypergeometric network: a ReLU hypernetwork h evolving a latent state
// z_t = (theta_t, emb(t)) whose first P coordinates are the GDN
// parameters used at time t.

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/SVD>

#include "npv/binary_io.hpp"
#include "npv/errors.hpp"
#include "npv/gdn.hpp"
#include "npv/rng.hpp"

namespace npv {

struct HgnSpec {
  GdnArch gdn;
  Index q = 8;                         // auxiliary time coordinates
  std::vector<Index> hidden{256, 256, 256};
  double time_scale = 1.0;             // emb(t) = (t / time_scale) repeated q times
  Vector z0;                           // initial latent state

  Index param_dim() const { return gdn.param_count(); }
  Index latent_dim() const { return param_dim() + q; }

  std::vector<Index> widths() const {
    std::vector<Index> w{latent_dim()};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(latent_dim());
    return w;
  }

  Index hyper_param_count() const {
    const auto w = widths();
    Index p = 0;
    for (std::size_t j = 0; j + 1 < w.size(); ++j) p += w[j + 1] * (1 + w[j]);
    return p;
  }

  void validate() const {
    gdn.validate();
    if (q < 1) throw DomainError("HgnSpec: q must be positive");
    if (!(time_scale > 0.0)) throw DomainError("HgnSpec: time_scale must be positive");
    for (Index h : hidden)
      if (h < 1) throw DomainError("HgnSpec: hidden widths must be positive");
    if (z0.size() != 0 && z0.size() != latent_dim()) throw DimensionError("HgnSpec: z0 has wrong length");
  }
};

/// The readout: first P coordinates of z.
inline Vector readout(const HgnSpec& spec, const Vector& z) {
  if (z.size() != spec.latent_dim()) throw DimensionError("readout: latent state has wrong length");
  return z.head(spec.param_dim());
}

/// z = (theta, t / time_scale, ..., t / time_scale).
inline Vector embed(const HgnSpec& spec, const Vector& theta, long t) {
  if (theta.size() != spec.param_dim()) throw DimensionError("embed: parameter vector has wrong length");
  Vector z(spec.latent_dim());
  z.head(spec.param_dim()) = theta;
  z.tail(spec.q).setConstant(static_cast<double>(t) / spec.time_scale);
  return z;
}

namespace detail {

struct MlpLayout {
  std::vector<Index> widths;
  std::vector<Index> weight_offset;
  std::vector<Index> bias_offset;
  Index total = 0;

  explicit MlpLayout(std::vector<Index> w) : widths(std::move(w)) {
    for (std::size_t j = 0; j + 1 < widths.size(); ++j) {
      weight_offset.push_back(total);
      total += widths[j + 1] * widths[j];
      bias_offset.push_back(total);
      total += widths[j + 1];
    }
  }
  std::size_t layers() const { return weight_offset.size(); }
};

/// Column-batched forward pass; returns the input of every layer and the
/// output. Hidden layers use ReLU, the last layer is affine.
inline Matrix mlp_forward(const Vector& w, const MlpLayout& lay, const Matrix& in, std::vector<Matrix>* inputs) {
  Matrix h = in;
  for (std::size_t j = 0; j < lay.layers(); ++j) {
    const Index rows = lay.widths[j + 1], cols = lay.widths[j];
    Eigen::Map<const RowMatrix> a(w.data() + lay.weight_offset[j], rows, cols);
    Matrix z = a * h;
    z.colwise() += w.segment(lay.bias_offset[j], rows);
    if (inputs) inputs->push_back(std::move(h));
    h = (j + 1 < lay.layers()) ? Matrix(z.cwiseMax(0.0)) : std::move(z);
  }
  return h;
}

inline void check_hyper_length(const Vector& vartheta, const HgnSpec& spec) {
  if (vartheta.size() != spec.hyper_param_count()) {
    std::ostringstream os;
    os << "hypernetwork parameter vector has length " << vartheta.size() << ", expected "
       << spec.hyper_param_count();
    throw DimensionError(os.str());
  }
}

}  // namespace detail

inline Vector hyper_forward(const Vector& vartheta, const HgnSpec& spec, const Vector& z) {
  detail::check_hyper_length(vartheta, spec);
  if (z.size() != spec.latent_dim()) throw DimensionError("hyper_forward: latent state has wrong length");
  const detail::MlpLayout lay(spec.widths());
  return detail::mlp_forward(vartheta, lay, z, nullptr).col(0);
}

inline Vector init_hyper_params(const HgnSpec& spec, std::uint64_t seed) {
  const detail::MlpLayout lay(spec.widths());
  Vector w = Vector::Zero(lay.total);
  CounterRng rng(derive_seed(seed, "hyper-init"));
  for (std::size_t j = 0; j < lay.layers(); ++j) {
    const Index n = lay.widths[j + 1] * lay.widths[j];
    const double a = std::sqrt(6.0 / static_cast<double>(lay.widths[j] + lay.widths[j + 1]));
    for (Index k = 0; k < n; ++k) w[lay.weight_offset[j] + k] = rng.uniform(-a, a);
  }
  return w;
}

// ---------------------------------------------------------------------------
// Rollout

struct HgnRollout {
  std::vector<GaussianPoint> outputs;  // one per t in [t_first, t_last]
  std::vector<Vector> latents;         // z_0 .. z_{t_last}
};

/// z_{t+1} = h(z_t) for `steps` steps starting from z.
inline std::vector<Vector> latent_trajectory(const HgnSpec& spec, const Vector& vartheta, const Vector& z, long steps) {
  std::vector<Vector> out{z};
  for (long s = 0; s < steps; ++s) out.push_back(hyper_forward(vartheta, spec, out.back()));
  return out;
}

/// Window x_{t-M..t} from a sequence holding x_{-1}, x_0, ..., x_T (so
/// x_t sits at index t + 1). States before x_{-1} are zero.
inline std::vector<Vector> window_at(std::span<const Vector> x_seq, long t, long memory, Index dim) {
  std::vector<Vector> w;
  for (long r = t - memory; r <= t; ++r) {
    const long idx = r + 1;
    if (idx >= static_cast<long>(x_seq.size())) throw DomainError("window_at: sequence does not cover t");
    w.push_back(idx < 0 ? Vector(Vector::Zero(dim)) : x_seq[static_cast<std::size_t>(idx)]);
  }
  return w;
}

/// Representation F(x)_t = f_{L(z_t)}(x_{[t-M:t]}) with z_0 = spec.z0 and
/// z_t = h(z_{t-1}).
inline HgnRollout hgn_rollout(const HgnSpec& spec, const Vector& vartheta, std::span<const Vector> x_seq,
                              long t_first, long t_last) {
  spec.validate();
  if (spec.z0.size() != spec.latent_dim()) throw DimensionError("hgn_rollout: spec.z0 is not set");
  if (t_first < 0 || t_last < t_first) throw DomainError("hgn_rollout: invalid time range");
  HgnRollout r;
  r.latents = latent_trajectory(spec, vartheta, spec.z0, t_last);
  for (long t = t_first; t <= t_last; ++t) {
    const auto w = window_at(x_seq, t, spec.gdn.memory, spec.gdn.input_dim);
    r.outputs.push_back(gdn_forward(readout(spec, r.latents[static_cast<std::size_t>(t)]), spec.gdn, w));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Training

struct HyperTrainOptions {
  long epochs = 200;
  AdamConfig adam{};
  std::uint64_t seed = 0;
  bool polish = true;  // refit the last layer by least squares after ADAM
  double ridge = 0.0;  // relative ridge strength of the refit
};

struct HyperTrainResult {
  Vector vartheta;
  Vector z0;
  double hyper_mse = 0.0;     // parameter block, see hyper_mse()
  double latent_mse = 0.0;    // full latent error
  std::vector<double> trace;  // latent error after each epoch
};

/// Pairs (z_t, z_{t+1}) for t = 0..n-2 as matrix columns.
inline std::pair<Matrix, Matrix> hyper_pairs(const HgnSpec& spec, std::span<const Vector> theta_seq) {
  const long n = static_cast<long>(theta_seq.size());
  Matrix in(spec.latent_dim(), n - 1), out(spec.latent_dim(), n - 1);
  for (long t = 0; t + 1 < n; ++t) {
    in.col(t) = embed(spec, theta_seq[static_cast<std::size_t>(t)], t);
    out.col(t) = embed(spec, theta_seq[static_cast<std::size_t>(t + 1)], t + 1);
  }
  return {in, out};
}

/// Hyper-MSE: sum over t of ||L(h(z_t)) - theta_{t+1}||^2, the parameter
/// block of the latent error.
inline double hyper_mse(const HgnSpec& spec, const Vector& vartheta, std::span<const Vector> theta_seq) {
  detail::check_hyper_length(vartheta, spec);
  const auto [in, target] = hyper_pairs(spec, theta_seq);
  const detail::MlpLayout lay(spec.widths());
  const Matrix out = detail::mlp_forward(vartheta, lay, in, nullptr);
  return (out.topRows(spec.param_dim()) - target.topRows(spec.param_dim())).squaredNorm();
}

/// Latent error sum over t of ||h(z_t) - z_{t+1}||^2, the quantity ADAM
/// minimizes (parameter block plus time coordinates).
inline double latent_mse(const HgnSpec& spec, const Vector& vartheta, std::span<const Vector> theta_seq) {
  detail::check_hyper_length(vartheta, spec);
  const auto [in, target] = hyper_pairs(spec, theta_seq);
  const detail::MlpLayout lay(spec.widths());
  return (detail::mlp_forward(vartheta, lay, in, nullptr) - target).squaredNorm();
}

namespace detail {

/// Refits the last affine layer to the pairs by centered ridge least
/// squares: W minimizes ||W Hc - Yc||^2 + rho ||W||^2 on the centered
/// features Hc and targets Yc, and b = mean(Y) - W mean(H). rho is
/// relative to the largest squared singular value of Hc; rho = 0 gives
/// the minimum-norm solution. Rows whose targets are constant get W = 0.
inline void polish_last_layer(Vector& w, const MlpLayout& lay, const Matrix& in, const Matrix& target,
                              double ridge) {
  std::vector<Matrix> inputs;
  mlp_forward(w, lay, in, &inputs);
  const Matrix& h = inputs.back();
  const Vector h_mean = h.rowwise().mean();
  const Vector y_mean = target.rowwise().mean();
  const Matrix hc = h.colwise() - h_mean;
  const Matrix yc = target.colwise() - y_mean;
  const std::size_t j = lay.layers() - 1;
  const Index rows = lay.widths[j + 1], cols = lay.widths[j];
  Matrix wt = Matrix::Zero(cols, rows);
  Eigen::BDCSVD<Matrix> svd(hc.transpose(), Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& sv = svd.singularValues();
  if (sv.size() > 0 && sv[0] > 0.0) {
    const double cutoff = sv[0] * 1e-12 * static_cast<double>(std::max(hc.rows(), hc.cols()));
    const double rho = ridge * sv[0] * sv[0];
    Vector inv = Vector::Zero(sv.size());
    for (Index i = 0; i < sv.size(); ++i)
      if (sv[i] > cutoff) inv[i] = sv[i] / (sv[i] * sv[i] + rho);
    wt = svd.matrixV() * inv.asDiagonal() * (svd.matrixU().transpose() * yc.transpose());
  }
  Eigen::Map<RowMatrix> a(w.data() + lay.weight_offset[j], rows, cols);
  a = wt.transpose();
  w.segment(lay.bias_offset[j], rows) = y_mean - a * h_mean;
}

}  // namespace detail

/// Fits h on the pairs (z_t, z_{t+1}) built from theta_seq by full-batch
/// ADAM on the mean latent error, then (optionally) refits the last layer
/// by least squares. z0 is set to (theta_0, emb(0)).
inline HyperTrainResult train_hypernetwork(std::span<const Vector> theta_seq, const HgnSpec& spec,
                                           const HyperTrainOptions& opt, const Vector* init = nullptr) {
  spec.validate();
  if (theta_seq.size() < 2) throw DomainError("train_hypernetwork: need at least two parameter vectors");
  if (opt.epochs < 0) throw DomainError("train_hypernetwork: epochs must be nonnegative");
  const detail::MlpLayout lay(spec.widths());
  const auto [in, target] = hyper_pairs(spec, theta_seq);
  const double n_pairs = static_cast<double>(in.cols());

  HyperTrainResult res;
  res.vartheta = init ? *init : init_hyper_params(spec, opt.seed);
  detail::check_hyper_length(res.vartheta, spec);
  res.z0 = embed(spec, theta_seq.front(), 0);

  AdamState state;
  Vector grad(lay.total);
  for (long epoch = 0; epoch < opt.epochs; ++epoch) {
    std::vector<Matrix> inputs;
    const Matrix out = detail::mlp_forward(res.vartheta, lay, in, &inputs);
    Matrix delta = out - target;
    const double loss = delta.squaredNorm();
    if (!std::isfinite(loss)) throw TrainingError("train_hypernetwork: non-finite hyper-MSE", epoch, 0);
    delta *= 2.0 / n_pairs;
    for (std::size_t jj = lay.layers(); jj-- > 0;) {
      const Index rows = lay.widths[jj + 1], cols = lay.widths[jj];
      Eigen::Map<RowMatrix>(grad.data() + lay.weight_offset[jj], rows, cols).noalias() =
          delta * inputs[jj].transpose();
      grad.segment(lay.bias_offset[jj], rows) = delta.rowwise().sum();
      if (jj > 0) {
        Eigen::Map<const RowMatrix> a(res.vartheta.data() + lay.weight_offset[jj], rows, cols);
        Matrix back = a.transpose() * delta;
        back.array() *= (inputs[jj].array() > 0.0).cast<double>();
        delta = std::move(back);
      }
    }
    try {
      adam_step(state, res.vartheta, grad, opt.adam);
    } catch (const NumericalError& e) {
      throw TrainingError(std::string("train_hypernetwork: ") + e.what(), epoch, 0);
    }
    res.trace.push_back(latent_mse(spec, res.vartheta, theta_seq));
  }
  if (opt.polish && opt.epochs > 0) detail::polish_last_layer(res.vartheta, lay, in, target, opt.ridge);
  res.hyper_mse = hyper_mse(spec, res.vartheta, theta_seq);
  res.latent_mse = latent_mse(spec, res.vartheta, theta_seq);
  if (!std::isfinite(res.hyper_mse)) throw TrainingError("train_hypernetwork: non-finite hyper-MSE", opt.epochs, 0);
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation

enum class HgnMode { OneStep, Recurrent };

/// Mean IMSE per time t in [t_first, t_last] of the HGN-generated
/// parameters. OneStep feeds the stored theta_{t-1}; Recurrent starts from
/// the stored theta_{t_first - 1} and rolls h forward. samples(t) returns
/// the evaluation set at time t.
inline std::vector<double> evaluate_hgn(const HgnSpec& spec, const Vector& vartheta,
                                        std::span<const Vector> theta_seq,
                                        const std::function<std::vector<GdnSample>(long)>& samples, long t_first,
                                        long t_last, HgnMode mode) {
  if (t_first < 1 || t_last < t_first) throw DomainError("evaluate_hgn: time range must satisfy 1 <= first <= last");
  if (static_cast<long>(theta_seq.size()) < t_first) throw DomainError("evaluate_hgn: parameter sequence too short");
  std::vector<double> losses;
  Vector z = embed(spec, theta_seq[static_cast<std::size_t>(t_first - 1)], t_first - 1);
  for (long t = t_first; t <= t_last; ++t) {
    if (mode == HgnMode::OneStep) {
      if (static_cast<long>(theta_seq.size()) < t) throw DomainError("evaluate_hgn: parameter sequence too short");
      z = embed(spec, theta_seq[static_cast<std::size_t>(t - 1)], t - 1);
    }
    z = hyper_forward(vartheta, spec, z);
    const auto batch = samples(t);
    losses.push_back(imse_loss(readout(spec, z), spec.gdn, batch) / static_cast<double>(batch.size()));
  }
  return losses;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "NPHG1" | GDN arch | u32 q | f64 time_scale | u32 J | u32 hidden[J]
//   | u64 len | f64 vartheta[len] | u64 len | f64 z0[len]

inline constexpr std::string_view kHgnMagic = "NPHG1";

inline void write_hgn(std::ostream& os, const HgnSpec& spec, const Vector& vartheta) {
  detail::check_hyper_length(vartheta, spec);
  io::write_magic(os, kHgnMagic);
  write_gdn_arch(os, spec.gdn);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(spec.q));
  io::write_le<double>(os, spec.time_scale);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(spec.hidden.size()));
  for (Index h : spec.hidden) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(h));
  io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(vartheta.size()));
  io::write_doubles(os, std::span<const double>(vartheta.data(), static_cast<std::size_t>(vartheta.size())));
  io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(spec.z0.size()));
  io::write_doubles(os, std::span<const double>(spec.z0.data(), static_cast<std::size_t>(spec.z0.size())));
}

inline std::pair<HgnSpec, Vector> read_hgn(std::istream& is) {
  io::expect_magic(is, kHgnMagic);
  HgnSpec spec;
  spec.gdn = read_gdn_arch(is);
  spec.q = io::read_le<std::uint32_t>(is);
  spec.time_scale = io::read_le<double>(is);
  const auto j = io::read_le<std::uint32_t>(is);
  if (j > 4096) throw FormatError("HGN checkpoint has an implausible layer count");
  spec.hidden.clear();
  for (std::uint32_t i = 0; i < j; ++i) spec.hidden.push_back(io::read_le<std::uint32_t>(is));
  const auto len = io::read_le<std::uint64_t>(is);
  if (static_cast<Index>(len) != spec.hyper_param_count()) throw FormatError("HGN checkpoint length mismatch");
  Vector vartheta(static_cast<Index>(len));
  io::read_doubles(is, std::span<double>(vartheta.data(), static_cast<std::size_t>(len)));
  const auto zlen = io::read_le<std::uint64_t>(is);
  if (zlen != 0 && static_cast<Index>(zlen) != spec.latent_dim()) throw FormatError("HGN checkpoint z0 length mismatch");
  spec.z0.resize(static_cast<Index>(zlen));
  io::read_doubles(is, std::span<double>(spec.z0.data(), static_cast<std::size_t>(zlen)));
  spec.validate();
  return {spec, vartheta};
}

}  // namespace npv
