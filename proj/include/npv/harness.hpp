#pragma once

// Config-driven experiment pipeline: simulate -> project -> per-time GDN
// experts -> hypernetwork -> evaluation on the test times, plus ablation
// grids and CSV/JSON reports.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "npv/errors.hpp"
#include "npv/gdn.hpp"
#include "npv/hgn.hpp"
#include "npv/parallel.hpp"
#include "npv/projection.hpp"
#include "npv/rng.hpp"
#include "npv/volterra.hpp"

namespace npv {

using json = nlohmann::json;

inline constexpr std::string_view kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Configuration

struct MuPreset {
  std::string kind = "affine";  // const | affine | expcos
  double a = -0.5;              // affine slope, or the constant for const
  double b = 0.005;             // affine intercept

  std::function<Vector(const Vector&)> make() const {
    if (kind == "const") {
      const double c = a;
      return [c](const Vector& x) { return Vector(Vector::Constant(x.size(), c)); };
    }
    if (kind == "affine") {
      const double s = a, c = b;
      return [s, c](const Vector& x) { return Vector((s * x.array() + c).matrix()); };
    }
    if (kind == "expcos")
      return [](const Vector& x) { return Vector(((-x.array()).exp() + (x.array() / 100.0).cos()).matrix()); };
    throw DomainError("unknown mu preset '" + kind + "'");
  }

  /// "const:<c>", "affine:<a>:<b>" or "expcos".
  static MuPreset parse(const std::string& s) {
    std::vector<std::string> parts;
    std::stringstream ss(s);
    for (std::string tok; std::getline(ss, tok, ':');) parts.push_back(tok);
    try {
      if (parts.size() == 2 && parts[0] == "const") return {"const", std::stod(parts[1]), 0.0};
      if (parts.size() == 3 && parts[0] == "affine") return {"affine", std::stod(parts[1]), std::stod(parts[2])};
      if (parts.size() == 1 && parts[0] == "expcos") return {"expcos", 0.0, 0.0};
    } catch (const std::exception&) {
    }
    throw DomainError("unknown mu preset '" + s + "' (expected const:<c>, affine:<a>:<b> or expcos)");
  }

  friend bool operator==(const MuPreset&, const MuPreset&) = default;
};

struct ProcessConfig {
  Index d = 2;
  MuPreset mu{};
  double sigma_scale = 1.0;             // sigma = sigma_scale I unless a matrix is given
  std::optional<Matrix> sigma_matrix;
  double varsigma = 0.1;                // constant preset
  double lambda = 0.1;
  double w = 0.5;
  InitMode init = InitMode::Fixed;
};

enum class CiMode { Normal, Sd };

inline CiMode parse_ci_mode(const std::string& s) {
  if (s == "normal") return CiMode::Normal;
  if (s == "sd") return CiMode::Sd;
  throw DomainError("unknown CI mode '" + s + "' (expected normal or sd)");
}
inline std::string to_string(CiMode m) { return m == CiMode::Normal ? "normal" : "sd"; }

struct ExperimentConfig {
  ProcessConfig process{};
  long n_paths = 64;
  long horizon = 40;
  long train_end = 32;  // train on t < train_end, test on [train_end, horizon]
  ProjectionMode mode{};
  long memory = 1;
  std::vector<Index> gdn_hidden{64, 64, 64};
  bool train_base = true;
  long epochs_first = 20;
  long epochs_rest = 10;
  long batch_size = 8;
  AdamConfig gdn_adam{1e-2, 0.9, 0.999, 1e-8, 10.0};
  Index hgn_q = 8;
  std::vector<Index> hgn_hidden{256, 256, 256};
  long hgn_epochs = 50;
  AdamConfig hgn_adam{};
  bool hgn_polish = true;
  double hgn_ridge = 1e-3;
  CiMode ci = CiMode::Normal;
  std::uint64_t seed = 0;

  GdnArch arch() const { return {process.d, memory, process.d, gdn_hidden, train_base}; }

  AblationProcess make_process() const {
    AblationProcess p;
    p.d = process.d;
    p.mu = process.mu.make();
    const double vs = process.varsigma;
    p.varsigma = [vs](const Vector&) { return vs; };
    if (process.sigma_matrix) {
      if (process.sigma_matrix->rows() != process.d || process.sigma_matrix->cols() != process.d)
        throw DimensionError("config: sigma matrix must be d x d");
      p.sigma = make_spd(*process.sigma_matrix, {});
    } else {
      p.sigma = SpdMatrix(process.sigma_scale * Matrix::Identity(process.d, process.d), SpdMatrix::Trusted{});
    }
    p.lambda = process.lambda;
    p.w = process.w;
    p.init = process.init;
    return p;
  }

  void validate() const {
    if (process.d < 1) throw DomainError("config: d must be positive");
    if (!(process.sigma_scale > 0.0)) throw DomainError("config: sigma scale must be positive");
    if (!(process.varsigma > 0.0 && process.varsigma <= 2.0)) throw DomainError("config: varsigma must lie in (0, 2]");
    if (n_paths < 1 || horizon < 2) throw DomainError("config: need n_paths >= 1 and horizon >= 2");
    if (train_end < 2 || train_end > horizon)
      throw DomainError("config: train_end must lie in [2, horizon]");
    if (memory < 0) throw DomainError("config: memory must be nonnegative");
    if (!(hgn_ridge >= 0.0)) throw DomainError("config: hgn ridge must be nonnegative");
    if (epochs_first < 0 || epochs_rest < 0 || hgn_epochs < 0 || batch_size < 1)
      throw DomainError("config: epochs must be nonnegative and batch_size positive");
    (void)process.mu.make();
    make_process().validate();
    arch().validate();
  }
};

namespace detail {

inline json adam_to_json(const AdamConfig& a) {
  return {{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}, {"clip", a.clip}};
}

/// Reads obj[key] if present, rejecting keys outside `allowed`.
class Reader {
 public:
  Reader(const json& obj, std::string where, std::set<std::string> allowed) : obj_(obj), where_(std::move(where)) {
    if (!obj_.is_object()) throw ValidationError("config: '" + where_ + "' must be an object");
    for (const auto& [k, v] : obj_.items())
      if (!allowed.count(k)) throw ValidationError("config: unknown key '" + where_ + "." + k + "'");
  }
  template <typename T>
  void get(const char* key, T& out) const {
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ValidationError("config: bad value for '" + where_ + "." + key + "': " + e.what());
    }
  }
  bool has(const char* key) const { return obj_.contains(key); }
  const json& at(const char* key) const { return obj_.at(key); }

 private:
  const json& obj_;
  std::string where_;
};

inline void read_adam(const json& j, const std::string& where, AdamConfig& a) {
  Reader r(j, where, {"lr", "beta1", "beta2", "eps", "clip"});
  r.get("lr", a.lr);
  r.get("beta1", a.beta1);
  r.get("beta2", a.beta2);
  r.get("eps", a.eps);
  r.get("clip", a.clip);
}

}  // namespace detail

/// Canonical JSON form with every field present.
inline json config_to_json(const ExperimentConfig& c) {
  json mu = {{"preset", c.process.mu.kind}};
  if (c.process.mu.kind == "const") mu["c"] = c.process.mu.a;
  if (c.process.mu.kind == "affine") {
    mu["a"] = c.process.mu.a;
    mu["b"] = c.process.mu.b;
  }
  json sigma;
  if (c.process.sigma_matrix) {
    json rows = json::array();
    for (Index i = 0; i < c.process.sigma_matrix->rows(); ++i) {
      json row = json::array();
      for (Index j = 0; j < c.process.sigma_matrix->cols(); ++j) row.push_back((*c.process.sigma_matrix)(i, j));
      rows.push_back(row);
    }
    sigma["matrix"] = rows;
  } else {
    sigma["scale"] = c.process.sigma_scale;
  }
  return {
      {"process",
       {{"d", c.process.d},
        {"mu", mu},
        {"sigma", sigma},
        {"varsigma", {{"preset", "const"}, {"c", c.process.varsigma}}},
        {"lambda", c.process.lambda},
        {"w", c.process.w},
        {"init", c.process.init == InitMode::Fixed ? "zeros" : "normal"}}},
      {"data", {{"n_paths", c.n_paths}, {"horizon", c.horizon}, {"train_end", c.train_end}}},
      {"projection", {{"mode", c.mode.to_string()}}},
      {"gdn",
       {{"memory", c.memory},
        {"hidden", c.gdn_hidden},
        {"train_base", c.train_base},
        {"epochs_first", c.epochs_first},
        {"epochs_rest", c.epochs_rest},
        {"batch_size", c.batch_size},
        {"adam", detail::adam_to_json(c.gdn_adam)}}},
      {"hgn",
       {{"q", c.hgn_q},
        {"hidden", c.hgn_hidden},
        {"epochs", c.hgn_epochs},
        {"polish", c.hgn_polish},
        {"ridge", c.hgn_ridge},
        {"adam", detail::adam_to_json(c.hgn_adam)}}},
      {"report", {{"ci", to_string(c.ci)}}},
      {"seed", c.seed},
  };
}

/// Parses a (possibly partial) config; missing keys keep their defaults.
inline ExperimentConfig config_from_json(const json& j) {
  using detail::Reader;
  ExperimentConfig c;
  Reader top(j, "config", {"process", "data", "projection", "gdn", "hgn", "report", "seed"});
  top.get("seed", c.seed);
  if (top.has("process")) {
    Reader p(top.at("process"), "process", {"d", "mu", "sigma", "varsigma", "lambda", "w", "init"});
    p.get("d", c.process.d);
    p.get("lambda", c.process.lambda);
    p.get("w", c.process.w);
    if (p.has("init")) {
      std::string init;
      p.get("init", init);
      if (init == "zeros") c.process.init = InitMode::Fixed;
      else if (init == "normal") c.process.init = InitMode::StandardNormal;
      else throw ValidationError("config: process.init must be zeros or normal");
    }
    if (p.has("mu")) {
      Reader m(p.at("mu"), "process.mu", {"preset", "c", "a", "b"});
      std::string kind = c.process.mu.kind;
      m.get("preset", kind);
      if (kind == "const") {
        c.process.mu = {"const", 0.01, 0.0};
        m.get("c", c.process.mu.a);
      } else if (kind == "affine") {
        c.process.mu = {"affine", -0.5, 0.005};
        m.get("a", c.process.mu.a);
        m.get("b", c.process.mu.b);
      } else if (kind == "expcos") {
        c.process.mu = {"expcos", 0.0, 0.0};
      } else {
        throw ValidationError("config: unknown mu preset '" + kind + "'");
      }
    }
    if (p.has("sigma")) {
      Reader s(p.at("sigma"), "process.sigma", {"scale", "matrix"});
      s.get("scale", c.process.sigma_scale);
      if (s.has("matrix")) {
        std::vector<std::vector<double>> rows;
        s.get("matrix", rows);
        Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) {
          if (rows[i].size() != rows.size()) throw ValidationError("config: sigma matrix must be square");
          for (std::size_t k = 0; k < rows.size(); ++k) m(static_cast<Index>(i), static_cast<Index>(k)) = rows[i][k];
        }
        c.process.sigma_matrix = m;
      }
    }
    if (p.has("varsigma")) {
      Reader v(p.at("varsigma"), "process.varsigma", {"preset", "c"});
      std::string kind = "const";
      v.get("preset", kind);
      if (kind != "const") throw ValidationError("config: unknown varsigma preset '" + kind + "'");
      v.get("c", c.process.varsigma);
    }
  }
  if (top.has("data")) {
    Reader d(top.at("data"), "data", {"n_paths", "horizon", "train_end"});
    d.get("n_paths", c.n_paths);
    d.get("horizon", c.horizon);
    d.get("train_end", c.train_end);
  }
  if (top.has("projection")) {
    Reader pr(top.at("projection"), "projection", {"mode"});
    std::string mode = c.mode.to_string();
    pr.get("mode", mode);
    c.mode = ProjectionMode::parse(mode);
  }
  if (top.has("gdn")) {
    Reader g(top.at("gdn"), "gdn",
             {"memory", "hidden", "train_base", "epochs_first", "epochs_rest", "batch_size", "adam"});
    g.get("memory", c.memory);
    g.get("hidden", c.gdn_hidden);
    g.get("train_base", c.train_base);
    g.get("epochs_first", c.epochs_first);
    g.get("epochs_rest", c.epochs_rest);
    g.get("batch_size", c.batch_size);
    if (g.has("adam")) detail::read_adam(g.at("adam"), "gdn.adam", c.gdn_adam);
  }
  if (top.has("hgn")) {
    Reader h(top.at("hgn"), "hgn", {"q", "hidden", "epochs", "polish", "ridge", "adam"});
    h.get("q", c.hgn_q);
    h.get("hidden", c.hgn_hidden);
    h.get("epochs", c.hgn_epochs);
    h.get("polish", c.hgn_polish);
    h.get("ridge", c.hgn_ridge);
    if (h.has("adam")) detail::read_adam(h.at("adam"), "hgn.adam", c.hgn_adam);
  }
  if (top.has("report")) {
    Reader r(top.at("report"), "report", {"ci"});
    std::string ci = to_string(c.ci);
    r.get("ci", ci);
    c.ci = parse_ci_mode(ci);
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open config " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ValidationError("config " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

/// FNV-1a of the canonical JSON text, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& c) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(config_to_json(c).dump());
  return os.str();
}

// ---------------------------------------------------------------------------
// Confidence intervals

struct Interval {
  double mean = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  friend bool operator==(const Interval&, const Interval&) = default;
};

/// Normal: mean +- z s / sqrt(n) with z = 1.96 at the 95% level.
/// Sd: mean +- s. s is the sample standard deviation (0 when n = 1).
inline Interval confidence_interval(std::span<const double> xs, CiMode mode = CiMode::Normal, double level = 0.95) {
  if (xs.empty()) throw DomainError("confidence_interval: empty list");
  if (!(level > 0.0 && level < 1.0)) throw DomainError("confidence_interval: level must lie in (0, 1)");
  const double n = static_cast<double>(xs.size());
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  const double sd = xs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  double half = sd;
  if (mode == CiMode::Normal) {
    double z = 1.96;
    if (level != 0.95) {
      // Two-sided normal quantile by bisection on erfc.
      double lo = 0.0, hi = 40.0;
      for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (std::erfc(mid / std::sqrt(2.0)) > 1.0 - level ? lo : hi) = mid;
      }
      z = 0.5 * (lo + hi);
    }
    half = z * sd / std::sqrt(n);
  }
  return {mean, mean - half, mean + half};
}

// ---------------------------------------------------------------------------
// Report

struct Report {
  json config;  // canonical config echo
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string provenance;
  CiMode ci = CiMode::Normal;
  std::vector<long> times;
  std::vector<double> gdn;
  std::vector<double> hgn_one_step;
  std::vector<double> hgn_recurrent;
  double hyper_mse = 0.0;
  double wall_time_s = 0.0;  // excluded from the numeric payload

  Interval summary(const std::vector<double>& xs) const {
    if (xs.empty()) return {};
    return confidence_interval(xs, ci);
  }
};

inline bool operator==(const Report& a, const Report& b) {
  return a.config == b.config && a.config_hash == b.config_hash && a.seed == b.seed && a.provenance == b.provenance &&
         a.ci == b.ci && a.times == b.times && a.gdn == b.gdn && a.hgn_one_step == b.hgn_one_step &&
         a.hgn_recurrent == b.hgn_recurrent && a.hyper_mse == b.hyper_mse && a.wall_time_s == b.wall_time_s;
}

inline json interval_json(const Interval& i) { return {{"mean", i.mean}, {"ci_lo", i.lo}, {"ci_hi", i.hi}}; }

/// Every emitted number except the wall time.
inline json report_payload(const Report& r) {
  return {
      {"config", r.config},
      {"config_hash", r.config_hash},
      {"seed", r.seed},
      {"provenance", r.provenance},
      {"ci", to_string(r.ci)},
      {"times", r.times},
      {"gdn_loss", r.gdn},
      {"hgn1_loss", r.hgn_one_step},
      {"hgnR_loss", r.hgn_recurrent},
      {"hyper_mse", r.hyper_mse},
      {"summary",
       {{"gdn", interval_json(r.summary(r.gdn))},
        {"hgn1", interval_json(r.summary(r.hgn_one_step))},
        {"hgnR", interval_json(r.summary(r.hgn_recurrent))}}},
  };
}

inline json report_to_json(const Report& r) {
  json j = report_payload(r);
  j["wall_time_s"] = r.wall_time_s;
  return j;
}

/// Rebuilds a report; rejects it when the embedded hash does not match
/// the embedded config.
inline Report report_from_json(const json& j) {
  Report r;
  try {
    r.config = j.at("config");
    r.config_hash = j.at("config_hash").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.provenance = j.at("provenance").get<std::string>();
    r.ci = parse_ci_mode(j.at("ci").get<std::string>());
    r.times = j.at("times").get<std::vector<long>>();
    r.gdn = j.at("gdn_loss").get<std::vector<double>>();
    r.hgn_one_step = j.at("hgn1_loss").get<std::vector<double>>();
    r.hgn_recurrent = j.at("hgnR_loss").get<std::vector<double>>();
    r.hyper_mse = j.at("hyper_mse").get<double>();
    r.wall_time_s = j.value("wall_time_s", 0.0);
  } catch (const json::exception& e) {
    throw FormatError(std::string("report JSON is malformed: ") + e.what());
  }
  const std::string expect = config_hash(config_from_json(r.config));
  if (expect != r.config_hash)
    throw FormatError("report config hash " + r.config_hash + " does not match its config (" + expect + ")");
  const std::size_t n = r.times.size();
  if (r.gdn.size() != n || r.hgn_one_step.size() != n || r.hgn_recurrent.size() != n)
    throw FormatError("report loss arrays differ in length");
  return r;
}

inline Report load_report(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open report " + path);
  try {
    return report_from_json(json::parse(is));
  } catch (const json::parse_error& e) {
    throw FormatError("report " + path + " is not valid JSON: " + std::string(e.what()));
  }
}

inline void write_losses_csv(std::ostream& os, const Report& r) {
  os << "t,gdn_loss,hgn1_loss,hgnR_loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < r.times.size(); ++i)
    os << r.times[i] << ',' << r.gdn[i] << ',' << r.hgn_one_step[i] << ',' << r.hgn_recurrent[i] << '\n';
}

inline void write_summary_header(std::ostream& os) { os << "axis_value,model,mean,ci_lo,ci_hi\n"; }

inline void write_summary_rows(std::ostream& os, const std::string& axis_value, const Report& r) {
  os << std::setprecision(17);
  const std::pair<const char*, const std::vector<double>*> models[] = {
      {"gdn", &r.gdn}, {"hgn1", &r.hgn_one_step}, {"hgnR", &r.hgn_recurrent}};
  for (const auto& [name, xs] : models) {
    if (xs->empty()) continue;
    const Interval i = r.summary(*xs);
    os << axis_value << ',' << name << ',' << i.mean << ',' << i.lo << ',' << i.hi << '\n';
  }
}

namespace detail {
inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw ValidationError("cannot open " + p.string() + " for writing");
  return os;
}
}  // namespace detail

struct ReportFormats {
  bool csv = true;
  bool json = true;
};

/// Writes losses.csv, summary.csv and report.json into dir.
inline void emit_report(const Report& r, const std::filesystem::path& dir, ReportFormats formats = {}) {
  std::filesystem::create_directories(dir);
  if (formats.csv) {
    auto os = detail::open_out(dir / "losses.csv");
    write_losses_csv(os, r);
    auto ss = detail::open_out(dir / "summary.csv");
    write_summary_header(ss);
    write_summary_rows(ss, "base", r);
  }
  if (formats.json) {
    auto os = detail::open_out(dir / "report.json");
    os << report_to_json(r).dump(2) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Pipeline stages

/// Rethrows e with the failing stage prepended, keeping its category.
[[noreturn]] inline void rethrow_in_stage(const std::string& stage) {
  try {
    throw;
  } catch (const ValidationError& e) {
    throw ValidationError("stage " + stage + ": " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError("stage " + stage + ": " + e.what());
  }
}

inline PathSet simulate_stage(const ExperimentConfig& c) {
  return simulate_paths(c.make_process(), c.n_paths, c.horizon, derive_seed(c.seed, "paths"));
}

inline ProjectionTargets project_stage(const ExperimentConfig& c, const PathSet& paths) {
  return build_projection_targets(c.make_process(), paths, c.mode, derive_seed(c.seed, "projection"));
}

/// Per-path state sequences x_{-1..T}.
inline std::vector<std::vector<Vector>> path_sequences(const PathSet& paths) {
  std::vector<std::vector<Vector>> seqs;
  for (long n = 0; n < paths.n_paths(); ++n) seqs.push_back(paths.window(n, -1, paths.horizon()));
  return seqs;
}

inline std::vector<GdnSample> samples_at(const std::vector<std::vector<Vector>>& seqs,
                                         const ProjectionTargets& targets, long t, long memory) {
  std::vector<GdnSample> out;
  out.reserve(seqs.size());
  for (std::size_t n = 0; n < seqs.size(); ++n) {
    const Index d = seqs[n].front().size();
    out.push_back({window_at(seqs[n], t, memory, d), targets.at(static_cast<long>(n), t)});
  }
  return out;
}

struct ExpertSequence {
  std::vector<Vector> thetas;                // t = 0..T
  std::vector<std::vector<double>> traces;   // per-time epoch losses
  std::vector<double> train_loss;            // best mean loss per time
};

/// Sequential warm-started GDN experts for every t = 0..T.
inline ExpertSequence train_experts(const ExperimentConfig& c, const PathSet& paths, const ProjectionTargets& targets) {
  const GdnArch arch = c.arch();
  const auto seqs = path_sequences(paths);
  ExpertSequence out;
  Vector theta = init_gdn_params(arch, derive_seed(c.seed, "gdn"));
  for (long t = 0; t <= c.horizon; ++t) {
    const auto data = samples_at(seqs, targets, t, c.memory);
    GdnTrainOptions opt;
    opt.epochs = t == 0 ? c.epochs_first : c.epochs_rest;
    opt.batch_size = c.batch_size;
    opt.adam = c.gdn_adam;
    opt.seed = derive_seed(c.seed, "train", static_cast<std::uint64_t>(t));
    GdnTrainResult res = train_gdn(data, arch, theta, opt);
    theta = res.theta;
    out.thetas.push_back(res.theta);
    out.traces.push_back(std::move(res.trace));
    out.train_loss.push_back(res.best_loss);
  }
  return out;
}

inline HgnSpec hgn_spec(const ExperimentConfig& c) {
  HgnSpec s;
  s.gdn = c.arch();
  s.q = c.hgn_q;
  s.hidden = c.hgn_hidden;
  s.time_scale = static_cast<double>(c.horizon);
  return s;
}

/// Hypernetwork fitted on the training-range parameters theta_0..theta_{train_end - 1}.
inline std::pair<HgnSpec, HyperTrainResult> train_hgn_stage(const ExperimentConfig& c, const ExpertSequence& experts) {
  HgnSpec spec = hgn_spec(c);
  HyperTrainOptions opt;
  opt.epochs = c.hgn_epochs;
  opt.adam = c.hgn_adam;
  opt.seed = derive_seed(c.seed, "hyper");
  opt.polish = c.hgn_polish;
  opt.ridge = c.hgn_ridge;
  const std::span<const Vector> train(experts.thetas.data(), static_cast<std::size_t>(c.train_end));
  HyperTrainResult res = train_hypernetwork(train, spec, opt);
  spec.z0 = res.z0;
  return {spec, std::move(res)};
}

inline std::string provenance_string(const std::string& hash) {
  return "npv-" + std::string(kVersion) + "+cfg." + hash;
}

/// Per-time mean IMSE on the test times [train_end, T] for the experts and
/// both HGN modes.
inline Report evaluate_stage(const ExperimentConfig& c, const PathSet& paths, const ProjectionTargets& targets,
                             const ExpertSequence& experts, const HgnSpec& spec, const Vector& vartheta,
                             double hyper_mse_value) {
  Report r;
  r.config = config_to_json(c);
  r.config_hash = config_hash(c);
  r.seed = c.seed;
  r.provenance = provenance_string(r.config_hash);
  r.ci = c.ci;
  r.hyper_mse = hyper_mse_value;
  const auto seqs = path_sequences(paths);
  const GdnArch arch = c.arch();
  auto samples = [&](long t) { return samples_at(seqs, targets, t, c.memory); };
  for (long t = c.train_end; t <= c.horizon; ++t) {
    const auto data = samples(t);
    r.times.push_back(t);
    r.gdn.push_back(imse_loss(experts.thetas[static_cast<std::size_t>(t)], arch, data) /
                    static_cast<double>(data.size()));
  }
  r.hgn_one_step = evaluate_hgn(spec, vartheta, experts.thetas, samples, c.train_end, c.horizon, HgnMode::OneStep);
  r.hgn_recurrent = evaluate_hgn(spec, vartheta, experts.thetas, samples, c.train_end, c.horizon, HgnMode::Recurrent);
  return r;
}

struct PipelineArtifacts {
  std::optional<PathSet> paths;
  std::optional<ProjectionTargets> targets;
  std::optional<ExpertSequence> experts;
  std::optional<HgnSpec> hgn;
  std::optional<HyperTrainResult> hyper;
};

/// Writes whatever artifacts exist into dir.
inline void flush_artifacts(const PipelineArtifacts& a, const std::filesystem::path& dir, const GdnArch& arch) {
  std::filesystem::create_directories(dir);
  if (a.paths) save_pathset((dir / "paths.npvs").string(), *a.paths);
  if (a.targets) save_targets((dir / "targets.nppt").string(), *a.targets);
  if (a.experts) {
    auto os = detail::open_out(dir / "experts.npgd");
    for (const auto& th : a.experts->thetas) write_gdn(os, arch, th);
    auto ts = detail::open_out(dir / "expert_losses.csv");
    ts << "t,epoch,loss\n" << std::setprecision(17);
    for (std::size_t t = 0; t < a.experts->traces.size(); ++t)
      for (std::size_t e = 0; e < a.experts->traces[t].size(); ++e)
        ts << t << ',' << (e + 1) << ',' << a.experts->traces[t][e] << '\n';
  }
  if (a.hgn && a.hyper) {
    auto os = detail::open_out(dir / "hgn.nphg");
    write_hgn(os, *a.hgn, a.hyper->vartheta);
    auto ts = detail::open_out(dir / "hyper_losses.csv");
    write_loss_trace_csv(ts, a.hyper->trace);
  }
}

/// Full pipeline. When out_dir is given, artifacts are written there, also
/// for the stages completed before a failure.
inline Report run_pipeline(const ExperimentConfig& c, const std::optional<std::filesystem::path>& out_dir = {},
                           PipelineArtifacts* keep = nullptr) {
  const auto start = std::chrono::steady_clock::now();
  c.validate();
  PipelineArtifacts local;
  PipelineArtifacts& a = keep ? *keep : local;
  std::string stage = "simulate";
  Report r;
  try {
    a.paths = simulate_stage(c);
    stage = "project";
    a.targets = project_stage(c, *a.paths);
    stage = "train_gdn";
    a.experts = train_experts(c, *a.paths, *a.targets);
    stage = "train_hypernetwork";
    auto [spec, hyper] = train_hgn_stage(c, *a.experts);
    a.hgn = spec;
    a.hyper = std::move(hyper);
    stage = "evaluate";
    r = evaluate_stage(c, *a.paths, *a.targets, *a.experts, *a.hgn, a.hyper->vartheta, a.hyper->hyper_mse);
  } catch (...) {
    if (out_dir) {
      try {
        flush_artifacts(a, *out_dir, c.arch());
      } catch (...) {
      }
    }
    rethrow_in_stage(stage);
  }
  r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (out_dir) {
    flush_artifacts(a, *out_dir, c.arch());
    emit_report(r, *out_dir);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Ablation grids

enum class Axis { Mu, Lambda, Dimension, Memory, Varsigma };

inline Axis parse_axis(const std::string& s) {
  if (s == "mu") return Axis::Mu;
  if (s == "lambda") return Axis::Lambda;
  if (s == "dimension") return Axis::Dimension;
  if (s == "memory") return Axis::Memory;
  if (s == "varsigma") return Axis::Varsigma;
  throw DomainError("unknown ablation axis '" + s + "' (expected mu, lambda, dimension, memory or varsigma)");
}

/// Config with one axis set to value. Memory m maps to w = 1 - m.
inline ExperimentConfig apply_axis(ExperimentConfig c, Axis axis, const std::string& value) {
  auto number = [&](const std::string& v) {
    try {
      std::size_t used = 0;
      const double x = std::stod(v, &used);
      if (used == v.size()) return x;
    } catch (const std::exception&) {
    }
    throw DomainError("ablation value '" + v + "' is not a number");
  };
  switch (axis) {
    case Axis::Mu:
      c.process.mu = MuPreset::parse(value);
      break;
    case Axis::Lambda:
      c.process.lambda = number(value);
      break;
    case Axis::Dimension: {
      const double d = number(value);
      if (d < 1 || d != std::floor(d)) throw DomainError("dimension must be a positive integer");
      c.process.d = static_cast<Index>(d);
      c.process.sigma_matrix.reset();
      break;
    }
    case Axis::Memory:
      c.process.w = 1.0 - number(value);
      break;
    case Axis::Varsigma:
      c.process.varsigma = number(value);
      break;
  }
  c.validate();
  return c;
}

struct AblationEntry {
  std::string value;
  std::optional<Report> report;
  std::string error;  // set when the variation failed
  int error_kind = 0; // 2 validation, 3 numerical
};

/// One pipeline per value, all with the master seed so that variations
/// share random draws. Failures are recorded per entry.
inline std::vector<AblationEntry> ablate(const ExperimentConfig& base, Axis axis, const std::vector<std::string>& values,
                                         const std::optional<std::filesystem::path>& out_dir = {}) {
  std::vector<AblationEntry> out(values.size());
  parallel_for(values.size(), [&](std::size_t i) {
    out[i].value = values[i];
    std::optional<std::filesystem::path> dir;
    if (out_dir) dir = *out_dir / ("value_" + std::to_string(i));
    try {
      out[i].report = run_pipeline(apply_axis(base, axis, values[i]), dir);
    } catch (const ValidationError& e) {
      out[i].error = e.what();
      out[i].error_kind = 2;
    } catch (const NumericalError& e) {
      out[i].error = e.what();
      out[i].error_kind = 3;
    } catch (const std::exception& e) {
      out[i].error = e.what();
      out[i].error_kind = 3;
    }
  });
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    auto os = detail::open_out(*out_dir / "summary.csv");
    write_summary_header(os);
    for (const auto& e : out)
      if (e.report) write_summary_rows(os, e.value, *e.report);
  }
  return out;
}

}  // namespace npv
