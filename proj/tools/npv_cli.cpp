// npv: command-line runner for the Volterra projection experiments.
//
//   npv simulate|project|train|eval|run --config cfg.json --out-dir DIR
//   npv ablate --axis lambda --values 0,0.5,1 --out-dir DIR
//   npv report --in DIR/report.json --out-dir DIR2
//
// Exit codes: 0 success, 2 validation error, 3 numerical failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "npv/harness.hpp"

namespace fs = std::filesystem;
using namespace npv;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "npv_out";
  std::string mode;
  std::string ci;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "Experiment config (JSON)");
  cmd->add_option("--seed", o.seed, "Master seed (overrides the config)");
  cmd->add_option("--out-dir", o.out_dir, "Output directory")->capture_default_str();
  cmd->add_option("--mode", o.mode, "Projection mode: closed_form, mc or mc:<n>");
  cmd->add_option("--ci", o.ci, "Interval mode: normal or sd");
}

ExperimentConfig resolve(const CommonOptions& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.mode.empty()) c.mode = ProjectionMode::parse(o.mode);
  if (!o.ci.empty()) c.ci = parse_ci_mode(o.ci);
  c.validate();
  return c;
}

std::vector<Vector> read_experts(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ValidationError("cannot open " + p.string());
  std::vector<Vector> out;
  while (is.peek() != std::char_traits<char>::eof()) out.push_back(read_gdn(is).second);
  return out;
}

void print_summary(const Report& r) {
  std::cout << "config " << r.config_hash << "  seed " << r.seed << "  test times " << r.times.size() << '\n';
  const std::pair<const char*, const std::vector<double>*> rows[] = {
      {"GDN", &r.gdn}, {"HGN one-step", &r.hgn_one_step}, {"HGN recurrent", &r.hgn_recurrent}};
  for (const auto& [name, xs] : rows) {
    if (xs->empty()) continue;
    const Interval i = r.summary(*xs);
    std::cout << "  " << std::left << std::setw(14) << name << " mean " << std::scientific << std::setprecision(3)
              << i.mean << "  [" << i.lo << ", " << i.hi << "]\n"
              << std::defaultfloat;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Non-parametric Volterra projections: simulation, projection, GDN/HGN training and reports"};
  app.require_subcommand(1);

  CommonOptions o;
  auto* sim = app.add_subcommand("simulate", "Simulate sample paths");
  auto* proj = app.add_subcommand("project", "Build projection targets from simulated paths");
  auto* train = app.add_subcommand("train", "Train per-time GDN experts and the hypernetwork");
  auto* eval = app.add_subcommand("eval", "Evaluate trained models on the test times");
  auto* run = app.add_subcommand("run", "Run the whole pipeline");
  auto* abl = app.add_subcommand("ablate", "Run an ablation grid over one axis");
  auto* rep = app.add_subcommand("report", "Re-render a saved JSON report");
  for (auto* cmd : {sim, proj, train, eval, run, abl, rep}) add_common(cmd, o);

  std::string axis;
  std::vector<std::string> values;
  abl->add_option("--axis", axis, "mu, lambda, dimension, memory or varsigma")->required();
  abl->add_option("--values", values, "Comma-separated axis values")->required()->delimiter(',');
  std::string report_in;
  rep->add_option("--in", report_in, "report.json to reload")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const fs::path out(o.out_dir);
    if (*rep) {
      Report r = load_report(report_in);
      if (!o.ci.empty()) r.ci = parse_ci_mode(o.ci);
      emit_report(r, out, {true, false});
      print_summary(r);
      return 0;
    }

    const ExperimentConfig c = resolve(o);
    fs::create_directories(out);
    {
      std::ofstream cfg(out / "config.json");
      cfg << config_to_json(c).dump(2) << '\n';
    }

    if (*sim) {
      const PathSet paths = simulate_stage(c);
      save_pathset((out / "paths.npvs").string(), paths);
      std::ofstream csv(out / "paths.csv");
      write_pathset_csv(csv, paths);
      std::cout << "simulated " << paths.n_paths() << " paths to t = " << paths.horizon() << '\n';
    } else if (*proj) {
      const PathSet paths = load_pathset((out / "paths.npvs").string());
      const ProjectionTargets t = project_stage(c, paths);
      save_targets((out / "targets.nppt").string(), t);
      std::ofstream csv(out / "targets.csv");
      write_targets_csv(csv, t);
      std::cout << "projected " << t.points.size() << " targets (" << c.mode.to_string() << ")\n";
    } else if (*train) {
      PipelineArtifacts a;
      a.paths = load_pathset((out / "paths.npvs").string());
      a.targets = load_targets((out / "targets.nppt").string());
      a.experts = train_experts(c, *a.paths, *a.targets);
      auto [spec, hyper] = train_hgn_stage(c, *a.experts);
      a.hgn = spec;
      a.hyper = std::move(hyper);
      flush_artifacts(a, out, c.arch());
      std::cout << "trained " << a.experts->thetas.size() << " experts; hyper-MSE " << a.hyper->hyper_mse << '\n';
    } else if (*eval) {
      const PathSet paths = load_pathset((out / "paths.npvs").string());
      const ProjectionTargets targets = load_targets((out / "targets.nppt").string());
      ExpertSequence experts;
      experts.thetas = read_experts(out / "experts.npgd");
      std::ifstream hs(out / "hgn.nphg", std::ios::binary);
      if (!hs) throw ValidationError("cannot open " + (out / "hgn.nphg").string());
      auto [spec, vartheta] = read_hgn(hs);
      if (static_cast<long>(experts.thetas.size()) != c.horizon + 1)
        throw ValidationError("experts.npgd does not cover t = 0..T");
      const Report r = evaluate_stage(c, paths, targets, experts, spec, vartheta,
                                      hyper_mse(spec, vartheta,
                                                std::span<const Vector>(experts.thetas.data(),
                                                                        static_cast<std::size_t>(c.train_end))));
      emit_report(r, out);
      print_summary(r);
    } else if (*run) {
      const Report r = run_pipeline(c, out);
      print_summary(r);
    } else if (*abl) {
      const auto entries = ablate(c, parse_axis(axis), values, out);
      int worst = 0;
      for (const auto& e : entries) {
        std::cout << axis << " = " << e.value << '\n';
        if (e.report) {
          print_summary(*e.report);
        } else {
          std::cout << "  failed: " << e.error << '\n';
          worst = std::max(worst, e.error_kind);
        }
      }
      return worst;
    }
    return 0;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
