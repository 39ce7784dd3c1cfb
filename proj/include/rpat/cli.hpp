#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "rpat/config.hpp"
#include "rpat/experiments.hpp"
#include "rpat/tables.hpp"

#ifndef RPAT_DATA_DIR
#define RPAT_DATA_DIR "data"
#endif

namespace rpat {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // I/O trouble or a reproduction mismatch
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

inline std::string default_table_path() { return std::string(RPAT_DATA_DIR) + "/reference_tables.csv"; }

namespace detail {

/// `--a.b value` pairs left over after the subcommand's own flags.
inline std::vector<std::pair<std::string, std::string>> parse_overrides(
    const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.size() < 3)
      throw ConfigError("unexpected argument '" + a + "'");
    std::string key = a.substr(2);
    std::string value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("override --" + key + " needs a value");
      value = extras[++i];
    }
    out.emplace_back(key, value);
  }
  return out;
}

inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& extras) {
  nlohmann::json j = path.empty() ? to_json(ExperimentConfig::defaults()) : load_json_file(path);
  for (const auto& [k, v] : parse_overrides(extras)) apply_override(j, k, v);
  return config_from_json(j);
}

inline void write_reports_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports,
                              const std::string& hash) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "# config=" << hash << '\n' << kReportCsvHeader << '\n';
  for (const auto& r : reports) write_report_row(out, r);
}

inline void write_plot_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports,
                           const std::string& hash) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "# config=" << hash << '\n';
  write_plot_data(out, reports);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string p; std::getline(ss, p, ',');)
    if (!p.empty()) out.push_back(p);
  return out;
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

/// Entry point behind the `rpat` tool. Returns the process exit code.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Robust-perception adversarial training lab", "rpat"};
  app.require_subcommand(1);

  std::string config_path, run_dir, checkpoint, out_path;
  std::uint64_t seed_opt = 0;
  bool have_seed = false;

  auto common = [&](CLI::App* sub) {
    sub->allow_extras();
    sub->add_option("--config", config_path, "Experiment config JSON");
    sub->add_option("--run-dir", run_dir, "Output directory (default <root>/<timestamp>_<hash8>)");
    return sub;
  };

  auto* synth = common(app.add_subcommand("synth-data", "Write the configured dataset as CSV"));
  std::string split_name = "all";
  synth->add_option("--out", out_path, "CSV path (stdout when omitted)");
  synth->add_option("--split", split_name, "all, train, val or test");

  auto* train = common(app.add_subcommand("train", "Train one run per configured seed"));

  auto* eval = common(app.add_subcommand("eval", "Clean and robust accuracy of a checkpoint"));
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--seed", seed_opt, "Run seed selecting the data split")
      ->each([&](const std::string&) { have_seed = true; });

  auto* attack = common(app.add_subcommand("attack", "Run one attack against a checkpoint"));
  std::string norm_name = "linf";
  double eps = 8.0 / 255.0, step = 2.0 / 255.0;
  int steps = 10;
  bool random_start = false;
  std::string attack_name = "pgd";
  attack->add_option("--checkpoint", checkpoint)->required();
  attack->add_option("--kind", attack_name, "pgd, fgsm, random or none");
  attack->add_option("--norm", norm_name);
  attack->add_option("--eps", eps);
  attack->add_option("--step", step);
  attack->add_option("--steps", steps);
  attack->add_flag("--random-start", random_start);
  attack->add_option("--out", out_path, "CSV of attacked inputs");
  attack->add_option("--seed", seed_opt)->each([&](const std::string&) { have_seed = true; });

  auto* perception = common(app.add_subcommand(
      "analyze-perception", "Perception MSE of success and failure cases per training condition"));
  std::string conditions = "clean,random,at", perturbations = "random,pgd";
  perception->add_option("--conditions", conditions, "Comma list of clean, random, at");
  perception->add_option("--perturbations", perturbations, "Comma list of random, pgd, fgsm");

  auto* verify = common(app.add_subcommand(
      "verify-theorems", "Curvature and Jacobian drift of a lambda=0 baseline against the configured model"));

  auto* abl = common(app.add_subcommand("ablate", "Divergence by alpha sweep"));
  std::string divergences = "mse,kl,js,cosine", alphas = "0.2,0.5,0.8,beta_minus,beta_plus";
  abl->add_option("--divergences", divergences);
  abl->add_option("--alphas", alphas, "Fixed values or beta_minus / beta_plus");

  auto* nrr_cmd = app.add_subcommand("nrr", "Mean and harmonic mean of a clean/robust pair");
  double clean_in = 0.0, robust_in = 0.0;
  bool show_mean = false;
  nrr_cmd->add_option("clean", clean_in)->required();
  nrr_cmd->add_option("robust", robust_in)->required();
  nrr_cmd->add_flag("--mean", show_mean, "Also print the mean");

  auto* report = app.add_subcommand("report", "Mean and spread over report CSVs");
  std::vector<std::string> report_files;
  report->add_option("files", report_files)->required();
  report->add_option("--out", out_path);

  auto* tables = app.add_subcommand("reproduce-tables", "Recompute Mean and NRR of the reference tables");
  std::string table_path = default_table_path();
  tables->add_option("--table", table_path);
  tables->add_option("--out", out_path);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    namespace fs = std::filesystem;
    if (nrr_cmd->parsed()) {
      if (show_mean) out << fmt::format("mean {:.3f}\n", mean_score(clean_in, robust_in));
      out << fmt::format("{:.3f}\n", nrr(clean_in, robust_in));
      return kExitOk;
    }
    if (tables->parsed()) {
      const std::string text = detail::read_text(table_path);
      std::istringstream in(text);
      const auto checks = reproduce_tables(in);
      std::size_t bad = 0;
      for (const auto& c : checks) bad += !c.ok;
      if (out_path.empty()) {
        write_table_checks(out, checks, fnv1a_hex(text));
      } else {
        std::ofstream f(out_path);
        write_table_checks(f, checks, fnv1a_hex(text));
      }
      err << fmt::format("{} rows, {} mismatched\n", checks.size(), bad);
      return bad ? kExitFailure : kExitOk;
    }
    if (report->parsed()) {
      std::vector<std::string> texts;
      std::string joined;
      for (const auto& f : report_files) {
        texts.push_back(detail::read_text(f));
        joined += texts.back();
      }
      const auto aggs = aggregate_reports(texts);
      if (out_path.empty()) {
        write_aggregates(out, aggs, fnv1a_hex(joined));
      } else {
        std::ofstream f(out_path);
        write_aggregates(f, aggs, fnv1a_hex(joined));
      }
      return kExitOk;
    }

    CLI::App* active = app.get_subcommands().front();
    const ExperimentConfig config = detail::load_config(config_path, active->remaining());
    const std::string hash = config_hash(config);

    if (synth->parsed()) {
      const auto data = datasets_for_seed(config.data, config.seeds.front());
      Dataset ds;
      if (split_name == "train") ds = data.train;
      else if (split_name == "val") ds = data.val;
      else if (split_name == "test") ds = data.test;
      else if (split_name == "all") {
        DataSpec s = config.data;
        s.seed += config.seeds.front();
        ds = s.source == "idx" ? load_idx(s.images, s.labels)
                               : generate_synthetic(s.seed, s.n_per_class, s.num_classes, s.layout,
                                                    s.noise_sigma);
      } else {
        throw ConfigError("--split must be all, train, val or test");
      }
      const std::string header = "# config=" + hash;
      if (out_path.empty()) {
        write_csv(out, ds, header);
      } else {
        std::ofstream f(out_path);
        if (!f) throw std::runtime_error("cannot write " + out_path);
        write_csv(f, ds, header);
      }
      return kExitOk;
    }

    if (train->parsed()) {
      const fs::path dir = resolve_run_dir(config, run_dir);
      write_config_snapshot(dir, config);
      std::vector<EvalReport> reports;
      for (std::uint64_t seed : config.seeds) {
        const fs::path sd = dir / fmt::format("seed{}", seed);
        const auto s = train_seed(config, seed, sd.string());
        reports.push_back(evaluate(s.run.best_model, s.data.test, config.eval.attack_spec(),
                                   config.eval.proxy, derive_seed(config.eval.seed, seed, 0),
                                   fmt::format("{}/seed{}", to_string(config.train.loss.method), seed),
                                   config.train.worker_threads()));
        const auto& r = reports.back();
        out << fmt::format("seed {} best_epoch {} clean {:.3f} {} {:.3f} mean {:.3f} nrr {:.3f}\n",
                           seed, s.run.best.epoch, 100 * r.clean_acc, r.attack_tag,
                           100 * r.robust_acc, 100 * r.mean, 100 * r.nrr);
      }
      detail::write_reports_csv(dir / "report.csv", reports, hash);
      detail::write_plot_csv(dir / "plot_data.csv", reports, hash);
      out << "run directory: " << dir.string() << '\n';
      return kExitOk;
    }

    if (eval->parsed() || attack->parsed()) {
      const auto ck = load_checkpoint(checkpoint);
      const std::uint64_t seed = have_seed ? seed_opt : config.seeds.front();
      const auto data = datasets_for_seed(config.data, seed);
      if (ck.model.descriptor().input_shape.size() != data.test.input_shape.size())
        throw ConfigError("checkpoint input size does not match the configured data");
      AttackSpec spec = config.eval.attack_spec();
      if (attack->parsed()) {
        spec.kind = parse_attack_kind(attack_name);
        spec.budget = {parse_norm(norm_name), eps, step, steps, random_start};
        spec.budget.validate();
      }
      const std::uint64_t eval_seed = derive_seed(config.eval.seed, seed, 0);
      const auto r = evaluate(ck.model, data.test, spec, config.eval.proxy, eval_seed,
                              fs::path(checkpoint).stem().string(), config.train.worker_threads());
      out << fmt::format("clean {:.3f} {} {:.3f} mean {:.3f} nrr {:.3f}\n", 100 * r.clean_acc,
                         r.attack_tag, 100 * r.robust_acc, 100 * r.mean, 100 * r.nrr);
      if (attack->parsed() && !out_path.empty()) {
        Dataset adv = data.test;
        const auto xs = attacked_inputs(ck.model, data.test, spec, eval_seed,
                                        config.train.worker_threads());
        for (std::size_t i = 0; i < adv.size(); ++i) adv.examples[i].features = xs[i];
        std::ofstream f(out_path);
        write_csv(f, adv, "# config=" + hash);
      }
      if (eval->parsed() && !run_dir.empty()) {
        fs::create_directories(run_dir);
        detail::write_reports_csv(fs::path(run_dir) / "report.csv", {r}, hash);
        detail::write_plot_csv(fs::path(run_dir) / "plot_data.csv", {r}, hash);
      }
      return kExitOk;
    }

    if (perception->parsed()) {
      std::vector<TrainCondition> conds;
      for (const auto& c : detail::split_list(conditions)) conds.push_back(parse_train_condition(c));
      std::vector<AttackKind> perts;
      for (const auto& p : detail::split_list(perturbations)) perts.push_back(parse_attack_kind(p));
      const auto cells = perception_experiment(config, conds, perts);
      std::vector<EvalReport> reports;
      for (const auto& c : cells) {
        reports.push_back(c.report);
        const auto fw = c.failure_worse();
        out << fmt::format("{:<32} success {:>4} mse {:<12} failure {:>4} mse {:<12} {}\n",
                           c.report.tag, c.report.gap.n_success,
                           detail::opt_cell(c.report.gap.mse_success), c.report.gap.n_failure,
                           detail::opt_cell(c.report.gap.mse_failure),
                           fw ? (*fw ? "failure>success" : "failure<=success") : "one group empty");
      }
      const fs::path dir = resolve_run_dir(config, run_dir);
      write_config_snapshot(dir, config);
      detail::write_reports_csv(dir / "perception.csv", reports, hash);
      detail::write_plot_csv(dir / "plot_data.csv", reports, hash);
      out << "run directory: " << dir.string() << '\n';
      return kExitOk;
    }

    if (verify->parsed()) {
      const fs::path dir = resolve_run_dir(config, run_dir);
      write_config_snapshot(dir, config);
      const auto res = smoothing_experiment(config, dir.string());
      std::vector<EvalReport> reports;
      for (const auto& s : res.seeds) {
        const fs::path sd = dir / fmt::format("seed{}", s.seed);
        std::ofstream cb(sd / "curvature_baseline.csv");
        write_curvature_csv(cb, s.comparison.baseline, hash);
        std::ofstream cr(sd / "curvature_rpat.csv");
        write_curvature_csv(cr, s.comparison.rpat, hash);
        reports.push_back(s.baseline);
        reports.push_back(s.rpat);
        out << fmt::format(
            "seed {} curvature {:.4g} -> {:.4g} ({:+.1f}%) drift {:.4g} -> {:.4g} ({:+.1f}%) "
            "rp {:.4g} -> {:.4g} K {:.4g} -> {:.4g}\n",
            s.seed, s.comparison.baseline_summary.median_curvature,
            s.comparison.rpat_summary.median_curvature,
            -100 * s.comparison.median_curvature_reduction,
            s.comparison.baseline_summary.median_gamma, s.comparison.rpat_summary.median_gamma,
            -100 * s.comparison.median_gamma_reduction, s.comparison.baseline_summary.mean_rp_term,
            s.comparison.rpat_summary.mean_rp_term, s.comparison.baseline_summary.lipschitz_bound,
            s.comparison.rpat_summary.lipschitz_bound);
      }
      detail::write_reports_csv(dir / "report.csv", reports, hash);
      std::ofstream sj(dir / "summary.json");
      sj << to_json(res, hash).dump(2) << '\n';
      out << fmt::format("mean score baseline {:.3f} rpat {:.3f}\n", 100 * res.baseline_mean_score,
                         100 * res.rpat_mean_score);
      out << "run directory: " << dir.string() << '\n';
      return kExitOk;
    }

    if (abl->parsed()) {
      std::vector<AblationCell> grid;
      for (const auto& d : detail::split_list(divergences)) {
        for (const auto& a : detail::split_list(alphas)) {
          AblationCell cell{parse_divergence(d), AlphaMode::fixed, 0.5};
          if (a == "beta_minus" || a == "beta_plus") {
            cell.alpha_mode = parse_alpha_mode(a);
          } else {
            try {
              cell.alpha = std::stod(a);
            } catch (const std::exception&) {
              throw ConfigError("bad alpha '" + a + "'");
            }
          }
          grid.push_back(cell);
        }
      }
      const auto reports = ablate(config, grid);
      const fs::path dir = resolve_run_dir(config, run_dir);
      write_config_snapshot(dir, config);
      detail::write_reports_csv(dir / "ablation.csv", reports, hash);
      for (const auto& r : reports)
        out << fmt::format("{:<28} clean {:.3f} robust {:.3f} mean {:.3f} nrr {:.3f}\n", r.tag,
                           100 * r.clean_acc, 100 * r.robust_acc, 100 * r.mean, 100 * r.nrr);
      out << "run directory: " << dir.string() << '\n';
      return kExitOk;
    }
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  err << "error: no subcommand handled\n";
  return kExitConfig;
}

}  // namespace rpat
