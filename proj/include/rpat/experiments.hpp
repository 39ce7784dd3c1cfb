#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "rpat/config.hpp"
#include "rpat/eval.hpp"
#include "rpat/train.hpp"
#include "rpat/verify.hpp"

namespace rpat {

/// Explicit directory wins; otherwise `<root>/<UTC timestamp>_<hash8>` where
/// root is $RPAT_OUTPUT_ROOT or config.output_dir. A numeric suffix avoids
/// reusing an existing directory.
inline std::filesystem::path resolve_run_dir(const ExperimentConfig& config,
                                             const std::string& explicit_dir = {}) {
  namespace fs = std::filesystem;
  if (!explicit_dir.empty()) return explicit_dir;
  const char* env = std::getenv(kOutputRootEnv);
  const fs::path root = env && *env ? fs::path(env) : fs::path(config.output_dir);
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
  const std::string base = fmt::format("{}_{}", stamp, hash8(config_hash(config)));
  fs::path dir = root / base;
  for (int k = 1; fs::exists(dir); ++k) dir = root / fmt::format("{}-{}", base, k);
  return dir;
}

inline void write_config_snapshot(const std::filesystem::path& dir, const ExperimentConfig& c) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "config.json");
  out << to_json(c).dump(2) << '\n';
}

/// Dataset for one run seed: the data seed is offset by the run seed so each
/// seed sees its own draw of the synthetic task. IDX data ignores the offset
/// in generation but still reshuffles the split.
inline DatasetSplits datasets_for_seed(const DataSpec& spec, std::uint64_t seed) {
  DataSpec s = spec;
  s.seed = spec.seed + seed;
  return build_datasets(s);
}

struct SeedRun {
  std::uint64_t seed = 0;
  DatasetSplits data;
  RunArtifacts run;
};

inline SeedRun train_seed(const ExperimentConfig& config, std::uint64_t seed,
                          const std::string& run_dir = {}) {
  SeedRun s;
  s.seed = seed;
  s.data = datasets_for_seed(config.data, seed);
  const auto arch = architecture_for(config, s.data.train);
  s.run = run_experiment(config.train_config(seed), Model::initialized(arch, seed), s.data.train,
                         s.data.val, run_dir, config_hash(config));
  return s;
}

// ---------------------------------------------------------------------------
// Perception consistency by defense outcome.

enum class TrainCondition { clean, random, adversarial };

inline std::string_view to_string(TrainCondition c) {
  switch (c) {
    case TrainCondition::clean: return "clean";
    case TrainCondition::random: return "random";
    case TrainCondition::adversarial: return "at";
  }
  return "?";
}

inline TrainCondition parse_train_condition(std::string_view s) {
  if (s == "clean") return TrainCondition::clean;
  if (s == "random") return TrainCondition::random;
  if (s == "at") return TrainCondition::adversarial;
  throw ConfigError(fmt::format("unknown training condition '{}'", s));
}

struct PerceptionCell {
  TrainCondition condition = TrainCondition::clean;
  AttackKind perturbation = AttackKind::random;
  std::uint64_t seed = 0;
  EvalReport report;

  /// Failure cases perceived worse than success cases. Absent when a group is empty.
  std::optional<bool> failure_worse() const {
    if (!report.gap.mse_success || !report.gap.mse_failure) return std::nullopt;
    return *report.gap.mse_failure > *report.gap.mse_success;
  }
};

/// Trains one model per (condition, seed) with the PGD-AT objective (the
/// perturbation source changes, the loss does not) and evaluates each under
/// every requested perturbation with the eval budget.
inline std::vector<PerceptionCell> perception_experiment(
    const ExperimentConfig& config, const std::vector<TrainCondition>& conditions,
    const std::vector<AttackKind>& perturbations) {
  std::vector<PerceptionCell> cells;
  for (std::uint64_t seed : config.seeds) {
    const auto data = datasets_for_seed(config.data, seed);
    const auto arch = architecture_for(config, data.train);
    for (auto cond : conditions) {
      TrainConfig tc = config.train_config(seed);
      tc.loss.method = LossMethod::pgd_at;
      tc.attack = cond == TrainCondition::clean    ? AttackKind::none
                  : cond == TrainCondition::random ? AttackKind::random
                                                   : AttackKind::pgd;
      const auto run = run_experiment(tc, Model::initialized(arch, seed), data.train, data.val);
      for (auto pert : perturbations) {
        const AttackSpec spec{pert, config.eval.budget, AttackLoss::cross_entropy};
        PerceptionCell c{cond, pert, seed, {}};
        c.report = evaluate(run.best_model, data.test, spec, config.eval.proxy,
                            derive_seed(config.eval.seed, seed, 0),
                            fmt::format("{}_train/{}_eval/seed{}", to_string(cond), to_string(pert), seed),
                            tc.worker_threads());
        cells.push_back(std::move(c));
      }
    }
  }
  return cells;
}

// ---------------------------------------------------------------------------
// Baseline (lambda = 0) against the configured perception-regularized model.

struct SmoothingSeed {
  std::uint64_t seed = 0;
  ModelComparison comparison;
  EvalReport baseline;
  EvalReport rpat;
};

struct SmoothingResult {
  std::vector<SmoothingSeed> seeds;
  double mean_curvature_reduction = 0.0;  // average of per-seed median reductions
  double mean_gamma_reduction = 0.0;
  double mean_rp_reduction = 0.0;
  double baseline_mean_score = 0.0;  // seed-averaged (clean + robust) / 2
  double rpat_mean_score = 0.0;
};

inline ExperimentConfig baseline_of(const ExperimentConfig& c) {
  ExperimentConfig b = c;
  b.train.loss.method = c.train.loss.uses_trades() ? LossMethod::trades : LossMethod::pgd_at;
  b.train.loss.rpat.lambda = 0.0;
  return b;
}

/// Both models share the dataset, the initialization and every random stream
/// for a seed; they differ only in the objective. With a non-empty `root`
/// each run lands in `<root>/seed<k>/{baseline,rpat}`.
inline SmoothingResult smoothing_experiment(const ExperimentConfig& config,
                                            const std::string& root = {}) {
  SmoothingResult res;
  const ExperimentConfig base_cfg = baseline_of(config);
  for (std::uint64_t seed : config.seeds) {
    const auto data = datasets_for_seed(config.data, seed);
    const auto arch = architecture_for(config, data.train);
    const Model init = Model::initialized(arch, seed);
    const std::string dir = root.empty() ? std::string() : fmt::format("{}/seed{}", root, seed);
    const auto base = run_experiment(base_cfg.train_config(seed), init, data.train, data.val,
                                     dir.empty() ? dir : dir + "/baseline", config_hash(base_cfg));
    const auto rp = run_experiment(config.train_config(seed), init, data.train, data.val,
                                   dir.empty() ? dir : dir + "/rpat", config_hash(config));
    const AttackSpec eval_attack = config.eval.attack_spec();
    const unsigned threads = config.train.worker_threads();
    SmoothingSeed s;
    s.seed = seed;
    s.comparison = compare_models(base.best_model, rp.best_model, data.test, eval_attack,
                                  config.eval.proxy, derive_seed(config.eval.seed, seed, 1),
                                  config.eval.probe_step, threads);
    const std::uint64_t eval_seed = derive_seed(config.eval.seed, seed, 0);
    s.baseline = evaluate(base.best_model, data.test, eval_attack, config.eval.proxy, eval_seed,
                          fmt::format("baseline/seed{}", seed), threads);
    s.rpat = evaluate(rp.best_model, data.test, eval_attack, config.eval.proxy, eval_seed,
                      fmt::format("rpat/seed{}", seed), threads);
    res.seeds.push_back(std::move(s));
  }
  const double n = static_cast<double>(res.seeds.size());
  for (const auto& s : res.seeds) {
    res.mean_curvature_reduction += s.comparison.median_curvature_reduction / n;
    res.mean_gamma_reduction += s.comparison.median_gamma_reduction / n;
    res.mean_rp_reduction += s.comparison.rp_term_reduction / n;
    res.baseline_mean_score += s.baseline.mean / n;
    res.rpat_mean_score += s.rpat.mean / n;
  }
  return res;
}

inline nlohmann::json to_json(const SmoothingResult& r, const std::string& hash) {
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : r.seeds)
    seeds.push_back({{"seed", s.seed},
                     {"comparison", to_json(s.comparison)},
                     {"baseline_mean_score", s.baseline.mean},
                     {"rpat_mean_score", s.rpat.mean}});
  return {{"config", hash},
          {"seeds", seeds},
          {"mean_curvature_reduction", r.mean_curvature_reduction},
          {"mean_gamma_reduction", r.mean_gamma_reduction},
          {"mean_rp_reduction", r.mean_rp_reduction},
          {"baseline_mean_score", r.baseline_mean_score},
          {"rpat_mean_score", r.rpat_mean_score},
          {"lipschitz_note", "sup over the evaluated sample only; a lower bound on the true sup"}};
}

// ---------------------------------------------------------------------------
// Divergence by alpha sweep.

struct AblationCell {
  Divergence divergence = Divergence::mse;
  AlphaMode alpha_mode = AlphaMode::fixed;
  double alpha = 0.5;
  std::string tag() const {
    return alpha_mode == AlphaMode::fixed
               ? fmt::format("{}/alpha={}", to_string(divergence), alpha)
               : fmt::format("{}/{}", to_string(divergence), to_string(alpha_mode));
  }
};

inline std::vector<AblationCell> default_ablation_grid() {
  std::vector<AblationCell> grid;
  for (auto d : {Divergence::mse, Divergence::kl, Divergence::js, Divergence::cosine}) {
    for (double a : {0.2, 0.5, 0.8}) grid.push_back({d, AlphaMode::fixed, a});
    grid.push_back({d, AlphaMode::beta_minus, 0.5});
    grid.push_back({d, AlphaMode::beta_plus, 0.5});
  }
  return grid;
}

/// One EvalReport per (cell, seed); tags are `<cell>/seed<k>`.
inline std::vector<EvalReport> ablate(const ExperimentConfig& base,
                                      const std::vector<AblationCell>& grid) {
  std::vector<EvalReport> out;
  for (const auto& cell : grid) {
    ExperimentConfig c = base;
    c.train.loss.rpat.divergence = cell.divergence;
    c.train.loss.rpat.alpha_mode = cell.alpha_mode;
    c.train.loss.rpat.alpha = cell.alpha;
    for (std::uint64_t seed : c.seeds) {
      const auto s = train_seed(c, seed);
      out.push_back(evaluate(s.run.best_model, s.data.test, c.eval.attack_spec(), c.eval.proxy,
                             derive_seed(c.eval.seed, seed, 0),
                             fmt::format("{}/seed{}", cell.tag(), seed),
                             c.train.worker_threads()));
    }
  }
  return out;
}

}  // namespace rpat
