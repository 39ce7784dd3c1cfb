// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any fails.
#include <chrono>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "properties.hpp"
#include "rpat/cli.hpp"

using namespace rpat;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool ok = false;
  std::string detail;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig shipped(const char* name) {
  return config_from_json(load_json_file(std::string(RPAT_CONFIG_DIR) + "/" + name));
}

Outcome table_arithmetic() {
  const auto checks = reproduce_tables(std::string(RPAT_DATA_DIR) + "/reference_tables.csv");
  std::size_t bad = 0;
  for (const auto& c : checks) bad += !c.ok;
  const bool spot = std::abs(round_to(100 * nrr(0.8320, 0.4800), 3) - 60.878) < 1e-9 &&
                    std::abs(round_to(mean_score(83.20, 48.00), 3) - 65.600) < 1e-9 &&
                    std::abs(round_to(nrr(82.92, 46.74), 3) - 59.782) < 1e-9;
  return {checks.size() == 48 && bad == 0 && spot,
          fmt::format("{} rows, {} mismatched, spot values {}", checks.size(), bad, spot ? "ok" : "wrong")};
}

Outcome gradients() {
  double worst = 0.0;
  std::size_t n = 0;
  for (auto d : {Divergence::mse, Divergence::kl, Divergence::js, Divergence::cosine}) {
    for (std::uint64_t s = 0; s < 20; ++s, ++n) {
      auto f = testing::make_loss_fixture(1000 + s, LossMethod::rpat, d);
      worst = std::max(worst, testing::loss_gradient_error(f));
    }
  }
  return {worst < 1e-4, fmt::format("{} fixtures, worst relative error {:.2e}", n, worst)};
}

Outcome affine() {
  const auto w = testing::affine_nullity(100, 77);
  return {w.rp <= 1e-8 && w.curvature <= 1e-8 && w.drift <= 1e-8,
          fmt::format("max rp {:.2e} curvature {:.2e} drift {:.2e}", w.rp, w.curvature, w.drift)};
}

Outcome attacks() {
  const auto c = testing::pgd_containment(1000, 11);
  const std::size_t collapse = testing::pgd_fgsm_mismatches(1000, 12);
  const std::size_t enumeration = testing::fgsm_enumeration_mismatches(500, 13);
  return {c.ball_violations == 0 && c.box_violations == 0 && collapse == 0 && enumeration == 0,
          fmt::format("ball {} box {} collapse {} enumeration {}", c.ball_violations,
                      c.box_violations, collapse, enumeration)};
}

Outcome perception() {
  const auto config = shipped("perception.json");
  const auto cells = perception_experiment(config, {TrainCondition::clean, TrainCondition::adversarial},
                                           {AttackKind::random});
  std::size_t worse = 0, clean_seeds = 0, at_reversed = 0, at_seeds = 0;
  for (const auto& c : cells) {
    const auto fw = c.failure_worse();
    std::cout << fmt::format("    {:<32} mse_success {:<12} mse_failure {:<12}\n", c.report.tag,
                             detail::opt_cell(c.report.gap.mse_success),
                             detail::opt_cell(c.report.gap.mse_failure));
    if (c.condition == TrainCondition::clean) {
      ++clean_seeds;
      worse += fw.value_or(false);
    } else {
      ++at_seeds;
      at_reversed += fw.has_value() && !*fw;
    }
  }
  std::cout << fmt::format("    report only: adversarial training shows failure < success in {}/{} seeds\n",
                           at_reversed, at_seeds);
  return {clean_seeds == 5 && worse >= 4,
          fmt::format("clean training: failure > success in {}/{} seeds", worse, clean_seeds)};
}

struct SmoothingOutcome {
  Outcome smoothing, tradeoff;
};

SmoothingOutcome smoothing() {
  const auto config = shipped("smoothing.json");
  const auto res = smoothing_experiment(config);
  bool each = res.seeds.size() == 3;
  for (const auto& s : res.seeds) {
    const auto& c = s.comparison;
    std::cout << fmt::format("    seed {} curvature -{:.1f}% drift -{:.1f}% rp -{:.1f}% mean {:.3f} -> {:.3f}\n",
                             s.seed, 100 * c.median_curvature_reduction, 100 * c.median_gamma_reduction,
                             100 * c.rp_term_reduction, 100 * s.baseline.mean, 100 * s.rpat.mean);
    each = each && c.median_curvature_reduction >= 0.2 && c.median_gamma_reduction >= 0.2 &&
           c.rp_term_reduction >= 0.5;
  }
  SmoothingOutcome o;
  o.smoothing = {each, fmt::format("every seed reduces curvature and drift by >= 20% and rp by >= 50% "
                                   "(averages {:.1f}% {:.1f}% {:.1f}%)",
                                   100 * res.mean_curvature_reduction, 100 * res.mean_gamma_reduction,
                                   100 * res.mean_rp_reduction)};
  const double gap = 100 * (res.rpat_mean_score - res.baseline_mean_score);
  o.tradeoff = {gap >= -0.5, fmt::format("mean score baseline {:.3f} rpat {:.3f} (difference {:+.3f} points)",
                                         100 * res.baseline_mean_score, 100 * res.rpat_mean_score, gap)};
  return o;
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "rpat_acceptance_determinism";
  fs::remove_all(root);
  const std::vector<std::string> small{"--config", std::string(RPAT_CONFIG_DIR) + "/smoothing.json",
                                       "--data.n_per_class", "300", "--train.epochs", "6",
                                       "--train.lr_milestones", "[4]", "--seeds", "[0, 1]"};
  std::size_t compared = 0, differing = 0;
  for (const char* cmd : {"train", "verify-theorems"}) {
    for (const char* side : {"a", "b"}) {
      std::vector<std::string> args{cmd, "--run-dir", (root / cmd / side).string()};
      args.insert(args.end(), small.begin(), small.end());
      std::ostringstream out, err;
      if (run_cli(args, out, err) != kExitOk) return {false, fmt::format("{} failed: {}", cmd, err.str())};
    }
    const fs::path a = root / cmd / "a", b = root / cmd / "b";
    for (const auto& e : fs::recursive_directory_iterator(a)) {
      if (!e.is_regular_file()) continue;
      const fs::path rel = fs::relative(e.path(), a);
      ++compared;
      if (!fs::exists(b / rel) || slurp(e.path()) != slurp(b / rel)) {
        ++differing;
        std::cout << "    differs: " << (fs::path(cmd) / rel).string() << '\n';
      }
    }
  }
  fs::remove_all(root);
  return {compared > 0 && differing == 0, fmt::format("{} files compared, {} differ", compared, differing)};
}

Outcome spectral() {
  const double err = testing::spectral_oracle_error(50, 32, 21);
  return {err <= 1e-8, fmt::format("worst relative error {:.2e} on 50 matrices", err)};
}

Outcome best_checkpoint() {
  const std::size_t bad = testing::best_checkpoint_mismatches(2000, 31);
  return {bad == 0, fmt::format("{} mismatches over 2000 histories", bad)};
}

}  // namespace

int main() {
  using clock = std::chrono::steady_clock;
  int failed = 0;
  auto report = [&](int id, const char* name, double limit_s, const std::function<Outcome()>& fn,
                    double prior_s = 0.0) {
    const auto t0 = clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = prior_s + std::chrono::duration<double>(clock::now() - t0).count();
    const bool ok = o.ok && secs < limit_s;
    failed += !ok;
    std::cout << fmt::format("{} {:>2} {:<28} {:.2f}s (limit {:.0f}s)  {}\n", ok ? "PASS" : "FAIL", id,
                             name, secs, limit_s, o.detail)
              << std::flush;
  };

  report(1, "table arithmetic", 1, table_arithmetic);
  report(2, "gradient correctness", 30, gradients);
  report(3, "affine nullity", 10, affine);
  report(4, "attack containment", 60, attacks);
  report(5, "clean-training perception", 300, perception);

  SmoothingOutcome s;
  const auto t0 = clock::now();
  try {
    s = smoothing();
  } catch (const std::exception& e) {
    s.smoothing = s.tradeoff = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(clock::now() - t0).count();
  // Criterion 7 reuses the runs of criterion 6, so both carry the same time.
  report(6, "smoothing effect", 600, [&] { return s.smoothing; }, secs);
  report(7, "trade-off sanity", 600, [&] { return s.tradeoff; }, secs);

  report(8, "determinism", 120, determinism);
  report(9, "spectral-norm oracle", 10, spectral);
  report(10, "best-checkpoint rule", 1, best_checkpoint);

  std::cout << (failed ? fmt::format("{} criteria failed\n", failed) : std::string("all criteria passed\n"));
  return failed ? 1 : 0;
}
