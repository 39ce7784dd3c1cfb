#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "rpat/attack.hpp"
#include "rpat/core.hpp"
#include "rpat/data.hpp"
#include "rpat/eval.hpp"
#include "rpat/loss.hpp"
#include "rpat/model.hpp"

namespace rpat {

struct TrainConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 128;
  int epochs = 60;
  std::vector<int> lr_milestones{40, 50};
  double lr_factor = 0.1;
  std::uint64_t seed = 0;
  AttackKind attack = AttackKind::pgd;
  Budget budget;
  LossConfig loss;
  AugmentConfig augment;
  // Validation adversary; PGD with this many steps under `budget`.
  int val_attack_steps = 10;
  bool strict_deterministic = true;
  unsigned threads = 1;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    for (std::size_t i = 0; i < lr_milestones.size(); ++i) {
      if (lr_milestones[i] >= epochs) throw ConfigError("lr milestone beyond the last epoch");
      if (i > 0 && lr_milestones[i] <= lr_milestones[i - 1])
        throw ConfigError("lr milestones must be strictly increasing");
    }
    if (val_attack_steps < 1) throw ConfigError("val_attack_steps must be >= 1");
    budget.validate();
    loss.validate();
  }

  AttackSpec train_attack() const {
    return {attack, budget,
            loss.uses_trades() ? AttackLoss::trades_kl : AttackLoss::cross_entropy};
  }

  AttackSpec val_attack() const {
    Budget b = budget;
    b.num_steps = val_attack_steps;
    return {AttackKind::pgd, b, AttackLoss::cross_entropy};
  }

  unsigned worker_threads() const { return strict_deterministic ? 1u : std::max(1u, threads); }
};

/// lr * factor^(number of milestones <= epoch).
inline double lr_at(int epoch, const TrainConfig& config) {
  double lr = config.lr;
  for (int m : config.lr_milestones)
    if (m <= epoch) lr *= config.lr_factor;
  return lr;
}

/// Heavy-ball SGD with coupled weight decay:
///   v <- momentum * v + (g + weight_decay * theta);  theta <- theta - lr * v
inline void sgd_step(std::span<double> params, std::span<const double> grads,
                     std::span<double> velocity, double lr, double momentum,
                     double weight_decay) {
  if (params.size() != grads.size() || params.size() != velocity.size())
    throw ContractError("sgd_step: parameter, gradient and velocity sizes differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + (grads[i] + weight_decay * params[i]);
    params[i] -= lr * velocity[i];
  }
}

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double ce_term = 0.0;
  double rp_term = 0.0;
};

struct CheckpointRecord {
  int epoch = 0;
  std::vector<double> params;
  double clean_val_acc = 0.0;
  double pgd_val_acc = 0.0;
};

/// One pass over the shuffled training split: augment, attack the current
/// parameters, take an SGD step on the configured loss.
inline EpochMetrics train_epoch(Model& model, std::vector<double>& velocity, const Dataset& train,
                                const TrainConfig& config, int epoch) {
  if (train.size() == 0) throw ContractError("empty training split");
  if (velocity.size() != model.num_params()) velocity.assign(model.num_params(), 0.0);
  const AttackSpec attack = config.train_attack();
  const double lr = lr_at(epoch, config);
  const unsigned threads = config.worker_threads();

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng = make_rng(config.seed, 0x5ff1e, static_cast<std::uint64_t>(epoch));
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  EpochMetrics m;
  m.epoch = epoch;
  m.lr = lr;
  std::size_t batches = 0;
  std::vector<double> grad(model.num_params());
  for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
    const std::size_t n = std::min(config.batch_size, order.size() - start);
    std::vector<Vector> xs(n), advs(n);
    std::vector<std::size_t> ys(n);
    parallel_for(n, threads, [&](std::size_t j) {
      const std::size_t idx = order[start + j];
      Rng rng = make_rng(config.seed ^ 0x7a11, static_cast<std::uint64_t>(epoch), idx);
      const LabeledExample ex = augment(train.examples[idx], train.input_shape, config.augment, rng);
      xs[j] = ex.features;
      ys[j] = ex.label;
      advs[j] = run_attack(model, ex.features, ex.label, attack, rng);
    });

    std::fill(grad.begin(), grad.end(), 0.0);
    Rng alpha_rng = make_rng(config.seed ^ 0xa1fa, static_cast<std::uint64_t>(epoch), batches);
    LossBreakdown lb;
    try {
      lb = batch_loss(model, xs, ys, advs, config.loss, alpha_rng, grad);
    } catch (const NumericError& e) {
      throw NumericError(fmt::format("epoch {} batch {}: {}", epoch, batches, e.what()));
    }
    sgd_step(model.mutable_params(), grad, velocity, lr, config.momentum, config.weight_decay);
    model.bump_version();
    m.train_loss += lb.total;
    m.ce_term += lb.ce_term;
    m.rp_term += lb.rp_term;
    ++batches;
  }
  m.train_loss /= static_cast<double>(batches);
  m.ce_term /= static_cast<double>(batches);
  m.rp_term /= static_cast<double>(batches);
  return m;
}

/// Highest PGD validation accuracy; ties go to the earliest epoch.
inline const CheckpointRecord& select_best(const std::vector<CheckpointRecord>& history) {
  if (history.empty()) throw ContractError("select_best on an empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    const auto& c = history[i];
    const auto& b = history[best];
    if (c.pgd_val_acc > b.pgd_val_acc || (c.pgd_val_acc == b.pgd_val_acc && c.epoch < b.epoch))
      best = i;
  }
  return history[best];
}

struct RunArtifacts {
  std::vector<EpochMetrics> metrics;
  std::vector<CheckpointRecord> history;
  CheckpointRecord best;
  Model final_model;
  Model best_model;
};

inline constexpr const char* kMetricsCsvHeader =
    "epoch,lr,train_loss,ce_term,rp_term,clean_val_acc,pgd_val_acc";

inline void write_metrics_csv(std::ostream& out, const RunArtifacts& run,
                              const std::string& config_hash) {
  out << "# config=" << config_hash << '\n' << kMetricsCsvHeader << '\n';
  for (std::size_t i = 0; i < run.metrics.size(); ++i) {
    const auto& m = run.metrics[i];
    const auto& h = run.history[i];
    out << fmt::format("{},{:.9g},{:.9g},{:.9g},{:.9g},{:.6f},{:.6f}\n", m.epoch, m.lr,
                       m.train_loss, m.ce_term, m.rp_term, h.clean_val_acc, h.pgd_val_acc);
  }
}

/// Trains from `initial` for config.epochs epochs, validating after each.
/// With a non-empty `run_dir`, writes metrics.csv, best.ckpt and final.ckpt
/// there; every file carries `config_hash`.
inline RunArtifacts run_experiment(const TrainConfig& config, const Model& initial,
                                   const Dataset& train, const Dataset& val,
                                   const std::string& run_dir = {},
                                   const std::string& config_hash = "none") {
  config.validate();
  RunArtifacts run{{}, {}, {}, initial, initial};
  std::vector<double> velocity(initial.num_params(), 0.0);
  const AttackSpec val_attack = config.val_attack();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    run.metrics.push_back(train_epoch(run.final_model, velocity, train, config, epoch));
    CheckpointRecord rec;
    rec.epoch = epoch;
    rec.params = run.final_model.params().values;
    if (val.size() > 0) {
      rec.clean_val_acc = clean_accuracy(run.final_model, val);
      rec.pgd_val_acc = robust_accuracy(run.final_model, val, val_attack,
                                        derive_seed(config.seed, 0x7a1, epoch),
                                        config.worker_threads());
    }
    run.history.push_back(std::move(rec));
  }
  run.best = select_best(run.history);
  run.best_model.set_params(run.best.params);

  if (!run_dir.empty()) {
    std::filesystem::create_directories(run_dir);
    auto meta = [&](const CheckpointRecord& r) {
      return nlohmann::json{{"config_hash", config_hash},
                            {"epoch", r.epoch},
                            {"clean_val_acc", r.clean_val_acc},
                            {"pgd_val_acc", r.pgd_val_acc}};
    };
    save_checkpoint(run_dir + "/best.ckpt", run.best_model, meta(run.best));
    save_checkpoint(run_dir + "/final.ckpt", run.final_model, meta(run.history.back()));
    std::ofstream csv(run_dir + "/metrics.csv");
    write_metrics_csv(csv, run, config_hash);
  }
  return run;
}

}  // namespace rpat
