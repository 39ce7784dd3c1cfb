#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "rpat/attack.hpp"
#include "rpat/core.hpp"
#include "rpat/data.hpp"
#include "rpat/model.hpp"

namespace rpat {

/// Attacked copy of every input. Example i draws from a stream derived from
/// (seed, i), so results do not depend on the thread count.
inline std::vector<Vector> attacked_inputs(const Model& model, const Dataset& ds,
                                           const AttackSpec& spec, std::uint64_t seed,
                                           unsigned threads = 1) {
  std::vector<Vector> out(ds.size());
  parallel_for(ds.size(), threads, [&](std::size_t i) {
    Rng rng = make_rng(seed, 0xa77ac, i);
    out[i] = run_attack(model, ds.examples[i].features, ds.examples[i].label, spec, rng);
  });
  return out;
}

inline double clean_accuracy(const Model& model, const Dataset& ds) {
  if (ds.size() == 0) throw ContractError("accuracy of an empty dataset");
  std::size_t correct = 0;
  for (const auto& ex : ds.examples) correct += model.predict(ex.features) == ex.label;
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

inline double robust_accuracy(const Model& model, const Dataset& ds, const AttackSpec& spec,
                              std::uint64_t seed = 0, unsigned threads = 1) {
  if (ds.size() == 0) throw ContractError("accuracy of an empty dataset");
  const auto adv = attacked_inputs(model, ds, spec, seed, threads);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) correct += model.predict(adv[i]) == ds.examples[i].label;
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

inline double mean_score(double clean, double robust) { return (clean + robust) / 2.0; }

/// Harmonic mean of clean accuracy and robustness; 0 when both are 0.
inline double nrr(double clean, double robust) {
  const double s = clean + robust;
  if (s == 0.0) return 0.0;
  return 2.0 * clean * robust / s;
}

struct SuccessFailureSplit {
  std::vector<std::size_t> success;  // attacked input still classified correctly
  std::vector<std::size_t> failure;
};

inline SuccessFailureSplit split_success_failure(const Model& model, const Dataset& ds,
                                                 const std::vector<Vector>& attacked) {
  SuccessFailureSplit s;
  for (std::size_t i = 0; i < ds.size(); ++i)
    (model.predict(attacked[i]) == ds.examples[i].label ? s.success : s.failure).push_back(i);
  return s;
}

inline SuccessFailureSplit split_success_failure(const Model& model, const Dataset& ds,
                                                 const AttackSpec& spec, std::uint64_t seed = 0,
                                                 unsigned threads = 1) {
  return split_success_failure(model, ds, attacked_inputs(model, ds, spec, seed, threads));
}

struct PerceptionGap {
  std::optional<double> mse_success;  // absent when the group is empty
  std::optional<double> mse_failure;
  std::size_t n_success = 0;
  std::size_t n_failure = 0;
};

/// Group-wise mean of the per-example, per-dimension mean squared difference
/// between the perception of a benign input and of its attacked copy. The same
/// attacked copies decide group membership.
inline PerceptionGap perception_mse_gap(const Model& model, const Dataset& ds,
                                        const std::vector<Vector>& attacked,
                                        PerceptionProxy proxy) {
  const auto split = split_success_failure(model, ds, attacked);
  auto group_mean = [&](const std::vector<std::size_t>& idx) -> std::optional<double> {
    if (idx.empty()) return std::nullopt;
    double sum = 0.0;
    for (std::size_t i : idx) {
      const Vector d = model.perception(ds.examples[i].features, proxy) -
                       model.perception(attacked[i], proxy);
      sum += d.squaredNorm() / static_cast<double>(d.size());
    }
    return sum / static_cast<double>(idx.size());
  };
  return {group_mean(split.success), group_mean(split.failure), split.success.size(),
          split.failure.size()};
}

inline PerceptionGap perception_mse_gap(const Model& model, const Dataset& ds,
                                        const AttackSpec& spec, PerceptionProxy proxy,
                                        std::uint64_t seed = 0, unsigned threads = 1) {
  return perception_mse_gap(model, ds, attacked_inputs(model, ds, spec, seed, threads), proxy);
}

struct EvalReport {
  std::string tag;
  double clean_acc = 0.0;
  std::string attack_tag;
  double robust_acc = 0.0;
  double mean = 0.0;
  double nrr = 0.0;
  PerceptionGap gap;
};

inline EvalReport evaluate(const Model& model, const Dataset& ds, const AttackSpec& spec,
                           PerceptionProxy proxy, std::uint64_t seed, std::string tag,
                           unsigned threads = 1) {
  EvalReport r;
  r.tag = std::move(tag);
  r.attack_tag = spec.tag();
  r.clean_acc = clean_accuracy(model, ds);
  const auto adv = attacked_inputs(model, ds, spec, seed, threads);
  r.gap = perception_mse_gap(model, ds, adv, proxy);
  r.robust_acc = static_cast<double>(r.gap.n_success) / static_cast<double>(ds.size());
  r.mean = mean_score(r.clean_acc, r.robust_acc);
  r.nrr = nrr(r.clean_acc, r.robust_acc);
  return r;
}

inline constexpr const char* kReportCsvHeader =
    "tag,clean,robust_pgd20,mean,nrr,n_success,n_failure,mse_success,mse_failure";

namespace detail {
inline std::string opt_cell(const std::optional<double>& v) {
  return v ? fmt::format("{:.9g}", *v) : std::string();
}
}  // namespace detail

// Accuracies are written as percentages with three decimals.
inline void write_report_row(std::ostream& out, const EvalReport& r) {
  out << fmt::format("{},{:.3f},{:.3f},{:.3f},{:.3f},{},{},{},{}\n", r.tag, 100.0 * r.clean_acc,
                     100.0 * r.robust_acc, 100.0 * r.mean, 100.0 * r.nrr, r.gap.n_success,
                     r.gap.n_failure, detail::opt_cell(r.gap.mse_success),
                     detail::opt_cell(r.gap.mse_failure));
}

/// Companion `series,x,y` file for external plotting: perception MSE bars per
/// group and accuracy lines per report tag.
inline void write_plot_data(std::ostream& out, const std::vector<EvalReport>& reports) {
  out << "series,x,y\n";
  for (const auto& r : reports) {
    if (r.gap.mse_success) out << fmt::format("mse_success,{},{:.9g}\n", r.tag, *r.gap.mse_success);
    if (r.gap.mse_failure) out << fmt::format("mse_failure,{},{:.9g}\n", r.tag, *r.gap.mse_failure);
    out << fmt::format("clean_acc,{},{:.3f}\n", r.tag, 100.0 * r.clean_acc);
    out << fmt::format("robust_acc,{},{:.3f}\n", r.tag, 100.0 * r.robust_acc);
  }
}

}  // namespace rpat
