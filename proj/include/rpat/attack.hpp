#pragma once

#include <cmath>
#include <random>
#include <string>
#include <string_view>

#include <fmt/format.h>

#include "rpat/core.hpp"
#include "rpat/model.hpp"

namespace rpat {

enum class Norm { linf, l2 };

inline Norm parse_norm(std::string_view s) {
  if (s == "linf" || s == "l_inf") return Norm::linf;
  if (s == "l2" || s == "l_2") return Norm::l2;
  throw ConfigError(fmt::format("unknown norm '{}'", s));
}

inline std::string_view to_string(Norm n) { return n == Norm::linf ? "linf" : "l2"; }

/// Perturbation constraint and PGD schedule. `step_size` is the attack step,
/// unrelated to the interpolation coefficient of the RPAT loss.
struct Budget {
  Norm norm = Norm::linf;
  double epsilon = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  int num_steps = 10;
  bool random_start = true;

  // epsilon == 0 is accepted as the empty ball; every attack then returns x.
  void validate() const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("epsilon must be >= 0");
    if (num_steps < 1) throw ConfigError("num_steps must be >= 1");
    if (epsilon > 0.0 && !(step_size > 0.0 && step_size <= 2.0 * epsilon))
      throw ConfigError("step_size must lie in (0, 2 * epsilon]");
  }
};

inline double norm_of(const Vector& v, Norm n) {
  return n == Norm::linf ? (v.size() ? v.cwiseAbs().maxCoeff() : 0.0) : v.norm();
}

/// Projection onto the epsilon-ball of the budget norm.
inline Vector project(const Vector& delta, const Budget& budget) {
  if (budget.norm == Norm::linf) return delta.cwiseMax(-budget.epsilon).cwiseMin(budget.epsilon);
  const double n = delta.norm();
  if (n > budget.epsilon) return delta * (budget.epsilon / n);
  return delta;
}

inline Vector clip_domain(const Vector& x) { return x.cwiseMax(0.0).cwiseMin(1.0); }

enum class AttackLoss { cross_entropy, trades_kl };

namespace detail {

// Gradient of the attack objective with respect to the (perturbed) input.
inline Vector attack_gradient(const Model& model, const Vector& x_adv, std::size_t label,
                              AttackLoss loss, const Vector* clean_probs) {
  const ForwardTrace t = model.trace(x_adv);
  Vector dlogits = softmax(t.logits());
  if (loss == AttackLoss::cross_entropy) {
    dlogits[static_cast<Eigen::Index>(label)] -= 1.0;
  } else {
    // d KL(p_clean || softmax(z)) / dz = softmax(z) - p_clean
    dlogits -= *clean_probs;
  }
  return model.backward_logits(t, dlogits, {});
}

inline Vector ascent_direction(const Vector& g, Norm norm) {
  if (norm == Norm::linf) return g.unaryExpr([](double v) { return double((v > 0) - (v < 0)); });
  const double n = g.norm();
  return n > 0.0 ? Vector(g / n) : Vector::Zero(g.size());
}

// One projected ascent step from `current`, shared by FGSM and PGD.
inline Vector ascent_step(const Vector& x, const Vector& current, const Vector& direction,
                          double step, const Budget& budget) {
  const Vector candidate = current + step * direction;
  return clip_domain(x + project(candidate - x, budget));
}

}  // namespace detail

/// Uniform draw from the epsilon-ball (per-coordinate for linf, uniform volume
/// for l2), then clipped to the unit box.
inline Vector random_perturb(const Vector& x, const Budget& budget, Rng& rng) {
  if (budget.epsilon == 0.0) return x;
  Vector delta(x.size());
  if (budget.norm == Norm::linf) {
    std::uniform_real_distribution<double> u(-budget.epsilon, budget.epsilon);
    for (Eigen::Index i = 0; i < delta.size(); ++i) delta[i] = u(rng);
  } else {
    std::normal_distribution<double> g(0.0, 1.0);
    for (Eigen::Index i = 0; i < delta.size(); ++i) delta[i] = g(rng);
    const double n = delta.norm();
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double radius =
        budget.epsilon * std::pow(u(rng), 1.0 / static_cast<double>(delta.size()));
    delta = n > 0.0 ? Vector(delta * (radius / n)) : Vector::Zero(x.size());
  }
  return clip_domain(x + project(delta, budget));
}

/// Single full-budget step along the sign (linf) or normalized (l2) gradient.
inline Vector fgsm(const Model& model, const Vector& x, std::size_t label, const Budget& budget,
                   AttackLoss loss = AttackLoss::cross_entropy) {
  if (budget.epsilon == 0.0) return x;
  const Vector clean = loss == AttackLoss::trades_kl ? softmax(model.forward(x)) : Vector();
  const Vector g = detail::attack_gradient(model, x, label, loss, &clean);
  return detail::ascent_step(x, x, detail::ascent_direction(g, budget.norm), budget.epsilon,
                             budget);
}

inline Vector pgd(const Model& model, const Vector& x, std::size_t label, const Budget& budget,
                  Rng& rng, AttackLoss loss = AttackLoss::cross_entropy) {
  if (budget.epsilon == 0.0) return x;
  const Vector clean = loss == AttackLoss::trades_kl ? softmax(model.forward(x)) : Vector();
  Vector x_adv = budget.random_start ? random_perturb(x, budget, rng) : x;
  for (int step = 0; step < budget.num_steps; ++step) {
    const Vector g = detail::attack_gradient(model, x_adv, label, loss, &clean);
    x_adv = detail::ascent_step(x, x_adv, detail::ascent_direction(g, budget.norm),
                                budget.step_size, budget);
  }
  return x_adv;
}

enum class AttackKind { none, random, fgsm, pgd };

inline AttackKind parse_attack_kind(std::string_view s) {
  if (s == "none" || s == "clean") return AttackKind::none;
  if (s == "random") return AttackKind::random;
  if (s == "fgsm") return AttackKind::fgsm;
  if (s == "pgd") return AttackKind::pgd;
  throw ConfigError(fmt::format("unknown attack '{}'", s));
}

inline std::string_view to_string(AttackKind k) {
  switch (k) {
    case AttackKind::none: return "none";
    case AttackKind::random: return "random";
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::pgd: return "pgd";
  }
  return "none";
}

struct AttackSpec {
  AttackKind kind = AttackKind::pgd;
  Budget budget;
  AttackLoss loss = AttackLoss::cross_entropy;

  // Short tag such as "pgd20", "fgsm", "random" used in reports.
  std::string tag() const {
    if (kind == AttackKind::pgd) return fmt::format("pgd{}", budget.num_steps);
    return std::string(to_string(kind));
  }
};

inline Vector run_attack(const Model& model, const Vector& x, std::size_t label,
                         const AttackSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case AttackKind::none: return x;
    case AttackKind::random: return random_perturb(x, spec.budget, rng);
    case AttackKind::fgsm: return fgsm(model, x, label, spec.budget, spec.loss);
    case AttackKind::pgd: return pgd(model, x, label, spec.budget, rng, spec.loss);
  }
  return x;
}

}  // namespace rpat
