#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "rpat/core.hpp"
#include "rpat/model.hpp"

namespace rpat {

inline constexpr double kProbFloor = 1e-12;
inline constexpr double kAlphaGuard = 1e-4;
inline constexpr double kCosineNormFloor = 1e-12;
inline constexpr double kBetaShape = 0.75;

enum class Divergence { mse, kl, js, cosine };

inline Divergence parse_divergence(std::string_view s) {
  if (s == "mse") return Divergence::mse;
  if (s == "kl") return Divergence::kl;
  if (s == "js") return Divergence::js;
  if (s == "cosine") return Divergence::cosine;
  throw ConfigError(fmt::format("unknown divergence '{}'", s));
}

inline std::string_view to_string(Divergence d) {
  switch (d) {
    case Divergence::mse: return "mse";
    case Divergence::kl: return "kl";
    case Divergence::js: return "js";
    case Divergence::cosine: return "cosine";
  }
  return "mse";
}

enum class AlphaMode { fixed, beta_minus, beta_plus };

inline AlphaMode parse_alpha_mode(std::string_view s) {
  if (s == "fixed") return AlphaMode::fixed;
  if (s == "beta_minus") return AlphaMode::beta_minus;
  if (s == "beta_plus") return AlphaMode::beta_plus;
  throw ConfigError(fmt::format("unknown alpha mode '{}'", s));
}

inline std::string_view to_string(AlphaMode m) {
  switch (m) {
    case AlphaMode::fixed: return "fixed";
    case AlphaMode::beta_minus: return "beta_minus";
    case AlphaMode::beta_plus: return "beta_plus";
  }
  return "fixed";
}

struct RpatConfig {
  double lambda = 1.0;
  AlphaMode alpha_mode = AlphaMode::fixed;
  double alpha = 0.5;
  Divergence divergence = Divergence::mse;
  PerceptionProxy proxy = PerceptionProxy::logits;

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (alpha_mode == AlphaMode::fixed && !(alpha > 0.0 && alpha < 1.0))
      throw ConfigError("fixed alpha must lie strictly inside (0,1)");
  }
};

enum class LossMethod { pgd_at, trades, rpat, trades_rpat };

inline LossMethod parse_loss_method(std::string_view s) {
  if (s == "pgd_at") return LossMethod::pgd_at;
  if (s == "trades") return LossMethod::trades;
  if (s == "rpat") return LossMethod::rpat;
  if (s == "trades_rpat") return LossMethod::trades_rpat;
  throw ConfigError(fmt::format("unknown loss method '{}'", s));
}

inline std::string_view to_string(LossMethod m) {
  switch (m) {
    case LossMethod::pgd_at: return "pgd_at";
    case LossMethod::trades: return "trades";
    case LossMethod::rpat: return "rpat";
    case LossMethod::trades_rpat: return "trades_rpat";
  }
  return "pgd_at";
}

struct LossConfig {
  LossMethod method = LossMethod::rpat;
  RpatConfig rpat;
  double trades_beta = 6.0;

  bool uses_trades() const {
    return method == LossMethod::trades || method == LossMethod::trades_rpat;
  }
  bool uses_rp() const { return method == LossMethod::rpat || method == LossMethod::trades_rpat; }

  void validate() const {
    rpat.validate();
    if (!(trades_beta >= 0.0)) throw ConfigError("trades_beta must be >= 0");
  }
};

// ---------------------------------------------------------------------------

/// -log p_y with p_y floored at 1e-12.
inline double cross_entropy(const Vector& p, std::size_t y) {
  return -std::log(std::max(p[static_cast<Eigen::Index>(y)], kProbFloor));
}

inline double cross_entropy_logits(const Vector& z, std::size_t y) {
  return -log_softmax(z)[static_cast<Eigen::Index>(y)];
}

/// KL(softmax(a) || softmax(b)) from logits.
inline double kl_logits(const Vector& a, const Vector& b) {
  const Vector la = log_softmax(a);
  const Vector lb = log_softmax(b);
  return (la.array().exp() * (la - lb).array()).sum();
}

struct InterpolationTriple {
  Vector x;
  Vector x_adv;
  Vector x_mid;
  double alpha = 0.5;
};

inline InterpolationTriple interpolate(const Vector& x, const Vector& x_adv, double alpha) {
  if (x.size() != x_adv.size()) throw ContractError("interpolation endpoints differ in size");
  return {x, x_adv, x + alpha * (x_adv - x), alpha};
}

/// Fixed alpha, or min/max(b, 1 - b) with b ~ Beta(0.75, 0.75), clamped to
/// [1e-4, 1 - 1e-4].
inline double sample_alpha(const RpatConfig& config, Rng& rng) {
  double a = config.alpha;
  if (config.alpha_mode != AlphaMode::fixed) {
    std::gamma_distribution<double> g(kBetaShape, 1.0);
    const double x = g(rng);
    const double y = g(rng);
    const double b = x + y > 0.0 ? x / (x + y) : 0.5;
    a = config.alpha_mode == AlphaMode::beta_minus ? std::min(b, 1.0 - b) : std::max(b, 1.0 - b);
  }
  return std::clamp(a, kAlphaGuard, 1.0 - kAlphaGuard);
}

struct Residuals {
  Vector u;  // (h(x_mid) - h(x)) / alpha
  Vector v;  // (h(x_adv) - h(x_mid)) / (1 - alpha)
};

inline Residuals residuals_from(const Vector& h_x, const Vector& h_mid, const Vector& h_adv,
                                double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ContractError("alpha must lie strictly inside (0,1)");
  return {(h_mid - h_x) / alpha, (h_adv - h_mid) / (1.0 - alpha)};
}

inline Residuals perception_residuals(const Model& model, const InterpolationTriple& t,
                                      PerceptionProxy proxy) {
  if (!(t.alpha > 0.0 && t.alpha < 1.0)) throw ContractError("alpha must lie strictly inside (0,1)");
  return residuals_from(model.perception(t.x, proxy), model.perception(t.x_mid, proxy),
                        model.perception(t.x_adv, proxy), t.alpha);
}

struct DivergenceGrad {
  double value = 0.0;
  Vector du;
  Vector dv;
};

namespace detail {

// Pull a gradient with respect to softmax(z) back to z.
inline Vector softmax_pullback(const Vector& p, const Vector& g) {
  return p.cwiseProduct(g.array().matrix() - Vector::Constant(g.size(), p.dot(g)));
}

}  // namespace detail

/// Value and gradients of the perception divergence. KL and JS compare the
/// softmax images of the residual vectors; cosine is 1 - cos(u, v) and is
/// defined as 0 when either norm falls below 1e-12.
inline DivergenceGrad divergence_grad(const Vector& u, const Vector& v, Divergence kind) {
  if (u.size() != v.size()) throw ContractError("residual vectors differ in size");
  const auto m = static_cast<double>(u.size());
  DivergenceGrad out;
  switch (kind) {
    case Divergence::mse: {
      const Vector d = u - v;
      out.value = d.squaredNorm() / m;
      out.du = (2.0 / m) * d;
      out.dv = -out.du;
      break;
    }
    case Divergence::kl: {
      const Vector lp = log_softmax(u);
      const Vector lq = log_softmax(v);
      const Vector p = lp.array().exp();
      const Vector q = lq.array().exp();
      const Vector g = lp - lq;
      out.value = p.dot(g);
      out.du = detail::softmax_pullback(p, g);
      out.dv = q - p;
      break;
    }
    case Divergence::js: {
      const Vector lp = log_softmax(u);
      const Vector lq = log_softmax(v);
      const Vector p = lp.array().exp();
      const Vector q = lq.array().exp();
      const Vector mix = 0.5 * (p + q);
      const Vector lm = mix.array().log();
      out.value = 0.5 * p.dot(lp - lm) + 0.5 * q.dot(lq - lm);
      out.du = detail::softmax_pullback(p, 0.5 * (lp - lm));
      out.dv = detail::softmax_pullback(q, 0.5 * (lq - lm));
      break;
    }
    case Divergence::cosine: {
      const double nu = u.norm();
      const double nv = v.norm();
      if (nu < kCosineNormFloor || nv < kCosineNormFloor) {
        out.value = 0.0;
        out.du = Vector::Zero(u.size());
        out.dv = Vector::Zero(v.size());
        break;
      }
      const double c = u.dot(v) / (nu * nv);
      out.value = 1.0 - c;
      out.du = -(v / (nu * nv) - c * u / (nu * nu));
      out.dv = -(u / (nu * nv) - c * v / (nv * nv));
      break;
    }
  }
  out.value = std::max(out.value, 0.0);
  return out;
}

inline double divergence(const Vector& u, const Vector& v, Divergence kind) {
  return divergence_grad(u, v, kind).value;
}

// ---------------------------------------------------------------------------

struct LossBreakdown {
  double total = 0.0;
  double ce_term = 0.0;  // CE on x_adv, or the TRADES natural + boundary loss
  double rp_term = 0.0;  // unweighted perception divergence
};

/// Loss of one example under `config` at the given alpha. When `param_grad` is
/// non-empty, `scale` times the parameter gradient is accumulated into it.
/// The adversarial input is treated as a constant.
inline LossBreakdown example_loss(const Model& model, const Vector& x, std::size_t y,
                                  const Vector& x_adv, const LossConfig& config, double alpha,
                                  std::span<double> param_grad, double scale = 1.0) {
  const std::size_t L = model.num_layers();
  const bool want_grad = !param_grad.empty();
  const auto yi = static_cast<Eigen::Index>(y);

  const ForwardTrace t_adv = model.trace(x_adv);
  std::optional<ForwardTrace> t_clean;
  std::vector<std::optional<Vector>> seeds_adv(L), seeds_clean(L), seeds_mid(L);

  LossBreakdown out;
  if (config.uses_trades()) {
    t_clean = model.trace(x);
    const Vector lp = log_softmax(t_clean->logits());
    const Vector lq = log_softmax(t_adv.logits());
    const Vector p = lp.array().exp();
    const Vector q = lq.array().exp();
    const double kl = p.dot(lp - lq);
    out.ce_term = -lp[yi] + config.trades_beta * kl;
    if (want_grad) {
      Vector d_clean = p;
      d_clean[yi] -= 1.0;
      d_clean += config.trades_beta * detail::softmax_pullback(p, lp - lq);
      seeds_clean[L - 1] = scale * d_clean;
      seeds_adv[L - 1] = scale * config.trades_beta * (q - p);
    }
  } else {
    const Vector lq = log_softmax(t_adv.logits());
    out.ce_term = -lq[yi];
    if (want_grad) {
      Vector d = lq.array().exp();
      d[yi] -= 1.0;
      seeds_adv[L - 1] = scale * d;
    }
  }

  if (config.uses_rp()) {
    const std::size_t pl = model.perception_layer(config.rpat.proxy);
    if (!t_clean) t_clean = model.trace(x);
    const InterpolationTriple tri = interpolate(x, x_adv, alpha);
    const ForwardTrace t_mid = model.trace(tri.x_mid);
    const Residuals r = residuals_from(t_clean->act[pl], t_mid.act[pl], t_adv.act[pl], alpha);
    const DivergenceGrad dg = divergence_grad(r.u, r.v, config.rpat.divergence);
    out.rp_term = dg.value;
    const double w = scale * config.rpat.lambda;
    if (want_grad && w != 0.0) {
      auto add = [](std::optional<Vector>& slot, const Vector& g) {
        if (slot) *slot += g;
        else slot = g;
      };
      add(seeds_clean[pl], (-w / alpha) * dg.du);
      add(seeds_mid[pl], (w / alpha) * dg.du - (w / (1.0 - alpha)) * dg.dv);
      add(seeds_adv[pl], (w / (1.0 - alpha)) * dg.dv);
      model.backward(t_mid, seeds_mid, param_grad);
    }
  }
  out.total = out.ce_term + config.rpat.lambda * (config.uses_rp() ? out.rp_term : 0.0);
  if (!std::isfinite(out.total)) throw NumericError("non-finite training loss");

  if (want_grad) {
    model.backward(t_adv, seeds_adv, param_grad);
    if (t_clean) model.backward(*t_clean, seeds_clean, param_grad);
  }
  return out;
}

/// Batch mean of the configured loss. Alphas are drawn per example from
/// `rng` in batch order. Gradients of the mean are accumulated into
/// `param_grad` when it is non-empty.
inline LossBreakdown batch_loss(const Model& model, std::span<const Vector> xs,
                                std::span<const std::size_t> ys, std::span<const Vector> x_advs,
                                const LossConfig& config, Rng& rng,
                                std::span<double> param_grad = {}) {
  if (xs.size() != ys.size() || xs.size() != x_advs.size())
    throw ContractError("batch components differ in length");
  if (xs.empty()) throw ContractError("empty batch");
  const double scale = 1.0 / static_cast<double>(xs.size());
  LossBreakdown sum;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double alpha = config.uses_rp() ? sample_alpha(config.rpat, rng) : 0.5;
    const LossBreakdown e = example_loss(model, xs[i], ys[i], x_advs[i], config, alpha,
                                         param_grad, scale);
    sum.total += e.total;
    sum.ce_term += e.ce_term;
    sum.rp_term += e.rp_term;
  }
  return {sum.total * scale, sum.ce_term * scale, sum.rp_term * scale};
}

/// CE(p(x_adv), y) + lambda * D(u, v), averaged over the batch.
inline LossBreakdown rpat_loss(const Model& model, std::span<const Vector> xs,
                               std::span<const std::size_t> ys, std::span<const Vector> x_advs,
                               const RpatConfig& config, Rng& rng,
                               std::span<double> param_grad = {}) {
  return batch_loss(model, xs, ys, x_advs, LossConfig{LossMethod::rpat, config, 0.0}, rng,
                    param_grad);
}

/// CE(p(x), y) + beta * KL(p(x) || p(x_adv)) for one example.
inline double trades_loss(const Model& model, const Vector& x, std::size_t y, const Vector& x_adv,
                          double beta) {
  const Vector z = model.forward(x);
  return cross_entropy_logits(z, y) + beta * kl_logits(z, model.forward(x_adv));
}

}  // namespace rpat
