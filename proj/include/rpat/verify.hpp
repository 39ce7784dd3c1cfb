#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <ostream>
#include <random>
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

inline constexpr std::array<double, 4> kDriftAlphas{0.25, 0.5, 0.75, 1.0};
inline constexpr double kMinProbeStep = 1e-12;

namespace detail {
inline bool in_unit_box(const Vector& x) {
  return (x.array() >= 0.0).all() && (x.array() <= 1.0).all();
}
}  // namespace detail

/// Central second difference of a vector-valued map along `delta`:
///   || h(x + t d) - 2 h(x) + h(x - t d) ||_2 / t^2
/// which estimates || d^T H_h(x) d || and is exact for quadratics. t is halved
/// until both probes lie in [0,1]^n.
template <typename Fn>
double directional_curvature(Fn&& h, const Vector& x, const Vector& delta, double t = 1e-3) {
  if (!(t > 0.0)) throw ContractError("probe step must be positive");
  while (!detail::in_unit_box(x + t * delta) || !detail::in_unit_box(x - t * delta)) {
    t *= 0.5;
    if (t < kMinProbeStep)
      throw NumericError("curvature probe step underflowed while shrinking into [0,1]");
  }
  const Vector second = h(Vector(x + t * delta)) - 2.0 * h(x) + h(Vector(x - t * delta));
  return second.norm() / (t * t);
}

inline double directional_curvature(const Model& model, const Vector& x, const Vector& delta,
                                    PerceptionProxy proxy, double t = 1e-3) {
  return directional_curvature([&](const Vector& p) { return model.perception(p, proxy); }, x,
                               delta, t);
}

/// Exact Jacobian of the perception map: one reverse pass per output coordinate.
inline Matrix jacobian(const Model& model, const Vector& x, PerceptionProxy proxy) {
  const std::size_t layer = model.perception_layer(proxy);
  const ForwardTrace t = model.trace(x);
  const Eigen::Index rows = t.act[layer].size();
  Matrix J(rows, x.size());
  std::vector<std::optional<Vector>> seeds(model.num_layers());
  for (Eigen::Index k = 0; k < rows; ++k) {
    seeds[layer] = Vector::Unit(rows, k);
    J.row(k) = model.backward(t, seeds, {}).transpose();
  }
  return J;
}

/// Central-difference Jacobian of any map, for cross-checking.
template <typename Fn>
Matrix finite_difference_jacobian(Fn&& h, const Vector& x, double step = 1e-6) {
  const Vector h0 = h(x);
  Matrix J(h0.size(), x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    Vector xp = x, xm = x;
    xp[j] += step;
    xm[j] -= step;
    J.col(j) = (h(xp) - h(xm)) / (2.0 * step);
  }
  return J;
}

/// Largest singular value by power iteration on the smaller Gram matrix,
/// started from a fixed pseudo-random vector.
inline double spectral_norm(const Matrix& A, int max_iters = 100, double tol = 1e-14) {
  if (A.size() == 0) return 0.0;
  const bool wide = A.cols() > A.rows();
  const Matrix gram = wide ? Matrix(A * A.transpose()) : Matrix(A.transpose() * A);
  const double trace = gram.trace();
  if (trace == 0.0) return 0.0;
  // Power iteration on gram^(2^8), built by repeated squaring with trace
  // normalization, so close leading eigenvalues still separate quickly.
  Matrix P = gram / trace;
  for (int k = 0; k < 8; ++k) {
    P = P * P;
    const double t = P.trace();
    if (!(t > 0.0)) break;
    P /= t;
  }
  Rng rng(0x5eed5eedULL);
  std::normal_distribution<double> g(0.0, 1.0);
  Vector v(gram.rows());
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = g(rng);
  v.normalize();
  double lambda = v.dot(gram * v);
  for (int it = 0; it < max_iters; ++it) {
    Vector w = P * v;
    const double n = w.norm();
    if (n == 0.0) break;
    v = w / n;
    const double next = v.dot(gram * v);
    const bool converged = std::abs(next - lambda) <= tol * std::abs(next);
    lambda = next;
    if (converged) break;
  }
  return std::sqrt(std::max(lambda, 0.0));
}

/// || J(x + alpha d) - J(x) ||_spec.
inline double jacobian_drift(const Model& model, const Vector& x, const Vector& delta,
                             double alpha, PerceptionProxy proxy) {
  if (alpha == 0.0) return 0.0;
  return spectral_norm(jacobian(model, Vector(x + alpha * delta), proxy) - jacobian(model, x, proxy));
}

struct CurvatureRow {
  std::size_t example_id = 0;
  double curvature = 0.0;
  std::array<double, 4> gamma{};  // drift at kDriftAlphas
  double j_spec = 0.0;

  double max_gamma() const { return *std::max_element(gamma.begin(), gamma.end()); }
};

struct CurvatureReport {
  std::vector<CurvatureRow> rows;
  double sup_j_spec = 0.0;
  double max_gamma = 0.0;
  double lipschitz_bound = 0.0;
};

/// sup ||J||_spec over the evaluated sample plus the largest observed drift.
/// The sample supremum only lower-bounds the supremum over the whole domain.
inline double lipschitz_upper_bound(const std::vector<CurvatureRow>& rows) {
  double sup_j = 0.0, max_g = 0.0;
  for (const auto& r : rows) {
    sup_j = std::max(sup_j, r.j_spec);
    max_g = std::max(max_g, r.max_gamma());
  }
  return sup_j + max_g;
}

inline CurvatureRow curvature_row(const Model& model, std::size_t id, const Vector& x,
                                  const Vector& delta, PerceptionProxy proxy, double probe_step) {
  CurvatureRow row;
  row.example_id = id;
  row.curvature = directional_curvature(model, x, delta, proxy, probe_step);
  const Matrix J0 = jacobian(model, x, proxy);
  row.j_spec = spectral_norm(J0);
  for (std::size_t k = 0; k < kDriftAlphas.size(); ++k)
    row.gamma[k] = spectral_norm(jacobian(model, Vector(x + kDriftAlphas[k] * delta), proxy) - J0);
  return row;
}

inline CurvatureReport finalize_report(std::vector<CurvatureRow> rows) {
  CurvatureReport rep;
  rep.rows = std::move(rows);
  for (const auto& r : rep.rows) {
    rep.sup_j_spec = std::max(rep.sup_j_spec, r.j_spec);
    rep.max_gamma = std::max(rep.max_gamma, r.max_gamma());
  }
  rep.lipschitz_bound = lipschitz_upper_bound(rep.rows);
  return rep;
}

/// Report along explicit perturbations (one per example).
inline CurvatureReport curvature_report(const Model& model, const Dataset& ds,
                                        const std::vector<Vector>& attacked,
                                        PerceptionProxy proxy, double probe_step) {
  std::vector<CurvatureRow> rows;
  rows.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Vector& x = ds.examples[i].features;
    rows.push_back(curvature_row(model, i, x, Vector(attacked[i] - x), proxy, probe_step));
  }
  return finalize_report(std::move(rows));
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<long>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<long>(mid)));
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

struct ModelSummary {
  double median_curvature = 0.0;
  double mean_curvature = 0.0;
  double median_gamma = 0.0;  // per-example max over the alpha grid
  double mean_gamma = 0.0;
  double mean_rp_term = 0.0;  // MSE perception divergence at alpha = 0.5
  double sup_j_spec = 0.0;
  double lipschitz_bound = 0.0;
};

struct ModelComparison {
  CurvatureReport baseline;
  CurvatureReport rpat;
  ModelSummary baseline_summary;
  ModelSummary rpat_summary;
  // 1 - rpat / baseline; positive means the RPAT model is smoother.
  double median_curvature_reduction = 0.0;
  double mean_curvature_reduction = 0.0;
  double median_gamma_reduction = 0.0;
  double mean_gamma_reduction = 0.0;
  double rp_term_reduction = 0.0;
};

inline ModelSummary summarize(const Model& model, const Dataset& ds,
                              const std::vector<Vector>& attacked, const CurvatureReport& rep,
                              PerceptionProxy proxy) {
  ModelSummary s;
  std::vector<double> curv, gam;
  for (const auto& r : rep.rows) {
    curv.push_back(r.curvature);
    gam.push_back(r.max_gamma());
  }
  s.median_curvature = median(curv);
  s.mean_curvature = mean_of(curv);
  s.median_gamma = median(gam);
  s.mean_gamma = mean_of(gam);
  double rp = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto tri = interpolate(ds.examples[i].features, attacked[i], 0.5);
    const auto r = perception_residuals(model, tri, proxy);
    rp += divergence(r.u, r.v, Divergence::mse);
  }
  s.mean_rp_term = ds.size() ? rp / static_cast<double>(ds.size()) : 0.0;
  s.sup_j_spec = rep.sup_j_spec;
  s.lipschitz_bound = rep.lipschitz_bound;
  return s;
}

namespace detail {
inline double reduction(double base, double other) {
  return base > 0.0 ? 1.0 - other / base : 0.0;
}
}  // namespace detail

/// Curvature and drift of two models, each probed along its own adversarial
/// perturbation of every example.
inline ModelComparison compare_models(const Model& baseline, const Model& rpat_model,
                                      const Dataset& ds, const AttackSpec& attack,
                                      PerceptionProxy proxy, std::uint64_t seed,
                                      double probe_step, unsigned threads = 1) {
  ModelComparison c;
  const auto adv_base = attacked_inputs(baseline, ds, attack, seed, threads);
  const auto adv_rpat = attacked_inputs(rpat_model, ds, attack, seed, threads);
  c.baseline = curvature_report(baseline, ds, adv_base, proxy, probe_step);
  c.rpat = curvature_report(rpat_model, ds, adv_rpat, proxy, probe_step);
  c.baseline_summary = summarize(baseline, ds, adv_base, c.baseline, proxy);
  c.rpat_summary = summarize(rpat_model, ds, adv_rpat, c.rpat, proxy);
  const auto& b = c.baseline_summary;
  const auto& r = c.rpat_summary;
  c.median_curvature_reduction = detail::reduction(b.median_curvature, r.median_curvature);
  c.mean_curvature_reduction = detail::reduction(b.mean_curvature, r.mean_curvature);
  c.median_gamma_reduction = detail::reduction(b.median_gamma, r.median_gamma);
  c.mean_gamma_reduction = detail::reduction(b.mean_gamma, r.mean_gamma);
  c.rp_term_reduction = detail::reduction(b.mean_rp_term, r.mean_rp_term);
  return c;
}

inline constexpr const char* kCurvatureCsvHeader =
    "example_id,curvature,gamma_025,gamma_05,gamma_075,gamma_10,j_spec";

inline void write_curvature_csv(std::ostream& out, const CurvatureReport& rep,
                                const std::string& config_hash) {
  out << "# config=" << config_hash << '\n' << kCurvatureCsvHeader << '\n';
  for (const auto& r : rep.rows)
    out << fmt::format("{},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g},{:.9g}\n", r.example_id,
                       r.curvature, r.gamma[0], r.gamma[1], r.gamma[2], r.gamma[3], r.j_spec);
}

inline nlohmann::json to_json(const ModelSummary& s) {
  return {{"median_curvature", s.median_curvature}, {"mean_curvature", s.mean_curvature},
          {"median_gamma", s.median_gamma},         {"mean_gamma", s.mean_gamma},
          {"mean_rp_term", s.mean_rp_term},         {"sup_j_spec", s.sup_j_spec},
          {"lipschitz_bound", s.lipschitz_bound}};
}

inline nlohmann::json to_json(const ModelComparison& c) {
  return {{"baseline", to_json(c.baseline_summary)},
          {"rpat", to_json(c.rpat_summary)},
          {"median_curvature_reduction", c.median_curvature_reduction},
          {"mean_curvature_reduction", c.mean_curvature_reduction},
          {"median_gamma_reduction", c.median_gamma_reduction},
          {"mean_gamma_reduction", c.mean_gamma_reduction},
          {"rp_term_reduction", c.rp_term_reduction}};
}

}  // namespace rpat
