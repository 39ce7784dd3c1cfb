#pragma once

// Randomized property checks shared by the unit tests and the acceptance
// runner. Each returns the worst observed value (or a count) so callers can
// apply their own threshold and print it.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/SVD>

#include "fixtures.hpp"
#include "rpat/attack.hpp"
#include "rpat/loss.hpp"
#include "rpat/train.hpp"
#include "rpat/verify.hpp"

namespace rpat::testing {

inline double vector_rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(num) / std::max({std::sqrt(na), std::sqrt(nb), 1e-300});
}

// A small batch for gradient checks. Inputs are nudged until every rectifier
// pre-activation at x, x_mid and x_adv is at least `kink_margin` away from 0,
// so central differences with a much smaller step never straddle a kink.
struct LossFixture {
  Model model;
  std::vector<Vector> xs, advs;
  std::vector<std::size_t> ys;
  LossConfig config;
};

inline LossFixture make_loss_fixture(std::uint64_t seed, LossMethod method, Divergence div,
                                     double kink_margin = 1e-3) {
  Rng rng = make_rng(seed, 0xf17);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<int> proxy_pick(0, 2);
  const std::size_t classes = 3;
  LossFixture f{random_model(mlp(3, {6, 5}, classes), seed), {}, {}, {}, {}};
  f.config.method = method;
  f.config.trades_beta = 0.5 + 5.0 * u01(rng);
  f.config.rpat.lambda = 0.5 + 1.5 * u01(rng);
  f.config.rpat.alpha_mode = AlphaMode::fixed;
  f.config.rpat.alpha = 0.1 + 0.8 * u01(rng);
  f.config.rpat.divergence = div;
  f.config.rpat.proxy = static_cast<PerceptionProxy>(proxy_pick(rng));

  auto clear_of_kinks = [&](const Vector& x, const Vector& adv) {
    const Vector mid = x + f.config.rpat.alpha * (adv - x);
    for (const Vector* p : {&x, &adv, &mid})
      if (min_abs_preactivation(f.model, f.model.trace(*p)) < kink_margin) return false;
    return true;
  };
  for (int i = 0; i < 2; ++i) {
    Vector x, adv;
    int tries = 0;
    do {
      if (++tries > 1000) throw NumericError("could not place a fixture away from kinks");
      x = uniform_vector(rng, 3, 0.1, 0.9);
      adv = x + uniform_vector(rng, 3, -0.1, 0.1);
    } while (!clear_of_kinks(x, adv));
    f.xs.push_back(x);
    f.advs.push_back(adv);
    f.ys.push_back(static_cast<std::size_t>(std::uniform_int_distribution<int>(0, classes - 1)(rng)));
  }
  return f;
}

/// Relative error between the analytic parameter gradient of the batch loss
/// and central differences with step `h`.
inline double loss_gradient_error(LossFixture& f, double h = 1e-6) {
  auto value = [&](const Model& m) {
    Rng r = make_rng(0);
    return batch_loss(m, f.xs, f.ys, f.advs, f.config, r).total;
  };
  std::vector<double> analytic(f.model.num_params(), 0.0);
  Rng r = make_rng(0);
  batch_loss(f.model, f.xs, f.ys, f.advs, f.config, r, analytic);
  std::vector<double> fd(analytic.size());
  auto p = f.model.mutable_params();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double up = value(f.model);
    p[i] = keep - h;
    const double down = value(f.model);
    p[i] = keep;
    fd[i] = (up - down) / (2 * h);
  }
  return vector_rel_err(analytic, fd);
}

/// Worst value of the perception term (all divergences), directional curvature
/// and Jacobian drift over `draws` random affine models and (x, delta, alpha).
struct AffineWorst {
  double rp = 0.0;
  double curvature = 0.0;
  double drift = 0.0;
};

inline AffineWorst affine_nullity(std::size_t draws, std::uint64_t seed = 0) {
  AffineWorst w;
  Rng rng = make_rng(seed, 0xaff1);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::size_t k = 0; k < draws; ++k) {
    const Model m = random_model(mlp(4, {6, 5}, 3, Activation::identity), derive_seed(seed, k));
    const Vector x = uniform_vector(rng, 4, 0.05, 0.95);
    const Vector adv = clip_domain(x + uniform_vector(rng, 4, -0.1, 0.1));
    const Vector delta = adv - x;
    const double alpha = 0.01 + 0.98 * u01(rng);
    const auto proxy = static_cast<PerceptionProxy>(k % 3);
    const auto r = perception_residuals(m, interpolate(x, adv, alpha), proxy);
    for (auto d : {Divergence::mse, Divergence::kl, Divergence::js, Divergence::cosine})
      w.rp = std::max(w.rp, std::abs(divergence(r.u, r.v, d)));
    w.curvature = std::max(w.curvature, directional_curvature(m, x, delta, proxy));
    w.drift = std::max(w.drift, jacobian_drift(m, x, delta, alpha, proxy));
  }
  return w;
}

inline Budget random_budget(Rng& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Budget b;
  b.norm = u01(rng) < 0.5 ? Norm::linf : Norm::l2;
  b.epsilon = (b.norm == Norm::linf ? 0.3 : 1.0) * (0.01 + 0.99 * u01(rng));
  b.step_size = b.epsilon * (0.05 + 1.95 * u01(rng));
  b.num_steps = 1 + static_cast<int>(u01(rng) * 10);
  b.random_start = u01(rng) < 0.5;
  return b;
}

// Inputs with a share of coordinates pinned to the box faces.
inline Vector boundary_heavy_input(Rng& rng, Eigen::Index d) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Vector x(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    const double r = u01(rng);
    x[i] = r < 0.2 ? 0.0 : r < 0.4 ? 1.0 : u01(rng);
  }
  return x;
}

struct ContainmentResult {
  std::size_t ball_violations = 0;
  std::size_t box_violations = 0;
  double worst_excess = 0.0;  // max(norm - epsilon), relative to epsilon
};

inline ContainmentResult pgd_containment(std::size_t invocations, std::uint64_t seed = 0) {
  ContainmentResult res;
  Rng rng = make_rng(seed, 0xc0de);
  for (std::size_t k = 0; k < invocations; ++k) {
    const Model m = random_model(mlp(5, {8}, 3), derive_seed(seed, k % 25));
    const Budget b = random_budget(rng);
    const Vector x = boundary_heavy_input(rng, 5);
    const std::size_t y = k % 3;
    const Vector adv = pgd(m, x, y, b, rng);
    const double n = norm_of(adv - x, b.norm);
    res.worst_excess = std::max(res.worst_excess, (n - b.epsilon) / b.epsilon);
    if (n > b.epsilon * (1.0 + 1e-12)) ++res.ball_violations;
    if ((adv.array() < 0.0).any() || (adv.array() > 1.0).any()) ++res.box_violations;
  }
  return res;
}

/// Number of cases (out of `cases`) where one-step PGD without random start
/// and with step = epsilon differs from FGSM in any bit.
inline std::size_t pgd_fgsm_mismatches(std::size_t cases, std::uint64_t seed = 0) {
  std::size_t bad = 0;
  Rng rng = make_rng(seed, 0xf65);
  for (std::size_t k = 0; k < cases; ++k) {
    const Model m = random_model(mlp(6, {7, 5}, 4), derive_seed(seed, k));
    Budget b = random_budget(rng);
    b.num_steps = 1;
    b.random_start = false;
    b.step_size = b.epsilon;
    const Vector x = boundary_heavy_input(rng, 6);
    const std::size_t y = k % 4;
    Rng unused = make_rng(k);
    const Vector a = pgd(m, x, y, b, unused);
    const Vector f = fgsm(m, x, y, b);
    if (std::memcmp(a.data(), f.data(), sizeof(double) * a.size()) != 0) ++bad;
  }
  return bad;
}

/// FGSM on a linear two-class model against the best vertex of the linf box
/// found by enumerating all 2^d sign patterns. Returns the number of cases
/// where FGSM is not the enumerated maximizer.
inline std::size_t fgsm_enumeration_mismatches(std::size_t cases, std::uint64_t seed = 0) {
  std::size_t bad = 0;
  Rng rng = make_rng(seed, 0xe9);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::size_t k = 0; k < cases; ++k) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(k % 8);
    const Model m = random_model(mlp(static_cast<std::size_t>(d), {}, 2, Activation::identity),
                                 derive_seed(seed, k));
    const double eps = 0.02 + 0.1 * u01(rng);
    const Vector x = uniform_vector(rng, d, eps, 1.0 - eps);
    const std::size_t y = k % 2;
    const Vector f = fgsm(m, x, y, {Norm::linf, eps, eps, 1, false});

    double best = -std::numeric_limits<double>::infinity();
    Vector best_x;
    for (std::uint32_t mask = 0; mask < (1u << d); ++mask) {
      Vector v = x;
      for (Eigen::Index i = 0; i < d; ++i) v[i] += (mask >> i & 1u) ? eps : -eps;
      const double ce = cross_entropy_logits(m.forward(v), y);
      if (ce > best) {
        best = ce;
        best_x = v;
      }
    }
    const bool same_vertex = (f - best_x).cwiseAbs().maxCoeff() <= 1e-12;
    const bool same_value = cross_entropy_logits(m.forward(f), y) >= best - 1e-12;
    if (!same_vertex || !same_value) ++bad;
  }
  return bad;
}

/// Worst relative error of spectral_norm against the largest singular value
/// of a dense SVD over random Gaussian matrices of size up to max_dim^2.
inline double spectral_oracle_error(std::size_t matrices, Eigen::Index max_dim,
                                    std::uint64_t seed = 0) {
  double worst = 0.0;
  Rng rng = make_rng(seed, 0x5fd);
  std::uniform_int_distribution<Eigen::Index> dim(1, max_dim);
  for (std::size_t k = 0; k < matrices; ++k) {
    const Matrix A = gaussian_matrix(rng, dim(rng), dim(rng));
    const double oracle = Eigen::JacobiSVD<Matrix>(A).singularValues()[0];
    worst = std::max(worst, std::abs(spectral_norm(A) - oracle) / oracle);
  }
  return worst;
}

/// Random histories with heavy ties and shuffled epoch order; returns the
/// number where select_best disagrees with a brute-force scan.
inline std::size_t best_checkpoint_mismatches(std::size_t histories, std::uint64_t seed = 0) {
  std::size_t bad = 0;
  Rng rng = make_rng(seed, 0xbe57);
  for (std::size_t k = 0; k < histories; ++k) {
    const std::size_t n = 1 + k % 40;
    std::vector<CheckpointRecord> h(n);
    std::vector<int> epochs(n);
    std::iota(epochs.begin(), epochs.end(), 0);
    if (k % 2) std::shuffle(epochs.begin(), epochs.end(), rng);
    const int levels = 1 + static_cast<int>(k % 4);
    std::uniform_int_distribution<int> level(0, levels - 1);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      h[i].epoch = epochs[i];
      h[i].pgd_val_acc = 0.25 * level(rng);
      h[i].clean_val_acc = u01(rng);  // must not influence the choice
    }
    std::size_t want = 0;
    for (std::size_t i = 1; i < n; ++i) {
      if (h[i].pgd_val_acc > h[want].pgd_val_acc) want = i;
      else if (h[i].pgd_val_acc == h[want].pgd_val_acc && h[i].epoch < h[want].epoch) want = i;
    }
    const auto& got = select_best(h);
    if (got.epoch != h[want].epoch || got.pgd_val_acc != h[want].pgd_val_acc) ++bad;
  }
  return bad;
}

}  // namespace rpat::testing
