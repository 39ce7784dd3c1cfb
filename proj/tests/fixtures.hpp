#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "rpat/core.hpp"
#include "rpat/model.hpp"

namespace rpat::testing {

inline Vector uniform_vector(Rng& rng, Eigen::Index n, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = u(rng);
  return v;
}

inline Matrix gaussian_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = g(rng);
  return m;
}

inline ArchitectureDescriptor mlp(std::size_t in, std::vector<std::size_t> hidden, std::size_t classes,
                                  Activation act = Activation::relu) {
  ArchitectureDescriptor d;
  d.kind = ArchKind::mlp;
  d.input_shape = InputShape::flat(in);
  d.hidden = std::move(hidden);
  d.num_classes = classes;
  d.activation = act;
  return d;
}

/// Initialized model with small random biases, so that no unit starts dead.
inline Model random_model(const ArchitectureDescriptor& d, std::uint64_t seed) {
  Model m = Model::initialized(d, seed);
  Rng rng = make_rng(seed, 0xb1a5);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (std::size_t l = 0; l < m.num_layers(); ++l)
    for (double& b : m.bias(l)) b = u(rng);
  return m;
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)});
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("rpat_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace rpat::testing
