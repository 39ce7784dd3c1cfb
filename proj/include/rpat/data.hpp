#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "rpat/core.hpp"

namespace rpat {

enum class Split { train, val, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

// Flat vectors use height == channels == 1 and image == false. Image features
// are stored row-major with channels innermost: index (r * width + c) * channels + k.
struct InputShape {
  std::size_t height = 1;
  std::size_t width = 0;
  std::size_t channels = 1;
  bool image = false;

  static InputShape flat(std::size_t n) { return {1, n, 1, false}; }
  static InputShape grid(std::size_t h, std::size_t w, std::size_t c) { return {h, w, c, true}; }

  std::size_t size() const { return height * width * channels; }
  bool operator==(const InputShape&) const = default;
};

struct LabeledExample {
  Vector features;
  std::size_t label = 0;
};

struct Dataset {
  std::vector<LabeledExample> examples;
  std::size_t num_classes = 2;
  InputShape input_shape;
  Split split = Split::train;

  std::size_t size() const { return examples.size(); }

  // Throws ContractError when an invariant is broken.
  void validate() const {
    if (num_classes < 2) throw ContractError("dataset needs at least two classes");
    for (const auto& ex : examples) {
      if (static_cast<std::size_t>(ex.features.size()) != input_shape.size())
        throw ContractError("example does not match the dataset input shape");
      if (ex.label >= num_classes) throw ContractError("label out of range");
      if ((ex.features.array() < 0.0).any() || (ex.features.array() > 1.0).any())
        throw ContractError("feature outside [0,1]");
    }
  }
};

struct AugmentConfig {
  std::size_t crop_padding = 4;
  double hflip_prob = 0.5;
  bool enabled = false;
};

enum class SyntheticLayout { two_arcs, gaussian_blobs };

inline SyntheticLayout parse_layout(std::string_view name) {
  if (name == "two_arcs") return SyntheticLayout::two_arcs;
  if (name == "gaussian_blobs") return SyntheticLayout::gaussian_blobs;
  throw ConfigError(fmt::format("unknown synthetic layout '{}'", name));
}

inline std::string_view to_string(SyntheticLayout l) {
  return l == SyntheticLayout::two_arcs ? "two_arcs" : "gaussian_blobs";
}

// Synthetic features are mapped into [kSyntheticMargin, 1 - kSyntheticMargin]
// so that every point admits two-sided finite-difference probes inside [0,1].
inline constexpr double kSyntheticMargin = 0.05;

/// Two-dimensional desk dataset with exactly n_per_class points per class,
/// ordered by class. Class k of `two_arcs` is the k-th arc of an interleaved
/// chain (two classes give the familiar pair of moons); `gaussian_blobs`
/// places isotropic clusters on the unit circle.
inline Dataset generate_synthetic(std::uint64_t seed, std::size_t n_per_class,
                                  std::size_t num_classes, SyntheticLayout layout,
                                  double noise_sigma) {
  if (n_per_class < 1) throw ConfigError("n_per_class must be at least 1");
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");

  Rng rng = make_rng(seed, 0x5157);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::normal_distribution<double> gauss(0.0, 1.0);

  Dataset ds;
  ds.num_classes = num_classes;
  ds.input_shape = InputShape::flat(2);
  ds.examples.reserve(n_per_class * num_classes);
  for (std::size_t k = 0; k < num_classes; ++k) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      Vector p(2);
      if (layout == SyntheticLayout::gaussian_blobs) {
        const double phi = 2.0 * std::numbers::pi * static_cast<double>(k) /
                           static_cast<double>(num_classes);
        p << std::cos(phi), std::sin(phi);
      } else {
        const double t = angle(rng);
        const bool even = k % 2 == 0;
        p << static_cast<double>(k) + (even ? std::cos(t) : -std::cos(t)),
            even ? std::sin(t) : 0.5 - std::sin(t);
      }
      if (noise_sigma > 0.0) {
        p[0] += noise_sigma * gauss(rng);
        p[1] += noise_sigma * gauss(rng);
      }
      ds.examples.push_back({std::move(p), k});
    }
  }

  for (Eigen::Index d = 0; d < 2; ++d) {
    double lo = ds.examples.front().features[d];
    double hi = lo;
    for (const auto& ex : ds.examples) {
      lo = std::min(lo, ex.features[d]);
      hi = std::max(hi, ex.features[d]);
    }
    const double span = hi - lo;
    for (auto& ex : ds.examples) {
      double& v = ex.features[d];
      v = span > 0.0 ? kSyntheticMargin + (1.0 - 2.0 * kSyntheticMargin) * (v - lo) / span
                     : 0.5;
    }
  }
  return ds;
}

struct DatasetSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Stratified split: each class is shuffled independently and cut by the
/// given fractions; the remainder after train and val goes to test.
inline DatasetSplits split_dataset(const Dataset& ds, double train_frac, double val_frac,
                                   std::uint64_t seed) {
  if (train_frac <= 0.0 || val_frac < 0.0 || train_frac + val_frac > 1.0)
    throw ConfigError("split fractions must satisfy 0 < train, 0 <= val, train + val <= 1");
  DatasetSplits out;
  for (Dataset* part : {&out.train, &out.val, &out.test}) {
    part->num_classes = ds.num_classes;
    part->input_shape = ds.input_shape;
  }
  out.train.split = Split::train;
  out.val.split = Split::val;
  out.test.split = Split::test;

  Rng rng = make_rng(seed, 0x5917);
  for (std::size_t k = 0; k < ds.num_classes; ++k) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.examples[i].label == k) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(std::llround(train_frac * n));
    const auto n_val = std::min(idx.size() - n_train,
                                static_cast<std::size_t>(std::llround(val_frac * n)));
    for (std::size_t j = 0; j < idx.size(); ++j) {
      Dataset& dst = j < n_train ? out.train : (j < n_train + n_val ? out.val : out.test);
      dst.examples.push_back(ds.examples[idx[j]]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// IDX container

enum class IdxErrorKind { io, bad_magic, truncated, count_mismatch };

struct IdxError : ParseError {
  IdxErrorKind kind;
  IdxError(IdxErrorKind k, const std::string& what) : ParseError(what), kind(k) {}
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError(IdxErrorKind::io, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t off,
                               const std::string& path) {
  if (buf.size() < off + 4)
    throw IdxError(IdxErrorKind::truncated, "truncated IDX header in " + path);
  return (std::uint32_t{buf[off]} << 24) | (std::uint32_t{buf[off + 1]} << 16) |
         (std::uint32_t{buf[off + 2]} << 8) | std::uint32_t{buf[off + 3]};
}

}  // namespace detail

/// Loads an unsigned-byte IDX image tensor (n x rows x cols) and its label
/// vector. Pixels are divided by 255.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);

  if (detail::read_be32(img, 0, images_path) != kIdxImageMagic)
    throw IdxError(IdxErrorKind::bad_magic, "bad magic in image file " + images_path);
  if (detail::read_be32(lab, 0, labels_path) != kIdxLabelMagic)
    throw IdxError(IdxErrorKind::bad_magic, "bad magic in label file " + labels_path);

  const std::size_t n = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t n_labels = detail::read_be32(lab, 4, labels_path);

  if (n != n_labels)
    throw IdxError(IdxErrorKind::count_mismatch,
                   fmt::format("{} images but {} labels", n, n_labels));
  const std::size_t pixels = rows * cols;
  if (img.size() < 16 + n * pixels)
    throw IdxError(IdxErrorKind::truncated, "truncated image payload in " + images_path);
  if (lab.size() < 8 + n)
    throw IdxError(IdxErrorKind::truncated, "truncated label payload in " + labels_path);

  Dataset ds;
  ds.input_shape = InputShape::grid(rows, cols, 1);
  ds.examples.reserve(n);
  std::size_t max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Vector f(static_cast<Eigen::Index>(pixels));
    for (std::size_t p = 0; p < pixels; ++p)
      f[static_cast<Eigen::Index>(p)] = img[16 + i * pixels + p] / 255.0;
    const std::size_t y = lab[8 + i];
    max_label = std::max(max_label, y);
    ds.examples.push_back({std::move(f), y});
  }
  ds.num_classes = std::max<std::size_t>(2, max_label + 1);
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation

/// Zero-pad by crop_padding on every side, crop back at a uniformly drawn
/// top-left corner, then mirror columns with probability hflip_prob.
inline LabeledExample augment(const LabeledExample& example, const InputShape& shape,
                              const AugmentConfig& config, Rng& rng) {
  if (!config.enabled) return example;
  if (!shape.image) throw ConfigError("augmentation requires image-shaped inputs");
  if (config.hflip_prob < 0.0 || config.hflip_prob > 1.0)
    throw ConfigError("hflip_prob must lie in [0,1]");

  const auto pad = static_cast<long>(config.crop_padding);
  std::uniform_int_distribution<long> offset(0, 2 * pad);
  const long dy = offset(rng) - pad;
  const long dx = offset(rng) - pad;
  std::bernoulli_distribution flip(config.hflip_prob);
  const bool mirror = flip(rng);

  const auto H = static_cast<long>(shape.height);
  const auto W = static_cast<long>(shape.width);
  const auto C = static_cast<long>(shape.channels);
  LabeledExample out{Vector::Zero(example.features.size()), example.label};
  for (long r = 0; r < H; ++r) {
    for (long c = 0; c < W; ++c) {
      const long src_r = r + dy;
      const long src_c = (mirror ? W - 1 - c : c) + dx;
      if (src_r < 0 || src_r >= H || src_c < 0 || src_c >= W) continue;
      for (long k = 0; k < C; ++k)
        out.features[(r * W + c) * C + k] = example.features[(src_r * W + src_c) * C + k];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

inline void write_csv(std::ostream& out, const Dataset& ds,
                      const std::optional<std::string>& header_line = std::nullopt) {
  if (header_line) out << *header_line << '\n';
  for (std::size_t d = 0; d < ds.input_shape.size(); ++d) out << 'x' << d << ',';
  out << "label\n";
  for (const auto& ex : ds.examples) {
    for (Eigen::Index d = 0; d < ex.features.size(); ++d) out << fmt::format("{},", ex.features[d]);
    out << ex.label << '\n';
  }
}

/// Reads the `x0,...,label` layout; lines starting with '#' are skipped.
inline Dataset read_csv(std::istream& in) {
  Dataset ds;
  std::string line;
  bool header_seen = false;
  std::size_t max_label = 0;
  std::size_t dim = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (!header_seen) {
      if (cells.size() < 2 || cells.back() != "label") throw ParseError("missing CSV header");
      dim = cells.size() - 1;
      header_seen = true;
      continue;
    }
    if (cells.size() != dim + 1) throw ParseError("ragged CSV row");
    LabeledExample ex{Vector(static_cast<Eigen::Index>(dim)), 0};
    try {
      for (std::size_t d = 0; d < dim; ++d) ex.features[static_cast<Eigen::Index>(d)] = std::stod(cells[d]);
      ex.label = std::stoul(cells.back());
    } catch (const std::exception&) {
      throw ParseError("malformed CSV value in row: " + line);
    }
    max_label = std::max(max_label, ex.label);
    ds.examples.push_back(std::move(ex));
  }
  if (!header_seen) throw ParseError("empty CSV");
  ds.input_shape = InputShape::flat(dim);
  ds.num_classes = std::max<std::size_t>(2, max_label + 1);
  return ds;
}

}  // namespace rpat
