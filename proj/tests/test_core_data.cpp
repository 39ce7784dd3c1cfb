#include <atomic>
#include <fstream>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "rpat/data.hpp"

using namespace rpat;

TEST(Seeds, DeriveIsStableAndSeparatesStreams) {
  EXPECT_EQ(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
  EXPECT_NE(derive_seed(1, 2, 3), derive_seed(1, 3, 2));
  EXPECT_NE(derive_seed(1, 2, 3), derive_seed(2, 2, 3));
  Rng a = make_rng(5, 1, 1), b = make_rng(5, 1, 1);
  EXPECT_EQ(a(), b());
}

TEST(ParallelFor, VisitsEveryIndexOnce) {
  for (unsigned threads : {1u, 3u, 8u}) {
    std::vector<std::atomic<int>> hits(101);
    parallel_for(hits.size(), threads, [&](std::size_t i) { hits[i]++; });
    for (auto& h : hits) EXPECT_EQ(h.load(), 1);
  }
}

TEST(ParallelFor, RethrowsWorkerExceptions) {
  EXPECT_THROW(parallel_for(10, 4, [](std::size_t i) {
                 if (i == 7) throw NumericError("boom");
               }),
               NumericError);
}

TEST(InputShape, Sizes) {
  EXPECT_EQ(InputShape::flat(7).size(), 7u);
  EXPECT_EQ(InputShape::grid(4, 5, 3).size(), 60u);
  EXPECT_FALSE(InputShape::flat(3).image);
}

TEST(Synthetic, ShapeOrderingAndRange) {
  const Dataset ds = generate_synthetic(3, 50, 2, SyntheticLayout::two_arcs, 0.1);
  ASSERT_EQ(ds.size(), 100u);
  EXPECT_EQ(ds.num_classes, 2u);
  EXPECT_EQ(ds.input_shape.size(), 2u);
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(ds.examples[i].label, i < 50 ? 0u : 1u);
  double lo = 1, hi = 0;
  for (const auto& ex : ds.examples) {
    lo = std::min(lo, ex.features.minCoeff());
    hi = std::max(hi, ex.features.maxCoeff());
  }
  EXPECT_NEAR(lo, kSyntheticMargin, 1e-12);
  EXPECT_NEAR(hi, 1.0 - kSyntheticMargin, 1e-12);
  EXPECT_NO_THROW(ds.validate());
}

TEST(Synthetic, SameSeedSameData) {
  const Dataset a = generate_synthetic(11, 20, 3, SyntheticLayout::gaussian_blobs, 0.2);
  const Dataset b = generate_synthetic(11, 20, 3, SyntheticLayout::gaussian_blobs, 0.2);
  const Dataset c = generate_synthetic(12, 20, 3, SyntheticLayout::gaussian_blobs, 0.2);
  ASSERT_EQ(a.size(), 60u);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.examples[i].features, b.examples[i].features);
    differs |= a.examples[i].features != c.examples[i].features;
  }
  EXPECT_TRUE(differs);
}

TEST(Synthetic, RejectsBadArguments) {
  EXPECT_THROW(generate_synthetic(0, 0, 2, SyntheticLayout::two_arcs, 0.1), ConfigError);
  EXPECT_THROW(parse_layout("spirals"), ConfigError);
  EXPECT_EQ(parse_layout("gaussian_blobs"), SyntheticLayout::gaussian_blobs);
}

TEST(Split, StratifiedDisjointAndComplete) {
  const Dataset ds = generate_synthetic(1, 100, 3, SyntheticLayout::gaussian_blobs, 0.1);
  const auto s = split_dataset(ds, 0.8, 0.1, 9);
  EXPECT_EQ(s.train.size(), 240u);
  EXPECT_EQ(s.val.size(), 30u);
  EXPECT_EQ(s.test.size(), 30u);
  for (const Dataset* part : {&s.train, &s.val, &s.test}) {
    std::vector<int> per(3, 0);
    for (const auto& ex : part->examples) per[ex.label]++;
    EXPECT_EQ(per[0], per[1]);
    EXPECT_EQ(per[1], per[2]);
  }
  std::multiset<std::pair<double, double>> all, parts;
  for (const auto& ex : ds.examples) all.insert({ex.features[0], ex.features[1]});
  for (const Dataset* part : {&s.train, &s.val, &s.test})
    for (const auto& ex : part->examples) parts.insert({ex.features[0], ex.features[1]});
  EXPECT_EQ(all, parts);
  EXPECT_THROW(split_dataset(ds, 0.8, 0.3, 0), ConfigError);
}

namespace {

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

struct IdxFiles {
  std::string images, labels;
};

IdxFiles write_idx(const std::string& name, std::uint32_t img_magic, std::uint32_t n_img,
                   std::uint32_t n_lab, std::size_t drop_bytes = 0) {
  const auto dir = rpat::testing::temp_dir(name);
  std::vector<std::uint8_t> img, lab;
  put_be32(img, img_magic);
  put_be32(img, n_img);
  put_be32(img, 2);
  put_be32(img, 3);
  for (std::uint32_t i = 0; i < n_img * 6; ++i) img.push_back(static_cast<std::uint8_t>((i * 51) % 256));
  put_be32(lab, kIdxLabelMagic);
  put_be32(lab, n_lab);
  for (std::uint32_t i = 0; i < n_lab; ++i) lab.push_back(static_cast<std::uint8_t>(i % 3));
  img.resize(img.size() - drop_bytes);
  IdxFiles f{(dir / "img.idx").string(), (dir / "lab.idx").string()};
  std::ofstream(f.images, std::ios::binary).write(reinterpret_cast<const char*>(img.data()), img.size());
  std::ofstream(f.labels, std::ios::binary).write(reinterpret_cast<const char*>(lab.data()), lab.size());
  return f;
}

IdxErrorKind idx_error_kind(const IdxFiles& f) {
  try {
    load_idx(f.images, f.labels);
  } catch (const IdxError& e) {
    return e.kind;
  }
  ADD_FAILURE() << "no IdxError thrown";
  return IdxErrorKind::io;
}

}  // namespace

TEST(Idx, LoadsAndNormalizes) {
  const auto f = write_idx("idx_ok", kIdxImageMagic, 4, 4);
  const Dataset ds = load_idx(f.images, f.labels);
  ASSERT_EQ(ds.size(), 4u);
  EXPECT_TRUE(ds.input_shape.image);
  EXPECT_EQ(ds.input_shape.height, 2u);
  EXPECT_EQ(ds.input_shape.width, 3u);
  EXPECT_EQ(ds.num_classes, 3u);
  EXPECT_DOUBLE_EQ(ds.examples[0].features[0], 0.0);
  EXPECT_DOUBLE_EQ(ds.examples[0].features[5], 255.0 / 255.0);
  EXPECT_DOUBLE_EQ(ds.examples[1].features[0], (6 * 51 % 256) / 255.0);
  EXPECT_EQ(ds.examples[3].label, 0u);
  EXPECT_NO_THROW(ds.validate());
}

TEST(Idx, ErrorKinds) {
  EXPECT_EQ(idx_error_kind(write_idx("idx_magic", 0x0804, 2, 2)), IdxErrorKind::bad_magic);
  EXPECT_EQ(idx_error_kind(write_idx("idx_count", kIdxImageMagic, 3, 2)), IdxErrorKind::count_mismatch);
  EXPECT_EQ(idx_error_kind(write_idx("idx_trunc", kIdxImageMagic, 3, 3, 1)), IdxErrorKind::truncated);
  EXPECT_EQ(idx_error_kind({"/nonexistent/a", "/nonexistent/b"}), IdxErrorKind::io);
}

TEST(Augment, DisabledIsIdentityAndFlatInputsAreRejected) {
  Rng rng = make_rng(1);
  LabeledExample ex{Vector::LinSpaced(4, 0.1, 0.4), 1};
  AugmentConfig off;
  EXPECT_EQ(augment(ex, InputShape::flat(4), off, rng).features, ex.features);
  AugmentConfig on;
  on.enabled = true;
  EXPECT_THROW(augment(ex, InputShape::flat(4), on, rng), ConfigError);
}

TEST(Augment, MirrorWithoutPadding) {
  Rng rng = make_rng(2);
  const InputShape shape = InputShape::grid(2, 3, 1);
  LabeledExample ex{(Vector(6) << 0.1, 0.2, 0.3, 0.4, 0.5, 0.6).finished(), 0};
  AugmentConfig cfg{0, 1.0, true};
  const Vector out = augment(ex, shape, cfg, rng).features;
  EXPECT_EQ(out, (Vector(6) << 0.3, 0.2, 0.1, 0.6, 0.5, 0.4).finished());
}

TEST(Augment, PaddedCropIsAShiftWithZeroFill) {
  Rng rng = make_rng(3);
  const InputShape shape = InputShape::grid(4, 4, 2);
  const Vector x = Vector::LinSpaced(32, 0.05, 0.95);
  AugmentConfig cfg{1, 0.0, true};
  std::set<std::pair<int, int>> seen;
  for (int trial = 0; trial < 60; ++trial) {
    const Vector out = augment({x, 0}, shape, cfg, rng).features;
    bool matched = false;
    for (int dy = -1; dy <= 1 && !matched; ++dy) {
      for (int dx = -1; dx <= 1 && !matched; ++dx) {
        bool ok = true;
        for (int r = 0; r < 4; ++r)
          for (int c = 0; c < 4; ++c)
            for (int k = 0; k < 2; ++k) {
              const int sr = r + dy, sc = c + dx;
              const double want = (sr < 0 || sr >= 4 || sc < 0 || sc >= 4) ? 0.0 : x[(sr * 4 + sc) * 2 + k];
              ok &= out[(r * 4 + c) * 2 + k] == want;
            }
        if (ok) {
          matched = true;
          seen.insert({dy, dx});
        }
      }
    }
    EXPECT_TRUE(matched);
  }
  EXPECT_EQ(seen.size(), 9u);
}

TEST(Csv, RoundTripIsExact) {
  const Dataset ds = generate_synthetic(4, 10, 2, SyntheticLayout::two_arcs, 0.1);
  std::stringstream ss;
  write_csv(ss, ds, std::string("# config=abc"));
  EXPECT_EQ(ss.str().rfind("# config=abc\nx0,x1,label\n", 0), 0u);
  const Dataset back = read_csv(ss);
  ASSERT_EQ(back.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back.examples[i].features, ds.examples[i].features);
    EXPECT_EQ(back.examples[i].label, ds.examples[i].label);
  }
}

TEST(Csv, MalformedInputs) {
  std::istringstream no_header("0.1,0.2,1\n");
  EXPECT_THROW(read_csv(no_header), ParseError);
  std::istringstream ragged("x0,x1,label\n0.1,1\n");
  EXPECT_THROW(read_csv(ragged), ParseError);
  std::istringstream junk("x0,label\nabc,1\n");
  EXPECT_THROW(read_csv(junk), ParseError);
}
