#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "seat/data_io.hpp"
#include "test_util.hpp"

using namespace seat;
namespace fs = std::filesystem;

namespace {

void put_be32(std::string& s, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::string idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols, const std::vector<unsigned char>& px,
                       std::uint32_t magic = kIdxImagesMagic) {
  std::string s;
  put_be32(s, magic);
  put_be32(s, n);
  put_be32(s, rows);
  put_be32(s, cols);
  s.append(px.begin(), px.end());
  return s;
}

std::string idx_labels(const std::vector<unsigned char>& y) {
  std::string s;
  put_be32(s, kIdxLabelsMagic);
  put_be32(s, static_cast<std::uint32_t>(y.size()));
  s.append(y.begin(), y.end());
  return s;
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream(p, std::ios::binary) << bytes;
}

IdxError::Code idx_error_code(const fs::path& img, const fs::path& lab) {
  try {
    load_mnist_idx(img.string(), lab.string());
  } catch (const IdxError& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected IdxError";
  return IdxError::Code::io;
}

CheckpointError::Code ckpt_error_code(const fs::path& p) {
  try {
    load_checkpoint(p);
  } catch (const CheckpointError& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected CheckpointError";
  return CheckpointError::Code::io;
}

}  // namespace

TEST(TwoMoons, NoiselessPointsLieOnArcs) {
  // 21 points per arc put t = pi/2 on the grid, so the raw ranges are x in [-1, 2], y in [-0.5, 1]
  const Dataset d = gen_two_moons(42, 0.0, 1);
  ASSERT_EQ(d.size(), 42u);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double x = d.inputs[2 * i] * 3.0 - 1.0, y = d.inputs[2 * i + 1] * 1.5 - 0.5;
    const double r = d.labels[i] == 0 ? std::hypot(x, y) : std::hypot(x - 1.0, y - 0.5);
    EXPECT_NEAR(r, 1.0, 1e-12) << i;
  }
}

TEST(TwoMoons, DeterministicBalancedAndInUnitBox) {
  const Dataset a = gen_two_moons(100, 0.2, 7), b = gen_two_moons(100, 0.2, 7);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_FALSE(a.inputs == gen_two_moons(100, 0.2, 8).inputs);
  EXPECT_EQ(std::count(a.labels.begin(), a.labels.end(), 1), 50);
  EXPECT_NO_THROW(a.validate());
  EXPECT_THROW(gen_two_moons(7, 0.1, 0), Error);
  EXPECT_THROW(gen_two_moons(8, -0.1, 0), Error);
}

TEST(TwoMoons, SplitIsDisjointAndBalanced) {
  const auto [tr, te] = two_moons_split(60, 40, 0.1, 3);
  EXPECT_EQ(tr.size(), 60u);
  EXPECT_EQ(te.size(), 40u);
  EXPECT_EQ(te.split, Split::test);
  EXPECT_EQ(std::count(te.labels.begin(), te.labels.end(), 0), 20);
  std::set<std::pair<double, double>> seen;
  for (std::size_t i = 0; i < tr.size(); ++i) seen.insert({tr.inputs[2 * i], tr.inputs[2 * i + 1]});
  for (std::size_t i = 0; i < te.size(); ++i) EXPECT_EQ(seen.count({te.inputs[2 * i], te.inputs[2 * i + 1]}), 0u);
  EXPECT_THROW(two_moons_split(61, 40, 0.1, 3), Error);
}

TEST(Idx, PixelScalingAndShape) {
  const auto dir = seat::testing::temp_dir("idx_ok");
  write_bytes(dir / "img", idx_images(2, 2, 2, {0, 255, 51, 102, 255, 0, 0, 0}));
  write_bytes(dir / "lab", idx_labels({3, 9}));
  const Dataset d = load_mnist_idx((dir / "img").string(), (dir / "lab").string());
  EXPECT_EQ(d.inputs.shape(), (Shape{2, 1, 2, 2}));
  EXPECT_EQ(d.inputs[0], 0.0);
  EXPECT_EQ(d.inputs[1], 1.0);
  EXPECT_DOUBLE_EQ(d.inputs[2], 0.2);
  EXPECT_EQ(d.labels, (std::vector<int>{3, 9}));
  EXPECT_EQ(d.num_classes, 10u);
}

TEST(Idx, DistinctErrors) {
  const auto dir = seat::testing::temp_dir("idx_bad");
  write_bytes(dir / "lab", idx_labels({1, 2}));
  write_bytes(dir / "magic", idx_images(2, 2, 2, std::vector<unsigned char>(8), 0x00000801));
  EXPECT_EQ(idx_error_code(dir / "magic", dir / "lab"), IdxError::Code::bad_magic);
  write_bytes(dir / "short", idx_images(2, 2, 2, std::vector<unsigned char>(5)));
  EXPECT_EQ(idx_error_code(dir / "short", dir / "lab"), IdxError::Code::truncated);
  write_bytes(dir / "three", idx_images(3, 2, 2, std::vector<unsigned char>(12)));
  EXPECT_EQ(idx_error_code(dir / "three", dir / "lab"), IdxError::Code::count_mismatch);
  EXPECT_EQ(idx_error_code(dir / "missing", dir / "lab"), IdxError::Code::io);
  write_bytes(dir / "ok", idx_images(2, 2, 2, std::vector<unsigned char>(8)));
  write_bytes(dir / "badlab", idx_labels({1, 12}));
  EXPECT_EQ(idx_error_code(dir / "ok", dir / "badlab"), IdxError::Code::bad_label);
}

TEST(Idx, BundledSubsetLoads) {
  const fs::path dir(SEAT_DATA_DIR);
  const Dataset full = load_mnist_idx((dir / "mnist5k-images-idx3-ubyte.gz").string(),
                                      (dir / "mnist5k-labels-idx1-ubyte.gz").string());
  EXPECT_EQ(full.size(), 5000u);
  EXPECT_EQ(full.sample_shape(), (Shape{1, 28, 28}));
  EXPECT_NO_THROW(full.validate());
  const auto train = mnist_subset_indices(full, "mnist-1k");
  const auto test = mnist_subset_indices(full, "mnist-test-1k");
  EXPECT_EQ(train.size(), 1000u);
  EXPECT_EQ(test.size(), 1000u);
  std::set<std::size_t> s(train.begin(), train.end());
  for (std::size_t i : test) EXPECT_EQ(s.count(i), 0u);
  const Dataset sub = full.subset(train);
  for (int c = 0; c < 10; ++c) EXPECT_EQ(std::count(sub.labels.begin(), sub.labels.end(), c), 100);
  EXPECT_THROW(mnist_subset_indices(full, "mnist-2k"), Error);
}

TEST(Subset, FirstPerClassInFileOrder) {
  Dataset d;
  d.num_classes = 2;
  d.labels = {1, 0, 1, 0, 0, 1};
  d.inputs = Tensor({6, 1});
  EXPECT_THROW(mnist_subset_indices(d, "mnist-1k"), Error);
  const Dataset s = d.strided(3);
  EXPECT_EQ(s.labels, (std::vector<int>{1, 1, 0}));
}

TEST(Checkpoint, RoundtripWithinFloat32) {
  const auto dir = seat::testing::temp_dir("ckpt_ok");
  const ParamLayout l = make_layout({{"a.weight", {2, 3}}, {"a.bias", {3}}});
  Rng rng(1);
  ParamVector p(l);
  for (double& v : p.data()) v = rng.normal();
  save_checkpoint(p, {{"k", 1}}, dir / "p.ckpt");
  const Checkpoint c = load_checkpoint(dir / "p.ckpt");
  EXPECT_EQ(c.params.layout(), l);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(c.params[i], p[i], 1e-6 * std::max(1.0, std::abs(p[i])));
  EXPECT_EQ(c.meta()["k"], 1);
}

TEST(Checkpoint, CorruptionIsDetected) {
  const auto dir = seat::testing::temp_dir("ckpt_bad");
  const ParamVector p(make_layout({{"w", {4}}}), {1, 2, 3, 4});
  save_checkpoint(p, {{"k", 1}}, dir / "p.ckpt");
  const std::string good = seat::testing::slurp(dir / "p.ckpt");

  std::string bad = good;
  bad[0] = 'X';
  write_bytes(dir / "magic", bad);
  EXPECT_EQ(ckpt_error_code(dir / "magic"), CheckpointError::Code::bad_magic);

  bad = good;
  bad[8] = 9;
  write_bytes(dir / "version", bad);
  EXPECT_EQ(ckpt_error_code(dir / "version"), CheckpointError::Code::unsupported_version);

  write_bytes(dir / "trunc", good.substr(0, good.size() - 12));
  EXPECT_EQ(ckpt_error_code(dir / "trunc"), CheckpointError::Code::truncated);

  write_bytes(dir / "trailing", good + "x");
  EXPECT_EQ(ckpt_error_code(dir / "trailing"), CheckpointError::Code::invalid);

  bad = good;
  bad[bad.size() - 1] = '#';
  write_bytes(dir / "json", bad);
  EXPECT_EQ(ckpt_error_code(dir / "json"), CheckpointError::Code::invalid);

  EXPECT_EQ(ckpt_error_code(dir / "absent"), CheckpointError::Code::io);
  EXPECT_THROW(save_checkpoint(ParamVector(), {}, dir / "empty.ckpt"), CheckpointError);
}

TEST(Csv, FormatAndRowWidth) {
  CsvTable t({"a", "b"});
  t.add_row({"1", fmt_double(0.5)});
  EXPECT_EQ(t.str(), "a,b\n1,0.5\n");
  EXPECT_THROW(t.add_row({"1"}), Error);
  const auto dir = seat::testing::temp_dir("csv");
  t.write(dir / "t.csv");
  EXPECT_EQ(seat::testing::slurp(dir / "t.csv"), t.str());
}

TEST(Csv, DoublesRoundTrip) {
  for (double v : {0.1, 1.0 / 3.0, 6.02e23, -2.5e-300}) EXPECT_EQ(std::stod(fmt_double(v)), v);
  EXPECT_EQ(fmt_double(std::nan("")), "nan");
}
