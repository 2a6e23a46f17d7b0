#include "hyperfed/binary_io.hpp"
#include "hyperfed/param_vector.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace hyperfed;

namespace {

Layout small_layout() { return {{"W0", {2, 3}}, {"b0", {2}}}; }

ParamVector ramp(double start) {
  Eigen::VectorXd v(8);
  for (int i = 0; i < 8; ++i) v[i] = start + i;
  return ParamVector(small_layout(), v);
}

}  // namespace

TEST(ParamVector, SizeAndOffsets) {
  const ParamVector p(small_layout());
  EXPECT_EQ(p.size(), 8);
  EXPECT_EQ(p.offset_of("W0"), 0);
  EXPECT_EQ(p.offset_of("b0"), 6);
  EXPECT_THROW(p.offset_of("W9"), std::invalid_argument);
  EXPECT_EQ(p.values().norm(), 0.0);
}

TEST(ParamVector, Arithmetic) {
  const ParamVector a = ramp(0.0);
  const ParamVector b = ramp(1.0);
  EXPECT_EQ((b - a).values(), Eigen::VectorXd::Ones(8));
  EXPECT_EQ((a + b).values()[7], 15.0);
  EXPECT_EQ((2.0 * a).values()[3], 6.0);
  EXPECT_DOUBLE_EQ(a.dot(a), 140.0);
}

TEST(ParamVector, LayoutMismatchThrows) {
  ParamVector a = ramp(0.0);
  const ParamVector other(Layout{{"W0", {8}}});
  EXPECT_THROW(a += other, std::invalid_argument);
  EXPECT_THROW(a.dot(other), std::invalid_argument);
  EXPECT_THROW(ParamVector(small_layout(), Eigen::VectorXd::Zero(3)), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsExact) {
  ParamVector a = ramp(-3.25);
  a.values()[2] = 1.0 / 3.0;
  const auto path = std::filesystem::temp_directory_path() / "hyperfed_test.ckpt";
  save_checkpoint(a, path);
  const ParamVector back = load_checkpoint(path);
  EXPECT_TRUE(back == a);
  EXPECT_EQ(back.layout(), a.layout());
  std::filesystem::remove(path);
}

TEST(Checkpoint, ByteLayout) {
  const ParamVector p(Layout{{"b", {1}}}, Eigen::VectorXd::Constant(1, 1.0));
  const auto bytes = encode_checkpoint(p);
  // count, name length, name, rank, dim, value
  ASSERT_EQ(bytes.size(), 8u + 8u + 1u + 8u + 8u + 8u);
  EXPECT_EQ(bytes[0], 1);
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[16], 'b');
  EXPECT_EQ(bytes[17], 1);
  EXPECT_EQ(bytes[25], 1);
  EXPECT_EQ(bytes[33 + 7], 0x3F);
  EXPECT_EQ(bytes[33 + 6], 0xF0);
}

TEST(Checkpoint, CorruptInputThrows) {
  auto bytes = encode_checkpoint(ramp(0.0));
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(truncated), std::runtime_error);
  auto extended = bytes;
  extended.push_back(0);
  EXPECT_THROW(decode_checkpoint(extended), std::runtime_error);
  EXPECT_THROW(decode_checkpoint({}), std::runtime_error);
}

TEST(ByteIo, LittleEndianIntegers) {
  io::ByteWriter w;
  w.u64(0x0102030405060708ULL);
  const auto& bytes = w.bytes();
  ASSERT_EQ(bytes.size(), 8u);
  EXPECT_EQ(bytes[0], 0x08);
  EXPECT_EQ(bytes[7], 0x01);
  io::ByteReader r(bytes);
  EXPECT_EQ(r.u64(), 0x0102030405060708ULL);
  EXPECT_THROW(r.u64(), std::runtime_error);
}
