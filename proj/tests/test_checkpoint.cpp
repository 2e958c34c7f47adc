#include <agnocomm/checkpoint.hpp>
#include <agnocomm/csv.hpp>
#include <agnocomm/nn.hpp>
#include <agnocomm/params.hpp>

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>

using namespace agnocomm;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("agnocomm_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

// Hand-assembled bytes for one 2x2 tensor.
TEST(Checkpoint, ByteLayout) {
  Matrix m(2, 2);
  m << 1.0, 2.0, 3.0, 4.0;
  const Tensor t = to_tensor("w", m);
  const std::vector<Tensor> ts{t};
  const auto bytes = encode_checkpoint(ts);

  std::vector<unsigned char> expected = {'A', 'G', 'N', 'O', 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 'w', 2, 0, 0, 0};
  for (std::uint64_t d : {2ULL, 2ULL})
    for (int b = 0; b < 8; ++b) expected.push_back(static_cast<unsigned char>((d >> (8 * b)) & 0xff));
  for (double v : {1.0, 2.0, 3.0, 4.0}) {  // row-major
    unsigned char buf[8];
    std::memcpy(buf, &v, 8);
    expected.insert(expected.end(), buf, buf + 8);
  }
  EXPECT_EQ(bytes, expected);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(11);
  const std::size_t dims[] = {5, 9, 3};
  auto mlp = nn::make_mlp(dims, nn::Activation::tanh, nn::Activation::identity, rng);
  mlp.layers[0].weights(0, 0) = std::numeric_limits<double>::denorm_min();
  mlp.layers[0].weights(1, 0) = -0.0;
  const auto dir = scratch_dir("ckpt");
  write_checkpoint(dir / "m.agno", to_tensors(mlp));
  auto copy = mlp.zeros_like();
  from_tensors(copy, read_checkpoint(dir / "m.agno"));
  EXPECT_EQ(checksum(copy), checksum(mlp));
  EXPECT_TRUE(std::signbit(copy.layers[0].weights(1, 0)));
}

TEST(Checkpoint, RejectsCorruption) {
  const std::vector<Tensor> ts{to_tensor("v", Vector(Vector::Ones(3)))};
  auto bytes = encode_checkpoint(ts);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), ConfigError);

  auto bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_THROW(decode_checkpoint(bad_version), ConfigError);

  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decode_checkpoint(truncated), ConfigError);

  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_checkpoint(trailing), ConfigError);
}

TEST(Checkpoint, ShapeMismatchAndMissingTensor) {
  const std::vector<Tensor> ts{to_tensor("v", Vector(Vector::Ones(3)))};
  Vector wrong(4);
  EXPECT_THROW(assign_from(ts[0], wrong), ConfigError);
  EXPECT_THROW(find_tensor(ts, "nope"), ConfigError);
}

TEST(Csv, DoublesRoundTrip) {
  for (double v : {0.1, -1e-300, 123456789.123, 1.0 / 3.0}) EXPECT_EQ(parse_double(format_double(v)), v);
  EXPECT_TRUE(std::isnan(parse_double(format_double(std::nan("")))));
  EXPECT_EQ(parse_double(format_double(std::numeric_limits<double>::infinity())),
            std::numeric_limits<double>::infinity());
  EXPECT_THROW(parse_double("abc"), ConfigError);
}

TEST(Csv, TableRoundTrip) {
  const auto dir = scratch_dir("csv");
  CsvTable t;
  t.header = {"a", "b"};
  t.rows = {{"1", "2.5"}, {"3", "nan"}};
  write_csv(dir / "t.csv", t);
  const auto back = read_csv(dir / "t.csv");
  EXPECT_EQ(back.header, t.header);
  EXPECT_EQ(back.rows, t.rows);
  EXPECT_EQ(back.number(0, "b"), 2.5);
  EXPECT_THROW(back.column("c"), ConfigError);
}
