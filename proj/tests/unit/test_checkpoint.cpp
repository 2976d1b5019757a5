#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "geomattn/checkpoint.hpp"
#include "geomattn/error.hpp"
#include "test_util.hpp"

using namespace geomattn;

TEST(Checkpoint, RoundTripsBitwise) {
  std::mt19937_64 rng(1);
  const std::vector<NamedTensor> in{{"a/weight", testutil::random_tensor({2, 3, 1}, rng)},
                                    {"scalar", Tensor::scalar(-0.0)},
                                    {"empty", Tensor::zeros({0})},
                                    {"tiny", Tensor({1}, {5e-324})}};
  std::stringstream buf;
  write_container(buf, in);
  const auto out = read_container(buf);
  ASSERT_EQ(out.size(), in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    EXPECT_EQ(out[i].name, in[i].name);
    EXPECT_EQ(out[i].tensor.shape(), in[i].tensor.shape());
    EXPECT_EQ(0, std::memcmp(out[i].tensor.data().data(), in[i].tensor.data().data(),
                             in[i].tensor.numel() * sizeof(double)));
  }
  EXPECT_TRUE(std::signbit(out[1].tensor.item()));
}

TEST(Checkpoint, FileRoundTrip) {
  testutil::TempDir dir("ckpt");
  write_container(dir.path() / "x.gatn", {{"v", Tensor({2}, {1.5, 2.5})}});
  const auto out = read_container(dir.path() / "x.gatn");
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].tensor.data()[1], 2.5);
}

TEST(Checkpoint, RejectsBadMagic) {
  std::stringstream buf("NOPE!garbage");
  EXPECT_THROW(read_container(buf), DataError);
}

TEST(Checkpoint, RejectsTruncation) {
  std::stringstream buf;
  write_container(buf, {{"v", Tensor({4}, {1, 2, 3, 4})}});
  std::string bytes = buf.str();
  bytes.resize(bytes.size() - 5);
  std::stringstream cut(bytes);
  EXPECT_THROW(read_container(cut), DataError);
}

TEST(Checkpoint, MissingFileIsADataError) {
  EXPECT_THROW(read_container(std::filesystem::path("/nonexistent/file.gatn")), DataError);
}
