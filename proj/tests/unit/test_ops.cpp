#include <gtest/gtest.h>

#include <cmath>

#include "geomattn/error.hpp"
#include "geomattn/ops.hpp"
#include "test_util.hpp"

using namespace geomattn;
using testutil::random_tensor;

namespace {

std::vector<double> naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * m + j] += a.at({i, p}) * b.at({p, j});
  return out;
}

// Direct six-loop convolution with zero padding.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (wd + 2 * pad - kw) / stride + 1;
  std::vector<double> out(n * o * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t f = 0; f < o; ++f)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xo = 0; xo < ow; ++xo) {
          double acc = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
                const long ix = static_cast<long>(xo * stride + j) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                acc += x.at({b, ch, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)}) *
                       w.at({f, ch, i, j});
              }
          out[((b * o + f) * oh + y) * ow + xo] = acc;
        }
  return out;
}

}  // namespace

TEST(Ops, ElementwiseValues) {
  Tensor a({3}, {1, 2, 3}), b({3}, {4, 5, 6});
  EXPECT_EQ(testutil::values(add(a, b)), (std::vector<double>{5, 7, 9}));
  EXPECT_EQ(testutil::values(sub(a, b)), (std::vector<double>{-3, -3, -3}));
  EXPECT_EQ(testutil::values(mul(a, b)), (std::vector<double>{4, 10, 18}));
  EXPECT_EQ(testutil::values(neg(a)), (std::vector<double>{-1, -2, -3}));
  EXPECT_EQ(testutil::values(add_scalar(a, 1)), (std::vector<double>{2, 3, 4}));
  EXPECT_EQ(testutil::values(scale(a, 2)), (std::vector<double>{2, 4, 6}));
  EXPECT_EQ(testutil::values(relu(Tensor({3}, {-1, 0, 2}))), (std::vector<double>{0, 0, 2}));
  EXPECT_THROW(add(a, Tensor::ones({2})), ShapeError);
}

TEST(Ops, LogOfNonPositiveThrows) {
  EXPECT_THROW(log(Tensor({2}, {1.0, 0.0})), NumericError);
  EXPECT_THROW(log(Tensor({1}, {-2.0})), NumericError);
}

TEST(Ops, ReluGradientAtZeroIsZero) {
  Tensor x({3}, {-1.0, 0.0, 1.0});
  x.set_requires_grad();
  sum(relu(x)).backward();
  EXPECT_EQ(testutil::values(x.grad()), (std::vector<double>{0, 0, 1}));
}

TEST(Ops, SoftplusIsStableForLargeInputs) {
  const Tensor y = softplus(Tensor({3}, {-800.0, 0.0, 800.0}));
  EXPECT_NEAR(y.data()[0], 0.0, 1e-300);
  EXPECT_NEAR(y.data()[1], std::log(2.0), 1e-15);
  EXPECT_EQ(y.data()[2], 800.0);
}

TEST(Ops, MatmulMatchesNaiveLoops) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng() % 7, k = 1 + rng() % 9, m = 1 + rng() % 6;
    const Tensor a = random_tensor({n, k}, rng), b = random_tensor({k, m}, rng);
    const auto expected = naive_matmul(a, b);
    const Tensor c = matmul(a, b);
    ASSERT_EQ(c.shape(), (Shape{n, m}));
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(c.data()[i], expected[i], 1e-12);
  }
  EXPECT_THROW(matmul(Tensor::ones({2, 3}), Tensor::ones({2, 3})), ShapeError);
}

TEST(Ops, MatmulNtUsesTransposedRightOperand) {
  std::mt19937_64 rng(4);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({5, 4}, rng);
  const Tensor c = matmul_nt(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double dot = 0.0;
      for (std::size_t p = 0; p < 4; ++p) dot += a.at({i, p}) * b.at({j, p});
      EXPECT_NEAR(c.at({i, j}), dot, 1e-12);
    }
}

TEST(Ops, LinearAddsBias) {
  const Tensor x({1, 2}, {1, 2}), w({2, 2}, {1, 0, 0, 1}), b({2}, {0.5, -0.5});
  EXPECT_EQ(testutil::values(linear(x, w, b)), (std::vector<double>{1.5, 1.5}));
  EXPECT_EQ(testutil::values(linear(x, w)), (std::vector<double>{1, 2}));
}

TEST(Ops, Conv2dMatchesDirectLoops) {
  std::mt19937_64 rng(5);
  struct Case {
    std::size_t n, c, h, w, o, k, stride, pad;
  };
  const Case cases[] = {{2, 3, 5, 5, 4, 3, 1, 1}, {1, 2, 8, 6, 3, 3, 2, 1}, {2, 3, 4, 4, 2, 1, 2, 0},
                        {1, 1, 7, 7, 2, 5, 1, 2}, {3, 4, 9, 9, 5, 3, 2, 0}};
  for (const Case& cs : cases) {
    const Tensor x = random_tensor({cs.n, cs.c, cs.h, cs.w}, rng);
    const Tensor w = random_tensor({cs.o, cs.c, cs.k, cs.k}, rng);
    const Tensor y = conv2d(x, w, cs.stride, cs.pad);
    const auto expected = naive_conv(x, w, cs.stride, cs.pad);
    ASSERT_EQ(y.numel(), expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(y.data()[i], expected[i], 1e-12);
  }
}

TEST(Ops, Conv2dRejectsBadShapes) {
  EXPECT_THROW(conv2d(Tensor::ones({1, 2, 4, 4}), Tensor::ones({1, 3, 3, 3}), 1, 1), ShapeError);
  EXPECT_THROW(conv2d(Tensor::ones({1, 1, 2, 2}), Tensor::ones({1, 1, 5, 5}), 1, 0), ShapeError);
}

TEST(Ops, BatchNormTrainNormalizesPerChannel) {
  std::mt19937_64 rng(6);
  const Tensor x = random_tensor({4, 3, 2, 2}, rng, -3.0, 5.0);
  RunningStats stats(3);
  const Tensor y = batch_norm(x, Tensor::ones({3}), Tensor::zeros({3}), stats, Mode::train);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double mu = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t s = 0; s < 4; ++s) {
        const double v = y.at({i, ch, s / 2, s % 2});
        mu += v;
        sq += v * v;
      }
    EXPECT_NEAR(mu / 16, 0.0, 1e-12);
    EXPECT_NEAR(sq / 16, 1.0, 1e-4);  // eps = 1e-5 shrinks the variance slightly
  }
  EXPECT_EQ(stats.updates(), 1u);
}

TEST(Ops, BatchNormRunningStatisticsFollowMomentum) {
  const Tensor x({4, 1}, {1, 2, 3, 6});
  RunningStats stats(1);
  batch_norm(x, Tensor::ones({1}), std::nullopt, stats, Mode::train);
  // mean 3, unbiased variance (4+1+0+9)/3
  EXPECT_NEAR(stats.mean.data()[0], 0.1 * 3.0, 1e-15);
  EXPECT_NEAR(stats.var.data()[0], 0.9 + 0.1 * 14.0 / 3.0, 1e-15);
}

TEST(Ops, BatchNormEvalUsesRunningStatistics) {
  RunningStats stats(1);
  EXPECT_THROW(batch_norm(Tensor::ones({2, 1}), Tensor::ones({1}), std::nullopt, stats, Mode::eval), Error);
  stats.mean.mutable_data()[0] = 1.0;
  stats.var.mutable_data()[0] = 4.0;
  stats.count.mutable_data()[0] = 1.0;
  const Tensor y = batch_norm(Tensor({2, 1}, {3, 5}), Tensor({1}, {2.0}), Tensor({1}, {1.0}), stats, Mode::eval);
  EXPECT_NEAR(y.data()[0], 2.0 * 2.0 / std::sqrt(4.0 + 1e-5) + 1.0, 1e-12);
  EXPECT_NEAR(y.data()[1], 2.0 * 4.0 / std::sqrt(4.0 + 1e-5) + 1.0, 1e-12);
}

TEST(Ops, BatchNormTrainNeedsTwoValues) {
  RunningStats stats(2);
  EXPECT_THROW(batch_norm(Tensor::ones({1, 2}), Tensor::ones({2}), std::nullopt, stats, Mode::train), ShapeError);
}

TEST(Ops, GlobalAvgPool) {
  const Tensor x({1, 2, 2, 2}, {1, 2, 3, 4, 10, 10, 10, 10});
  EXPECT_EQ(testutil::values(global_avg_pool(x)), (std::vector<double>{2.5, 10}));
}

TEST(Ops, ConcatAndSlices) {
  const Tensor a({2, 1}, {1, 2}), b({2, 2}, {3, 4, 5, 6});
  EXPECT_EQ(testutil::values(concat(a, b)), (std::vector<double>{1, 3, 4, 2, 5, 6}));
  EXPECT_EQ(concat(a, Tensor::zeros({2, 0})).shape(), (Shape{2, 1}));
  const Tensor r = concat_rows(b, Tensor({1, 2}, {7, 8}));
  EXPECT_EQ(r.shape(), (Shape{3, 2}));
  EXPECT_EQ(testutil::values(slice_rows(r, 1, 3)), (std::vector<double>{5, 6, 7, 8}));
  EXPECT_THROW(slice_rows(r, 2, 4), ShapeError);
}

TEST(Ops, L2NormalizeRows) {
  const Tensor v({3, 2}, {3, 4, 0, 0, -1, 0});
  EXPECT_EQ(testutil::values(l2_normalize(v)), (std::vector<double>{0.6, 0.8, 0, 0, -1, 0}));
}

TEST(Ops, MulSpatialBroadcastsOverChannels) {
  const Tensor x({1, 2, 1, 2}, {1, 2, 3, 4}), m({1, 1, 2}, {10, 100});
  EXPECT_EQ(testutil::values(mul_spatial(x, m)), (std::vector<double>{10, 200, 30, 400}));
}

TEST(Ops, ReshapeKeepsValues) {
  const Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(testutil::values(reshape(x, {3, 2})), testutil::values(x));
  EXPECT_THROW(reshape(x, {4, 2}), ShapeError);
}
