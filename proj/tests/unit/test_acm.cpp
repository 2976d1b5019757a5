#include <gtest/gtest.h>

#include <cmath>

#include "geomattn/acm.hpp"
#include "geomattn/error.hpp"
#include "geomattn/image.hpp"
#include "geomattn/ops.hpp"
#include "test_util.hpp"

using namespace geomattn;

namespace {

// Straight loops over a single [c,h,w] map, independent of the library implementation.
std::vector<double> naive_mask(const Tensor& local, int k) {
  const int c = static_cast<int>(local.dim(0)), h = static_cast<int>(local.dim(1)),
            w = static_cast<int>(local.dim(2));
  auto L = [&](int ch, int y, int x) { return local.at({std::size_t(ch), std::size_t(y), std::size_t(x)}); };
  const int r = k / 2;
  std::vector<double> qt(h * w, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double channel_peak = 0.0;
      for (int ch = 0; ch < c; ++ch) channel_peak = std::max(channel_peak, L(ch, y, x));
      double best = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        double denom = 0.0;
        for (int yy = std::max(0, y - r); yy <= std::min(h - 1, y + r); ++yy) {
          for (int xx = std::max(0, x - r); xx <= std::min(w - 1, x + r); ++xx) denom += std::exp(L(ch, yy, xx));
        }
        const double m = std::exp(L(ch, y, x)) / denom;
        const double g = L(ch, y, x) / channel_peak;
        best = std::max(best, m * g);
      }
      qt[y * w + x] = best;
    }
  }
  double total = 0.0;
  for (double v : qt) total += v;
  for (double& v : qt) v /= total;
  return qt;
}

AcmConfig with_k(std::size_t k) {
  AcmConfig c;
  c.neighborhood = k;
  c.keep_intermediates = true;
  return c;
}

}  // namespace

TEST(Acm, MatchesNaiveOracle) {
  std::mt19937_64 rng(11);
  for (std::size_t k : {1u, 3u, 5u, 7u}) {
    for (int trial = 0; trial < 3; ++trial) {
      const Tensor local = testutil::random_tensor({4, 6, 5}, rng, 0.01, 3.0);
      const auto expected = naive_mask(local, static_cast<int>(k));
      const auto got = testutil::values(attention_mask(local, with_k(k)).q);
      ASSERT_EQ(got.size(), expected.size());
      for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-12) << "k=" << k;
    }
  }
}

TEST(Acm, ConstantMapOnThreeByThreeClosedForm) {
  // One channel of ones: M is 1/|window|, G is 1, and the window sizes are 4, 6 and 9.
  const AttentionMask a = attention_mask(Tensor::ones({1, 3, 3}), with_k(3));
  const std::vector<double> expected{9.0 / 64, 3.0 / 32, 9.0 / 64, 3.0 / 32, 1.0 / 16,
                                     3.0 / 32, 9.0 / 64, 3.0 / 32, 9.0 / 64};
  const auto q = testutil::values(a.q);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(q[i], expected[i], 1e-15);
}

TEST(Acm, NeighborhoodOfOneGivesUniformMask) {
  std::mt19937_64 rng(12);
  const AttentionMask a = attention_mask(testutil::random_tensor({3, 5, 5}, rng, 0.1, 2.0), with_k(1));
  for (double v : a.m.data()) EXPECT_NEAR(v, 1.0, 1e-15);
  for (double v : a.q.data()) EXPECT_NEAR(v, 1.0 / 25, 1e-15);
}

TEST(Acm, InvariantsOnRandomMaps) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor local = positive_activation(testutil::random_tensor({2, 5, 4, 6}, rng, -4.0, 4.0));
    const AttentionMask a = attention_mask(local, with_k(3));
    const std::size_t hw = 24;
    for (std::size_t n = 0; n < 2; ++n) {
      double total = 0.0;
      for (std::size_t i = 0; i < hw; ++i) {
        const double q = a.q.data()[n * hw + i];
        EXPECT_GT(q, 0.0);
        total += q;
        double g_peak = 0.0;
        for (std::size_t ch = 0; ch < 5; ++ch) {
          const double g = a.g.data()[(n * 5 + ch) * hw + i];
          const double m = a.m.data()[(n * 5 + ch) * hw + i];
          EXPECT_GT(g, 0.0);
          EXPECT_LE(g, 1.0);
          EXPECT_GT(m, 0.0);
          EXPECT_LE(m, 1.0);
          g_peak = std::max(g_peak, g);
        }
        EXPECT_DOUBLE_EQ(g_peak, 1.0);
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Acm, SoftmaxIsShiftInvariantPerChannel) {
  std::mt19937_64 rng(14);
  const Tensor local = testutil::random_tensor({2, 4, 4}, rng, 0.5, 1.5);
  Tensor shifted = add_scalar(local, 3.0);
  const auto a = testutil::values(neighborhood_softmax(local, 3));
  const auto b = testutil::values(neighborhood_softmax(shifted, 3));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-14);
}

TEST(Acm, MaskRotatesWithTheInput) {
  // Every step is defined by local windows and channel-wise maxima, so it commutes with exact
  // quarter turns of a square map.
  std::mt19937_64 rng(15);
  const Tensor local = testutil::random_tensor({3, 5, 5}, rng, 0.1, 2.0);
  const Tensor q = attention_mask(local, with_k(3)).q;
  for (int k = 1; k < 4; ++k) {
    const Tensor q_rot = attention_mask(rotate90(local, k), with_k(3)).q;
    const auto expected = testutil::values(rotate90(reshape(q, {1, 5, 5}), k));
    const auto got = testutil::values(q_rot);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], expected[i], 1e-14);
  }
}

TEST(Acm, RejectsEvenOrZeroNeighborhood) {
  const Tensor local = Tensor::ones({1, 3, 3});
  EXPECT_THROW(attention_mask(local, with_k(4)), ConfigError);
  EXPECT_THROW(attention_mask(local, with_k(0)), ConfigError);
}

TEST(Acm, NmsRejectsNonPositiveInput) {
  EXPECT_THROW(channel_nms(Tensor({1, 2, 1, 1}, {1.0, 0.0})), NumericError);
  EXPECT_THROW(channel_nms(Tensor({1, 2, 1, 1}, {1.0, -2.0})), NumericError);
}

TEST(Acm, RejectsWrongRank) {
  EXPECT_THROW(attention_mask(Tensor::ones({3, 3}), with_k(3)), ShapeError);
}

TEST(Acm, PositiveActivationIsStrictlyPositive) {
  const Tensor p = positive_activation(Tensor({3}, {-800.0, 0.0, 40.0}));
  EXPECT_GE(p.data()[0], 1e-6);
  EXPECT_NEAR(p.data()[1], std::log(2.0) + 1e-6, 1e-15);
  EXPECT_NEAR(p.data()[2], 40.0 + 1e-6, 1e-12);
}

TEST(Acm, MaskFilesWrite) {
  testutil::TempDir dir("acm");
  const Tensor mask({2, 2}, {0.1, 0.2, 0.3, 0.4});
  write_mask_pgm(dir.path() / "m.pgm", mask);
  write_mask_sidecar(dir.path() / "m.gatn", mask);
  const Tensor img = read_pnm(dir.path() / "m.pgm");
  EXPECT_EQ(img.at({0, 0, 0}), 0.0);
  EXPECT_EQ(img.at({0, 1, 1}), 1.0);
}
