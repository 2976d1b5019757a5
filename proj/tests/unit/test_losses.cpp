#include <gtest/gtest.h>

#include <cmath>

#include "geomattn/error.hpp"
#include "geomattn/losses.hpp"
#include "test_util.hpp"

using namespace geomattn;

namespace {

double dist(const Tensor& f, std::size_t i, std::size_t j) {
  const std::size_t d = f.dim(1);
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    const double diff = f.data()[i * d + k] - f.data()[j * d + k];
    s += diff * diff;
  }
  return std::sqrt(s);
}

// Largest hinge over every (positive, negative) pair of each anchor. The hinge is monotone in
// d(a,p) - d(a,n), so this equals the batch-hard value without ever forming the hardest pair.
std::vector<double> all_triplets_oracle(const Tensor& f, const std::vector<int>& labels, double margin) {
  const std::size_t n = labels.size();
  std::vector<double> out(n, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    double worst = -1.0;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (std::size_t q = 0; q < n; ++q) {
        if (labels[q] == labels[a]) continue;
        worst = std::max(worst, std::max(0.0, margin + dist(f, a, p) - dist(f, a, q)));
      }
    }
    out[a] = worst;
  }
  return out;
}

double smoothed_ce_oracle(const std::vector<double>& logits, std::size_t c, const std::vector<int>& labels,
                          double eps) {
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(logits[i * c + j]);
    for (std::size_t j = 0; j < c; ++j) {
      const double target = (static_cast<int>(j) == labels[i] ? 1.0 - eps : 0.0) + eps / c;
      total -= target * (logits[i * c + j] - std::log(z));
    }
  }
  return total / labels.size();
}

}  // namespace

TEST(Triplet, MatchesAllTripletsOracle) {
  std::mt19937_64 rng(21);
  const std::vector<int> labels{0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3};
  for (int trial = 0; trial < 25; ++trial) {
    const Tensor f = testutil::random_tensor({12, 5}, rng);
    const double margin = trial % 2 ? 0.5 : 0.0;
    const auto expected = all_triplets_oracle(f, labels, margin);
    const auto got = testutil::values(triplet_hinges(f, labels, margin));
    for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(got[i], expected[i], 1e-12);
    double mean = 0.0;
    for (double v : expected) mean += v / 12;
    EXPECT_NEAR(hard_triplet_loss(f, labels, margin).item(), mean, 1e-12);
  }
}

TEST(Triplet, HandComputedCases) {
  // On a line: anchor 0, positive 1, negatives 5 and 6.
  const Tensor easy({4, 1}, {0.0, 1.0, 5.0, 6.0});
  const std::vector<int> labels{0, 0, 1, 1};
  EXPECT_NEAR(triplet_hinges(easy, labels, 0.5).data()[0], 0.0, 1e-15);  // [0.5 + 1 - 5]+
  // Anchor 0, positive at 2, nearest negative at 1.5.
  const Tensor hard({4, 1}, {0.0, 2.0, 1.5, 9.0});
  EXPECT_NEAR(triplet_hinges(hard, labels, 0.5).data()[0], 1.0, 1e-15);  // [0.5 + 2 - 1.5]+
}

TEST(Triplet, NonNegativeAndZeroWhenWellSeparated) {
  std::vector<double> v;
  for (int id = 0; id < 3; ++id)
    for (int k = 0; k < 2; ++k) v.insert(v.end(), {100.0 * id + 0.01 * k, 0.0});
  const Tensor f({6, 2}, v);
  const std::vector<int> labels{0, 0, 1, 1, 2, 2};
  const Tensor hinges = triplet_hinges(f, labels, 0.5);
  for (double h : hinges.data()) EXPECT_EQ(h, 0.0);
}

TEST(Triplet, RejectsAnchorsWithoutPositivesOrNegatives) {
  const Tensor f = Tensor::zeros({3, 2});
  EXPECT_THROW(hard_triplet_loss(f, std::vector<int>{0, 0, 1}, 0.5), DataError);
  EXPECT_THROW(hard_triplet_loss(f, std::vector<int>{0, 0, 0}, 0.5), DataError);
  EXPECT_THROW(hard_triplet_loss(f, std::vector<int>{0, 0}, 0.5), ShapeError);
}

TEST(SmoothedCe, UniformLogitsGiveLogC) {
  const Tensor logits = Tensor::zeros({3, 4});
  EXPECT_NEAR(smoothed_ce(logits, std::vector<int>{0, 1, 3}, 0.1).item(), std::log(4.0), 1e-14);
  EXPECT_NEAR(smoothed_ce(logits, std::vector<int>{2, 2, 2}, 0.0).item(), std::log(4.0), 1e-14);
}

TEST(SmoothedCe, MatchesOracle) {
  std::mt19937_64 rng(22);
  const std::vector<int> labels{0, 4, 2, 2, 1};
  for (double eps : {0.0, 0.1, 0.5}) {
    const Tensor logits = testutil::random_tensor({5, 5}, rng, -6.0, 6.0);
    EXPECT_NEAR(smoothed_ce(logits, labels, eps).item(), smoothed_ce_oracle(testutil::values(logits), 5, labels, eps),
                1e-12);
  }
}

TEST(SmoothedCe, StableForHugeLogits) {
  const Tensor logits({1, 3}, {1000.0, -1000.0, 0.0});
  const double v = smoothed_ce(logits, std::vector<int>{0}, 0.0).item();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(SmoothedCe, RejectsBadInput) {
  EXPECT_THROW(smoothed_ce(Tensor::zeros({2, 3}), std::vector<int>{0, 3}), DataError);
  EXPECT_THROW(smoothed_ce(Tensor::zeros({2, 3}), std::vector<int>{0}), ShapeError);
  EXPECT_THROW(smoothed_ce(Tensor::zeros({2, 3}), std::vector<int>{0, 1}, 1.0), ConfigError);
  EXPECT_THROW(smoothed_ce(Tensor::zeros({2, 1}), std::vector<int>{0, 0}), ShapeError);
}

TEST(RotationLoss, ScaledCosineBoundsTheLoss) {
  // Unit-cosine true class and orthogonal others at scale 16: log(1 + 3 e^-16).
  const Tensor logits({1, 4}, {16.0, 0.0, 0.0, 0.0});
  const double v = rotation_loss(logits, std::vector<int>{0}).item();
  EXPECT_NEAR(v, std::log1p(3.0 * std::exp(-16.0)), 1e-15);
  EXPECT_NEAR(v, 3.4e-7, 0.05e-7);
  EXPECT_NEAR(rotation_loss(Tensor::zeros({2, 4}), std::vector<int>{1, 3}).item(), std::log(4.0), 1e-14);
  EXPECT_THROW(rotation_loss(Tensor::zeros({2, 3}), std::vector<int>{0, 1}), ShapeError);
}

TEST(WeightedTotal, SumsWeightedTermsAndLogsUnweighted) {
  LossComponents c;
  c.tri_gb = Tensor::scalar(1.0);
  c.sce_gb = Tensor::scalar(2.0);
  c.tri_ab = Tensor::scalar(3.0);
  c.sce_ab = Tensor::scalar(4.0);
  c.rot = Tensor::scalar(5.0);
  LossWeights w;
  const LossBreakdown b = weighted_total(c, w);
  EXPECT_NEAR(b.total.item(), 0.5 * (1 + 2 + 3 + 4) + 5.0, 1e-15);
  EXPECT_EQ(b.tri_ab, 3.0);
  EXPECT_EQ(b.rot, 5.0);
  w.rot = 0.0;
  const LossBreakdown z = weighted_total(c, w);
  EXPECT_NEAR(z.total.item(), 5.0, 1e-15);
  EXPECT_EQ(z.rot, 5.0);
}

TEST(WeightedTotal, ZeroWeightTermsLeaveNoGradient) {
  Tensor a = Tensor::scalar(1.5).set_requires_grad();
  Tensor b = Tensor::scalar(2.5).set_requires_grad();
  LossComponents c;
  c.tri_gb = mul(a, a);
  c.rot = mul(b, b);
  LossWeights w;
  w.sce_gb = w.tri_ab = w.sce_ab = 0.0;
  w.rot = 0.0;
  weighted_total(c, w).total.backward();
  EXPECT_TRUE(a.has_grad());
  EXPECT_FALSE(b.has_grad());
}

TEST(WeightedTotal, RejectsNegativeWeightsAndNonFiniteTotals) {
  LossWeights w;
  w.tri_gb = -1.0;
  EXPECT_THROW(w.validate(), ConfigError);
  LossComponents c;
  c.tri_gb = Tensor::scalar(std::numeric_limits<double>::infinity());
  EXPECT_THROW(weighted_total(c, LossWeights{}), NumericError);
}

TEST(OverallLoss, MatchesComponentsComputedSeparately) {
  std::mt19937_64 rng(23);
  const std::vector<int> labels{0, 0, 1, 1};
  const std::vector<int> rot{0, 1, 2, 3};
  BranchOutput g{testutil::random_tensor({4, 3}, rng), testutil::random_tensor({4, 3}, rng),
                 testutil::random_tensor({4, 2}, rng)};
  BranchOutput a{testutil::random_tensor({4, 3}, rng), testutil::random_tensor({4, 3}, rng),
                 testutil::random_tensor({4, 2}, rng)};
  const Tensor r = testutil::random_tensor({4, 4}, rng);
  const LossWeights w{0.1, 0.2, 0.3, 0.4, 0.7};
  const LossBreakdown b = overall_loss(g, a, r, labels, rot, w, LossOptions{0.3, 0.1, false});
  const double expected = 0.1 * hard_triplet_loss(g.feat_triplet, labels, 0.3).item() +
                          0.2 * smoothed_ce(g.logits, labels, 0.1).item() +
                          0.3 * hard_triplet_loss(a.feat_triplet, labels, 0.3).item() +
                          0.4 * smoothed_ce(a.logits, labels, 0.1).item() + 0.7 * rotation_loss(r, rot).item();
  EXPECT_NEAR(b.total.item(), expected, 1e-12);
}

TEST(OverallLoss, MixedPoolStillZeroForSeparatedBranches) {
  // Both branches embed identical well-separated clusters, so even the mixed pool has no violation.
  std::vector<double> v;
  for (int id = 0; id < 2; ++id)
    for (int k = 0; k < 2; ++k) v.insert(v.end(), {50.0 * id + 0.001 * k, 1.0});
  const Tensor f({4, 2}, v);
  const std::vector<int> labels{0, 0, 1, 1};
  BranchOutput g{f, f, Tensor::zeros({4, 2})};
  BranchOutput a{f, f, Tensor::zeros({4, 2})};
  LossWeights w{1.0, 0.0, 1.0, 0.0, 0.0};
  const LossBreakdown b = overall_loss(g, a, std::nullopt, labels, {}, w, LossOptions{0.5, 0.1, true});
  EXPECT_EQ(b.tri_gb, 0.0);
  EXPECT_EQ(b.tri_ab, 0.0);
}
