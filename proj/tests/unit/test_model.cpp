#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "geomattn/error.hpp"
#include "geomattn/grad_suite.hpp"
#include "geomattn/model.hpp"
#include "test_util.hpp"

using namespace geomattn;

namespace {

ArchConfig default_arch(std::size_t ids = 5) {
  ArchConfig a;
  a.num_identities = ids;
  return a;
}

double norm_of_row(const Tensor& t, std::size_t row) {
  const std::size_t d = t.dim(1);
  double s = 0.0;
  for (std::size_t j = 0; j < d; ++j) s += t.data()[row * d + j] * t.data()[row * d + j];
  return std::sqrt(s);
}

}  // namespace

TEST(Model, BranchShapes) {
  ReidModel model(default_arch(), 1);
  std::mt19937_64 rng(1);
  const Tensor x = testutil::random_tensor({2, 3, 64, 64}, rng, 0.0, 1.0);
  const auto gb = model.global_branch(x, Mode::train);
  EXPECT_EQ(gb.out.feat_triplet.shape(), (Shape{2, 128}));
  EXPECT_EQ(gb.out.feat_bn.shape(), (Shape{2, 128}));
  EXPECT_EQ(gb.out.logits.shape(), (Shape{2, 5}));
  EXPECT_EQ(gb.shallow.shape(), (Shape{2, 64, 8, 8}));
  const auto ab = model.attention_branch(x, gb.shallow, Mode::train);
  EXPECT_EQ(ab.out.feat_triplet.shape(), (Shape{2, 128}));
  EXPECT_EQ(ab.out.logits.shape(), (Shape{2, 5}));
  EXPECT_EQ(ab.mask.q.shape(), (Shape{2, 8, 8}));
  EXPECT_EQ(model.ssl_branch(x, Mode::train).shape(), (Shape{2, 4}));
}

TEST(Model, RejectsWrongInputSize) {
  ReidModel model(tiny_arch(), 1);
  EXPECT_THROW(model.global_branch(Tensor::zeros({2, 3, 17, 16}), Mode::train), ShapeError);
  EXPECT_THROW(model.global_branch(Tensor::zeros({2, 1, 16, 16}), Mode::train), ShapeError);
}

TEST(Model, NeckHasNoShiftAndClassifierHasNoBias) {
  ReidModel model(default_arch(), 1);
  for (const auto& p : model.parameters()) {
    const bool neck = p.name.find("bnneck") != std::string::npos;
    if (neck) EXPECT_EQ(p.name.find("/beta"), std::string::npos) << p.name;
    EXPECT_EQ(p.name.find("bias"), std::string::npos) << p.name;
  }
  std::size_t classifiers = 0;
  for (const auto& p : model.parameters()) classifiers += p.name.find("classifier/weight") != std::string::npos;
  EXPECT_EQ(classifiers, 2u);
}

TEST(Model, RotationHeadParametersAreNamed) {
  ReidModel model(tiny_arch(), 1);
  const auto names = model.rotation_head_parameter_names();
  EXPECT_FALSE(names.empty());
  EXPECT_NE(std::find(names.begin(), names.end(), "rotation/cosine/weight"), names.end());
}

TEST(Model, CosineClassifierIgnoresFeatureAndWeightScale) {
  std::mt19937_64 rng(2);
  const Tensor f = testutil::random_tensor({3, 6}, rng);
  const Tensor w = testutil::random_tensor({4, 6}, rng);
  const auto base = testutil::values(cosine_classifier_forward(f, w, 16.0));
  const auto scaled = testutil::values(cosine_classifier_forward(scale(f, 7.5), scale(w, 0.01), 16.0));
  for (std::size_t i = 0; i < base.size(); ++i) {
    EXPECT_NEAR(base[i], scaled[i], 1e-12);
    EXPECT_LE(std::abs(base[i]), 16.0 + 1e-12);
  }
  // Aligned feature and weight give exactly the scale.
  const Tensor e({1, 2}, {3.0, 4.0});
  EXPECT_NEAR(cosine_classifier_forward(e, Tensor({1, 2}, {0.6, 0.8}), 16.0).item(), 16.0, 1e-12);
}

TEST(Model, ReidFeaturesAreUnitNorm) {
  ReidModel model(tiny_arch(3), 3);
  std::mt19937_64 rng(3);
  const Tensor x = testutil::random_tensor({4, 3, 16, 16}, rng, 0.0, 1.0);
  model.global_branch(x, Mode::train);
  model.attention_branch(x, model.global_branch(x, Mode::train).shallow, Mode::train);
  const Tensor f = model.extract_reid_feature(x);
  EXPECT_EQ(f.shape(), (Shape{4, 16}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(norm_of_row(f, i), 1.0, 1e-12);
  EXPECT_FALSE(f.requires_grad());
}

TEST(Model, EvalBeforeStatisticsThrows) {
  ReidModel model(tiny_arch(), 1);
  EXPECT_THROW(model.extract_reid_feature(Tensor::zeros({1, 3, 16, 16})), Error);
}

TEST(Model, SameSeedSameWeights) {
  ReidModel a(tiny_arch(), 9), b(tiny_arch(), 9), c(tiny_arch(), 10);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(testutil::values(pa[i].tensor), testutil::values(pb[i].tensor)) << pa[i].name;
    any_diff = any_diff || testutil::values(pa[i].tensor) != testutil::values(pc[i].tensor);
  }
  EXPECT_TRUE(any_diff);
}

TEST(Model, SaveLoadRoundTripIsExact) {
  testutil::TempDir dir("model");
  ArchConfig arch = tiny_arch(3);
  arch.acm_neighborhood = 1;
  ReidModel model(arch, 4);
  std::mt19937_64 rng(4);
  const Tensor x = testutil::random_tensor({4, 3, 16, 16}, rng, 0.0, 1.0);
  model.attention_branch(x, model.global_branch(x, Mode::train).shallow, Mode::train);
  model.save(dir.path() / "m.ckpt");
  ReidModel back = ReidModel::load(dir.path() / "m.ckpt");
  EXPECT_EQ(back.config().acm_neighborhood, 1u);
  EXPECT_EQ(back.config().num_identities, 3u);
  const auto sa = model.state(), sb = back.state();
  ASSERT_EQ(sa.size(), sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    EXPECT_EQ(sa[i].name, sb[i].name);
    EXPECT_EQ(testutil::values(sa[i].tensor), testutil::values(sb[i].tensor)) << sa[i].name;
  }
  EXPECT_EQ(testutil::values(model.extract_reid_feature(x)), testutil::values(back.extract_reid_feature(x)));
}

TEST(Model, LoadDetectsMissingAndMismatchedTensors) {
  ReidModel model(tiny_arch(), 1);
  auto state = model.state();
  auto missing = state;
  missing.erase(std::find_if(missing.begin(), missing.end(),
                             [](const NamedTensor& t) { return t.name.find("classifier") != std::string::npos; }));
  EXPECT_THROW(ReidModel::from_state(missing), ShapeError);

  auto reshaped = state;
  for (auto& t : reshaped) {
    if (t.name.find("classifier") != std::string::npos) {
      t.tensor = Tensor::zeros({t.tensor.numel() + 1});
      break;
    }
  }
  EXPECT_THROW(ReidModel::from_state(reshaped), ShapeError);

  auto no_meta = state;
  std::erase_if(no_meta, [](const NamedTensor& t) { return t.name == "meta/feature_dim"; });
  EXPECT_THROW(ReidModel::from_state(no_meta), DataError);
}

TEST(Model, ArchValidation) {
  ArchConfig a = tiny_arch();
  a.acm_neighborhood = 2;
  EXPECT_THROW(a.validate(), ConfigError);
  a = tiny_arch();
  a.num_identities = 0;
  EXPECT_THROW(a.validate(), ConfigError);
  a = tiny_arch();
  a.input_size = 20;
  EXPECT_THROW(a.validate(), ConfigError);
}

TEST(Model, WithoutAttentionBranchFeatureIsGlobalOnly) {
  ArchConfig a = tiny_arch();
  a.attention_branch = false;
  ReidModel model(a, 1);
  std::mt19937_64 rng(5);
  const Tensor x = testutil::random_tensor({2, 3, 16, 16}, rng, 0.0, 1.0);
  model.global_branch(x, Mode::train);
  EXPECT_EQ(model.extract_reid_feature(x).shape(), (Shape{2, 8}));
}
