#include "geomattn/grad_suite.hpp"

#include <random>

#include "geomattn/acm.hpp"
#include "geomattn/data.hpp"
#include "geomattn/image.hpp"
#include "geomattn/losses.hpp"
#include "geomattn/ops.hpp"

namespace geomattn {

namespace {

class Inputs {
 public:
  explicit Inputs(std::uint64_t seed) : rng_(seed) {}

  Tensor normal(Shape shape, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(numel(shape));
    for (double& x : v) x = dist(rng_);
    return Tensor(std::move(shape), std::move(v)).set_requires_grad();
  }

  Tensor uniform(Shape shape, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(numel(shape));
    for (double& x : v) x = dist(rng_);
    return Tensor(std::move(shape), std::move(v)).set_requires_grad();
  }

  /// Fixed random projection that turns a tensor into a scalar with a dense upstream gradient.
  Tensor probe(const Shape& shape) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> v(numel(shape));
    for (double& x : v) x = dist(rng_);
    return Tensor(shape, std::move(v));
  }

 private:
  std::mt19937_64 rng_;
};

Tensor project(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

}  // namespace

ArchConfig tiny_arch(std::size_t num_identities) {
  ArchConfig a;
  a.input_size = 16;
  a.stage_widths = {4, 4, 6, 8, 8};
  a.attention_encoder_widths = {4, 4, 6};
  a.ssl_head_width = 8;
  a.feature_dim = 8;
  a.num_identities = num_identities;
  a.acm_neighborhood = 3;
  return a;
}

std::vector<GradSuiteEntry> run_grad_suite(std::uint64_t seed, const GradCheckOptions& options) {
  std::vector<GradSuiteEntry> out;
  Inputs in(seed);
  auto check = [&](const std::string& name, const std::function<Tensor()>& loss, std::vector<NamedTensor> params) {
    out.push_back({name, grad_check(loss, std::move(params), options)});
  };
  auto unary = [&](const std::string& name, Tensor x, const std::function<Tensor(const Tensor&)>& f) {
    const Tensor w = in.probe(f(x.detach()).shape());
    check(name, [=] { return project(f(x), w); }, {{"x", x}});
  };
  auto binary = [&](const std::string& name, Tensor a, Tensor b,
                    const std::function<Tensor(const Tensor&, const Tensor&)>& f) {
    const Tensor w = in.probe(f(a.detach(), b.detach()).shape());
    check(name, [=] { return project(f(a, b), w); }, {{"a", a}, {"b", b}});
  };

  binary("add", in.normal({3, 4}), in.normal({3, 4}), [](auto& a, auto& b) { return add(a, b); });
  binary("sub", in.normal({3, 4}), in.normal({3, 4}), [](auto& a, auto& b) { return sub(a, b); });
  binary("mul", in.normal({3, 4}), in.normal({3, 4}), [](auto& a, auto& b) { return mul(a, b); });
  unary("add_scalar", in.normal({5}), [](auto& x) { return add_scalar(x, 0.7); });
  unary("scale", in.normal({5}), [](auto& x) { return scale(x, -1.3); });
  unary("neg", in.normal({5}), [](auto& x) { return neg(x); });
  unary("exp", in.normal({2, 3}), [](auto& x) { return exp(x); });
  unary("log", in.uniform({2, 3}, 0.5, 2.0), [](auto& x) { return log(x); });
  unary("relu", in.normal({4, 4}), [](auto& x) { return relu(x); });
  unary("softplus", in.normal({4, 4}, 3.0), [](auto& x) { return softplus(x); });
  unary("sum", in.normal({3, 2}), [](auto& x) { return sum(x); });
  unary("mean", in.normal({3, 2}), [](auto& x) { return mean(x); });
  unary("reshape", in.normal({2, 6}), [](auto& x) { return reshape(x, {3, 4}); });
  binary("matmul", in.normal({3, 4}), in.normal({4, 5}), [](auto& a, auto& b) { return matmul(a, b); });
  binary("matmul_nt", in.normal({3, 4}), in.normal({5, 4}), [](auto& a, auto& b) { return matmul_nt(a, b); });
  {
    Tensor x = in.normal({3, 4}), w = in.normal({4, 2}), b = in.normal({2});
    const Tensor p = in.probe({3, 2});
    check("linear", [=] { return project(linear(x, w, b), p); }, {{"x", x}, {"weight", w}, {"bias", b}});
  }
  binary("conv2d_stride1_pad1", in.normal({2, 3, 5, 5}), in.normal({4, 3, 3, 3}),
         [](auto& x, auto& k) { return conv2d(x, k, 1, 1); });
  binary("conv2d_stride2_pad1", in.normal({2, 2, 6, 6}), in.normal({3, 2, 3, 3}),
         [](auto& x, auto& k) { return conv2d(x, k, 2, 1); });
  binary("conv2d_1x1_stride2", in.normal({2, 3, 4, 4}), in.normal({2, 3, 1, 1}),
         [](auto& x, auto& k) { return conv2d(x, k, 2, 0); });
  {
    Tensor x = in.normal({4, 3, 2, 2}), g = in.uniform({3}, 0.5, 1.5), b = in.normal({3});
    const Tensor p = in.probe({4, 3, 2, 2});
    check("batch_norm_4d",
          [=] {
            RunningStats stats(3);
            return project(batch_norm(x, g, b, stats, Mode::train), p);
          },
          {{"x", x}, {"gamma", g}, {"beta", b}});
  }
  {
    Tensor x = in.normal({5, 3}), g = in.uniform({3}, 0.5, 1.5);
    const Tensor p = in.probe({5, 3});
    check("batch_norm_2d_shift_free",
          [=] {
            RunningStats stats(3);
            return project(batch_norm(x, g, std::nullopt, stats, Mode::train), p);
          },
          {{"x", x}, {"gamma", g}});
  }
  unary("global_avg_pool", in.normal({2, 3, 3, 3}), [](auto& x) { return global_avg_pool(x); });
  binary("concat", in.normal({3, 2}), in.normal({3, 4}), [](auto& a, auto& b) { return concat(a, b); });
  binary("concat_rows", in.normal({2, 3}), in.normal({4, 3}), [](auto& a, auto& b) { return concat_rows(a, b); });
  unary("slice_rows", in.normal({5, 3}), [](auto& x) { return slice_rows(x, 1, 4); });
  unary("l2_normalize", in.normal({4, 5}), [](auto& x) { return l2_normalize(x); });
  binary("mul_spatial", in.normal({2, 3, 3, 3}), in.normal({2, 3, 3}),
         [](auto& x, auto& m) { return mul_spatial(x, m); });

  unary("positive_activation", in.normal({2, 3, 4}, 2.0), [](auto& x) { return positive_activation(x); });
  unary("neighborhood_softmax_k1", in.normal({2, 4, 4}), [](auto& x) { return neighborhood_softmax(x, 1); });
  unary("neighborhood_softmax_k3", in.normal({2, 3, 5, 4}), [](auto& x) { return neighborhood_softmax(x, 3); });
  unary("neighborhood_softmax_k5", in.normal({3, 5, 5}), [](auto& x) { return neighborhood_softmax(x, 5); });
  unary("channel_nms", in.uniform({2, 3, 3, 3}, 0.1, 2.0), [](auto& x) { return channel_nms(x); });
  unary("channel_max", in.normal({2, 4, 3, 3}), [](auto& x) { return channel_max(x); });
  unary("spatial_normalize", in.uniform({2, 3, 3}, 0.1, 2.0), [](auto& x) { return spatial_normalize(x); });
  {
    AcmConfig cfg;
    cfg.neighborhood = 3;
    unary("attention_mask", in.normal({2, 3, 4, 4}),
          [cfg](auto& x) { return attention_mask(positive_activation(x), cfg).q; });
  }
  binary("cosine_classifier", in.normal({3, 5}), in.normal({4, 5}),
         [](auto& f, auto& w) { return cosine_classifier_forward(f, w, 16.0); });
  {
    Tensor f = in.normal({6, 4});
    const std::vector<int> labels{0, 0, 1, 1, 2, 2};
    check("triplet_hinges", [=] { return sum(triplet_hinges(f, labels, 0.5)); }, {{"features", f}});
  }
  {
    Tensor z = in.normal({4, 5});
    const std::vector<int> labels{0, 3, 1, 4};
    check("smoothed_ce", [=] { return smoothed_ce(z, labels, 0.1); }, {{"logits", z}});
  }
  {
    Tensor z = in.normal({4, 4}, 3.0);
    const std::vector<int> labels{0, 1, 2, 3};
    check("rotation_loss", [=] { return rotation_loss(z, labels); }, {{"logits", z}});
  }

  // Overall weighted loss of the full three-branch model on a 4-image batch.
  {
    ReidModel model(tiny_arch(2), seed);
    std::vector<double> pixels(4 * 3 * 16 * 16);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::mt19937_64 rng(seed + 29);
    for (double& v : pixels) v = unit(rng);
    const Tensor x({4, 3, 16, 16}, pixels);
    const std::vector<int> labels{0, 0, 1, 1};
    std::vector<Tensor> rotated;
    std::vector<int> rot_labels;
    for (std::size_t i = 0; i < 4; ++i) {
      const Tensor img = slice_rows(x, i, i + 1);
      const int k = static_cast<int>(i);
      rotated.push_back(rotate_image(reshape(img, {3, 16, 16}), k));
      rot_labels.push_back(k);
    }
    const Tensor x_rot = stack_images(rotated);
    auto loss = [model, x, x_rot, labels, rot_labels]() mutable {
      ReidModel::GlobalResult g = model.global_branch(x, Mode::train);
      ReidModel::AttentionResult a = model.attention_branch(x, g.shallow, Mode::train);
      const Tensor rot = model.ssl_branch(x_rot, Mode::train);
      return overall_loss(g.out, a.out, rot, labels, rot_labels, LossWeights{}).total;
    };
    check("overall_loss", loss, model.parameters());
  }
  return out;
}

}  // namespace geomattn
