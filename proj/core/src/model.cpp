#include "geomattn/model.hpp"

#include <cmath>
#include <map>

#include "geomattn/checkpoint.hpp"
#include "geomattn/error.hpp"

namespace geomattn {

namespace {

Tensor kaiming_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<double> v(numel(shape));
  for (double& x : v) x = dist(rng);
  Tensor t(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

Tensor normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = dist(rng);
  Tensor t(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

Tensor learnable(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

Conv2d make_conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                 std::mt19937_64& rng) {
  return Conv2d{kaiming_normal({out, in, kernel, kernel}, in * kernel * kernel, rng), stride, kernel / 2};
}

BatchNorm make_bn(std::size_t channels, bool with_shift) {
  BatchNorm bn{learnable(Tensor::ones({channels})), std::nullopt, RunningStats(channels)};
  if (with_shift) bn.beta = learnable(Tensor::zeros({channels}));
  return bn;
}

ConvStage make_stage(std::size_t in, std::size_t out, std::size_t stride, bool relu, std::mt19937_64& rng) {
  return ConvStage{make_conv(in, out, 3, stride, rng), make_bn(out, true), relu};
}

BnNeck make_neck(std::size_t dim, std::size_t classes, std::mt19937_64& rng) {
  return BnNeck{make_bn(dim, false), normal({dim, classes}, 1e-3, rng)};
}

using Visitor = ReidModel::TensorVisitor;

void visit_bn(const std::string& prefix, const BatchNorm& bn, const Visitor& f) {
  f(prefix + "/gamma", bn.gamma, false);
  if (bn.beta) f(prefix + "/beta", *bn.beta, false);
  f(prefix + "/running_mean", bn.stats.mean, true);
  f(prefix + "/running_var", bn.stats.var, true);
  f(prefix + "/running_count", bn.stats.count, true);
}

void visit_stages(const std::string& prefix, const std::vector<ConvStage>& stages, const Visitor& f) {
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string p = prefix + "/stage" + std::to_string(i);
    f(p + "/conv/weight", stages[i].conv.weight, false);
    visit_bn(p + "/bn", stages[i].bn, f);
  }
}

void visit_neck(const std::string& prefix, const BnNeck& neck, const Visitor& f) {
  visit_bn(prefix + "/bnneck", neck.bn, f);
  f(prefix + "/classifier/weight", neck.classifier, false);
}

Tensor run_stages(std::vector<ConvStage>& stages, Tensor h, Mode mode) {
  for (auto& s : stages) h = s.forward(h, mode);
  return h;
}

}  // namespace

void ArchConfig::validate() const {
  if (stage_widths.size() <= kShallowStages) {
    throw ConfigError("stage_widths needs 3 shallow stages plus at least one deep stage");
  }
  if (attention_encoder_widths.size() != kShallowStages) {
    throw ConfigError("attention_encoder_widths needs exactly 3 stride-2 stages");
  }
  for (std::size_t w : stage_widths)
    if (w == 0) throw ConfigError("stage widths must be positive");
  for (std::size_t w : attention_encoder_widths)
    if (w == 0) throw ConfigError("attention encoder widths must be positive");
  if (feature_dim != stage_widths.back()) {
    throw ConfigError("feature_dim must equal the last stage width (" +
                      std::to_string(stage_widths.back()) + ")");
  }
  if (num_identities < 2) throw ConfigError("num_identities must be at least 2");
  if (ssl_head_width == 0) throw ConfigError("ssl_head_width must be positive");
  if (input_size == 0 || input_size % kDownsample != 0) {
    throw ConfigError("input_size must be a positive multiple of 8");
  }
  if (!(cosine_scale > 0.0)) throw ConfigError("cosine_scale must be positive");
  AcmConfig{acm_neighborhood}.validate();
}

Tensor ConvStage::forward(const Tensor& x, Mode mode) {
  Tensor h = bn.forward(conv.forward(x), mode);
  return relu ? geomattn::relu(h) : h;
}

Tensor ResidualBlock::forward(const Tensor& x, Mode mode) {
  Tensor h = geomattn::relu(bn1.forward(conv1.forward(x), mode));
  h = bn2.forward(conv2.forward(h), mode);
  Tensor shortcut = projection ? projection_bn->forward(projection->forward(x), mode) : x;
  return geomattn::relu(add(h, shortcut));
}

BnNeckOutput bnneck_forward(const Tensor& feat, BnNeck& neck, Mode mode) {
  if (feat.rank() != 2 || feat.dim(1) != neck.bn.gamma.dim(0)) {
    throw ShapeError("bnneck: feature shape " + to_string(feat.shape()) + " does not match width " +
                     std::to_string(neck.bn.gamma.dim(0)));
  }
  Tensor feat_bn = neck.bn.forward(feat, mode);
  return {feat_bn, linear(feat_bn, neck.classifier)};
}

Tensor cosine_classifier_forward(const Tensor& feat, const Tensor& weight, double scale) {
  return geomattn::scale(matmul_nt(l2_normalize(feat), l2_normalize(weight)), scale);
}

ReidModel::ReidModel(ArchConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto& sw = config_.stage_widths;
  std::size_t in = 3;
  for (std::size_t i = 0; i < sw.size(); ++i) {
    const bool is_shallow = i < ArchConfig::kShallowStages;
    (is_shallow ? shallow_ : deep_).push_back(make_stage(in, sw[i], is_shallow ? 2 : 1, true, rng));
    in = sw[i];
  }
  in = 3;
  const auto& ew = config_.attention_encoder_widths;
  for (std::size_t i = 0; i < ew.size(); ++i) {
    encoder_.push_back(make_stage(in, ew[i], 2, i + 1 < ew.size(), rng));
    in = ew[i];
  }
  in = config_.shallow_channels();
  for (std::size_t i = ArchConfig::kShallowStages; i < sw.size(); ++i) {
    attention_deep_.push_back(make_stage(in, sw[i], 1, true, rng));
    in = sw[i];
  }
  const std::size_t enc_out = ew.back();
  const std::size_t head = config_.ssl_head_width;
  ResidualBlock first{make_conv(enc_out, head, 3, 2, rng), make_bn(head, true),
                      make_conv(head, head, 3, 1, rng), make_bn(head, true),
                      make_conv(enc_out, head, 1, 2, rng), make_bn(head, true)};
  ResidualBlock second{make_conv(head, head, 3, 1, rng), make_bn(head, true),
                       make_conv(head, head, 3, 1, rng), make_bn(head, true), std::nullopt, std::nullopt};
  ssl_head_.push_back(std::move(first));
  ssl_head_.push_back(std::move(second));
  cosine_weight_ = kaiming_normal({ArchConfig::kRotationClasses, head}, head, rng);
  global_neck_ = make_neck(config_.feature_dim, config_.num_identities, rng);
  attention_neck_ = make_neck(config_.feature_dim, config_.num_identities, rng);
}

Tensor ReidModel::check_input(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != 3) {
    throw ShapeError("model input must be [n,3,H,W], got " + to_string(x.shape()));
  }
  if (x.dim(2) % ArchConfig::kDownsample != 0 || x.dim(3) % ArchConfig::kDownsample != 0) {
    throw ShapeError("model input height and width must be divisible by 8, got " + to_string(x.shape()));
  }
  return x;
}

ReidModel::GlobalResult ReidModel::global_branch(const Tensor& x, Mode mode) {
  Tensor shallow = run_stages(shallow_, check_input(x), mode);
  Tensor deep = run_stages(deep_, shallow, mode);
  Tensor feat = global_avg_pool(deep);
  BnNeckOutput neck = bnneck_forward(feat, global_neck_, mode);
  return {{feat, neck.feat_bn, neck.logits}, shallow};
}

Tensor ReidModel::encode(const Tensor& x, Mode mode) { return run_stages(encoder_, check_input(x), mode); }

AttentionMask ReidModel::attention_map(const Tensor& x, Mode mode, bool keep_intermediates) {
  Tensor local = positive_activation(encode(x, mode));
  return attention_mask(local, AcmConfig{config_.acm_neighborhood, keep_intermediates});
}

ReidModel::AttentionResult ReidModel::attention_branch(const Tensor& x, const Tensor& shallow, Mode mode,
                                                       bool keep_intermediates) {
  AttentionMask mask = attention_map(x, mode, keep_intermediates);
  if (shallow.rank() != 4 || shallow.dim(0) != mask.q.dim(0) || shallow.dim(2) != mask.q.dim(1) ||
      shallow.dim(3) != mask.q.dim(2)) {
    throw ShapeError("attention mask " + to_string(mask.q.shape()) +
                     " does not match shallow features " + to_string(shallow.shape()));
  }
  Tensor weighted = mul_spatial(shallow, mask.q);
  Tensor feat = global_avg_pool(run_stages(attention_deep_, weighted, mode));
  BnNeckOutput neck = bnneck_forward(feat, attention_neck_, mode);
  return {{feat, neck.feat_bn, neck.logits}, std::move(mask)};
}

Tensor ReidModel::ssl_branch(const Tensor& x_rot, Mode mode) {
  Tensor h = encode(x_rot, mode);
  for (auto& block : ssl_head_) h = block.forward(h, mode);
  return cosine_classifier_forward(global_avg_pool(h), cosine_weight_, config_.cosine_scale);
}

Tensor ReidModel::extract_reid_feature(const Tensor& x) {
  NoGradGuard no_grad;
  GlobalResult gb = global_branch(x, Mode::eval);
  if (!config_.attention_branch) return l2_normalize(gb.out.feat_bn);
  AttentionResult ab = attention_branch(x, gb.shallow, Mode::eval);
  return l2_normalize(concat(gb.out.feat_bn, ab.out.feat_bn));
}

void ReidModel::for_each_tensor(const TensorVisitor& f) const {
  visit_stages("global/shallow", shallow_, f);
  visit_stages("global/deep", deep_, f);
  visit_neck("global", global_neck_, f);
  visit_stages("encoder", encoder_, f);
  visit_stages("attention/deep", attention_deep_, f);
  visit_neck("attention", attention_neck_, f);
  for (std::size_t i = 0; i < ssl_head_.size(); ++i) {
    const std::string p = "rotation/block" + std::to_string(i);
    const ResidualBlock& b = ssl_head_[i];
    f(p + "/conv1/weight", b.conv1.weight, false);
    visit_bn(p + "/bn1", b.bn1, f);
    f(p + "/conv2/weight", b.conv2.weight, false);
    visit_bn(p + "/bn2", b.bn2, f);
    if (b.projection) {
      f(p + "/projection/weight", b.projection->weight, false);
      visit_bn(p + "/projection_bn", *b.projection_bn, f);
    }
  }
  f("rotation/cosine/weight", cosine_weight_, false);
}

std::vector<NamedTensor> ReidModel::parameters() const {
  std::vector<NamedTensor> out;
  for_each_tensor([&](const std::string& name, const Tensor& t, bool buffer) {
                if (!buffer) out.push_back({name, t});
              });
  return out;
}

std::vector<NamedTensor> ReidModel::buffers() const {
  std::vector<NamedTensor> out;
  for_each_tensor([&](const std::string& name, const Tensor& t, bool buffer) {
                if (buffer) out.push_back({name, t});
              });
  return out;
}

std::vector<std::string> ReidModel::rotation_head_parameter_names() const {
  std::vector<std::string> names;
  for (const auto& p : parameters())
    if (p.name.rfind("rotation/", 0) == 0) names.push_back(p.name);
  return names;
}

std::vector<NamedTensor> ReidModel::state() const {
  std::vector<NamedTensor> out = arch_to_records(config_);
  for_each_tensor([&](const std::string& name, const Tensor& t, bool) { out.push_back({name, t}); });
  return out;
}

void ReidModel::save(const std::filesystem::path& path) const { write_container(path, state()); }

ReidModel ReidModel::load(const std::filesystem::path& path) { return from_state(read_container(path)); }

ReidModel ReidModel::from_state(const std::vector<NamedTensor>& state) {
  ReidModel model(arch_from_records(state), 0);
  std::map<std::string, const Tensor*> by_name;
  for (const auto& rec : state) by_name[rec.name] = &rec.tensor;
  for (const auto& [name, t] : model.state()) {
    if (name.rfind("meta/", 0) == 0) continue;
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ShapeError("checkpoint is missing tensor '" + name + "'");
    if (it->second->shape() != t.shape()) {
      throw ShapeError("checkpoint tensor '" + name + "' has shape " + to_string(it->second->shape()) +
                       ", model expects " + to_string(t.shape()));
    }
    Tensor target = t;
    auto dst = target.mutable_data();
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return model;
}

namespace {

Tensor record(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

std::vector<double> as_doubles(const std::vector<std::size_t>& v) { return {v.begin(), v.end()}; }

std::vector<std::size_t> as_sizes(const Tensor& t) {
  std::vector<std::size_t> out;
  for (double v : t.data()) out.push_back(static_cast<std::size_t>(v));
  return out;
}

}  // namespace

std::vector<NamedTensor> arch_to_records(const ArchConfig& c) {
  return {
      {"meta/input_size", record({static_cast<double>(c.input_size)})},
      {"meta/stage_widths", record(as_doubles(c.stage_widths))},
      {"meta/attention_encoder_widths", record(as_doubles(c.attention_encoder_widths))},
      {"meta/ssl_head_width", record({static_cast<double>(c.ssl_head_width)})},
      {"meta/feature_dim", record({static_cast<double>(c.feature_dim)})},
      {"meta/num_identities", record({static_cast<double>(c.num_identities)})},
      {"meta/cosine_scale", record({c.cosine_scale})},
      {"meta/acm_neighborhood", record({static_cast<double>(c.acm_neighborhood)})},
      {"meta/attention_branch", record({c.attention_branch ? 1.0 : 0.0})},
  };
}

ArchConfig arch_from_records(const std::vector<NamedTensor>& records) {
  std::map<std::string, Tensor> meta;
  for (const auto& r : records)
    if (r.name.rfind("meta/", 0) == 0) meta[r.name.substr(5)] = r.tensor;
  auto get = [&](const std::string& key) -> const Tensor& {
    auto it = meta.find(key);
    if (it == meta.end()) throw DataError("checkpoint lacks architecture record meta/" + key);
    return it->second;
  };
  ArchConfig c;
  c.input_size = static_cast<std::size_t>(get("input_size").data()[0]);
  c.stage_widths = as_sizes(get("stage_widths"));
  c.attention_encoder_widths = as_sizes(get("attention_encoder_widths"));
  c.ssl_head_width = static_cast<std::size_t>(get("ssl_head_width").data()[0]);
  c.feature_dim = static_cast<std::size_t>(get("feature_dim").data()[0]);
  c.num_identities = static_cast<std::size_t>(get("num_identities").data()[0]);
  c.cosine_scale = get("cosine_scale").data()[0];
  c.acm_neighborhood = static_cast<std::size_t>(get("acm_neighborhood").data()[0]);
  c.attention_branch = get("attention_branch").data()[0] != 0.0;
  return c;
}

}  // namespace geomattn
