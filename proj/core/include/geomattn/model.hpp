#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "geomattn/acm.hpp"
#include "geomattn/ops.hpp"
#include "geomattn/tensor.hpp"

namespace geomattn {

struct ArchConfig {
  std::size_t input_size = 64;
  /// Three stride-2 stages (shallow part), then stride-1 stages (deep part).
  std::vector<std::size_t> stage_widths{16, 32, 64, 128, 128};
  /// Three stride-2 stages; the last one has no relu and feeds the ACM and the rotation head.
  std::vector<std::size_t> attention_encoder_widths{16, 32, 64};
  std::size_t ssl_head_width = 128;
  std::size_t feature_dim = 128;
  std::size_t num_identities = 0;
  double cosine_scale = 16.0;
  std::size_t acm_neighborhood = 7;
  /// When false the attentional branch is neither trained nor used for retrieval features.
  bool attention_branch = true;

  static constexpr std::size_t kShallowStages = 3;
  static constexpr std::size_t kDownsample = 8;
  static constexpr std::size_t kRotationClasses = 4;

  std::size_t shallow_channels() const { return stage_widths[kShallowStages - 1]; }
  std::size_t reid_feature_dim() const { return attention_branch ? 2 * feature_dim : feature_dim; }
  void validate() const;
};

struct Conv2d {
  Tensor weight;
  std::size_t stride = 1;
  std::size_t pad = 0;

  Tensor forward(const Tensor& x) const { return conv2d(x, weight, stride, pad); }
};

struct BatchNorm {
  Tensor gamma;
  std::optional<Tensor> beta;
  RunningStats stats;

  Tensor forward(const Tensor& x, Mode mode) { return batch_norm(x, gamma, beta, stats, mode); }
};

/// conv3x3 -> BN -> (relu)
struct ConvStage {
  Conv2d conv;
  BatchNorm bn;
  bool relu = true;

  Tensor forward(const Tensor& x, Mode mode);
};

/// conv-BN-relu-conv-BN plus identity (or 1x1 projection when shapes differ), relu after the sum.
struct ResidualBlock {
  Conv2d conv1;
  BatchNorm bn1;
  Conv2d conv2;
  BatchNorm bn2;
  std::optional<Conv2d> projection;
  std::optional<BatchNorm> projection_bn;

  Tensor forward(const Tensor& x, Mode mode);
};

/// Shift-free BN between pooled features and a bias-free identity classifier.
struct BnNeck {
  BatchNorm bn;
  Tensor classifier;  // [d, num_identities]
};

struct BranchOutput {
  Tensor feat_triplet;  // pre-BN, [n,d]
  Tensor feat_bn;       // post-BN, [n,d]
  Tensor logits;        // [n,num_identities]
};

struct BnNeckOutput {
  Tensor feat_bn;
  Tensor logits;
};

BnNeckOutput bnneck_forward(const Tensor& feat, BnNeck& neck, Mode mode);

/// logits[i,j] = scale * cos(feat_i, weight_j) with eps-guarded norms. weight is [classes,d].
Tensor cosine_classifier_forward(const Tensor& feat, const Tensor& weight, double scale);

/// Global branch, attentional branch and rotation branch sharing one attention encoder.
class ReidModel {
 public:
  ReidModel(ArchConfig config, std::uint64_t seed);

  const ArchConfig& config() const { return config_; }

  struct GlobalResult {
    BranchOutput out;
    Tensor shallow;  // [n, shallow_channels, H/8, W/8]
  };
  GlobalResult global_branch(const Tensor& x, Mode mode);

  struct AttentionResult {
    BranchOutput out;
    AttentionMask mask;
  };
  AttentionResult attention_branch(const Tensor& x, const Tensor& shallow, Mode mode,
                                   bool keep_intermediates = false);

  /// Encoder + ACM only; returns the [n,H/8,W/8] attention mask.
  AttentionMask attention_map(const Tensor& x, Mode mode, bool keep_intermediates = false);

  /// Rotation logits [n,4] for already-rotated inputs.
  Tensor ssl_branch(const Tensor& x_rot, Mode mode);

  /// Eval-mode, gradient-free retrieval feature: l2_normalize(concat(global, attentional)).
  Tensor extract_reid_feature(const Tensor& x);

  /// Learnable parameters, in a fixed order.
  std::vector<NamedTensor> parameters() const;
  /// Running batch-norm statistics ("/running_mean", "/running_var", "/running_count").
  std::vector<NamedTensor> buffers() const;
  /// Parameters, buffers and "meta/" architecture records: the checkpoint payload.
  std::vector<NamedTensor> state() const;

  void save(const std::filesystem::path& path) const;
  static ReidModel load(const std::filesystem::path& path);
  static ReidModel from_state(const std::vector<NamedTensor>& state);

  /// Names of the parameters that only the rotation head uses.
  std::vector<std::string> rotation_head_parameter_names() const;

  using TensorVisitor = std::function<void(const std::string& name, const Tensor& t, bool buffer)>;
  void for_each_tensor(const TensorVisitor& f) const;

 private:
  Tensor encode(const Tensor& x, Mode mode);
  Tensor check_input(const Tensor& x) const;

  ArchConfig config_;
  std::vector<ConvStage> shallow_;         // f_G part 1
  std::vector<ConvStage> deep_;            // f_G part 2
  std::vector<ConvStage> encoder_;         // shared f_A / f_S
  std::vector<ConvStage> attention_deep_;  // copy of the deep architecture for the AB
  std::vector<ResidualBlock> ssl_head_;
  Tensor cosine_weight_;  // [4, ssl_head_width]
  BnNeck global_neck_;
  BnNeck attention_neck_;
};

std::vector<NamedTensor> arch_to_records(const ArchConfig& config);
ArchConfig arch_from_records(const std::vector<NamedTensor>& records);

}  // namespace geomattn
