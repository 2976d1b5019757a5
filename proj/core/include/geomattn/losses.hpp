#pragma once

#include <optional>
#include <span>
#include <vector>

#include "geomattn/model.hpp"
#include "geomattn/tensor.hpp"

namespace geomattn {

struct LossWeights {
  double tri_gb = 0.5;
  double sce_gb = 0.5;
  double tri_ab = 0.5;
  double sce_ab = 0.5;
  double rot = 1.0;

  void validate() const;
  bool all_zero() const { return tri_gb == 0 && sce_gb == 0 && tri_ab == 0 && sce_ab == 0 && rot == 0; }
};

/// Per-anchor batch-hard hinge [margin + max_p d(a,p) - min_n d(a,n)]_+ with Euclidean d,
/// positives excluding the anchor itself. Returns [n]. Ties pick the lowest index.
Tensor triplet_hinges(const Tensor& features, std::span<const int> labels, double margin);

/// Mean of `triplet_hinges` over anchors.
Tensor hard_triplet_loss(const Tensor& features, std::span<const int> labels, double margin);

/// Cross-entropy against targets 1 - eps + eps/C (true class) and eps/C (others), batch mean.
Tensor smoothed_ce(const Tensor& logits, std::span<const int> labels, double epsilon = 0.1);

/// Plain cross-entropy over the four rotation logits.
Tensor rotation_loss(const Tensor& logits, std::span<const int> rotation_labels);

/// Unweighted loss terms; absent terms contribute nothing.
struct LossComponents {
  std::optional<Tensor> tri_gb;
  std::optional<Tensor> sce_gb;
  std::optional<Tensor> tri_ab;
  std::optional<Tensor> sce_ab;
  std::optional<Tensor> rot;
};

struct LossBreakdown {
  Tensor total;
  double tri_gb = 0.0;
  double sce_gb = 0.0;
  double tri_ab = 0.0;
  double sce_ab = 0.0;
  double rot = 0.0;
};

/// Weighted sum of the components. Throws NumericError when the total is not finite.
LossBreakdown weighted_total(const LossComponents& components, const LossWeights& weights);

struct LossOptions {
  double margin = 0.5;
  double label_smoothing = 0.1;
  /// Mine each branch's triplets from the union of both branches' features instead of from the
  /// branch's own batch.
  bool mixed_triplet_pool = false;
};

/// Per-branch triplet (pre-BN features) and smoothed CE (post-BN logits), plus the rotation term.
/// `attention` and `rotation_logits` may be absent when that branch is not run.
LossBreakdown overall_loss(const BranchOutput& global, const std::optional<BranchOutput>& attention,
                           const std::optional<Tensor>& rotation_logits, std::span<const int> labels,
                           std::span<const int> rotation_labels, const LossWeights& weights,
                           const LossOptions& options = {});

}  // namespace geomattn
