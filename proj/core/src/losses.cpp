#include "geomattn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "geomattn/error.hpp"
#include "geomattn/ops.hpp"

namespace geomattn {

namespace {

using Impl = std::shared_ptr<detail::TensorImpl>;

void require_finite(const Tensor& t, const char* what) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(what) + " is not finite");
  }
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {tri_gb, sce_gb, tri_ab, sce_ab, rot}) {
    if (!(w >= 0.0)) throw ConfigError("loss weights must be non-negative");
  }
}

Tensor triplet_hinges(const Tensor& features, std::span<const int> labels, double margin) {
  if (features.rank() != 2) throw ShapeError("triplet loss expects [n,d] features");
  const std::size_t n = features.dim(0), d = features.dim(1);
  if (labels.size() != n) throw ShapeError("triplet loss: label count differs from batch size");
  require_finite(features, "triplet loss input");
  auto f = features.data();

  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double ss = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = f[i * d + k] - f[j * d + k];
        ss += diff * diff;
      }
      dist[i * n + j] = dist[j * n + i] = std::sqrt(ss);
    }
  }

  std::vector<double> out(n);
  std::vector<std::size_t> hardest_pos(n), hardest_neg(n);
  const bool tracing = detail::tracing_branches();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t p = n, q = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i]) {
        if (p == n || dist[i * n + j] > dist[i * n + p]) p = j;
      } else if (q == n || dist[i * n + j] < dist[i * n + q]) {
        q = j;
      }
    }
    if (p == n || q == n) {
      throw DataError("triplet loss: anchor " + std::to_string(i) + " (identity " +
                      std::to_string(labels[i]) + ") lacks a " + (p == n ? "positive" : "negative"));
    }
    hardest_pos[i] = p;
    hardest_neg[i] = q;
    const double z = margin + dist[i * n + p] - dist[i * n + q];
    out[i] = z > 0.0 ? z : 0.0;
    if (tracing) detail::trace_branch((p * n + q) * 2 + (z > 0.0 ? 1 : 0));
  }

  Impl F = features.impl();
  return detail::make_result(
      "triplet_hinges", {n}, std::move(out), {&features},
      [F, n, d, dist = std::move(dist), hardest_pos = std::move(hardest_pos),
       hardest_neg = std::move(hardest_neg), margin](std::span<const double> g) {
        auto gf = detail::grad_sink(F);
        const auto& x = F->data;
        auto pull = [&](std::size_t a, std::size_t b, double weight) {
          const double dab = dist[a * n + b];
          if (dab == 0.0) return;
          for (std::size_t k = 0; k < d; ++k) {
            const double u = weight * (x[a * d + k] - x[b * d + k]) / dab;
            gf[a * d + k] += u;
            gf[b * d + k] -= u;
          }
        };
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t p = hardest_pos[i], q = hardest_neg[i];
          if (!(margin + dist[i * n + p] - dist[i * n + q] > 0.0)) continue;
          pull(i, p, g[i]);
          pull(i, q, -g[i]);
        }
      });
}

Tensor hard_triplet_loss(const Tensor& features, std::span<const int> labels, double margin) {
  return mean(triplet_hinges(features, labels, margin));
}

Tensor smoothed_ce(const Tensor& logits, std::span<const int> labels, double epsilon) {
  if (logits.rank() != 2) throw ShapeError("cross-entropy expects [n,C] logits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (c < 2) throw ShapeError("cross-entropy needs at least two classes");
  if (labels.size() != n) throw ShapeError("cross-entropy: label count differs from batch size");
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ConfigError("label smoothing must lie in [0,1)");
  if (n == 0) throw ShapeError("cross-entropy on an empty batch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw DataError("label " + std::to_string(y) + " out of range for " + std::to_string(c) + " classes");
    }
  }
  require_finite(logits, "logits");
  auto z = logits.data();
  const double off = epsilon / static_cast<double>(c);
  const double on = 1.0 - epsilon + off;
  std::vector<double> probs(n * c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = z.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const double log_norm = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) {
      const double log_p = row[j] - log_norm;
      probs[i * c + j] = std::exp(log_p);
      const double target = static_cast<std::size_t>(labels[i]) == j ? on : off;
      total -= target * log_p;
    }
  }
  total /= static_cast<double>(n);
  std::vector<int> y(labels.begin(), labels.end());
  Impl L = logits.impl();
  return detail::make_result("smoothed_ce", {}, {total}, {&logits},
                             [L, probs = std::move(probs), y = std::move(y), n, c, on, off](std::span<const double> g) {
                               auto gl = detail::grad_sink(L);
                               const double scale = g[0] / static_cast<double>(n);
                               for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t j = 0; j < c; ++j) {
                                   const double target = static_cast<std::size_t>(y[i]) == j ? on : off;
                                   gl[i * c + j] += scale * (probs[i * c + j] - target);
                                 }
                             });
}

Tensor rotation_loss(const Tensor& logits, std::span<const int> rotation_labels) {
  if (logits.rank() != 2 || logits.dim(1) != ArchConfig::kRotationClasses) {
    throw ShapeError("rotation loss expects [n,4] logits, got " + to_string(logits.shape()));
  }
  return smoothed_ce(logits, rotation_labels, 0.0);
}

LossBreakdown weighted_total(const LossComponents& c, const LossWeights& w) {
  w.validate();
  LossBreakdown out;
  Tensor total;
  auto accumulate = [&](const std::optional<Tensor>& term, double weight, double& slot) {
    if (!term) return;
    slot = term->item();
    // A zero-weighted term is logged but kept out of the graph, so its parameters get no gradient.
    if (weight == 0.0) return;
    Tensor scaled = scale(*term, weight);
    total = total.defined() ? add(total, scaled) : scaled;
  };
  accumulate(c.tri_gb, w.tri_gb, out.tri_gb);
  accumulate(c.sce_gb, w.sce_gb, out.sce_gb);
  accumulate(c.tri_ab, w.tri_ab, out.tri_ab);
  accumulate(c.sce_ab, w.sce_ab, out.sce_ab);
  accumulate(c.rot, w.rot, out.rot);
  out.total = total.defined() ? total : Tensor::scalar(0.0);
  if (!std::isfinite(out.total.item())) throw NumericError("overall loss is not finite");
  return out;
}

LossBreakdown overall_loss(const BranchOutput& global, const std::optional<BranchOutput>& attention,
                           const std::optional<Tensor>& rotation_logits, std::span<const int> labels,
                           std::span<const int> rotation_labels, const LossWeights& weights,
                           const LossOptions& options) {
  LossComponents c;
  c.sce_gb = smoothed_ce(global.logits, labels, options.label_smoothing);
  if (attention) {
    c.sce_ab = smoothed_ce(attention->logits, labels, options.label_smoothing);
    if (options.mixed_triplet_pool) {
      const std::size_t n = labels.size();
      std::vector<int> pooled(labels.begin(), labels.end());
      pooled.insert(pooled.end(), labels.begin(), labels.end());
      Tensor hinges = triplet_hinges(concat_rows(global.feat_triplet, attention->feat_triplet), pooled,
                                     options.margin);
      c.tri_gb = mean(slice_rows(hinges, 0, n));
      c.tri_ab = mean(slice_rows(hinges, n, 2 * n));
    } else {
      c.tri_gb = hard_triplet_loss(global.feat_triplet, labels, options.margin);
      c.tri_ab = hard_triplet_loss(attention->feat_triplet, labels, options.margin);
    }
  } else {
    c.tri_gb = hard_triplet_loss(global.feat_triplet, labels, options.margin);
  }
  if (rotation_logits) c.rot = rotation_loss(*rotation_logits, rotation_labels);
  return weighted_total(c, weights);
}

}  // namespace geomattn
