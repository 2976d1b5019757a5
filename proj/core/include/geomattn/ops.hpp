#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>

#include "geomattn/tensor.hpp"

namespace geomattn {

// Elementwise primitives. Binary ops require identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor scale(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
/// Natural log; throws NumericError on any non-positive entry.
Tensor log(const Tensor& a);
/// max(x, 0) with derivative 0 at x == 0.
Tensor relu(const Tensor& a);
/// log(1 + e^x), evaluated stably.
Tensor softplus(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

/// [n,d] x [d,m] -> [n,m].
Tensor matmul(const Tensor& a, const Tensor& b);
/// [n,d] x [m,d]^T -> [n,m].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// x W (+ bias). Pass std::nullopt for the bias-free form.
Tensor linear(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias = std::nullopt);

/// Zero-padded cross-correlation. x [n,c,h,w], kernel [c_out,c,kh,kw].
Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t pad);

enum class Mode { train, eval };

/// Per-channel running statistics of a batch-norm layer. `count` is the number of train-mode
/// updates absorbed so far; eval mode refuses to run while it is zero.
struct RunningStats {
  Tensor mean;
  Tensor var;
  Tensor count;

  explicit RunningStats(std::size_t channels = 0);
  std::uint64_t updates() const { return static_cast<std::uint64_t>(count.item()); }
};

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Batch normalization over axis 1 of a rank-2 [n,c] or rank-4 [n,c,h,w] tensor. `beta` may be
/// omitted for the shift-free variant. Train mode updates `stats` in place.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const std::optional<Tensor>& beta,
                  RunningStats& stats, Mode mode, BatchNormOptions options = {});

/// [n,c,h,w] -> [n,c] spatial mean.
Tensor global_avg_pool(const Tensor& x);

/// Column concatenation of [n,d1] and [n,d2].
Tensor concat(const Tensor& a, const Tensor& b);
/// Concatenation along the leading axis; trailing shapes must agree.
Tensor concat_rows(const Tensor& a, const Tensor& b);
/// Rows [begin, end) of a tensor along its leading axis.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);

/// Each row divided by max(||row||, eps). Zero rows stay zero.
Tensor l2_normalize(const Tensor& v, double eps = 1e-12);

/// x [n,c,h,w] scaled by mask [n,h,w] broadcast over channels.
Tensor mul_spatial(const Tensor& x, const Tensor& mask);

}  // namespace geomattn
