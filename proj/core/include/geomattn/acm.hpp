#pragma once

#include <cstddef>
#include <filesystem>

#include "geomattn/tensor.hpp"

namespace geomattn {

/// Neighborhood configuration of the attention computing module.
///
/// Windows are `neighborhood x neighborhood` squares centred on each location and truncated at
/// the map border: only in-bounds positions take part in the softmax.
struct AcmConfig {
  std::size_t neighborhood = 7;
  /// Keep M, G and the unnormalized mask on the result (tests, visualization).
  bool keep_intermediates = false;

  void validate() const;
};

/// Output of the attention computing module.
///
/// `q` is [n,h,w] (or [h,w] for a single [c,h,w] input) and sums to one per image. The
/// intermediates are only populated when `AcmConfig::keep_intermediates` is set.
struct AttentionMask {
  Tensor q;
  Tensor m;
  Tensor g;
  Tensor q_tilde;
};

/// softplus(x) + 1e-6: maps encoder activations to the strictly positive local feature map.
Tensor positive_activation(const Tensor& raw);

/// Softmax of each channel over the truncated neighborhood of every location.
/// Accepts [c,h,w] or [n,c,h,w].
Tensor neighborhood_softmax(const Tensor& local, std::size_t neighborhood);

/// Each entry divided by the maximum across channels at its location. Requires positive input.
Tensor channel_nms(const Tensor& local);

/// Maximum over the channel axis: [n,c,h,w] -> [n,h,w]. Gradient flows to the lowest-index
/// maximizer.
Tensor channel_max(const Tensor& x);

/// Divides each [h,w] plane by its sum: [n,h,w] -> [n,h,w].
Tensor spatial_normalize(const Tensor& x);

AttentionMask attention_mask(const Tensor& local, const AcmConfig& config);

/// Writes an [h,w] mask as an 8-bit binary PGM after min-max scaling.
void write_mask_pgm(const std::filesystem::path& path, const Tensor& mask);
/// Writes an [h,w] mask losslessly in the tensor container format under the name "mask".
void write_mask_sidecar(const std::filesystem::path& path, const Tensor& mask);

}  // namespace geomattn
