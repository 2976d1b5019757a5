#pragma once

#include <cstddef>
#include <filesystem>

#include "geomattn/tensor.hpp"

namespace geomattn {

// Images are [c,h,w] tensors with values in [0,1].

/// Reads a binary PPM (P6, 3 channels) or PGM (P5, 1 channel) file with maxval <= 255.
Tensor read_pnm(const std::filesystem::path& path);
/// Writes a [3,h,w] image as P6. Values are clamped to [0,1] and rounded to 8 bits.
void write_ppm(const std::filesystem::path& path, const Tensor& image);
/// Writes a [1,h,w] or [h,w] image as P5.
void write_pgm(const std::filesystem::path& path, const Tensor& image);

/// Bilinear resize with half-pixel centres.
Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width);

/// Exact counter-clockwise rotation by k * 90 degrees. Requires a square image.
Tensor rotate90(const Tensor& image, int k);
Tensor flip_horizontal(const Tensor& image);
/// Reflect-pads by `pad` pixels then crops an h x w window whose top-left corner is (top, left)
/// in padded coordinates.
Tensor pad_reflect_crop(const Tensor& image, std::size_t pad, std::size_t top, std::size_t left);

struct Rect {
  std::size_t top = 0, left = 0, height = 0, width = 0;
};

/// Fills `rect` (clipped to the image) with the per-channel `fill` values.
Tensor erase_rect(const Tensor& image, const Rect& rect, std::span<const double> fill);

/// Stacks equally-shaped [c,h,w] images into [n,c,h,w].
Tensor stack_images(std::span<const Tensor> images);

}  // namespace geomattn
