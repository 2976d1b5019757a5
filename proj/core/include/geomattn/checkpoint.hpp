#pragma once

#include <filesystem>
#include <iosfwd>
#include <vector>

#include "geomattn/tensor.hpp"

namespace geomattn {

/// Versioned tensor container shared by checkpoints, mask sidecars and feature tables.
///
/// Layout (all integers little-endian):
///   "GATN1"
///   repeated until EOF:
///     u32 name length, UTF-8 name bytes,
///     u32 rank, u64 dims[rank],
///     f64 values[product(dims)]
inline constexpr char kContainerMagic[] = "GATN1";

void write_container(std::ostream& out, const std::vector<NamedTensor>& tensors);
void write_container(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);

std::vector<NamedTensor> read_container(std::istream& in);
std::vector<NamedTensor> read_container(const std::filesystem::path& path);

}  // namespace geomattn
