#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "geomattn/grad_check.hpp"
#include "geomattn/model.hpp"

namespace geomattn {

struct GradSuiteEntry {
  std::string name;
  GradCheckReport report;
};

/// Small architecture for 16x16 inputs used by the full-loss check.
ArchConfig tiny_arch(std::size_t num_identities = 2);

/// Finite-difference checks of every differentiable primitive plus the overall training loss of
/// `tiny_arch` on a 4-image batch (two identities, two images each).
std::vector<GradSuiteEntry> run_grad_suite(std::uint64_t seed = 1, const GradCheckOptions& options = {});

}  // namespace geomattn
