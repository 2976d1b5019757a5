#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "run_config.hpp"

namespace geomattn::cli {

struct GenerateArgs {
  std::filesystem::path out;
};

struct TrainArgs {
  std::filesystem::path out = "run";
};

struct EvaluateArgs {
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> query;
  std::optional<std::filesystem::path> gallery;
  std::optional<std::filesystem::path> report;
  std::optional<std::filesystem::path> per_query_csv;
};

struct VisualizeArgs {
  std::filesystem::path checkpoint;
  std::vector<std::filesystem::path> images;
  std::optional<std::filesystem::path> manifest;
  std::filesystem::path out = "attention";
};

struct GradcheckArgs {
  double tolerance = 1e-4;
};

int cmd_generate_data(const RunConfig& cfg, const GenerateArgs& args);
int cmd_train(const RunConfig& cfg, const TrainArgs& args);
int cmd_evaluate(const RunConfig& cfg, const EvaluateArgs& args);
int cmd_visualize_attention(const RunConfig& cfg, const VisualizeArgs& args);
int cmd_gradcheck(const RunConfig& cfg, const GradcheckArgs& args);

/// Nearest-neighbour upsampled mask, min-max scaled onto a blue-to-red ramp and blended at alpha
/// 0.5 over the [3,H,W] image.
Tensor attention_overlay(const Tensor& image, const Tensor& mask);

}  // namespace geomattn::cli
