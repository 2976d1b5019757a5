#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "geomattn/data.hpp"
#include "geomattn/eval.hpp"
#include "geomattn/model.hpp"
#include "geomattn/optim.hpp"
#include "geomattn/train.hpp"

namespace geomattn::cli {

using Assignment = std::pair<std::string, std::string>;

/// Parses `key = value` lines; `#` starts a comment. Throws ConfigError naming `origin` and line.
std::vector<Assignment> parse_config_text(const std::string& text, const std::string& origin);
std::vector<Assignment> read_config_file(const std::filesystem::path& path);

/// Parses `key=value` as given to --set.
Assignment parse_assignment(const std::string& text);

/// Fully resolved run configuration: every known key has a value. Values keep the exact text
/// they were given so that the echo replays bit-for-bit.
class RunConfig {
 public:
  RunConfig();

  /// defaults < preset < file < overrides. The preset is taken from the overrides, else from
  /// the file, else "desk". `env_seed` is used when neither the file nor the overrides set `seed`.
  static RunConfig resolve(const std::vector<Assignment>& file, const std::vector<Assignment>& overrides,
                           const std::optional<std::string>& env_seed = std::nullopt);

  void set(const std::string& key, const std::string& value);
  void apply_preset(const std::string& name);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& text(const std::string& key) const;
  double real(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<std::size_t> list(const std::string& key) const;

  /// Sorted `key = value` lines.
  std::string echo() const;
  const std::map<std::string, std::string>& values() const { return values_; }

  std::uint64_t seed() const { return u64("seed"); }
  ArchConfig arch(std::size_t num_identities) const;
  OptimConfig optim() const;
  TrainConfig train() const;
  SyntheticSpec synthetic() const;
  EvalOptions eval() const;

 private:
  std::map<std::string, std::string> values_;
};

std::vector<std::string> preset_names();

}  // namespace geomattn::cli
