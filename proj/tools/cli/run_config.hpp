// SPDX-License-Identifier: Apache-2.0
//
// RunConfig: model, loss and trainer settings read from one JSON document.
// The schema is documented in docs/run_config.md.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dimlight/network.hpp"

namespace dimlight::cli {

/// Paths are optional here; the matching command-line flags override them.
struct RunPaths {
  std::string manifest;
  std::string checkpoint;
  std::string history;
};

struct RunConfig {
  ModelConfig model = ModelConfig::toy_preset();
  ObjectiveOptions loss;
  TrainOptions train;
  /// Pairs taken from the end of the manifest for the post-training summary.
  int holdout = 0;
  RunPaths paths;
};

/// Malformed or unknown content in a config or manifest.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A file that cannot be read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Pretty JSON with every key, in a fixed order.
std::string run_config_to_json(const RunConfig& c);
/// Missing keys keep their defaults; unknown keys and bad values throw ConfigError.
RunConfig run_config_from_json(const std::string& text);
/// Reads and parses a config file; an unreadable file throws IoError.
RunConfig load_run_config(const std::filesystem::path& path);

/// Manifest: JSON array of {"low": path, "high": path}. Relative paths are
/// resolved against the manifest's directory.
struct ManifestEntry {
  std::filesystem::path low;
  std::filesystem::path high;
};
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path);
std::vector<ImagePair> load_pairs(const std::vector<ManifestEntry>& entries);

/// Reads a whole text file; throws IoError when it cannot be opened.
std::string read_text(const std::filesystem::path& path);

}  // namespace dimlight::cli
