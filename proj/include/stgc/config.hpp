#pragma once

// Flat key/value run configuration.
//
//   # comment
//   model.num_experts = 4
//   train.stgc = on
//   synth.confusion_pairs = 0-1, 2-3
//
// One assignment per line; keys are namespaced (model.*, train.*, synth.*,
// data.*). Unknown keys, duplicate keys and malformed values are errors that
// name the file and line. Keys left out keep their defaults.

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "stgc/model.hpp"
#include "stgc/synthdata.hpp"
#include "stgc/train.hpp"

namespace stgc {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SynthSpec synth;
  std::optional<std::filesystem::path> data_path;
};

struct ConfigKey {
  std::string name;
  std::string type;  // "count", "float", "bool", "seed", or an enumeration
  std::string help;
};

/// Every accepted key, in the order format_config writes them.
const std::vector<ConfigKey>& config_keys();

RunConfig parse_config(std::string_view text, const std::string& source = "<config>");
RunConfig load_config(const std::filesystem::path& path);

/// Applies one assignment; `where` prefixes error messages.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value,
                      const std::string& where = "");

/// Canonical text for `cfg`: every key, one per line, round-trips through
/// parse_config. Relative data paths are written as given.
std::string format_config(const RunConfig& cfg);

std::string config_value(const RunConfig& cfg, const std::string& key);

}  // namespace stgc
