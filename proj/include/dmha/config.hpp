#pragma once

// Run configuration: one flat "key = value" namespace covering features,
// model and training. Files use one assignment per line; '#' starts a
// comment. The same keys are used for checkpoint config snapshots.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dmha/features.hpp"
#include "dmha/model.hpp"

namespace dmha {

struct TrainConfig {
  std::size_t chunk_frames = 350;
  std::size_t batch_size = 128;
  double lr = 1e-4;
  double weight_decay = 1e-3;
  std::size_t max_epochs = 100;
  std::size_t anneal_patience = 15;
  double anneal_factor = 0.5;
  double validation_fraction = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

struct RunConfig {
  FeatureConfig features;
  ModelConfig model;
  TrainConfig train;

  void validate() const;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// Parses "key = value" lines; blank lines and '#' comments are skipped.
KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::filesystem::path& path);

// Applies assignments in order; unknown keys and malformed values throw
// std::invalid_argument naming the key.
void apply(RunConfig& config, const KeyValues& kv);

// Every key with its current value, in a fixed order. Floating point values
// use 17 significant digits so that parsing them back is exact.
KeyValues to_key_values(const RunConfig& config);

std::string format_double(double v);

// Value parsers shared by every key table; malformed input throws
// std::invalid_argument naming the key.
std::uint64_t to_u64(const std::string& key, const std::string& value);
std::size_t to_size(const std::string& key, const std::string& value);
double to_double(const std::string& key, const std::string& value);

}  // namespace dmha
