#pragma once

// Experiment configuration: sectioned `key = value` text.
//
//   [device]      capacities, quantum, queues, ring size, page geometry, VA bases
//   [cost]        preset name plus per-coefficient overrides
//   [experiment]  env label, steps, batch sweep, groups, sampling, seed
//   [graftbench]  buffer counts
//
// `#` and `;` start comments. Unknown sections or keys, duplicates, and
// malformed values are errors that name the line and key.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "cosched/device.hpp"
#include "cosched/error.hpp"
#include "cosched/workload_api.hpp"

namespace cosched::harness {

struct ExperimentConfig {
  DeviceConfig device;
  workload::PhaseCost cost;
  std::string preset = "default";
  std::string env = "StackCube";
  std::uint32_t steps = 20;
  std::vector<std::uint32_t> batches{32, 64, 128, 256, 384};
  std::uint32_t groups = 2;
  SimTime sample_interval = 0.5;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> graft_counts;  // 4, 8, ..., 8192 when unset

  std::string source = "<config>";
  std::map<std::string, std::size_t> key_lines;  // "section.key" -> line it was set on

  /// ConfigError attributed to `key`'s line, or to no line if it was defaulted.
  [[noreturn]] void reject(const std::string& key, const std::string& message) const;
};

class ConfigError : public SimError {
 public:
  ConfigError(std::string source, std::size_t line, std::string key, const std::string& message);

  const std::string& source() const { return source_; }
  std::size_t line() const { return line_; }  // 0 when not tied to a line
  const std::string& key() const { return key_; }

 private:
  std::string source_;
  std::size_t line_;
  std::string key_;
};

ExperimentConfig parse_config(std::string_view text, const std::string& source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

}  // namespace cosched::harness
