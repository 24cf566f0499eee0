#pragma once

// Experiment runner behind the command-line tool. Each subcommand renders its
// outputs into strings so tests can compare runs without touching disk.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "cosched/config.hpp"

namespace cosched::harness {

enum class Command : std::uint8_t { Datagen, Rl, Graftbench, Trace };

std::optional<Command> parse_command(std::string_view name);
std::string_view to_string(Command command);

struct RunOptions {
  bool json_events = false;          // also render events.jsonl
  bool dump_tables = false;          // also render tables.json
  std::optional<std::uint64_t> seed;  // overrides experiment.seed
};

struct Outputs {
  std::string summary_csv;
  std::string utilization_jsonl;
  std::optional<std::string> events_jsonl;
  std::optional<std::string> tables_json;
};

/// A run broke a structural invariant (trace audit, unexpected fault,
/// unresolved grafted buffer, utilization ordering in `trace`).
class InvariantViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GraftPoint {
  std::uint64_t buffers = 0;
  std::uint64_t export_import_ops = 0;
  std::uint64_t graft_ops = 0;
  std::uint64_t initial_entry_writes = 0;
  std::uint64_t subscriber_writes = 0;
  std::uint64_t tlb_invalidations = 0;
  std::uint64_t new_pdes = 0;  // directory entries the source created after the graft
  std::uint64_t copy_reads = 0;
};

/// Graft-versus-export/import cost for each configured buffer count.
std::vector<GraftPoint> graft_bench(const ExperimentConfig& cfg);

Outputs run(Command command, const ExperimentConfig& cfg, const RunOptions& options = {});

/// Writes summary.csv, utilization.jsonl and, when rendered, events.jsonl and
/// tables.json into `dir` (created if missing).
void write_outputs(const Outputs& outputs, const std::filesystem::path& dir);

}  // namespace cosched::harness
