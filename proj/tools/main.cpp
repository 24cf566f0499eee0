// cosched datagen|rl|graftbench|trace --config <path> --out <dir> [--seed N] [--json-events] [--dump-tables]
//
// Exit codes: 0 success, 1 usage or I/O error, 2 config error, 3 invariant violation.

#include <iostream>

#include <CLI11.hpp>

#include "cosched/harness.hpp"

namespace {

constexpr int kConfigError = 2;
constexpr int kInvariantViolation = 3;

}  // namespace

int main(int argc, char** argv) {
  using namespace cosched::harness;

  CLI::App app{"Discrete-event GPU co-scheduling simulator"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  bool json_events = false;
  bool dump_tables = false;

  const std::pair<const char*, const char*> commands[] = {
      {"datagen", "Sequential vs pipelined data generation across the batch sweep"},
      {"rl", "Sequential vs interleaved RL rollout across the batch sweep"},
      {"graftbench", "Graft cost vs per-buffer export/import across buffer counts"},
      {"trace", "Utilization traces of one sequential and one pipelined run"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "Experiment configuration file")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "Output directory")->required();
    sub->add_option("--seed", seed, "Overrides experiment.seed");
    sub->add_flag("--json-events", json_events, "Also write events.jsonl");
    sub->add_flag("--dump-tables", dump_tables, "Also write tables.json");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help and --version exit 0; every other parse failure is a usage error.
    return app.exit(e) == 0 ? 0 : 1;
  }

  const auto command = *parse_command(app.get_subcommands().front()->get_name());
  try {
    const auto cfg = load_config(config_path);
    const auto outputs = run(command, cfg, RunOptions{json_events, dump_tables, seed});
    write_outputs(outputs, out_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const InvariantViolation& e) {
    std::cerr << "invariant violation: " << e.what() << "\n";
    return kInvariantViolation;
  } catch (const cosched::SimError& e) {
    std::cerr << "invariant violation: " << e.what() << "\n";
    return kInvariantViolation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
