#include "cosched/harness.hpp"

#include <cstdio>
#include <fstream>
#include <variant>

#include <nlohmann/json.hpp>

#include "cosched/trace_io.hpp"
#include "cosched/vm_graft.hpp"

namespace cosched::harness {

namespace {

using nlohmann::json;
using workload::Metrics;

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

struct RunRecord {
  std::string id;
  std::string mode;
  std::uint32_t steps = 0;
  std::uint32_t batch = 0;
  std::uint32_t groups = 1;
  Metrics metrics;
};

class Renderer {
 public:
  Renderer(const ExperimentConfig& cfg, const RunOptions& opt) : cfg_(cfg), opt_(opt) {}

  void add(const RunRecord& r) {
    if (auto bad = audit_trace(r.metrics.trace); !bad.empty())
      throw InvariantViolation(r.id + ": " + bad.front());
    if (opt_.json_events) {
      json begin{{"run", r.id}, {"event", "run_begin"}, {"time", 0.0},   {"env", cfg_.env},
                 {"mode", r.mode}, {"K", r.steps},      {"B", r.batch}, {"G", r.groups}};
      events_ += begin.dump() + "\n";
      for (const auto& ev : r.metrics.trace.events) {
        auto j = to_json(ev);
        j["run"] = r.id;
        events_ += j.dump() + "\n";
      }
      for (const auto& seg : r.metrics.trace.utilization) {
        auto j = to_json(seg);
        j["run"] = r.id;
        j["event"] = "util";
        events_ += j.dump() + "\n";
      }
      json end{{"run", r.id},
               {"event", "run_end"},
               {"time", r.metrics.makespan},
               {"env_steps", r.metrics.env_steps}};
      events_ += end.dump() + "\n";
    }
  }

  void add_samples(const std::string& id, const std::vector<UtilizationSample>& samples) {
    for (const auto& s : samples) {
      auto j = to_json(s);
      j["run"] = id;
      util_ += j.dump() + "\n";
    }
  }

  Outputs finish(std::string csv, std::optional<std::string> tables) {
    Outputs out;
    out.summary_csv = std::move(csv);
    out.utilization_jsonl = std::move(util_);
    if (opt_.json_events) out.events_jsonl = std::move(events_);
    if (opt_.dump_tables) out.tables_json = std::move(tables);
    return out;
  }

 private:
  const ExperimentConfig& cfg_;
  const RunOptions& opt_;
  std::string events_;
  std::string util_;
};

void require_workload(const ExperimentConfig& cfg) {
  if (cfg.steps < 1) cfg.reject("experiment.steps", "must be at least 1 for this subcommand");
}

std::vector<UtilizationSample> samples_of(workload::Session& s, SimTime interval) {
  return s.gpu().engine().sample_utilization(interval);
}

std::string dump_session(workload::Session& s) {
  const auto& dev = s.gpu().device();
  json j{{"compute", s.gpu().vm().dump_tables(dev.context(s.compute_context()).space)},
         {"graphics", s.gpu().vm().dump_tables(dev.context(s.graphics_context()).space)}};
  return j.dump(2) + "\n";
}

const char* kCsvHeader =
    "env,mode,K,B,G,makespan,throughput,speedup_vs_sequential,compute_busy,graphics_busy,faults\n";

std::string csv_row(const ExperimentConfig& cfg, const RunRecord& r, double speedup) {
  const auto& m = r.metrics;
  return cfg.env + "," + r.mode + "," + std::to_string(r.steps) + "," + std::to_string(r.batch) + "," +
         std::to_string(r.groups) + "," + num(m.makespan) + "," + num(m.throughput) + "," + num(speedup) + "," +
         num(m.compute_busy) + "," + num(m.graphics_busy) + "," + std::to_string(m.faults) + "\n";
}

void require_fault_free(const RunRecord& r) {
  if (r.metrics.faults != 0)
    throw InvariantViolation(r.id + ": " + std::to_string(r.metrics.faults) + " fault(s) in a shipped workload");
}

Outputs cmd_datagen(const ExperimentConfig& cfg, const RunOptions& opt, std::uint64_t seed) {
  require_workload(cfg);
  Renderer out(cfg, opt);
  std::string csv = kCsvHeader;
  std::optional<std::string> tables;
  for (auto batch : cfg.batches) {
    RunRecord runs[2];
    for (int i = 0; i < 2; ++i) {
      const auto mode = i == 0 ? workload::DatagenMode::Sequential : workload::DatagenMode::Pipelined;
      auto& r = runs[i];
      r.mode = std::string(workload::to_string(mode));
      r.id = "datagen/B=" + std::to_string(batch) + "/" + r.mode;
      r.steps = cfg.steps;
      r.batch = batch;
      r.metrics = workload::run_datagen({cfg.steps, batch, mode}, cfg.cost, cfg.device, seed,
                                        [&](workload::Session& s) {
                                          out.add_samples(r.id, samples_of(s, cfg.sample_interval));
                                          if (opt.dump_tables) tables = dump_session(s);
                                        });
      require_fault_free(r);
      out.add(r);
    }
    const double seq = runs[0].metrics.makespan;
    for (const auto& r : runs) csv += csv_row(cfg, r, r.metrics.makespan > 0 ? seq / r.metrics.makespan : 0.0);
  }
  return out.finish(std::move(csv), std::move(tables));
}

Outputs cmd_rl(const ExperimentConfig& cfg, const RunOptions& opt, std::uint64_t seed) {
  require_workload(cfg);
  Renderer out(cfg, opt);
  std::string csv = kCsvHeader;
  std::optional<std::string> tables;
  for (auto batch : cfg.batches) {
    RunRecord runs[2];
    for (int i = 0; i < 2; ++i) {
      const auto mode = i == 0 ? workload::RolloutMode::Sequential : workload::RolloutMode::Interleaved;
      auto& r = runs[i];
      r.mode = std::string(workload::to_string(mode));
      r.id = "rl/B=" + std::to_string(batch) + "/" + r.mode;
      r.steps = cfg.steps;
      r.batch = batch;
      r.groups = i == 0 ? 1 : cfg.groups;
      r.metrics = workload::run_rl_rollout({cfg.steps, batch, r.groups, mode}, cfg.cost, cfg.device, seed,
                                           [&](workload::Session& s) {
                                             out.add_samples(r.id, samples_of(s, cfg.sample_interval));
                                             if (opt.dump_tables) tables = dump_session(s);
                                           });
      require_fault_free(r);
      out.add(r);
    }
    const double seq = runs[0].metrics.makespan;
    for (const auto& r : runs) csv += csv_row(cfg, r, r.metrics.makespan > 0 ? seq / r.metrics.makespan : 0.0);
  }
  return out.finish(std::move(csv), std::move(tables));
}

Outputs cmd_trace(const ExperimentConfig& cfg, const RunOptions& opt, std::uint64_t seed) {
  Renderer out(cfg, opt);
  const std::uint32_t batch = cfg.batches.front();
  std::string csv = "env,mode,K,B,G,makespan,mean_compute_util,mean_graphics_util\n";
  std::optional<std::string> tables;
  double mean_compute[2] = {0.0, 0.0};
  for (int i = 0; i < 2; ++i) {
    const auto mode = i == 0 ? workload::DatagenMode::Sequential : workload::DatagenMode::Pipelined;
    RunRecord r;
    r.mode = std::string(workload::to_string(mode));
    r.id = "trace/B=" + std::to_string(batch) + "/" + r.mode;
    r.steps = cfg.steps;
    r.batch = batch;
    if (cfg.steps == 0) {
      // No work: an idle device observed for a few sampling intervals.
      workload::Session s(cfg.device, cfg.cost, {}, seed);
      out.add_samples(r.id, s.gpu().engine().sample_utilization(cfg.sample_interval, 10 * cfg.sample_interval));
      r.metrics = s.finish(0);
      if (opt.dump_tables) tables = dump_session(s);
    } else {
      r.metrics = workload::run_datagen({cfg.steps, batch, mode}, cfg.cost, cfg.device, seed,
                                        [&](workload::Session& s) {
                                          out.add_samples(r.id, samples_of(s, cfg.sample_interval));
                                          if (opt.dump_tables) tables = dump_session(s);
                                        });
      require_fault_free(r);
    }
    out.add(r);
    const auto& m = r.metrics;
    mean_compute[i] = m.makespan > 0 ? m.compute_busy / m.makespan : 0.0;
    const double mean_graphics = m.makespan > 0 ? m.graphics_busy / m.makespan : 0.0;
    csv += cfg.env + "," + r.mode + "," + std::to_string(r.steps) + "," + std::to_string(batch) + ",1," +
           num(m.makespan) + "," + num(mean_compute[i]) + "," + num(mean_graphics) + "\n";
  }
  if (cfg.steps > 0 && !(mean_compute[1] > mean_compute[0]))
    throw InvariantViolation("pipelined mean compute utilization " + num(mean_compute[1]) +
                             " does not exceed sequential " + num(mean_compute[0]));
  return out.finish(std::move(csv), std::move(tables));
}

Outputs cmd_graftbench(const ExperimentConfig& cfg, const RunOptions& opt) {
  const auto points = graft_bench(cfg);
  std::string csv =
      "buffers,export_import_ops,graft_ops,initial_entry_writes,subscriber_writes,tlb_invalidations,new_pdes,"
      "copy_reads\n";
  std::string events;
  for (const auto& p : points) {
    csv += std::to_string(p.buffers) + "," + std::to_string(p.export_import_ops) + "," +
           std::to_string(p.graft_ops) + "," + std::to_string(p.initial_entry_writes) + "," +
           std::to_string(p.subscriber_writes) + "," + std::to_string(p.tlb_invalidations) + "," +
           std::to_string(p.new_pdes) + "," + std::to_string(p.copy_reads) + "\n";
    json j{{"run", "graftbench/N=" + std::to_string(p.buffers)},
           {"event", "graftbench"},
           {"buffers", p.buffers},
           {"export_import_ops", p.export_import_ops},
           {"graft_ops", p.graft_ops},
           {"initial_entry_writes", p.initial_entry_writes},
           {"subscriber_writes", p.subscriber_writes},
           {"tlb_invalidations", p.tlb_invalidations},
           {"new_pdes", p.new_pdes},
           {"copy_reads", p.copy_reads}};
    events += j.dump() + "\n";
  }
  Outputs out;
  out.summary_csv = std::move(csv);
  if (opt.json_events) out.events_jsonl = std::move(events);
  if (opt.dump_tables && !points.empty()) {
    // Tables after the smallest run; the large ones are mostly leaves.
    vm::VmManager vm(cfg.device.vm);
    const auto src = vm.create_space(vm::RangePolicy::HighRange);
    const auto dst = vm.create_space(vm::RangePolicy::LowRange);
    for (auto [space, sc] : {std::pair{src, SizeClass::Big}, {dst, SizeClass::Small}})
      vm.map_range(space, vm.allocate(space, 1, sc), vm.alloc_phys(sc, 1));
    vm.graft(src, dst);
    for (std::uint64_t i = 0; i < points.front().buffers; ++i)
      vm.map_range(src, vm.allocate(src, 1, SizeClass::Big), vm.alloc_phys(SizeClass::Big, 1));
    out.tables_json = json{{"source", vm.dump_tables(src)}, {"target", vm.dump_tables(dst)}}.dump(2) + "\n";
  }
  return out;
}

}  // namespace

std::optional<Command> parse_command(std::string_view name) {
  if (name == "datagen") return Command::Datagen;
  if (name == "rl") return Command::Rl;
  if (name == "graftbench") return Command::Graftbench;
  if (name == "trace") return Command::Trace;
  return std::nullopt;
}

std::string_view to_string(Command command) {
  switch (command) {
    case Command::Datagen: return "datagen";
    case Command::Rl: return "rl";
    case Command::Graftbench: return "graftbench";
    case Command::Trace: return "trace";
  }
  return "?";
}

std::vector<GraftPoint> graft_bench(const ExperimentConfig& cfg) {
  std::vector<GraftPoint> out;
  for (auto n : cfg.graft_counts) {
    vm::VmManager vm(cfg.device.vm);
    const auto src = vm.create_space(vm::RangePolicy::HighRange);
    const auto dst = vm.create_space(vm::RangePolicy::LowRange);
    // Both sides hold a live buffer before the one-time graft.
    vm.map_range(src, vm.allocate(src, 1, SizeClass::Big), vm.alloc_phys(SizeClass::Big, 1));
    vm.map_range(dst, vm.allocate(dst, 1, SizeClass::Small), vm.alloc_phys(SizeClass::Small, 1));
    const auto reads_before = vm.copy_engine().reads;
    const auto report = vm.graft(src, dst);
    const auto before = vm.space(dst).stats;

    GraftPoint p;
    p.buffers = n;
    p.export_import_ops = 2 * n;
    std::vector<VirtAddr> buffers;
    for (std::uint64_t i = 0; i < n; ++i) {
      const auto va = vm.allocate(src, 1, SizeClass::Big);
      p.new_pdes += vm.map_range(src, va, vm.alloc_phys(SizeClass::Big, 1));
      buffers.push_back(va);
    }
    const auto& after = vm.space(dst).stats;
    p.initial_entry_writes = report.entry_writes;
    p.subscriber_writes = after.subscriber_writes - before.subscriber_writes;
    p.tlb_invalidations = report.tlb_invalidations + (after.tlb_invalidations - before.tlb_invalidations);
    p.graft_ops = p.initial_entry_writes + p.subscriber_writes + p.tlb_invalidations;
    p.copy_reads = vm.copy_engine().reads - reads_before;
    for (auto va : buffers)
      if (!std::holds_alternative<vm::Translation>(vm.translate(dst, va)))
        throw InvariantViolation("graftbench: buffer at " + std::to_string(va.value) +
                                 " does not resolve through the grafted table");
    out.push_back(p);
  }
  return out;
}

Outputs run(Command command, const ExperimentConfig& cfg, const RunOptions& options) {
  const std::uint64_t seed = options.seed.value_or(cfg.seed);
  switch (command) {
    case Command::Datagen: return cmd_datagen(cfg, options, seed);
    case Command::Rl: return cmd_rl(cfg, options, seed);
    case Command::Graftbench: return cmd_graftbench(cfg, options);
    case Command::Trace: return cmd_trace(cfg, options, seed);
  }
  return {};
}

void write_outputs(const Outputs& outputs, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto put = [&](const char* name, const std::string& body) {
    std::ofstream f(dir / name, std::ios::binary);
    f << body;
    if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
  };
  put("summary.csv", outputs.summary_csv);
  put("utilization.jsonl", outputs.utilization_jsonl);
  if (outputs.events_jsonl) put("events.jsonl", *outputs.events_jsonl);
  if (outputs.tables_json) put("tables.json", *outputs.tables_json);
}

}  // namespace cosched::harness
