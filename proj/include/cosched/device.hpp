#pragma once

// Device-side state shared by the driver (channel_core) and the execution
// engine: commands, channels, contexts, timeslice groups, device memory, and
// the trace records every run produces.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cosched/types.hpp"
#include "cosched/vm_graft.hpp"

namespace cosched {

enum class WarpSchedMode : std::uint8_t { Default, Graphics, Compute };

struct ComputeConfig {
  std::uint64_t local_memory_bytes = 0;
  WarpSchedMode warp_sched_mode = WarpSchedMode::Compute;

  bool operator==(const ComputeConfig&) const = default;
};

enum class CommandKind : std::uint8_t { KernelDispatch, GraphicsDraw, InitCompute, SemaphoreWrite, Sleep };

std::string_view to_string(CommandKind kind);

struct GpuCommand {
  CommandKind kind = CommandKind::Sleep;
  std::vector<VirtAddr> touched_vaddrs;
  double compute_frac = 0.0;
  double graphics_frac = 0.0;
  SimTime base_duration = 0.0;
  ComputeConfig init_config{};   // InitCompute
  VirtAddr semaphore_vaddr{};    // SemaphoreWrite
  std::uint64_t semaphore_value = 0;
  std::string label;             // free-form tag carried into the trace

  static GpuCommand kernel(SimTime duration, double compute_frac, std::vector<VirtAddr> touched = {});
  static GpuCommand draw(SimTime duration, double compute_frac, double graphics_frac,
                         std::vector<VirtAddr> touched = {});
  static GpuCommand sleep(SimTime duration);
  static GpuCommand init_compute(ComputeConfig config);
  static GpuCommand semaphore_write(VirtAddr where, std::uint64_t value);

  /// Throws InvalidArgument when the fractions/durations break the kind's rules.
  void validate() const;
};

using CommandBuffer = std::vector<GpuCommand>;

/// Physical location in device memory: backing page plus byte offset.
using PhysLoc = std::pair<std::uint64_t, std::uint64_t>;

struct GpFifoEntry {
  VirtAddr cmdbuf_vaddr;
  std::uint32_t length = 0;
  SpaceId space;          // address space the buffer was written through
  std::uint64_t seq = 0;  // device-wide submission sequence
};

/// Free-running cursors; slot = cursor % capacity.
struct UserD {
  std::uint64_t get = 0;
  std::uint64_t put = 0;
};

enum class ContextKind : std::uint8_t { Compute, Graphics };

struct Channel {
  ChannelId id;
  ContextId context;
  TsgId tsg;
  DoorbellToken token;
  std::vector<GpFifoEntry> ring;
  UserD userd;
  std::optional<ComputeConfig> compute_config;
  bool visible_to_app = true;
  bool forwarding = false;
  bool pending = false;
  bool faulted = false;

  // Engine-owned execution cursor.
  std::optional<CommandBuffer> current;  // buffer of the entry at `get`
  std::size_t cmd_index = 0;
  bool in_progress = false;  // current command started and not finished
  SimTime remaining = 0.0;   // remaining base work of the current command
  std::optional<SimTime> segment_start;

  std::size_t capacity() const { return ring.size(); }
};

struct Context {
  ContextId id;
  ContextKind kind = ContextKind::Compute;
  SpaceId space;
  TsgId tsg;
  std::vector<ChannelId> channels;
  bool fixed_function_ready = false;
  ComputeConfig compute_config{};          // Compute contexts: config native channels run with
  std::vector<ChannelId> forwarding_pool;  // Graphics contexts
};

struct TimesliceGroup {
  TsgId id;
  std::vector<ChannelId> channels;
  SimTime quantum = 0.1;
};

enum class FaultKind : std::uint8_t { PageFault, ExecutionFault };

struct FaultRecord {
  FaultKind kind = FaultKind::PageFault;
  ChannelId channel;
  std::optional<VirtAddr> vaddr;
  SimTime time = 0.0;
  std::string detail;
};

struct DeviceConfig {
  double compute_capacity = 1.0;
  double graphics_capacity = 1.0;
  SimTime quantum = 0.1;
  SimTime context_switch_penalty = 0.0;
  std::uint32_t hw_max_queues = 8;
  std::uint32_t ring_capacity = 1024;
  vm::VmConfig vm{};

  void validate() const;
};

// ---- trace records ----

struct TraceEvent {
  SimTime time = 0.0;
  std::string event;
  std::optional<std::uint32_t> channel;
  std::optional<std::uint32_t> tsg;
  std::optional<std::uint32_t> stream;
  std::optional<std::uint64_t> value;
  std::optional<std::uint64_t> vaddr;
  std::optional<SimTime> since;  // slice events: when the slice began
  std::string detail;
};

struct SliceRecord {
  TsgId tsg;
  SimTime start = 0.0;
  SimTime end = 0.0;
};

struct ExecSegment {
  ChannelId channel;
  TsgId tsg;
  std::uint64_t entry_seq = 0;
  std::size_t cmd_index = 0;
  SimTime start = 0.0;
  SimTime end = 0.0;
};

struct BufferCompletion {
  ChannelId channel;
  std::uint64_t entry_seq = 0;
  SimTime time = 0.0;
};

struct UtilSegment {
  SimTime start = 0.0;
  SimTime end = 0.0;
  double compute = 0.0;
  double graphics = 0.0;
  std::optional<TsgId> active_tsg;
};

struct Trace {
  std::vector<TraceEvent> events;
  std::vector<SliceRecord> slices;
  std::vector<ExecSegment> segments;
  std::vector<BufferCompletion> completions;
  std::vector<UtilSegment> utilization;
  std::vector<FaultRecord> faults;
};

/// Everything a simulated GPU owns. Mutated only by its Engine and Driver.
struct Device {
  explicit Device(DeviceConfig cfg);

  DeviceConfig config;
  vm::VmManager vm;
  std::vector<Context> contexts;
  std::vector<Channel> channels;
  std::vector<TimesliceGroup> tsgs;
  std::vector<TsgId> runlist;
  std::map<DoorbellToken, ChannelId> token_routes;
  std::map<PhysLoc, CommandBuffer> buffers;  // command buffers in device memory
  std::map<PhysLoc, std::uint64_t> words;    // semaphore payloads
  std::uint64_t next_entry_seq = 0;
  std::uint32_t next_token = 0x100;
  Trace trace;

  Channel& channel(ChannelId id) { return channels.at(id.value); }
  const Channel& channel(ChannelId id) const { return channels.at(id.value); }
  Context& context(ContextId id) { return contexts.at(id.value); }
  const Context& context(ContextId id) const { return contexts.at(id.value); }

  /// Creates a channel in `ctx`'s TSG with a fresh doorbell token.
  ChannelId add_channel(ContextId ctx, bool visible_to_app, bool forwarding);

  /// Resolves `va` through `space` to a device-memory location.
  std::optional<PhysLoc> resolve(SpaceId space, VirtAddr va);
};

}  // namespace cosched
