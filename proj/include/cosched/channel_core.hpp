#pragma once

// GPU contexts, channels and streams as the user-mode drivers see them, plus
// stream redirection: a compute stream is drained, its submission state
// (ring, UserD cursors, doorbell token) is snapshotted, and the live fields
// are swapped to a forwarding channel provisioned inside a graphics context.
// The submit path itself never changes, so a bound stream pays nothing extra
// per launch.

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "cosched/device.hpp"
#include "cosched/exec_engine.hpp"
#include "cosched/vm_graft.hpp"

namespace cosched {

/// Submission state the stream writes through. Swapped on bind.
struct Snapshot {
  ChannelId ring_ref;
  ChannelId userd_ref;
  std::uint64_t get = 0;
  std::uint64_t put = 0;
  DoorbellToken token;

  bool operator==(const Snapshot&) const = default;
};

struct StreamHandle {
  StreamId id;
  ContextId context;
  ChannelId home;  // native channel
  ChannelId ring_ref;
  ChannelId userd_ref;
  DoorbellToken token;
  std::optional<Snapshot> saved_snapshot;  // present iff bound
  std::optional<ChannelId> forwarding;     // present iff bound
  VirtAddr sync_region;
  std::uint64_t next_semaphore_value = 1;
  VirtAddr pushbuffer;
  std::uint64_t pushbuffer_slots = 0;
  std::uint64_t pushbuffer_cursor = 0;
};

/// Test knobs for the fault triad. Production configurations leave them off.
struct DriverKnobs {
  bool skip_bootstrap = false;
  bool skip_graft = false;
};

class Driver {
 public:
  static constexpr std::uint64_t kPushbufferSlotBytes = 256;

  Driver(Device& device, Engine& engine, DriverKnobs knobs = {});

  /// New context with its own TSG, address space and one default channel.
  ContextId create_context(ContextKind kind);

  /// Streams submit through their own channel: the first stream of a context
  /// takes the default channel, later ones get a new channel in the same TSG.
  StreamId create_stream(ContextId ctx);

  std::vector<ChannelId> provision_forwarding_pool(ContextId graphics_ctx, std::uint32_t requested);

  /// Appends the trailing semaphore write and pushes the buffer through the
  /// stream's live channel fields. Returns the semaphore value that marks
  /// this buffer complete.
  std::uint64_t submit(StreamId stream, CommandBuffer commands);

  void bind(StreamId stream, ContextId graphics_ctx);
  void unbind(StreamId stream);

  /// Queues compute-state initialization as the channel's next command.
  void bootstrap(ChannelId channel, ComputeConfig config);

  /// Grows a compute context's local-memory pool; every forwarding channel
  /// bound to one of its streams is re-initialized.
  void set_local_memory(ContextId compute_ctx, std::uint64_t bytes);

  /// Current semaphore payload, read through the stream's own address space.
  std::uint64_t semaphore_value(StreamId stream);
  std::uint64_t last_issued(StreamId stream) const { return streams_.at(stream.value).next_semaphore_value - 1; }

  /// Runs the engine until the stream's semaphore reaches `value`. Throws
  /// Stalled when the engine goes idle first (e.g. a faulted channel).
  void wait(StreamId stream, std::uint64_t value);
  void drain(StreamId stream) { wait(stream, last_issued(stream)); }

  /// Snapshot-covered fields as they are right now.
  Snapshot live_state(StreamId stream) const;

  const StreamHandle& stream(StreamId id) const { return streams_.at(id.value); }
  std::size_t stream_count() const { return streams_.size(); }
  std::vector<ChannelId> free_forwarding(ContextId graphics_ctx) const;
  std::uint64_t submit_micro_ops() const { return submit_micro_ops_; }
  std::uint64_t submit_count() const { return submit_count_; }
  const std::map<std::pair<ContextId, ContextId>, vm::GraftReport>& graft_reports() const { return grafts_; }
  DriverKnobs& knobs() { return knobs_; }

 private:
  void log(std::string event, const Channel* ch, std::optional<StreamId> stream, std::string detail = {});
  // Writes `buffer` at `vaddr` in `space` and appends a GPFIFO entry on
  // `ring`; caller rings the doorbell.
  void push_entry(Channel& ring, Channel& userd, SpaceId space, VirtAddr vaddr, CommandBuffer buffer);
  VirtAddr map_fresh(SpaceId space, std::uint64_t n_pages);

  Device& dev_;
  Engine& engine_;
  DriverKnobs knobs_;
  std::vector<StreamHandle> streams_;
  std::map<ChannelId, StreamId> forwarding_owner_;
  std::map<ChannelId, std::pair<VirtAddr, std::uint64_t>> control_pushbuffers_;  // base, cursor
  std::map<ChannelId, ComputeConfig> bootstrapped_;  // last config queued per channel
  std::map<std::pair<ContextId, ContextId>, vm::GraftReport> grafts_;
  std::uint64_t submit_micro_ops_ = 0;
  std::uint64_t submit_count_ = 0;
};

}  // namespace cosched
