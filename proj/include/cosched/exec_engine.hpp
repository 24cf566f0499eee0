#pragma once

// Discrete-event execution of channel work.
//
// The runlist time-slices among TSGs: exactly one TSG is active at a time and
// it keeps the device until its quantum expires or it runs out of work. While
// active, the head command of every pending channel in the TSG runs
// concurrently. When the summed compute or graphics demand exceeds capacity,
// all running commands are slowed by the same factor (processor sharing),
// recomputed at every event boundary.

#include <cstdint>
#include <functional>
#include <optional>
#include <queue>
#include <vector>

#include "cosched/device.hpp"

namespace cosched {

struct MetricsTrace {
  SimTime makespan = 0.0;
  double compute_busy = 0.0;   // integral of compute utilization
  double graphics_busy = 0.0;  // integral of graphics utilization
  std::uint64_t faults = 0;
};

struct UtilizationSample {
  SimTime start = 0.0;
  SimTime end = 0.0;
  double compute_util = 0.0;
  double graphics_util = 0.0;
  std::optional<TsgId> active_tsg;  // TSG active for most of the interval
};

using TimerId = std::uint64_t;

class Engine {
 public:
  explicit Engine(Device& device);

  SimTime now() const { return clock_; }
  std::optional<TsgId> active_tsg() const { return active_; }

  /// Doorbell write: marks the channel owning `token` pending.
  void ring_doorbell(DoorbellToken token);

  /// Processes one event. Returns false when there is no device work and no
  /// pending timer.
  bool step();

  /// Steps until `done()` holds or nothing is left to do; returns `done()`.
  bool run_until(const std::function<bool()>& done);

  MetricsTrace run_until_idle();

  /// Host-side timer that fires `duration` from now; used for off-device
  /// phases. Timers never occupy device resources.
  TimerId start_timer(SimTime duration);
  bool timer_done(TimerId id) const;

  /// Clears a channel's fault so it can run again. The faulting command is
  /// skipped.
  void reset_channel(ChannelId id);

  MetricsTrace metrics() const;

  /// Per-interval averages of the utilization trace over [0, horizon);
  /// the horizon defaults to the current time.
  std::vector<UtilizationSample> sample_utilization(SimTime interval,
                                                    std::optional<SimTime> horizon = std::nullopt) const;

 private:
  std::optional<TsgId> pick_next_tsg() const;
  bool channel_runnable(const Channel& ch) const;
  bool tsg_has_work(TsgId tsg) const;
  void activate(TsgId tsg);
  void end_slice();
  void start_heads();
  // Advances `ch` through instantaneous commands and starts the next timed
  // one. Stops at the end of the current buffer when `within_buffer` is set.
  void advance_channel(Channel& ch, bool within_buffer);
  bool fetch(Channel& ch);
  bool begin_command(Channel& ch, const GpuCommand& cmd);
  void finish_command(Channel& ch);
  void finish_buffer(Channel& ch);
  void fault(Channel& ch, FaultKind kind, std::optional<VirtAddr> va, std::string detail);
  void advance_clock(SimTime to, double compute, double graphics);
  void fire_timers();
  std::optional<SimTime> next_timer() const;
  void log(std::string event, const Channel* ch, std::string detail = {});

  Device& dev_;
  SimTime clock_ = 0.0;
  std::optional<TsgId> active_;
  std::optional<TsgId> last_active_;
  std::optional<std::size_t> rr_index_;  // runlist position of the last activation
  SimTime slice_start_ = 0.0;
  SimTime slice_end_ = 0.0;

  using TimerEntry = std::pair<SimTime, TimerId>;
  std::priority_queue<TimerEntry, std::vector<TimerEntry>, std::greater<>> timers_;
  std::vector<bool> timer_fired_;
};

}  // namespace cosched
