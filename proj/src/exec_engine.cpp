#include "cosched/exec_engine.hpp"

#include <algorithm>
#include <cmath>

#include "cosched/error.hpp"

namespace cosched {

namespace {

constexpr double kWorkEpsilon = 1e-9;
constexpr double kTimeEpsilon = 1e-12;

}  // namespace

Engine::Engine(Device& device) : dev_(device) {}

void Engine::log(std::string event, const Channel* ch, std::string detail) {
  TraceEvent ev;
  ev.time = clock_;
  ev.event = std::move(event);
  if (ch) {
    ev.channel = ch->id.value;
    ev.tsg = ch->tsg.value;
  }
  ev.detail = std::move(detail);
  dev_.trace.events.push_back(std::move(ev));
}

void Engine::ring_doorbell(DoorbellToken token) {
  auto it = dev_.token_routes.find(token);
  if (it == dev_.token_routes.end())
    throw SimError(ErrorCode::InvalidArgument, "doorbell token " + std::to_string(token.value) + " is not routed");
  auto& ch = dev_.channel(it->second);
  ch.pending = true;
  TraceEvent ev;
  ev.time = clock_;
  ev.event = "doorbell";
  ev.channel = ch.id.value;
  ev.tsg = ch.tsg.value;
  ev.value = token.value;
  dev_.trace.events.push_back(std::move(ev));
}

bool Engine::channel_runnable(const Channel& ch) const { return ch.pending && !ch.faulted; }

bool Engine::tsg_has_work(TsgId tsg) const {
  const auto& group = dev_.tsgs.at(tsg.value);
  return std::any_of(group.channels.begin(), group.channels.end(),
                     [&](ChannelId id) { return channel_runnable(dev_.channel(id)); });
}

std::optional<TsgId> Engine::pick_next_tsg() const {
  const std::size_t n = dev_.runlist.size();
  const std::size_t start = rr_index_ ? *rr_index_ + 1 : 0;
  for (std::size_t k = 0; k < n; ++k) {
    const TsgId tsg = dev_.runlist[(start + k) % n];
    if (tsg_has_work(tsg)) return tsg;
  }
  return std::nullopt;
}

void Engine::activate(TsgId tsg) {
  const SimTime penalty = dev_.config.context_switch_penalty;
  if (penalty > 0.0 && last_active_ && *last_active_ != tsg) advance_clock(clock_ + penalty, 0.0, 0.0);
  active_ = tsg;
  const auto pos = std::find(dev_.runlist.begin(), dev_.runlist.end(), tsg);
  rr_index_ = static_cast<std::size_t>(pos - dev_.runlist.begin());
  slice_start_ = clock_;
  slice_end_ = clock_ + dev_.tsgs.at(tsg.value).quantum;
}

void Engine::end_slice() {
  const TsgId tsg = *active_;
  for (auto id : dev_.tsgs.at(tsg.value).channels) {
    auto& ch = dev_.channel(id);
    if (ch.segment_start) {
      dev_.trace.segments.push_back({ch.id, ch.tsg, dev_.channel(id).ring[ch.userd.get % ch.capacity()].seq,
                                     ch.cmd_index, *ch.segment_start, clock_});
      ch.segment_start.reset();
    }
  }
  dev_.trace.slices.push_back({tsg, slice_start_, clock_});
  TraceEvent ev;
  ev.time = clock_;
  ev.event = "slice";
  ev.tsg = tsg.value;
  ev.since = slice_start_;
  dev_.trace.events.push_back(std::move(ev));
  last_active_ = active_;
  active_.reset();
}

void Engine::start_heads() {
  for (auto id : dev_.tsgs.at(active_->value).channels) {
    auto& ch = dev_.channel(id);
    if (ch.faulted) continue;
    if (ch.in_progress) {
      if (!ch.segment_start) ch.segment_start = clock_;
      continue;
    }
    if (ch.pending) advance_channel(ch, false);
  }
}

bool Engine::fetch(Channel& ch) {
  const auto& entry = ch.ring[ch.userd.get % ch.capacity()];
  auto loc = dev_.resolve(entry.space, entry.cmdbuf_vaddr);
  auto it = loc ? dev_.buffers.find(*loc) : dev_.buffers.end();
  if (it == dev_.buffers.end()) {
    fault(ch, FaultKind::PageFault, entry.cmdbuf_vaddr, "command buffer not resolvable");
    return false;
  }
  ch.current = it->second;
  ch.cmd_index = 0;
  return true;
}

void Engine::advance_channel(Channel& ch, bool within_buffer) {
  while (!ch.faulted) {
    if (!ch.current) {
      if (within_buffer) return;
      if (ch.userd.get == ch.userd.put) {
        ch.pending = false;
        return;
      }
      if (!fetch(ch)) return;
    }
    if (ch.cmd_index >= ch.current->size()) {
      finish_buffer(ch);
      if (within_buffer) return;
      continue;
    }
    const GpuCommand cmd = (*ch.current)[ch.cmd_index];
    if (!begin_command(ch, cmd)) return;
    if (cmd.base_duration > 0.0) {
      ch.in_progress = true;
      ch.remaining = cmd.base_duration;
      ch.segment_start = clock_;
      return;
    }
    ++ch.cmd_index;
  }
}

bool Engine::begin_command(Channel& ch, const GpuCommand& cmd) {
  const auto& ctx = dev_.context(ch.context);
  for (auto va : cmd.touched_vaddrs) {
    if (!dev_.resolve(ctx.space, va)) {
      fault(ch, FaultKind::PageFault, va, std::string(to_string(cmd.kind)) + " touched an unmapped address");
      return false;
    }
  }
  switch (cmd.kind) {
    case CommandKind::KernelDispatch:
      if (!ch.compute_config) {
        fault(ch, FaultKind::ExecutionFault, std::nullopt, "kernel on a channel without compute state");
        return false;
      }
      break;
    case CommandKind::GraphicsDraw:
      if (!ctx.fixed_function_ready) {
        fault(ch, FaultKind::ExecutionFault, std::nullopt, "draw in a context without fixed-function state");
        return false;
      }
      break;
    case CommandKind::SemaphoreWrite: {
      auto loc = dev_.resolve(ctx.space, cmd.semaphore_vaddr);
      if (!loc) {
        fault(ch, FaultKind::PageFault, cmd.semaphore_vaddr, "semaphore region unmapped");
        return false;
      }
      dev_.words[*loc] = cmd.semaphore_value;
      TraceEvent ev;
      ev.time = clock_;
      ev.event = "semaphore";
      ev.channel = ch.id.value;
      ev.tsg = ch.tsg.value;
      ev.value = cmd.semaphore_value;
      ev.vaddr = cmd.semaphore_vaddr.value;
      dev_.trace.events.push_back(std::move(ev));
      break;
    }
    case CommandKind::InitCompute:
      ch.compute_config = cmd.init_config;
      log("init_compute", &ch, std::to_string(cmd.init_config.local_memory_bytes));
      break;
    case CommandKind::Sleep:
      break;
  }
  return true;
}

void Engine::finish_command(Channel& ch) {
  if (ch.segment_start) {
    dev_.trace.segments.push_back(
        {ch.id, ch.tsg, ch.ring[ch.userd.get % ch.capacity()].seq, ch.cmd_index, *ch.segment_start, clock_});
    ch.segment_start.reset();
  }
  ch.in_progress = false;
  ch.remaining = 0.0;
  ++ch.cmd_index;
  advance_channel(ch, true);
}

void Engine::finish_buffer(Channel& ch) {
  const auto seq = ch.ring[ch.userd.get % ch.capacity()].seq;
  dev_.trace.completions.push_back({ch.id, seq, clock_});
  TraceEvent ev;
  ev.time = clock_;
  ev.event = "complete";
  ev.channel = ch.id.value;
  ev.tsg = ch.tsg.value;
  ev.value = seq;
  dev_.trace.events.push_back(std::move(ev));
  ch.current.reset();
  ch.cmd_index = 0;
  ++ch.userd.get;
  if (ch.userd.get == ch.userd.put) ch.pending = false;
}

void Engine::fault(Channel& ch, FaultKind kind, std::optional<VirtAddr> va, std::string detail) {
  ch.faulted = true;
  ch.in_progress = false;
  if (ch.segment_start) {
    dev_.trace.segments.push_back(
        {ch.id, ch.tsg, ch.ring[ch.userd.get % ch.capacity()].seq, ch.cmd_index, *ch.segment_start, clock_});
    ch.segment_start.reset();
  }
  dev_.trace.faults.push_back({kind, ch.id, va, clock_, detail});
  TraceEvent ev;
  ev.time = clock_;
  ev.event = "fault";
  ev.channel = ch.id.value;
  ev.tsg = ch.tsg.value;
  if (va) ev.vaddr = va->value;
  ev.detail = (kind == FaultKind::PageFault ? "page_fault: " : "execution_fault: ") + detail;
  dev_.trace.events.push_back(std::move(ev));
}

void Engine::reset_channel(ChannelId id) {
  auto& ch = dev_.channel(id);
  if (!ch.faulted) return;
  ch.faulted = false;
  if (ch.current) ++ch.cmd_index;
}

void Engine::advance_clock(SimTime to, double compute, double graphics) {
  if (to <= clock_) return;
  auto& util = dev_.trace.utilization;
  if (!util.empty() && util.back().end == clock_ && util.back().compute == compute &&
      util.back().graphics == graphics && util.back().active_tsg == active_) {
    util.back().end = to;
  } else {
    util.push_back({clock_, to, compute, graphics, active_});
  }
  clock_ = to;
}

TimerId Engine::start_timer(SimTime duration) {
  if (duration < 0.0) throw SimError(ErrorCode::InvalidArgument, "negative timer duration");
  const TimerId id = timer_fired_.size();
  timer_fired_.push_back(false);
  timers_.push({clock_ + duration, id});
  fire_timers();
  return id;
}

bool Engine::timer_done(TimerId id) const { return id < timer_fired_.size() && timer_fired_[id]; }

std::optional<SimTime> Engine::next_timer() const {
  if (timers_.empty()) return std::nullopt;
  return timers_.top().first;
}

void Engine::fire_timers() {
  while (!timers_.empty() && timers_.top().first <= clock_ + kTimeEpsilon) {
    timer_fired_[timers_.top().second] = true;
    timers_.pop();
  }
}

bool Engine::step() {
  if (!active_) {
    if (auto next = pick_next_tsg()) {
      activate(*next);
      return true;
    }
    auto t = next_timer();
    if (!t) return false;
    advance_clock(std::max(*t, clock_), 0.0, 0.0);
    fire_timers();
    return true;
  }

  start_heads();

  const auto& group = dev_.tsgs.at(active_->value);
  double compute = 0.0;
  double graphics = 0.0;
  std::vector<Channel*> running;
  for (auto id : group.channels) {
    auto& ch = dev_.channel(id);
    if (!ch.in_progress || ch.faulted) continue;
    const auto& cmd = (*ch.current)[ch.cmd_index];
    compute += cmd.compute_frac;
    graphics += cmd.graphics_frac;
    running.push_back(&ch);
  }
  if (running.empty()) {
    end_slice();
    return true;
  }

  const double stretch =
      std::max({compute / dev_.config.compute_capacity, graphics / dev_.config.graphics_capacity, 1.0});
  SimTime t_next = slice_end_;
  for (auto* ch : running) t_next = std::min(t_next, clock_ + ch->remaining * stretch);
  if (auto timer = next_timer()) t_next = std::min(t_next, std::max(*timer, clock_));

  const SimTime elapsed = t_next - clock_;
  advance_clock(t_next, compute / stretch / dev_.config.compute_capacity,
                graphics / stretch / dev_.config.graphics_capacity);
  for (auto* ch : running) {
    ch->remaining -= elapsed / stretch;
    if (ch->remaining <= kWorkEpsilon) finish_command(*ch);
  }
  fire_timers();

  if (clock_ >= slice_end_ - kTimeEpsilon || !tsg_has_work(*active_)) end_slice();
  return true;
}

bool Engine::run_until(const std::function<bool()>& done) {
  while (!done()) {
    if (!step()) return done();
  }
  return true;
}

MetricsTrace Engine::run_until_idle() {
  while (step()) {
  }
  return metrics();
}

MetricsTrace Engine::metrics() const {
  MetricsTrace m;
  m.makespan = clock_;
  for (const auto& seg : dev_.trace.utilization) {
    m.compute_busy += seg.compute * (seg.end - seg.start);
    m.graphics_busy += seg.graphics * (seg.end - seg.start);
  }
  m.faults = dev_.trace.faults.size();
  return m;
}

std::vector<UtilizationSample> Engine::sample_utilization(SimTime interval, std::optional<SimTime> horizon) const {
  if (!(interval > 0.0)) throw SimError(ErrorCode::InvalidArgument, "sampling interval must be positive");
  const SimTime end = horizon.value_or(clock_);
  const auto bins = static_cast<std::size_t>(std::ceil(end / interval - kTimeEpsilon));
  std::vector<UtilizationSample> out(bins);
  std::vector<std::map<std::uint32_t, SimTime>> tsg_time(bins);
  for (std::size_t i = 0; i < bins; ++i) {
    out[i].start = static_cast<double>(i) * interval;
    out[i].end = std::min(end, static_cast<double>(i + 1) * interval);
  }
  for (const auto& seg : dev_.trace.utilization) {
    if (seg.start >= end) break;
    auto first = static_cast<std::size_t>(seg.start / interval);
    for (std::size_t i = first; i < bins && out[i].start < seg.end; ++i) {
      const SimTime overlap = std::min(seg.end, out[i].end) - std::max(seg.start, out[i].start);
      if (overlap <= 0.0) continue;
      out[i].compute_util += seg.compute * overlap;
      out[i].graphics_util += seg.graphics * overlap;
      if (seg.active_tsg) tsg_time[i][seg.active_tsg->value] += overlap;
    }
  }
  for (std::size_t i = 0; i < bins; ++i) {
    const SimTime width = out[i].end - out[i].start;
    if (width > 0.0) {
      out[i].compute_util /= width;
      out[i].graphics_util /= width;
    }
    SimTime best = 0.0;
    for (const auto& [tsg, t] : tsg_time[i]) {
      if (t > best) {
        best = t;
        out[i].active_tsg = TsgId{tsg};
      }
    }
  }
  return out;
}

}  // namespace cosched
