#include "cosched/channel_core.hpp"

#include <algorithm>

#include "cosched/error.hpp"

namespace cosched {

namespace {

constexpr std::uint64_t kDefaultLocalMemory = 64 * 1024;
constexpr std::uint64_t kControlSlots = 64;

}  // namespace

Driver::Driver(Device& device, Engine& engine, DriverKnobs knobs) : dev_(device), engine_(engine), knobs_(knobs) {}

void Driver::log(std::string event, const Channel* ch, std::optional<StreamId> stream, std::string detail) {
  TraceEvent ev;
  ev.time = engine_.now();
  ev.event = std::move(event);
  if (ch) {
    ev.channel = ch->id.value;
    ev.tsg = ch->tsg.value;
  }
  if (stream) ev.stream = stream->value;
  ev.detail = std::move(detail);
  dev_.trace.events.push_back(std::move(ev));
}

VirtAddr Driver::map_fresh(SpaceId space, std::uint64_t n_pages) {
  const VirtAddr va = dev_.vm.allocate(space, n_pages, SizeClass::Small);
  const auto pages = dev_.vm.alloc_phys(SizeClass::Small, n_pages);
  dev_.vm.map_range(space, va, pages);
  return va;
}

ContextId Driver::create_context(ContextKind kind) {
  const ContextId id{static_cast<std::uint32_t>(dev_.contexts.size())};
  const TsgId tsg{static_cast<std::uint32_t>(dev_.tsgs.size())};
  dev_.tsgs.push_back({tsg, {}, dev_.config.quantum});
  dev_.runlist.push_back(tsg);

  Context ctx;
  ctx.id = id;
  ctx.kind = kind;
  ctx.space = dev_.vm.create_space(kind == ContextKind::Compute ? vm::RangePolicy::HighRange
                                                                : vm::RangePolicy::LowRange);
  ctx.tsg = tsg;
  ctx.fixed_function_ready = kind == ContextKind::Graphics;
  ctx.compute_config = ComputeConfig{kDefaultLocalMemory, WarpSchedMode::Compute};
  dev_.contexts.push_back(std::move(ctx));
  const auto ch = dev_.add_channel(id, true, false);
  log("create_context", &dev_.channel(ch), std::nullopt, kind == ContextKind::Compute ? "compute" : "graphics");
  return id;
}

StreamId Driver::create_stream(ContextId ctx_id) {
  auto& ctx = dev_.context(ctx_id);
  const ChannelId def = ctx.channels.front();
  const bool default_taken =
      std::any_of(streams_.begin(), streams_.end(), [&](const StreamHandle& s) { return s.home == def; });
  const ChannelId home = default_taken ? dev_.add_channel(ctx_id, true, false) : def;
  const auto& ch = dev_.channel(home);

  StreamHandle st;
  st.id = StreamId{static_cast<std::uint32_t>(streams_.size())};
  st.context = ctx_id;
  st.home = home;
  st.ring_ref = home;
  st.userd_ref = home;
  st.token = ch.token;
  const std::uint64_t page = dev_.vm.geometry().page_size(SizeClass::Small);
  st.pushbuffer_slots = ch.capacity();
  const std::uint64_t pb_pages = (st.pushbuffer_slots * kPushbufferSlotBytes + page - 1) / page;
  st.pushbuffer = map_fresh(dev_.context(ctx_id).space, pb_pages);
  st.sync_region = map_fresh(dev_.context(ctx_id).space, 1);
  streams_.push_back(st);
  log("create_stream", &ch, st.id);
  return st.id;
}

std::vector<ChannelId> Driver::provision_forwarding_pool(ContextId graphics_ctx, std::uint32_t requested) {
  if (dev_.context(graphics_ctx).kind != ContextKind::Graphics)
    throw SimError(ErrorCode::InvalidArgument, "forwarding channels live in graphics contexts");
  const std::uint32_t limit = dev_.config.hw_max_queues - 1;  // one queue stays with the application
  const auto have = static_cast<std::uint32_t>(dev_.context(graphics_ctx).forwarding_pool.size());
  const std::uint32_t count = have >= limit ? 0 : std::min(requested, limit - have);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto id = dev_.add_channel(graphics_ctx, false, true);
    dev_.context(graphics_ctx).forwarding_pool.push_back(id);
    log("provision", &dev_.channel(id), std::nullopt);
  }
  return dev_.context(graphics_ctx).forwarding_pool;
}

std::vector<ChannelId> Driver::free_forwarding(ContextId graphics_ctx) const {
  std::vector<ChannelId> out;
  for (auto id : dev_.context(graphics_ctx).forwarding_pool)
    if (!forwarding_owner_.contains(id)) out.push_back(id);
  return out;
}

void Driver::push_entry(Channel& ring, Channel& userd, SpaceId space, VirtAddr vaddr, CommandBuffer buffer) {
  auto loc = dev_.resolve(space, vaddr);
  if (!loc) throw SimError(ErrorCode::InvalidArgument, "command buffer address is not mapped in its context");
  const auto length = static_cast<std::uint32_t>(buffer.size());
  dev_.buffers[*loc] = std::move(buffer);
  ring.ring[userd.userd.put % ring.capacity()] = GpFifoEntry{vaddr, length, space, dev_.next_entry_seq++};
  ++userd.userd.put;
}

std::uint64_t Driver::submit(StreamId stream, CommandBuffer commands) {
  for (const auto& cmd : commands) cmd.validate();
  auto& st = streams_.at(stream.value);
  auto& ring = dev_.channel(st.ring_ref);
  auto& userd = dev_.channel(st.userd_ref);
  if (userd.userd.put - userd.userd.get >= ring.capacity())
    throw SimError(ErrorCode::RingFull, "channel " + std::to_string(ring.id.value) + " has no free GPFIFO slot");

  const std::uint64_t value = st.next_semaphore_value++;
  commands.push_back(GpuCommand::semaphore_write(st.sync_region, value));
  const VirtAddr slot = st.pushbuffer + (st.pushbuffer_cursor++ % st.pushbuffer_slots) * kPushbufferSlotBytes;

  // buffer write, GPFIFO append, PUT advance, doorbell
  push_entry(ring, userd, dev_.context(st.context).space, slot, std::move(commands));
  submit_micro_ops_ += 3;
  engine_.ring_doorbell(st.token);
  ++submit_micro_ops_;
  ++submit_count_;

  TraceEvent ev;
  ev.time = engine_.now();
  ev.event = "submit";
  ev.channel = ring.id.value;
  ev.tsg = ring.tsg.value;
  ev.stream = stream.value;
  ev.value = value;
  dev_.trace.events.push_back(std::move(ev));
  return value;
}

Snapshot Driver::live_state(StreamId stream) const {
  const auto& st = streams_.at(stream.value);
  const auto& userd = dev_.channel(st.userd_ref).userd;
  return Snapshot{st.ring_ref, st.userd_ref, userd.get, userd.put, st.token};
}

void Driver::bind(StreamId stream, ContextId graphics_ctx) {
  auto& st = streams_.at(stream.value);
  if (st.saved_snapshot) throw SimError(ErrorCode::AlreadyBound, "stream " + std::to_string(stream.value));
  const auto& gctx = dev_.context(graphics_ctx);
  if (gctx.kind != ContextKind::Graphics)
    throw SimError(ErrorCode::InvalidArgument, "streams bind to graphics contexts");
  if (dev_.context(st.context).kind != ContextKind::Compute)
    throw SimError(ErrorCode::InvalidArgument, "only compute streams can be redirected");
  const auto free = free_forwarding(graphics_ctx);
  if (free.empty()) throw SimError(ErrorCode::PoolExhausted, "no free forwarding channel");

  drain(stream);
  const ChannelId fwd_id = free.front();
  const Snapshot snap = live_state(stream);

  const auto& cctx = dev_.context(st.context);
  if (!knobs_.skip_bootstrap) {
    auto it = bootstrapped_.find(fwd_id);
    if (it == bootstrapped_.end() || it->second != cctx.compute_config) bootstrap(fwd_id, cctx.compute_config);
  }
  const auto key = std::make_pair(st.context, graphics_ctx);
  if (!knobs_.skip_graft && !grafts_.contains(key)) grafts_[key] = dev_.vm.graft(cctx.space, gctx.space);

  const auto& fwd = dev_.channel(fwd_id);
  st.saved_snapshot = snap;
  st.forwarding = fwd_id;
  st.ring_ref = fwd_id;
  st.userd_ref = fwd_id;
  st.token = fwd.token;
  forwarding_owner_[fwd_id] = stream;
  log("bind", &fwd, stream);
}

void Driver::unbind(StreamId stream) {
  auto& st = streams_.at(stream.value);
  if (!st.saved_snapshot) throw SimError(ErrorCode::NotBound, "stream " + std::to_string(stream.value));
  drain(stream);
  const ChannelId fwd_id = *st.forwarding;
  const Snapshot snap = *st.saved_snapshot;
  st.ring_ref = snap.ring_ref;
  st.userd_ref = snap.userd_ref;
  st.token = snap.token;
  st.saved_snapshot.reset();
  st.forwarding.reset();
  forwarding_owner_.erase(fwd_id);
  log("unbind", &dev_.channel(fwd_id), stream);
}

void Driver::bootstrap(ChannelId channel, ComputeConfig config) {
  auto& ch = dev_.channel(channel);
  if (dev_.context(ch.context).kind != ContextKind::Graphics)
    throw SimError(ErrorCode::InvalidArgument, "bootstrap targets channels in a graphics TSG");
  const SpaceId space = dev_.context(ch.context).space;
  auto it = control_pushbuffers_.find(channel);
  if (it == control_pushbuffers_.end()) {
    const std::uint64_t page = dev_.vm.geometry().page_size(SizeClass::Small);
    const std::uint64_t pages = (kControlSlots * kPushbufferSlotBytes + page - 1) / page;
    it = control_pushbuffers_.emplace(channel, std::make_pair(map_fresh(space, pages), std::uint64_t{0})).first;
  }
  if (ch.userd.put - ch.userd.get >= ch.capacity())
    throw SimError(ErrorCode::RingFull, "channel " + std::to_string(channel.value) + " has no free GPFIFO slot");
  auto& [base, cursor] = it->second;
  const VirtAddr slot = base + (cursor++ % kControlSlots) * kPushbufferSlotBytes;
  push_entry(ch, ch, space, slot, {GpuCommand::init_compute(config)});
  engine_.ring_doorbell(ch.token);
  bootstrapped_[channel] = config;
  std::optional<StreamId> owner;
  if (auto o = forwarding_owner_.find(channel); o != forwarding_owner_.end()) owner = o->second;
  log("bootstrap", &ch, owner, std::to_string(config.local_memory_bytes));
}

void Driver::set_local_memory(ContextId compute_ctx, std::uint64_t bytes) {
  auto& ctx = dev_.context(compute_ctx);
  if (ctx.kind != ContextKind::Compute)
    throw SimError(ErrorCode::InvalidArgument, "local memory belongs to compute contexts");
  if (bytes <= ctx.compute_config.local_memory_bytes) return;
  ctx.compute_config.local_memory_bytes = bytes;
  const ComputeConfig config = ctx.compute_config;
  for (auto id : ctx.channels) dev_.channel(id).compute_config = config;
  for (const auto& st : streams_) {
    if (st.context == compute_ctx && st.forwarding && !knobs_.skip_bootstrap) bootstrap(*st.forwarding, config);
  }
}

std::uint64_t Driver::semaphore_value(StreamId stream) {
  const auto& st = streams_.at(stream.value);
  auto loc = dev_.resolve(dev_.context(st.context).space, st.sync_region);
  if (!loc) return 0;
  auto it = dev_.words.find(*loc);
  return it == dev_.words.end() ? 0 : it->second;
}

void Driver::wait(StreamId stream, std::uint64_t value) {
  if (!engine_.run_until([&] { return semaphore_value(stream) >= value; }))
    throw SimError(ErrorCode::Stalled, "stream " + std::to_string(stream.value) + " never reached semaphore " +
                                           std::to_string(value));
}

}  // namespace cosched
