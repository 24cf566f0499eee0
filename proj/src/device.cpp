#include "cosched/device.hpp"

#include "cosched/error.hpp"

namespace cosched {

std::string_view to_string(CommandKind kind) {
  switch (kind) {
    case CommandKind::KernelDispatch: return "kernel";
    case CommandKind::GraphicsDraw: return "draw";
    case CommandKind::InitCompute: return "init_compute";
    case CommandKind::SemaphoreWrite: return "semaphore";
    case CommandKind::Sleep: return "sleep";
  }
  return "unknown";
}

GpuCommand GpuCommand::kernel(SimTime duration, double compute_frac, std::vector<VirtAddr> touched) {
  GpuCommand c;
  c.kind = CommandKind::KernelDispatch;
  c.base_duration = duration;
  c.compute_frac = compute_frac;
  c.touched_vaddrs = std::move(touched);
  return c;
}

GpuCommand GpuCommand::draw(SimTime duration, double compute_frac, double graphics_frac,
                            std::vector<VirtAddr> touched) {
  GpuCommand c;
  c.kind = CommandKind::GraphicsDraw;
  c.base_duration = duration;
  c.compute_frac = compute_frac;
  c.graphics_frac = graphics_frac;
  c.touched_vaddrs = std::move(touched);
  return c;
}

GpuCommand GpuCommand::sleep(SimTime duration) {
  GpuCommand c;
  c.kind = CommandKind::Sleep;
  c.base_duration = duration;
  return c;
}

GpuCommand GpuCommand::init_compute(ComputeConfig config) {
  GpuCommand c;
  c.kind = CommandKind::InitCompute;
  c.init_config = config;
  return c;
}

GpuCommand GpuCommand::semaphore_write(VirtAddr where, std::uint64_t value) {
  GpuCommand c;
  c.kind = CommandKind::SemaphoreWrite;
  c.semaphore_vaddr = where;
  c.semaphore_value = value;
  return c;
}

void GpuCommand::validate() const {
  auto frac_ok = [](double f) { return f >= 0.0 && f <= 1.0; };
  if (!frac_ok(compute_frac) || !frac_ok(graphics_frac))
    throw SimError(ErrorCode::InvalidArgument, "resource fractions must lie in [0, 1]");
  if (base_duration < 0.0) throw SimError(ErrorCode::InvalidArgument, "negative command duration");
  if (kind == CommandKind::KernelDispatch && graphics_frac != 0.0)
    throw SimError(ErrorCode::InvalidArgument, "kernels do not use graphics units");
  if ((kind == CommandKind::SemaphoreWrite || kind == CommandKind::InitCompute) && base_duration != 0.0)
    throw SimError(ErrorCode::InvalidArgument, "semaphore and init commands take no time");
}

void DeviceConfig::validate() const {
  if (!(compute_capacity > 0.0) || !(graphics_capacity > 0.0))
    throw SimError(ErrorCode::InvalidArgument, "resource capacities must be positive");
  if (!(quantum > 0.0)) throw SimError(ErrorCode::InvalidArgument, "quantum must be positive");
  if (context_switch_penalty < 0.0) throw SimError(ErrorCode::InvalidArgument, "negative context-switch penalty");
  if (hw_max_queues < 1) throw SimError(ErrorCode::InvalidArgument, "hw_max_queues must be at least 1");
  if (ring_capacity < 1) throw SimError(ErrorCode::InvalidArgument, "ring_capacity must be at least 1");
  vm.geometry.validate();
}

Device::Device(DeviceConfig cfg) : config(cfg), vm((cfg.validate(), cfg.vm)) {}

ChannelId Device::add_channel(ContextId ctx_id, bool visible_to_app, bool forwarding) {
  auto& ctx = context(ctx_id);
  Channel ch;
  ch.id = ChannelId{static_cast<std::uint32_t>(channels.size())};
  ch.context = ctx_id;
  ch.tsg = ctx.tsg;
  ch.token = DoorbellToken{next_token++};
  ch.ring.resize(config.ring_capacity);
  ch.visible_to_app = visible_to_app;
  ch.forwarding = forwarding;
  if (ctx.kind == ContextKind::Compute) ch.compute_config = ctx.compute_config;
  token_routes.emplace(ch.token, ch.id);
  ctx.channels.push_back(ch.id);
  tsgs.at(ctx.tsg.value).channels.push_back(ch.id);
  channels.push_back(std::move(ch));
  return channels.back().id;
}

std::optional<PhysLoc> Device::resolve(SpaceId space, VirtAddr va) {
  auto r = vm.translate(space, va);
  if (auto* t = std::get_if<vm::Translation>(&r)) return PhysLoc{t->page.id, t->offset};
  return std::nullopt;
}

}  // namespace cosched
