#include "cosched/workload_api.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <tuple>

#include "cosched/error.hpp"

namespace cosched::workload {

namespace {

constexpr std::uint64_t kStatePagesPerEnv = 1;
constexpr std::uint64_t kFramePagesPerEnv = 1;

struct NamedPreset {
  std::string_view name;
  PhaseCost cost;
};

PhaseCost make(double sim_base, double sim_per_env, double render_base, double render_per_env,
               double inference_base = 0.0, double inference_per_env = 0.0) {
  PhaseCost c;
  c.sim_base = sim_base;
  c.sim_per_env = sim_per_env;
  c.render_base = render_base;
  c.render_per_env = render_per_env;
  c.inference_base = inference_base;
  c.inference_per_env = inference_per_env;
  return c;
}

// Coefficients are calibration fiction: chosen for plausible curve shapes,
// not fitted to any measurement.
const std::array<NamedPreset, 6>& presets() {
  static const std::array<NamedPreset, 6> table{{
      {"default", PhaseCost{}},
      {"StackCube", PhaseCost{}},
      {"AntRun", make(1.2, 0.003, 0.0, 0.008)},
      {"HumanoidRun", make(2.4, 0.004, 0.0, 0.008)},
      {"Balanced", make(1.0, 0.0, 1.0, 0.0)},
      {"VlaRollout", make(0.2, 0.004, 0.0, 0.006, 0.0, 0.03)},
  }};
  return table;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw SimError(ErrorCode::InvalidArgument, what);
}

void violation(const std::string& what) { throw SimError(ErrorCode::DependencyViolation, what); }

}  // namespace

std::string_view to_string(Phase phase) {
  switch (phase) {
    case Phase::Inference: return "inference";
    case Phase::Sim: return "sim";
    case Phase::Render: return "render";
  }
  return "?";
}

std::string_view to_string(DatagenMode mode) {
  return mode == DatagenMode::Sequential ? "sequential" : "pipelined";
}

std::string_view to_string(RolloutMode mode) {
  return mode == RolloutMode::Sequential ? "sequential" : "interleaved";
}

void PhaseCost::validate() const {
  for (double v : {sim_base, sim_per_env, render_base, render_per_env, inference_base, inference_per_env})
    require(v >= 0.0, "cost coefficients must be non-negative");
  for (double f : {sim_compute_frac, render_compute_frac, render_graphics_frac})
    require(f >= 0.0 && f <= 1.0, "demand fractions must lie in [0, 1]");
  require(jitter >= 0.0 && jitter < 1.0, "jitter must lie in [0, 1)");
}

std::optional<PhaseCost> preset(std::string_view name) {
  for (const auto& p : presets())
    if (p.name == name) return p.cost;
  return std::nullopt;
}

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& p : presets()) out.emplace_back(p.name);
  return out;
}

void EpisodeSpec::validate() const {
  require(steps >= 1, "episode needs at least one step");
  require(batch >= 1, "batch must be at least 1");
}

void RolloutSpec::validate() const {
  require(steps >= 1, "rollout needs at least one step");
  require(batch >= 1, "batch must be at least 1");
  require(groups >= 1, "groups must be at least 1");
  if (mode == RolloutMode::Interleaved)
    require(batch % groups == 0, "groups must divide the batch");
}

// ---- Session ----

Session::Session(DeviceConfig device, PhaseCost costs, DriverKnobs knobs, std::uint64_t seed)
    : gpu_(device, knobs), costs_(costs), rng_(seed) {
  costs_.validate();
  auto& drv = gpu_.driver();
  compute_ctx_ = drv.create_context(ContextKind::Compute);
  graphics_ctx_ = drv.create_context(ContextKind::Graphics);
  sim_stream_ = drv.create_stream(compute_ctx_);
  render_stream_ = drv.create_stream(graphics_ctx_);
  drv.provision_forwarding_pool(graphics_ctx_, 1);
}

void Session::custream_bind(StreamId stream) { gpu_.driver().bind(stream, graphics_ctx_); }

void Session::custream_unbind(StreamId stream) { gpu_.driver().unbind(stream); }

VirtAddr Session::map_buffer(SpaceId space, std::uint64_t pages) {
  auto& vm = gpu_.vm();
  const VirtAddr va = vm.allocate(space, pages, SizeClass::Small);
  const auto phys = vm.alloc_phys(SizeClass::Small, pages);
  vm.map_range(space, va, phys);
  return va;
}

Env Session::create_env(std::uint32_t batch, std::uint32_t group) {
  require(batch >= 1, "batch must be at least 1");
  const auto& dev = gpu_.device();
  Env env;
  env.group = group;
  env.batch = batch;
  env.state = map_buffer(dev.context(compute_ctx_).space, kStatePagesPerEnv);
  env.frame = map_buffer(dev.context(graphics_ctx_).space, kFramePagesPerEnv);
  return env;
}

SimTime Session::sample(SimTime nominal) {
  if (costs_.jitter == 0.0) return nominal;
  std::uniform_real_distribution<double> u(-costs_.jitter, costs_.jitter);
  return nominal * (1.0 + u(rng_));
}

void Session::record_device_phase(Phase phase, std::uint32_t k, std::uint32_t group, StreamId stream) {
  const auto& st = gpu_.driver().stream(stream);
  device_phases_.push_back({phase, k, group, st.ring_ref, gpu_.device().next_entry_seq - 1});
}

AsyncHandle Session::step_async(Env& env, std::uint32_t k) {
  if (env.sims_issued != env.sims_done) violation("step_async while the previous step is in flight");
  if (k != env.sims_issued) violation("step " + std::to_string(k) + " issued out of order");
  if (env.uses_inference && env.inferences_done <= k)
    violation("step " + std::to_string(k) + " issued before its inference completed");
  const SimTime d = sample(costs_.sim(env.batch));
  auto cmd = GpuCommand::kernel(d, costs_.sim_compute_frac, {env.state});
  cmd.label = "sim";
  const auto value = gpu_.driver().submit(sim_stream_, {cmd});
  record_device_phase(Phase::Sim, k, env.group, sim_stream_);
  ++env.sims_issued;
  return AsyncHandle{Phase::Sim, k, env.group, sim_stream_, value, false};
}

AsyncHandle Session::render_async(Env& env, std::uint32_t k) {
  if (env.sims_done <= k) violation("render " + std::to_string(k) + " issued before its simulation completed");
  if (k != env.renders_issued) violation("render " + std::to_string(k) + " issued out of order");
  const SimTime d = sample(costs_.render(env.batch));
  auto cmd = GpuCommand::draw(d, costs_.render_compute_frac, costs_.render_graphics_frac, {env.frame});
  cmd.label = "render";
  const auto value = gpu_.driver().submit(render_stream_, {cmd});
  record_device_phase(Phase::Render, k, env.group, render_stream_);
  ++env.renders_issued;
  return AsyncHandle{Phase::Render, k, env.group, render_stream_, value, false};
}

AsyncHandle Session::infer_async(Env& env, std::uint32_t k) {
  if (env.inferences_issued != env.inferences_done) violation("infer_async while the previous inference is in flight");
  if (k != env.inferences_issued) violation("inference " + std::to_string(k) + " issued out of order");
  if (k > 0 && env.renders_done < k)
    violation("inference " + std::to_string(k) + " issued before render " + std::to_string(k - 1) + " completed");
  env.uses_inference = true;
  auto& engine = gpu_.engine();
  const SimTime start = std::max(engine.now(), inference_free_at_);
  const SimTime end = start + sample(costs_.inference(env.batch));
  inference_free_at_ = end;
  const TimerId timer = engine.start_timer(end - engine.now());
  host_phases_.push_back({Phase::Inference, k, env.group, start, end});
  ++env.inferences_issued;
  return AsyncHandle{Phase::Inference, k, env.group, StreamId{}, timer, false};
}

bool Session::ready(const AsyncHandle& h) {
  if (h.phase == Phase::Inference) return gpu_.engine().timer_done(h.target);
  return gpu_.driver().semaphore_value(h.stream) >= h.target;
}

void Session::check_unwaited(const AsyncHandle& h, Phase expected) const {
  if (h.phase != expected) throw SimError(ErrorCode::InvalidArgument, "handle waited with the wrong call");
  if (h.waited) violation("handle for " + std::string(to_string(h.phase)) + " " + std::to_string(h.step) +
                          " already waited");
}

void Session::block_until(const AsyncHandle& h) {
  if (!gpu_.engine().run_until([&] { return ready(h); }))
    throw SimError(ErrorCode::Stalled, std::string(to_string(h.phase)) + " " + std::to_string(h.step) +
                                           " can never complete");
}

void Session::wait_step(Env& env, AsyncHandle& h) {
  check_unwaited(h, Phase::Sim);
  block_until(h);
  h.waited = true;
  ++env.sims_done;
}

void Session::wait_render(Env& env, AsyncHandle& h) {
  check_unwaited(h, Phase::Render);
  block_until(h);
  h.waited = true;
  ++env.renders_done;
}

void Session::wait_infer(Env& env, AsyncHandle& h) {
  check_unwaited(h, Phase::Inference);
  block_until(h);
  h.waited = true;
  ++env.inferences_done;
}

void Session::wait_any(const std::vector<const AsyncHandle*>& handles) {
  auto any = [&] { return std::any_of(handles.begin(), handles.end(), [&](const auto* h) { return ready(*h); }); };
  if (!gpu_.engine().run_until(any)) throw SimError(ErrorCode::Stalled, "no outstanding operation can complete");
}

Metrics Session::finish(std::uint64_t env_steps) {
  auto& engine = gpu_.engine();
  const MetricsTrace mt = engine.run_until_idle();
  const auto& trace = gpu_.trace();

  Metrics m;
  m.makespan = mt.makespan;
  m.env_steps = env_steps;
  m.throughput = mt.makespan > 0.0 ? static_cast<double>(env_steps) / mt.makespan : 0.0;
  m.compute_busy = mt.compute_busy;
  m.graphics_busy = mt.graphics_busy;
  m.faults = mt.faults;

  std::map<std::pair<std::uint32_t, std::uint64_t>, SimTime> first_start;
  for (const auto& seg : trace.segments) {
    const auto key = std::make_pair(seg.channel.value, seg.entry_seq);
    auto [it, fresh] = first_start.emplace(key, seg.start);
    if (!fresh) it->second = std::min(it->second, seg.start);
  }
  std::map<std::pair<std::uint32_t, std::uint64_t>, SimTime> done_at;
  for (const auto& c : trace.completions) done_at[{c.channel.value, c.entry_seq}] = c.time;

  m.phases = host_phases_;
  for (const auto& p : device_phases_) {
    const auto key = std::make_pair(p.channel.value, p.seq);
    auto end = done_at.find(key);
    if (end == done_at.end()) continue;  // faulted
    auto start = first_start.find(key);
    m.phases.push_back({p.phase, p.step, p.group, start == first_start.end() ? end->second : start->second,
                        end->second});
  }
  std::sort(m.phases.begin(), m.phases.end(), [](const PhaseInterval& a, const PhaseInterval& b) {
    return std::tie(a.start, a.phase, a.group, a.step) < std::tie(b.start, b.phase, b.group, b.step);
  });
  m.trace = trace;
  return m;
}

// ---- integration loops ----

Metrics run_datagen(const EpisodeSpec& spec, const PhaseCost& costs, const DeviceConfig& device,
                    std::uint64_t seed, const Inspector& inspect) {
  spec.validate();
  Session s(device, costs, {}, seed);
  Env env = s.create_env(spec.batch);

  if (spec.mode == DatagenMode::Sequential) {
    for (std::uint32_t k = 0; k < spec.steps; ++k) {
      auto sim = s.step_async(env, k);
      s.wait_step(env, sim);
      auto frame = s.render_async(env, k);
      s.wait_render(env, frame);
    }
  } else {
    s.custream_bind(s.sim_stream());
    auto sim = s.step_async(env, 0);
    for (std::uint32_t k = 0; k < spec.steps; ++k) {
      s.wait_step(env, sim);
      auto frame = s.render_async(env, k);
      if (k + 1 < spec.steps) sim = s.step_async(env, k + 1);
      s.wait_render(env, frame);
    }
    s.custream_unbind(s.sim_stream());
  }
  auto m = s.finish(static_cast<std::uint64_t>(spec.steps) * spec.batch);
  if (inspect) inspect(s);
  return m;
}

Metrics run_rl_rollout(const RolloutSpec& spec, const PhaseCost& costs, const DeviceConfig& device,
                       std::uint64_t seed, const Inspector& inspect) {
  spec.validate();
  Session s(device, costs, {}, seed);
  const bool interleaved = spec.mode == RolloutMode::Interleaved;
  const std::uint32_t groups = interleaved ? spec.groups : 1;
  std::vector<Env> envs;
  for (std::uint32_t g = 0; g < groups; ++g) envs.push_back(s.create_env(spec.batch / groups, g));
  if (interleaved) s.custream_bind(s.sim_stream());

  // Each group walks inference(k) -> sim(k) -> render(k). Whenever a group's
  // previous phase completes its next phase is issued at once; streams and
  // the inference device serve requests in issue order, lower group first.
  struct Cursor {
    std::uint32_t step = 0;
    Phase next = Phase::Inference;
    std::optional<AsyncHandle> inflight;
  };
  std::vector<Cursor> cur(groups);
  auto finished = [&](const Cursor& c) { return c.step >= spec.steps && !c.inflight; };

  while (!std::all_of(cur.begin(), cur.end(), finished)) {
    for (std::uint32_t g = 0; g < groups; ++g) {
      auto& c = cur[g];
      if (c.inflight || c.step >= spec.steps) continue;
      switch (c.next) {
        case Phase::Inference: c.inflight = s.infer_async(envs[g], c.step); break;
        case Phase::Sim: c.inflight = s.step_async(envs[g], c.step); break;
        case Phase::Render: c.inflight = s.render_async(envs[g], c.step); break;
      }
    }
    std::vector<const AsyncHandle*> pending;
    for (const auto& c : cur)
      if (c.inflight) pending.push_back(&*c.inflight);
    s.wait_any(pending);
    for (std::uint32_t g = 0; g < groups; ++g) {
      auto& c = cur[g];
      if (!c.inflight || !s.ready(*c.inflight)) continue;
      switch (c.next) {
        case Phase::Inference:
          s.wait_infer(envs[g], *c.inflight);
          c.next = Phase::Sim;
          break;
        case Phase::Sim:
          s.wait_step(envs[g], *c.inflight);
          c.next = Phase::Render;
          break;
        case Phase::Render:
          s.wait_render(envs[g], *c.inflight);
          c.next = Phase::Inference;
          ++c.step;
          break;
      }
      c.inflight.reset();
    }
  }
  if (interleaved) s.custream_unbind(s.sim_stream());
  auto m = s.finish(static_cast<std::uint64_t>(spec.steps) * spec.batch);
  if (inspect) inspect(s);
  return m;
}

}  // namespace cosched::workload
