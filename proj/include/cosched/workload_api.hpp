#pragma once

// Application-facing co-scheduling API and the two integration loops built on
// it: pipelined data generation (sim(k+1) overlaps render(k)) and interleaved
// RL rollout (one environment group simulates while another renders).
//
// Phase durations come from an affine cost model in the batch size. The
// coefficients shipped as presets are calibration, not measurements.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "cosched/gpu.hpp"

namespace cosched::workload {

enum class Phase : std::uint8_t { Inference, Sim, Render };

std::string_view to_string(Phase phase);

struct PhaseCost {
  double sim_base = 1.536;
  double sim_per_env = 0.002;
  double render_base = 0.0;
  double render_per_env = 0.01;
  double inference_base = 0.0;
  double inference_per_env = 0.0;
  double sim_compute_frac = 0.1;
  double render_compute_frac = 0.6;
  double render_graphics_frac = 1.0;
  // Per-phase multiplicative noise in [1 - jitter, 1 + jitter]; 0 disables.
  double jitter = 0.0;

  SimTime sim(std::uint32_t batch) const { return sim_base + sim_per_env * batch; }
  SimTime render(std::uint32_t batch) const { return render_base + render_per_env * batch; }
  SimTime inference(std::uint32_t batch) const { return inference_base + inference_per_env * batch; }

  void validate() const;
};

/// Named cost bundles. Unknown names yield nullopt.
std::optional<PhaseCost> preset(std::string_view name);
std::vector<std::string> preset_names();

enum class DatagenMode : std::uint8_t { Sequential, Pipelined };
enum class RolloutMode : std::uint8_t { Sequential, Interleaved };

std::string_view to_string(DatagenMode mode);
std::string_view to_string(RolloutMode mode);

struct EpisodeSpec {
  std::uint32_t steps = 1;
  std::uint32_t batch = 1;
  DatagenMode mode = DatagenMode::Sequential;

  void validate() const;
};

struct RolloutSpec {
  std::uint32_t steps = 1;
  std::uint32_t batch = 1;
  std::uint32_t groups = 2;  // Interleaved only; Sequential runs the whole batch as one group
  RolloutMode mode = RolloutMode::Sequential;

  void validate() const;
};

struct AsyncHandle {
  Phase phase = Phase::Sim;
  std::uint32_t step = 0;
  std::uint32_t group = 0;
  StreamId stream;             // Sim/Render
  std::uint64_t target = 0;    // semaphore value, or timer id for Inference
  bool waited = false;
};

struct PhaseInterval {
  Phase phase = Phase::Sim;
  std::uint32_t step = 0;
  std::uint32_t group = 0;
  SimTime start = 0.0;
  SimTime end = 0.0;
};

struct Metrics {
  SimTime makespan = 0.0;
  double throughput = 0.0;  // environment-steps per sim-time unit
  std::uint64_t env_steps = 0;
  double compute_busy = 0.0;
  double graphics_busy = 0.0;
  std::uint64_t faults = 0;
  std::vector<PhaseInterval> phases;  // sorted by (start, phase, group, step)
  Trace trace;
};

/// A simulator instance over `batch` environments. Holds the per-group
/// dependency state the guards check.
struct Env {
  std::uint32_t group = 0;
  std::uint32_t batch = 1;
  VirtAddr state;  // simulation state, compute address space
  VirtAddr frame;  // render target, graphics address space
  std::uint32_t sims_issued = 0;
  std::uint32_t sims_done = 0;
  std::uint32_t renders_issued = 0;
  std::uint32_t renders_done = 0;
  std::uint32_t inferences_issued = 0;
  std::uint32_t inferences_done = 0;
  bool uses_inference = false;
};

/// One GPU with a compute context (simulation) and a graphics context
/// (rendering), plus a dedicated inference device modeled as host latency.
class Session {
 public:
  Session(DeviceConfig device, PhaseCost costs, DriverKnobs knobs = {}, std::uint64_t seed = 0);

  Gpu& gpu() { return gpu_; }
  const PhaseCost& costs() const { return costs_; }
  ContextId compute_context() const { return compute_ctx_; }
  ContextId graphics_context() const { return graphics_ctx_; }
  StreamId sim_stream() const { return sim_stream_; }
  StreamId render_stream() const { return render_stream_; }

  void custream_bind(StreamId stream);
  void custream_unbind(StreamId stream);

  Env create_env(std::uint32_t batch, std::uint32_t group = 0);

  AsyncHandle step_async(Env& env, std::uint32_t k);
  void wait_step(Env& env, AsyncHandle& handle);
  AsyncHandle render_async(Env& env, std::uint32_t k);
  void wait_render(Env& env, AsyncHandle& handle);
  // Inference runs on its own device: requests queue FIFO and never touch
  // this GPU's resources.
  AsyncHandle infer_async(Env& env, std::uint32_t k);
  void wait_infer(Env& env, AsyncHandle& handle);

  bool ready(const AsyncHandle& handle);

  /// Advances the engine until at least one of `handles` is ready.
  void wait_any(const std::vector<const AsyncHandle*>& handles);

  /// Drains all device work and collects metrics for `env_steps` steps.
  Metrics finish(std::uint64_t env_steps);

 private:
  struct DevicePhase {
    Phase phase;
    std::uint32_t step;
    std::uint32_t group;
    ChannelId channel;
    std::uint64_t seq;
  };

  VirtAddr map_buffer(SpaceId space, std::uint64_t pages);
  SimTime sample(SimTime nominal);
  void block_until(const AsyncHandle& handle);
  void check_unwaited(const AsyncHandle& handle, Phase expected) const;
  void record_device_phase(Phase phase, std::uint32_t k, std::uint32_t group, StreamId stream);

  Gpu gpu_;
  PhaseCost costs_;
  std::mt19937_64 rng_;
  ContextId compute_ctx_;
  ContextId graphics_ctx_;
  StreamId sim_stream_;
  StreamId render_stream_;
  SimTime inference_free_at_ = 0.0;
  std::vector<DevicePhase> device_phases_;
  std::vector<PhaseInterval> host_phases_;
};

/// `inspect`, when set, sees the session after all work has drained.
using Inspector = std::function<void(Session&)>;

Metrics run_datagen(const EpisodeSpec& spec, const PhaseCost& costs, const DeviceConfig& device = {},
                    std::uint64_t seed = 0, const Inspector& inspect = {});
Metrics run_rl_rollout(const RolloutSpec& spec, const PhaseCost& costs, const DeviceConfig& device = {},
                       std::uint64_t seed = 0, const Inspector& inspect = {});

}  // namespace cosched::workload
