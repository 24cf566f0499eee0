#pragma once

#include "cosched/channel_core.hpp"
#include "cosched/device.hpp"
#include "cosched/exec_engine.hpp"

namespace cosched {

/// One simulated GPU: device state plus the engine and driver that act on it.
/// Instances share nothing and may be driven from different threads.
class Gpu {
 public:
  explicit Gpu(DeviceConfig config = {}, DriverKnobs knobs = {})
      : device_(config), engine_(device_), driver_(device_, engine_, knobs) {}

  Gpu(const Gpu&) = delete;
  Gpu& operator=(const Gpu&) = delete;

  Device& device() { return device_; }
  const Device& device() const { return device_; }
  Engine& engine() { return engine_; }
  Driver& driver() { return driver_; }
  vm::VmManager& vm() { return device_.vm; }
  const Trace& trace() const { return device_.trace; }

 private:
  Device device_;
  Engine engine_;
  Driver driver_;
};

}  // namespace cosched
