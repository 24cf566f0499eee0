#pragma once

// JSON serialization of trace records and the structural audits every run's
// trace must pass.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cosched/device.hpp"
#include "cosched/exec_engine.hpp"

namespace cosched {

nlohmann::json to_json(const TraceEvent& ev);
nlohmann::json to_json(const UtilSegment& seg);
nlohmann::json to_json(const UtilizationSample& sample);

/// Violations of temporal exclusivity: overlapping slices, or execution
/// outside a slice of the executing channel's TSG.
std::vector<std::string> audit_exclusivity(const Trace& trace);

/// Violations of per-channel FIFO completion order.
std::vector<std::string> audit_fifo(const Trace& trace);

/// Both audits.
std::vector<std::string> audit_trace(const Trace& trace);

}  // namespace cosched
