#include "cosched/trace_io.hpp"

#include <algorithm>
#include <map>

namespace cosched {

namespace {

constexpr double kEps = 1e-9;

std::string fmt_time(double t) { return nlohmann::json(t).dump(); }

}  // namespace

nlohmann::json to_json(const TraceEvent& ev) {
  nlohmann::json j;
  j["time"] = ev.time;
  j["event"] = ev.event;
  if (ev.channel) j["channel"] = *ev.channel;
  if (ev.tsg) j["tsg"] = *ev.tsg;
  if (ev.stream) j["stream"] = *ev.stream;
  if (ev.value) j["value"] = *ev.value;
  if (ev.vaddr) j["vaddr"] = *ev.vaddr;
  if (ev.since) j["since"] = *ev.since;
  if (!ev.detail.empty()) j["detail"] = ev.detail;
  return j;
}

nlohmann::json to_json(const UtilSegment& seg) {
  nlohmann::json j{{"start", seg.start}, {"end", seg.end}, {"compute", seg.compute}, {"graphics", seg.graphics}};
  j["tsg"] = seg.active_tsg ? nlohmann::json(seg.active_tsg->value) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json to_json(const UtilizationSample& s) {
  nlohmann::json j{{"start", s.start},
                   {"end", s.end},
                   {"compute_util", s.compute_util},
                   {"graphics_util", s.graphics_util}};
  j["active_tsg"] = s.active_tsg ? nlohmann::json(s.active_tsg->value) : nlohmann::json(nullptr);
  return j;
}

std::vector<std::string> audit_exclusivity(const Trace& trace) {
  std::vector<std::string> out;
  auto slices = trace.slices;
  std::sort(slices.begin(), slices.end(), [](const auto& a, const auto& b) { return a.start < b.start; });
  for (std::size_t i = 1; i < slices.size(); ++i) {
    if (slices[i].start < slices[i - 1].end - kEps)
      out.push_back("slices of tsg " + std::to_string(slices[i - 1].tsg.value) + " and tsg " +
                    std::to_string(slices[i].tsg.value) + " overlap at t=" + fmt_time(slices[i].start));
  }
  for (const auto& seg : trace.segments) {
    if (seg.end - seg.start <= kEps) continue;
    // The segment must sit inside one slice of its own TSG.
    auto it = std::upper_bound(slices.begin(), slices.end(), seg.start + kEps,
                               [](double t, const SliceRecord& s) { return t < s.start; });
    const bool inside = it != slices.begin() && std::prev(it)->tsg == seg.tsg &&
                        std::prev(it)->start <= seg.start + kEps && seg.end <= std::prev(it)->end + kEps;
    if (!inside)
      out.push_back("channel " + std::to_string(seg.channel.value) + " executed outside its tsg's slice over [" +
                    fmt_time(seg.start) + ", " + fmt_time(seg.end) + ")");
  }
  return out;
}

std::vector<std::string> audit_fifo(const Trace& trace) {
  std::vector<std::string> out;
  std::map<std::uint32_t, std::uint64_t> last;
  for (const auto& c : trace.completions) {
    auto [it, fresh] = last.emplace(c.channel.value, c.entry_seq);
    if (fresh) continue;
    if (c.entry_seq <= it->second)
      out.push_back("channel " + std::to_string(c.channel.value) + " completed entry " +
                    std::to_string(c.entry_seq) + " after entry " + std::to_string(it->second));
    it->second = c.entry_seq;
  }
  return out;
}

std::vector<std::string> audit_trace(const Trace& trace) {
  auto out = audit_exclusivity(trace);
  auto fifo = audit_fifo(trace);
  out.insert(out.end(), fifo.begin(), fifo.end());
  return out;
}

}  // namespace cosched
