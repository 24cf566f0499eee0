#include "cosched/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace cosched::harness {

namespace {

std::string describe(const std::string& source, std::size_t line, const std::string& key, const std::string& msg) {
  std::string out = source;
  if (line > 0) out += ":" + std::to_string(line);
  if (!key.empty()) out += ": key '" + key + "'";
  return out + ": " + msg;
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Entry {
  std::string value;
  std::size_t line;
};

class Reader {
 public:
  Reader(std::string source, std::map<std::string, Entry> entries)
      : source_(std::move(source)), entries_(std::move(entries)) {}

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    auto it = entries_.find(key);
    throw ConfigError(source_, it == entries_.end() ? 0 : it->second.line, key, msg);
  }

  std::map<std::string, std::size_t> lines() const {
    std::map<std::string, std::size_t> out;
    for (const auto& [k, e] : entries_) out.emplace(k, e.line);
    return out;
  }

  void real(const std::string& key, double& out) const {
    if (auto* e = find(key)) out = parse_real(key, e->value);
  }

  template <typename T>
  void integer(const std::string& key, T& out) const {
    if (auto* e = find(key)) out = parse_int<T>(key, e->value);
  }

  void text(const std::string& key, std::string& out) const {
    if (auto* e = find(key)) {
      if (e->value.empty()) fail(key, "value must not be empty");
      out = e->value;
    }
  }

  template <typename T>
  void list(const std::string& key, std::vector<T>& out) const {
    auto* e = find(key);
    if (!e) return;
    out.clear();
    std::stringstream ss(e->value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_int<T>(key, std::string(trim(item))));
    if (out.empty()) fail(key, "list must not be empty");
  }

 private:
  const Entry* find(const std::string& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : &it->second;
  }

  double parse_real(const std::string& key, const std::string& v) const {
    double out = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) fail(key, "expected a number, got '" + v + "'");
    return out;
  }

  template <typename T>
  T parse_int(const std::string& key, const std::string& v) const {
    std::uint64_t out = 0;
    std::string_view digits = v;
    int base = 10;
    if (digits.starts_with("0x") || digits.starts_with("0X")) {
      digits.remove_prefix(2);
      base = 16;
    }
    std::string clean;
    for (char c : digits)
      if (c != '_') clean.push_back(c);
    auto [p, ec] = std::from_chars(clean.data(), clean.data() + clean.size(), out, base);
    if (clean.empty() || ec != std::errc{} || p != clean.data() + clean.size())
      fail(key, "expected a non-negative integer, got '" + v + "'");
    if (out > std::numeric_limits<T>::max()) fail(key, "value '" + v + "' out of range");
    return static_cast<T>(out);
  }

  std::string source_;
  std::map<std::string, Entry> entries_;
};

const std::map<std::string, std::set<std::string>>& schema() {
  static const std::map<std::string, std::set<std::string>> s{
      {"device",
       {"compute_capacity", "graphics_capacity", "quantum", "context_switch_penalty", "hw_max_queues",
        "ring_capacity", "levels", "bits_per_level", "page_shift", "big_page_level", "va_width", "high_base",
        "low_base"}},
      {"cost",
       {"preset", "sim_base", "sim_per_env", "render_base", "render_per_env", "inference_base",
        "inference_per_env", "sim_compute_frac", "render_compute_frac", "render_graphics_frac", "jitter"}},
      {"experiment", {"env", "steps", "batches", "groups", "sample_interval", "seed"}},
      {"graftbench", {"counts"}},
  };
  return s;
}

// Cross-field checks, attributed to the key that most likely needs fixing.
void validate(const ExperimentConfig& cfg, const Reader& r) {
  auto guard = [&](const std::string& key, const std::function<void()>& check) {
    try {
      check();
    } catch (const ConfigError&) {
      throw;
    } catch (const SimError& e) {
      r.fail(key, e.what());
    }
  };
  const auto& d = cfg.device;
  if (!(d.compute_capacity > 0.0)) r.fail("device.compute_capacity", "must be positive");
  if (!(d.graphics_capacity > 0.0)) r.fail("device.graphics_capacity", "must be positive");
  if (!(d.quantum > 0.0)) r.fail("device.quantum", "must be positive");
  if (d.context_switch_penalty < 0.0) r.fail("device.context_switch_penalty", "must be non-negative");
  if (d.hw_max_queues < 2) r.fail("device.hw_max_queues", "must be at least 2 (one application queue plus forwarding)");
  if (d.ring_capacity < 1) r.fail("device.ring_capacity", "must be at least 1");
  guard("device.levels", [&] { d.vm.geometry.validate(); });
  const auto limit = d.vm.geometry.va_limit();
  if (d.vm.high_base.value >= limit) r.fail("device.high_base", "lies outside the VA width");
  if (d.vm.low_base.value >= limit) r.fail("device.low_base", "lies outside the VA width");
  if (d.vm.low_base.value >= d.vm.high_base.value) r.fail("device.low_base", "must lie below high_base");

  const auto& c = cfg.cost;
  for (auto [key, v] : {std::pair{"cost.sim_base", c.sim_base}, {"cost.sim_per_env", c.sim_per_env},
                        {"cost.render_base", c.render_base}, {"cost.render_per_env", c.render_per_env},
                        {"cost.inference_base", c.inference_base}, {"cost.inference_per_env", c.inference_per_env}})
    if (!(v >= 0.0)) r.fail(key, "must be non-negative");
  for (auto [key, v] : {std::pair{"cost.sim_compute_frac", c.sim_compute_frac},
                        {"cost.render_compute_frac", c.render_compute_frac},
                        {"cost.render_graphics_frac", c.render_graphics_frac}})
    if (!(v >= 0.0 && v <= 1.0)) r.fail(key, "must lie in [0, 1]");
  if (!(c.jitter >= 0.0 && c.jitter < 1.0)) r.fail("cost.jitter", "must lie in [0, 1)");

  for (auto b : cfg.batches)
    if (b < 1) r.fail("experiment.batches", "batch sizes must be at least 1");
  if (cfg.groups < 1) r.fail("experiment.groups", "must be at least 1");
  for (auto b : cfg.batches)
    if (b % cfg.groups != 0)
      r.fail("experiment.groups", "must divide every batch size (" + std::to_string(b) + ")");
  if (!(cfg.sample_interval > 0.0)) r.fail("experiment.sample_interval", "must be positive");
  for (auto n : cfg.graft_counts)
    if (n < 1) r.fail("graftbench.counts", "buffer counts must be at least 1");
}

}  // namespace

ConfigError::ConfigError(std::string source, std::size_t line, std::string key, const std::string& message)
    : SimError(ErrorCode::ConfigError, describe(source, line, key, message)),
      source_(std::move(source)),
      line_(line),
      key_(std::move(key)) {}

ExperimentConfig parse_config(std::string_view text, const std::string& source) {
  const auto& sch = schema();
  std::map<std::string, Entry> entries;
  std::string section;
  std::size_t lineno = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string_view line = raw;
    if (auto c = line.find_first_of("#;"); c != std::string_view::npos) line = line.substr(0, c);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(source, lineno, "", "unterminated section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (!sch.contains(section)) throw ConfigError(source, lineno, section, "unknown section");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(source, lineno, "", "expected 'key = value'");
    const std::string key(trim(line.substr(0, eq)));
    if (key.empty()) throw ConfigError(source, lineno, "", "missing key");
    if (section.empty()) throw ConfigError(source, lineno, key, "key outside any section");
    const std::string full = section + "." + key;
    if (!sch.at(section).contains(key)) throw ConfigError(source, lineno, full, "unknown key");
    if (entries.contains(full))
      throw ConfigError(source, lineno, full,
                        "duplicate key (first set on line " + std::to_string(entries.at(full).line) + ")");
    entries.emplace(full, Entry{std::string(trim(line.substr(eq + 1))), lineno});
  }

  const Reader r(source, std::move(entries));
  ExperimentConfig cfg;
  cfg.source = source;
  cfg.key_lines = r.lines();

  auto& d = cfg.device;
  r.real("device.compute_capacity", d.compute_capacity);
  r.real("device.graphics_capacity", d.graphics_capacity);
  r.real("device.quantum", d.quantum);
  r.real("device.context_switch_penalty", d.context_switch_penalty);
  r.integer("device.hw_max_queues", d.hw_max_queues);
  r.integer("device.ring_capacity", d.ring_capacity);
  r.integer("device.levels", d.vm.geometry.levels);
  r.integer("device.bits_per_level", d.vm.geometry.bits_per_level);
  r.integer("device.page_shift", d.vm.geometry.page_shift);
  r.integer("device.big_page_level", d.vm.geometry.big_page_level);
  r.integer("device.va_width", d.vm.geometry.va_width);
  r.integer("device.high_base", d.vm.high_base.value);
  r.integer("device.low_base", d.vm.low_base.value);

  // The preset seeds every coefficient; individual keys then override it.
  r.text("cost.preset", cfg.preset);
  auto base = workload::preset(cfg.preset);
  if (!base) {
    std::string names;
    for (const auto& n : workload::preset_names()) names += (names.empty() ? "" : ", ") + n;
    r.fail("cost.preset", "unknown preset '" + cfg.preset + "' (known: " + names + ")");
  }
  cfg.cost = *base;
  auto& c = cfg.cost;
  r.real("cost.sim_base", c.sim_base);
  r.real("cost.sim_per_env", c.sim_per_env);
  r.real("cost.render_base", c.render_base);
  r.real("cost.render_per_env", c.render_per_env);
  r.real("cost.inference_base", c.inference_base);
  r.real("cost.inference_per_env", c.inference_per_env);
  r.real("cost.sim_compute_frac", c.sim_compute_frac);
  r.real("cost.render_compute_frac", c.render_compute_frac);
  r.real("cost.render_graphics_frac", c.render_graphics_frac);
  r.real("cost.jitter", c.jitter);

  r.text("experiment.env", cfg.env);
  r.integer("experiment.steps", cfg.steps);
  r.list("experiment.batches", cfg.batches);
  r.integer("experiment.groups", cfg.groups);
  r.real("experiment.sample_interval", cfg.sample_interval);
  r.integer("experiment.seed", cfg.seed);
  r.list("graftbench.counts", cfg.graft_counts);
  if (cfg.graft_counts.empty())
    for (std::uint64_t n = 4; n <= 8192; n *= 2) cfg.graft_counts.push_back(n);

  validate(cfg, r);
  return cfg;
}

void ExperimentConfig::reject(const std::string& key, const std::string& message) const {
  auto it = key_lines.find(key);
  throw ConfigError(source, it == key_lines.end() ? 0 : it->second, key, message);
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string(), 0, "", "cannot open file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

}  // namespace cosched::harness
