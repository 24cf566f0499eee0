#include "cosched/vm_graft.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

#include "cosched/error.hpp"

namespace cosched::vm {

namespace {

using Interval = boost::icl::interval<std::uint64_t>;

std::uint64_t align_up(std::uint64_t v, std::uint64_t align) { return (v + align - 1) & ~(align - 1); }

std::string hex(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

void PageGeometry::validate() const {
  if (levels < 2 || bits_per_level == 0 || bits_per_level > 16 || page_shift < 6)
    throw SimError(ErrorCode::InvalidArgument, "unsupported page-table geometry");
  if (big_page_level == 0 || big_page_level >= levels)
    throw SimError(ErrorCode::InvalidArgument, "big_page_level must be an intermediate level");
  if (va_width == 0 || va_width > page_shift + bits_per_level * levels || va_width > 63)
    throw SimError(ErrorCode::InvalidArgument, "va_width exceeds what the radix levels can index");
}

VmManager::VmManager(VmConfig config) : config_(config) {
  config_.geometry.validate();
  const auto limit = config_.geometry.va_limit();
  if (config_.low_base.value >= config_.high_base.value || config_.high_base.value >= limit)
    throw SimError(ErrorCode::InvalidArgument, "VA bases must satisfy low < high < 2^va_width");
}

NodeId VmManager::new_node(unsigned level, SpaceId owner) {
  NodeId id{static_cast<std::uint32_t>(nodes_.size())};
  PageTableNode n;
  n.id = id;
  n.level = level;
  n.owner = owner;
  n.entries.resize(config_.geometry.fanout());
  nodes_.push_back(std::move(n));
  return id;
}

void VmManager::set_entry(NodeId node, std::uint32_t index, const PageEntry& entry) {
  auto& n = mut_node(node);
  auto& slot = n.entries.at(index);
  if (slot.empty() && !entry.empty())
    ++n.used;
  else if (!slot.empty() && entry.empty())
    --n.used;
  slot = entry;
}

std::size_t VmManager::live_node_count() const {
  return static_cast<std::size_t>(
      std::count_if(nodes_.begin(), nodes_.end(), [](const PageTableNode& n) { return n.live; }));
}

SpaceId VmManager::create_space(RangePolicy policy) {
  SpaceId id{static_cast<std::uint32_t>(spaces_.size())};
  AddressSpace s;
  s.id = id;
  s.policy = policy;
  if (policy == RangePolicy::HighRange) {
    s.region_begin = config_.high_base.value;
    s.region_end = config_.geometry.va_limit();
  } else {
    s.region_begin = config_.low_base.value;
    s.region_end = config_.high_base.value;
  }
  s.alloc_cursor = s.region_begin;
  spaces_.push_back(std::move(s));
  spaces_.back().pdb = new_node(0, id);
  return id;
}

PhysPageId VmManager::alloc_phys(SizeClass sc) { return PhysPageId{next_phys_++, sc}; }

std::vector<PhysPageId> VmManager::alloc_phys(SizeClass sc, std::size_t count) {
  std::vector<PhysPageId> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(alloc_phys(sc));
  return out;
}

std::set<SpaceId> VmManager::graft_component(SpaceId space) const {
  std::set<SpaceId> seen{space};
  std::vector<SpaceId> todo{space};
  while (!todo.empty()) {
    auto cur = todo.back();
    todo.pop_back();
    for (auto peer : spaces_.at(cur.value).graft_peers)
      if (seen.insert(peer).second) todo.push_back(peer);
  }
  return seen;
}

bool VmManager::reaches(SpaceId from, SpaceId to) const {
  std::set<SpaceId> seen{from};
  std::vector<SpaceId> todo{from};
  while (!todo.empty()) {
    auto cur = todo.back();
    todo.pop_back();
    if (cur == to) return true;
    for (auto sub : spaces_.at(cur.value).subscribers)
      if (seen.insert(sub).second) todo.push_back(sub);
  }
  return false;
}

VirtAddr VmManager::allocate(SpaceId space, std::uint64_t n_pages, SizeClass sc, std::optional<VirtAddr> hint) {
  const auto& geo = config_.geometry;
  const std::uint64_t page = geo.page_size(sc);
  if (n_pages == 0) throw SimError(ErrorCode::InvalidArgument, "allocate needs at least one page");
  if (n_pages > geo.va_limit() / page)
    throw SimError(ErrorCode::AddressSpaceExhausted, "request larger than the VA width");
  const std::uint64_t len = n_pages * page;

  boost::icl::interval_set<std::uint64_t> busy;
  for (auto id : graft_component(space)) busy += spaces_.at(id.value).occupied;

  auto fits = [&](std::uint64_t start, std::uint64_t end) {
    return start + len <= end && busy.find(Interval::right_open(start, start + len)) == busy.end();
  };
  // Lowest page-aligned start >= from whose range is free and ends by `end`.
  auto probe = [&](std::uint64_t from, std::uint64_t end) -> std::optional<std::uint64_t> {
    std::uint64_t start = align_up(from, page);
    while (start + len <= end && start >= from) {
      auto it = busy.find(Interval::right_open(start, start + len));
      if (it == busy.end()) return start;
      start = align_up(it->upper(), page);
    }
    return std::nullopt;
  };

  auto& s = mut_space(space);
  std::optional<std::uint64_t> result;
  if (hint) {
    if (hint->value % page != 0) throw SimError(ErrorCode::InvalidArgument, "hint is not page-aligned");
    const bool in_region = hint->value >= s.region_begin && hint->value < s.region_end;
    const std::uint64_t end = in_region ? s.region_end : geo.va_limit();
    if (fits(hint->value, end)) {
      result = hint->value;
    } else {
      result = probe(hint->value, end);
      if (result) ++s.stats.conflicts_resolved;
    }
  } else {
    result = probe(s.alloc_cursor, s.region_end);
    if (!result) result = probe(s.region_begin, s.region_end);
  }
  if (!result)
    throw SimError(ErrorCode::AddressSpaceExhausted,
                   "no free range of " + std::to_string(n_pages) + " pages in space " + std::to_string(space.value));

  s.occupied += Interval::right_open(*result, *result + len);
  if (*result >= s.region_begin && *result < s.region_end) s.alloc_cursor = *result + len;
  return VirtAddr{*result};
}

std::pair<NodeId, std::vector<VmManager::Step>> VmManager::walk_path(SpaceId space, VirtAddr va,
                                                                     unsigned to_level) const {
  std::vector<Step> path;
  NodeId cur = spaces_.at(space.value).pdb;
  for (unsigned level = 0; level <= to_level; ++level) {
    const auto idx = config_.geometry.index(va, level);
    path.push_back({cur, idx});
    if (level == to_level) break;
    const auto& e = nodes_.at(cur.value).entries[idx];
    if (e.kind != EntryKind::Directory) break;
    cur = e.child;
  }
  return {cur, std::move(path)};
}

std::uint64_t VmManager::map_range(SpaceId space, VirtAddr vaddr, std::span<const PhysPageId> pages,
                                   std::uint8_t perms) {
  const auto& geo = config_.geometry;
  if (pages.empty()) throw SimError(ErrorCode::InvalidArgument, "map_range needs at least one page");
  const SizeClass sc = pages.front().size_class;
  if (std::any_of(pages.begin(), pages.end(), [&](const PhysPageId& p) { return p.size_class != sc; }))
    throw SimError(ErrorCode::InvalidArgument, "map_range pages must share one size class");
  const std::uint64_t page = geo.page_size(sc);
  const unsigned leaf_level = geo.leaf_level(sc);
  if (vaddr.value % page != 0) throw SimError(ErrorCode::InvalidArgument, "vaddr is not page-aligned");
  if (pages.size() > (geo.va_limit() - vaddr.value) / page)
    throw SimError(ErrorCode::InvalidArgument, "range exceeds the VA width");
  const std::uint64_t len = pages.size() * page;
  const auto range = Interval::right_open(vaddr.value, vaddr.value + len);

  for (auto peer : graft_component(space)) {
    if (peer == space) continue;
    if (spaces_.at(peer.value).mapped.find(range) != spaces_.at(peer.value).mapped.end())
      throw SimError(ErrorCode::OverlapDetected, "range " + hex(vaddr.value) + " is mapped by a grafted space");
  }

  // Validate the whole range before touching the table.
  for (std::size_t i = 0; i < pages.size(); ++i) {
    const VirtAddr va = vaddr + i * page;
    NodeId cur = spaces_.at(space.value).pdb;
    for (unsigned level = 0; level <= leaf_level; ++level) {
      const auto& n = nodes_.at(cur.value);
      if (n.owner != space)
        throw SimError(ErrorCode::OverlapDetected, "range " + hex(va.value) + " lies in a grafted subtree");
      const auto& e = n.entries[geo.index(va, level)];
      if (e.kind == EntryKind::Leaf || (level == leaf_level && !e.empty()))
        throw SimError(ErrorCode::AlreadyMapped, "page " + hex(va.value) + " is already mapped");
      if (e.empty()) break;
      cur = e.child;
    }
  }

  std::uint64_t new_pdes = 0;
  for (std::size_t i = 0; i < pages.size(); ++i) {
    const VirtAddr va = vaddr + i * page;
    NodeId cur = spaces_.at(space.value).pdb;
    for (unsigned level = 0; level < leaf_level; ++level) {
      const auto idx = geo.index(va, level);
      const auto e = nodes_.at(cur.value).entries[idx];
      if (e.kind == EntryKind::Directory) {
        cur = e.child;
        continue;
      }
      const NodeId child = new_node(level + 1, space);
      const auto pde = PageEntry::directory(child);
      set_entry(cur, idx, pde);
      ++new_pdes;
      propagate_structural(space, {StructuralChange::Kind::PdeInserted, level, va, pde});
      cur = child;
    }
    const auto leaf = PageEntry::leaf(pages[i], perms);
    set_entry(cur, geo.index(va, leaf_level), leaf);
    propagate_structural(space, {StructuralChange::Kind::PdeInserted, leaf_level, va, leaf});
  }

  auto& s = mut_space(space);
  s.mapped += range;
  s.occupied += range;
  return new_pdes;
}

void VmManager::unmap_range(SpaceId space, VirtAddr vaddr, std::uint64_t n_pages) {
  const auto& geo = config_.geometry;
  if (n_pages == 0) throw SimError(ErrorCode::InvalidArgument, "unmap_range needs at least one page");

  // Find the leaf at `vaddr` to learn the page size.
  std::optional<SizeClass> sc;
  {
    NodeId cur = spaces_.at(space.value).pdb;
    for (unsigned level = 0; level < geo.levels; ++level) {
      const auto& e = nodes_.at(cur.value).entries[geo.index(vaddr, level)];
      if (e.kind == EntryKind::Leaf) {
        if (level == geo.leaf_level(e.page.size_class)) sc = e.page.size_class;
        break;
      }
      if (e.empty()) break;
      cur = e.child;
    }
  }
  if (!sc) throw SimError(ErrorCode::NotMapped, "no mapping at " + hex(vaddr.value));
  const std::uint64_t page = geo.page_size(*sc);
  const unsigned leaf_level = geo.leaf_level(*sc);
  if (vaddr.value % page != 0) throw SimError(ErrorCode::InvalidArgument, "vaddr is not page-aligned");
  if (n_pages > (geo.va_limit() - vaddr.value) / page) throw SimError(ErrorCode::NotMapped, "range exceeds VA width");

  for (std::uint64_t i = 0; i < n_pages; ++i) {
    const VirtAddr va = vaddr + i * page;
    auto [node, path] = walk_path(space, va, leaf_level);
    if (path.size() != leaf_level + 1 || nodes_.at(node.value).entries[path.back().index].kind != EntryKind::Leaf)
      throw SimError(ErrorCode::NotMapped, "page " + hex(va.value) + " is not mapped");
    for (const auto& step : path)
      if (nodes_.at(step.node.value).owner != space)
        throw SimError(ErrorCode::OverlapDetected, "page " + hex(va.value) + " belongs to a grafted space");
  }

  for (std::uint64_t i = 0; i < n_pages; ++i) {
    const VirtAddr va = vaddr + i * page;
    auto [node, path] = walk_path(space, va, leaf_level);
    const auto old = nodes_.at(node.value).entries[path.back().index];
    set_entry(node, path.back().index, PageEntry{});
    propagate_structural(space, {StructuralChange::Kind::PdeRemoved, leaf_level, va, old});
    collapse(space, va, std::move(path));
  }

  auto& s = mut_space(space);
  const auto range = Interval::right_open(vaddr.value, vaddr.value + n_pages * page);
  s.mapped -= range;
  s.occupied -= range;
  propagate_tlb_invalidation(space);
}

void VmManager::collapse(SpaceId space, VirtAddr va, std::vector<Step> path) {
  // path[i] is the step taken out of the node at level i; the last node has
  // just lost an entry.
  for (std::size_t i = path.size() - 1; i > 0; --i) {
    const auto& n = nodes_.at(path[i].node.value);
    if (n.used != 0 || n.owner != space) return;
    const Step parent = path[i - 1];
    const auto old = nodes_.at(parent.node.value).entries[parent.index];
    set_entry(parent.node, parent.index, PageEntry{});
    mut_node(path[i].node).live = false;
    propagate_structural(space, {StructuralChange::Kind::PdeRemoved, static_cast<unsigned>(i - 1), va, old});
  }
}

void VmManager::propagate_structural(SpaceId source, const StructuralChange& change) {
  const auto subs = spaces_.at(source.value).subscribers;
  for (auto target : subs) {
    if (change.kind == StructuralChange::Kind::PdeInserted)
      propagate_insert(source, target, change);
    else
      propagate_remove(source, target, change);
  }
}

void VmManager::propagate_insert(SpaceId source, SpaceId target, const StructuralChange& change) {
  const auto& geo = config_.geometry;
  NodeId s = spaces_.at(source.value).pdb;
  NodeId t = spaces_.at(target.value).pdb;
  for (unsigned level = 0; level <= change.level; ++level) {
    if (s == t) return;  // shared subtree: already visible
    const auto idx = geo.index(change.vaddr, level);
    copy_engine_.reads += 2;
    const auto se = nodes_.at(s.value).entries[idx];
    const auto te = nodes_.at(t.value).entries[idx];
    if (se.empty()) return;
    if (te.empty()) {
      // Either the changed slot itself or an ancestor the target lacks.
      set_entry(t, idx, se);
      ++copy_engine_.writes;
      ++mut_space(target).stats.subscriber_writes;
      propagate_structural(target, {StructuralChange::Kind::PdeInserted, level, change.vaddr, se});
      return;
    }
    if (te == se) return;
    if (se.kind != EntryKind::Directory || te.kind != EntryKind::Directory)
      throw SimError(ErrorCode::OverlapDetected, "propagated entry collides with a target mapping at " +
                                                     hex(change.vaddr.value));
    s = se.child;
    t = te.child;
  }
}

void VmManager::propagate_remove(SpaceId source, SpaceId target, const StructuralChange& change) {
  const auto& geo = config_.geometry;
  NodeId s = spaces_.at(source.value).pdb;
  NodeId t = spaces_.at(target.value).pdb;
  std::vector<Step> path;
  for (unsigned level = 0; level <= change.level; ++level) {
    if (s == t) return;
    const auto idx = geo.index(change.vaddr, level);
    copy_engine_.reads += 2;
    const auto te = nodes_.at(t.value).entries[idx];
    path.push_back({t, idx});
    if (level == change.level) {
      if (te != change.entry) return;
      set_entry(t, idx, PageEntry{});
      ++copy_engine_.writes;
      ++mut_space(target).stats.subscriber_writes;
      propagate_structural(target, {StructuralChange::Kind::PdeRemoved, level, change.vaddr, te});
      collapse(target, change.vaddr, std::move(path));
      return;
    }
    const auto se = nodes_.at(s.value).entries[idx];
    if (se.kind != EntryKind::Directory || te.kind != EntryKind::Directory || se.child == te.child) return;
    s = se.child;
    t = te.child;
  }
}

void VmManager::issue_invalidation(SpaceId space, std::set<SpaceId>& visited) {
  if (!visited.insert(space).second) return;
  auto& s = mut_space(space);
  s.tlb.clear();
  ++s.stats.tlb_invalidations;
  if (!tlb_propagation_) return;
  const auto subs = s.subscribers;
  for (auto sub : subs) issue_invalidation(sub, visited);
}

std::uint64_t VmManager::propagate_tlb_invalidation(SpaceId source) {
  std::set<SpaceId> visited;
  issue_invalidation(source, visited);
  return visited.size();
}

TranslateResult VmManager::translate(SpaceId space, VirtAddr vaddr) {
  const auto& geo = config_.geometry;
  auto& s = mut_space(space);
  if (vaddr.value >= geo.va_limit()) return PageFault{vaddr, 0};

  for (auto sc : {SizeClass::Small, SizeClass::Big}) {
    const std::uint64_t size = geo.page_size(sc);
    const std::uint64_t base = vaddr.value & ~(size - 1);
    auto it = s.tlb.find(base);
    if (it != s.tlb.end() && it->second.page_size == size) {
      ++s.stats.tlb_hits;
      return Translation{it->second.page, vaddr.value - base};
    }
  }

  ++s.stats.tlb_misses;
  NodeId cur = s.pdb;
  for (unsigned level = 0; level < geo.levels; ++level) {
    const auto& e = nodes_.at(cur.value).entries[geo.index(vaddr, level)];
    if (e.empty()) return PageFault{vaddr, level};
    if (e.kind == EntryKind::Leaf) {
      const std::uint64_t size = std::uint64_t{1} << geo.level_shift(level);
      const std::uint64_t base = vaddr.value & ~(size - 1);
      s.tlb[base] = TlbEntry{e.page, size};
      return Translation{e.page, vaddr.value - base};
    }
    cur = e.child;
  }
  return PageFault{vaddr, geo.levels - 1};
}

GraftReport VmManager::graft(SpaceId source, SpaceId target) {
  if (source == target) throw SimError(ErrorCode::InvalidArgument, "cannot graft a space into itself");
  const auto& src = spaces_.at(source.value);
  const auto& dst = spaces_.at(target.value);
  for (const auto& iv : src.mapped) {
    if (dst.mapped.find(iv) != dst.mapped.end())
      throw SimError(ErrorCode::OverlapDetected, "leaf ranges overlap at " + hex(iv.lower()));
  }
  if (!src.subscribers.contains(target) && reaches(target, source))
    throw SimError(ErrorCode::CycleDetected, "space " + std::to_string(target.value) +
                                                 " already receives changes from " + std::to_string(source.value));

  GraftReport report;
  merge_nodes(target, src.pdb, dst.pdb, 0, VirtAddr{0}, report);

  auto& s = mut_space(source);
  auto& t = mut_space(target);
  s.subscribers.insert(target);
  s.graft_peers.insert(target);
  t.graft_peers.insert(source);

  const std::uint64_t conflicts = s.stats.conflicts_resolved + t.stats.conflicts_resolved;
  auto& baseline = conflict_baseline_[{source, target}];
  report.conflicts_resolved = conflicts - baseline;
  baseline = conflicts;

  std::set<SpaceId> visited;
  issue_invalidation(target, visited);
  report.tlb_invalidations = visited.size();
  return report;
}

void VmManager::merge_nodes(SpaceId target, NodeId src, NodeId dst, unsigned depth, VirtAddr prefix,
                            GraftReport& report) {
  if (src == dst) return;
  const auto& geo = config_.geometry;
  copy_engine_.reads += 2;
  report.entry_reads += 2;
  const unsigned level = nodes_.at(src.value).level;
  for (std::uint32_t idx = 0; idx < geo.fanout(); ++idx) {
    const auto se = nodes_.at(src.value).entries[idx];
    if (se.empty()) continue;  // source empty: keep the target's entry
    const auto te = nodes_.at(dst.value).entries[idx];
    const VirtAddr va{prefix.value | (std::uint64_t{idx} << geo.level_shift(level))};
    if (te.empty()) {
      set_entry(dst, idx, se);
      ++copy_engine_.writes;
      ++report.entry_writes;
      if (se.kind == EntryKind::Directory) ++report.pdes_copied;
      propagate_structural(target, {StructuralChange::Kind::PdeInserted, level, va, se});
      continue;
    }
    if (te == se) continue;
    if (se.kind == EntryKind::Directory && te.kind == EntryKind::Directory) {
      report.max_depth_descended = std::max<std::uint64_t>(report.max_depth_descended, depth + 1);
      merge_nodes(target, se.child, te.child, depth + 1, va, report);
      continue;
    }
    throw SimError(ErrorCode::OverlapDetected, "graft collides with a target mapping at " + hex(va.value));
  }
}

void VmManager::walk_node(NodeId node, std::uint64_t prefix, MappingSet& out) const {
  const auto& geo = config_.geometry;
  const auto& n = nodes_.at(node.value);
  for (std::uint32_t idx = 0; idx < n.entries.size(); ++idx) {
    const auto& e = n.entries[idx];
    if (e.empty()) continue;
    const std::uint64_t va = prefix | (std::uint64_t{idx} << geo.level_shift(n.level));
    if (e.kind == EntryKind::Leaf)
      out.emplace(VirtAddr{va}, e.page);
    else
      walk_node(e.child, va, out);
  }
}

MappingSet VmManager::walk_mappings(SpaceId space) const {
  MappingSet out;
  walk_node(spaces_.at(space.value).pdb, 0, out);
  return out;
}

MappingSet VmManager::union_oracle(SpaceId source, SpaceId target) const {
  auto out = walk_mappings(source);
  for (const auto& [va, page] : walk_mappings(target)) {
    auto [it, inserted] = out.emplace(va, page);
    if (!inserted && it->second != page)
      throw SimError(ErrorCode::InconsistentUnion, "page " + hex(va.value) + " resolves differently in the two tables");
  }
  return out;
}

nlohmann::json VmManager::dump_tables(SpaceId space) const {
  std::set<NodeId> seen;
  std::vector<NodeId> todo{spaces_.at(space.value).pdb};
  while (!todo.empty()) {
    auto id = todo.back();
    todo.pop_back();
    if (!seen.insert(id).second) continue;
    for (const auto& e : nodes_.at(id.value).entries)
      if (e.kind == EntryKind::Directory) todo.push_back(e.child);
  }
  auto nodes = nlohmann::json::array();
  for (auto id : seen) {
    const auto& n = nodes_.at(id.value);
    auto entries = nlohmann::json::array();
    for (std::uint32_t idx = 0; idx < n.entries.size(); ++idx) {
      const auto& e = n.entries[idx];
      if (e.kind == EntryKind::Directory)
        entries.push_back({{"index", idx}, {"kind", "pde"}, {"child", e.child.value}});
      else if (e.kind == EntryKind::Leaf)
        entries.push_back({{"index", idx},
                           {"kind", "pte"},
                           {"phys", e.page.id},
                           {"size", e.page.size_class == SizeClass::Small ? "small" : "big"}});
    }
    nodes.push_back({{"id", n.id.value}, {"level", n.level}, {"owner", n.owner.value}, {"entries", std::move(entries)}});
  }
  return {{"space", space.value}, {"pdb", spaces_.at(space.value).pdb.value}, {"nodes", std::move(nodes)}};
}

nlohmann::json VmManager::dump_tree(SpaceId space) const {
  auto rec = [&](auto&& self, NodeId id) -> nlohmann::json {
    const auto& n = nodes_.at(id.value);
    auto entries = nlohmann::json::array();
    for (std::uint32_t idx = 0; idx < n.entries.size(); ++idx) {
      const auto& e = n.entries[idx];
      if (e.kind == EntryKind::Directory)
        entries.push_back({{"index", idx}, {"dir", self(self, e.child)}});
      else if (e.kind == EntryKind::Leaf)
        entries.push_back({{"index", idx}, {"leaf", e.page.id}});
    }
    return {{"level", n.level}, {"entries", std::move(entries)}};
  };
  return rec(rec, spaces_.at(space.value).pdb);
}

}  // namespace cosched::vm
