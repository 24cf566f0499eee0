#include "support.hpp"

#include <algorithm>
#include <sstream>
#include <variant>

#include "cosched/error.hpp"

namespace cosched::testsupport {

namespace {

std::uint64_t size_of(const vm::PageGeometry& geo, SizeClass sc) { return geo.page_size(sc); }

struct Buffer {
  std::uint64_t va;
  std::uint64_t n;
  SizeClass sc;
};

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << v;
  return os.str();
}

}  // namespace

void ShadowSpace::map(std::uint64_t va, const std::vector<PhysPageId>& pages) {
  for (std::size_t i = 0; i < pages.size(); ++i)
    leaves_[va + i * size_of(geo_, pages[i].size_class)] = pages[i];
}

void ShadowSpace::unmap(std::uint64_t va, std::uint64_t n_pages, SizeClass sc) {
  for (std::uint64_t i = 0; i < n_pages; ++i) leaves_.erase(va + i * size_of(geo_, sc));
}

std::optional<vm::Translation> ShadowSpace::lookup(std::uint64_t va) const {
  for (auto sc : {SizeClass::Small, SizeClass::Big}) {
    const std::uint64_t size = size_of(geo_, sc);
    const std::uint64_t base = va - va % size;
    auto it = leaves_.find(base);
    if (it != leaves_.end() && it->second.size_class == sc) return vm::Translation{it->second, va - base};
  }
  return std::nullopt;
}

std::optional<vm::Translation> shadow_lookup(const std::vector<const ShadowSpace*>& spaces, std::uint64_t va) {
  for (const auto* s : spaces)
    if (auto t = s->lookup(va)) return t;
  return std::nullopt;
}

std::uint64_t count_leaf_overlaps(const std::vector<std::map<std::uint64_t, PhysPageId>>& owners,
                                  const vm::PageGeometry& geo) {
  // Sweep by start address, tracking the furthest end reached by each owner.
  struct Range {
    std::uint64_t start, end;
    std::size_t owner;
  };
  std::vector<Range> all;
  for (std::size_t o = 0; o < owners.size(); ++o)
    for (const auto& [va, p] : owners[o]) all.push_back({va, va + geo.page_size(p.size_class), o});
  std::sort(all.begin(), all.end(), [](const Range& a, const Range& b) { return a.start < b.start; });
  std::vector<std::uint64_t> reach(owners.size(), 0);
  std::uint64_t overlaps = 0;
  for (const auto& r : all) {
    for (std::size_t o = 0; o < owners.size(); ++o)
      if (o != r.owner && r.start < reach[o]) ++overlaps;
    reach[r.owner] = std::max(reach[r.owner], r.end);
  }
  return overlaps;
}

VirtAddr map_fresh(vm::VmManager& vm, SpaceId space, std::uint64_t n, SizeClass sc) {
  const auto va = vm.allocate(space, n, sc);
  vm.map_range(space, va, vm.alloc_phys(sc, n));
  return va;
}

RandomVmReport run_random_vm_sequence(std::uint64_t seed, std::size_t ops, const vm::VmConfig& config) {
  RandomVmReport rep;
  std::mt19937_64 rng(seed);
  auto pick = [&](std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(rng); };
  auto chance = [&](double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; };

  vm::VmManager vm(config);
  const auto& geo = vm.geometry();
  const SpaceId ids[2] = {vm.create_space(vm::RangePolicy::HighRange), vm.create_space(vm::RangePolicy::LowRange)};
  ShadowSpace shadow[2] = {ShadowSpace(geo), ShadowSpace(geo)};
  std::vector<Buffer> buffers[2];
  bool grafted = false;

  auto problem = [&](const std::string& what) {
    ++rep.discrepancies;
    if (rep.first_problem.empty()) rep.first_problem = "seed " + std::to_string(seed) + ": " + what;
  };

  // Target expectation: its own shadow, plus the source's once grafted.
  auto expect_target = [&](std::uint64_t va) {
    std::vector<const ShadowSpace*> seen{&shadow[1]};
    if (grafted) seen.push_back(&shadow[0]);
    return shadow_lookup(seen, va);
  };
  auto check_va = [&](int side, std::uint64_t va) {
    const auto expect = side == 1 ? expect_target(va) : shadow[0].lookup(va);
    const auto got = vm.translate(ids[side], VirtAddr{va});
    ++rep.translations_checked;
    const auto* tr = std::get_if<vm::Translation>(&got);
    if (expect.has_value() != (tr != nullptr) || (tr && !(*tr == *expect)))
      problem("space " + std::to_string(side) + " translates " + hex(va) + (tr ? " to page " + std::to_string(tr->page.id) : " to a fault") +
              ", shadow says " + (expect ? "page " + std::to_string(expect->page.id) : "fault"));
  };
  auto random_probe = [&](int side) {
    // A live page of either space, or a page that may have been unmapped.
    const int from = chance(0.5) ? 0 : 1;
    const auto& leaves = shadow[from].leaves();
    if (leaves.empty()) return;
    auto it = std::next(leaves.begin(), static_cast<std::ptrdiff_t>(pick(leaves.size())));
    const auto size = geo.page_size(it->second.size_class);
    check_va(side, it->first + pick(size / 8) * 8);
  };

  for (std::size_t op = 0; op < ops; ++op) {
    if (op == ops / 2) {
      vm.graft(ids[0], ids[1]);
      grafted = true;
      continue;
    }
    const int side = chance(0.6) ? 0 : 1;
    auto& bufs = buffers[side];
    const bool can_unmap = bufs.size() > (grafted ? 0u : 1u);  // pre-graft, keep one live mapping per side
    if (can_unmap && chance(0.35)) {
      const auto i = pick(bufs.size());
      const Buffer b = bufs[i];
      bufs.erase(bufs.begin() + static_cast<std::ptrdiff_t>(i));
      vm.unmap_range(ids[side], VirtAddr{b.va}, b.n);
      shadow[side].unmap(b.va, b.n, b.sc);
      // The freed range must fault on the side that owned it, and on the
      // target when grafted or when the target owned it.
      check_va(side, b.va);
      if (side == 0 && grafted) check_va(1, b.va);
    } else {
      const SizeClass sc = chance(0.1) ? SizeClass::Big : SizeClass::Small;
      const std::uint64_t n = sc == SizeClass::Big ? 1 + pick(2) : 1 + pick(8);
      std::optional<VirtAddr> hint;
      if (!bufs.empty() && chance(0.15)) {
        const auto& b = bufs[pick(bufs.size())];
        const auto page = geo.page_size(sc);
        hint = VirtAddr{b.va - b.va % page};
      }
      const auto before = vm.space(ids[side]).stats.conflicts_resolved;
      const VirtAddr va = vm.allocate(ids[side], n, sc, hint);
      if (hint && vm.space(ids[side]).stats.conflicts_resolved > before) {
        ++rep.hint_conflicts;
        if (va == *hint) problem("conflicting hint " + hex(hint->value) + " was returned unchanged");
      }
      const auto pages = vm.alloc_phys(sc, n);
      vm.map_range(ids[side], va, pages);
      shadow[side].map(va.value, pages);
      bufs.push_back({va.value, n, sc});
    }
    ++rep.ops;
    random_probe(1);
    random_probe(0);

    if (op % 97 == 0 || op + 1 == ops) {
      // Walk-level union soundness against both oracles.
      try {
        const auto walk = vm.walk_mappings(ids[1]);
        const auto oracle = grafted ? vm.union_oracle(ids[0], ids[1]) : vm.walk_mappings(ids[1]);
        if (walk != oracle) problem("target walk differs from union_oracle after op " + std::to_string(op));
        std::map<std::uint64_t, PhysPageId> expected = shadow[1].leaves();
        if (grafted) expected.insert(shadow[0].leaves().begin(), shadow[0].leaves().end());
        if (walk.size() != expected.size()) problem("target walk has " + std::to_string(walk.size()) +
                                                    " leaves, shadow has " + std::to_string(expected.size()));
        for (const auto& [va, page] : walk) {
          auto it = expected.find(va.value);
          if (it == expected.end() || it->second != page) problem("walk leaf " + hex(va.value) + " not in shadow");
        }
      } catch (const SimError& e) {
        problem(std::string("oracle threw: ") + e.what());
      }
    }
  }

  // Exhaustive translation of every mapped page (first and last byte) on the
  // target, against union_oracle and the shadow.
  const auto oracle = vm.union_oracle(ids[0], ids[1]);
  for (const auto& [va, page] : oracle) {
    const auto size = geo.page_size(page.size_class);
    for (std::uint64_t off : {std::uint64_t{0}, size - 1}) {
      const auto got = vm.translate(ids[1], va + off);
      ++rep.translations_checked;
      const auto* tr = std::get_if<vm::Translation>(&got);
      if (!tr || tr->page != page || tr->offset != off)
        problem("target translate " + hex(va.value + off) + " disagrees with union_oracle");
    }
  }
  for (int side = 0; side < 2; ++side)
    for (const auto& [va, page] : shadow[side].leaves())
      if (!oracle.contains(VirtAddr{va})) problem("shadow page " + hex(va) + " missing from union_oracle");
  if (oracle.size() != shadow[0].leaves().size() + shadow[1].leaves().size())
    problem("union_oracle size " + std::to_string(oracle.size()) + " differs from shadow union");

  rep.overlaps = count_leaf_overlaps({shadow[0].leaves(), shadow[1].leaves()}, geo);
  return rep;
}

}  // namespace cosched::testsupport
