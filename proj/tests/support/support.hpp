#pragma once

// Independent oracles and hand-rolled generators shared by the unit tests and
// the acceptance binary. Nothing here reuses the simulator's own table walk.

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cosched/device.hpp"
#include "cosched/vm_graft.hpp"

namespace cosched::testsupport {

/// Flat model of one address space: leaf base -> backing page.
class ShadowSpace {
 public:
  explicit ShadowSpace(const vm::PageGeometry& geo) : geo_(geo) {}

  void map(std::uint64_t va, const std::vector<PhysPageId>& pages);
  void unmap(std::uint64_t va, std::uint64_t n_pages, SizeClass sc);
  std::optional<vm::Translation> lookup(std::uint64_t va) const;
  const std::map<std::uint64_t, PhysPageId>& leaves() const { return leaves_; }

 private:
  vm::PageGeometry geo_;
  std::map<std::uint64_t, PhysPageId> leaves_;
};

/// Expected translation in a target that sees `spaces` (in lookup order).
std::optional<vm::Translation> shadow_lookup(const std::vector<const ShadowSpace*>& spaces, std::uint64_t va);

struct RandomVmReport {
  std::uint64_t ops = 0;
  std::uint64_t translations_checked = 0;
  std::uint64_t discrepancies = 0;
  std::uint64_t overlaps = 0;
  std::uint64_t hint_conflicts = 0;
  std::string first_problem;
};

/// Random allocate/map/unmap mix on a HighRange source and a LowRange target
/// with one graft at the midpoint. Every operation is mirrored into shadow
/// spaces; checks compare the simulator against them and against
/// union_oracle, with TLB-populating translations interleaved throughout.
RandomVmReport run_random_vm_sequence(std::uint64_t seed, std::size_t ops, const vm::VmConfig& config = {});

/// Pairs of leaf ranges, one from each owner, that overlap. Brute force.
std::uint64_t count_leaf_overlaps(const std::vector<std::map<std::uint64_t, PhysPageId>>& owners,
                                  const vm::PageGeometry& geo);

/// Maps `n` fresh pages of class `sc` in `space` via the default allocator.
VirtAddr map_fresh(vm::VmManager& vm, SpaceId space, std::uint64_t n, SizeClass sc = SizeClass::Small);

}  // namespace cosched::testsupport
