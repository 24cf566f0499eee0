#include <variant>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "cosched/error.hpp"
#include "cosched/vm_graft.hpp"
#include "support.hpp"

using namespace cosched;
using namespace cosched::vm;
using cosched::testsupport::map_fresh;

namespace {

constexpr std::uint64_t kHigh = 0x7000'0000'0000;
constexpr std::uint64_t kLow = 0x1'0000'0000;
constexpr std::uint64_t kSmall = 4096;
constexpr std::uint64_t kBig = 2 * 1024 * 1024;

// 4 levels x 9 bits + 12 = 48 bits: the root index is VA bits 39..47, so the
// default bases land on different root entries.
VmConfig four_level() {
  VmConfig c;
  c.geometry.levels = 4;
  c.geometry.big_page_level = 2;
  return c;
}

template <typename Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const SimError& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected a SimError";
  return ErrorCode::InvalidArgument;
}

const Translation* as_translation(const TranslateResult& r) { return std::get_if<Translation>(&r); }

}  // namespace

// ---- allocate ----

TEST(Allocate, FirstAllocationLandsOnPolicyBase) {
  VmManager vm;
  const auto hi = vm.create_space(RangePolicy::HighRange);
  const auto lo = vm.create_space(RangePolicy::LowRange);
  EXPECT_EQ(vm.allocate(hi, 1, SizeClass::Small).value, kHigh);
  EXPECT_EQ(vm.allocate(lo, 1, SizeClass::Small).value, kLow);
}

TEST(Allocate, ConflictingHintFallsBackAndIsCounted) {
  VmManager vm;
  const auto s = vm.create_space(RangePolicy::HighRange);
  const auto va = map_fresh(vm, s, 4);
  const auto got = vm.allocate(s, 2, SizeClass::Small, va + kSmall);
  EXPECT_NE(got, va + kSmall);
  EXPECT_EQ(vm.space(s).stats.conflicts_resolved, 1u);
  vm.map_range(s, got, vm.alloc_phys(SizeClass::Small, 2));
  std::map<std::uint64_t, PhysPageId> leaves;
  for (const auto& [v, p] : vm.walk_mappings(s)) leaves[v.value] = p;
  // Split into singleton owners so the sweep compares every pair of leaves.
  std::vector<std::map<std::uint64_t, PhysPageId>> owners;
  for (const auto& kv : leaves) owners.push_back({kv});
  EXPECT_EQ(testsupport::count_leaf_overlaps(owners, vm.geometry()), 0u);
}

TEST(Allocate, HintConflictAcrossGraftedPairAvoidsPeerRanges) {
  VmManager vm;
  const auto src = vm.create_space(RangePolicy::HighRange);
  const auto dst = vm.create_space(RangePolicy::LowRange);
  map_fresh(vm, src, 1);
  const auto lo = map_fresh(vm, dst, 1);
  vm.graft(src, dst);
  // The source asks for the target's page; the fallback must skip it.
  const auto got = vm.allocate(src, 1, SizeClass::Small, lo);
  EXPECT_NE(got, lo);
  EXPECT_EQ(vm.space(src).stats.conflicts_resolved, 1u);
}

TEST(Allocate, ExhaustedRegionThrows) {
  VmConfig c;
  c.geometry.va_width = 48;
  VmManager vm(c);
  const auto s = vm.create_space(RangePolicy::HighRange);
  EXPECT_EQ(code_of([&] { vm.allocate(s, std::uint64_t{1} << 40, SizeClass::Small); }),
            ErrorCode::AddressSpaceExhausted);
}

TEST(Allocate, RejectsZeroPagesAndMisalignedHint) {
  VmManager vm;
  const auto s = vm.create_space(RangePolicy::LowRange);
  EXPECT_EQ(code_of([&] { vm.allocate(s, 0, SizeClass::Small); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([&] { vm.allocate(s, 1, SizeClass::Small, VirtAddr{kLow + 1}); }), ErrorCode::InvalidArgument);
}

TEST(Allocate, DefaultPoliciesNeverConflict) {
  VmManager vm;
  const auto src = vm.create_space(RangePolicy::HighRange);
  const auto dst = vm.create_space(RangePolicy::LowRange);
  for (int i = 0; i < 50; ++i) {
    map_fresh(vm, src, 1 + i % 5);
    map_fresh(vm, dst, 1 + i % 3);
    if (i == 25) EXPECT_EQ(vm.graft(src, dst).conflicts_resolved, 0u);
  }
  EXPECT_EQ(vm.space(src).stats.conflicts_resolved + vm.space(dst).stats.conflicts_resolved, 0u);
}

// ---- map / unmap ----

TEST(MapRange, FirstSmallPageCreatesOneDirectoryPerNonLeafLevel) {
  VmManager vm;
  const auto s = vm.create_space(RangePolicy::HighRange);
  const auto va = vm.allocate(s, 2, SizeClass::Small);
  EXPECT_EQ(vm.map_range(s, va, vm.alloc_phys(SizeClass::Small, 1)), 4u);
  // Walk the table by hand: one directory per level 0..3, a leaf at level 4.
  NodeId cur = vm.space(s).pdb;
  for (unsigned level = 0; level < 4; ++level) {
    const auto& e = vm.node(cur).entries[vm.geometry().index(va, level)];
    ASSERT_EQ(e.kind, EntryKind::Directory) << "level " << level;
    cur = e.child;
  }
  EXPECT_EQ(vm.node(cur).entries[vm.geometry().index(va, 4)].kind, EntryKind::Leaf);
  EXPECT_EQ(vm.live_node_count(), 5u);
  EXPECT_EQ(vm.map_range(s, va + kSmall, vm.alloc_phys(SizeClass::Small, 1)), 0u);
}

TEST(MapRange, BigPageLeafSitsAtBigPageLevel) {
  VmManager vm;
  const auto s = vm.create_space(RangePolicy::HighRange);
  const auto va = vm.allocate(s, 1, SizeClass::Big);
  EXPECT_EQ(va.value % kBig, 0u);
  EXPECT_EQ(vm.map_range(s, va, vm.alloc_phys(SizeClass::Big, 1)), 3u);
  const auto r = vm.translate(s, va + 0x12345);
  const auto* t = as_translation(r);
  ASSERT_TRUE(t);
  EXPECT_EQ(t->offset, 0x12345u);
  EXPECT_EQ(t->page.size_class, SizeClass::Big);
}

TEST(MapRange, OverlappingMapIsRejected) {
  VmManager vm;
  const auto s = vm.create_space(RangePolicy::HighRange);
  const auto va = map_fresh(vm, s, 2);
  EXPECT_EQ(code_of([&] { vm.map_range(s, va + kSmall, vm.alloc_phys(SizeClass::Small, 1)); }),
            ErrorCode::AlreadyMapped);
  // Rejected maps leave the table untouched.
  EXPECT_EQ(vm.walk_mappings(s).size(), 2u);
}

TEST(MapRange, MisalignedOrMixedPagesRejected) {
  VmManager vm;
  const auto s = vm.create_space(RangePolicy::HighRange);
  EXPECT_EQ(code_of([&] { vm.map_range(s, VirtAddr{kHigh + 8}, vm.alloc_phys(SizeClass::Small, 1)); }),
            ErrorCode::InvalidArgument);
  std::vector<PhysPageId> mixed{vm.alloc_phys(SizeClass::Small), vm.alloc_phys(SizeClass::Big)};
  EXPECT_EQ(code_of([&] { vm.map_range(s, VirtAddr{kHigh}, mixed); }), ErrorCode::InvalidArgument);
}

TEST(UnmapRange, UnmappedRangeThrowsNotMapped) {
  VmManager vm;
  const auto s = vm.create_space(RangePolicy::HighRange);
  EXPECT_EQ(code_of([&] { vm.unmap_range(s, VirtAddr{kHigh}, 1); }), ErrorCode::NotMapped);
  const auto va = map_fresh(vm, s, 1);
  EXPECT_EQ(code_of([&] { vm.unmap_range(s, va, 2); }), ErrorCode::NotMapped);
  EXPECT_EQ(vm.walk_mappings(s).size(), 1u);
}

TEST(UnmapRange, RoundTripRestoresTreeAndFlushesEverySubscriber) {
  VmManager vm;
  const auto src = vm.create_space(RangePolicy::HighRange);
  const auto a = vm.create_space(RangePolicy::LowRange);
  const auto b = vm.create_space(RangePolicy::LowRange);
  map_fresh(vm, src, 1);
  map_fresh(vm, a, 1);
  map_fresh(vm, b, 1);
  vm.graft(src, a);
  vm.graft(src, b);
  const auto src_before = vm.dump_tree(src);
  const auto a_before = vm.dump_tree(a);
  const auto inval_before = vm.space(src).stats.tlb_invalidations + vm.space(a).stats.tlb_invalidations +
                            vm.space(b).stats.tlb_invalidations;
  // A fresh top-level region so the round trip creates and collapses PDEs.
  const auto far = vm.allocate(src, 1, SizeClass::Small, VirtAddr{kHigh + (std::uint64_t{1} << 39)});
  vm.map_range(src, far, vm.alloc_phys(SizeClass::Small, 1));
  vm.unmap_range(src, far, 1);
  EXPECT_EQ(vm.dump_tree(src), src_before);
  EXPECT_EQ(vm.dump_tree(a), a_before);
  const auto inval_after = vm.space(src).stats.tlb_invalidations + vm.space(a).stats.tlb_invalidations +
                           vm.space(b).stats.tlb_invalidations;
  EXPECT_EQ(inval_after - inval_before, 3u);  // 1 + |subscribers|
}

TEST(UnmapRange, EmptiedDirectoriesAreFreed) {
  VmManager vm;
  const auto s = vm.create_space(RangePolicy::HighRange);
  const auto va = map_fresh(vm, s, 1);
  vm.unmap_range(s, va, 1);
  EXPECT_EQ(vm.live_node_count(), 1u);  // only the PDB
}

// ---- translate ----

TEST(Translate, EmptySpaceFaultsAtRoot) {
  VmManager vm;
  const auto s = vm.create_space(RangePolicy::HighRange);
  const auto r = vm.translate(s, VirtAddr{kHigh});
  ASSERT_TRUE(std::holds_alternative<PageFault>(r));
  EXPECT_EQ(std::get<PageFault>(r).level, 0u);
  EXPECT_EQ(std::get<PageFault>(r).vaddr.value, kHigh);
}

TEST(Translate, OffsetWithinPage) {
  VmManager vm;
  const auto s = vm.create_space(RangePolicy::LowRange);
  const auto va = vm.allocate(s, 1, SizeClass::Small);
  const auto p0 = vm.alloc_phys(SizeClass::Small);
  vm.map_range(s, va, std::vector{p0});
  const auto r = vm.translate(s, va + 0x10);
  const auto* t = as_translation(r);
  ASSERT_TRUE(t);
  EXPECT_EQ(t->page, p0);
  EXPECT_EQ(t->offset, 0x10u);
}

TEST(Translate, FaultLevelIsWhereTheWalkStops) {
  VmManager vm;
  const auto s = vm.create_space(RangePolicy::HighRange);
  const auto va = map_fresh(vm, s, 1);
  // Same leaf table, next slot: the walk reaches level 4 and finds it empty.
  const auto r = vm.translate(s, va + kSmall);
  ASSERT_TRUE(std::holds_alternative<PageFault>(r));
  EXPECT_EQ(std::get<PageFault>(r).level, 4u);
}

TEST(Translate, SecondLookupHitsTlb) {
  VmManager vm;
  const auto s = vm.create_space(RangePolicy::HighRange);
  const auto va = map_fresh(vm, s, 1);
  vm.translate(s, va);
  vm.translate(s, va + 8);
  EXPECT_EQ(vm.space(s).stats.tlb_misses, 1u);
  EXPECT_EQ(vm.space(s).stats.tlb_hits, 1u);
}

// ---- graft ----

TEST(Graft, EmptyIntoEmpty) {
  VmManager vm;
  const auto src = vm.create_space(RangePolicy::HighRange);
  const auto dst = vm.create_space(RangePolicy::LowRange);
  const auto r = vm.graft(src, dst);
  EXPECT_EQ(r.pdes_copied, 0u);
  EXPECT_EQ(r.tlb_invalidations, 1u);
  EXPECT_TRUE(vm.space(src).subscribers.contains(dst));
}

TEST(Graft, DistinctRootIndicesCopyOnePdeWithoutDescending) {
  VmManager vm(four_level());
  const auto src = vm.create_space(RangePolicy::HighRange);
  const auto dst = vm.create_space(RangePolicy::LowRange);
  map_fresh(vm, src, 1);
  map_fresh(vm, dst, 1);
  ASSERT_NE(vm.geometry().index(VirtAddr{kHigh}, 0), vm.geometry().index(VirtAddr{kLow}, 0));
  const auto r = vm.graft(src, dst);
  EXPECT_EQ(r.pdes_copied, 1u);
  EXPECT_EQ(r.max_depth_descended, 0u);
  EXPECT_GE(r.entry_writes, r.pdes_copied);
  EXPECT_EQ(vm.walk_mappings(dst), vm.union_oracle(src, dst));
}

TEST(Graft, DefaultGeometrySharesRootEntryAndDescendsOnce) {
  // 57 bits of radix over a 48-bit VA: both default bases use root entry 0.
  VmManager vm;
  const auto src = vm.create_space(RangePolicy::HighRange);
  const auto dst = vm.create_space(RangePolicy::LowRange);
  map_fresh(vm, src, 1);
  map_fresh(vm, dst, 1);
  const auto r = vm.graft(src, dst);
  EXPECT_EQ(r.pdes_copied, 1u);
  EXPECT_EQ(r.max_depth_descended, 1u);
  EXPECT_EQ(vm.walk_mappings(dst), vm.union_oracle(src, dst));
}

TEST(Graft, HintForcedTopLevelCollisionDescends) {
  VmManager vm(four_level());
  const auto src = vm.create_space(RangePolicy::HighRange);
  const auto dst = vm.create_space(RangePolicy::LowRange);
  map_fresh(vm, src, 1);
  // Same root slot as the source, different second-level slot.
  const auto va = vm.allocate(dst, 1, SizeClass::Small, VirtAddr{kHigh + (std::uint64_t{1} << 30) * 64});
  vm.map_range(dst, va, vm.alloc_phys(SizeClass::Small, 1));
  ASSERT_EQ(vm.geometry().index(va, 0), vm.geometry().index(VirtAddr{kHigh}, 0));
  const auto r = vm.graft(src, dst);
  EXPECT_GE(r.max_depth_descended, 1u);
  EXPECT_EQ(vm.walk_mappings(dst), vm.union_oracle(src, dst));
  EXPECT_EQ(vm.walk_mappings(dst).size(), 2u);
}

TEST(Graft, RepeatIsIdempotent) {
  VmManager vm;
  const auto src = vm.create_space(RangePolicy::HighRange);
  const auto dst = vm.create_space(RangePolicy::LowRange);
  map_fresh(vm, src, 3);
  map_fresh(vm, dst, 2);
  vm.graft(src, dst);
  const auto tree = vm.dump_tree(dst);
  const auto again = vm.graft(src, dst);
  EXPECT_EQ(again.pdes_copied, 0u);
  EXPECT_EQ(again.conflicts_resolved, 0u);
  EXPECT_EQ(again.entry_writes, 0u);
  EXPECT_EQ(vm.dump_tree(dst), tree);
}

TEST(Graft, OverlappingLeavesAreRejected) {
  VmManager vm;
  const auto src = vm.create_space(RangePolicy::HighRange);
  const auto dst = vm.create_space(RangePolicy::LowRange);
  const auto va = map_fresh(vm, src, 1);
  // Not grafted yet, so the target's allocator cannot see the source.
  vm.map_range(dst, vm.allocate(dst, 1, SizeClass::Small, va), vm.alloc_phys(SizeClass::Small, 1));
  EXPECT_EQ(code_of([&] { vm.graft(src, dst); }), ErrorCode::OverlapDetected);
  EXPECT_TRUE(vm.space(src).subscribers.empty());
}

TEST(Graft, SubscriberCyclesAreRejected) {
  VmManager vm;
  const auto a = vm.create_space(RangePolicy::HighRange);
  const auto b = vm.create_space(RangePolicy::LowRange);
  const auto c = vm.create_space(RangePolicy::LowRange);
  vm.graft(a, b);
  vm.graft(b, c);
  EXPECT_EQ(code_of([&] { vm.graft(c, a); }), ErrorCode::CycleDetected);
  EXPECT_EQ(code_of([&] { vm.graft(a, a); }), ErrorCode::InvalidArgument);
}

TEST(Graft, EveryMappedSourcePageResolvesIdenticallyOnTarget) {
  VmManager vm;
  const auto src = vm.create_space(RangePolicy::HighRange);
  const auto dst = vm.create_space(RangePolicy::LowRange);
  for (int i = 0; i < 10; ++i) map_fresh(vm, src, 1 + i, i % 3 == 0 ? SizeClass::Big : SizeClass::Small);
  map_fresh(vm, dst, 4);
  vm.graft(src, dst);
  for (const auto& [va, page] : vm.walk_mappings(src)) {
    const auto ra = vm.translate(src, va + 0x40);
    const auto rb = vm.translate(dst, va + 0x40);
    const auto* a = as_translation(ra);
    const auto* b = as_translation(rb);
    ASSERT_TRUE(a && b);
    EXPECT_EQ(*a, *b);
  }
}

// ---- propagation ----

TEST(Propagation, NewTopLevelPdeCostsOneWritePerSubscriber) {
  VmManager vm(four_level());
  const auto src = vm.create_space(RangePolicy::HighRange);
  const auto a = vm.create_space(RangePolicy::LowRange);
  const auto b = vm.create_space(RangePolicy::LowRange);
  map_fresh(vm, src, 1);
  vm.graft(src, a);
  vm.graft(src, b);
  const auto wa = vm.space(a).stats.subscriber_writes;
  const auto wb = vm.space(b).stats.subscriber_writes;
  const auto far = vm.allocate(src, 1, SizeClass::Small, VirtAddr{kHigh + (std::uint64_t{1} << 39)});
  EXPECT_EQ(vm.map_range(src, far, vm.alloc_phys(SizeClass::Small, 1)), 3u);
  EXPECT_EQ(vm.space(a).stats.subscriber_writes - wa, 1u);
  EXPECT_EQ(vm.space(b).stats.subscriber_writes - wb, 1u);
  EXPECT_TRUE(as_translation(vm.translate(a, far)));
  EXPECT_TRUE(as_translation(vm.translate(b, far)));
}

TEST(Propagation, LeafOnlyChangeInSharedSubtreeCostsNothing) {
  VmManager vm;
  const auto src = vm.create_space(RangePolicy::HighRange);
  const auto dst = vm.create_space(RangePolicy::LowRange);
  const auto first = map_fresh(vm, src, 1);
  map_fresh(vm, dst, 1);
  vm.graft(src, dst);
  const auto before = vm.space(dst).stats.subscriber_writes;
  const auto writes_before = vm.copy_engine().writes;
  const auto va = vm.allocate(src, 1, SizeClass::Small);
  ASSERT_EQ(vm.map_range(src, va, vm.alloc_phys(SizeClass::Small, 1)), 0u);
  EXPECT_EQ(vm.space(dst).stats.subscriber_writes, before);
  EXPECT_EQ(vm.copy_engine().writes, writes_before);
  EXPECT_TRUE(as_translation(vm.translate(dst, va)));
  EXPECT_TRUE(as_translation(vm.translate(dst, first)));
}

TEST(Propagation, NoSubscribersNoExtraWrites) {
  VmManager vm;
  const auto s = vm.create_space(RangePolicy::HighRange);
  map_fresh(vm, s, 1);
  EXPECT_EQ(vm.space(s).stats.subscriber_writes, 0u);
  EXPECT_EQ(vm.copy_engine().writes, 0u);
}

TEST(Propagation, SourceUnmapFaultsOnSubscriber) {
  VmManager vm;
  const auto src = vm.create_space(RangePolicy::HighRange);
  const auto dst = vm.create_space(RangePolicy::LowRange);
  const auto keep = map_fresh(vm, src, 1);
  const auto gone = map_fresh(vm, src, 1);
  map_fresh(vm, dst, 1);
  vm.graft(src, dst);
  ASSERT_TRUE(as_translation(vm.translate(dst, gone)));
  vm.unmap_range(src, gone, 1);
  EXPECT_TRUE(std::holds_alternative<PageFault>(vm.translate(dst, gone)));
  EXPECT_TRUE(as_translation(vm.translate(dst, keep)));
  EXPECT_EQ(vm.walk_mappings(dst), vm.union_oracle(src, dst));
}

TEST(Propagation, CollapsedSourceSubtreeIsClearedOnSubscriber) {
  VmManager vm(four_level());
  const auto src = vm.create_space(RangePolicy::HighRange);
  const auto dst = vm.create_space(RangePolicy::LowRange);
  map_fresh(vm, src, 1);
  map_fresh(vm, dst, 1);
  vm.graft(src, dst);
  const auto tree = vm.dump_tree(dst);
  const auto far = vm.allocate(src, 1, SizeClass::Small, VirtAddr{kHigh + (std::uint64_t{1} << 39)});
  vm.map_range(src, far, vm.alloc_phys(SizeClass::Small, 1));
  EXPECT_NE(vm.dump_tree(dst), tree);
  vm.unmap_range(src, far, 1);
  EXPECT_EQ(vm.dump_tree(dst), tree);
}

TEST(Propagation, MapThroughGraftedSubtreeIsRejected) {
  VmManager vm;
  const auto src = vm.create_space(RangePolicy::HighRange);
  const auto dst = vm.create_space(RangePolicy::LowRange);
  const auto va = map_fresh(vm, src, 1);
  map_fresh(vm, dst, 1);
  vm.graft(src, dst);
  EXPECT_EQ(code_of([&] { vm.map_range(dst, va + kSmall, vm.alloc_phys(SizeClass::Small, 1)); }),
            ErrorCode::OverlapDetected);
  EXPECT_EQ(code_of([&] { vm.unmap_range(dst, va, 1); }), ErrorCode::OverlapDetected);
}

// ---- TLB ----

TEST(Tlb, UnmapWithOneSubscriberFlushesTwice) {
  VmManager vm;
  const auto src = vm.create_space(RangePolicy::HighRange);
  const auto dst = vm.create_space(RangePolicy::LowRange);
  map_fresh(vm, src, 1);
  const auto va = map_fresh(vm, src, 1);
  map_fresh(vm, dst, 1);
  vm.graft(src, dst);
  const auto before = vm.space(src).stats.tlb_invalidations + vm.space(dst).stats.tlb_invalidations;
  vm.unmap_range(src, va, 1);
  EXPECT_EQ(vm.space(src).stats.tlb_invalidations + vm.space(dst).stats.tlb_invalidations - before, 2u);
}

TEST(Tlb, InvalidationWithoutSubscribersFlushesOnce) {
  VmManager vm;
  const auto s = vm.create_space(RangePolicy::HighRange);
  EXPECT_EQ(vm.propagate_tlb_invalidation(s), 1u);
  EXPECT_EQ(vm.space(s).stats.tlb_invalidations, 1u);
}

class TlbRemap : public ::testing::TestWithParam<bool> {};

TEST_P(TlbRemap, SubscriberSeesStalePageOnlyWithoutPropagation) {
  const bool propagate = GetParam();
  VmManager vm;
  vm.set_tlb_propagation(propagate);
  const auto src = vm.create_space(RangePolicy::HighRange);
  const auto dst = vm.create_space(RangePolicy::LowRange);
  map_fresh(vm, src, 1);
  const auto va = vm.allocate(src, 1, SizeClass::Small);
  const auto old_page = vm.alloc_phys(SizeClass::Small);
  vm.map_range(src, va, std::vector{old_page});
  map_fresh(vm, dst, 1);
  vm.graft(src, dst);
  ASSERT_EQ(as_translation(vm.translate(dst, va))->page, old_page);  // cached in the subscriber's TLB

  vm.unmap_range(src, va, 1);
  const auto new_page = vm.alloc_phys(SizeClass::Small);
  vm.map_range(src, va, std::vector{new_page});

  EXPECT_EQ(as_translation(vm.translate(src, va))->page, new_page);
  const auto seen_r = vm.translate(dst, va);
  const auto* seen = as_translation(seen_r);
  ASSERT_TRUE(seen);
  EXPECT_EQ(seen->page, propagate ? new_page : old_page);
}

INSTANTIATE_TEST_SUITE_P(PropagationOnOff, TlbRemap, ::testing::Bool());

// ---- union oracle ----

TEST(UnionOracle, EmptySpacesGiveEmptyMap) {
  VmManager vm;
  const auto a = vm.create_space(RangePolicy::HighRange);
  const auto b = vm.create_space(RangePolicy::LowRange);
  EXPECT_TRUE(vm.union_oracle(a, b).empty());
}

TEST(UnionOracle, DisjointMappingsAddUp) {
  VmManager vm;
  const auto a = vm.create_space(RangePolicy::HighRange);
  const auto b = vm.create_space(RangePolicy::LowRange);
  map_fresh(vm, a, 3);
  map_fresh(vm, b, 2);
  EXPECT_EQ(vm.union_oracle(a, b).size(), 5u);
}

TEST(UnionOracle, DisagreeingTablesThrow) {
  VmManager vm;
  const auto a = vm.create_space(RangePolicy::HighRange);
  const auto b = vm.create_space(RangePolicy::LowRange);
  const auto va = map_fresh(vm, a, 1);
  vm.map_range(b, vm.allocate(b, 1, SizeClass::Small, va), vm.alloc_phys(SizeClass::Small, 1));
  EXPECT_EQ(code_of([&] { vm.union_oracle(a, b); }), ErrorCode::InconsistentUnion);
}

// ---- properties ----

class RandomGraftSequences : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(RandomGraftSequences, TargetMatchesShadowAndUnionOracle) {
  const auto rep = testsupport::run_random_vm_sequence(GetParam(), 400);
  EXPECT_EQ(rep.discrepancies, 0u) << rep.first_problem;
  EXPECT_EQ(rep.overlaps, 0u);
  EXPECT_GT(rep.translations_checked, 400u);
}

TEST_P(RandomGraftSequences, FourLevelGeometryToo) {
  const auto rep = testsupport::run_random_vm_sequence(GetParam() * 7919 + 1, 300, four_level());
  EXPECT_EQ(rep.discrepancies, 0u) << rep.first_problem;
  EXPECT_EQ(rep.overlaps, 0u);
}

INSTANTIATE_TEST_SUITE_P(Seeds, RandomGraftSequences, ::testing::Range<std::uint64_t>(1, 21));

TEST(Determinism, SameOperationsSameTablesAndReports) {
  auto build = [] {
    VmManager vm;
    const auto src = vm.create_space(RangePolicy::HighRange);
    const auto dst = vm.create_space(RangePolicy::LowRange);
    for (int i = 0; i < 20; ++i) map_fresh(vm, src, 1 + i % 4, i % 5 == 0 ? SizeClass::Big : SizeClass::Small);
    map_fresh(vm, dst, 3);
    const auto r = vm.graft(src, dst);
    map_fresh(vm, src, 2);
    nlohmann::json out{{"src", vm.dump_tables(src)},
                       {"dst", vm.dump_tables(dst)},
                       {"report", {r.pdes_copied, r.entry_writes, r.entry_reads, r.max_depth_descended}},
                       {"copy", {vm.copy_engine().reads, vm.copy_engine().writes}}};
    return out.dump();
  };
  EXPECT_EQ(build(), build());
}

TEST(Geometry, InvalidGeometriesAreRejected) {
  VmConfig c;
  c.geometry.big_page_level = 9;
  EXPECT_EQ(code_of([&] { VmManager vm(c); }), ErrorCode::InvalidArgument);
}
