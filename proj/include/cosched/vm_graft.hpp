#pragma once

// Multi-level radix page tables, disjoint-layout VA allocation, and
// page-directory grafting between GPU address spaces.
//
// A target space that has been grafted from a source shares the source's
// physical page-table subtrees: the target holds copies of the source's
// directory entries, not of its leaves. Structural changes in the source
// (directory entries created or removed) and TLB invalidations are replayed
// against every registered subscriber.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <variant>
#include <vector>

#include <boost/icl/interval_set.hpp>
#include <nlohmann/json_fwd.hpp>

#include "cosched/types.hpp"

namespace cosched::vm {

/// Radix geometry. Level 0 is the root (PDB); level `levels - 1` holds small
/// page leaves and `big_page_level` holds big page leaves.
struct PageGeometry {
  unsigned levels = 5;
  unsigned bits_per_level = 9;
  unsigned page_shift = 12;
  unsigned big_page_level = 3;
  unsigned va_width = 48;

  std::uint32_t fanout() const { return 1u << bits_per_level; }
  unsigned leaf_level(SizeClass sc) const { return sc == SizeClass::Small ? levels - 1 : big_page_level; }
  unsigned level_shift(unsigned level) const { return page_shift + bits_per_level * (levels - 1 - level); }
  std::uint64_t page_size(SizeClass sc) const { return std::uint64_t{1} << level_shift(leaf_level(sc)); }
  std::uint32_t index(VirtAddr va, unsigned level) const {
    return static_cast<std::uint32_t>((va.value >> level_shift(level)) & (fanout() - 1));
  }
  std::uint64_t va_limit() const { return va_width >= 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << va_width); }

  /// Throws InvalidArgument for geometries the walker cannot represent.
  void validate() const;
};

enum class EntryKind : std::uint8_t { Empty, Directory, Leaf };

struct PageEntry {
  EntryKind kind = EntryKind::Empty;
  NodeId child{};
  PhysPageId page{};
  std::uint8_t perms = 0;

  static PageEntry directory(NodeId child) { return {EntryKind::Directory, child, {}, 0}; }
  static PageEntry leaf(PhysPageId page, std::uint8_t perms) { return {EntryKind::Leaf, {}, page, perms}; }

  bool empty() const { return kind == EntryKind::Empty; }
  bool operator==(const PageEntry&) const = default;
};

struct PageTableNode {
  NodeId id;
  unsigned level = 0;
  SpaceId owner;
  bool live = true;
  std::uint32_t used = 0;  // non-empty entries
  std::vector<PageEntry> entries;
};

enum class RangePolicy : std::uint8_t { HighRange, LowRange };

struct SpaceStats {
  std::uint64_t subscriber_writes = 0;  // entry writes received through propagation
  std::uint64_t tlb_invalidations = 0;
  std::uint64_t tlb_hits = 0;
  std::uint64_t tlb_misses = 0;
  std::uint64_t conflicts_resolved = 0;  // allocator fallbacks
};

struct TlbEntry {
  PhysPageId page;
  std::uint64_t page_size = 0;
};

struct AddressSpace {
  SpaceId id;
  NodeId pdb;
  RangePolicy policy = RangePolicy::HighRange;
  std::uint64_t region_begin = 0;
  std::uint64_t region_end = 0;
  std::uint64_t alloc_cursor = 0;
  std::set<SpaceId> subscribers;
  std::set<SpaceId> graft_peers;  // undirected graft relation
  std::map<std::uint64_t, TlbEntry> tlb;  // page base -> cached translation
  boost::icl::interval_set<std::uint64_t> occupied;  // allocated or mapped
  boost::icl::interval_set<std::uint64_t> mapped;    // own leaf ranges
  SpaceStats stats;
};

struct GraftReport {
  std::uint64_t pdes_copied = 0;
  std::uint64_t max_depth_descended = 0;
  std::uint64_t conflicts_resolved = 0;
  std::uint64_t entry_writes = 0;
  std::uint64_t entry_reads = 0;
  std::uint64_t tlb_invalidations = 0;

  bool operator==(const GraftReport&) const = default;
};

/// Simulated copy-engine traffic for page-table reads and writes.
struct CopyEngineLog {
  std::uint64_t reads = 0;
  std::uint64_t writes = 0;
};

struct Translation {
  PhysPageId page;
  std::uint64_t offset = 0;
  bool operator==(const Translation&) const = default;
};

struct PageFault {
  VirtAddr vaddr;
  unsigned level = 0;  // level whose entry stopped the walk
  bool operator==(const PageFault&) const = default;
};

using TranslateResult = std::variant<Translation, PageFault>;

struct StructuralChange {
  enum class Kind : std::uint8_t { PdeInserted, PdeRemoved };
  Kind kind = Kind::PdeInserted;
  unsigned level = 0;    // level of the node holding the entry
  VirtAddr vaddr;        // any address covered by the entry
  PageEntry entry;       // inserted value, or the value that was removed
};

struct VmConfig {
  PageGeometry geometry;
  VirtAddr high_base{0x7000'0000'0000};
  VirtAddr low_base{0x1'0000'0000};
};

/// Page-to-physical map as resolved by a brute-force table walk.
using MappingSet = std::map<VirtAddr, PhysPageId>;

class VmManager {
 public:
  explicit VmManager(VmConfig config = {});

  SpaceId create_space(RangePolicy policy);

  PhysPageId alloc_phys(SizeClass sc);
  std::vector<PhysPageId> alloc_phys(SizeClass sc, std::size_t count);

  /// Picks a free VA range of `n_pages` pages of class `sc`. A conflicting
  /// hint falls back to a linear upward probe and is counted as a conflict.
  VirtAddr allocate(SpaceId space, std::uint64_t n_pages, SizeClass sc,
                    std::optional<VirtAddr> hint = std::nullopt);

  /// Installs leaves for `pages` starting at `vaddr`. Returns the number of
  /// directory entries created in this space.
  std::uint64_t map_range(SpaceId space, VirtAddr vaddr, std::span<const PhysPageId> pages,
                          std::uint8_t perms = 0);

  /// Clears `n_pages` leaves starting at `vaddr`; the page size is taken from
  /// the leaf found at `vaddr`.
  void unmap_range(SpaceId space, VirtAddr vaddr, std::uint64_t n_pages);

  TranslateResult translate(SpaceId space, VirtAddr vaddr);

  GraftReport graft(SpaceId source, SpaceId target);

  /// Replays a source-side entry change on every subscriber. Directory
  /// changes are the structural path; leaf changes reach a subscriber only
  /// where it does not already share the node that changed.
  void propagate_structural(SpaceId source, const StructuralChange& change);

  /// Flushes the source's TLB and replicates the flush to its subscribers.
  /// Returns the number of TLBs flushed.
  std::uint64_t propagate_tlb_invalidation(SpaceId source);

  /// Every leaf reachable from the space's PDB.
  MappingSet walk_mappings(SpaceId space) const;

  /// Flat union of both spaces' walks. Throws InconsistentUnion when the two
  /// tables disagree on a page.
  MappingSet union_oracle(SpaceId source, SpaceId target) const;

  /// Node-level dump (ids, levels, non-empty entries) of every node reachable
  /// from the space's PDB.
  nlohmann::json dump_tables(SpaceId space) const;

  /// Nested dump without node ids; equal trees produce equal output.
  nlohmann::json dump_tree(SpaceId space) const;

  // Test knob: when false, invalidations stay on the issuing space.
  void set_tlb_propagation(bool enabled) { tlb_propagation_ = enabled; }
  bool tlb_propagation() const { return tlb_propagation_; }

  const AddressSpace& space(SpaceId id) const { return spaces_.at(id.value); }
  const PageTableNode& node(NodeId id) const { return nodes_.at(id.value); }
  const PageGeometry& geometry() const { return config_.geometry; }
  const VmConfig& config() const { return config_; }
  const CopyEngineLog& copy_engine() const { return copy_engine_; }
  std::size_t live_node_count() const;
  std::size_t space_count() const { return spaces_.size(); }

 private:
  struct Step {
    NodeId node;
    std::uint32_t index;
  };

  AddressSpace& mut_space(SpaceId id) { return spaces_.at(id.value); }
  PageTableNode& mut_node(NodeId id) { return nodes_.at(id.value); }
  NodeId new_node(unsigned level, SpaceId owner);
  void set_entry(NodeId node, std::uint32_t index, const PageEntry& entry);

  std::set<SpaceId> graft_component(SpaceId space) const;
  bool reaches(SpaceId from, SpaceId to) const;  // along subscriber edges
  void issue_invalidation(SpaceId space, std::set<SpaceId>& visited);
  std::pair<NodeId, std::vector<Step>> walk_path(SpaceId space, VirtAddr va, unsigned to_level) const;

  void merge_nodes(SpaceId target, NodeId src, NodeId dst, unsigned depth, VirtAddr prefix,
                   GraftReport& report);
  void propagate_insert(SpaceId source, SpaceId target, const StructuralChange& change);
  void propagate_remove(SpaceId source, SpaceId target, const StructuralChange& change);
  void collapse(SpaceId space, VirtAddr va, std::vector<Step> path);
  void walk_node(NodeId node, std::uint64_t prefix, MappingSet& out) const;

  VmConfig config_;
  std::vector<AddressSpace> spaces_;
  std::vector<PageTableNode> nodes_;
  CopyEngineLog copy_engine_;
  std::map<std::pair<SpaceId, SpaceId>, std::uint64_t> conflict_baseline_;
  std::uint64_t next_phys_ = 1;
  bool tlb_propagation_ = true;
};

}  // namespace cosched::vm
