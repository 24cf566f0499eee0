#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <ostream>

namespace cosched {

/// Tagged integer id. Ids are handed out densely from 0 and never reused.
template <typename Tag>
struct StrongId {
  std::uint32_t value = 0;

  constexpr StrongId() = default;
  constexpr explicit StrongId(std::uint32_t v) : value(v) {}

  constexpr auto operator<=>(const StrongId&) const = default;
};

template <typename Tag>
std::ostream& operator<<(std::ostream& os, StrongId<Tag> id) {
  return os << id.value;
}

using SpaceId = StrongId<struct SpaceTag>;
using NodeId = StrongId<struct NodeTag>;
using ContextId = StrongId<struct ContextTag>;
using ChannelId = StrongId<struct ChannelTag>;
using TsgId = StrongId<struct TsgTag>;
using StreamId = StrongId<struct StreamTag>;

struct DoorbellToken {
  std::uint32_t value = 0;
  constexpr auto operator<=>(const DoorbellToken&) const = default;
};

/// GPU virtual address.
struct VirtAddr {
  std::uint64_t value = 0;

  constexpr VirtAddr() = default;
  constexpr explicit VirtAddr(std::uint64_t v) : value(v) {}

  constexpr auto operator<=>(const VirtAddr&) const = default;
  constexpr VirtAddr operator+(std::uint64_t off) const { return VirtAddr{value + off}; }
};

inline std::ostream& operator<<(std::ostream& os, VirtAddr va) {
  return os << "0x" << std::hex << va.value << std::dec;
}

enum class SizeClass : std::uint8_t { Small, Big };

/// Opaque handle for a backing physical page.
struct PhysPageId {
  std::uint64_t id = 0;
  SizeClass size_class = SizeClass::Small;

  constexpr auto operator<=>(const PhysPageId&) const = default;
};

/// Simulated time. Unitless; phase costs are expressed in the same unit.
using SimTime = double;

}  // namespace cosched

template <typename Tag>
struct std::hash<cosched::StrongId<Tag>> {
  std::size_t operator()(cosched::StrongId<Tag> id) const noexcept { return id.value; }
};
