#pragma once

// Holdout assignment at (household, week) granularity.

#include <cstdint>
#include <string>
#include <unordered_map>

namespace nestfact {

enum class SplitBucket : std::uint8_t { Train = 0, Validation = 1, Test = 2 };

struct SampleSplit {
  std::string scheme_tag;
  std::unordered_map<std::uint64_t, SplitBucket> cells;

  static std::uint64_t key(int household, int week) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(household)) << 32) |
           static_cast<std::uint32_t>(week);
  }
  // Cells absent from the panel default to Train; lookups for retained cells
  // always hit the map.
  SplitBucket of(int household, int week) const {
    auto it = cells.find(key(household, week));
    return it == cells.end() ? SplitBucket::Train : it->second;
  }
};

}  // namespace nestfact
