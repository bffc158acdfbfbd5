#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "shieldbench/lavagrid.hpp"

namespace shieldbench {

// 8x8, 12 eligible tiles in the band just before the goal. Every route to
// the goal crosses the band.
inline constexpr std::string_view kDeskLayout =
    "########\n"
    "#S.....#\n"
    "#......#\n"
    "#....LL#\n"
    "#...LLL#\n"
    "#..LLLL#\n"
    "#..LLLG#\n"
    "########\n";

// 8x8 with three goals in the other three corners.
inline constexpr std::string_view kGoalLayout =
    "########\n"
    "#S.LL.0#\n"
    "#......#\n"
    "#L.LL.L#\n"
    "#L.LL.L#\n"
    "#......#\n"
    "#1.LL.2#\n"
    "########\n";

// 16x16 with 42 eligible tiles on a diagonal band.
inline constexpr std::string_view kFullLayout =
    "################\n"
    "#S...........LL#\n"
    "#...........LLL#\n"
    "#..........LLL.#\n"
    "#.........LLL..#\n"
    "#........LLL...#\n"
    "#......LLLL....#\n"
    "#.....LLLL.....#\n"
    "#.....LLL......#\n"
    "#....LLL.......#\n"
    "#...LLL........#\n"
    "#..LLL.........#\n"
    "#.LLL..........#\n"
    "#LLL...........#\n"
    "#LL...........G#\n"
    "################\n";

// 5x5 walkable, no lava.
inline constexpr std::string_view kOpenLayout =
    "#######\n"
    "#S....#\n"
    "#.....#\n"
    "#.....#\n"
    "#.....#\n"
    "#....G#\n"
    "#######\n";

// Tiny map with a single eligible tile next to the direct route.
inline constexpr std::string_view kMiniLayout =
    "#######\n"
    "#S....#\n"
    "#..L..#\n"
    "#....G#\n"
    "#######\n";

inline const std::vector<std::string>& layout_names() {
  static const std::vector<std::string> kNames = {"desk", "goal3", "full", "open5", "mini"};
  return kNames;
}

/// Layout by name, with an all-zero schedule.
inline LavaGridLayout named_layout(std::string_view name) {
  if (name == "desk") return LavaGridLayout::parse(kDeskLayout);
  if (name == "goal3") return LavaGridLayout::parse(kGoalLayout);
  if (name == "full") return LavaGridLayout::parse(kFullLayout);
  if (name == "open5") return LavaGridLayout::parse(kOpenLayout);
  if (name == "mini") return LavaGridLayout::parse(kMiniLayout);
  throw std::invalid_argument("unknown layout '" + std::string(name) + "'");
}

}  // namespace shieldbench
