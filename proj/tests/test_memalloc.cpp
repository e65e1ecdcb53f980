// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <random>

#include "doctest.h"
#include "tinydeploy/frontend.hpp"
#include "tinydeploy/memalloc.hpp"

using namespace tinydeploy;

namespace {

// Fixed-size allocation instance on one level.
struct Fixed {
  ConstraintProgram cp;
  std::vector<AllocationProblem> problems;
};

Fixed fixed_instance(const std::vector<std::pair<int, int>>& lives, const std::vector<int64_t>& sizes,
                     int64_t capacity) {
  Fixed f;
  AllocationProblem p{"L1", capacity, {}};
  for (size_t i = 0; i < sizes.size(); ++i) {
    const std::string name = "b" + std::to_string(i);
    const int sv = f.cp.add_size({name, "L1", sizes[i], {}, 1});
    p.items.push_back({name, sv, {name, lives[i].first, lives[i].second}, AllocationItem::Kind::Home, -1});
  }
  f.problems.push_back(p);
  return f;
}

int64_t brute_force_peak(const std::vector<Lifetime>& lives, const std::vector<int64_t>& sizes) {
  std::vector<int> order(sizes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  int64_t best = std::numeric_limits<int64_t>::max();
  do best = std::min(best, tetris_allocate(order, lives, sizes).peak);
  while (std::next_permutation(order.begin(), order.end()));
  return best;
}

const std::vector<Lifetime> kWorked = {{"A", 0, 1}, {"B", 2, 3}, {"C", 1, 2}};
const std::vector<int64_t> kWorkedSizes = {4, 3, 2};

}  // namespace

TEST_CASE("tetris: disjoint and overlapping pairs") {
  std::vector<Lifetime> disjoint = {{"x", 0, 0}, {"y", 1, 1}};
  std::vector<int64_t> sizes = {100, 50};
  std::vector<int> order = {0, 1};
  auto r = tetris_allocate(order, disjoint, sizes);
  CHECK(r.offsets == std::vector<int64_t>{0, 0});
  CHECK(r.peak == 100);

  std::vector<Lifetime> overlap = {{"x", 0, 1}, {"y", 1, 2}};
  r = tetris_allocate(order, overlap, sizes);
  CHECK(r.offsets == std::vector<int64_t>{0, 100});
  CHECK(r.peak == 150);
}

TEST_CASE("tetris: worked three-buffer instance") {
  std::vector<int> abc = {0, 1, 2};
  auto r = tetris_allocate(abc, kWorked, kWorkedSizes);
  CHECK(r.heights == std::vector<int64_t>{4, 3, 6});
  CHECK(r.peak == 6);

  std::vector<int> acb = {0, 2, 1};
  r = tetris_allocate(acb, kWorked, kWorkedSizes);
  CHECK(r.heights == std::vector<int64_t>{4, 9, 6});
  CHECK(r.peak == 9);

  CHECK(brute_force_peak(kWorked, kWorkedSizes) == 6);
}

TEST_CASE("tetris: H takes the max over every earlier overlapping buffer") {
  // C overlaps both A and B; B was placed last but A is taller.
  std::vector<Lifetime> lives = {{"A", 0, 2}, {"B", 2, 3}, {"C", 1, 3}};
  std::vector<int64_t> sizes = {10, 1, 1};
  std::vector<int> order = {0, 1, 2};
  auto r = tetris_allocate(order, lives, sizes);
  CHECK(r.offsets == std::vector<int64_t>{0, 10, 11});
}

TEST_CASE("solve_joint: worked instance at capacity 6 and 5") {
  auto f = fixed_instance({{0, 1}, {2, 3}, {1, 2}}, kWorkedSizes, 6);
  auto sol = solve_joint(f.cp, f.problems, {});
  CHECK(sol.level("L1").peak == 6);
  CHECK(sol.optimal);
  auto replay = tetris_allocate(sol.level("L1").order, kWorked, kWorkedSizes);
  CHECK(replay.offsets == sol.level("L1").offsets);

  auto g = fixed_instance({{0, 1}, {2, 3}, {1, 2}}, kWorkedSizes, 5);
  CHECK_THROWS_AS(solve_joint(g.cp, g.problems, {}), InfeasibleError);
  try {
    solve_joint(g.cp, g.problems, {});
  } catch (const InfeasibleError& e) {
    CHECK(std::string(e.what()).find("minimum peak 6") != std::string::npos);
  }
}

TEST_CASE("solve_level: random small instances match exhaustive search") {
  std::mt19937 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 7);
    std::vector<Lifetime> lives;
    std::vector<int64_t> sizes;
    for (int i = 0; i < n; ++i) {
      int a = static_cast<int>(rng() % 10), b = static_cast<int>(rng() % 10);
      lives.push_back({"b" + std::to_string(i), std::min(a, b), std::max(a, b)});
      sizes.push_back(1 + static_cast<int64_t>(rng() % 64));
    }
    AllocationProblem p{"L1", 1 << 20, {}};
    for (int i = 0; i < n; ++i) p.items.push_back({lives[i].buffer, -1, lives[i], AllocationItem::Kind::Home, -1});
    auto ls = solve_level(p, sizes, {});
    CHECK(ls.peak == brute_force_peak(lives, sizes));
    CHECK(ls.exact);
  }
}

TEST_CASE("solve_level: heuristic path stays sound on larger instances") {
  std::mt19937 rng(11);
  const int n = 40;
  AllocationProblem p{"L1", 1 << 30, {}};
  std::vector<int64_t> sizes;
  std::vector<Lifetime> lives;
  for (int i = 0; i < n; ++i) {
    int a = static_cast<int>(rng() % 30), b = static_cast<int>(rng() % 30);
    lives.push_back({"b" + std::to_string(i), std::min(a, b), std::max(a, b)});
    p.items.push_back({lives.back().buffer, -1, lives.back(), AllocationItem::Kind::Home, -1});
    sizes.push_back(1 + static_cast<int64_t>(rng() % 1000));
  }
  SolveOptions opts;
  opts.budget_ms = 20;
  auto ls = solve_level(p, sizes, opts);
  CHECK(ls.peak >= ls.lower_bound);
  auto replay = tetris_allocate(ls.order, lives, sizes);
  CHECK(replay.offsets == ls.offsets);
  CHECK(replay.peak == ls.peak);
  auto again = solve_level(p, sizes, opts);
  CHECK(again.order == ls.order);
}

TEST_CASE("solve_joint: untileable row tensor shrinks to two rows") {
  ConstraintProgram cp;
  const int d0 = cp.add_dim({"x", 0, 1, 4});
  const int d1 = cp.add_dim({"x", 1, 1, 256});
  cp.add({Constraint::Kind::Fix, d1, -1, 256, {}, {}, {}, "untileable"});
  const int sv = cp.add_size({"x_tile", "L1", 1, {d0, d1}, 1});
  cp.has_objective = true;
  cp.objective = {sv};
  cp.tie_break = {d1};
  AllocationProblem p{"L1", 512, {{"x_tile", sv, {"x_tile", 0, 0}, AllocationItem::Kind::Arena, 0}}};
  auto sol = solve_joint(cp, {p}, {});
  CHECK(sol.dims[d0] == 2);
  CHECK(sol.dims[d1] == 256);
  CHECK(sol.level("L1").offsets == std::vector<int64_t>{0});
  CHECK(sol.level("L1").peak == 512);
  CHECK(sol.optimal);
}

TEST_CASE("solve_joint: whole tensor kept when it fits with factor two") {
  ConstraintProgram cp;
  const int d0 = cp.add_dim({"x", 0, 1, 128});
  const int sv = cp.add_size({"x_tile", "L1", 2, {d0}, 1});
  cp.has_objective = true;
  cp.objective = {sv};
  AllocationProblem p{"L1", 512, {{"x_tile", sv, {"x_tile", 0, 0}, AllocationItem::Kind::Arena, 0}}};
  auto sol = solve_joint(cp, {p}, {});
  CHECK(sol.dims[d0] == 128);
}

TEST_CASE("solve_joint: two live tensors split the level evenly") {
  ConstraintProgram cp;
  const int a = cp.add_dim({"a", 0, 1, 512});
  const int b = cp.add_dim({"b", 0, 1, 512});
  const int sa = cp.add_size({"a_tile", "L1", 1, {a}, 1});
  const int sb = cp.add_size({"b_tile", "L1", 1, {b}, 1});
  cp.has_objective = true;
  cp.objective = {sa, sb};
  cp.tie_break = {a, b};
  AllocationProblem p{"L1",
                      512,
                      {{"a_tile", sa, {"a_tile", 0, 0}, AllocationItem::Kind::Arena, 0},
                       {"b_tile", sb, {"b_tile", 0, 0}, AllocationItem::Kind::Arena, 0}}};
  auto sol = solve_joint(cp, {p}, {});
  CHECK(sol.dims[a] == 256);
  CHECK(sol.dims[b] == 256);
}

TEST_CASE("arena lifetimes widen by one step when double buffered") {
  auto l = arena_lifetime("t", 3, 10, true);
  CHECK(l.start == 2);
  CHECK(l.end == 4);
  l = arena_lifetime("t", 0, 10, true);
  CHECK(l.start == 0);
  l = arena_lifetime("t", 3, 10, false);
  CHECK((l.start == 3 && l.end == 3));
}

TEST_CASE("tile grid covers every element once") {
  Shape full = {5, 7};
  Shape tile = {2, 3};
  auto grid = tile_grid(full, tile);
  CHECK(grid.size() == 9);
  std::vector<int> hits(35, 0);
  for (const auto& r : grid)
    for (int64_t i = 0; i < r.extent[0]; ++i)
      for (int64_t j = 0; j < r.extent[1]; ++j) ++hits[(r.origin[0] + i) * 7 + r.origin[1] + j];
  CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
  CHECK(grid.back().extent == Shape{1, 1});
}

TEST_CASE("memory map check flags overlapping live entries") {
  MemoryMap mm;
  mm.levels.push_back({"L1", 100, 60, {}});
  mm.levels[0].entries.push_back({"a", 0, 40, {"a", 0, 2}, AllocationItem::Kind::Home, -1});
  mm.levels[0].entries.push_back({"b", 20, 40, {"b", 2, 3}, AllocationItem::Kind::Home, -1});
  CHECK(mm.check().size() == 1);
  mm.levels[0].entries[1].offset = 40;
  CHECK(mm.check().empty());
  mm.levels[0].entries[1].offset = 70;
  CHECK(mm.check().size() == 1);
}
