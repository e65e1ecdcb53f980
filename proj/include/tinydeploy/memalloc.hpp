// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Lifetime analysis and the joint tiling and static allocation solve.

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tinydeploy/ir.hpp"
#include "tinydeploy/target.hpp"
#include "tinydeploy/tensor.hpp"
#include "tinydeploy/tileflow.hpp"

namespace tinydeploy {

struct Lifetime {
  std::string buffer;
  int start = 0;
  int end = 0;  // inclusive

  bool overlaps(const Lifetime& o) const { return start <= o.end && o.start <= end; }
};

/// Lifetimes of every graph buffer over the schedule. Globals span the
/// whole schedule; locals run from producer to last consumer.
std::vector<Lifetime> compute_lifetimes(const Graph& g, const Schedule& s);

/// Lifetime of a tile arena used at `step`; double buffering widens it by
/// one step on each side.
Lifetime arena_lifetime(const std::string& name, int step, int steps, bool double_buffer);

struct TetrisResult {
  std::vector<int64_t> offsets;  // indexed by buffer
  std::vector<int64_t> heights;  // H, indexed by buffer
  int64_t peak = 0;
};

/// Places buffers in `order`; each lands on top of the highest earlier
/// buffer whose lifetime overlaps its own.
TetrisResult tetris_allocate(std::span<const int> order, std::span<const Lifetime> lifetimes,
                             std::span<const int64_t> sizes);

struct AllocationItem {
  std::string symbol;
  int size_var = -1;
  Lifetime life;
  enum class Kind { Home, Arena, Scratch } kind = Kind::Home;
  int node = -1;  // owning node for arenas and scratch
};

struct AllocationProblem {
  std::string level;
  int64_t capacity = 0;
  std::vector<AllocationItem> items;

  /// A[j][i] = 1 iff lifetimes of j and i overlap (zero diagonal).
  std::vector<std::vector<uint8_t>> adjacency() const;
};

/// One problem per target level (declaration order). Adds the Tetris and
/// capacity constraints to the flow's program.
std::vector<AllocationProblem> build_allocation_problems(const Graph& g, const Schedule& s, TileFlow& flow,
                                                         const TargetDescription& t, bool double_buffer);

struct SolveOptions {
  int64_t budget_ms = 2000;  // converted into deterministic work units
  uint64_t seed = 0;
  int64_t exact_buffer_limit = 8;
};

struct LevelSolution {
  std::string level;
  std::vector<int> order;
  std::vector<int64_t> sizes;
  std::vector<int64_t> offsets;
  int64_t peak = 0;
  int64_t lower_bound = 0;
  bool exact = false;  // order proven optimal for these sizes
};

struct JointSolution {
  std::vector<int64_t> dims;
  std::vector<LevelSolution> levels;
  int64_t objective = 0;
  bool optimal = false;
  int64_t work = 0;
  std::vector<std::string> log;

  const LevelSolution& level(const std::string& name) const;
  Assignment assignment() const;
};

/// Minimum-peak order for fixed sizes. Exact below the buffer limit,
/// heuristic with local search otherwise.
LevelSolution solve_level(const AllocationProblem& p, std::span<const int64_t> sizes, const SolveOptions& opts,
                          int64_t* work = nullptr);

/// Maximizes the tiling objective subject to every level's capacity.
/// Throws InfeasibleError naming the binding level and its minimum peak.
JointSolution solve_joint(const ConstraintProgram& cp, const std::vector<AllocationProblem>& problems,
                          const SolveOptions& opts);

struct MemoryEntry {
  std::string symbol;
  int64_t offset = 0;
  int64_t size = 0;
  Lifetime life;
  AllocationItem::Kind kind = AllocationItem::Kind::Home;
  int node = -1;
};

struct MemoryMap {
  struct Level {
    std::string name;
    int64_t capacity = 0;
    int64_t peak = 0;
    std::vector<MemoryEntry> entries;
  };
  std::vector<Level> levels;

  const Level& level(const std::string& name) const;
  /// Pairwise check: concurrently live entries never share bytes and
  /// every entry fits the capacity. Returns one message per violation.
  std::vector<std::string> check() const;
};

MemoryMap make_memory_map(const std::vector<AllocationProblem>& problems, const JointSolution& sol);

struct TensorTile {
  Shape shape;
  int64_t count = 1;  // product of ceil(extent / tile)
};

struct TilingSolution {
  std::map<std::string, TensorTile> tensors;
  bool double_buffer = true;
};

TilingSolution make_tiling_solution(const Graph& g, const TileFlow& flow, const JointSolution& sol,
                                    bool double_buffer);

/// Row-major grid of regions covering `full` with tiles of `tile`; edge
/// tiles are clamped.
std::vector<Region> tile_grid(const Shape& full, const Shape& tile);

/// Region of an operand needed for the output region `out`.
Region operand_region(const Region& out, const std::vector<int>& links, const Shape& full);

struct Transfer {
  enum class Kind { In, Out, Compute } kind = Kind::In;
  int operand = -1;  // index into NodeTiling::operands
  int tile = 0;
  int slot = 0;
  std::string src_level;
  std::string dst_level;
  int64_t bytes = 0;
};

struct NodeTransfers {
  int node = 0;
  std::vector<Region> tiles;      // output regions
  std::vector<Transfer> events;   // in order, compute events included
  std::vector<bool> stationary;   // per operand: one fetch serves all tiles
};

/// Transfer schedule per node in schedule order.
std::vector<NodeTransfers> plan_transfers(const TilingSolution& ts, const Graph& g, const TileFlow& flow,
                                          const TargetDescription& t);

}  // namespace tinydeploy
