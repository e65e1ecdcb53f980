// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Tile Constraint Flow: the geometric layer of the constraint program.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "tinydeploy/frontend.hpp"
#include "tinydeploy/ir.hpp"
#include "tinydeploy/target.hpp"

namespace tinydeploy {

/// Tile extent of one tensor dimension.
struct DimVar {
  std::string tensor;
  int dim = 0;
  int64_t lo = 1;
  int64_t hi = 1;  // full extent
};

/// bytes = align_up(coef * product of dims, align). With no dims the size
/// is the constant coef (rounded up).
struct SizeVar {
  std::string name;
  std::string level;
  int64_t coef = 0;
  std::vector<int> dims;
  int64_t align = 1;
};

int64_t align_up(int64_t v, int64_t a);
int64_t evaluate_size_var(const SizeVar& s, const std::vector<int64_t>& dim_values);

struct Constraint {
  enum class Kind {
    Equal,      // dims a == b
    Fix,        // dim a == value
    Divisible,  // dim a % value == 0 or dim a == hi
    Tetris,     // permutation block + H recurrence over `items` of `level`
    Capacity,   // peak(level) <= value
  };
  Kind kind = Kind::Equal;
  int a = -1;
  int b = -1;
  int64_t value = 0;
  std::string level;
  std::vector<int> items;                      // Tetris: size var per buffer
  std::vector<std::pair<int, int>> lifetimes;  // Tetris: inclusive step ranges
  std::string origin;                          // human-readable source
};

struct ConstraintProgram {
  std::vector<DimVar> dims;
  std::vector<SizeVar> sizes;
  std::vector<Constraint> constraints;
  bool has_objective = false;
  std::vector<int> objective;  // maximize the sum of these size vars
  std::vector<int> tie_break;  // leximin over these dims

  int add_dim(DimVar d);
  int add_size(SizeVar s);
  void add(Constraint c) { constraints.push_back(std::move(c)); }
};

/// A point of the program: dim values plus, per Tetris block, the buffer
/// order and resulting offsets (indexed like Constraint::items).
struct Assignment {
  std::vector<int64_t> dims;
  std::map<std::string, std::vector<int>> order;      // positions into items
  std::map<std::string, std::vector<int64_t>> offsets;
  std::map<std::string, int64_t> peak;
};

/// Every constraint violated by `a`, one message each.
std::vector<std::string> check_assignment(const ConstraintProgram& cp, const Assignment& a);

/// Objective value of `a` (sum of objective sizes).
int64_t objective_value(const ConstraintProgram& cp, const std::vector<int64_t>& dims);

/// Equality classes of DimVars with propagated bounds.
struct DimClasses {
  std::vector<int> of;                    // dim -> class
  std::vector<std::vector<int>> members;  // class -> dims, ascending
  std::vector<int64_t> hi;                // full extent (min over members)
  std::vector<int64_t> fixed;             // 0 when free
  std::vector<int64_t> multiple;          // 1 when unconstrained
  /// Admissible values, descending.
  std::vector<int64_t> domain(int c) const;
};

/// Union-find over Equal, then Fix and Divisible folded into each class.
/// Throws InfeasibleError on conflicting fixes.
DimClasses propagate_dims(const ConstraintProgram& cp);

/// Line-based text dump, one variable or constraint per line.
std::string dump_cp(const ConstraintProgram& cp);

// ---------------------------------------------------------------------------
// Construction from a bound graph

/// How one operand of a node is accessed.
struct OperandTiling {
  int operand = 0;      // inputs first, then the output; -1 for scratch
  std::string tensor;   // empty for scratch
  bool direct = false;  // kernel accesses the home buffer in place
  std::string home_level;
  std::string tile_level;  // arena level when not direct
  int size_var = -1;       // arena or scratch size var
  int factor = 1;          // buffering factor of the arena
  std::vector<int> dims;   // DimVar per tensor dimension
  std::vector<int> links;  // per dimension: linked output dimension or -1
};

struct NodeTiling {
  int node = 0;
  int step = 0;
  std::string engine;
  std::string compute_level;
  std::vector<OperandTiling> operands;  // inputs, output, then scratch if any
  bool has_scratch() const { return !operands.empty() && operands.back().operand < 0; }
};

struct TileFlow {
  ConstraintProgram cp;
  std::map<std::string, std::vector<int>> tensor_dims;
  std::map<std::string, int> home_size;  // graph buffer -> size var
  std::vector<NodeTiling> nodes;         // schedule order
};

struct TileOptions {
  bool double_buffer = true;
};

/// Instantiates every kernel's constraints over shared per-tensor DimVars
/// and creates size vars for home buffers, tile arenas and scratch.
/// Throws InfeasibleError if some arena cannot fit even at minimal tiles.
TileFlow build_tile_cp(const Graph& g, const Binding& b, const TargetDescription& t, const Schedule& s,
                       const TileOptions& opts);

enum class TilingPolicy { MaxTiles };

/// Sets the objective: maximize the arena bytes of the innermost hop, with
/// a leximin tie-break over innermost tensor dimensions.
void tiling_objective(TileFlow& flow, TilingPolicy policy = TilingPolicy::MaxTiles);

}  // namespace tinydeploy
