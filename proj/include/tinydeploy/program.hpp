// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Schedule IR: the fully resolved program the simulator interprets and the
// emitter prints.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "tinydeploy/frontend.hpp"
#include "tinydeploy/ir.hpp"
#include "tinydeploy/memalloc.hpp"
#include "tinydeploy/target.hpp"
#include "tinydeploy/tensor.hpp"
#include "tinydeploy/tileflow.hpp"

namespace tinydeploy {

struct Allocation {
  std::string symbol;
  std::string buffer;  // graph buffer for homes, tensor for arenas, empty for scratch
  std::string level;
  int64_t offset = 0;
  int64_t size = 0;
  int start = 0;
  int end = 0;
  AllocationItem::Kind kind = AllocationItem::Kind::Home;
  int node = -1;
};

const char* to_string(AllocationItem::Kind k);

struct ProgramOperand {
  int operand = 0;  // inputs, then output; -1 for scratch
  std::string tensor;
  bool direct = true;
  int home = -1;   // allocation index
  int arena = -1;  // allocation index of the tile arena or scratch
  int slots = 1;
  int64_t slot_bytes = 0;
  bool stationary = false;
  std::vector<int> links;
  Shape tile_shape;
  Shape full_shape;
  DataType dtype = dtypes::kInt8;
};

struct ProgramEvent {
  Transfer::Kind kind = Transfer::Kind::Compute;
  int operand = -1;  // index into ProgramStep::operands
  int tile = 0;
  int slot = 0;
  int64_t bytes = 0;
  std::string src_level;
  std::string dst_level;
};

struct ProgramStep {
  int node = 0;
  std::string node_name;
  std::string op;
  std::string engine;
  std::string kernel_id;
  std::string c_function;
  std::string compute_level;
  std::vector<ProgramOperand> operands;
  std::vector<Region> tiles;
  std::vector<ProgramEvent> events;
};

struct Program {
  std::string name;
  std::string target;
  bool double_buffer = true;
  std::vector<Allocation> allocations;
  std::map<std::string, int64_t> peaks;
  std::vector<ProgramStep> steps;

  int find_allocation(const std::string& symbol) const;
};

/// Assembles the schedule IR from the solved stages.
Program build_program(const std::string& name, const Graph& g, const Binding& b, const TargetDescription& t,
                      const TileFlow& flow, const MemoryMap& mm, const TilingSolution& ts,
                      const std::vector<NodeTransfers>& transfers);

std::string program_to_json(const Program& p);
/// Throws ParseError on malformed documents.
Program program_from_json(const std::string& text);

}  // namespace tinydeploy
