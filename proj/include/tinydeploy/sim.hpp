// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Bit-exact interpreter of the schedule IR with memory checks and a cycle
// model.

#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tinydeploy/compile.hpp"
#include "tinydeploy/ir.hpp"
#include "tinydeploy/program.hpp"
#include "tinydeploy/target.hpp"
#include "tinydeploy/tensor.hpp"

namespace tinydeploy {

/// Capacity violations, uninitialized or clobbered reads, bad inputs.
class SimError : public Error {
 public:
  using Error::Error;
};

using NamedTensors = std::map<std::string, Tensor>;

/// Whole-graph evaluation node by node, in schedule order.
NamedTensors reference_eval(const Graph& g, const NamedTensors& inputs);

struct TransferRecord {
  int step = 0;
  std::string node;
  int64_t bytes = 0;
  std::string src;
  std::string dst;
  int64_t cycles = 0;
};

struct MemTrace {
  std::vector<std::string> levels;
  std::vector<std::vector<int64_t>> live;        // [step][level]: bytes of live allocations
  std::vector<std::vector<int64_t>> high_water;  // [step][level]: top address in use
  std::vector<TransferRecord> transfers;

  /// Largest high-water mark of `level` over all steps.
  int64_t peak(const std::string& level) const;
};

struct NodeCycles {
  std::string node;
  std::string op;
  std::string engine;
  int tiles = 0;
  int64_t kernel = 0;
  int64_t dma = 0;
  int64_t overlapped = 0;
  int64_t setup = 0;
  int64_t latency = 0;
};

struct CycleReport {
  std::vector<NodeCycles> nodes;
  int64_t kernel = 0;
  int64_t dma = 0;
  int64_t overlapped = 0;
  int64_t setup = 0;
  int64_t total = 0;

  /// (total - kernel) / total; 0 for an empty run.
  double marshaling() const;
};

struct SimResult {
  NamedTensors outputs;
  MemTrace trace;
  CycleReport cycles;
};

/// Per-step occupancy of the address plan, without executing anything.
MemTrace plan_trace(const Program& p, const TargetDescription& t);

/// Executes `p` over `g` (the lowered graph the program was built from).
/// Throws SimError on any memory violation or input mismatch.
SimResult run(const Graph& g, const Program& p, const TargetDescription& t, const NamedTensors& inputs);

inline SimResult run(const CompiledModel& m, const NamedTensors& inputs) {
  return run(m.graph, m.program, m.target, inputs);
}

/// Modeled cycles only; no data is moved.
CycleReport model_cycles(const Graph& g, const Program& p, const TargetDescription& t);

/// Modeled total latency with double and with single buffering.
std::pair<int64_t, int64_t> compare_buffering(const Graph& g, const TargetDescription& t, CompileOptions opts);

/// Per-level allocation tables and a step x address occupancy grid.
std::string report_mem(const Program& p, const MemTrace& trace);
/// Per-node kernel and marshaling breakdown.
std::string report_cycles(const CycleReport& c);

/// Graph input tensors filled from a seeded generator. Token inputs
/// (int32 feeding gather_rows) are drawn within the table.
NamedTensors random_inputs(const Graph& g, uint64_t seed);

}  // namespace tinydeploy
