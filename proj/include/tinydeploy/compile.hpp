// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end compilation driver and deployment scenario presets.

#pragma once

#include <map>
#include <string>
#include <vector>

#include "tinydeploy/frontend.hpp"
#include "tinydeploy/ir.hpp"
#include "tinydeploy/memalloc.hpp"
#include "tinydeploy/program.hpp"
#include "tinydeploy/target.hpp"
#include "tinydeploy/tileflow.hpp"

namespace tinydeploy {

struct ScenarioPreset {
  std::string name;
  std::vector<std::string> engines;  // preference order
  std::vector<std::string> passes;
  AnnotationPolicy policy = AnnotationPolicy::NoNms;
};

/// "single-core", "octa-core", "npu" or "npu+weightmem".
ScenarioPreset scenario_preset(const std::string& name);
std::vector<std::string> scenario_names();

/// Pass by name: fuse_gemm_requant, gemm_to_pointwise, insert_transpose_b,
/// fold_constant_transpose.
Pass pass_by_name(const std::string& name);

struct CompileOptions {
  std::string name = "model";
  std::string scenario = "single-core";
  bool double_buffer = true;
  SolveOptions solve;
  std::map<std::string, DataType> input_types;
};

struct CompiledModel {
  Graph source;  // as given
  Graph graph;   // lowered, typed and annotated
  TargetDescription target;
  CompileOptions options;
  Binding binding;
  TileFlow flow;
  JointSolution solution;
  MemoryMap memmap;
  TilingSolution tiling;
  Program program;
  std::vector<std::string> log;
};

/// Runs every stage. Throws ParseError/ValidationError for bad input,
/// InfeasibleError when nothing fits.
CompiledModel compile(const Graph& g, const TargetDescription& t, const CompileOptions& opts);

/// Solver log text: stage summaries, the solver trace and the tiling.
std::string solver_log(const CompiledModel& m);

}  // namespace tinydeploy
