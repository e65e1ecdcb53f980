// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tinydeploy/compile.hpp"

#include <sstream>

namespace tinydeploy {

ScenarioPreset scenario_preset(const std::string& name) {
  const std::vector<std::string> host_passes = {"fuse_gemm_requant", "insert_transpose_b",
                                                "fold_constant_transpose"};
  const std::vector<std::string> npu_passes = {"fuse_gemm_requant", "gemm_to_pointwise", "insert_transpose_b",
                                               "fold_constant_transpose"};
  if (name == "single-core") return {name, {"core"}, host_passes, AnnotationPolicy::NoNms};
  if (name == "octa-core") return {name, {"cluster", "core"}, host_passes, AnnotationPolicy::NoNms};
  if (name == "npu") return {name, {"npu", "cluster", "core"}, npu_passes, AnnotationPolicy::NoNms};
  if (name == "npu+weightmem") return {name, {"npu", "cluster", "core"}, npu_passes, AnnotationPolicy::NmsWeights};
  throw Error("unknown scenario '" + name + "'");
}

std::vector<std::string> scenario_names() { return {"single-core", "octa-core", "npu", "npu+weightmem"}; }

Pass pass_by_name(const std::string& name) {
  if (name == "fuse_gemm_requant") return fuse_gemm_requant_pass();
  if (name == "gemm_to_pointwise") return gemm_to_pointwise_pass();
  if (name == "insert_transpose_b") return insert_transpose_b_pass();
  if (name == "fold_constant_transpose") return fold_constant_transpose_pass();
  throw Error("unknown pass '" + name + "'");
}

CompiledModel compile(const Graph& g, const TargetDescription& t, const CompileOptions& opts) {
  require_valid(g);
  CompiledModel m;
  m.source = g;
  m.target = t;
  m.options = opts;
  const ScenarioPreset sc = scenario_preset(opts.scenario);

  std::vector<Pass> passes;
  for (const auto& p : sc.passes) passes.push_back(pass_by_name(p));
  Graph lowered = apply_passes(g, passes);
  m.log.push_back("lowered: " + std::to_string(g.nodes.size()) + " -> " + std::to_string(lowered.nodes.size()) +
                  " nodes");

  const KernelRegistry reg = build_registry(t, sc.engines);
  m.binding = infer_types_select_kernels(lowered, reg, opts.input_types, sc.engines);
  apply_types(lowered, m.binding);
  m.graph = annotate_memory_levels(lowered, t, sc.policy, m.binding);
  require_valid(m.graph);

  const Schedule s = topo_schedule(m.graph);
  m.flow = build_tile_cp(m.graph, m.binding, t, s, TileOptions{opts.double_buffer});
  tiling_objective(m.flow);
  auto problems = build_allocation_problems(m.graph, s, m.flow, t, opts.double_buffer);
  m.solution = solve_joint(m.flow.cp, problems, opts.solve);
  m.memmap = make_memory_map(problems, m.solution);
  if (auto bad = m.memmap.check(); !bad.empty()) throw Error("allocation check failed: " + bad.front());
  if (auto bad = check_assignment(m.flow.cp, m.solution.assignment()); !bad.empty())
    throw Error("solution violates the constraint program: " + bad.front());
  m.tiling = make_tiling_solution(m.graph, m.flow, m.solution, opts.double_buffer);
  const auto transfers = plan_transfers(m.tiling, m.graph, m.flow, t);
  m.program = build_program(opts.name, m.graph, m.binding, t, m.flow, m.memmap, m.tiling, transfers);
  return m;
}

std::string solver_log(const CompiledModel& m) {
  std::ostringstream os;
  os << "model " << m.program.name << "\n";
  os << "target " << m.target.name << "\n";
  os << "scenario " << m.options.scenario << "\n";
  os << "double buffering " << (m.options.double_buffer ? "on" : "off") << "\n";
  os << "budget " << m.options.solve.budget_ms << " ms, seed " << m.options.solve.seed << "\n";
  for (const auto& l : m.log) os << l << "\n";
  for (const auto& l : m.solution.log) os << l << "\n";
  os << "optimality " << (m.solution.optimal ? "proven" : "not proven") << "\n";
  os << "tiles\n";
  for (const auto& st : m.program.steps) {
    os << "  " << st.node_name << " " << st.kernel_id << " on " << st.engine << ": " << st.tiles.size() << " tile"
       << (st.tiles.size() == 1 ? "" : "s");
    for (const auto& o : st.operands)
      if (o.operand >= 0 && !o.direct) os << " " << o.tensor << shape_str(o.tile_shape);
    os << "\n";
  }
  return os.str();
}

}  // namespace tinydeploy
