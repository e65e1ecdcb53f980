// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <random>

#include "doctest.h"
#include "tinydeploy/compile.hpp"
#include "tinydeploy/frontend.hpp"
#include "tinydeploy/ops.hpp"
#include "tinydeploy/sim.hpp"
#include "tinydeploy/tileflow.hpp"
#include "tinydeploy/zoo.hpp"

using namespace tinydeploy;

namespace {

Buffer constant(const std::string& name, Shape shape, DataType t, uint64_t seed) {
  Buffer b;
  b.name = name;
  b.kind = BufferKind::Constant;
  b.scope = Scope::Global;
  b.shape = std::move(shape);
  b.dtype = t;
  b.payload.resize(static_cast<size_t>(b.elements() * t.bytes()));
  std::mt19937_64 rng(seed);
  for (auto& v : b.payload) v = static_cast<uint8_t>(rng() % 7);  // small positive values keep sums in range
  return b;
}

Buffer variable(const std::string& name, Shape shape, Scope scope = Scope::Local) {
  Buffer b;
  b.name = name;
  b.scope = scope;
  b.shape = std::move(shape);
  return b;
}

Node node(const std::string& name, const std::string& op, std::vector<std::string> in, const std::string& out,
          Attrs attrs = {}) {
  Node n;
  n.name = name;
  n.op = op;
  n.inputs = std::move(in);
  n.outputs = {out};
  n.attrs = std::move(attrs);
  return n;
}

const Attrs kRq = {{"mul", int64_t{3}}, {"shift", int64_t{10}}, {"zp", int64_t{0}}};

// x[M, N] * w[N, O] + bias, then requant. `bias_shape` is {O} or {M, O}.
Graph linear(int64_t m, int64_t n, int64_t o, Shape bias_shape, bool constant_b = true, bool equal_rows = true) {
  Graph g;
  Buffer x = variable("x", {m, n}, Scope::Global);
  x.dtype = dtypes::kInt8;
  g.add_buffer(x);
  if (constant_b) {
    g.add_buffer(constant("w", {n, o}, dtypes::kInt8, 1));
  } else {
    Buffer w = variable("w", {n, o}, Scope::Global);
    w.dtype = dtypes::kInt8;
    g.add_buffer(w);
    g.inputs.push_back("w");
  }
  Buffer c = constant("c", bias_shape, dtypes::kInt32, 2);
  if (bias_shape.size() == 2 && equal_rows) {
    const size_t row = static_cast<size_t>(o) * 4;
    for (size_t i = row; i < c.payload.size(); ++i) c.payload[i] = c.payload[i % row];
  }
  g.add_buffer(c);
  g.add_buffer(variable("acc", {m, o}));
  g.add_buffer(variable("y", {m, o}, Scope::Global));
  g.nodes.push_back(node("mm", ops::kGemm, {"x", "w", "c"}, "acc"));
  g.nodes.push_back(node("rq", ops::kRequant, {"acc"}, "y", kRq));
  g.inputs.insert(g.inputs.begin(), "x");
  g.outputs = {"y"};
  require_valid(g);
  return g;
}

std::vector<Pass> scenario_passes(const std::string& scenario) {
  std::vector<Pass> out;
  for (const auto& p : scenario_preset(scenario).passes) out.push_back(pass_by_name(p));
  return out;
}

struct Lowered {
  Graph graph;
  Binding binding;
  TileFlow flow;
};

Lowered lower(const Graph& g, const TargetDescription& t, const std::string& scenario, bool db) {
  const ScenarioPreset sc = scenario_preset(scenario);
  Lowered l;
  Graph lowered = apply_passes(g, scenario_passes(scenario));
  l.binding = infer_types_select_kernels(lowered, build_registry(t, sc.engines), {}, sc.engines);
  apply_types(lowered, l.binding);
  l.graph = annotate_memory_levels(lowered, t, sc.policy, l.binding);
  l.flow = build_tile_cp(l.graph, l.binding, t, topo_schedule(l.graph), {db});
  return l;
}

int count_op(const Graph& g, const std::string& op) {
  return static_cast<int>(std::count_if(g.nodes.begin(), g.nodes.end(), [&](const Node& n) { return n.op == op; }));
}

int dim_of(const TileFlow& f, const std::string& tensor, int d) { return f.tensor_dims.at(tensor).at(d); }

}  // namespace

TEST_CASE("apply_passes: gemm + requant fuse into one node") {
  const Graph g = linear(4, 8, 2, {2});
  const Graph f = apply_passes(g, {fuse_gemm_requant_pass()});
  CHECK(f.nodes.size() == g.nodes.size() - 1);
  REQUIRE(count_op(f, ops::kGemmQ8) == 1);
  const Node& n = f.nodes[0];
  CHECK(n.outputs == std::vector<std::string>{"y"});
  CHECK(n.attr_int("mul") == 3);
  CHECK(n.attr_int("shift") == 10);
  CHECK_FALSE(f.has_buffer("acc"));
  CHECK(validate(f).empty());
  CHECK(apply_passes(g, {}) == g);
}

TEST_CASE("apply_passes: transpose insertion and constant folding") {
  const Graph g = linear(4, 8, 2, {2});
  const Graph t = apply_passes(g, {fuse_gemm_requant_pass(), insert_transpose_b_pass()});
  REQUIRE(count_op(t, ops::kTranspose) == 1);
  const Node* mm = t.find_node("mm");
  REQUIRE(mm);
  CHECK(mm->attr_int("trans_b") == 1);
  CHECK(t.buffer(mm->inputs[1]).shape == Shape{2, 8});
  CHECK(topo_schedule(t).order.size() == 2);

  const Graph folded = apply_passes(t, {fold_constant_transpose_pass()});
  CHECK(count_op(folded, ops::kTranspose) == 0);
  const Buffer& wt = folded.buffer(folded.find_node("mm")->inputs[1]);
  CHECK(wt.is_constant());
  const Buffer& w = g.buffer("w");
  for (int n = 0; n < 8; ++n)
    for (int o = 0; o < 2; ++o) CHECK(wt.payload[o * 8 + n] == w.payload[n * 2 + o]);
}

TEST_CASE("gemm_to_pointwise: dimension mapping and preconditions") {
  const Graph g = apply_passes(linear(16, 64, 256, {256}), {fuse_gemm_requant_pass()});
  const Graph p = gemm_to_pointwise(g);
  REQUIRE(count_op(p, ops::kPwConv) == 1);
  const Node& n = p.nodes[0];
  CHECK(n.attr_int("H") == 1);
  CHECK(n.attr_int("W") == 16);
  CHECK(n.attr_int("C_in") == 64);
  CHECK(n.attr_int("C_out") == 256);
  const Buffer& w = p.buffer(n.inputs[1]);
  CHECK(w.shape == Shape{256, 1, 1, 64});
  CHECK(w.payload[5 * 64 + 7] == g.buffer("w").payload[7 * 256 + 5]);
  CHECK(p.buffer("y").shape == g.buffer("y").shape);
  CHECK(p.outputs == g.outputs);

  const Graph broadcast = apply_passes(linear(4, 8, 2, {4, 2}), {fuse_gemm_requant_pass()});
  CHECK(count_op(gemm_to_pointwise(broadcast), ops::kPwConv) == 1);

  const Graph full_rank = apply_passes(linear(4, 8, 2, {4, 2}, true, false), {fuse_gemm_requant_pass()});
  CHECK(gemm_to_pointwise(full_rank) == full_rank);

  const Graph var_b = apply_passes(linear(4, 8, 2, {2}, false), {fuse_gemm_requant_pass()});
  CHECK(gemm_to_pointwise(var_b) == var_b);
}

TEST_CASE("apply_passes preserves reference semantics on the corpus") {
  LlamaConfig par;
  par.n_layers = 1;
  par.seq = 4;
  LlamaConfig ar = par;
  ar.mode = LlamaConfig::Mode::Autoregressive;
  ar.seq = 1;
  ar.past = 3;
  const std::vector<Graph> corpus = {build_gemm_chain(8, 32, 3), build_encoder_layer(64, 16, 256, 8), build_llama(par),
                                     build_llama(ar)};
  for (const auto& g : corpus)
    for (const auto& sc : scenario_names()) {
      const Graph lowered = apply_passes(g, scenario_passes(sc));
      CHECK(validate(lowered).empty());
      for (uint64_t seed = 0; seed < 16; ++seed) {
        const auto in = random_inputs(g, seed);
        REQUIRE(reference_eval(lowered, in) == reference_eval(g, in));
      }
    }
}

TEST_CASE("apply_passes: one pass list equals passes applied one after another") {
  const Graph g = build_encoder_layer(64, 16, 256, 4);
  const Graph a = apply_passes(g, {fuse_gemm_requant_pass(), gemm_to_pointwise_pass()});
  const Graph b = apply_passes(apply_passes(g, {fuse_gemm_requant_pass()}), {gemm_to_pointwise_pass()});
  CHECK(a == b);
}

TEST_CASE("infer_types_select_kernels: first matching signature in preference order") {
  const TargetDescription t = target_preset("siracusa-like");
  const Graph fused = apply_passes(linear(16, 64, 256, {256}), {fuse_gemm_requant_pass()});
  const Binding b = infer_types_select_kernels(fused, build_registry(t, {}), {}, {});
  CHECK(b.nodes.at(0).kernel.id == "core.gemm_q8.bias");
  CHECK(b.types.at("y") == dtypes::kInt8);
  CHECK(b.types.size() == fused.buffers.size());

  const Graph pw = gemm_to_pointwise(fused);
  const std::vector<std::string> npu_first{"npu", "cluster"};
  const Binding bn = infer_types_select_kernels(pw, build_registry(t, npu_first), {}, npu_first);
  CHECK(bn.nodes.at(0).engine == "npu");
  CHECK(bn.nodes.at(0).kernel.id == "npu.pwconv.bias");
  const std::vector<std::string> cluster_only{"cluster"};
  const Binding bc = infer_types_select_kernels(pw, build_registry(t, cluster_only), {}, cluster_only);
  CHECK(bc.nodes.at(0).kernel.id == "cluster.pwconv.bias");

  const std::map<std::string, DataType> wide{{"x", dtypes::kInt16}};
  CHECK_THROWS_WITH_AS(infer_types_select_kernels(fused, build_registry(t, {}), wide, {}), doctest::Contains("mm"),
                       Error);
}

TEST_CASE("annotate_memory_levels: weight memory policy") {
  const TargetDescription t = target_preset("siracusa-like");
  const Graph g = linear(16, 256, 256, {256});  // 64 KiB weight
  const auto nms = lower(g, t, "npu+weightmem", true);
  const auto no_nms = lower(g, t, "npu", true);
  const Node& n = nms.graph.nodes.at(0);
  REQUIRE(n.op == ops::kPwConv);
  CHECK(nms.graph.buffer(n.inputs[1]).bytes() == 64 * 1024);
  CHECK(nms.graph.buffer(n.inputs[1]).level == "WMEM");
  CHECK(no_nms.graph.buffer(no_nms.graph.nodes.at(0).inputs[1]).level == "L2");
  for (const auto& b : nms.graph.buffers)
    if (b.name != n.inputs[1]) CHECK(b.level == "L2");

  const Graph huge = linear(4, 2560, 2048, {2048});  // 5 MiB weight
  CHECK_THROWS_AS(lower(huge, t, "npu+weightmem", true), InfeasibleError);
}

TEST_CASE("build_tile_cp: single elementwise node") {
  Graph g;
  Buffer x = variable("x", {64}, Scope::Global);
  x.dtype = dtypes::kInt8;
  g.add_buffer(x);
  g.add_buffer(variable("y", {64}, Scope::Global));
  g.nodes.push_back(node("h", ops::kHardswish, {"x"}, "y",
                         {{"mul", int64_t{1}}, {"shift", int64_t{3}}, {"zp", int64_t{0}}, {"three", int64_t{3}},
                          {"six", int64_t{6}}}));
  g.inputs = {"x"};
  g.outputs = {"y"};
  const auto l = lower(g, target_preset("minimal"), "single-core", true);
  const ConstraintProgram& cp = l.flow.cp;
  CHECK(cp.dims.size() == 2);
  CHECK(cp.sizes.size() == 2);
  REQUIRE(cp.constraints.size() == 1);
  CHECK(cp.constraints[0].kind == Constraint::Kind::Equal);
  CHECK(cp.constraints[0].a == dim_of(l.flow, "x", 0));
  CHECK(cp.constraints[0].b == dim_of(l.flow, "y", 0));
}

TEST_CASE("build_tile_cp: softmax after a gemm pins the output columns") {
  Graph g = linear(16, 64, 256, {256});
  g.buffer("y").scope = Scope::Local;
  g.add_buffer(variable("p", {16, 256}, Scope::Global));
  g.nodes.push_back(node("sm", ops::kSoftmax, {"y"}, "p",
                         {{"axis", int64_t{1}}, {"ln2_q", int64_t{11}}, {"b_q", int64_t{21}}, {"c_q", int64_t{245}},
                          {"out_bits", int64_t{7}}}));
  g.outputs = {"p"};
  for (bool db : {true, false}) {
    const auto l = lower(g, target_preset("siracusa-like"), "octa-core", db);
    const DimClasses dc = propagate_dims(l.flow.cp);
    // The octa-core passes replace w with a folded transpose.
    const Node* mm = l.graph.find_node("mm");
    REQUIRE(mm);
    const std::string w = mm->inputs[1];
    const int o_dim = mm->attr_int("trans_b", 0) ? 0 : 1;
    for (const auto& [tensor, d] : std::vector<std::pair<std::string, int>>{{"y", 1}, {"p", 1}, {w, o_dim}})
      CHECK(dc.fixed[dc.of[dim_of(l.flow, tensor, d)]] == 256);
    CHECK(dc.fixed[dc.of[dim_of(l.flow, w, 1 - o_dim)]] == 64);
    const int rows = dc.of[dim_of(l.flow, "x", 0)];
    CHECK(dc.fixed[rows] == 0);
    CHECK(dc.of[dim_of(l.flow, "y", 0)] == rows);
    CHECK(dc.of[dim_of(l.flow, "p", 0)] == rows);
    CHECK(dc.domain(rows).front() == 16);
    CHECK(dc.domain(rows).back() == 1);

    // Arena size vars on the L1 hop carry the buffering factor.
    int arenas = 0;
    for (const auto& nt : l.flow.nodes)
      for (const auto& ot : nt.operands) {
        if (ot.operand < 0 || ot.direct) continue;
        ++arenas;
        const SizeVar& sv = l.flow.cp.sizes[ot.size_var];
        CHECK(sv.level == "L1");
        const int bytes = l.graph.buffer(ot.tensor).dtype->bytes();
        CHECK(sv.coef == (db ? 2 : 1) * bytes);
      }
    CHECK(arenas == 6);
  }
}

TEST_CASE("dump_cp: one line per variable and constraint") {
  Graph g = build_gemm_chain(4, 8, 1);
  CompileOptions o;
  o.scenario = "octa-core";
  const CompiledModel m = compile(g, target_preset("siracusa-like"), o);
  const std::string dump = dump_cp(m.flow.cp);
  auto lines_with = [&](const std::string& prefix) {
    int n = 0;
    size_t pos = 0;
    while (pos < dump.size()) {
      const size_t end = dump.find('\n', pos);
      if (dump.compare(pos, prefix.size(), prefix) == 0) ++n;
      pos = end == std::string::npos ? dump.size() : end + 1;
    }
    return n;
  };
  CHECK(lines_with("dim d") == static_cast<int>(m.flow.cp.dims.size()));
  CHECK(lines_with("size s") == static_cast<int>(m.flow.cp.sizes.size()));
  CHECK(lines_with("maximize") == 1);
  CHECK(dump.find("dim d0 b0.0 in [1, 8]") != std::string::npos);
  CHECK(dump.find("untileable") != std::string::npos);
  CHECK(dump.find("tetris L1") != std::string::npos);
  CHECK(dump.find("cap L1 peak <= 262144") != std::string::npos);
  CHECK(dump_cp(m.flow.cp) == dump);
}

TEST_CASE("solutions replay against the constraint program") {
  const Graph g = build_encoder_layer(64, 16, 256, 16);
  for (const auto& sc : scenario_names()) {
    CompileOptions o;
    o.scenario = sc;
    o.solve.budget_ms = 200;
    const CompiledModel m = compile(g, target_preset("siracusa-like"), o);
    CHECK(check_assignment(m.flow.cp, m.solution.assignment()).empty());
    // Edge tiles: clamped remainder tiles cover each output exactly once.
    for (const auto& st : m.program.steps) {
      int64_t covered = 0;
      for (const auto& tile : st.tiles) covered += tile.elements();
      CHECK(covered == m.graph.buffer(m.graph.nodes[st.node].outputs[0]).elements());
    }
  }
}

TEST_CASE("larger capacity never lowers the tiling objective") {
  const Graph g = build_gemm_chain(512, 256, 2);
  int64_t last = 0;
  for (int64_t cap : {160 * 1024, 200 * 1024, 256 * 1024, 512 * 1024}) {
    TargetDescription t = target_preset("siracusa-like");
    for (auto& l : t.levels)
      if (l.name == "L1") l.capacity = cap;
    CompileOptions o;
    o.scenario = "octa-core";
    o.solve.budget_ms = 200;
    const CompiledModel m = compile(g, t, o);
    CHECK(m.solution.objective >= last);
    last = m.solution.objective;
  }
}
