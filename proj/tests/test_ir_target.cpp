// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <random>

#include "doctest.h"
#include "tinydeploy/ir.hpp"
#include "tinydeploy/target.hpp"
#include "tinydeploy/zoo.hpp"

using namespace tinydeploy;

namespace {

Buffer var(const std::string& name, Shape shape, Scope scope = Scope::Local) {
  Buffer b;
  b.name = name;
  b.scope = scope;
  b.shape = std::move(shape);
  return b;
}

Node add_node(const std::string& name, std::vector<std::string> in, const std::string& out) {
  Node n;
  n.name = name;
  n.op = "add_requant";
  n.attrs = {{"mul", int64_t{1}}, {"shift", int64_t{0}}, {"zp", int64_t{0}}};
  n.inputs = std::move(in);
  n.outputs = {out};
  return n;
}

int count_kind(const std::vector<Diagnostic>& d, const std::string& kind) {
  return static_cast<int>(std::count_if(d.begin(), d.end(), [&](const Diagnostic& x) { return x.kind == kind; }));
}

std::vector<std::string> node_names(const Graph& g, const Schedule& s) {
  std::vector<std::string> out;
  for (int i : s.order) out.push_back(g.nodes[i].name);
  return out;
}

const char* kGemmDoc = R"({
  "format": "tinydeploy-graph", "version": 1,
  "tensors": [
    {"name": "a", "kind": "variable", "scope": "global", "shape": [4, 8], "dtype": "int8"},
    {"name": "b", "kind": "constant", "scope": "global", "shape": [8, 2], "dtype": "int8", "offset": 0, "length": 16},
    {"name": "y", "kind": "variable", "scope": "global", "shape": [4, 2]}
  ],
  "nodes": [{"name": "mm", "op": "gemm", "attrs": {}, "inputs": ["a", "b"], "outputs": ["y"]}],
  "io": {"inputs": ["a"], "outputs": ["y"]}
})";

}  // namespace

TEST_CASE("parse_graph: input declared as output gives an empty graph") {
  const std::string doc = R"({"format": "tinydeploy-graph", "version": 1,
    "tensors": [{"name": "x", "kind": "variable", "scope": "global", "shape": [2, 3], "dtype": "int8"}],
    "nodes": [], "io": {"inputs": ["x"], "outputs": ["x"]}})";
  const Graph g = parse_graph(doc, {});
  CHECK(g.nodes.empty());
  CHECK(g.inputs == std::vector<std::string>{"x"});
  CHECK(g.outputs == std::vector<std::string>{"x"});
}

TEST_CASE("parse_graph: single gemm with a constant operand") {
  std::vector<uint8_t> blob(16);
  for (size_t i = 0; i < blob.size(); ++i) blob[i] = static_cast<uint8_t>(i);
  const Graph g = parse_graph(kGemmDoc, blob);
  REQUIRE(g.nodes.size() == 1);
  const Buffer& b = g.buffer("b");
  CHECK(b.kind == BufferKind::Constant);
  CHECK(b.payload == blob);
  CHECK(g.buffer("y").shape == Shape{4, 2});
}

TEST_CASE("parse_graph: errors name the culprit") {
  CHECK_THROWS_AS(parse_graph("{not json", {}), ParseError);
  CHECK_THROWS_WITH_AS(parse_graph(kGemmDoc, std::vector<uint8_t>(8)), doctest::Contains("'b'"), ParseError);

  std::string unknown_op = kGemmDoc;
  unknown_op.replace(unknown_op.find("\"gemm\""), 6, "\"conv9\"");
  CHECK_THROWS_WITH_AS(parse_graph(unknown_op, std::vector<uint8_t>(16)), doctest::Contains("conv9"), Error);

  std::string dangling = kGemmDoc;
  dangling.replace(dangling.find("[\"a\", \"b\"]"), 10, "[\"a\", \"q\"]");
  CHECK_THROWS_WITH_AS(parse_graph(dangling, std::vector<uint8_t>(16)), doctest::Contains("'q'"), Error);
}

TEST_CASE("parse_graph: eight-layer llama round-trips") {
  LlamaConfig cfg;
  cfg.seq = 4;
  const Graph g = build_llama(cfg);
  const SerializedGraph s = serialize_graph(g);
  const Graph back = parse_graph(s.text, s.weights);
  CHECK(back == g);
  const SerializedGraph again = serialize_graph(back);
  CHECK(again.text == s.text);
  CHECK(again.weights == s.weights);
}

TEST_CASE("validate: valid, cyclic and short-payload graphs") {
  Graph ok;
  ok.add_buffer(var("x", {4}, Scope::Global));
  ok.add_buffer(var("y", {4}, Scope::Global));
  ok.nodes.push_back(add_node("n", {"x", "x"}, "y"));
  ok.inputs = {"x"};
  ok.outputs = {"y"};
  CHECK(validate(ok).empty());

  Graph cyc;
  cyc.add_buffer(var("p", {4}));
  cyc.add_buffer(var("q", {4}));
  cyc.add_buffer(var("r", {4}, Scope::Global));
  cyc.add_buffer(var("s", {4}, Scope::Global));
  cyc.nodes.push_back(add_node("a", {"q", "r"}, "p"));
  cyc.nodes.push_back(add_node("b", {"p", "r"}, "q"));
  cyc.nodes.push_back(add_node("c", {"q", "r"}, "s"));
  cyc.inputs = {"r"};
  cyc.outputs = {"s"};
  const auto d = validate(cyc);
  REQUIRE(count_kind(d, "cycle") == 1);
  const auto it = std::find_if(d.begin(), d.end(), [](const Diagnostic& x) { return x.kind == "cycle"; });
  CHECK(it->message.find("'a'") != std::string::npos);
  CHECK(it->message.find("'b'") != std::string::npos);
  CHECK(it->message.find("'c'") == std::string::npos);
  CHECK_THROWS_AS(require_valid(cyc), ValidationError);

  Graph shortp;
  Buffer w = var("w", {8, 8}, Scope::Global);
  w.kind = BufferKind::Constant;
  w.dtype = dtypes::kInt8;
  w.payload.assign(63, 1);
  shortp.add_buffer(w);
  shortp.add_buffer(var("y", {8, 8}, Scope::Global));
  shortp.nodes.push_back(add_node("n", {"w", "w"}, "y"));
  shortp.outputs = {"y"};
  const auto d2 = validate(shortp);
  CHECK(d2.size() == 1);
  CHECK(count_kind(d2, "payload size") == 1);
}

TEST_CASE("topo_schedule: chain and diamond") {
  Graph chain;
  for (const char* b : {"x", "a", "b", "c"}) chain.add_buffer(var(b, {2}));
  chain.nodes.push_back(add_node("n2", {"b", "b"}, "c"));
  chain.nodes.push_back(add_node("n0", {"x", "x"}, "a"));
  chain.nodes.push_back(add_node("n1", {"a", "a"}, "b"));
  chain.inputs = {"x"};
  chain.outputs = {"c"};
  CHECK(node_names(chain, topo_schedule(chain)) == std::vector<std::string>{"n0", "n1", "n2"});

  Graph dia;
  for (const char* b : {"x", "a", "l", "r", "y"}) dia.add_buffer(var(b, {2}));
  dia.nodes.push_back(add_node("n0", {"x", "x"}, "a"));
  dia.nodes.push_back(add_node("n1", {"a", "a"}, "l"));
  dia.nodes.push_back(add_node("n2", {"a", "a"}, "r"));
  dia.nodes.push_back(add_node("n3", {"l", "r"}, "y"));
  dia.inputs = {"x"};
  dia.outputs = {"y"};
  const Schedule s = topo_schedule(dia);
  CHECK(node_names(dia, s) == std::vector<std::string>{"n0", "n1", "n2", "n3"});
  CHECK(s.steps() == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("topo_schedule: random fifty-node DAGs respect every edge") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    g.add_buffer(var("in", {2}, Scope::Global));
    std::vector<Node> nodes;
    for (int i = 0; i < 50; ++i) {
      std::uniform_int_distribution<int> pick(-1, i - 1);
      auto src = [&](int k) { return k < 0 ? std::string("in") : "t" + std::to_string(k); };
      g.add_buffer(var("t" + std::to_string(i), {2}));
      nodes.push_back(add_node("n" + std::to_string(i), {src(pick(rng)), src(pick(rng))}, "t" + std::to_string(i)));
    }
    std::shuffle(nodes.begin(), nodes.end(), rng);
    g.nodes = nodes;
    g.inputs = {"in"};
    g.outputs = {"t49"};
    REQUIRE(validate(g).empty());
    const Schedule s = topo_schedule(g);
    REQUIRE(s.size() == 50);
    std::vector<int> sorted = s.order;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) REQUIRE(sorted[i] == i);
    const std::vector<int> step = s.steps();
    for (size_t c = 0; c < g.nodes.size(); ++c)
      for (const auto& in : g.nodes[c].inputs) {
        const int p = g.producer(in);
        if (p >= 0) CHECK(step[p] < step[c]);
      }
  }
}

TEST_CASE("target: presets and reachability") {
  const TargetDescription m = target_preset("minimal");
  REQUIRE(m.levels.size() == 1);
  CHECK(reachable_levels(m, m.host) == std::set<std::string>{m.levels[0].name});

  const TargetDescription s = target_preset("siracusa-like");
  CHECK(s.level("L2").capacity == 2 * 1024 * 1024);
  CHECK(s.level("L1").capacity == 256 * 1024);
  CHECK(s.level("WMEM").capacity == 4 * 1024 * 1024);
  CHECK(s.level("L1").parent == "L2");
  CHECK(s.root().name == "L2");
  CHECK(s.engine("npu").kind == EngineKind::ConvNpu);
  CHECK(s.engine("cluster").kind == EngineKind::MultiCoreCluster);
  CHECK(reachable_levels(s, "npu") == std::set<std::string>{"L1", "WMEM"});
  CHECK(reachable_levels(s, "cluster") == std::set<std::string>{"L1"});
  CHECK_THROWS_AS(reachable_levels(s, "gpu"), Error);

  CHECK(load_target(dump_target(s)).levels.size() == 3);
  CHECK(dump_target(load_target(dump_target(s))) == dump_target(s));
}

TEST_CASE("target: invalid documents") {
  const std::string base = target_preset_text("siracusa-like");
  auto patched = [&](const std::string& from, const std::string& to) {
    std::string s = base;
    const size_t at = s.find(from);
    REQUIRE(at != std::string::npos);
    return s.replace(at, from.size(), to);
  };
  CHECK_THROWS_WITH_AS(load_target(patched("\"parent\": \"L2\"", "\"parent\": \"L3\"")), doctest::Contains("'L1'"),
                       ParseError);
  CHECK_THROWS_WITH_AS(load_target(patched("\"capacity\": 262144", "\"capacity\": 0")), doctest::Contains("capacity"),
                       ParseError);
  CHECK_THROWS_WITH_AS(load_target(patched("\"kind\": \"conv-npu\"", "\"kind\": \"fpga\"")),
                       doctest::Contains("fpga"), ParseError);
  CHECK_THROWS_AS(load_target("[]"), ParseError);
}

TEST_CASE("target: DMA and kernel cycle model") {
  const TargetDescription s = target_preset("siracusa-like");
  const DmaChannel& dma = *s.level("L1").dma;
  CHECK(dma.cycles(64) == 20 + 8);
  CHECK(dma.cycles(65) == 20 + 9);
  CHECK(s.engine("core").kernel_cycles("softmax", 10) == 40);
  CHECK(s.engine("cluster").kernel_cycles("gemm", 17) == 2);
}
