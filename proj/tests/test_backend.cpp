// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include "doctest.h"
#include "tinydeploy/backend.hpp"
#include "tinydeploy/compile.hpp"
#include "tinydeploy/ops.hpp"
#include "tinydeploy/sim.hpp"
#include "tinydeploy/zoo.hpp"

using namespace tinydeploy;
namespace fs = std::filesystem;

namespace {

CompiledModel build(const Graph& g, const std::string& target, const std::string& scenario, bool db = true) {
  CompileOptions o;
  o.scenario = scenario;
  o.double_buffer = db;
  o.solve.budget_ms = 200;
  return compile(g, target_preset(target), o);
}

int count(const std::string& text, const std::string& what) {
  int n = 0;
  for (size_t pos = text.find(what); pos != std::string::npos; pos = text.find(what, pos + 1)) ++n;
  return n;
}

struct HostRun {
  NamedTensors outputs;
  int64_t dma_bytes = 0;
  int64_t offloads = 0;
};

// Builds the emitted source with the host runtime and runs it.
HostRun host_run(const CompiledModel& m, const NamedTensors& inputs, const std::string& tag) {
  const SourceArtifact art = emit(m.graph, m.program, m.target);
  const fs::path dir = fs::temp_directory_path() / ("tinydeploy_host_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  for (const auto& [file, text] : art.files()) std::ofstream(dir / file, std::ios::binary) << text;

  auto place = [&](const std::string& buffer) {
    const Allocation& a = m.program.allocations.at(m.program.find_allocation(buffer));
    std::string arena;
    for (const auto& [level, bytes] : art.arenas)
      if (level == a.level) arena = art.name + "_arena_" + level;
    return arena + " + " + std::to_string(a.offset);
  };
  std::ostringstream d;
  d << "#include <stdint.h>\n#include <stdio.h>\n";
  for (const auto& [level, bytes] : art.arenas) d << "extern uint8_t " << art.name << "_arena_" << level << "[];\n";
  d << "extern int64_t td_host_dma_bytes, td_host_offloads;\n"
    << "void " << art.init << "(void);\nvoid " << art.entry << "(void);\n"
    << "int main(int argc, char** argv) {\n  FILE* f = fopen(argv[1], \"rb\");\n  FILE* o = fopen(argv[2], \"wb\");\n"
    << "  (void)argc;\n  " << art.init << "();\n";
  std::ofstream in(dir / "in.bin", std::ios::binary);
  for (const auto& name : m.graph.inputs) {
    const Tensor& t = inputs.at(name);
    in.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size()));
    d << "  if (fread(" << place(name) << ", 1, " << t.data.size() << ", f) != " << t.data.size()
      << ") return 1;\n";
  }
  in.close();
  d << "  " << art.entry << "();\n";
  for (const auto& name : m.graph.outputs)
    d << "  fwrite(" << place(name) << ", 1, " << m.graph.buffer(name).bytes() << ", o);\n";
  d << "  printf(\"%lld %lld\\n\", (long long)td_host_dma_bytes, (long long)td_host_offloads);\n"
    << "  fclose(o);\n  fclose(f);\n  return 0;\n}\n";
  std::ofstream(dir / "driver.c") << d.str();

  const std::string cmd = std::string(TD_HOST_CC) + " -std=c99 -O1 -Wall -Wextra -Werror -pedantic " +
                          "'-DTD_RUNTIME_HEADER=\"" + art.name + "_runtime.h\"' -I" + dir.string() + " " +
                          (dir / (art.name + ".c")).string() + " " + (dir / "driver.c").string() + " " +
                          TD_SOURCE_DIR "/tests/host_runtime.c -o " + (dir / "run").string() + " 2> " +
                          (dir / "cc.log").string();
  REQUIRE_MESSAGE(std::system(cmd.c_str()) == 0, "C compile failed, see " << (dir / "cc.log").string());
  const std::string run = (dir / "run").string() + " " + (dir / "in.bin").string() + " " +
                          (dir / "out.bin").string() + " > " + (dir / "stats.txt").string();
  REQUIRE(std::system(run.c_str()) == 0);

  HostRun r;
  std::ifstream(dir / "stats.txt") >> r.dma_bytes >> r.offloads;
  std::ifstream out(dir / "out.bin", std::ios::binary);
  for (const auto& name : m.graph.outputs) {
    const Buffer& b = m.graph.buffer(name);
    Tensor t(b.shape, *b.dtype);
    out.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.data.size()));
    r.outputs[name] = std::move(t);
  }
  fs::remove_all(dir);
  return r;
}

void check_host_matches_sim(const Graph& g, const std::string& scenario, bool db, const std::string& tag) {
  CAPTURE(scenario);
  CAPTURE(db);
  const CompiledModel m = build(g, "siracusa-like", scenario, db);
  const auto inputs = random_inputs(g, 11);
  const SimResult sim = run(m, inputs);
  const HostRun host = host_run(m, inputs, tag);
  for (const auto& [name, t] : sim.outputs) {
    CAPTURE(name);
    CHECK(host.outputs.at(name) == t);
  }
  int64_t bytes = 0;
  for (const auto& tr : sim.trace.transfers) bytes += tr.bytes;
  CHECK(host.dma_bytes == bytes);
  int64_t offloads = 0;
  for (const auto& st : m.program.steps)
    if (st.engine != m.target.host) offloads += static_cast<int64_t>(st.tiles.size());
  CHECK(host.offloads == offloads);
}

}  // namespace

TEST_CASE("make_closure: globals are referenced, locals captured") {
  CodeSegment seg;
  seg.text = "td_k_relu(${a}, ${w});";
  seg.vars = {{"a", "uint8_t*", "(td_a_x + (k & 1) * 64)"}, {"w", "uint8_t*", "td_h_w"}};
  const Closure c = make_closure(seg, {"td_h_w"}, "td_cl_relu", "TD_ENGINE_NPU");
  REQUIRE(c.env.size() == 1);
  CHECK(c.env[0].name == "a");
  CHECK(c.definition.find("td_k_relu(e->a, td_h_w);") != std::string::npos);
  CHECK(c.invocation ==
        "{ struct td_env_td_cl_relu env = {(td_a_x + (k & 1) * 64)}; offload(TD_ENGINE_NPU, td_cl_relu, &env); "
        "offload_wait(TD_ENGINE_NPU); }");
}

TEST_CASE("make_closure: no locals means no record") {
  CodeSegment seg;
  seg.text = "td_k_copy_1(${x}, ${y}, 16);";
  seg.vars = {{"x", "uint8_t*", "td_h_x"}, {"y", "uint8_t*", "td_h_y"}};
  const Closure direct = make_closure(seg, {"td_h_x", "td_h_y"}, "td_cl_copy");
  CHECK(direct.env.empty());
  CHECK(direct.env_type.empty());
  CHECK(direct.invocation == "td_cl_copy(0);");
  const Closure off = make_closure(seg, {"td_h_x", "td_h_y"}, "td_cl_copy", "TD_ENGINE_CLUSTER");
  CHECK(off.invocation == "offload(TD_ENGINE_CLUSTER, td_cl_copy, 0); offload_wait(TD_ENGINE_CLUSTER);");
}

TEST_CASE("make_closure: unbound variable is an error") {
  CodeSegment seg;
  seg.text = "f(${x});";
  seg.vars = {{"x", "uint8_t*", ""}};
  CHECK_THROWS_AS(make_closure(seg, {}, "td_cl_f"), Error);
  CHECK_THROWS_AS(seg.render(), Error);
}

TEST_CASE("make_closure: five local operands in first-use order") {
  CodeSegment seg;
  seg.text = "td_k_gemv(${y}, ${x}, ${w}, ${b}, ${s}, ${n});";
  seg.vars = {{"x", "uint8_t*", "(td_a_x + (k & 1) * 32)"}, {"w", "uint8_t*", "(td_a_w + (k & 1) * 512)"},
              {"b", "uint8_t*", "(td_a_b + (k & 1) * 64)"},  {"y", "uint8_t*", "(td_a_y + (k & 1) * 16)"},
              {"s", "uint8_t*", "td_s_gemv"},                {"n", "int32_t", "ro.extent[0]"}};
  const Closure c = make_closure(seg, {"td_s_gemv"}, "td_cl_gemv", "TD_ENGINE_CLUSTER");
  const std::string golden =
      "struct td_env_td_cl_gemv {\n"
      "  uint8_t* y;\n"
      "  uint8_t* x;\n"
      "  uint8_t* w;\n"
      "  uint8_t* b;\n"
      "  int32_t n;\n"
      "};\n"
      "\n"
      "static void td_cl_gemv(void* env) {\n"
      "  const struct td_env_td_cl_gemv* e = (const struct td_env_td_cl_gemv*)env;\n"
      "  td_k_gemv(e->y, e->x, e->w, e->b, td_s_gemv, e->n);\n"
      "}\n";
  CHECK(c.definition == golden);
  CHECK(c.env.size() == 5);
}

TEST_CASE("gen_node_code: host node on a whole tile is a plain call") {
  const Graph g = build_gemm_chain(4, 8, 1);
  const CompiledModel m = build(g, "minimal", "single-core");
  const EmitNames names = emit_names(m.program);
  const CodeSegment seg = gen_node_code(m.graph, m.program, 0, m.target, names);
  CHECK(seg.passes == std::vector<std::string>{"instantiate", "bind_allocation", "tile_loop", "closure"});
  CHECK(seg.text.find("for (") == std::string::npos);
  CHECK(seg.text.find("offload") == std::string::npos);
  CHECK(seg.text.find("td_tile_copy") == std::string::npos);
  CHECK(seg.text.find("td_k_gemm_q8(td_h_x, ") != std::string::npos);
  CHECK(seg.hoisted.empty());
}

TEST_CASE("gen_node_code: tiled cluster gemm prefetches and writes back around compute") {
  const Graph g = build_gemm_chain(512, 256, 1);
  const CompiledModel m = build(g, "siracusa-like", "octa-core", true);
  const EmitNames names = emit_names(m.program);
  const ProgramStep& st = m.program.steps.at(0);
  REQUIRE(st.engine == "cluster");
  REQUIRE(st.tiles.size() > 1);
  const CodeSegment seg = gen_node_code(m.graph, m.program, 0, m.target, names);
  const std::string& s = seg.text;
  CHECK(s.find("for (k = 0; k < " + std::to_string(st.tiles.size()) + "; ++k)") != std::string::npos);
  const size_t prefetch = s.find("((k + 1) & 1)");
  const size_t writeback = s.find("((k - 1) & 1)");
  const size_t compute = s.find("offload(TD_ENGINE_CLUSTER");
  REQUIRE(prefetch != std::string::npos);
  REQUIRE(writeback != std::string::npos);
  REQUIRE(compute != std::string::npos);
  CHECK(prefetch < writeback);
  CHECK(writeback < compute);
  REQUIRE(seg.hoisted.size() == 1);
  CHECK(seg.hoisted[0].find("struct td_env_td_cl_0_n_y0_acc") != std::string::npos);
  // Edge extents come from the runtime region.
  CHECK(seg.hoisted[0].find("e->M") != std::string::npos);
}

TEST_CASE("gen_node_code: npu pointwise conv is offloaded with an environment") {
  const Graph g = build_gemm_chain(64, 64, 1);
  const CompiledModel m = build(g, "siracusa-like", "npu");
  const EmitNames names = emit_names(m.program);
  bool seen = false;
  for (size_t s = 0; s < m.program.steps.size(); ++s) {
    if (m.program.steps[s].op != ops::kPwConv) continue;
    REQUIRE(m.program.steps[s].engine == "npu");
    const CodeSegment seg = gen_node_code(m.graph, m.program, static_cast<int>(s), m.target, names);
    CHECK(seg.text.find("offload(TD_ENGINE_NPU, td_cl_") != std::string::npos);
    CHECK(seg.text.find("offload_wait(TD_ENGINE_NPU)") != std::string::npos);
    REQUIRE(seg.hoisted.size() == 1);
    CHECK(seg.hoisted[0].find("td_k_pwconv(") != std::string::npos);
    seen = true;
  }
  CHECK(seen);
}

TEST_CASE("emit: graph without nodes") {
  const Graph g = build_identity({4, 8});
  const CompiledModel m = build(g, "siracusa-like", "single-core");
  const SourceArtifact art = emit(m.graph, m.program, m.target);
  CHECK(art.source.find("void model_run(void) {\n}\n") != std::string::npos);
  for (const auto& [level, bytes] : art.arenas) CHECK(bytes > 0);
  CHECK(art.source.find("model_arena_L1") == std::string::npos);
  CHECK(art.runtime_header.find("int32_t dma_copy_2d(const void* src, void* dst, int32_t rows, int32_t row_bytes") !=
        std::string::npos);
  std::set<std::string> declared;
  const std::regex decl(R"(^(?:int32_t|void) (\w+)\()");
  std::istringstream hdr(art.runtime_header);
  for (std::string line; std::getline(hdr, line);) {
    std::smatch mt;
    if (std::regex_search(line, mt, decl)) declared.insert(mt[1]);
  }
  CHECK(declared == std::set<std::string>{"dma_copy_2d", "dma_wait", "offload", "offload_wait"});
}

TEST_CASE("emit: manifest matches the memory map and output is stable") {
  LlamaConfig cfg;
  cfg.n_layers = 1;
  cfg.seq = 4;
  const CompiledModel m = build(build_llama(cfg), "siracusa-like", "npu+weightmem");
  const SourceArtifact a = emit(m.graph, m.program, m.target);
  const SourceArtifact b = emit(m.graph, m.program, m.target);
  CHECK(a.files() == b.files());

  std::istringstream in(a.manifest);
  std::string line;
  std::getline(in, line);
  CHECK(line == "symbol\tlevel\toffset\tsize");
  size_t rows = 0;
  std::map<std::string, std::pair<std::string, int64_t>> listed;
  while (std::getline(in, line)) {
    std::istringstream f(line);
    std::string sym, level;
    int64_t off = 0, size = 0;
    std::getline(f, sym, '\t');
    std::getline(f, level, '\t');
    f >> off >> size;
    listed[sym] = {level, off};
    ++rows;
  }
  size_t entries = 0;
  for (const auto& l : m.memmap.levels)
    for (const auto& e : l.entries) {
      ++entries;
      REQUIRE(listed.count(e.symbol));
      CHECK(listed[e.symbol].first == l.name);
      CHECK(listed[e.symbol].second == e.offset);
    }
  CHECK(rows == entries);
  CHECK(rows == m.program.allocations.size());

  for (const char* heap : {"malloc", "calloc", "realloc", "free(", "alloca"}) CHECK(count(a.source, heap) == 0);
  for (const auto& [level, bytes] : a.arenas) {
    CHECK(bytes == m.program.peaks.at(level));
    CHECK(a.source.find("uint8_t model_arena_" + level + "[" + std::to_string(bytes) + "];") != std::string::npos);
  }
}

TEST_CASE("emit: host build reproduces the simulator") {
  const Graph chain = build_gemm_chain(512, 256, 2);
  for (const auto& sc : scenario_names())
    for (bool db : {true, false}) check_host_matches_sim(chain, sc, db, "chain");
  const Graph enc = build_encoder_layer(64, 16, 256, 16);
  for (const auto& sc : scenario_names()) check_host_matches_sim(enc, sc, true, "encoder");
  LlamaConfig cfg;
  cfg.n_layers = 1;
  cfg.mode = LlamaConfig::Mode::Autoregressive;
  cfg.past = 3;
  check_host_matches_sim(build_llama(cfg), "octa-core", false, "llama");
  cfg.mode = LlamaConfig::Mode::Parallel;
  cfg.past = 0;
  cfg.seq = 8;
  check_host_matches_sim(build_llama(cfg), "npu+weightmem", true, "llama");
}
