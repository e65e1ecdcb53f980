// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tinydeploy/artifact.hpp"
#include "tinydeploy/compile.hpp"
#include "tinydeploy/memalloc.hpp"
#include "tinydeploy/ops.hpp"
#include "tinydeploy/sim.hpp"
#include "tinydeploy/zoo.hpp"

using namespace tinydeploy;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;
  std::vector<std::string> failures;

  void expect(bool ok, const std::string& what) {
    if (ok) return;
    pass = false;
    if (failures.size() < 5) failures.push_back(what);
  }
};

std::string fmt(double v, int digits = 2) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

CompiledModel compile_with(const Graph& g, const TargetDescription& t, const std::string& scenario, bool db,
                           const std::string& name = "model") {
  CompileOptions o;
  o.name = name;
  o.scenario = scenario;
  o.double_buffer = db;
  return compile(g, t, o);
}

LlamaConfig llama(int64_t layers, bool autoregressive, int64_t tokens) {
  LlamaConfig c;
  c.n_layers = layers;
  if (autoregressive) {
    c.mode = LlamaConfig::Mode::Autoregressive;
    c.seq = 1;
    c.past = tokens - 1;
  } else {
    c.seq = tokens;
  }
  return c;
}

struct CorpusEntry {
  std::string name;
  Graph graph;
};

std::vector<CorpusEntry> corpus() {
  std::vector<CorpusEntry> c;
  c.push_back({"identity", build_identity({4, 8})});
  c.push_back({"gemm-chain 32x64x2", build_gemm_chain(32, 64, 2)});
  c.push_back({"gemm-chain 512x256x2", build_gemm_chain(512, 256, 2)});
  c.push_back({"encoder S=32", build_encoder_layer(64, 16, 256, 32)});
  for (int64_t l : {1, 2, 4, 8}) {
    c.push_back({"llama L=" + std::to_string(l) + " parallel S=8", build_llama(llama(l, false, 8))});
    c.push_back({"llama L=" + std::to_string(l) + " autoregressive past=7", build_llama(llama(l, true, 8))});
  }
  return c;
}

// Criteria 1 and 2 share the compilation matrix.
struct MatrixResult {
  Outcome exact;
  Outcome memory;
};

MatrixResult run_matrix(const TargetDescription& t) {
  MatrixResult r;
  const auto t0 = Clock::now();
  int compilations = 0, runs = 0, pairs = 0;
  for (const auto& entry : corpus()) {
    std::vector<NamedTensors> inputs, expected;
    for (uint64_t seed = 0; seed < 16; ++seed) {
      inputs.push_back(random_inputs(entry.graph, seed));
      expected.push_back(reference_eval(entry.graph, inputs.back()));
    }
    for (const auto& sc : scenario_names())
      for (bool db : {true, false}) {
        const std::string where = entry.name + " / " + sc + " / db " + (db ? "on" : "off");
        CompiledModel m;
        try {
          m = compile_with(entry.graph, t, sc, db);
        } catch (const std::exception& e) {
          r.exact.expect(false, where + ": " + e.what());
          continue;
        }
        ++compilations;

        // Independent disjointness check over the emitted placement.
        const auto& al = m.program.allocations;
        for (size_t i = 0; i < al.size(); ++i) {
          r.memory.expect(al[i].offset >= 0 && al[i].offset + al[i].size <= t.level(al[i].level).capacity,
                          where + ": '" + al[i].symbol + "' exceeds its level");
          for (size_t j = i + 1; j < al.size(); ++j) {
            if (al[i].level != al[j].level) continue;
            if (al[i].start > al[j].end || al[j].start > al[i].end) continue;
            ++pairs;
            const bool disjoint =
                al[i].offset + al[i].size <= al[j].offset || al[j].offset + al[j].size <= al[i].offset;
            r.memory.expect(disjoint, where + ": '" + al[i].symbol + "' overlaps '" + al[j].symbol + "'");
          }
        }

        for (uint64_t seed = 0; seed < 16; ++seed) {
          SimResult res;
          try {
            res = run(m, inputs[seed]);
          } catch (const std::exception& e) {
            r.exact.expect(false, where + " seed " + std::to_string(seed) + ": " + e.what());
            continue;
          }
          ++runs;
          r.exact.expect(res.outputs == expected[seed], where + " seed " + std::to_string(seed) + ": output differs");
          if (seed == 0)
            for (const auto& l : t.levels) {
              const int64_t peak = res.trace.peak(l.name);
              r.memory.expect(peak == m.program.peaks.at(l.name),
                              where + ": simulated peak of " + l.name + " differs from the memory map");
              r.memory.expect(peak <= l.capacity, where + ": " + l.name + " over capacity");
              int64_t live_max = 0;
              const auto li = std::find(res.trace.levels.begin(), res.trace.levels.end(), l.name) - res.trace.levels.begin();
              for (const auto& row : res.trace.live) live_max = std::max(live_max, row[li]);
              r.memory.expect(live_max <= peak, where + ": live bytes above the peak in " + l.name);
            }
        }
      }
  }
  const double secs = seconds_since(t0);
  r.exact.expect(secs < 600, "matrix took " + fmt(secs, 0) + " s");
  r.exact.detail = std::to_string(compilations) + " compilations, " + std::to_string(runs) +
                   " bit-exact simulations in " + fmt(secs, 1) + " s";
  r.memory.detail = std::to_string(compilations) + " memory maps, " + std::to_string(pairs) +
                    " concurrently live pairs disjoint, peaks equal to the simulated high-water marks";
  return r;
}

int64_t brute_force_peak(const std::vector<Lifetime>& lives, const std::vector<int64_t>& sizes) {
  std::vector<int> order(sizes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  int64_t best = std::numeric_limits<int64_t>::max();
  do best = std::min(best, tetris_allocate(order, lives, sizes).peak);
  while (std::next_permutation(order.begin(), order.end()));
  return best;
}

struct RandomInstance {
  ConstraintProgram cp;
  std::vector<AllocationProblem> problems;
  std::vector<Lifetime> lives;
  std::vector<int64_t> sizes;
};

RandomInstance random_instance(std::mt19937_64& rng) {
  RandomInstance inst;
  const int n = 1 + static_cast<int>(rng() % 7);
  const int steps = 1 + static_cast<int>(rng() % 10);
  AllocationProblem p{"L1", int64_t{1} << 20, {}};
  for (int i = 0; i < n; ++i) {
    const int a = static_cast<int>(rng() % steps), b = static_cast<int>(rng() % steps);
    const std::string name = "b" + std::to_string(i);
    inst.lives.push_back({name, std::min(a, b), std::max(a, b)});
    inst.sizes.push_back(1 + static_cast<int64_t>(rng() % 64));
    const int sv = inst.cp.add_size({name, "L1", inst.sizes.back(), {}, 1});
    p.items.push_back({name, sv, inst.lives.back(), AllocationItem::Kind::Home, -1});
  }
  inst.problems.push_back(p);
  return inst;
}

Outcome criterion3() {
  Outcome o;
  std::mt19937_64 rng(2026);
  const auto t0 = Clock::now();
  int optimal = 0;
  for (int i = 0; i < 500; ++i) {
    const RandomInstance inst = random_instance(rng);
    const JointSolution sol = solve_joint(inst.cp, inst.problems, {});
    const int64_t best = brute_force_peak(inst.lives, inst.sizes);
    o.expect(sol.level("L1").peak == best, "instance " + std::to_string(i) + ": peak " +
                                               std::to_string(sol.level("L1").peak) + ", exhaustive " +
                                               std::to_string(best));
    optimal += sol.optimal ? 1 : 0;
  }
  const double secs = seconds_since(t0);
  o.expect(secs < 60, "took " + fmt(secs, 1) + " s");
  o.detail = "500/500 peaks equal the exhaustive minimum, " + std::to_string(optimal) + " proven optimal, " +
             fmt(secs, 2) + " s";
  return o;
}

Outcome criterion4(const TargetDescription& t) {
  Outcome o;
  const std::vector<Lifetime> lives = {{"A", 0, 1}, {"B", 2, 3}, {"C", 1, 2}};
  const std::vector<int64_t> sizes = {4, 3, 2};
  // Hand-derived peaks per placement order.
  const std::map<std::string, int64_t> expected = {{"ABC", 6}, {"ACB", 9}, {"BAC", 6},
                                                   {"BCA", 9}, {"CAB", 6}, {"CBA", 6}};
  std::vector<int> order = {0, 1, 2};
  std::string table;
  do {
    std::string key;
    for (int i : order) key += lives[i].buffer;
    const int64_t peak = tetris_allocate(order, lives, sizes).peak;
    o.expect(peak == expected.at(key), "order " + key + " gives " + std::to_string(peak));
    table += (table.empty() ? "" : " ") + key + "=" + std::to_string(peak);
  } while (std::next_permutation(order.begin(), order.end()));
  o.expect(brute_force_peak(lives, sizes) == 6, "exhaustive minimum is not 6");

  // Replay solver solutions through the allocator.
  int replayed = 0;
  std::mt19937_64 rng(4);
  for (int i = 0; i < 200; ++i) {
    const RandomInstance inst = random_instance(rng);
    const JointSolution sol = solve_joint(inst.cp, inst.problems, {});
    const LevelSolution& ls = sol.level("L1");
    o.expect(tetris_allocate(ls.order, inst.lives, ls.sizes).offsets == ls.offsets, "random replay mismatch");
    ++replayed;
  }
  for (const auto& entry : corpus())
    for (const auto& sc : scenario_names()) {
      const CompiledModel m = compile_with(entry.graph, t, sc, true);
      for (const auto& ls : m.solution.levels) {
        std::vector<Lifetime> lv;
        for (const auto& e : m.memmap.level(ls.level).entries) lv.push_back(e.life);
        const TetrisResult r = tetris_allocate(ls.order, lv, ls.sizes);
        o.expect(r.offsets == ls.offsets && r.peak == ls.peak, entry.name + " / " + sc + " / " + ls.level +
                                                                   ": replay differs");
        ++replayed;
      }
    }
  o.detail = "peaks " + table + ", exhaustive minimum 6; " + std::to_string(replayed) +
             " solver solutions replay to identical offsets";
  return o;
}

Outcome criterion5(const TargetDescription& t) {
  Outcome o;
  const auto t0 = Clock::now();
  const int64_t steps = 16;
  LlamaConfig cfg;  // d_m 64, 16 heads, 8 layers, d_ff 256
  std::vector<int32_t> tokens{1};
  NamedTensors caches;
  int exact_steps = 0;
  int64_t ar_cycles = 0, par_cycles = 0;
  for (int64_t step = 0; step < steps; ++step) {
    const Graph ar = build_llama(llama(cfg.n_layers, true, step + 1));
    NamedTensors in = caches;
    in[zoo_names::kTokens] = Tensor::from_values<int32_t>({1}, dtypes::kInt32, std::vector<int32_t>{tokens.back()});
    const SimResult ar_res = run(compile_with(ar, t, "npu+weightmem", true), in);
    const auto& ar_out = ar_res.outputs;
    ar_cycles += ar_res.cycles.total;

    const Graph par = build_llama(llama(cfg.n_layers, false, step + 1));
    NamedTensors pin;
    pin[zoo_names::kTokens] =
        Tensor::from_values<int32_t>({static_cast<int64_t>(tokens.size())}, dtypes::kInt32, tokens);
    const SimResult par_res = run(compile_with(par, t, "npu+weightmem", true), pin);
    const auto& par_out = par_res.outputs;
    par_cycles += par_res.cycles.total;

    const auto last = ar_out.at(zoo_names::kLogits).values();
    const auto all = par_out.at(zoo_names::kLogits).values();
    const bool same = std::equal(last.begin(), last.end(), all.end() - static_cast<std::ptrdiff_t>(last.size()));
    o.expect(same, "step " + std::to_string(step) + ": cached logits differ from recomputation");
    exact_steps += same ? 1 : 0;

    caches.clear();
    for (int64_t l = 0; l < cfg.n_layers; ++l) {
      caches[zoo_names::k_cache_in(l)] = ar_out.at(zoo_names::k_cache_out(l));
      caches[zoo_names::v_cache_in(l)] = ar_out.at(zoo_names::v_cache_out(l));
    }
    tokens.push_back(static_cast<int32_t>(argmax_last_row(last, cfg.vocab)));
  }

  const Graph ar128 = build_llama(llama(cfg.n_layers, true, 128));
  const Graph par128 = build_llama(llama(cfg.n_layers, false, 128));
  const double mac_ratio = static_cast<double>(count_macs(ar128)) / static_cast<double>(count_macs(par128));
  o.expect(mac_ratio < 1.0 / 20, "MAC ratio " + fmt(mac_ratio, 4));
  const double cyc_ratio = static_cast<double>(par_cycles) / static_cast<double>(ar_cycles);
  std::string generated;
  for (size_t i = 1; i < tokens.size(); ++i) generated += (i > 1 ? "," : "") + std::to_string(tokens[i]);
  o.detail = std::to_string(exact_steps) + "/" + std::to_string(steps) + " greedy steps exact (tokens " + generated +
             "); MACs at S=128 cached/recompute = " + fmt(mac_ratio, 4) + "; modeled cycles over the 16 steps " +
             "recompute/cached = " + fmt(cyc_ratio, 2) + "x; " + fmt(seconds_since(t0), 1) + " s";
  return o;
}

TargetDescription with_bandwidth(const TargetDescription& base, double bw) {
  TargetDescription t = base;
  for (auto& l : t.levels)
    if (l.dma) l.dma->bandwidth = bw;
  return t;
}

Outcome criterion6(const TargetDescription& t) {
  Outcome o;
  const Graph enc = build_encoder_layer(64, 16, 256, 32);
  std::string ratios;
  for (const auto& sc : scenario_names()) {
    CompileOptions opts;
    opts.scenario = sc;
    const auto [dbl, single] = compare_buffering(enc, t, opts);
    o.expect(dbl < single, sc + ": double " + std::to_string(dbl) + " vs single " + std::to_string(single));
    ratios += (ratios.empty() ? "" : ", ") + sc + " " + fmt(static_cast<double>(single) / dbl, 2) + "x";
  }

  CompileOptions opts;
  opts.scenario = "octa-core";
  double prev = 1.0;
  std::string sweep;
  std::vector<double> fractions;
  for (double bw : {0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 64.0, 256.0, 4096.0, 1e6, 1e9}) {
    const TargetDescription tb = with_bandwidth(t, bw);
    const CompiledModel m = compile(enc, tb, opts);
    const double f = model_cycles(m.graph, m.program, tb).marshaling();
    o.expect(f <= prev + 1e-12, "fraction rose at bandwidth " + fmt(bw, 1));
    prev = f;
    fractions.push_back(f);
    if (bw == 1.0 || bw == 8.0 || bw == 1e9) sweep += (sweep.empty() ? "" : ", ") + fmt(bw, 0) + " B/c: " + fmt(f, 3);
  }
  const double floor_gap = fractions[fractions.size() - 2] - fractions.back();
  o.expect(floor_gap < 1e-3, "fraction has not settled at high bandwidth");
  o.expect(fractions.back() > 0, "setup-only floor is zero");
  o.detail = "single/double latency " + ratios + "; marshaling fraction " + sweep + " (non-increasing)";
  return o;
}

Outcome criterion7(const TargetDescription& t) {
  Outcome o;
  const Graph enc = build_encoder_layer(64, 16, 256, 32);
  std::vector<int64_t> totals;
  std::map<std::string, int64_t> weight_bytes;
  for (const auto& sc : scenario_names()) {
    const CompiledModel m = compile_with(enc, t, sc, true);
    totals.push_back(run(m, random_inputs(enc, 0)).cycles.total);
    int64_t bytes = 0;
    for (const auto& st : m.program.steps) {
      if (st.op != ops::kPwConv) continue;
      for (const auto& e : st.events)
        if (e.kind == Transfer::Kind::In && st.operands.at(e.operand).operand == 1) bytes += e.bytes;
    }
    weight_bytes[sc] = bytes;
  }
  const auto names = scenario_names();
  std::string chain;
  for (size_t i = 0; i < totals.size(); ++i) {
    chain += (i ? " > " : "") + names[i] + " " + std::to_string(totals[i]);
    if (i > 0) o.expect(totals[i - 1] > totals[i], names[i - 1] + " is not slower than " + names[i]);
  }
  o.expect(weight_bytes.at("npu+weightmem") == 0, "weight tiles still moved under npu+weightmem");
  o.expect(weight_bytes.at("npu") > 0, "npu scenario moved no weights");
  o.detail = chain + " cycles; pointwise weight DMA bytes npu " + std::to_string(weight_bytes.at("npu")) +
             ", npu+weightmem " + std::to_string(weight_bytes.at("npu+weightmem"));
  return o;
}

Outcome criterion8(const TargetDescription& t) {
  Outcome o;
  std::vector<int64_t> counts;
  const ScenarioPreset sc = scenario_preset("npu+weightmem");
  std::vector<Pass> passes;
  for (const auto& p : sc.passes) passes.push_back(pass_by_name(p));
  for (int64_t l = 1; l <= 8; ++l)
    counts.push_back(static_cast<int64_t>(apply_passes(build_llama(llama(l, false, 8)), passes).nodes.size()));
  const int64_t slope = counts[1] - counts[0];
  for (size_t i = 1; i < counts.size(); ++i)
    o.expect(counts[i] - counts[i - 1] == slope, "slope changes at L=" + std::to_string(i + 1));
  std::string list;
  for (size_t i = 0; i < counts.size(); ++i) list += (i ? "," : "") + std::to_string(counts[i]);

  const Graph ar = build_llama(llama(8, true, 128));
  const auto t0 = Clock::now();
  const CompiledModel m = compile_with(ar, t, "npu+weightmem", true);
  const double secs = seconds_since(t0);
  o.expect(secs <= 120, "8-layer compile took " + fmt(secs, 1) + " s");
  o.detail = "lowered nodes L=1..8: " + list + " (slope " + std::to_string(slope) + ", intercept " +
             std::to_string(counts[0] - slope) + "); 8-layer autoregressive step 128 compiled in " + fmt(secs, 2) +
             " s, " + (m.solution.optimal ? "optimal" : "feasible (optimality not proven within budget)");
  return o;
}

Outcome criterion9(const TargetDescription& t) {
  Outcome o;
  const Graph g = build_llama(llama(2, false, 8));
  std::vector<size_t> hashes;
  std::vector<std::vector<std::pair<std::string, std::string>>> dirs;
  for (int i = 0; i < 3; ++i) {
    dirs.push_back(artifact_contents(compile_with(g, t, "npu+weightmem", true)));
    std::string all;
    for (const auto& [name, text] : dirs.back()) all += name + '\0' + text + '\0';
    hashes.push_back(std::hash<std::string>{}(all));
  }
  o.expect(dirs[0] == dirs[1] && dirs[1] == dirs[2], "artifact directories differ");
  std::ostringstream h;
  h << std::hex << hashes[0];
  o.detail = "3 compilations, " + std::to_string(dirs[0].size()) + " files each, directory hash " + h.str();
  return o;
}

}  // namespace

int main() {
  const TargetDescription t = target_preset("siracusa-like");
  std::vector<std::pair<std::string, std::function<Outcome()>>> suite;
  MatrixResult matrix;
  bool matrix_done = false;
  auto ensure_matrix = [&] {
    if (!matrix_done) matrix = run_matrix(t);
    matrix_done = true;
  };
  suite.push_back({"bit-exact pipeline correctness", [&] {
                     ensure_matrix();
                     return matrix.exact;
                   }});
  suite.push_back({"memory safety", [&] {
                     ensure_matrix();
                     return matrix.memory;
                   }});
  suite.push_back({"allocator optimality", criterion3});
  suite.push_back({"tetris recurrence fidelity", [&] { return criterion4(t); }});
  suite.push_back({"kv-cache equivalence", [&] { return criterion5(t); }});
  suite.push_back({"double buffering", [&] { return criterion6(t); }});
  suite.push_back({"scenario ordering", [&] { return criterion7(t); }});
  suite.push_back({"scaling", [&] { return criterion8(t); }});
  suite.push_back({"determinism", [&] { return criterion9(t); }});

  int failed = 0;
  for (size_t i = 0; i < suite.size(); ++i) {
    Outcome o;
    try {
      o = suite[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.failures.push_back(std::string("exception: ") + e.what());
    }
    std::cout << "criterion " << i + 1 << " " << suite[i].first << ": " << (o.pass ? "PASS" : "FAIL") << " - "
              << o.detail << "\n";
    for (const auto& f : o.failures) std::cout << "    " << f << "\n";
    std::cout.flush();
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
