// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tinydeploy/cli.hpp"

#include <cstdlib>
#include <filesystem>

#include "CLI11.hpp"
#include "tinydeploy/artifact.hpp"
#include "tinydeploy/compile.hpp"
#include "tinydeploy/sim.hpp"
#include "tinydeploy/zoo.hpp"

namespace tinydeploy {

namespace {

namespace fs = std::filesystem;

class UsageError : public Error {
 public:
  using Error::Error;
};

enum class Verbosity { Quiet, Info, Debug };

Verbosity verbosity() {
  const char* v = std::getenv("TINYDEPLOY_LOG");
  if (!v) return Verbosity::Info;
  const std::string s = v;
  if (s == "quiet" || s == "0") return Verbosity::Quiet;
  if (s == "debug" || s == "2") return Verbosity::Debug;
  return Verbosity::Info;
}

TargetDescription resolve_target(const std::string& spec) {
  if (fs::exists(spec)) return load_target(read_file(spec));
  for (const auto& name : target_preset_names())
    if (name == spec) return target_preset(name);
  throw ParseError("target '" + spec + "' is neither a file nor a preset");
}

struct CompileArgs {
  std::string graph, weights, target, scenario = "single-core", double_buffer = "on", report, out, name = "model";
  uint64_t seed = 0;
  int64_t budget_ms = 2000;
};

int cmd_compile(const CompileArgs& a, std::ostream& out, std::ostream& err) {
  const std::string text = read_file(a.graph);
  std::vector<uint8_t> weights;
  if (!a.weights.empty()) {
    const std::string blob = read_file(a.weights);
    weights.assign(blob.begin(), blob.end());
  }
  const Graph g = parse_graph(text, weights);
  const TargetDescription t = resolve_target(a.target);
  CompileOptions o;
  o.name = a.name;
  o.scenario = a.scenario;
  o.double_buffer = a.double_buffer == "on";
  o.solve.seed = a.seed;
  o.solve.budget_ms = a.budget_ms;
  CompiledModel m;
  try {
    m = compile(g, t, o);
  } catch (const InfeasibleError& e) {
    err << "infeasible: " << e.what() << "\n";
    for (const auto& l : t.levels) err << "  level " << l.name << " capacity " << l.capacity << "\n";
    return kExitInfeasible;
  }
  write_artifact(a.out, m);

  const Verbosity v = verbosity();
  if (v != Verbosity::Quiet) {
    err << "compiled " << g.nodes.size() << " nodes into " << m.program.steps.size() << " steps ("
        << (m.solution.optimal ? "optimal" : "feasible, budget exhausted") << ")\n";
    for (const auto& [level, peak] : m.program.peaks) err << "  " << level << " peak " << peak << "\n";
  }
  if (v == Verbosity::Debug) err << solver_log(m);

  if (a.report == "cp") out << dump_cp(m.flow.cp);
  if (a.report == "mem") out << report_mem(m.program, plan_trace(m.program, m.target));
  if (a.report == "cycles") out << report_cycles(model_cycles(m.graph, m.program, m.target));
  out << "wrote " << artifact_contents(m).size() << " files to " << a.out << "\n";
  return kExitOk;
}

struct RunArgs {
  std::string artifact, inputs, out, report;
  uint64_t seed = 0;
};

NamedTensors read_inputs(const Graph& g, const std::string& path) {
  const std::string blob = read_file(path);
  NamedTensors in;
  size_t at = 0;
  for (const auto& name : g.inputs) {
    const Buffer& b = g.buffer(name);
    Tensor t(b.shape, b.dtype ? *b.dtype : dtypes::kInt8);
    if (at + t.data.size() > blob.size())
      throw ParseError("inputs file '" + path + "' is shorter than the graph inputs");
    std::copy_n(blob.begin() + static_cast<std::ptrdiff_t>(at), t.data.size(), t.data.begin());
    at += t.data.size();
    in[name] = std::move(t);
  }
  if (at != blob.size()) throw ParseError("inputs file '" + path + "' is longer than the graph inputs");
  return in;
}

int cmd_run(const RunArgs& a, std::ostream& out, std::ostream& err) {
  const LoadedArtifact art = load_artifact(a.artifact);
  const NamedTensors inputs = a.inputs.empty() ? random_inputs(art.graph, a.seed) : read_inputs(art.graph, a.inputs);
  const SimResult res = run(art.graph, art.program, art.target, inputs);
  fs::create_directories(a.out);
  std::string blob;
  for (const auto& name : art.graph.outputs) {
    const Tensor& t = res.outputs.at(name);
    blob.append(t.data.begin(), t.data.end());
  }
  write_file(fs::path(a.out) / "outputs.bin", blob);
  const std::string mem = report_mem(art.program, res.trace);
  const std::string cycles = report_cycles(res.cycles);
  write_file(fs::path(a.out) / "mem.txt", mem);
  write_file(fs::path(a.out) / "cycles.txt", cycles);
  if (verbosity() != Verbosity::Quiet)
    err << "ran " << art.program.steps.size() << " steps, " << res.cycles.total << " modeled cycles\n";
  if (a.report == "mem") out << mem;
  if (a.report == "cycles") out << cycles;
  out << "wrote outputs.bin, mem.txt and cycles.txt to " << a.out << "\n";
  return kExitOk;
}

struct GenerateArgs {
  std::string model, mode = "parallel", out;
  int64_t layers = 8, seq = 8, past = 0, d_model = 64, heads = 16, d_ff = 256, vocab = 512, context = 256;
  int64_t rows = 64, width = 64, count = 2;
  uint64_t seed = 42;
};

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  Graph g;
  if (a.model == "llama") {
    LlamaConfig cfg;
    cfg.d_m = a.d_model;
    cfg.h = a.heads;
    cfg.n_layers = a.layers;
    cfg.d_ff = a.d_ff;
    cfg.vocab = a.vocab;
    cfg.context = a.context;
    cfg.seed = a.seed;
    cfg.mode = a.mode == "parallel" ? LlamaConfig::Mode::Parallel : LlamaConfig::Mode::Autoregressive;
    cfg.seq = a.mode == "parallel" ? a.seq : 1;
    cfg.past = a.past;
    try {
      cfg.validate();
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
    g = build_llama(cfg);
  } else if (a.model == "encoder") {
    if (a.seq < 1 || a.d_model < 1 || a.heads < 1 || a.d_ff < 1 || a.d_model % a.heads)
      throw UsageError("encoder: sizes must be positive and d-model divisible by heads");
    g = build_encoder_layer(a.d_model, a.heads, a.d_ff, a.seq, a.seed);
  } else if (a.model == "gemm-chain") {
    if (a.rows < 1 || a.width < 1 || a.count < 1) throw UsageError("gemm-chain: sizes must be positive");
    g = build_gemm_chain(a.rows, a.width, a.count, a.seed);
  } else {
    if (a.rows < 1 || a.width < 1) throw UsageError("identity: sizes must be positive");
    g = build_identity({a.rows, a.width});
  }
  require_valid(g);
  const SerializedGraph sg = serialize_graph(g);
  fs::create_directories(a.out);
  write_file(fs::path(a.out) / "graph.json", sg.text);
  write_file(fs::path(a.out) / "weights.bin", std::string(sg.weights.begin(), sg.weights.end()));
  out << a.model << ": " << g.nodes.size() << " nodes, " << g.buffers.size() << " buffers, " << sg.weights.size()
      << " weight bytes\n";
  return kExitOk;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Deploys quantized operator graphs onto multi-level memory targets."};
  app.name("tinydeploy");
  app.require_subcommand(1);
  const std::vector<std::string> reports = {"mem", "cycles", "cp"};

  CompileArgs ca;
  CLI::App* compile_cmd = app.add_subcommand("compile", "Compile a graph into C sources, manifest and solver log");
  compile_cmd->add_option("--graph", ca.graph, "Graph JSON")->required();
  compile_cmd->add_option("--weights", ca.weights, "Weight blob");
  compile_cmd->add_option("--target", ca.target, "Target JSON or preset name")->required();
  compile_cmd->add_option("--scenario", ca.scenario, "Deployment scenario")
      ->check(CLI::IsMember(scenario_names()))
      ->capture_default_str();
  compile_cmd->add_option("--double-buffer", ca.double_buffer, "on|off")
      ->check(CLI::IsMember({"on", "off"}))
      ->capture_default_str();
  compile_cmd->add_option("--seed", ca.seed, "Solver seed")->capture_default_str();
  compile_cmd->add_option("--budget-ms", ca.budget_ms, "Solver budget")->check(CLI::NonNegativeNumber)->capture_default_str();
  compile_cmd->add_option("--report", ca.report, "Print mem, cycles or cp")->check(CLI::IsMember(reports));
  compile_cmd->add_option("--name", ca.name, "Symbol prefix of the emitted code")->capture_default_str();
  compile_cmd->add_option("--out", ca.out, "Artifact directory")->required();

  RunArgs ra;
  CLI::App* run_cmd = app.add_subcommand("run", "Simulate a compiled artifact");
  run_cmd->add_option("--artifact", ra.artifact, "Artifact directory")->required();
  run_cmd->add_option("--inputs", ra.inputs, "Concatenated input tensors; random when absent");
  run_cmd->add_option("--seed", ra.seed, "Seed for random inputs")->capture_default_str();
  run_cmd->add_option("--report", ra.report, "Print mem or cycles")->check(CLI::IsMember({"mem", "cycles"}));
  run_cmd->add_option("--out", ra.out, "Output directory")->required();

  GenerateArgs ga;
  CLI::App* gen_cmd = app.add_subcommand("generate", "Write a zoo model as graph and weights");
  gen_cmd->add_option("model", ga.model, "llama, encoder, gemm-chain or identity")
      ->required()
      ->check(CLI::IsMember({"llama", "encoder", "gemm-chain", "identity"}));
  gen_cmd->add_option("--layers", ga.layers)->capture_default_str();
  gen_cmd->add_option("--mode", ga.mode)->check(CLI::IsMember({"parallel", "autoregressive"}))->capture_default_str();
  gen_cmd->add_option("--seq", ga.seq, "Tokens (parallel) or sequence length (encoder)")->capture_default_str();
  gen_cmd->add_option("--past", ga.past, "Cached tokens (autoregressive)")->capture_default_str();
  gen_cmd->add_option("--d-model", ga.d_model)->capture_default_str();
  gen_cmd->add_option("--heads", ga.heads)->capture_default_str();
  gen_cmd->add_option("--d-ff", ga.d_ff)->capture_default_str();
  gen_cmd->add_option("--vocab", ga.vocab)->capture_default_str();
  gen_cmd->add_option("--context", ga.context)->capture_default_str();
  gen_cmd->add_option("--rows", ga.rows)->capture_default_str();
  gen_cmd->add_option("--width", ga.width)->capture_default_str();
  gen_cmd->add_option("--count", ga.count)->capture_default_str();
  gen_cmd->add_option("--seed", ga.seed)->capture_default_str();
  gen_cmd->add_option("--out", ga.out, "Output directory")->required();

  std::vector<std::string> argv_s = {"tinydeploy"};
  argv_s.insert(argv_s.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : argv_s) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (compile_cmd->parsed()) return cmd_compile(ca, out, err);
    if (run_cmd->parsed()) return cmd_run(ra, out, err);
    return cmd_generate(ga, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InfeasibleError& e) {
    err << "infeasible: " << e.what() << "\n";
    return kExitInfeasible;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << "\n";
    return kExitParse;
  } catch (const ValidationError& e) {
    err << "invalid graph: " << e.what() << "\n";
    return kExitParse;
  } catch (const SimError& e) {
    err << "simulation error: " << e.what() << "\n";
    return kExitSim;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}

}  // namespace tinydeploy
