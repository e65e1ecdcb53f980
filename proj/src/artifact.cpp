// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tinydeploy/artifact.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "tinydeploy/backend.hpp"

namespace tinydeploy {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot read '" + path.string() + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_file(const std::filesystem::path& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << contents;
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

std::vector<std::pair<std::string, std::string>> artifact_contents(const CompiledModel& m) {
  std::vector<std::pair<std::string, std::string>> files = emit(m.graph, m.program, m.target).files();
  const SerializedGraph sg = serialize_graph(m.graph);
  files.push_back({artifact_files::kGraph, sg.text});
  files.push_back({artifact_files::kWeights, std::string(sg.weights.begin(), sg.weights.end())});
  files.push_back({artifact_files::kTarget, dump_target(m.target)});
  files.push_back({artifact_files::kProgram, program_to_json(m.program)});
  files.push_back({artifact_files::kSolverLog, solver_log(m)});
  std::sort(files.begin(), files.end());
  return files;
}

void write_artifact(const std::filesystem::path& dir, const CompiledModel& m) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, text] : artifact_contents(m)) write_file(dir / name, text);
}

void apply_manifest(Program& p, const std::string& manifest) {
  std::istringstream in(manifest);
  std::string line;
  if (!std::getline(in, line) || line != "symbol\tlevel\toffset\tsize")
    throw ParseError("manifest: missing header line");
  std::vector<bool> seen(p.allocations.size(), false);
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, '\t');) f.push_back(cell);
    const std::string where = "manifest line " + std::to_string(row);
    if (f.size() != 4) throw ParseError(where + ": expected 4 tab-separated fields");
    const int i = p.find_allocation(f[0]);
    if (i < 0) throw ParseError(where + ": unknown symbol '" + f[0] + "'");
    Allocation& a = p.allocations[i];
    if (f[1] != a.level) throw ParseError(where + ": '" + f[0] + "' is in level '" + a.level + "', not '" + f[1] + "'");
    try {
      size_t used = 0;
      a.offset = std::stoll(f[2], &used);
      if (used != f[2].size()) throw std::invalid_argument(f[2]);
      a.size = std::stoll(f[3], &used);
      if (used != f[3].size()) throw std::invalid_argument(f[3]);
    } catch (const std::exception&) {
      throw ParseError(where + ": offset and size must be integers");
    }
    if (a.offset < 0 || a.size < 0) throw ParseError(where + ": negative offset or size");
    seen[i] = true;
  }
  for (size_t i = 0; i < seen.size(); ++i)
    if (!seen[i]) throw ParseError("manifest: symbol '" + p.allocations[i].symbol + "' is missing");
}

LoadedArtifact load_artifact(const std::filesystem::path& dir) {
  LoadedArtifact a;
  const std::string blob = read_file(dir / artifact_files::kWeights);
  const std::vector<uint8_t> weights(blob.begin(), blob.end());
  a.graph = parse_graph(read_file(dir / artifact_files::kGraph), weights);
  a.target = load_target(read_file(dir / artifact_files::kTarget));
  a.program = program_from_json(read_file(dir / artifact_files::kProgram));
  const std::string manifest = emit_names(a.program).prefix + "_manifest.txt";
  apply_manifest(a.program, read_file(dir / manifest));
  return a;
}

}  // namespace tinydeploy
