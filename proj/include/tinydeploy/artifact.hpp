// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Artifact directories: everything `compile` writes and `run` reads back.

#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "tinydeploy/compile.hpp"
#include "tinydeploy/ir.hpp"
#include "tinydeploy/program.hpp"
#include "tinydeploy/target.hpp"

namespace tinydeploy {

namespace artifact_files {
inline constexpr const char* kGraph = "graph.json";  // lowered graph
inline constexpr const char* kWeights = "weights.bin";
inline constexpr const char* kTarget = "target.json";
inline constexpr const char* kProgram = "program.json";
inline constexpr const char* kSolverLog = "solver.log";
}  // namespace artifact_files

/// (file name, contents) for every file of a compiled model, sorted by name.
std::vector<std::pair<std::string, std::string>> artifact_contents(const CompiledModel& m);

/// Writes artifact_contents into `dir`, creating it if needed.
void write_artifact(const std::filesystem::path& dir, const CompiledModel& m);

struct LoadedArtifact {
  Graph graph;
  Program program;
  TargetDescription target;
};

/// Reads an artifact directory; the manifest's placement overrides the
/// program's. Throws ParseError on missing files, malformed contents or
/// manifest symbols that do not match the program.
LoadedArtifact load_artifact(const std::filesystem::path& dir);

/// Applies manifest offsets and sizes to `p`.
void apply_manifest(Program& p, const std::string& manifest);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& contents);

}  // namespace tinydeploy
