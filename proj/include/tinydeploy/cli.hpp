// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver: compile, run and generate.

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace tinydeploy {

/// Process exit codes.
enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitUsage = 2,
  kExitParse = 3,       // unreadable or invalid graph, target, artifact or inputs
  kExitInfeasible = 4,  // no tiling fits the memory levels
  kExitSim = 5,         // simulator detected a memory violation
};

/// Runs one command. `args` excludes the program name. Verbosity comes
/// from TINYDEPLOY_LOG (quiet, info or debug; default info).
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tinydeploy
