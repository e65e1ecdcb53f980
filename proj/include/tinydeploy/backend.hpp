// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0
//
// C code generation from the schedule IR.

#pragma once

#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tinydeploy/ir.hpp"
#include "tinydeploy/program.hpp"
#include "tinydeploy/target.hpp"

namespace tinydeploy {

/// A name referenced in a segment as `${name}`, with the C expression it
/// is bound to (empty while unbound).
struct FreeVar {
  std::string name;
  std::string type;
  std::string binding;
};

struct CodeSegment {
  std::string text;
  std::vector<FreeVar> vars;
  std::vector<std::string> hoisted;  // definitions placed at file scope
  std::vector<std::string> passes;   // applied so far

  /// Names of the vars in order of first appearance in `text`.
  std::vector<std::string> first_use() const;
  const FreeVar* find(const std::string& name) const;
  /// `text` with every var replaced by its binding. Throws Error naming
  /// the first unbound var.
  std::string render() const;
};

struct Closure {
  std::string function;
  std::string env_type;      // empty when nothing is captured
  std::vector<FreeVar> env;  // captured vars, first-use order
  std::string definition;
  std::string invocation;
};

/// Hoists `seg` into `function`. Vars bound to a name in `globals` are
/// referenced directly; the rest are captured. With a nonempty `engine`
/// the invocation offloads and waits, otherwise it calls directly.
Closure make_closure(const CodeSegment& seg, const std::set<std::string>& globals, const std::string& function,
                     const std::string& engine = "");

/// Symbols the emitter gives to the program's allocations.
struct EmitNames {
  std::string prefix;
  std::vector<std::string> allocation;  // per Program::allocations
  std::set<std::string> globals;
};

EmitNames emit_names(const Program& p);

/// Code for one program step after the kernel's pass list.
CodeSegment gen_node_code(const Graph& g, const Program& p, int step, const TargetDescription& t,
                          const EmitNames& names);

struct SourceArtifact {
  std::string name;
  std::string entry;  // <name>_run
  std::string init;   // <name>_init
  std::string source;
  std::string runtime_header;
  std::string manifest;
  std::vector<std::pair<std::string, int64_t>> arenas;  // level, bytes

  /// (file name, contents) of the three emitted files.
  std::vector<std::pair<std::string, std::string>> files() const;
};

/// Emits portable C for `p`. Output depends only on the arguments.
SourceArtifact emit(const Graph& g, const Program& p, const TargetDescription& t);

}  // namespace tinydeploy
