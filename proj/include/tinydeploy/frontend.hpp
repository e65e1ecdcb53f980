// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Pattern-based lowering passes, memory-level annotation, type inference
// and kernel selection.

#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "tinydeploy/ir.hpp"
#include "tinydeploy/kernels.hpp"
#include "tinydeploy/target.hpp"

namespace tinydeploy {

/// Raised when a buffer or a level's contents cannot fit.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

/// One link of a chain pattern. Step k+1 must read the single output of
/// step k; intermediate outputs must have no other reader and must not be
/// graph outputs.
struct PatternStep {
  std::string op;
  std::function<bool(const Node&, const Graph&)> predicate;  // optional
};

struct Pass {
  std::string name;
  std::vector<PatternStep> pattern;
  /// Rewrites the matched chain (node indices, in chain order). Returns
  /// false to decline the match.
  std::function<bool(Graph&, const std::vector<int>&)> replace;
};

/// Finds the first match of `pass` in schedule order; empty if none.
/// Matches listed in `declined` are skipped.
std::vector<int> find_match(const Graph& g, const Pass& pass,
                            const std::vector<std::vector<std::string>>& declined = {});

/// Applies each pass to a fixed point, in list order.
Graph apply_passes(const Graph& g, const std::vector<Pass>& passes);

/// gemm + requant into gemm_q8.
Pass fuse_gemm_requant_pass();
/// GEMM with constant B and a row-broadcast bias into a pointwise convolution.
Pass gemm_to_pointwise_pass();
/// Row-major B gets an explicit transpose; the GEMM switches to trans_b = 1.
Pass insert_transpose_b_pass();
/// Transposes of constants are evaluated at compile time.
Pass fold_constant_transpose_pass();

Graph gemm_to_pointwise(const Graph& g);

// ---------------------------------------------------------------------------
// Type inference and kernel selection

struct NodeBinding {
  KernelTemplate kernel;
  std::string engine;
};

struct Binding {
  std::vector<NodeBinding> nodes;           // indexed like Graph::nodes
  std::map<std::string, DataType> types;    // every buffer
};

/// Forward sweep in schedule order picking the first matching signature.
/// `input_types` overrides the graph-input dtype hints. Only kernels of
/// engines in `engine_prefs` are considered (all when empty).
Binding infer_types_select_kernels(const Graph& g, const KernelRegistry& reg,
                                   const std::map<std::string, DataType>& input_types,
                                   const std::vector<std::string>& engine_prefs);

/// Copies the resolved types into the buffers.
void apply_types(Graph& g, const Binding& b);

enum class AnnotationPolicy { NoNms, NmsWeights };

const char* to_string(AnnotationPolicy p);

/// Assigns a level to every buffer. With NmsWeights, constant weights of
/// pointwise convolutions bound to a conv-npu go to the level only that
/// engine can reach. Throws InfeasibleError if a buffer exceeds its level.
Graph annotate_memory_levels(const Graph& g, const TargetDescription& t, AnnotationPolicy policy,
                             const Binding& binding);

}  // namespace tinydeploy
