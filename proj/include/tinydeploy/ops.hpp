// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Operator schemas: arity, attributes and static shape rules.

#pragma once

#include <string>
#include <vector>

#include "tinydeploy/ir.hpp"

namespace tinydeploy {

namespace ops {
inline constexpr const char* kGemm = "gemm";
inline constexpr const char* kRequant = "requant";
inline constexpr const char* kGemmQ8 = "gemm_q8";
inline constexpr const char* kPwConv = "pwconv";
inline constexpr const char* kSoftmax = "softmax";
inline constexpr const char* kRmsNorm = "rmsnorm";
inline constexpr const char* kRope = "rope";
inline constexpr const char* kAddRequant = "add_requant";
inline constexpr const char* kMulRequant = "mul_requant";
inline constexpr const char* kHardswish = "hardswish_q";
inline constexpr const char* kTranspose = "transpose";
inline constexpr const char* kGatherRows = "gather_rows";
inline constexpr const char* kConcatSeq = "concat_seq";
inline constexpr const char* kReshape = "reshape";
}  // namespace ops

struct OpSchema {
  std::string op;
  int min_inputs = 1;
  int max_inputs = 1;
  int outputs = 1;
  std::vector<std::string> required_attrs;
  std::vector<std::string> optional_attrs;
};

const std::vector<OpSchema>& op_schemas();
const OpSchema* find_op_schema(const std::string& op);

/// Output shapes implied by the input shapes and attributes. Throws
/// ValidationError with the node name on any inconsistency.
std::vector<Shape> infer_output_shapes(const Node& node, const std::vector<Shape>& inputs);

/// Output data type implied by the input types (operators are not
/// polymorphic in their outputs except for pure data movement).
DataType infer_output_dtype(const Node& node, const std::vector<DataType>& inputs);

/// Multiply-accumulates (matrix kernels) or output elements (everything
/// else) performed by one invocation over the given operand shapes.
int64_t op_work(const Node& node, const std::vector<Shape>& inputs,
                const std::vector<Shape>& outputs);

}  // namespace tinydeploy
