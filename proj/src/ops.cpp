// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tinydeploy/ops.hpp"

#include <algorithm>
#include <array>
#include <numeric>

namespace tinydeploy {

namespace {

const std::vector<std::string> kRequantAttrs = {"mul", "shift", "zp"};

std::vector<std::string> with_requant(std::vector<std::string> attrs) {
  attrs.insert(attrs.end(), kRequantAttrs.begin(), kRequantAttrs.end());
  return attrs;
}

[[noreturn]] void fail(const Node& n, const std::string& msg) {
  throw ValidationError("node '" + n.name + "' (" + n.op + "): " + msg);
}

void check_requant_attrs(const Node& n) {
  int64_t shift = n.attr_int("shift");
  if (shift < 0 || shift > 31) fail(n, "shift " + std::to_string(shift) + " outside [0, 31]");
  int64_t zp = n.attr_int("zp");
  if (zp < -128 || zp > 127) fail(n, "zero point outside int8 range");
}

// Shapes of a (possibly batched) matrix product: returns {batch, M, N, O};
// batch is 1 for rank-2 operands.
std::array<int64_t, 4> gemm_dims(const Node& n, const Shape& a, const Shape& b) {
  const bool trans_b = n.attr_int("trans_b", 0) != 0;
  if (a.size() != 2 && a.size() != 3) fail(n, "A must be rank 2 or 3");
  if (b.size() != 2 && b.size() != 3) fail(n, "B must be rank 2 or 3");
  if (a.size() == 2 && b.size() == 3) fail(n, "batched B needs batched A");
  const int64_t batch = a.size() == 3 ? a[0] : 1;
  const int64_t m = a[a.size() - 2], k = a[a.size() - 1];
  if (b.size() == 3 && b[0] != batch) fail(n, "batch mismatch between A and B");
  const int64_t bk = trans_b ? b[b.size() - 1] : b[b.size() - 2];
  const int64_t o = trans_b ? b[b.size() - 2] : b[b.size() - 1];
  if (bk != k) fail(n, "reduction extent mismatch: A " + shape_str(a) + ", B " + shape_str(b));
  return {batch, m, k, o};
}

}  // namespace

const std::vector<OpSchema>& op_schemas() {
  static const std::vector<OpSchema> schemas = {
      {ops::kGemm, 2, 3, 1, {}, {"trans_b"}},
      {ops::kRequant, 1, 1, 1, kRequantAttrs, {}},
      {ops::kGemmQ8, 2, 3, 1, kRequantAttrs, {"trans_b"}},
      {ops::kPwConv, 2, 3, 1, with_requant({"H", "W", "C_in", "C_out"}), {}},
      {ops::kSoftmax, 1, 1, 1, {"axis", "ln2_q", "b_q", "c_q", "out_bits"},
       {"causal", "causal_offset"}},
      {ops::kRmsNorm, 2, 2, 1, with_requant({"eps_q", "k"}), {}},
      {ops::kRope, 3, 3, 1, with_requant({"pos"}), {}},
      {ops::kAddRequant, 2, 2, 1, kRequantAttrs, {}},
      {ops::kMulRequant, 2, 2, 1, kRequantAttrs, {}},
      {ops::kHardswish, 1, 1, 1, with_requant({"three", "six"}), {}},
      {ops::kTranspose, 1, 1, 1, {"perm"}, {}},
      {ops::kGatherRows, 2, 2, 1, {}, {}},
      {ops::kConcatSeq, 2, 2, 1, {}, {}},
      {ops::kReshape, 1, 1, 1, {"shape"}, {}},
  };
  return schemas;
}

const OpSchema* find_op_schema(const std::string& op) {
  for (const auto& s : op_schemas())
    if (s.op == op) return &s;
  return nullptr;
}

std::vector<Shape> infer_output_shapes(const Node& n, const std::vector<Shape>& in) {
  const std::string& op = n.op;
  if (op == ops::kGemm || op == ops::kGemmQ8) {
    if (op == ops::kGemmQ8) check_requant_attrs(n);
    auto [batch, m, k, o] = gemm_dims(n, in[0], in[1]);
    if (in.size() == 3) {
      const Shape& c = in[2];
      bool ok = (c.size() == 1 && c[0] == o) || (c.size() == 2 && c[0] == m && c[1] == o);
      if (!ok) fail(n, "bias " + shape_str(c) + " is neither [O] nor [M x O]");
    }
    if (in[0].size() == 3) return {{batch, m, o}};
    return {{m, o}};
  }
  if (op == ops::kRequant || op == ops::kHardswish) {
    check_requant_attrs(n);
    return {in[0]};
  }
  if (op == ops::kPwConv) {
    check_requant_attrs(n);
    const Shape& a = in[0];
    const Shape& w = in[1];
    const int64_t h = n.attr_int("H"), width = n.attr_int("W");
    const int64_t cin = n.attr_int("C_in"), cout = n.attr_int("C_out");
    if (h != 1) fail(n, "only H = 1 is supported");
    if (a != Shape{width, cin}) fail(n, "input " + shape_str(a) + " does not match W x C_in");
    if (w != Shape{cout, 1, 1, cin}) fail(n, "weight " + shape_str(w) + " is not C_out x 1 x 1 x C_in");
    if (in.size() == 3 && in[2] != Shape{cout}) fail(n, "bias must be [C_out]");
    return {{width, cout}};
  }
  if (op == ops::kSoftmax) {
    const int64_t axis = n.attr_int("axis");
    const int64_t rank = static_cast<int64_t>(in[0].size());
    if (axis < 0 || axis >= rank) fail(n, "axis out of range");
    if (axis != rank - 1) fail(n, "softmax reduces over the innermost axis only");
    if (n.attr_int("causal", 0) && rank < 2) fail(n, "causal mask needs rank >= 2");
    const int64_t bits = n.attr_int("out_bits");
    if (bits < 1 || bits > 7) fail(n, "out_bits must lie in [1, 7]");
    if (n.attr_int("ln2_q") <= 0) fail(n, "ln2_q must be positive");
    return {in[0]};
  }
  if (op == ops::kRmsNorm) {
    check_requant_attrs(n);
    const int64_t d = in[0].back();
    if (in[1] != Shape{d}) fail(n, "weight must be [D]");
    if (d > (int64_t{1} << 15)) fail(n, "normalized extent exceeds 2^15");
    if (n.attr_int("eps_q") <= 0) fail(n, "eps_q must be positive");
    const int64_t k = n.attr_int("k");
    if (k < 0 || k > 16) fail(n, "k must lie in [0, 16]");
    return {in[0]};
  }
  if (op == ops::kRope) {
    check_requant_attrs(n);
    const Shape& x = in[0];
    if (x.size() != 3) fail(n, "input must be S x h x d_h");
    if (x[2] % 2) fail(n, "odd head dimension");
    for (int t = 1; t <= 2; ++t) {
      if (in[t].size() != 2 || in[t][1] != x[2] / 2) fail(n, "table must be rows x d_h/2");
      if (in[t][0] < n.attr_int("pos") + x[0]) fail(n, "table underrun");
    }
    if (n.attr_int("pos") < 0) fail(n, "negative position offset");
    return {x};
  }
  if (op == ops::kAddRequant || op == ops::kMulRequant) {
    check_requant_attrs(n);
    if (in[0] != in[1]) fail(n, "operand shapes differ: " + shape_str(in[0]) + " vs " + shape_str(in[1]));
    return {in[0]};
  }
  if (op == ops::kTranspose) {
    auto perm = n.attr_list("perm");
    const Shape& x = in[0];
    if (perm.size() != x.size()) fail(n, "permutation rank mismatch");
    std::vector<int64_t> sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    for (size_t i = 0; i < sorted.size(); ++i)
      if (sorted[i] != static_cast<int64_t>(i)) fail(n, "invalid permutation");
    Shape out(x.size());
    for (size_t i = 0; i < perm.size(); ++i) out[i] = x[perm[i]];
    return {out};
  }
  if (op == ops::kGatherRows) {
    if (in[0].size() != 2) fail(n, "table must be rank 2");
    if (in[1].size() != 1) fail(n, "indices must be rank 1");
    return {{in[1][0], in[0][1]}};
  }
  if (op == ops::kConcatSeq) {
    const Shape& a = in[0];
    const Shape& b = in[1];
    if (a.size() != b.size() || !std::equal(a.begin() + 1, a.end(), b.begin() + 1))
      fail(n, "shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
    Shape out = a;
    out[0] += b[0];
    return {out};
  }
  if (op == ops::kReshape) {
    Shape out = n.attr_list("shape");
    if (num_elements(out) != num_elements(in[0])) fail(n, "element count changes");
    return {out};
  }
  fail(n, "unknown op");
}

DataType infer_output_dtype(const Node& n, const std::vector<DataType>& in) {
  const std::string& op = n.op;
  if (op == ops::kGemm) return dtypes::kInt32;
  if (op == ops::kTranspose || op == ops::kReshape || op == ops::kConcatSeq) return in.at(0);
  if (op == ops::kGatherRows) return in.at(0);
  return dtypes::kInt8;
}

int64_t op_work(const Node& n, const std::vector<Shape>& in, const std::vector<Shape>& out) {
  if (n.op == ops::kGemm || n.op == ops::kGemmQ8) {
    auto [batch, m, k, o] = gemm_dims(n, in[0], in[1]);
    return batch * m * k * o;
  }
  if (n.op == ops::kPwConv) return in[0][0] * in[0][1] * in[1][0];
  if (n.op == ops::kSoftmax) return num_elements(in[0]);
  return num_elements(out.at(0));
}

}  // namespace tinydeploy
