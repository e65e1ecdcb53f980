// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Kernel registry: reference integer semantics, C templates, scratch sizes
// and tiling constraints for every (operator, engine, type signature).

#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tinydeploy/ir.hpp"
#include "tinydeploy/target.hpp"
#include "tinydeploy/tensor.hpp"

namespace tinydeploy {

// ---------------------------------------------------------------------------
// Reference integer kernels

/// y = sat8(zp + round_half_away(v * mul / 2^shift))
struct Requant {
  int32_t mul = 1;
  int32_t shift = 0;
  int32_t zp = 0;

  int8_t apply(int64_t v) const;
  static Requant from_attrs(const Node& n);
};

int8_t saturate_int8(int64_t v);
int64_t round_half_away_shift(int64_t v, int shift);

/// floor(sqrt(n)) by Newton iteration from a bit-length guess.
int64_t isqrt_newton(int64_t n);

struct GemmDims {
  int64_t batch = 1;
  int64_t m = 1, n = 1, o = 1;
  bool batched_b = false;  // B carries the batch dimension
  bool trans_b = false;    // B stored O x N
};

/// Y[m,o] = sat8(zp + rha((sum_n A[m,n] * B[n,o] + C[o]) * mul / 2^shift)).
/// `bias` is empty, [O] or [M x O].
std::vector<int8_t> ref_gemm_q8(std::span<const int8_t> a, std::span<const int8_t> b,
                                std::span<const int32_t> bias, const GemmDims& dims,
                                const Requant& rq);

/// Unrequantized accumulators of the same product.
std::vector<int32_t> ref_gemm_i32(std::span<const int8_t> a, std::span<const int8_t> b,
                                  std::span<const int32_t> bias, const GemmDims& dims);

struct SoftmaxParams {
  int64_t ln2_q = 1;   // floor(ln 2 / S)
  int64_t b_q = 0;     // floor(b / S)
  int64_t c_q = 0;     // floor(c / (a S^2))
  int out_bits = 7;
  bool causal = false;
  int64_t causal_offset = 0;    // row i may see columns j <= i + offset
  int64_t rows_per_matrix = 0;  // causal row index is row % rows_per_matrix (0: no wrap)
};

/// Left shift applied to the polynomial before the 2^-z scaling.
inline constexpr int kSoftmaxExpShift = 15;
/// Inputs equal to this value are treated as masked (probability zero).
inline constexpr int8_t kSoftmaxMasked = -128;

/// Integer-only softmax over the innermost axis of a rows x d tensor.
std::vector<int8_t> ref_softmax_ibert(std::span<const int8_t> x, int64_t rows, int64_t d,
                                      const SoftmaxParams& p);

/// One row's exponentials as used by the normalization (exposed for tests).
std::vector<int64_t> softmax_row_exps(std::span<const int8_t> row, int64_t row_index,
                                      const SoftmaxParams& p);

struct RmsNormParams {
  int32_t eps_q = 1;
  int k = 16;
  Requant rq;
};

std::vector<int8_t> ref_rmsnorm_i32(std::span<const int8_t> x, int64_t rows, int64_t d,
                                    std::span<const int8_t> weight, const RmsNormParams& p);

/// Rotary embedding over x[S x h x dh] with Q15 tables of shape rows x dh/2.
std::vector<int8_t> ref_rope_q(std::span<const int8_t> x, int64_t s, int64_t h, int64_t dh,
                               std::span<const int16_t> cos_t, std::span<const int16_t> sin_t,
                               int64_t table_rows, int64_t pos, const Requant& rq);

std::vector<int8_t> ref_add_requant(std::span<const int8_t> a, std::span<const int8_t> b,
                                    const Requant& rq);
std::vector<int8_t> ref_mul_requant(std::span<const int8_t> a, std::span<const int8_t> b,
                                    const Requant& rq);
std::vector<int8_t> ref_hardswish_q(std::span<const int8_t> x, int32_t three, int32_t six,
                                    const Requant& rq);
std::vector<int8_t> ref_requant(std::span<const int32_t> x, const Requant& rq);

Tensor ref_transpose(const Tensor& x, std::span<const int64_t> perm);
Tensor ref_gather_rows(const Tensor& table, std::span<const int32_t> idx);
Tensor ref_concat_seq(const Tensor& a, const Tensor& b);

/// Evaluates one node on whole operand tensors.
Tensor evaluate_node(const Node& node, std::span<const Tensor> inputs);

/// Node rewritten to compute the output tile `out_region` from dense input
/// tiles (attributes that depend on absolute positions are rebased).
Node specialize_for_tile(const Node& node, const Region& out_region,
                         std::span<const Shape> input_tile_shapes);

// ---------------------------------------------------------------------------
// Tiling constraints

/// Operand index (inputs first, then outputs) and dimension.
struct DimRef {
  int operand = 0;
  int dim = 0;
  friend bool operator==(const DimRef&, const DimRef&) = default;
  friend auto operator<=>(const DimRef&, const DimRef&) = default;
};

struct TileConstraintSpec {
  struct Geometric {
    std::vector<std::pair<DimRef, DimRef>> equal;  // (input dim, output dim)
    std::vector<DimRef> untileable;
  } geometric;
  struct Platform {
    struct Divisible {
      DimRef ref;
      int64_t multiple;
    };
    struct Bounds {
      DimRef ref;
      int64_t min;
      int64_t max;
    };
    std::vector<Divisible> divisible;  // tile % multiple == 0 unless full extent
    std::vector<Bounds> bounds;
  } platform;

  bool is_untileable(DimRef r) const;
  /// Output dimension linked to input dimension `r`, if any.
  std::optional<DimRef> link_of(DimRef r) const;
};

/// bytes = coef * product of the referenced tile extents
struct SizeExpr {
  int64_t coef = 0;
  std::vector<DimRef> dims;
};

struct KernelSignature {
  std::string op;
  std::string engine;
  std::vector<DataType> inputs;
  std::vector<DataType> outputs;
  std::string predicate_name;  // empty: none
  std::function<bool(const Node&, const Graph&)> predicate;
};

/// How a template hole is filled at emission time.
struct KernelArg {
  enum class Kind { Operand, TileExtent, TileOrigin, TileProduct, Attr, Literal };
  std::string hole;
  Kind kind = Kind::Literal;
  DimRef ref;             // Operand uses ref.operand only
  int dim_end = 0;        // TileProduct multiplies extents of dims [ref.dim, dim_end)
  std::string attr;       // Attr
  std::string literal;    // Literal
};

struct KernelTemplate {
  std::string id;  // "<engine>.<op>[.<variant>]"
  KernelSignature signature;
  std::string c_function;
  std::string text;
  std::vector<KernelArg> args;
  std::function<SizeExpr(const Node&, std::span<const Shape>)> transient_size;
  std::vector<std::string> passes;
  std::function<TileConstraintSpec(const Node&, std::span<const Shape>)> constraints;
};

/// Ordered kernel list; order equals engine preference.
class KernelRegistry {
 public:
  std::vector<KernelTemplate> kernels;

  const KernelTemplate* find(const std::string& id) const;
  /// First kernel whose signature matches; nullptr if none.
  const KernelTemplate* match(const Node& node, const Graph& g,
                              std::span<const DataType> input_types) const;
};

/// Registry for the engines of `t`, in `engine_prefs` order. Engines absent
/// from the target are skipped; an empty preference list means all engines
/// in declaration order.
KernelRegistry build_registry(const TargetDescription& t, std::span<const std::string> engine_prefs);

/// Tiling constraints of `kernel` for `node` whose operands have `shapes`.
TileConstraintSpec tile_constraints_for(const KernelTemplate& kernel, const Node& node,
                                        std::span<const Shape> shapes);

/// Per-node fill list for the kernel template holes. An Operand argument
/// with operand -1 is the node's scratch buffer.
std::vector<KernelArg> kernel_args(const Node& node, std::span<const Shape> shapes);

/// Scratch bytes for the given operand tile shapes.
int64_t evaluate_size(const SizeExpr& e, std::span<const Shape> tile_shapes);

}  // namespace tinydeploy
