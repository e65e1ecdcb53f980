// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tinydeploy/kernels.hpp"

#include <algorithm>
#include <bit>
#include <limits>

#include "tinydeploy/ops.hpp"

namespace tinydeploy {

// ---------------------------------------------------------------------------
// Arithmetic primitives

int8_t saturate_int8(int64_t v) { return static_cast<int8_t>(std::clamp<int64_t>(v, -128, 127)); }

int64_t round_half_away_shift(int64_t v, int shift) {
  if (shift == 0) return v;
  const int64_t half = int64_t{1} << (shift - 1);
  return v >= 0 ? (v + half) >> shift : -((-v + half) >> shift);
}

int8_t Requant::apply(int64_t v) const {
  return saturate_int8(zp + round_half_away_shift(v * mul, shift));
}

Requant Requant::from_attrs(const Node& n) {
  return Requant{static_cast<int32_t>(n.attr_int("mul")), static_cast<int32_t>(n.attr_int("shift")),
                 static_cast<int32_t>(n.attr_int("zp"))};
}

int64_t isqrt_newton(int64_t n) {
  if (n < 0) throw Error("isqrt of a negative number");
  if (n == 0) return 0;
  const int bits = std::bit_width(static_cast<uint64_t>(n));
  int64_t x = int64_t{1} << ((bits + 1) / 2);
  for (int i = 0; i < 4; ++i) x = (x + n / x) / 2;
  // Integer Newton can settle one above the root (n = m^2 - 1 alternates).
  if (x * x > n) --x;
  return x;
}

// ---------------------------------------------------------------------------
// Reference kernels

std::vector<int32_t> ref_gemm_i32(std::span<const int8_t> a, std::span<const int8_t> b,
                                  std::span<const int32_t> bias, const GemmDims& d) {
  const int64_t a_size = d.batch * d.m * d.n;
  const int64_t b_size = (d.batched_b ? d.batch : 1) * d.n * d.o;
  if (static_cast<int64_t>(a.size()) != a_size || static_cast<int64_t>(b.size()) != b_size)
    throw Error("gemm: operand sizes do not match dimensions");
  const bool bias_rows = static_cast<int64_t>(bias.size()) == d.m * d.o && d.m != 1;
  if (!bias.empty() && !bias_rows && static_cast<int64_t>(bias.size()) != d.o)
    throw Error("gemm: bias is neither [O] nor [M x O]");
  std::vector<int32_t> y(static_cast<size_t>(d.batch * d.m * d.o));
  for (int64_t bt = 0; bt < d.batch; ++bt) {
    const int8_t* ab = a.data() + bt * d.m * d.n;
    const int8_t* bb = b.data() + (d.batched_b ? bt * d.n * d.o : 0);
    for (int64_t i = 0; i < d.m; ++i)
      for (int64_t j = 0; j < d.o; ++j) {
        int32_t acc = 0;
        for (int64_t k = 0; k < d.n; ++k) {
          const int8_t bv = d.trans_b ? bb[j * d.n + k] : bb[k * d.o + j];
          acc += static_cast<int32_t>(ab[i * d.n + k]) * bv;
        }
        if (!bias.empty()) acc += bias_rows ? bias[i * d.o + j] : bias[j];
        y[(bt * d.m + i) * d.o + j] = acc;
      }
  }
  return y;
}

std::vector<int8_t> ref_gemm_q8(std::span<const int8_t> a, std::span<const int8_t> b,
                                std::span<const int32_t> bias, const GemmDims& dims,
                                const Requant& rq) {
  if (rq.shift < 0 || rq.shift > 31) throw Error("gemm_q8: shift out of range");
  auto acc = ref_gemm_i32(a, b, bias, dims);
  std::vector<int8_t> y(acc.size());
  for (size_t i = 0; i < acc.size(); ++i) y[i] = rq.apply(acc[i]);
  return y;
}

std::vector<int64_t> softmax_row_exps(std::span<const int8_t> row, int64_t row_index,
                                      const SoftmaxParams& p) {
  const int64_t d = static_cast<int64_t>(row.size());
  std::vector<int64_t> e(static_cast<size_t>(d), 0);
  auto visible = [&](int64_t j) {
    if (row[j] == kSoftmaxMasked) return false;
    return !(p.causal && j > row_index + p.causal_offset);
  };
  int64_t max = std::numeric_limits<int64_t>::min();
  for (int64_t j = 0; j < d; ++j)
    if (visible(j)) max = std::max<int64_t>(max, row[j]);
  if (max == std::numeric_limits<int64_t>::min()) return e;
  for (int64_t j = 0; j < d; ++j) {
    if (!visible(j)) continue;
    const int64_t q = row[j] - max;          // <= 0
    const int64_t z = -q / p.ln2_q;          // ln 2 range decomposition
    const int64_t r = q + z * p.ln2_q;       // in (-ln2_q, 0]
    const int64_t poly = (r + p.b_q) * (r + p.b_q) + p.c_q;
    const int64_t shift = kSoftmaxExpShift - z;
    if (shift >= 0) {
      e[j] = poly << shift;
    } else {
      e[j] = -shift >= 63 ? 0 : poly >> -shift;
    }
  }
  return e;
}

std::vector<int8_t> ref_softmax_ibert(std::span<const int8_t> x, int64_t rows, int64_t d,
                                      const SoftmaxParams& p) {
  if (rows * d != static_cast<int64_t>(x.size())) throw Error("softmax: size mismatch");
  if (p.ln2_q <= 0) throw Error("softmax: ln2_q must be positive");
  const int64_t top = (int64_t{1} << p.out_bits) - 1;
  std::vector<int8_t> y(x.size(), 0);
  for (int64_t r = 0; r < rows; ++r) {
    const int64_t row_index = p.rows_per_matrix > 0 ? r % p.rows_per_matrix : r;
    auto e = softmax_row_exps(x.subspan(r * d, d), row_index, p);
    int64_t sum = 0;
    for (int64_t v : e) sum += v;
    if (sum == 0) continue;
    for (int64_t j = 0; j < d; ++j) y[r * d + j] = static_cast<int8_t>(e[j] * top / sum);
  }
  return y;
}

std::vector<int8_t> ref_rmsnorm_i32(std::span<const int8_t> x, int64_t rows, int64_t d,
                                    std::span<const int8_t> weight, const RmsNormParams& p) {
  if (d > (int64_t{1} << 15)) throw Error("rmsnorm: normalized extent exceeds 2^15");
  if (rows * d != static_cast<int64_t>(x.size()) || static_cast<int64_t>(weight.size()) != d)
    throw Error("rmsnorm: size mismatch");
  if (p.eps_q <= 0) throw Error("rmsnorm: eps_q must be positive");
  std::vector<int8_t> y(x.size());
  for (int64_t r = 0; r < rows; ++r) {
    const int8_t* row = x.data() + r * d;
    int32_t sum_sq = 0;
    for (int64_t i = 0; i < d; ++i) sum_sq += static_cast<int32_t>(row[i]) * row[i];
    const int32_t mean = sum_sq / static_cast<int32_t>(d);
    const auto rms = static_cast<int32_t>(isqrt_newton(static_cast<int64_t>(mean) + p.eps_q));
    for (int64_t i = 0; i < d; ++i) {
      const int32_t num = static_cast<int32_t>(row[i]) * weight[i] * (int32_t{1} << p.k);
      y[r * d + i] = p.rq.apply(num / rms);
    }
  }
  return y;
}

std::vector<int8_t> ref_rope_q(std::span<const int8_t> x, int64_t s, int64_t h, int64_t dh,
                               std::span<const int16_t> cos_t, std::span<const int16_t> sin_t,
                               int64_t table_rows, int64_t pos, const Requant& rq) {
  if (dh % 2) throw Error("rope: odd head dimension");
  const int64_t half = dh / 2;
  if (table_rows < pos + s || static_cast<int64_t>(cos_t.size()) < table_rows * half ||
      static_cast<int64_t>(sin_t.size()) < table_rows * half)
    throw Error("rope: table underrun");
  if (static_cast<int64_t>(x.size()) != s * h * dh) throw Error("rope: size mismatch");
  std::vector<int8_t> y(x.size());
  for (int64_t t = 0; t < s; ++t)
    for (int64_t hh = 0; hh < h; ++hh)
      for (int64_t i = 0; i < half; ++i) {
        const int64_t base = (t * h + hh) * dh + 2 * i;
        const int32_t c = cos_t[(pos + t) * half + i];
        const int32_t sn = sin_t[(pos + t) * half + i];
        const int32_t x0 = x[base], x1 = x[base + 1];
        y[base] = rq.apply(x0 * c - x1 * sn);
        y[base + 1] = rq.apply(x0 * sn + x1 * c);
      }
  return y;
}

std::vector<int8_t> ref_add_requant(std::span<const int8_t> a, std::span<const int8_t> b,
                                    const Requant& rq) {
  if (a.size() != b.size()) throw Error("add_requant: shape mismatch");
  std::vector<int8_t> y(a.size());
  for (size_t i = 0; i < a.size(); ++i) y[i] = rq.apply(static_cast<int32_t>(a[i]) + b[i]);
  return y;
}

std::vector<int8_t> ref_mul_requant(std::span<const int8_t> a, std::span<const int8_t> b,
                                    const Requant& rq) {
  if (a.size() != b.size()) throw Error("mul_requant: shape mismatch");
  std::vector<int8_t> y(a.size());
  for (size_t i = 0; i < a.size(); ++i) y[i] = rq.apply(static_cast<int32_t>(a[i]) * b[i]);
  return y;
}

std::vector<int8_t> ref_hardswish_q(std::span<const int8_t> x, int32_t three, int32_t six,
                                    const Requant& rq) {
  std::vector<int8_t> y(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const int32_t gate = std::clamp<int32_t>(x[i] + three, 0, six);
    y[i] = rq.apply(static_cast<int32_t>(x[i]) * gate);
  }
  return y;
}

std::vector<int8_t> ref_requant(std::span<const int32_t> x, const Requant& rq) {
  std::vector<int8_t> y(x.size());
  for (size_t i = 0; i < x.size(); ++i) y[i] = rq.apply(x[i]);
  return y;
}

Tensor ref_transpose(const Tensor& x, std::span<const int64_t> perm) {
  const size_t rank = x.shape.size();
  if (perm.size() != rank) throw Error("transpose: permutation rank mismatch");
  std::vector<bool> seen(rank, false);
  for (int64_t p : perm) {
    if (p < 0 || p >= static_cast<int64_t>(rank) || seen[p]) throw Error("transpose: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(rank);
  for (size_t i = 0; i < rank; ++i) out_shape[i] = x.shape[perm[i]];
  Tensor y(out_shape, x.dtype);
  const auto in_strides = strides_of(x.shape);
  const int64_t eb = x.dtype.bytes();
  std::vector<int64_t> idx(rank, 0);
  for (int64_t o = 0; o < y.elements(); ++o) {
    int64_t src = 0;
    for (size_t i = 0; i < rank; ++i) src += idx[i] * in_strides[perm[i]];
    std::copy_n(x.data.begin() + src * eb, eb, y.data.begin() + o * eb);
    for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return y;
}

Tensor ref_gather_rows(const Tensor& table, std::span<const int32_t> idx) {
  if (table.shape.size() != 2) throw Error("gather_rows: table must be rank 2");
  const int64_t rows = table.shape[0], width = table.shape[1];
  const int64_t row_bytes = width * table.dtype.bytes();
  Tensor y({static_cast<int64_t>(idx.size()), width}, table.dtype);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= rows)
      throw Error("gather_rows: index " + std::to_string(idx[i]) + " outside table");
    std::copy_n(table.data.begin() + idx[i] * row_bytes, row_bytes, y.data.begin() + i * row_bytes);
  }
  return y;
}

Tensor ref_concat_seq(const Tensor& a, const Tensor& b) {
  if (a.shape.size() != b.shape.size() || !std::equal(a.shape.begin() + 1, a.shape.end(), b.shape.begin() + 1) ||
      a.dtype != b.dtype)
    throw Error("concat_seq: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Shape s = a.shape;
  s[0] += b.shape[0];
  Tensor y(s, a.dtype);
  std::copy(a.data.begin(), a.data.end(), y.data.begin());
  std::copy(b.data.begin(), b.data.end(), y.data.begin() + static_cast<int64_t>(a.data.size()));
  return y;
}

namespace {

template <typename T>
std::vector<T> typed(const Tensor& t) {
  std::vector<T> v(static_cast<size_t>(t.elements()));
  for (int64_t i = 0; i < t.elements(); ++i) v[i] = static_cast<T>(t.get(i));
  return v;
}

template <typename T>
Tensor make(Shape s, DataType dt, const std::vector<T>& v) {
  return Tensor::from_values<T>(std::move(s), dt, std::span<const T>(v));
}

GemmDims gemm_dims_of(const Node& n, const Shape& a, const Shape& b) {
  GemmDims d;
  d.trans_b = n.attr_int("trans_b", 0) != 0;
  d.batch = a.size() == 3 ? a[0] : 1;
  d.m = a[a.size() - 2];
  d.n = a[a.size() - 1];
  d.batched_b = b.size() == 3;
  d.o = d.trans_b ? b[b.size() - 2] : b[b.size() - 1];
  return d;
}

SoftmaxParams softmax_params_of(const Node& n, const Shape& x) {
  SoftmaxParams p;
  p.ln2_q = n.attr_int("ln2_q");
  p.b_q = n.attr_int("b_q");
  p.c_q = n.attr_int("c_q");
  p.out_bits = static_cast<int>(n.attr_int("out_bits"));
  p.causal = n.attr_int("causal", 0) != 0;
  p.causal_offset = n.attr_int("causal_offset", 0);
  p.rows_per_matrix = x.size() >= 2 ? x[x.size() - 2] : 0;
  return p;
}

}  // namespace

Tensor evaluate_node(const Node& n, std::span<const Tensor> in) {
  std::vector<Shape> shapes;
  for (const auto& t : in) shapes.push_back(t.shape);
  const Shape out_shape = infer_output_shapes(n, shapes).at(0);
  const std::string& op = n.op;

  if (op == ops::kGemm || op == ops::kGemmQ8) {
    auto d = gemm_dims_of(n, in[0].shape, in[1].shape);
    auto a = typed<int8_t>(in[0]);
    auto b = typed<int8_t>(in[1]);
    std::vector<int32_t> bias = in.size() == 3 ? typed<int32_t>(in[2]) : std::vector<int32_t>{};
    if (in.size() == 3 && in[2].shape.size() == 2 && d.m == 1) {
      // [1 x O] bias is the same as [O]
    }
    if (op == ops::kGemm) return make(out_shape, dtypes::kInt32, ref_gemm_i32(a, b, bias, d));
    return make(out_shape, dtypes::kInt8, ref_gemm_q8(a, b, bias, d, Requant::from_attrs(n)));
  }
  if (op == ops::kPwConv) {
    // Y[w, co] = sum_ci A[w, ci] * W[co, ci]: a GEMM with transposed B.
    GemmDims d;
    d.m = n.attr_int("W");
    d.n = n.attr_int("C_in");
    d.o = n.attr_int("C_out");
    d.trans_b = true;
    std::vector<int32_t> bias = in.size() == 3 ? typed<int32_t>(in[2]) : std::vector<int32_t>{};
    return make(out_shape, dtypes::kInt8,
                ref_gemm_q8(typed<int8_t>(in[0]), typed<int8_t>(in[1]), bias, d, Requant::from_attrs(n)));
  }
  if (op == ops::kRequant) {
    return make(out_shape, dtypes::kInt8, ref_requant(typed<int32_t>(in[0]), Requant::from_attrs(n)));
  }
  if (op == ops::kSoftmax) {
    const int64_t d = in[0].shape.back();
    return make(out_shape, dtypes::kInt8,
                ref_softmax_ibert(typed<int8_t>(in[0]), in[0].elements() / d, d,
                                  softmax_params_of(n, in[0].shape)));
  }
  if (op == ops::kRmsNorm) {
    const int64_t d = in[0].shape.back();
    RmsNormParams p{static_cast<int32_t>(n.attr_int("eps_q")), static_cast<int>(n.attr_int("k")),
                    Requant::from_attrs(n)};
    return make(out_shape, dtypes::kInt8,
                ref_rmsnorm_i32(typed<int8_t>(in[0]), in[0].elements() / d, d, typed<int8_t>(in[1]), p));
  }
  if (op == ops::kRope) {
    const Shape& x = in[0].shape;
    return make(out_shape, dtypes::kInt8,
                ref_rope_q(typed<int8_t>(in[0]), x[0], x[1], x[2], typed<int16_t>(in[1]),
                           typed<int16_t>(in[2]), in[1].shape[0], n.attr_int("pos"),
                           Requant::from_attrs(n)));
  }
  if (op == ops::kAddRequant)
    return make(out_shape, dtypes::kInt8,
                ref_add_requant(typed<int8_t>(in[0]), typed<int8_t>(in[1]), Requant::from_attrs(n)));
  if (op == ops::kMulRequant)
    return make(out_shape, dtypes::kInt8,
                ref_mul_requant(typed<int8_t>(in[0]), typed<int8_t>(in[1]), Requant::from_attrs(n)));
  if (op == ops::kHardswish)
    return make(out_shape, dtypes::kInt8,
                ref_hardswish_q(typed<int8_t>(in[0]), static_cast<int32_t>(n.attr_int("three")),
                                static_cast<int32_t>(n.attr_int("six")), Requant::from_attrs(n)));
  if (op == ops::kTranspose) {
    auto perm = n.attr_list("perm");
    return ref_transpose(in[0], perm);
  }
  if (op == ops::kGatherRows) return ref_gather_rows(in[0], typed<int32_t>(in[1]));
  if (op == ops::kConcatSeq) return ref_concat_seq(in[0], in[1]);
  if (op == ops::kReshape) return Tensor(out_shape, in[0].dtype, in[0].data);
  throw Error("node '" + n.name + "': no reference kernel for op '" + op + "'");
}

Node specialize_for_tile(const Node& node, const Region& out, std::span<const Shape> in_tiles) {
  Node n = node;
  if (n.op == ops::kRope) {
    n.attrs["pos"] = node.attr_int("pos") + out.origin.at(0);
  } else if (n.op == ops::kSoftmax) {
    if (node.attr_int("causal", 0)) {
      const size_t rank = out.origin.size();
      n.attrs["causal_offset"] = node.attr_int("causal_offset", 0) + out.origin.at(rank - 2);
    }
  } else if (n.op == ops::kPwConv) {
    n.attrs["W"] = out.extent.at(0);
    n.attrs["C_out"] = out.extent.at(1);
  } else if (n.op == ops::kReshape) {
    n.attrs["shape"] = out.extent;
  }
  (void)in_tiles;
  return n;
}

// ---------------------------------------------------------------------------
// Tiling constraints

bool TileConstraintSpec::is_untileable(DimRef r) const {
  return std::find(geometric.untileable.begin(), geometric.untileable.end(), r) !=
         geometric.untileable.end();
}

std::optional<DimRef> TileConstraintSpec::link_of(DimRef r) const {
  for (const auto& [in, out] : geometric.equal)
    if (in == r) return out;
  return std::nullopt;
}

int64_t evaluate_size(const SizeExpr& e, std::span<const Shape> tiles) {
  int64_t v = e.coef;
  for (const auto& r : e.dims) v *= tiles[r.operand][r.dim];
  return v;
}

namespace {

using Spec = TileConstraintSpec;

int rank_of(std::span<const Shape> s, int operand) { return static_cast<int>(s[operand].size()); }

Spec same_shape_spec(std::span<const Shape> s, int nin) {
  Spec spec;
  const int out = nin;
  for (int i = 0; i < nin; ++i)
    for (int d = 0; d < rank_of(s, i); ++d) spec.geometric.equal.push_back({{i, d}, {out, d}});
  return spec;
}

void untile_all(Spec& spec, std::span<const Shape> s, int operand) {
  for (int d = 0; d < rank_of(s, operand); ++d) spec.geometric.untileable.push_back({operand, d});
}

Spec gemm_spec(const Node& n, std::span<const Shape> s) {
  Spec spec;
  const int nin = static_cast<int>(n.inputs.size());
  const int out = nin;
  const int ra = rank_of(s, 0), rb = rank_of(s, 1), ro = rank_of(s, out);
  const bool trans_b = n.attr_int("trans_b", 0) != 0;
  if (ra == 3) spec.geometric.equal.push_back({{0, 0}, {out, 0}});
  spec.geometric.equal.push_back({{0, ra - 2}, {out, ro - 2}});
  spec.geometric.untileable.push_back({0, ra - 1});
  if (rb == 3) spec.geometric.equal.push_back({{1, 0}, {out, 0}});
  const int b_o = trans_b ? rb - 2 : rb - 1;
  const int b_n = trans_b ? rb - 1 : rb - 2;
  spec.geometric.equal.push_back({{1, b_o}, {out, ro - 1}});
  spec.geometric.untileable.push_back({1, b_n});
  if (nin == 3) {
    if (rank_of(s, 2) == 1) {
      spec.geometric.equal.push_back({{2, 0}, {out, ro - 1}});
    } else {
      spec.geometric.equal.push_back({{2, 0}, {out, ro - 2}});
      spec.geometric.equal.push_back({{2, 1}, {out, ro - 1}});
    }
  }
  return spec;
}

Spec pwconv_spec(const Node& n, std::span<const Shape> s) {
  Spec spec;
  const int nin = static_cast<int>(n.inputs.size());
  const int out = nin;
  spec.geometric.equal.push_back({{0, 0}, {out, 0}});
  spec.geometric.untileable.push_back({0, 1});
  spec.geometric.equal.push_back({{1, 0}, {out, 1}});
  for (int d = 1; d < 4; ++d) spec.geometric.untileable.push_back({1, d});
  if (nin == 3) spec.geometric.equal.push_back({{2, 0}, {out, 1}});
  (void)s;
  return spec;
}

Spec constraints_for_op(const Node& n, std::span<const Shape> s) {
  const std::string& op = n.op;
  const int nin = static_cast<int>(n.inputs.size());
  const int out = nin;
  if (op == ops::kGemm || op == ops::kGemmQ8) return gemm_spec(n, s);
  if (op == ops::kPwConv) return pwconv_spec(n, s);
  if (op == ops::kRequant || op == ops::kAddRequant || op == ops::kMulRequant || op == ops::kHardswish)
    return same_shape_spec(s, nin);
  if (op == ops::kSoftmax) {
    Spec spec = same_shape_spec(s, 1);
    const int last = rank_of(s, 0) - 1;
    spec.geometric.untileable.push_back({0, last});
    spec.geometric.untileable.push_back({out, last});
    return spec;
  }
  if (op == ops::kRmsNorm) {
    Spec spec;
    const int last = rank_of(s, 0) - 1;
    for (int d = 0; d < last; ++d) spec.geometric.equal.push_back({{0, d}, {out, d}});
    spec.geometric.untileable.push_back({0, last});
    spec.geometric.untileable.push_back({out, last});
    spec.geometric.untileable.push_back({1, 0});
    return spec;
  }
  if (op == ops::kRope) {
    Spec spec;
    spec.geometric.equal.push_back({{0, 0}, {out, 0}});
    spec.geometric.equal.push_back({{0, 1}, {out, 1}});
    spec.geometric.untileable.push_back({0, 2});
    spec.geometric.untileable.push_back({out, 2});
    untile_all(spec, s, 1);
    untile_all(spec, s, 2);
    return spec;
  }
  if (op == ops::kTranspose) {
    Spec spec;
    auto perm = n.attr_list("perm");
    for (size_t i = 0; i < perm.size(); ++i)
      spec.geometric.equal.push_back({{0, static_cast<int>(perm[i])}, {out, static_cast<int>(i)}});
    return spec;
  }
  if (op == ops::kGatherRows) {
    Spec spec;
    untile_all(spec, s, 0);
    spec.geometric.equal.push_back({{1, 0}, {out, 0}});
    spec.geometric.untileable.push_back({out, 1});
    return spec;
  }
  if (op == ops::kConcatSeq) {
    Spec spec;
    for (int i = 0; i < 2; ++i) {
      spec.geometric.untileable.push_back({i, 0});
      for (int d = 1; d < rank_of(s, i); ++d) spec.geometric.equal.push_back({{i, d}, {out, d}});
    }
    spec.geometric.untileable.push_back({out, 0});
    return spec;
  }
  if (op == ops::kReshape) {
    Spec spec;
    const bool keep_rows = s[0][0] == s[out][0];
    for (int d = 0; d < rank_of(s, 0); ++d) {
      if (d == 0 && keep_rows)
        spec.geometric.equal.push_back({{0, 0}, {out, 0}});
      else
        spec.geometric.untileable.push_back({0, d});
    }
    for (int d = keep_rows ? 1 : 0; d < rank_of(s, out); ++d) spec.geometric.untileable.push_back({out, d});
    return spec;
  }
  throw Error("node '" + n.name + "': no tiling constraints for op '" + op + "'");
}

// --- templates ----------------------------------------------------------

KernelArg operand(const std::string& hole, int idx) {
  KernelArg a;
  a.hole = hole;
  a.kind = KernelArg::Kind::Operand;
  a.ref = {idx, 0};
  return a;
}

KernelArg extent(const std::string& hole, int idx, int dim) {
  KernelArg a;
  a.hole = hole;
  a.kind = KernelArg::Kind::TileExtent;
  a.ref = {idx, dim};
  return a;
}

KernelArg origin(const std::string& hole, int idx, int dim) {
  KernelArg a;
  a.hole = hole;
  a.kind = KernelArg::Kind::TileOrigin;
  a.ref = {idx, dim};
  return a;
}

KernelArg product(const std::string& hole, int idx, int begin, int end) {
  KernelArg a;
  a.hole = hole;
  a.kind = KernelArg::Kind::TileProduct;
  a.ref = {idx, begin};
  a.dim_end = end;
  return a;
}

KernelArg attr(const std::string& hole, const std::string& key) {
  KernelArg a;
  a.hole = hole;
  a.kind = KernelArg::Kind::Attr;
  a.attr = key;
  return a;
}

KernelArg literal(const std::string& hole, std::string value) {
  KernelArg a;
  a.hole = hole;
  a.kind = KernelArg::Kind::Literal;
  a.literal = std::move(value);
  return a;
}

std::vector<KernelArg> requant_args() { return {attr("mul", "mul"), attr("shift", "shift"), attr("zp", "zp")}; }

void append(std::vector<KernelArg>& v, const std::vector<KernelArg>& more) {
  v.insert(v.end(), more.begin(), more.end());
}

// Argument lists are built per node because ranks and optional operands vary.
std::vector<KernelArg> args_for(const Node& n, std::span<const Shape> s) {
  const std::string& op = n.op;
  const int nin = static_cast<int>(n.inputs.size());
  const int out = nin;
  const int ro = rank_of(s, out);
  std::vector<KernelArg> a;
  if (op == ops::kGemm || op == ops::kGemmQ8) {
    const int ra = rank_of(s, 0);
    a = {operand("A", 0), operand("B", 1), nin == 3 ? operand("C", 2) : literal("C", "0"), operand("Y", out),
         ra == 3 ? extent("batch", out, 0) : literal("batch", "1"), extent("M", out, ro - 2),
         extent("N", 0, ra - 1), extent("O", out, ro - 1),
         literal("b_batched", rank_of(s, 1) == 3 ? "1" : "0"), literal("trans_b", n.attr_int("trans_b", 0) ? "1" : "0"),
         literal("c_rows", nin == 3 && rank_of(s, 2) == 2 ? "1" : "0")};
    if (op == ops::kGemmQ8) append(a, requant_args());
    return a;
  }
  if (op == ops::kPwConv) {
    a = {operand("A", 0), operand("W", 1), nin == 3 ? operand("C", 2) : literal("C", "0"), operand("Y", out),
         extent("width", out, 0), extent("c_in", 0, 1), extent("c_out", out, 1)};
    append(a, requant_args());
    return a;
  }
  if (op == ops::kRequant) {
    a = {operand("X", 0), operand("Y", out), product("n", out, 0, ro)};
    append(a, requant_args());
    return a;
  }
  if (op == ops::kAddRequant || op == ops::kMulRequant) {
    a = {operand("A", 0), operand("B", 1), operand("Y", out), product("n", out, 0, ro)};
    append(a, requant_args());
    return a;
  }
  if (op == ops::kHardswish) {
    a = {operand("X", 0), operand("Y", out), product("n", out, 0, ro), attr("three", "three"), attr("six", "six")};
    append(a, requant_args());
    return a;
  }
  if (op == ops::kSoftmax) {
    KernelArg scratch = operand("scratch", -1);
    a = {operand("X", 0), operand("Y", out), product("rows", out, 0, ro - 1), extent("d", out, ro - 1),
         ro >= 2 ? extent("matrix_rows", out, ro - 2) : literal("matrix_rows", "1"),
         ro >= 2 ? origin("row0", out, ro - 2) : literal("row0", "0"), attr("ln2_q", "ln2_q"),
         attr("b_q", "b_q"), attr("c_q", "c_q"), attr("out_bits", "out_bits"),
         literal("causal", n.attr_int("causal", 0) ? "1" : "0"),
         literal("causal_offset", std::to_string(n.attr_int("causal_offset", 0))), scratch};
    return a;
  }
  if (op == ops::kRmsNorm) {
    a = {operand("X", 0), operand("G", 1), operand("Y", out), product("rows", out, 0, ro - 1),
         extent("d", out, ro - 1), attr("eps_q", "eps_q"), attr("k", "k")};
    append(a, requant_args());
    return a;
  }
  if (op == ops::kRope) {
    a = {operand("X", 0), operand("COS", 1), operand("SIN", 2), operand("Y", out), extent("s", out, 0),
         extent("h", out, 1), extent("dh", out, 2), origin("s0", out, 0), attr("pos", "pos")};
    append(a, requant_args());
    return a;
  }
  if (op == ops::kTranspose) {
    const int r = rank_of(s, 0);
    a = {operand("X", 0), operand("Y", out), literal("rank", std::to_string(r))};
    for (int d = 0; d < 4; ++d)
      a.push_back(d < r ? extent("d" + std::to_string(d), 0, d) : literal("d" + std::to_string(d), "1"));
    auto perm = n.attr_list("perm");
    for (int d = 0; d < 4; ++d)
      a.push_back(literal("p" + std::to_string(d), std::to_string(d < r ? perm[d] : d)));
    return a;
  }
  if (op == ops::kGatherRows) {
    return {operand("T", 0), operand("IDX", 1), operand("Y", out), extent("s", out, 0), extent("d", out, 1),
            extent("rows", 0, 0)};
  }
  if (op == ops::kConcatSeq) {
    return {operand("A", 0), operand("B", 1), operand("Y", out), product("na", 0, 0, rank_of(s, 0)),
            product("nb", 1, 0, rank_of(s, 1))};
  }
  if (op == ops::kReshape) return {operand("X", 0), operand("Y", out), product("n", out, 0, ro)};
  throw Error("node '" + n.name + "': no kernel arguments for op '" + op + "'");
}

std::string template_text(const std::string& fn, const std::vector<std::string>& holes) {
  std::string t = fn + "(";
  for (size_t i = 0; i < holes.size(); ++i) {
    if (i) t += ", ";
    t += "${" + holes[i] + "}";
  }
  return t + ");";
}

struct OpKernelDef {
  std::string op;
  std::string variant;
  std::vector<DataType> inputs;
  DataType output;
  std::string c_function;
};

// Type signatures, in registration order per engine.
std::vector<OpKernelDef> kernel_defs() {
  using namespace dtypes;
  return {
      {ops::kGemmQ8, "bias", {kInt8, kInt8, kInt32}, kInt8, "td_k_gemm_q8"},
      {ops::kGemmQ8, "nobias", {kInt8, kInt8}, kInt8, "td_k_gemm_q8"},
      {ops::kGemm, "bias", {kInt8, kInt8, kInt32}, kInt32, "td_k_gemm_i32"},
      {ops::kGemm, "nobias", {kInt8, kInt8}, kInt32, "td_k_gemm_i32"},
      {ops::kPwConv, "bias", {kInt8, kInt8, kInt32}, kInt8, "td_k_pwconv"},
      {ops::kPwConv, "nobias", {kInt8, kInt8}, kInt8, "td_k_pwconv"},
      {ops::kRequant, "i32", {kInt32}, kInt8, "td_k_requant_i32"},
      {ops::kRequant, "i8", {kInt8}, kInt8, "td_k_requant_i8"},
      {ops::kSoftmax, "i8", {kInt8}, kInt8, "td_k_softmax"},
      {ops::kRmsNorm, "i8", {kInt8, kInt8}, kInt8, "td_k_rmsnorm"},
      {ops::kRope, "i8", {kInt8, kInt16, kInt16}, kInt8, "td_k_rope"},
      {ops::kAddRequant, "i8", {kInt8, kInt8}, kInt8, "td_k_add_requant"},
      {ops::kMulRequant, "i8", {kInt8, kInt8}, kInt8, "td_k_mul_requant"},
      {ops::kHardswish, "i8", {kInt8}, kInt8, "td_k_hardswish"},
      {ops::kTranspose, "i8", {kInt8}, kInt8, "td_k_transpose_1"},
      {ops::kTranspose, "i16", {kInt16}, kInt16, "td_k_transpose_2"},
      {ops::kTranspose, "i32", {kInt32}, kInt32, "td_k_transpose_4"},
      {ops::kGatherRows, "i8", {kInt8, kInt32}, kInt8, "td_k_gather_rows"},
      {ops::kConcatSeq, "i8", {kInt8, kInt8}, kInt8, "td_k_concat_seq"},
      {ops::kReshape, "i8", {kInt8}, kInt8, "td_k_copy_1"},
      {ops::kReshape, "i16", {kInt16}, kInt16, "td_k_copy_2"},
      {ops::kReshape, "i32", {kInt32}, kInt32, "td_k_copy_4"},
  };
}

std::vector<std::string> holes_for(const std::string& op, size_t nin) {
  // Hole order of the emitted call; the argument list per node fills them.
  Node probe;
  probe.op = op;
  probe.inputs.resize(nin);
  probe.attrs["trans_b"] = int64_t{0};
  probe.attrs["perm"] = std::vector<int64_t>{0, 1};
  probe.attrs["causal"] = int64_t{0};
  std::vector<Shape> shapes(nin + 1, Shape{2, 2});
  if (op == ops::kPwConv) shapes[1] = Shape{2, 1, 1, 2};
  if (op == ops::kRope) shapes[0] = shapes[nin] = Shape{2, 2, 2};
  if (op == ops::kGatherRows) shapes[1] = Shape{2};
  if (op == ops::kGemm || op == ops::kGemmQ8) {
    if (nin == 3) shapes[2] = Shape{2};
  }
  std::vector<std::string> holes;
  for (const auto& a : args_for(probe, shapes)) holes.push_back(a.hole);
  return holes;
}

}  // namespace

const KernelTemplate* KernelRegistry::find(const std::string& id) const {
  for (const auto& k : kernels)
    if (k.id == id) return &k;
  return nullptr;
}

const KernelTemplate* KernelRegistry::match(const Node& node, const Graph& g,
                                            std::span<const DataType> input_types) const {
  for (const auto& k : kernels) {
    const auto& sig = k.signature;
    if (sig.op != node.op || sig.inputs.size() != input_types.size()) continue;
    if (!std::equal(sig.inputs.begin(), sig.inputs.end(), input_types.begin())) continue;
    if (sig.predicate && !sig.predicate(node, g)) continue;
    return &k;
  }
  return nullptr;
}

KernelRegistry build_registry(const TargetDescription& t, std::span<const std::string> engine_prefs) {
  std::vector<std::string> order(engine_prefs.begin(), engine_prefs.end());
  if (order.empty())
    for (const auto& e : t.engines) order.push_back(e.name);
  KernelRegistry reg;
  for (const auto& name : order) {
    const Engine* e = t.find_engine(name);
    if (!e) continue;
    for (const auto& def : kernel_defs()) {
      if (!e->supports(def.op)) continue;
      KernelTemplate k;
      k.id = e->name + "." + def.op + "." + def.variant;
      k.signature.op = def.op;
      k.signature.engine = e->name;
      k.signature.inputs = def.inputs;
      k.signature.outputs = {def.output};
      if (def.op == ops::kPwConv && e->kind == EngineKind::ConvNpu) {
        k.signature.predicate_name = "constant weights";
        k.signature.predicate = [](const Node& n, const Graph& g) {
          const Buffer* w = g.find_buffer(n.inputs.at(1));
          return w && w->is_constant();
        };
      }
      k.c_function = def.c_function;
      k.text = template_text(def.c_function, holes_for(def.op, def.inputs.size()));
      k.transient_size = [op = def.op](const Node&, std::span<const Shape> s) {
        SizeExpr e;
        if (op == ops::kSoftmax) {
          // One row of 64-bit exponentials.
          e.coef = 8;
          e.dims = {{0, static_cast<int>(s[0].size()) - 1}};
        }
        return e;
      };
      k.passes = {"instantiate", "bind_allocation", "tile_loop", "closure"};
      const bool npu = e->kind == EngineKind::ConvNpu;
      k.constraints = [npu](const Node& n, std::span<const Shape> s) {
        Spec spec = constraints_for_op(n, s);
        if (npu && n.op == ops::kPwConv) {
          // The NPU datapath produces output channels in groups of 32.
          spec.platform.divisible.push_back({{static_cast<int>(n.inputs.size()), 1}, 32});
        }
        return spec;
      };
      reg.kernels.push_back(std::move(k));
    }
  }
  return reg;
}

TileConstraintSpec tile_constraints_for(const KernelTemplate& kernel, const Node& node,
                                        std::span<const Shape> shapes) {
  if (!kernel.constraints) throw Error("kernel '" + kernel.id + "' has no tile constraints");
  return kernel.constraints(node, shapes);
}

/// Per-node argument list for the kernel's template holes.
std::vector<KernelArg> kernel_args(const Node& node, std::span<const Shape> shapes) {
  return args_for(node, shapes);
}

}  // namespace tinydeploy
