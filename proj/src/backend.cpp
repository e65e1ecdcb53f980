// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tinydeploy/backend.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

#include "tinydeploy/kernels.hpp"
#include "tinydeploy/memalloc.hpp"

namespace tinydeploy {

namespace {

// ---------------------------------------------------------------------------
// Static kernel library. Each entry lists the entries it calls.

struct LibEntry {
  const char* name;
  std::vector<const char*> deps;
  const char* code;
};

const std::vector<LibEntry>& library() {
  static const std::vector<LibEntry> lib = {
      {"td_ld16", {}, R"(static int32_t td_ld16(const void* p, int64_t i) {
  int16_t v;
  memcpy(&v, (const uint8_t*)p + i * 2, 2);
  return v;
}
)"},
      {"td_ld32", {}, R"(static int32_t td_ld32(const void* p, int64_t i) {
  int32_t v;
  memcpy(&v, (const uint8_t*)p + i * 4, 4);
  return v;
}
)"},
      {"td_st32", {}, R"(static void td_st32(void* p, int64_t i, int32_t v) { memcpy((uint8_t*)p + i * 4, &v, 4); }
)"},
      {"td_ld64", {}, R"(static int64_t td_ld64(const void* p, int64_t i) {
  int64_t v;
  memcpy(&v, (const uint8_t*)p + i * 8, 8);
  return v;
}
)"},
      {"td_st64", {}, R"(static void td_st64(void* p, int64_t i, int64_t v) { memcpy((uint8_t*)p + i * 8, &v, 8); }
)"},
      {"td_rq", {}, R"(static int8_t td_sat8(int64_t v) { return (int8_t)(v < -128 ? -128 : (v > 127 ? 127 : v)); }

static int64_t td_rha(int64_t v, int32_t shift) {
  int64_t half;
  if (shift == 0) return v;
  half = (int64_t)1 << (shift - 1);
  return v >= 0 ? (v + half) >> shift : -((-v + half) >> shift);
}

/* sat8(zp + round_half_away(v * mul / 2^shift)) */
static int8_t td_rq(int64_t v, int32_t mul, int32_t shift, int32_t zp) {
  return td_sat8((int64_t)zp + td_rha(v * mul, shift));
}
)"},
      {"td_isqrt", {}, R"(static int64_t td_isqrt(int64_t n) {
  int64_t x;
  int bits = 0, i;
  uint64_t u = (uint64_t)n;
  if (n <= 0) return 0;
  while (u) {
    ++bits;
    u >>= 1;
  }
  x = (int64_t)1 << ((bits + 1) / 2);
  for (i = 0; i < 4; ++i) x = (x + n / x) / 2;
  if (x * x > n) --x;
  return x;
}
)"},
      {"td_gemm", {"td_rq", "td_ld32", "td_st32"}, R"(static void td_gemm(const void* A, const void* B, const void* C, void* Y, int32_t wide, int32_t batch,
                    int32_t M, int32_t N, int32_t O, int32_t b_batched, int32_t trans_b, int32_t c_rows,
                    int32_t mul, int32_t shift, int32_t zp) {
  const int8_t* a = (const int8_t*)A;
  const int8_t* b = (const int8_t*)B;
  int32_t bt, i, j, k;
  for (bt = 0; bt < batch; ++bt) {
    const int8_t* ab = a + (int64_t)bt * M * N;
    const int8_t* bb = b + (b_batched ? (int64_t)bt * N * O : 0);
    for (i = 0; i < M; ++i)
      for (j = 0; j < O; ++j) {
        int32_t acc = 0;
        const int64_t at = ((int64_t)bt * M + i) * O + j;
        for (k = 0; k < N; ++k)
          acc += (int32_t)ab[(int64_t)i * N + k] * (trans_b ? bb[(int64_t)j * N + k] : bb[(int64_t)k * O + j]);
        if (C) acc += td_ld32(C, c_rows ? (int64_t)i * O + j : j);
        if (wide)
          td_st32(Y, at, acc);
        else
          ((int8_t*)Y)[at] = td_rq(acc, mul, shift, zp);
      }
  }
}
)"},
      {"td_k_gemm_q8", {"td_gemm"}, R"(static void td_k_gemm_q8(const void* A, const void* B, const void* C, void* Y, int32_t batch, int32_t M,
                         int32_t N, int32_t O, int32_t b_batched, int32_t trans_b, int32_t c_rows, int32_t mul,
                         int32_t shift, int32_t zp) {
  td_gemm(A, B, C, Y, 0, batch, M, N, O, b_batched, trans_b, c_rows, mul, shift, zp);
}
)"},
      {"td_k_gemm_i32", {"td_gemm"}, R"(static void td_k_gemm_i32(const void* A, const void* B, const void* C, void* Y, int32_t batch, int32_t M,
                          int32_t N, int32_t O, int32_t b_batched, int32_t trans_b, int32_t c_rows) {
  td_gemm(A, B, C, Y, 1, batch, M, N, O, b_batched, trans_b, c_rows, 1, 0, 0);
}
)"},
      {"td_k_pwconv", {"td_gemm"}, R"(/* Y[w, co] = sum_ci A[w, ci] * W[co, ci] + C[co] */
static void td_k_pwconv(const void* A, const void* W, const void* C, void* Y, int32_t width, int32_t c_in,
                        int32_t c_out, int32_t mul, int32_t shift, int32_t zp) {
  td_gemm(A, W, C, Y, 0, 1, width, c_in, c_out, 0, 1, 0, mul, shift, zp);
}
)"},
      {"td_k_requant_i32", {"td_rq", "td_ld32"}, R"(static void td_k_requant_i32(const void* X, void* Y, int32_t n, int32_t mul, int32_t shift, int32_t zp) {
  int32_t i;
  for (i = 0; i < n; ++i) ((int8_t*)Y)[i] = td_rq(td_ld32(X, i), mul, shift, zp);
}
)"},
      {"td_k_requant_i8", {"td_rq"}, R"(static void td_k_requant_i8(const void* X, void* Y, int32_t n, int32_t mul, int32_t shift, int32_t zp) {
  int32_t i;
  for (i = 0; i < n; ++i) ((int8_t*)Y)[i] = td_rq(((const int8_t*)X)[i], mul, shift, zp);
}
)"},
      {"td_k_softmax", {"td_ld64", "td_st64"}, R"(/* Integer-only softmax over rows of length d. -128 marks a masked input. */
static void td_k_softmax(const void* X, void* Y, int32_t rows, int32_t d, int32_t matrix_rows, int32_t row0,
                         int32_t ln2_q, int32_t b_q, int32_t c_q, int32_t out_bits, int32_t causal,
                         int32_t causal_offset, void* scratch) {
  const int64_t top = ((int64_t)1 << out_bits) - 1;
  int32_t r, j;
  for (r = 0; r < rows; ++r) {
    const int8_t* x = (const int8_t*)X + (int64_t)r * d;
    int8_t* y = (int8_t*)Y + (int64_t)r * d;
    const int64_t limit = (int64_t)(r % matrix_rows) + causal_offset + row0;
    int64_t max = 0, sum = 0;
    int any = 0;
    for (j = 0; j < d; ++j) {
      if (x[j] == -128 || (causal && j > limit)) continue;
      if (!any || x[j] > max) max = x[j];
      any = 1;
    }
    for (j = 0; j < d; ++j) {
      int64_t e = 0;
      if (any && x[j] != -128 && !(causal && j > limit)) {
        const int64_t q = x[j] - max;
        const int64_t z = -q / ln2_q;
        const int64_t rr = q + z * ln2_q;
        const int64_t poly = (rr + b_q) * (rr + b_q) + c_q;
        const int64_t shift = 15 - z;
        if (shift >= 0)
          e = poly * ((int64_t)1 << shift);
        else
          e = -shift >= 63 ? 0 : poly >> -shift;
      }
      td_st64(scratch, j, e);
      sum += e;
    }
    for (j = 0; j < d; ++j) y[j] = (int8_t)(sum == 0 ? 0 : td_ld64(scratch, j) * top / sum);
  }
}
)"},
      {"td_k_rmsnorm", {"td_rq", "td_isqrt"}, R"(static void td_k_rmsnorm(const void* X, const void* G, void* Y, int32_t rows, int32_t d, int32_t eps_q, int32_t k,
                         int32_t mul, int32_t shift, int32_t zp) {
  const int8_t* g = (const int8_t*)G;
  int32_t r, i;
  for (r = 0; r < rows; ++r) {
    const int8_t* x = (const int8_t*)X + (int64_t)r * d;
    int8_t* y = (int8_t*)Y + (int64_t)r * d;
    int32_t sum_sq = 0, mean, rms;
    for (i = 0; i < d; ++i) sum_sq += (int32_t)x[i] * x[i];
    mean = sum_sq / d;
    rms = (int32_t)td_isqrt((int64_t)mean + eps_q);
    for (i = 0; i < d; ++i) {
      const int32_t num = (int32_t)x[i] * g[i] * ((int32_t)1 << k);
      y[i] = td_rq(num / rms, mul, shift, zp);
    }
  }
}
)"},
      {"td_k_rope", {"td_rq", "td_ld16"}, R"(/* Q15 rotary tables are indexed from pos + s0. */
static void td_k_rope(const void* X, const void* COS, const void* SIN, void* Y, int32_t s, int32_t h, int32_t dh,
                      int32_t s0, int32_t pos, int32_t mul, int32_t shift, int32_t zp) {
  const int8_t* x = (const int8_t*)X;
  int8_t* y = (int8_t*)Y;
  const int32_t half = dh / 2;
  int32_t t, hh, i;
  for (t = 0; t < s; ++t)
    for (hh = 0; hh < h; ++hh)
      for (i = 0; i < half; ++i) {
        const int64_t base = ((int64_t)t * h + hh) * dh + 2 * i;
        const int64_t at = (int64_t)(pos + s0 + t) * half + i;
        const int32_t c = td_ld16(COS, at), sn = td_ld16(SIN, at);
        const int32_t x0 = x[base], x1 = x[base + 1];
        y[base] = td_rq(x0 * c - x1 * sn, mul, shift, zp);
        y[base + 1] = td_rq(x0 * sn + x1 * c, mul, shift, zp);
      }
}
)"},
      {"td_k_add_requant", {"td_rq"}, R"(static void td_k_add_requant(const void* A, const void* B, void* Y, int32_t n, int32_t mul, int32_t shift,
                             int32_t zp) {
  int32_t i;
  for (i = 0; i < n; ++i)
    ((int8_t*)Y)[i] = td_rq((int32_t)((const int8_t*)A)[i] + ((const int8_t*)B)[i], mul, shift, zp);
}
)"},
      {"td_k_mul_requant", {"td_rq"}, R"(static void td_k_mul_requant(const void* A, const void* B, void* Y, int32_t n, int32_t mul, int32_t shift,
                             int32_t zp) {
  int32_t i;
  for (i = 0; i < n; ++i)
    ((int8_t*)Y)[i] = td_rq((int32_t)((const int8_t*)A)[i] * ((const int8_t*)B)[i], mul, shift, zp);
}
)"},
      {"td_k_hardswish", {"td_rq"}, R"(static void td_k_hardswish(const void* X, void* Y, int32_t n, int32_t three, int32_t six, int32_t mul,
                           int32_t shift, int32_t zp) {
  int32_t i;
  for (i = 0; i < n; ++i) {
    const int32_t x = ((const int8_t*)X)[i];
    int32_t gate = x + three;
    gate = gate < 0 ? 0 : (gate > six ? six : gate);
    ((int8_t*)Y)[i] = td_rq(x * gate, mul, shift, zp);
  }
}
)"},
      {"td_transpose", {}, R"(/* Shapes are padded to rank 4 with trailing unit dims. */
static void td_transpose(const void* X, void* Y, int32_t elem, const int32_t* d, const int32_t* p) {
  int32_t st[4], od[4], idx[4] = {0, 0, 0, 0};
  int64_t o, total;
  int i;
  st[3] = 1;
  for (i = 2; i >= 0; --i) st[i] = st[i + 1] * d[i + 1];
  for (i = 0; i < 4; ++i) od[i] = d[p[i]];
  total = (int64_t)od[0] * od[1] * od[2] * od[3];
  for (o = 0; o < total; ++o) {
    int64_t src = 0;
    for (i = 0; i < 4; ++i) src += (int64_t)idx[i] * st[p[i]];
    memcpy((uint8_t*)Y + o * elem, (const uint8_t*)X + src * elem, (size_t)elem);
    for (i = 3; i >= 0; --i) {
      if (++idx[i] < od[i]) break;
      idx[i] = 0;
    }
  }
}
)"},
      {"td_k_transpose_1", {"td_transpose"}, R"(static void td_k_transpose_1(const void* X, void* Y, int32_t rank, int32_t d0, int32_t d1, int32_t d2, int32_t d3,
                             int32_t p0, int32_t p1, int32_t p2, int32_t p3) {
  const int32_t d[4] = {d0, d1, d2, d3}, p[4] = {p0, p1, p2, p3};
  (void)rank;
  td_transpose(X, Y, 1, d, p);
}
)"},
      {"td_k_transpose_2", {"td_transpose"}, R"(static void td_k_transpose_2(const void* X, void* Y, int32_t rank, int32_t d0, int32_t d1, int32_t d2, int32_t d3,
                             int32_t p0, int32_t p1, int32_t p2, int32_t p3) {
  const int32_t d[4] = {d0, d1, d2, d3}, p[4] = {p0, p1, p2, p3};
  (void)rank;
  td_transpose(X, Y, 2, d, p);
}
)"},
      {"td_k_transpose_4", {"td_transpose"}, R"(static void td_k_transpose_4(const void* X, void* Y, int32_t rank, int32_t d0, int32_t d1, int32_t d2, int32_t d3,
                             int32_t p0, int32_t p1, int32_t p2, int32_t p3) {
  const int32_t d[4] = {d0, d1, d2, d3}, p[4] = {p0, p1, p2, p3};
  (void)rank;
  td_transpose(X, Y, 4, d, p);
}
)"},
      {"td_k_gather_rows", {"td_ld32"}, R"(static void td_k_gather_rows(const void* T, const void* IDX, void* Y, int32_t s, int32_t d, int32_t rows) {
  int32_t i;
  (void)rows;
  for (i = 0; i < s; ++i)
    memcpy((uint8_t*)Y + (int64_t)i * d, (const uint8_t*)T + (int64_t)td_ld32(IDX, i) * d, (size_t)d);
}
)"},
      {"td_k_concat_seq", {}, R"(static void td_k_concat_seq(const void* A, const void* B, void* Y, int32_t na, int32_t nb) {
  memcpy(Y, A, (size_t)na);
  memcpy((uint8_t*)Y + na, B, (size_t)nb);
}
)"},
      {"td_k_copy_1", {}, R"(static void td_k_copy_1(const void* X, void* Y, int32_t n) { memmove(Y, X, (size_t)n); }
)"},
      {"td_k_copy_2", {}, R"(static void td_k_copy_2(const void* X, void* Y, int32_t n) { memmove(Y, X, (size_t)n * 2); }
)"},
      {"td_k_copy_4", {}, R"(static void td_k_copy_4(const void* X, void* Y, int32_t n) { memmove(Y, X, (size_t)n * 4); }
)"},
  };
  return lib;
}

const char* kTilingSupport = R"(#define TD_MAX_RANK 8

typedef struct {
  int32_t origin[TD_MAX_RANK];
  int32_t extent[TD_MAX_RANK];
} td_region;

/* Tile k of the row-major grid; edge tiles are clamped. */
static void td_tile_region(int32_t k, int32_t rank, const int32_t* full, const int32_t* tile, td_region* r) {
  int32_t d;
  for (d = rank - 1; d >= 0; --d) {
    const int32_t count = (full[d] + tile[d] - 1) / tile[d];
    const int32_t rest = full[d] - (k % count) * tile[d];
    r->origin[d] = (k % count) * tile[d];
    r->extent[d] = rest < tile[d] ? rest : tile[d];
    k /= count;
  }
}

/* Region of an operand whose dims follow output dims `links` (-1: whole). */
static void td_operand_region(const td_region* out, int32_t rank, const int32_t* links, const int32_t* full,
                              td_region* r) {
  int32_t d;
  for (d = 0; d < rank; ++d) {
    r->origin[d] = links[d] >= 0 ? out->origin[links[d]] : 0;
    r->extent[d] = links[d] >= 0 ? out->extent[links[d]] : full[d];
  }
}
)";

const char* kCopySupport = R"(static void td_wait(int32_t h) {
  if (h >= 0) dma_wait(h);
}

/* Moves region r between a tensor at home and a dense tile, one 2-D
   transfer per plane. Returns the last handle. */
static int32_t td_tile_copy(uint8_t* home, uint8_t* tile, const int32_t* full, const td_region* r, int32_t rank,
                            int32_t elem, int32_t fetch) {
  int64_t stride[TD_MAX_RANK], planes = 1, plane;
  int32_t idx[TD_MAX_RANK], rows, row_bytes, home_stride, d, h = -1;
  if (rank == 0) return fetch ? dma_copy_2d(home, tile, 1, elem, elem, elem) : dma_copy_2d(tile, home, 1, elem, elem, elem);
  stride[rank - 1] = elem;
  for (d = rank - 2; d >= 0; --d) stride[d] = stride[d + 1] * full[d + 1];
  for (d = 0; d < rank; ++d) {
    if (r->extent[d] == 0) return -1;
    if (d < rank - 2) planes *= r->extent[d];
    idx[d] = 0;
  }
  rows = rank >= 2 ? r->extent[rank - 2] : 1;
  row_bytes = r->extent[rank - 1] * elem;
  home_stride = rank >= 2 ? (int32_t)stride[rank - 2] : row_bytes;
  for (plane = 0; plane < planes; ++plane) {
    int64_t off = 0;
    uint8_t* t = tile + plane * rows * row_bytes;
    for (d = 0; d < rank; ++d) off += (int64_t)(r->origin[d] + (d < rank - 2 ? idx[d] : 0)) * stride[d];
    if (fetch)
      h = dma_copy_2d(home + off, t, rows, row_bytes, home_stride, row_bytes);
    else
      h = dma_copy_2d(t, home + off, rows, row_bytes, row_bytes, home_stride);
    for (d = rank - 3; d >= 0; --d) {
      if (++idx[d] < r->extent[d]) break;
      idx[d] = 0;
    }
  }
  return h;
}
)";

std::string sanitize(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '_') ? c : '_';
  if (out.empty() || std::isdigit(static_cast<unsigned char>(out[0]))) out = "t_" + out;
  return out;
}

std::string upper(std::string s) {
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

std::string replace_all(std::string text, const std::string& from, const std::string& to) {
  size_t pos = 0;
  while ((pos = text.find(from, pos)) != std::string::npos) {
    text.replace(pos, from.size(), to);
    pos += to.size();
  }
  return text;
}

std::string int_list(const std::vector<int64_t>& v) {
  std::string s = "{";
  for (size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  if (v.empty()) s += "0";
  return s + "}";
}

std::string int_list(const std::vector<int>& v) { return int_list(std::vector<int64_t>(v.begin(), v.end())); }

std::string arena_name(const std::string& prefix, const std::string& level) {
  return prefix + "_arena_" + sanitize(level);
}

std::string engine_macro(const std::string& engine) { return "TD_ENGINE_" + upper(sanitize(engine)); }

int output_operand(const ProgramStep& st) {
  for (size_t k = 0; k < st.operands.size(); ++k)
    if (st.operands[k].operand >= 0) {
      bool last = true;
      for (size_t j = k + 1; j < st.operands.size(); ++j)
        if (st.operands[j].operand >= 0) last = false;
      if (last) return static_cast<int>(k);
    }
  throw Error("step for '" + st.node_name + "' has no output operand");
}

int operand_slot(const ProgramStep& st, int operand) {
  for (size_t k = 0; k < st.operands.size(); ++k)
    if (st.operands[k].operand == operand) return static_cast<int>(k);
  throw Error("step for '" + st.node_name + "' has no operand " + std::to_string(operand));
}

// Working state threaded through the pass pipeline of one step.
struct StepContext {
  const Graph& g;
  const Program& p;
  const ProgramStep& st;
  const Node& node;
  const TargetDescription& t;
  const EmitNames& names;
  std::vector<KernelArg> args;
  std::vector<Shape> shapes;  // full operand shapes, inputs then output
  int out = 0;                // index into st.operands
  bool loop = false;          // more than one tile
  bool db = false;
  std::vector<int> region_ops;  // st.operands indices needing a region variable
  CodeSegment seg;              // the kernel call
  std::string compute;          // rendered call or closure invocation
  std::string wrapper;          // enclosing code with ${__compute}

  Region region_of(int k, int tile) const {
    const ProgramOperand& o = st.operands[k];
    if (k == out) return st.tiles.at(tile);
    return operand_region(st.tiles.at(tile), o.links, o.full_shape);
  }
  std::string region_var(int k) const { return k == out ? "ro" : "r" + std::to_string(k); }
  bool hop(int k) const { return st.operands[k].operand >= 0 && !st.operands[k].direct; }
};

void require_pass(const CodeSegment& seg, const std::string& before, const std::string& pass) {
  if (std::find(seg.passes.begin(), seg.passes.end(), before) == seg.passes.end())
    throw Error("pass '" + pass + "' requires '" + before + "' to run first");
}

void pass_instantiate(StepContext& c, const std::string& tmpl) {
  std::string text = tmpl;
  for (const auto& a : c.args) {
    const std::string hole = "${" + a.hole + "}";
    if (text.find(hole) == std::string::npos) throw Error("template has no hole '" + a.hole + "'");
    std::string literal;
    bool var = false;
    std::string type = "int32_t";
    switch (a.kind) {
      case KernelArg::Kind::Operand:
        var = true;
        type = "uint8_t*";
        break;
      case KernelArg::Kind::TileExtent:
      case KernelArg::Kind::TileOrigin:
      case KernelArg::Kind::TileProduct: {
        if (c.loop) {
          var = true;
          break;
        }
        const Region r = c.region_of(operand_slot(c.st, a.ref.operand), 0);
        int64_t v = 1;
        if (a.kind == KernelArg::Kind::TileExtent) v = r.extent.at(a.ref.dim);
        if (a.kind == KernelArg::Kind::TileOrigin) v = r.origin.at(a.ref.dim);
        if (a.kind == KernelArg::Kind::TileProduct)
          for (int d = a.ref.dim; d < a.dim_end; ++d) v *= r.extent.at(d);
        literal = std::to_string(v);
        break;
      }
      case KernelArg::Kind::Attr:
        literal = std::to_string(c.node.attr_int(a.attr));
        break;
      case KernelArg::Kind::Literal:
        literal = a.literal;
        break;
    }
    if (var) {
      c.seg.vars.push_back({a.hole, type, ""});
    } else {
      text = replace_all(text, hole, literal);
    }
  }
  c.seg.text = text;
  for (const auto& name : c.seg.first_use())
    if (!c.seg.find(name)) throw Error("node '" + c.node.name + "': unbound template hole '" + name + "'");
  c.seg.passes.push_back("instantiate");
}

// Points operand vars at homes, arena slots or scratch.
void pass_bind_allocation(StepContext& c) {
  require_pass(c.seg, "instantiate", "bind_allocation");
  for (const auto& a : c.args) {
    if (a.kind != KernelArg::Kind::Operand) continue;
    FreeVar* v = nullptr;
    for (auto& fv : c.seg.vars)
      if (fv.name == a.hole) v = &fv;
    if (a.ref.operand < 0) {
      v->binding = c.names.allocation.at(c.st.operands.at(operand_slot(c.st, -1)).arena);
      continue;
    }
    const int k = operand_slot(c.st, a.ref.operand);
    const ProgramOperand& o = c.st.operands[k];
    if (o.direct) {
      const std::string home = c.names.allocation.at(o.home);
      bool at_zero = true;
      for (size_t i = 0; i < c.st.tiles.size(); ++i) {
        const Region r = c.region_of(k, static_cast<int>(i));
        for (size_t d = 0; d < r.origin.size(); ++d) {
          if (r.origin[d] != 0) at_zero = false;
          if (d > 0 && r.extent[d] != o.full_shape[d])
            throw Error("pass 'bind_allocation': direct operand '" + o.tensor + "' of '" + c.node.name +
                        "' is not contiguous");
        }
      }
      if (at_zero) {
        v->binding = home;
      } else {
        int64_t row = o.dtype.bytes();
        for (size_t d = 1; d < o.full_shape.size(); ++d) row *= o.full_shape[d];
        v->binding = "(" + home + " + (int64_t)" + c.region_var(k) + ".origin[0] * " + std::to_string(row) + ")";
      }
    } else {
      const std::string arena = c.names.allocation.at(o.arena);
      if (c.loop && c.db && !o.stationary)
        v->binding = "(" + arena + " + (k & 1) * " + std::to_string(o.slot_bytes) + ")";
      else
        v->binding = arena;
    }
  }
  c.seg.passes.push_back("bind_allocation");
}

std::string fetch_stmt(const StepContext& c, int k, const std::string& handle, const std::string& slot,
                       const std::string& region) {
  const ProgramOperand& o = c.st.operands[k];
  std::string dst = c.names.allocation.at(o.arena);
  if (!slot.empty()) dst = dst + " + " + slot + " * " + std::to_string(o.slot_bytes);
  return handle + " = td_tile_copy(" + c.names.allocation.at(o.home) + ", " + dst + ", f" + std::to_string(k) +
         ", &" + region + ", " + std::to_string(o.full_shape.size()) + ", " + std::to_string(o.dtype.bytes()) +
         ", 1);";
}

std::string writeback_stmt(const StepContext& c, const std::string& handle, const std::string& slot,
                           const std::string& region) {
  const ProgramOperand& o = c.st.operands[c.out];
  std::string src = c.names.allocation.at(o.arena);
  if (!slot.empty()) src = src + " + " + slot + " * " + std::to_string(o.slot_bytes);
  return handle + " = td_tile_copy(" + c.names.allocation.at(o.home) + ", " + src + ", fo, &" + region + ", " +
         std::to_string(o.full_shape.size()) + ", " + std::to_string(o.dtype.bytes()) + ", 0);";
}

// Wraps the call in the tile loop and its DMA schedule.
void pass_tile_loop(StepContext& c) {
  require_pass(c.seg, "bind_allocation", "tile_loop");
  const ProgramStep& st = c.st;
  const ProgramOperand& oo = st.operands[c.out];
  const int T = static_cast<int>(st.tiles.size());

  // The C grid must reproduce the planned tiles.
  const Shape& tile = oo.tile_shape;
  if (tile_grid(oo.full_shape, tile) != st.tiles)
    throw Error("pass 'tile_loop': tiles of '" + c.node.name + "' do not form the grid of " + shape_str(tile));

  std::vector<int> ins;
  for (size_t k = 0; k < st.operands.size(); ++k)
    if (static_cast<int>(k) != c.out && c.hop(static_cast<int>(k))) ins.push_back(static_cast<int>(k));
  const bool out_hop = c.hop(c.out);
  for (size_t k = 0; k < st.operands.size(); ++k) {
    const int ki = static_cast<int>(k);
    if (ki == c.out || st.operands[k].operand < 0) continue;
    if (c.loop || c.hop(ki)) c.region_ops.push_back(ki);
  }

  for (const auto& a : c.args) {
    if (a.kind != KernelArg::Kind::TileExtent && a.kind != KernelArg::Kind::TileOrigin &&
        a.kind != KernelArg::Kind::TileProduct)
      continue;
    if (!c.loop) continue;
    for (auto& fv : c.seg.vars) {
      if (fv.name != a.hole) continue;
      const std::string r = c.region_var(operand_slot(st, a.ref.operand));
      if (a.kind == KernelArg::Kind::TileExtent) {
        fv.binding = r + ".extent[" + std::to_string(a.ref.dim) + "]";
      } else if (a.kind == KernelArg::Kind::TileOrigin) {
        fv.binding = r + ".origin[" + std::to_string(a.ref.dim) + "]";
      } else {
        std::string e;
        for (int d = a.ref.dim; d < a.dim_end; ++d) e += (e.empty() ? "" : " * ") + r + ".extent[" + std::to_string(d) + "]";
        fv.binding = e.empty() ? "1" : "(" + e + ")";
      }
    }
  }

  std::ostringstream w;
  w << "  /* " << c.node.name << ": " << c.node.op << " on " << st.engine << ", " << T << (T == 1 ? " tile" : " tiles")
    << " */\n";
  if (!c.loop && ins.empty() && !out_hop) {
    w << "  ${__compute}\n";
    c.wrapper = w.str();
    c.seg.passes.push_back("tile_loop");
    return;
  }

  auto regions = [&](const std::string& tile_expr, const std::string& ro, const std::string& rk, const std::string& ind) {
    std::string s = ind + "td_tile_region(" + tile_expr + ", " + std::to_string(oo.full_shape.size()) +
                    ", fo, to, &" + ro + ");\n";
    for (int k : c.region_ops)
      s += ind + "td_operand_region(&" + ro + ", " + std::to_string(st.operands[k].full_shape.size()) + ", l" +
           std::to_string(k) + ", f" + std::to_string(k) + ", &" + rk + std::to_string(k) + ");\n";
    return s;
  };

  w << "  {\n";
  w << "    static const int32_t fo[] = " << int_list(oo.full_shape) << ", to[] = " << int_list(tile) << ";\n";
  for (int k : c.region_ops)
    w << "    static const int32_t f" << k << "[] = " << int_list(st.operands[k].full_shape) << ", l" << k
      << "[] = " << int_list(st.operands[k].links) << ";\n";
  std::string decl = "    td_region ro";
  for (int k : c.region_ops) decl += ", r" + std::to_string(k);
  if (c.loop && c.db) {
    decl += ", no";
    for (int k : c.region_ops) decl += ", n" + std::to_string(k);
    if (out_hop) decl += ", pr";
  }
  w << decl << ";\n";

  if (!c.loop) {
    w << "    int32_t h = -1;\n";
    w << regions("0", "ro", "r", "    ");
    for (int k : ins) w << "    " << fetch_stmt(c, k, "h", "", "r" + std::to_string(k)) << "\n";
    w << "    td_wait(h);\n";
    w << "    ${__compute}\n";
    if (out_hop) {
      w << "    " << writeback_stmt(c, "h", "", "ro") << "\n";
      w << "    td_wait(h);\n";
    }
  } else if (!c.db) {
    w << "    int32_t k;\n";
    w << "    for (k = 0; k < " << T << "; ++k) {\n";
    w << "      int32_t h = -1;\n";
    w << regions("k", "ro", "r", "      ");
    for (int k : ins) {
      const std::string f = fetch_stmt(c, k, "h", "", "r" + std::to_string(k));
      w << "      " << (st.operands[k].stationary ? "if (k == 0) " : "") << f << "\n";
    }
    w << "      td_wait(h);\n";
    w << "      ${__compute}\n";
    if (out_hop) {
      w << "      " << writeback_stmt(c, "h", "", "ro") << "\n";
      w << "      td_wait(h);\n";
    }
    w << "    }\n";
  } else {
    bool moving = false;
    for (int k : ins) moving = moving || !st.operands[k].stationary;
    w << "    int32_t k, h_in = -1" << (out_hop ? ", h_out = -1" : "") << ";\n";
    w << regions("0", "ro", "r", "    ");
    for (int k : ins)
      w << "    " << fetch_stmt(c, k, "h_in", st.operands[k].stationary ? "" : "0", "r" + std::to_string(k)) << "\n";
    w << "    for (k = 0; k < " << T << "; ++k) {\n";
    std::string hs;
    if (moving) hs += "h_next = -1";
    if (out_hop) hs += std::string(hs.empty() ? "" : ", ") + "h_wb = -1";
    if (!hs.empty()) w << "      int32_t " << hs << ";\n";
    w << "      if (k + 1 < " << T << ") {\n";
    w << regions("k + 1", "no", "n", "        ");
    for (int k : ins)
      if (!st.operands[k].stationary)
        w << "        " << fetch_stmt(c, k, "h_next", "((k + 1) & 1)", "n" + std::to_string(k)) << "\n";
    w << "      }\n";
    if (out_hop) w << "      if (k > 0) " << writeback_stmt(c, "h_wb", "((k - 1) & 1)", "pr") << "\n";
    w << "      td_wait(h_in);\n";
    if (out_hop) w << "      td_wait(h_out);\n";
    w << "      ${__compute}\n";
    w << "      h_in = " << (moving ? "h_next" : "-1") << ";\n";
    if (out_hop) w << "      h_out = h_wb;\n      pr = ro;\n";
    w << "      if (k + 1 < " << T << ") {\n";
    w << "        ro = no;\n";
    for (int k : c.region_ops) w << "        r" << k << " = n" << k << ";\n";
    w << "      }\n";
    w << "    }\n";
    if (out_hop) {
      w << "    " << writeback_stmt(c, "h_in", "((" + std::to_string(T) + " - 1) & 1)", "pr") << "\n";
      w << "    td_wait(h_out);\n";
      w << "    td_wait(h_in);\n";
    }
  }
  w << "  }\n";
  c.wrapper = w.str();
  c.seg.passes.push_back("tile_loop");
}

void pass_closure(StepContext& c, CodeSegment& out) {
  require_pass(c.seg, "tile_loop", "closure");
  if (c.st.engine == c.t.host) {
    c.compute = c.seg.render();
  } else {
    const std::string fn = "td_cl_" + std::to_string(&c.st - c.p.steps.data()) + "_" + sanitize(c.node.name);
    const Closure cl = make_closure(c.seg, c.names.globals, fn, engine_macro(c.st.engine));
    c.compute = cl.invocation;
    out.hoisted.push_back(cl.definition);
  }
  c.seg.passes.push_back("closure");
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<std::string> CodeSegment::first_use() const {
  std::vector<std::string> names;
  size_t pos = 0;
  while ((pos = text.find("${", pos)) != std::string::npos) {
    const size_t end = text.find('}', pos);
    if (end == std::string::npos) break;
    const std::string name = text.substr(pos + 2, end - pos - 2);
    if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
    pos = end + 1;
  }
  return names;
}

const FreeVar* CodeSegment::find(const std::string& name) const {
  for (const auto& v : vars)
    if (v.name == name) return &v;
  return nullptr;
}

std::string CodeSegment::render() const {
  std::string s = text;
  for (const auto& name : first_use()) {
    const FreeVar* v = find(name);
    if (!v || v->binding.empty()) throw Error("free variable '" + name + "' has no binding");
    s = replace_all(s, "${" + name + "}", v->binding);
  }
  return s;
}

Closure make_closure(const CodeSegment& seg, const std::set<std::string>& globals, const std::string& function,
                     const std::string& engine) {
  Closure cl;
  cl.function = function;
  std::string body = seg.text;
  for (const auto& name : seg.first_use()) {
    const FreeVar* v = seg.find(name);
    if (!v || v->binding.empty()) throw Error("free variable '" + name + "' has no binding");
    if (globals.count(v->binding)) {
      body = replace_all(body, "${" + name + "}", v->binding);
    } else {
      cl.env.push_back(*v);
      body = replace_all(body, "${" + name + "}", "e->" + name);
    }
  }
  std::ostringstream d;
  for (const auto& h : seg.hoisted) d << h << "\n";
  if (!cl.env.empty()) {
    cl.env_type = "struct td_env_" + function;
    d << cl.env_type << " {\n";
    for (const auto& v : cl.env) d << "  " << v.type << " " << v.name << ";\n";
    d << "};\n\n";
  }
  d << "static void " << function << "(void* env) {\n";
  if (cl.env.empty()) {
    d << "  (void)env;\n";
  } else {
    d << "  const " << cl.env_type << "* e = (const " << cl.env_type << "*)env;\n";
  }
  d << "  " << body << "\n}\n";
  cl.definition = d.str();

  std::string arg = "0";
  std::string inv;
  if (!cl.env.empty()) {
    inv = "{ " + cl.env_type + " env = {";
    for (size_t i = 0; i < cl.env.size(); ++i) inv += (i ? ", " : "") + cl.env[i].binding;
    inv += "}; ";
    arg = "&env";
  }
  if (engine.empty()) {
    inv += function + "(" + arg + ");";
  } else {
    inv += "offload(" + engine + ", " + function + ", " + arg + "); offload_wait(" + engine + ");";
  }
  if (!cl.env.empty()) inv += " }";
  cl.invocation = inv;
  return cl;
}

EmitNames emit_names(const Program& p) {
  EmitNames n;
  n.prefix = sanitize(p.name);
  std::set<std::string> used;
  for (size_t i = 0; i < p.allocations.size(); ++i) {
    const Allocation& a = p.allocations[i];
    const char* kind = a.kind == AllocationItem::Kind::Home ? "td_h_" : a.kind == AllocationItem::Kind::Arena ? "td_a_" : "td_s_";
    std::string name = kind + sanitize(a.symbol);
    if (used.count(name)) name += "_" + std::to_string(i);
    used.insert(name);
    n.allocation.push_back(name);
    n.globals.insert(name);
  }
  return n;
}

CodeSegment gen_node_code(const Graph& g, const Program& p, int step, const TargetDescription& t,
                          const EmitNames& names) {
  const ProgramStep& st = p.steps.at(step);
  const Node& node = g.nodes.at(st.node);
  StepContext c{g, p, st, node, t, names, {}, {}, 0, false, p.double_buffer, {}, {}, {}, {}};
  for (const auto& in : node.inputs) c.shapes.push_back(g.buffer(in).shape);
  c.shapes.push_back(g.buffer(node.outputs.at(0)).shape);
  c.args = kernel_args(node, c.shapes);
  c.out = output_operand(st);
  c.loop = st.tiles.size() > 1;

  const KernelRegistry reg = build_registry(t, std::vector<std::string>{st.engine});
  const KernelTemplate* k = reg.find(st.kernel_id);
  if (!k) throw Error("step '" + st.node_name + "': unknown kernel '" + st.kernel_id + "'");

  CodeSegment out;
  for (const auto& pass : k->passes) {
    if (pass == "instantiate") {
      pass_instantiate(c, k->text);
    } else if (pass == "bind_allocation") {
      pass_bind_allocation(c);
    } else if (pass == "tile_loop") {
      pass_tile_loop(c);
    } else if (pass == "closure") {
      pass_closure(c, out);
    } else {
      throw Error("kernel '" + k->id + "': unknown code generation pass '" + pass + "'");
    }
  }
  if (c.compute.empty()) c.compute = c.seg.render();
  out.text = replace_all(c.wrapper, "${__compute}", c.compute);
  out.passes = c.seg.passes;
  return out;
}

std::vector<std::pair<std::string, std::string>> SourceArtifact::files() const {
  return {{name + ".c", source}, {name + "_runtime.h", runtime_header}, {name + "_manifest.txt", manifest}};
}

SourceArtifact emit(const Graph& g, const Program& p, const TargetDescription& t) {
  SourceArtifact art;
  const EmitNames names = emit_names(p);
  art.name = names.prefix;
  art.entry = names.prefix + "_run";
  art.init = names.prefix + "_init";

  // Runtime header.
  {
    const std::string guard = upper(names.prefix) + "_RUNTIME_H_";
    std::ostringstream h;
    h << "/* Runtime primitives required by " << names.prefix << ".c. Generated by tinydeploy. */\n"
      << "#ifndef " << guard << "\n#define " << guard << "\n\n#include <stdint.h>\n\n"
      << "typedef void (*td_closure_fn)(void* env);\n\n"
      << "/* Starts a strided copy of rows x row_bytes; returns a handle. Copies complete in issue order. */\n"
      << "int32_t dma_copy_2d(const void* src, void* dst, int32_t rows, int32_t row_bytes, int32_t src_stride,\n"
      << "                    int32_t dst_stride);\n"
      << "void dma_wait(int32_t handle);\n"
      << "/* Runs fn(env) on an engine; at most one offload per engine is outstanding. */\n"
      << "void offload(int32_t engine_id, td_closure_fn fn, void* env);\n"
      << "void offload_wait(int32_t engine_id);\n\n#endif\n";
    art.runtime_header = h.str();
  }

  // Manifest.
  {
    std::ostringstream m;
    m << "symbol\tlevel\toffset\tsize\n";
    for (const auto& a : p.allocations) m << a.symbol << "\t" << a.level << "\t" << a.offset << "\t" << a.size << "\n";
    art.manifest = m.str();
  }

  // Step code first: it decides which library parts are needed.
  std::vector<CodeSegment> segs;
  bool tiling = false, copies = false;
  std::set<std::string> used;
  for (size_t s = 0; s < p.steps.size(); ++s) {
    segs.push_back(gen_node_code(g, p, static_cast<int>(s), t, names));
    used.insert(p.steps[s].c_function);
    const std::string& text = segs.back().text;
    tiling = tiling || text.find("td_tile_region") != std::string::npos;
    copies = copies || text.find("td_wait(") != std::string::npos;
  }
  std::function<void(const std::string&)> need = [&](const std::string& name) {
    for (const auto& e : library())
      if (name == e.name) {
        for (const char* d : e.deps) need(d);
      }
    used.insert(name);
  };
  for (const auto& f : std::set<std::string>(used)) need(f);

  std::ostringstream c;
  c << "/* " << names.prefix << " for target " << t.name << ". Generated by tinydeploy. */\n"
    << "#include <stdint.h>\n#include <string.h>\n\n#include \"" << names.prefix << "_runtime.h\"\n\n";
  for (size_t e = 0; e < t.engines.size(); ++e)
    c << "#define " << engine_macro(t.engines[e].name) << " " << e << "\n";
  c << "\n";

  std::set<std::string> with_arena;
  for (const auto& l : t.levels) {
    const auto it = p.peaks.find(l.name);
    const int64_t peak = it == p.peaks.end() ? 0 : it->second;
    if (peak == 0) continue;
    c << "uint8_t " << arena_name(names.prefix, l.name) << "[" << peak << "];\n";
    art.arenas.push_back({l.name, peak});
    with_arena.insert(l.name);
  }
  if (!art.arenas.empty()) c << "\n";
  for (size_t i = 0; i < p.allocations.size(); ++i) {
    const Allocation& a = p.allocations[i];
    const std::string base = with_arena.count(a.level) ? arena_name(names.prefix, a.level) : "((uint8_t*)0)";
    c << "#define " << names.allocation[i] << " (" << base << " + " << a.offset << ")\n";
  }
  if (!p.allocations.empty()) c << "\n";

  std::vector<std::pair<std::string, std::string>> consts;  // home macro, data array
  for (const auto& b : g.buffers) {
    if (!b.is_constant() || b.payload.empty()) continue;
    const int i = p.find_allocation(b.name);
    if (i < 0) throw Error("constant '" + b.name + "' has no allocation");
    const std::string arr = "td_c_" + names.allocation[i].substr(5);
    consts.push_back({names.allocation[i], arr});
    c << "static const uint8_t " << arr << "[" << b.payload.size() << "] = {";
    for (size_t j = 0; j < b.payload.size(); ++j) {
      char hex[8];
      std::snprintf(hex, sizeof hex, "0x%02x", b.payload[j]);
      c << (j % 16 == 0 ? "\n  " : " ") << hex << (j + 1 < b.payload.size() ? "," : "");
    }
    c << "\n};\n\n";
  }

  for (const auto& e : library())
    if (used.count(e.name)) c << e.code << "\n";
  if (tiling || copies) c << kTilingSupport << "\n";
  if (copies) c << kCopySupport << "\n";
  for (const auto& seg : segs)
    for (const auto& h : seg.hoisted) c << h << "\n";

  c << "void " << art.init << "(void) {\n";
  for (const auto& [home, arr] : consts) c << "  memcpy(" << home << ", " << arr << ", sizeof " << arr << ");\n";
  c << "}\n\n";
  c << "void " << art.entry << "(void) {\n";
  for (const auto& seg : segs) c << seg.text;
  c << "}\n";
  art.source = c.str();
  return art;
}

}  // namespace tinydeploy
