// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tinydeploy/zoo.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "tinydeploy/ops.hpp"
#include "tinydeploy/tensor.hpp"

namespace tinydeploy {

namespace zoo_names {
std::string k_cache_in(int64_t layer) { return "l" + std::to_string(layer) + "_k_cache_in"; }
std::string v_cache_in(int64_t layer) { return "l" + std::to_string(layer) + "_v_cache_in"; }
std::string k_cache_out(int64_t layer) { return "l" + std::to_string(layer) + "_k_cache"; }
std::string v_cache_out(int64_t layer) { return "l" + std::to_string(layer) + "_v_cache"; }
}  // namespace zoo_names

void LlamaConfig::validate() const {
  if (d_m <= 0 || h <= 0 || d_m % h) throw Error("llama config: d_m must be a positive multiple of h");
  if ((d_m / h) % 2) throw Error("llama config: head dimension must be even");
  if (n_layers <= 0) throw Error("llama config: n_layers must be positive");
  if (d_ff <= 0 || vocab <= 0 || context <= 0) throw Error("llama config: sizes must be positive");
  if (mode == Mode::Parallel && (seq <= 0 || seq > context))
    throw Error("llama config: seq must be in [1, context]");
  if (mode == Mode::Autoregressive && (past < 0 || past + 1 > context))
    throw Error("llama config: past must be in [0, context - 1]");
}

namespace {

constexpr int32_t kCalibShift = 24;
constexpr int64_t kCalibTarget = 100;  // calibrated outputs span about +-100
constexpr int64_t kCalibTokens = 8;

using Params = std::map<std::string, Requant>;

class Builder {
 public:
  Builder(uint64_t seed, const Params* params) : rng_(static_cast<uint32_t>(seed)), params_(params) {}

  Graph g;

  std::string input(const std::string& name, Shape shape, DataType dt) {
    add({name, BufferKind::Variable, Scope::Global, std::move(shape), dt, {}, {}});
    g.inputs.push_back(name);
    return name;
  }

  std::string weight_i8(const std::string& name, Shape shape, int lo = -128, int hi = 127) {
    Buffer b{name, BufferKind::Constant, Scope::Global, std::move(shape), dtypes::kInt8, {}, {}};
    b.payload.resize(static_cast<size_t>(b.elements()));
    for (auto& v : b.payload) v = static_cast<uint8_t>(static_cast<int8_t>(draw(lo, hi)));
    add(std::move(b));
    return name;
  }

  std::string weight_i32(const std::string& name, Shape shape, int lo, int hi) {
    Buffer b{name, BufferKind::Constant, Scope::Global, std::move(shape), dtypes::kInt32, {}, {}};
    Tensor t(b.shape, dtypes::kInt32);
    for (int64_t i = 0; i < t.elements(); ++i) t.set(i, draw(lo, hi));
    b.payload = t.data;
    add(std::move(b));
    return name;
  }

  std::string table_i16(const std::string& name, Shape shape, const std::vector<int64_t>& values) {
    Buffer b{name, BufferKind::Constant, Scope::Global, std::move(shape), dtypes::kInt16, {}, {}};
    Tensor t(b.shape, dtypes::kInt16);
    for (size_t i = 0; i < values.size(); ++i) t.set(static_cast<int64_t>(i), values[i]);
    b.payload = t.data;
    add(std::move(b));
    return name;
  }

  /// Adds a node named `name` whose output buffer is also `name`.
  std::string node(const std::string& name, const std::string& op, Attrs attrs, std::vector<std::string> inputs) {
    Node n;
    n.name = "n_" + name;
    n.op = op;
    n.attrs = std::move(attrs);
    n.inputs = std::move(inputs);
    n.outputs = {name};
    std::vector<Shape> shapes;
    for (const auto& i : n.inputs) shapes.push_back(g.buffer(i).shape);
    Buffer out{name, BufferKind::Variable, Scope::Local, infer_output_shapes(n, shapes).at(0), std::nullopt, {}, {}};
    add(std::move(out));
    g.nodes.push_back(std::move(n));
    return name;
  }

  Attrs requant(const std::string& name, Attrs extra = {}) const {
    Requant rq{1, kCalibShift, 0};
    if (params_) {
      auto it = params_->find("n_" + name);
      if (it != params_->end()) rq = it->second;
    }
    extra["mul"] = int64_t{rq.mul};
    extra["shift"] = int64_t{rq.shift};
    extra["zp"] = int64_t{rq.zp};
    return extra;
  }

  void output(const std::string& name) { g.outputs.push_back(name); }

  int64_t draw(int64_t lo, int64_t hi) { return lo + static_cast<int64_t>(rng_() % static_cast<uint32_t>(hi - lo + 1)); }

 private:
  void add(Buffer b) { g.add_buffer(std::move(b)); }

  std::mt19937 rng_;
  const Params* params_;
};

std::string L(int64_t layer, const std::string& s) { return "l" + std::to_string(layer) + "_" + s; }

// Projection y = requant(x W + b).
std::string linear(Builder& b, const std::string& name, const std::string& x, const std::string& w,
                   const std::string& bias) {
  std::vector<std::string> in{x, w};
  if (!bias.empty()) in.push_back(bias);
  const std::string acc = b.node(name + "_acc", ops::kGemm, {}, in);
  return b.node(name, ops::kRequant, b.requant(name), {acc});
}

Attrs softmax_attrs(bool causal, int64_t offset) {
  Attrs a{{"axis", int64_t{2}}, {"ln2_q", int64_t{11}}, {"b_q", int64_t{21}}, {"c_q", int64_t{245}},
          {"out_bits", int64_t{7}}};
  if (causal) {
    a["causal"] = int64_t{1};
    a["causal_offset"] = offset;
  }
  return a;
}

struct LayerWeights {
  std::string g1, wq, bq, wk, bk, wv, bv, wo, g2, wg, wu, wd;
};

LayerWeights layer_weights(Builder& b, int64_t l, int64_t d, int64_t dff) {
  LayerWeights w;
  w.g1 = b.weight_i8(L(l, "attn_norm"), {d}, 64, 127);
  w.wq = b.weight_i8(L(l, "wq"), {d, d});
  w.bq = b.weight_i32(L(l, "bq"), {d}, -512, 512);
  w.wk = b.weight_i8(L(l, "wk"), {d, d});
  w.bk = b.weight_i32(L(l, "bk"), {d}, -512, 512);
  w.wv = b.weight_i8(L(l, "wv"), {d, d});
  w.bv = b.weight_i32(L(l, "bv"), {d}, -512, 512);
  w.wo = b.weight_i8(L(l, "wo"), {d, d});
  w.g2 = b.weight_i8(L(l, "ffn_norm"), {d}, 64, 127);
  w.wg = b.weight_i8(L(l, "w_gate"), {d, dff});
  w.wu = b.weight_i8(L(l, "w_up"), {d, dff});
  w.wd = b.weight_i8(L(l, "w_down"), {dff, d});
  return w;
}

struct Rotary {
  std::string cos, sin;
};

struct AttentionIo {
  bool rotary = false;
  bool causal = false;
  bool caches = false;
  int64_t past = 0;
  Rotary tables;
};

std::string block(Builder& b, int64_t l, const std::string& x, int64_t seq, int64_t d, int64_t h,
                  const LayerWeights& w, const AttentionIo& io) {
  const int64_t dh = d / h;
  const std::string n1 = b.node(L(l, "attn_in"), ops::kRmsNorm, b.requant(L(l, "attn_in"), {{"eps_q", int64_t{1}}, {"k", int64_t{16}}}),
                                {x, w.g1});
  const std::string q = linear(b, L(l, "q"), n1, w.wq, w.bq);
  const std::string k = linear(b, L(l, "k"), n1, w.wk, w.bk);
  const std::string v = linear(b, L(l, "v"), n1, w.wv, w.bv);
  const std::vector<int64_t> heads{seq, h, dh};
  std::string q3 = b.node(L(l, "q_heads"), ops::kReshape, {{"shape", heads}}, {q});
  // The first cached step exposes its fresh keys and values under the cache names.
  const bool fresh = io.caches && io.past == 0;
  const std::string k_last = fresh ? zoo_names::k_cache_out(l) : L(l, io.rotary ? "k_rot" : "k_heads");
  std::string k3 = b.node(io.rotary ? L(l, "k_heads") : k_last, ops::kReshape, {{"shape", heads}}, {k});
  std::string v3 = b.node(fresh ? zoo_names::v_cache_out(l) : L(l, "v_heads"), ops::kReshape, {{"shape", heads}}, {v});
  if (io.rotary) {
    const Attrs rot{{"pos", io.past}, {"mul", int64_t{1}}, {"shift", int64_t{15}}, {"zp", int64_t{0}}};
    q3 = b.node(L(l, "q_rot"), ops::kRope, rot, {q3, io.tables.cos, io.tables.sin});
    k3 = b.node(k_last, ops::kRope, rot, {k3, io.tables.cos, io.tables.sin});
  }
  if (io.caches) {
    if (io.past > 0) {
      const std::string kin = b.input(zoo_names::k_cache_in(l), {io.past, h, dh}, dtypes::kInt8);
      const std::string vin = b.input(zoo_names::v_cache_in(l), {io.past, h, dh}, dtypes::kInt8);
      k3 = b.node(zoo_names::k_cache_out(l), ops::kConcatSeq, {}, {kin, k3});
      v3 = b.node(zoo_names::v_cache_out(l), ops::kConcatSeq, {}, {vin, v3});
    }
    b.output(k3);
    b.output(v3);
  }
  const std::vector<int64_t> swap{1, 0, 2};
  const std::string qt = b.node(L(l, "q_t"), ops::kTranspose, {{"perm", swap}}, {q3});
  const std::string kt = b.node(L(l, "k_t"), ops::kTranspose, {{"perm", swap}}, {k3});
  const std::string vt = b.node(L(l, "v_t"), ops::kTranspose, {{"perm", swap}}, {v3});
  const std::string s_acc = b.node(L(l, "scores_acc"), ops::kGemm, {{"trans_b", int64_t{1}}}, {qt, kt});
  const std::string s = b.node(L(l, "scores"), ops::kRequant, b.requant(L(l, "scores")), {s_acc});
  const std::string p = b.node(L(l, "probs"), ops::kSoftmax, softmax_attrs(io.causal, io.past), {s});
  const std::string c_acc = b.node(L(l, "ctx_acc"), ops::kGemm, {}, {p, vt});
  const std::string c = b.node(L(l, "ctx"), ops::kRequant, b.requant(L(l, "ctx")), {c_acc});
  const std::string ct = b.node(L(l, "ctx_t"), ops::kTranspose, {{"perm", swap}}, {c});
  const std::string c2 = b.node(L(l, "ctx_rows"), ops::kReshape, {{"shape", std::vector<int64_t>{seq, d}}}, {ct});
  const std::string o = linear(b, L(l, "o"), c2, w.wo, "");
  const std::string r1 = b.node(L(l, "attn_res"), ops::kAddRequant, b.requant(L(l, "attn_res")), {x, o});
  const std::string n2 = b.node(L(l, "ffn_in"), ops::kRmsNorm, b.requant(L(l, "ffn_in"), {{"eps_q", int64_t{1}}, {"k", int64_t{16}}}),
                                {r1, w.g2});
  const std::string gate = linear(b, L(l, "gate"), n2, w.wg, "");
  const std::string up = linear(b, L(l, "up"), n2, w.wu, "");
  const std::string act = b.node(L(l, "gate_act"), ops::kHardswish,
                                 b.requant(L(l, "gate_act"), {{"three", int64_t{48}}, {"six", int64_t{96}}}), {gate});
  const std::string m = b.node(L(l, "gated"), ops::kMulRequant, b.requant(L(l, "gated")), {act, up});
  const std::string down = linear(b, L(l, "down"), m, w.wd, "");
  return b.node(L(l, "ffn_res"), ops::kAddRequant, b.requant(L(l, "ffn_res")), {r1, down});
}

Rotary rotary_tables(Builder& b, int64_t context, int64_t dh) {
  const int64_t half = dh / 2;
  std::vector<int64_t> c, s;
  for (int64_t p = 0; p < context; ++p)
    for (int64_t i = 0; i < half; ++i) {
      const double theta = static_cast<double>(p) * std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      c.push_back(std::llround(std::cos(theta) * 32767.0));
      s.push_back(std::llround(std::sin(theta) * 32767.0));
    }
  return {b.table_i16("rope_cos", {context, half}, c), b.table_i16("rope_sin", {context, half}, s)};
}

Graph llama_graph(const LlamaConfig& cfg, const Params* params) {
  Builder b(cfg.seed, params);
  const bool ar = cfg.mode == LlamaConfig::Mode::Autoregressive;
  const int64_t seq = ar ? 1 : cfg.seq;
  const int64_t past = ar ? cfg.past : 0;
  const std::string emb = b.weight_i8("embedding", {cfg.vocab, cfg.d_m});
  const Rotary rot = rotary_tables(b, cfg.context, cfg.d_m / cfg.h);
  std::vector<LayerWeights> weights;
  for (int64_t l = 0; l < cfg.n_layers; ++l) weights.push_back(layer_weights(b, l, cfg.d_m, cfg.d_ff));
  const std::string final_norm = b.weight_i8("final_norm", {cfg.d_m}, 64, 127);
  const std::string lm_head = b.weight_i8("lm_head", {cfg.d_m, cfg.vocab});

  const std::string tokens = b.input(zoo_names::kTokens, {seq}, dtypes::kInt32);
  std::string x = b.node("embed", ops::kGatherRows, {}, {emb, tokens});
  AttentionIo io{true, true, true, past, rot};
  for (int64_t l = 0; l < cfg.n_layers; ++l) x = block(b, l, x, seq, cfg.d_m, cfg.h, weights[l], io);
  const std::string nf =
      b.node("final", ops::kRmsNorm, b.requant("final", {{"eps_q", int64_t{1}}, {"k", int64_t{16}}}), {x, final_norm});
  const std::string logits = linear(b, zoo_names::kLogits, nf, lm_head, "");
  b.output(logits);
  // Graph outputs listed logits first.
  std::rotate(b.g.outputs.begin(), b.g.outputs.end() - 1, b.g.outputs.end());
  require_valid(b.g);
  return b.g;
}

// ---------------------------------------------------------------------------
// Calibration

int64_t max_abs(const std::vector<int64_t>& v) {
  int64_t m = 0;
  for (int64_t x : v) m = std::max(m, x < 0 ? -x : x);
  return m;
}

std::vector<int64_t> raw_values(const Node& n, const std::vector<Tensor>& in) {
  std::vector<int64_t> raw;
  if (n.op == ops::kRequant) return in[0].values();
  if (n.op == ops::kAddRequant || n.op == ops::kMulRequant) {
    const auto a = in[0].values(), b = in[1].values();
    for (size_t i = 0; i < a.size(); ++i) raw.push_back(n.op == ops::kAddRequant ? a[i] + b[i] : a[i] * b[i]);
    return raw;
  }
  if (n.op == ops::kHardswish) {
    const int64_t three = n.attr_int("three"), six = n.attr_int("six");
    for (int64_t x : in[0].values()) raw.push_back(x * std::clamp<int64_t>(x + three, 0, six));
    return raw;
  }
  if (n.op == ops::kRmsNorm) {
    const auto x = in[0].values(), w = in[1].values();
    const int64_t d = static_cast<int64_t>(w.size());
    const int64_t k = n.attr_int("k"), eps = n.attr_int("eps_q");
    for (size_t r = 0; r < x.size() / d; ++r) {
      int32_t sum = 0;
      for (int64_t i = 0; i < d; ++i) sum += static_cast<int32_t>(x[r * d + i] * x[r * d + i]);
      const auto rms = static_cast<int32_t>(isqrt_newton(sum / static_cast<int32_t>(d) + eps));
      for (int64_t i = 0; i < d; ++i)
        raw.push_back(static_cast<int32_t>(x[r * d + i] * w[i] * (int64_t{1} << k)) / rms);
    }
    return raw;
  }
  return raw;
}

bool calibrated(const Node& n) {
  return n.op == ops::kRequant || n.op == ops::kAddRequant || n.op == ops::kMulRequant || n.op == ops::kHardswish ||
         n.op == ops::kRmsNorm;
}

/// Runs `g` once, fixing each requantizing node from the values it sees.
Params calibrate(Graph g, const std::map<std::string, Tensor>& inputs) {
  Params params;
  std::map<std::string, Tensor> values = inputs;
  for (const auto& b : g.buffers)
    if (b.is_constant()) values[b.name] = Tensor(b.shape, *b.dtype, b.payload);
  for (int idx : topo_schedule(g).order) {
    Node& n = g.nodes[idx];
    std::vector<Tensor> in;
    for (const auto& i : n.inputs) in.push_back(values.at(i));
    if (calibrated(n)) {
      const int64_t m = std::max<int64_t>(max_abs(raw_values(n, in)), 1);
      const double mul = std::round(static_cast<double>(kCalibTarget) * std::ldexp(1.0, kCalibShift) / static_cast<double>(m));
      Requant rq{static_cast<int32_t>(std::clamp(mul, 1.0, 2147483647.0)), kCalibShift, 0};
      n.attrs["mul"] = int64_t{rq.mul};
      n.attrs["shift"] = int64_t{rq.shift};
      n.attrs["zp"] = int64_t{0};
      params[n.name] = rq;
    }
    values[n.outputs[0]] = evaluate_node(n, in);
  }
  return params;
}

std::map<std::string, Tensor> calibration_tokens(uint64_t seed, int64_t vocab) {
  std::mt19937 rng(static_cast<uint32_t>(seed ^ 0x5eedu));
  Tensor t({kCalibTokens}, dtypes::kInt32);
  for (int64_t i = 0; i < kCalibTokens; ++i) t.set(i, static_cast<int64_t>(rng() % static_cast<uint32_t>(vocab)));
  return {{zoo_names::kTokens, t}};
}

}  // namespace

Graph build_llama(const LlamaConfig& cfg) {
  cfg.validate();
  LlamaConfig cal = cfg;
  cal.mode = LlamaConfig::Mode::Parallel;
  cal.seq = std::min<int64_t>(kCalibTokens, cfg.context);
  cal.past = 0;
  auto inputs = calibration_tokens(cfg.seed, cfg.vocab);
  if (cal.seq < kCalibTokens) inputs.begin()->second = Tensor({cal.seq}, dtypes::kInt32);
  const Params params = calibrate(llama_graph(cal, nullptr), inputs);
  return llama_graph(cfg, &params);
}

Graph build_encoder_layer(int64_t d_m, int64_t h, int64_t d_ff, int64_t seq, uint64_t seed) {
  if (d_m <= 0 || h <= 0 || d_m % h || d_ff <= 0 || seq <= 0)
    throw Error("encoder config: need d_m a positive multiple of h, positive d_ff and seq");
  auto make = [&](const Params* params) {
    Builder b(seed, params);
    const LayerWeights w = layer_weights(b, 0, d_m, d_ff);
    const std::string x = b.input(zoo_names::kHidden, {seq, d_m}, dtypes::kInt8);
    AttentionIo io;
    b.output(block(b, 0, x, seq, d_m, h, w, io));
    require_valid(b.g);
    return b.g;
  };
  const Graph first = make(nullptr);
  std::mt19937 rng(static_cast<uint32_t>(seed ^ 0x5eedu));
  Tensor x({seq, d_m}, dtypes::kInt8);
  for (int64_t i = 0; i < x.elements(); ++i) x.set(i, static_cast<int64_t>(rng() % 256) - 128);
  const Params params = calibrate(first, {{zoo_names::kHidden, x}});
  return make(&params);
}

Graph build_identity(const Shape& shape) {
  Graph g;
  g.add_buffer({zoo_names::kHidden, BufferKind::Variable, Scope::Global, shape, dtypes::kInt8, {}, {}});
  g.inputs = {zoo_names::kHidden};
  g.outputs = {zoo_names::kHidden};
  require_valid(g);
  return g;
}

Graph build_gemm_chain(int64_t rows, int64_t width, int64_t count, uint64_t seed) {
  if (rows <= 0 || width <= 0 || count <= 0) throw Error("gemm chain: sizes must be positive");
  auto make = [&](const Params* params) {
    Builder b(seed, params);
    std::vector<std::pair<std::string, std::string>> w;
    for (int64_t i = 0; i < count; ++i)
      w.emplace_back(b.weight_i8("w" + std::to_string(i), {width, width}),
                     b.weight_i32("b" + std::to_string(i), {width}, -512, 512));
    std::string x = b.input(zoo_names::kHidden, {rows, width}, dtypes::kInt8);
    for (int64_t i = 0; i < count; ++i) x = linear(b, "y" + std::to_string(i), x, w[i].first, w[i].second);
    b.output(x);
    require_valid(b.g);
    return b.g;
  };
  const Graph first = make(nullptr);
  std::mt19937 rng(static_cast<uint32_t>(seed ^ 0x5eedu));
  Tensor x({rows, width}, dtypes::kInt8);
  for (int64_t i = 0; i < x.elements(); ++i) x.set(i, static_cast<int64_t>(rng() % 256) - 128);
  const Params params = calibrate(first, {{zoo_names::kHidden, x}});
  return make(&params);
}

int64_t count_macs(const Graph& g) {
  int64_t macs = 0;
  for (const auto& n : g.nodes) {
    if (n.op != ops::kGemm && n.op != ops::kGemmQ8 && n.op != ops::kPwConv) continue;
    std::vector<Shape> in, out;
    for (const auto& i : n.inputs) in.push_back(g.buffer(i).shape);
    for (const auto& o : n.outputs) out.push_back(g.buffer(o).shape);
    macs += op_work(n, in, out);
  }
  return macs;
}

int64_t argmax_last_row(const std::vector<int64_t>& logits, int64_t width) {
  if (width <= 0 || logits.size() < static_cast<size_t>(width)) throw Error("argmax: empty logits");
  const auto row = logits.end() - width;
  return std::max_element(row, logits.end()) - row;
}

}  // namespace tinydeploy
