// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tinydeploy/frontend.hpp"

#include <algorithm>
#include <cstring>
#include <set>

#include "tinydeploy/ops.hpp"
#include "tinydeploy/tensor.hpp"

namespace tinydeploy {

// ---------------------------------------------------------------------------
// Pattern matching

namespace {

bool single_private_reader(const Graph& g, const std::string& buffer, int reader) {
  if (g.is_graph_output(buffer)) return false;
  auto c = g.consumers(buffer);
  return c.size() == 1 && c[0] == reader;
}

bool step_matches(const PatternStep& step, const Node& n, const Graph& g) {
  return n.op == step.op && (!step.predicate || step.predicate(n, g));
}

std::vector<std::string> names_of(const Graph& g, const std::vector<int>& idx) {
  std::vector<std::string> out;
  for (int i : idx) out.push_back(g.nodes[i].name);
  return out;
}

}  // namespace

std::vector<int> find_match(const Graph& g, const Pass& pass,
                            const std::vector<std::vector<std::string>>& declined) {
  if (pass.pattern.empty()) return {};
  const Schedule s = topo_schedule(g);
  for (int start : s.order) {
    std::vector<int> chain{start};
    if (!step_matches(pass.pattern[0], g.nodes[start], g)) continue;
    bool ok = true;
    for (size_t k = 1; k < pass.pattern.size() && ok; ++k) {
      const Node& prev = g.nodes[chain.back()];
      ok = false;
      if (prev.outputs.size() != 1) break;
      auto readers = g.consumers(prev.outputs[0]);
      if (readers.size() != 1 || !single_private_reader(g, prev.outputs[0], readers[0])) break;
      if (!step_matches(pass.pattern[k], g.nodes[readers[0]], g)) break;
      chain.push_back(readers[0]);
      ok = true;
    }
    if (!ok) continue;
    if (std::find(declined.begin(), declined.end(), names_of(g, chain)) != declined.end()) continue;
    return chain;
  }
  return {};
}

Graph apply_passes(const Graph& input, const std::vector<Pass>& passes) {
  Graph g = input;
  for (const Pass& pass : passes) {
    const size_t guard = std::max<size_t>(10 * g.nodes.size(), 10);
    size_t rewrites = 0;
    std::vector<std::vector<std::string>> declined;
    while (true) {
      auto m = find_match(g, pass, declined);
      if (m.empty()) break;
      const auto key = names_of(g, m);
      Graph next = g;
      if (!pass.replace(next, m)) {
        declined.push_back(key);
        continue;
      }
      next.remove_dead_buffers();
      auto diags = validate(next);
      if (!diags.empty())
        throw ValidationError("pass '" + pass.name + "' produced an invalid graph: " + diags[0].message);
      g = std::move(next);
      if (++rewrites > guard)
        throw Error("pass '" + pass.name + "' did not terminate after " + std::to_string(guard) +
                    " rewrites");
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Passes

Pass fuse_gemm_requant_pass() {
  Pass p;
  p.name = "fuse_gemm_requant";
  p.pattern = {{ops::kGemm, nullptr}, {ops::kRequant, nullptr}};
  p.replace = [](Graph& g, const std::vector<int>& m) {
    Node& gemm = g.nodes[m[0]];
    const Node rq = g.nodes[m[1]];
    gemm.op = ops::kGemmQ8;
    for (const char* key : {"mul", "shift", "zp"}) gemm.attrs[key] = rq.attrs.at(key);
    gemm.outputs = rq.outputs;
    g.nodes.erase(g.nodes.begin() + m[1]);
    return true;
  };
  return p;
}

namespace {

// Bias of shape [M x O] whose rows are all identical.
bool bias_reducible(const Buffer& c) {
  if (c.shape.size() == 1) return true;
  if (c.kind != BufferKind::Constant || c.shape.size() != 2) return false;
  const size_t row = static_cast<size_t>(c.shape[1]) * 4;
  for (int64_t r = 1; r < c.shape[0]; ++r)
    if (std::memcmp(c.payload.data(), c.payload.data() + r * row, row) != 0) return false;
  return true;
}

bool pointwise_candidate(const Node& n, const Graph& g) {
  const Buffer* a = g.find_buffer(n.inputs[0]);
  const Buffer* b = g.find_buffer(n.inputs[1]);
  if (!a || !b || a->shape.size() != 2 || b->shape.size() != 2 || !b->is_constant()) return false;
  if (n.inputs.size() == 3) {
    const Buffer* c = g.find_buffer(n.inputs[2]);
    if (!c || !bias_reducible(*c)) return false;
  }
  return true;
}

}  // namespace

Pass gemm_to_pointwise_pass() {
  Pass p;
  p.name = "gemm_to_pointwise";
  p.pattern = {{ops::kGemmQ8, pointwise_candidate}};
  p.replace = [](Graph& g, const std::vector<int>& m) {
    Node& n = g.nodes[m[0]];
    const Buffer a = g.buffer(n.inputs[0]);
    const Buffer b = g.buffer(n.inputs[1]);
    const bool trans_b = n.attr_int("trans_b", 0) != 0;
    const int64_t rows = a.shape[0], cin = a.shape[1];
    const int64_t cout = trans_b ? b.shape[0] : b.shape[1];

    // Weight as C_out x 1 x 1 x C_in.
    Buffer w;
    w.name = g.unique_name(b.name + "_pw");
    w.kind = BufferKind::Constant;
    w.scope = Scope::Global;
    w.shape = {cout, 1, 1, cin};
    w.dtype = b.dtype ? b.dtype : dtypes::kInt8;
    w.payload.resize(static_cast<size_t>(cout * cin));
    for (int64_t o = 0; o < cout; ++o)
      for (int64_t k = 0; k < cin; ++k)
        w.payload[o * cin + k] = trans_b ? b.payload[o * cin + k] : b.payload[k * cout + o];
    g.add_buffer(w);

    std::vector<std::string> inputs{n.inputs[0], w.name};
    if (n.inputs.size() == 3) {
      const Buffer c = g.buffer(n.inputs[2]);
      if (c.shape.size() == 1) {
        inputs.push_back(c.name);
      } else {
        Buffer r;
        r.name = g.unique_name(c.name + "_row");
        r.kind = BufferKind::Constant;
        r.scope = Scope::Global;
        r.shape = {cout};
        r.dtype = c.dtype ? c.dtype : dtypes::kInt32;
        r.payload.assign(c.payload.begin(), c.payload.begin() + cout * 4);
        g.add_buffer(r);
        inputs.push_back(r.name);
      }
    }
    Attrs attrs;
    attrs["H"] = int64_t{1};
    attrs["W"] = rows;
    attrs["C_in"] = cin;
    attrs["C_out"] = cout;
    for (const char* key : {"mul", "shift", "zp"}) attrs[key] = n.attrs.at(key);
    n.op = ops::kPwConv;
    n.attrs = std::move(attrs);
    n.inputs = std::move(inputs);
    return true;
  };
  return p;
}

Pass insert_transpose_b_pass() {
  Pass p;
  p.name = "insert_transpose_b";
  auto row_major = [](const Node& n, const Graph&) { return n.attr_int("trans_b", 0) == 0; };
  p.pattern = {{ops::kGemmQ8, row_major}};
  p.replace = [](Graph& g, const std::vector<int>& m) {
    const Buffer b = g.buffer(g.nodes[m[0]].inputs[1]);
    const size_t rank = b.shape.size();
    std::vector<int64_t> perm = rank == 3 ? std::vector<int64_t>{0, 2, 1} : std::vector<int64_t>{1, 0};
    Buffer bt;
    bt.name = g.unique_name(b.name + "_T");
    bt.kind = BufferKind::Variable;
    bt.scope = Scope::Local;
    bt.dtype = b.dtype;
    for (int64_t d : perm) bt.shape.push_back(b.shape[d]);
    g.add_buffer(bt);
    Node t;
    t.name = g.unique_name(g.nodes[m[0]].name + "_transpose_b");
    t.op = ops::kTranspose;
    t.attrs["perm"] = perm;
    t.inputs = {b.name};
    t.outputs = {bt.name};
    Node& gemm = g.nodes[m[0]];
    gemm.inputs[1] = bt.name;
    gemm.attrs["trans_b"] = int64_t{1};
    g.nodes.insert(g.nodes.begin() + m[0], std::move(t));
    return true;
  };
  return p;
}

Pass fold_constant_transpose_pass() {
  Pass p;
  p.name = "fold_constant_transpose";
  auto constant_input = [](const Node& n, const Graph& g) {
    const Buffer* b = g.find_buffer(n.inputs[0]);
    return b && b->is_constant() && !g.is_graph_output(n.outputs[0]);
  };
  p.pattern = {{ops::kTranspose, constant_input}};
  p.replace = [](Graph& g, const std::vector<int>& m) {
    const Node t = g.nodes[m[0]];
    const Buffer& src = g.buffer(t.inputs[0]);
    Tensor in(src.shape, *src.dtype, src.payload);
    auto perm = t.attr_list("perm");
    Tensor out = ref_transpose(in, perm);
    Buffer& dst = g.buffer(t.outputs[0]);
    dst.kind = BufferKind::Constant;
    dst.scope = Scope::Global;
    dst.dtype = src.dtype;
    dst.payload = out.data;
    g.nodes.erase(g.nodes.begin() + m[0]);
    return true;
  };
  return p;
}

Graph gemm_to_pointwise(const Graph& g) { return apply_passes(g, {gemm_to_pointwise_pass()}); }

// ---------------------------------------------------------------------------
// Types and kernels

Binding infer_types_select_kernels(const Graph& g, const KernelRegistry& reg,
                                   const std::map<std::string, DataType>& input_types,
                                   const std::vector<std::string>& engine_prefs) {
  Binding b;
  b.nodes.resize(g.nodes.size());
  auto assign = [&](const std::string& name, const DataType& t) {
    auto [it, inserted] = b.types.emplace(name, t);
    if (!inserted && it->second != t)
      throw ValidationError("buffer '" + name + "': conflicting types " + it->second.name + " and " + t.name);
  };
  for (const auto& name : g.inputs) {
    auto it = input_types.find(name);
    const Buffer& buf = g.buffer(name);
    if (it != input_types.end()) {
      assign(name, it->second);
    } else if (buf.dtype) {
      assign(name, *buf.dtype);
    } else {
      throw ValidationError("graph input '" + name + "' has no data type");
    }
  }
  for (const auto& buf : g.buffers) {
    if (!buf.is_constant()) continue;
    if (!buf.dtype) throw ValidationError("constant '" + buf.name + "' has no data type");
    assign(buf.name, *buf.dtype);
  }

  KernelRegistry allowed;
  for (const auto& k : reg.kernels)
    if (engine_prefs.empty() ||
        std::find(engine_prefs.begin(), engine_prefs.end(), k.signature.engine) != engine_prefs.end())
      allowed.kernels.push_back(k);

  for (int idx : topo_schedule(g).order) {
    const Node& n = g.nodes[idx];
    std::vector<DataType> in;
    for (const auto& name : n.inputs) {
      auto it = b.types.find(name);
      if (it == b.types.end()) throw ValidationError("node '" + n.name + "': input '" + name + "' is untyped");
      in.push_back(it->second);
    }
    const KernelTemplate* k = allowed.match(n, g, in);
    if (!k) {
      std::string offered;
      for (const auto& t : in) offered += (offered.empty() ? "" : ", ") + t.name;
      throw ValidationError("node '" + n.name + "' (" + n.op + "): no kernel signature accepts (" + offered + ")");
    }
    b.nodes[idx] = NodeBinding{*k, k->signature.engine};
    for (size_t i = 0; i < n.outputs.size(); ++i) {
      const DataType& t = k->signature.outputs.at(i);
      const Buffer& out = g.buffer(n.outputs[i]);
      if (out.dtype && *out.dtype != t)
        throw ValidationError("buffer '" + out.name + "': declared " + out.dtype->name + " but node '" +
                              n.name + "' produces " + t.name);
      assign(n.outputs[i], t);
    }
  }
  for (const auto& buf : g.buffers)
    if (!b.types.count(buf.name)) throw ValidationError("buffer '" + buf.name + "' is never typed");
  return b;
}

void apply_types(Graph& g, const Binding& b) {
  for (auto& buf : g.buffers) buf.dtype = b.types.at(buf.name);
}

const char* to_string(AnnotationPolicy p) { return p == AnnotationPolicy::NoNms ? "no-nms" : "nms-weights"; }

Graph annotate_memory_levels(const Graph& input, const TargetDescription& t, AnnotationPolicy policy,
                             const Binding& binding) {
  Graph g = input;
  std::map<std::string, std::string> weight_level;
  if (policy == AnnotationPolicy::NmsWeights) {
    for (size_t i = 0; i < g.nodes.size(); ++i) {
      const Node& n = g.nodes[i];
      if (n.op != ops::kPwConv || i >= binding.nodes.size()) continue;
      const Engine& e = t.engine(binding.nodes[i].engine);
      if (e.kind != EngineKind::ConvNpu) continue;
      const Buffer& w = g.buffer(n.inputs[1]);
      if (!w.is_constant()) continue;
      // The weight memory is the level reachable by this engine alone.
      for (const auto& lvl : t.levels)
        if (lvl.accessible_by == std::set<std::string>{e.name}) weight_level[w.name] = lvl.name;
    }
  }
  for (auto& buf : g.buffers) {
    auto it = weight_level.find(buf.name);
    if (it != weight_level.end())
      buf.level = it->second;
    else
      buf.level = buf.scope == Scope::Global ? t.global_level : t.local_level;
    const int64_t bytes = buf.elements() * (buf.dtype ? buf.dtype->bytes() : binding.types.at(buf.name).bytes());
    const int64_t cap = t.level(buf.level).capacity;
    if (bytes > cap)
      throw InfeasibleError("buffer '" + buf.name + "' needs " + std::to_string(bytes) + " bytes but level '" +
                            buf.level + "' holds " + std::to_string(cap));
  }
  return g;
}

}  // namespace tinydeploy
