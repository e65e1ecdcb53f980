// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tinydeploy/ir.hpp"

#include <algorithm>
#include <functional>
#include <queue>
#include <set>
#include <sstream>

#include "json.hpp"
#include "tinydeploy/ops.hpp"

namespace tinydeploy {

using json = nlohmann::ordered_json;

DataType dtype_from_name(const std::string& name) {
  for (const DataType* t : {&dtypes::kInt8, &dtypes::kUInt8, &dtypes::kInt16, &dtypes::kInt32}) {
    if (t->name == name) return *t;
  }
  throw ParseError("unknown dtype '" + name + "'");
}

const char* to_string(BufferKind kind) {
  switch (kind) {
    case BufferKind::Variable: return "variable";
    case BufferKind::Constant: return "constant";
    case BufferKind::Transient: return "transient";
  }
  return "?";
}

const char* to_string(Scope scope) { return scope == Scope::Global ? "global" : "local"; }

int64_t num_elements(std::span<const int64_t> shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(std::span<const int64_t> shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

int64_t Buffer::bytes() const {
  if (!dtype) throw Error("buffer '" + name + "' has no data type");
  return elements() * dtype->bytes();
}

int64_t Node::attr_int(const std::string& key) const {
  auto it = attrs.find(key);
  if (it == attrs.end()) throw Error("node '" + name + "': missing attribute '" + key + "'");
  if (auto* v = std::get_if<int64_t>(&it->second)) return *v;
  throw Error("node '" + name + "': attribute '" + key + "' is a list");
}

int64_t Node::attr_int(const std::string& key, int64_t fallback) const {
  return has_attr(key) ? attr_int(key) : fallback;
}

std::vector<int64_t> Node::attr_list(const std::string& key) const {
  auto it = attrs.find(key);
  if (it == attrs.end()) throw Error("node '" + name + "': missing attribute '" + key + "'");
  if (auto* v = std::get_if<std::vector<int64_t>>(&it->second)) return *v;
  return {std::get<int64_t>(it->second)};
}

// ---------------------------------------------------------------------------
// Graph

const Buffer* Graph::find_buffer(const std::string& name) const {
  for (const Buffer& b : buffers)
    if (b.name == name) return &b;
  return nullptr;
}

Buffer* Graph::find_buffer(const std::string& name) {
  for (Buffer& b : buffers)
    if (b.name == name) return &b;
  return nullptr;
}

const Buffer& Graph::buffer(const std::string& name) const {
  const Buffer* b = find_buffer(name);
  if (!b) throw Error("unknown buffer '" + name + "'");
  return *b;
}

Buffer& Graph::buffer(const std::string& name) {
  Buffer* b = find_buffer(name);
  if (!b) throw Error("unknown buffer '" + name + "'");
  return *b;
}

const Node* Graph::find_node(const std::string& name) const {
  for (const Node& n : nodes)
    if (n.name == name) return &n;
  return nullptr;
}

int Graph::producer(const std::string& buffer) const {
  for (size_t i = 0; i < nodes.size(); ++i)
    for (const auto& o : nodes[i].outputs)
      if (o == buffer) return static_cast<int>(i);
  return -1;
}

std::vector<int> Graph::consumers(const std::string& buffer) const {
  std::vector<int> out;
  for (size_t i = 0; i < nodes.size(); ++i) {
    const auto& in = nodes[i].inputs;
    if (std::find(in.begin(), in.end(), buffer) != in.end()) out.push_back(static_cast<int>(i));
  }
  return out;
}

bool Graph::is_graph_input(const std::string& name) const {
  return std::find(inputs.begin(), inputs.end(), name) != inputs.end();
}

bool Graph::is_graph_output(const std::string& name) const {
  return std::find(outputs.begin(), outputs.end(), name) != outputs.end();
}

Buffer& Graph::add_buffer(Buffer b) {
  if (has_buffer(b.name)) throw Error("buffer '" + b.name + "' already exists");
  buffers.push_back(std::move(b));
  return buffers.back();
}

std::string Graph::unique_name(const std::string& base) const {
  auto taken = [&](const std::string& n) { return has_buffer(n) || find_node(n) != nullptr; };
  if (!taken(base)) return base;
  for (int i = 1;; ++i) {
    std::string n = base + "_" + std::to_string(i);
    if (!taken(n)) return n;
  }
}

void Graph::remove_dead_buffers() {
  std::set<std::string> used(inputs.begin(), inputs.end());
  used.insert(outputs.begin(), outputs.end());
  for (const Node& n : nodes) {
    used.insert(n.inputs.begin(), n.inputs.end());
    used.insert(n.outputs.begin(), n.outputs.end());
  }
  std::erase_if(buffers, [&](const Buffer& b) { return !used.count(b.name); });
}

// ---------------------------------------------------------------------------
// Validation

namespace {

// Strongly connected components with more than one node (or a self loop),
// each returned as ascending node indices.
std::vector<std::vector<int>> cyclic_components(const Graph& g) {
  const int n = static_cast<int>(g.nodes.size());
  std::vector<std::vector<int>> succ(n);
  for (int i = 0; i < n; ++i)
    for (const auto& out : g.nodes[i].outputs)
      for (int c : g.consumers(out)) succ[i].push_back(c);

  std::vector<int> index(n, -1), low(n, 0);
  std::vector<bool> on_stack(n, false);
  std::vector<int> stack;
  std::vector<std::vector<int>> result;
  int counter = 0;

  std::function<void(int)> strongconnect = [&](int v) {
    index[v] = low[v] = counter++;
    stack.push_back(v);
    on_stack[v] = true;
    for (int w : succ[v]) {
      if (index[w] < 0) {
        strongconnect(w);
        low[v] = std::min(low[v], low[w]);
      } else if (on_stack[w]) {
        low[v] = std::min(low[v], index[w]);
      }
    }
    if (low[v] == index[v]) {
      std::vector<int> comp;
      int w;
      do {
        w = stack.back();
        stack.pop_back();
        on_stack[w] = false;
        comp.push_back(w);
      } while (w != v);
      bool self_loop = std::find(succ[v].begin(), succ[v].end(), v) != succ[v].end();
      if (comp.size() > 1 || self_loop) {
        std::sort(comp.begin(), comp.end());
        result.push_back(std::move(comp));
      }
    }
  };
  for (int v = 0; v < n; ++v)
    if (index[v] < 0) strongconnect(v);
  std::sort(result.begin(), result.end());
  return result;
}

}  // namespace

std::vector<Diagnostic> validate(const Graph& g) {
  std::vector<Diagnostic> diags;
  auto add = [&](std::string kind, std::string msg) {
    diags.push_back({std::move(kind), std::move(msg)});
  };

  std::set<std::string> names;
  for (const Buffer& b : g.buffers) {
    if (!names.insert(b.name).second) add("duplicate", "buffer '" + b.name + "' declared twice");
    if (b.shape.empty()) add("shape", "buffer '" + b.name + "' has an empty shape");
    for (int64_t d : b.shape)
      if (d <= 0) add("shape", "buffer '" + b.name + "' has non-positive dimension");
    if (b.dtype && b.dtype->bits != 8 && b.dtype->bits != 16 && b.dtype->bits != 32)
      add("dtype", "buffer '" + b.name + "' has unsupported bit width");
    if (b.kind == BufferKind::Constant) {
      if (!b.dtype) {
        add("dtype", "constant '" + b.name + "' has no data type");
      } else if (static_cast<int64_t>(b.payload.size()) != b.elements() * b.dtype->bytes()) {
        add("payload size", "constant '" + b.name + "' payload is " +
                                std::to_string(b.payload.size()) + " bytes, expected " +
                                std::to_string(b.elements() * b.dtype->bytes()));
      }
    } else if (!b.payload.empty()) {
      add("payload size", "non-constant '" + b.name + "' carries a payload");
    }
  }

  std::set<std::string> node_names;
  std::map<std::string, std::string> writer;
  bool structural_ok = true;
  for (const Node& n : g.nodes) {
    if (!node_names.insert(n.name).second) add("duplicate", "node '" + n.name + "' declared twice");
    const OpSchema* schema = find_op_schema(n.op);
    if (!schema) {
      add("unknown op", "node '" + n.name + "' has unknown op '" + n.op + "'");
      structural_ok = false;
      continue;
    }
    int nin = static_cast<int>(n.inputs.size());
    if (nin < schema->min_inputs || nin > schema->max_inputs ||
        static_cast<int>(n.outputs.size()) != schema->outputs) {
      add("arity", "node '" + n.name + "' (" + n.op + ") has wrong operand count");
      structural_ok = false;
    }
    for (const auto& key : schema->required_attrs)
      if (!n.has_attr(key)) add("attribute", "node '" + n.name + "' lacks attribute '" + key + "'");
    for (const auto& [key, value] : n.attrs) {
      bool known = std::find(schema->required_attrs.begin(), schema->required_attrs.end(), key) !=
                       schema->required_attrs.end() ||
                   std::find(schema->optional_attrs.begin(), schema->optional_attrs.end(), key) !=
                       schema->optional_attrs.end();
      if (!known) add("attribute", "node '" + n.name + "' has unknown attribute '" + key + "'");
    }
    for (const auto& ref : n.inputs)
      if (!g.has_buffer(ref)) {
        add("dangling reference", "node '" + n.name + "' reads undeclared buffer '" + ref + "'");
        structural_ok = false;
      }
    for (const auto& ref : n.outputs) {
      const Buffer* b = g.find_buffer(ref);
      if (!b) {
        add("dangling reference", "node '" + n.name + "' writes undeclared buffer '" + ref + "'");
        structural_ok = false;
        continue;
      }
      if (b->kind != BufferKind::Variable)
        add("multiple writers", "node '" + n.name + "' writes non-variable buffer '" + ref + "'");
      auto [it, fresh] = writer.emplace(ref, n.name);
      if (!fresh)
        add("multiple writers", "buffer '" + ref + "' written by '" + it->second + "' and '" +
                                    n.name + "'");
      if (g.is_graph_input(ref))
        add("multiple writers", "graph input '" + ref + "' written by '" + n.name + "'");
    }
  }
  for (const auto& ref : g.inputs)
    if (!g.has_buffer(ref)) {
      add("dangling reference", "graph input '" + ref + "' is not declared");
      structural_ok = false;
    }
  for (const auto& ref : g.outputs)
    if (!g.has_buffer(ref)) {
      add("dangling reference", "graph output '" + ref + "' is not declared");
      structural_ok = false;
    }
  if (!structural_ok) return diags;

  for (const auto& comp : cyclic_components(g)) {
    std::string msg = "cycle through nodes";
    for (int i : comp) msg += " '" + g.nodes[i].name + "'";
    add("cycle", msg);
  }

  // Every variable read must be defined by a graph input or a producer.
  for (const Node& n : g.nodes)
    for (const auto& ref : n.inputs) {
      const Buffer& b = g.buffer(ref);
      if (b.kind == BufferKind::Variable && !g.is_graph_input(ref) && g.producer(ref) < 0)
        add("undefined", "node '" + n.name + "' reads '" + ref + "' which nothing produces");
    }
  for (const auto& ref : g.outputs) {
    const Buffer& b = g.buffer(ref);
    if (b.kind == BufferKind::Variable && !g.is_graph_input(ref) && g.producer(ref) < 0)
      add("unreachable output", "graph output '" + ref + "' is never produced");
  }

  for (const Node& n : g.nodes) {
    std::vector<Shape> in;
    for (const auto& ref : n.inputs) in.push_back(g.buffer(ref).shape);
    try {
      auto out = infer_output_shapes(n, in);
      for (size_t i = 0; i < out.size() && i < n.outputs.size(); ++i) {
        const Buffer& b = g.buffer(n.outputs[i]);
        if (b.shape != out[i])
          add("shape", "node '" + n.name + "' output '" + b.name + "' declared " +
                           shape_str(b.shape) + ", operator yields " + shape_str(out[i]));
      }
    } catch (const Error& e) {
      add("shape", e.what());
    }
  }
  return diags;
}

void require_valid(const Graph& g) {
  auto diags = validate(g);
  if (diags.empty()) return;
  std::string msg = "invalid graph:";
  for (const auto& d : diags) msg += "\n  [" + d.kind + "] " + d.message;
  throw ValidationError(msg);
}

std::vector<int> Schedule::steps() const {
  std::vector<int> step(order.size(), -1);
  for (size_t s = 0; s < order.size(); ++s) step[order[s]] = static_cast<int>(s);
  return step;
}

Schedule topo_schedule(const Graph& g) {
  const int n = static_cast<int>(g.nodes.size());
  std::map<std::string, int> producer;
  for (int i = 0; i < n; ++i)
    for (const auto& o : g.nodes[i].outputs) producer[o] = i;
  std::vector<std::vector<int>> succ(n);
  std::vector<int> indegree(n, 0);
  for (int i = 0; i < n; ++i) {
    std::set<int> preds;
    for (const auto& in : g.nodes[i].inputs) {
      auto it = producer.find(in);
      if (it != producer.end()) preds.insert(it->second);
    }
    for (int p : preds) {
      succ[p].push_back(i);
      ++indegree[i];
    }
  }
  std::priority_queue<int, std::vector<int>, std::greater<>> ready;
  for (int i = 0; i < n; ++i)
    if (indegree[i] == 0) ready.push(i);
  Schedule s;
  while (!ready.empty()) {
    int v = ready.top();
    ready.pop();
    s.order.push_back(v);
    for (int w : succ[v])
      if (--indegree[w] == 0) ready.push(w);
  }
  if (static_cast<int>(s.order.size()) != n) {
    std::string msg = "cycle detected among nodes:";
    for (int i = 0; i < n; ++i)
      if (indegree[i] > 0) msg += " '" + g.nodes[i].name + "'";
    throw ValidationError(msg);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Graph file format

namespace {

BufferKind kind_from_name(const std::string& s, const std::string& who) {
  if (s == "variable") return BufferKind::Variable;
  if (s == "constant") return BufferKind::Constant;
  if (s == "transient")
    throw ParseError("tensor '" + who + "': transient buffers are created by the compiler");
  throw ParseError("tensor '" + who + "': unknown kind '" + s + "'");
}

Scope scope_from_name(const std::string& s, const std::string& who) {
  if (s == "global") return Scope::Global;
  if (s == "local") return Scope::Local;
  throw ParseError("tensor '" + who + "': unknown scope '" + s + "'");
}

template <typename T>
T get_field(const json& obj, const char* key, const std::string& who) {
  if (!obj.is_object() || !obj.contains(key))
    throw ParseError(who + ": missing field '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(who + ": field '" + key + "' has the wrong type");
  }
}

}  // namespace

Graph parse_graph(const std::string& text, std::span<const uint8_t> weights) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed graph document: ") + e.what());
  }
  if (!doc.is_object()) throw ParseError("malformed graph document: not an object");
  if (get_field<std::string>(doc, "format", "graph") != "tinydeploy-graph")
    throw ParseError("graph: unexpected format tag");
  int version = get_field<int>(doc, "version", "graph");
  if (version != kGraphFormatVersion)
    throw ParseError("graph: unsupported version " + std::to_string(version));

  Graph g;
  for (const auto& t : get_field<json>(doc, "tensors", "graph")) {
    Buffer b;
    b.name = get_field<std::string>(t, "name", "tensor");
    const std::string who = "tensor '" + b.name + "'";
    b.kind = kind_from_name(get_field<std::string>(t, "kind", who), b.name);
    b.scope = scope_from_name(get_field<std::string>(t, "scope", who), b.name);
    b.shape = get_field<Shape>(t, "shape", who);
    if (t.contains("dtype")) b.dtype = dtype_from_name(get_field<std::string>(t, "dtype", who));
    if (t.contains("level")) b.level = get_field<std::string>(t, "level", who);
    if (b.kind == BufferKind::Constant) {
      auto offset = get_field<int64_t>(t, "offset", who);
      auto length = get_field<int64_t>(t, "length", who);
      if (offset < 0 || length < 0 || offset + length > static_cast<int64_t>(weights.size()))
        throw ParseError(who + ": payload [" + std::to_string(offset) + ", +" +
                         std::to_string(length) + ") outside weight blob of " +
                         std::to_string(weights.size()) + " bytes");
      if (!b.dtype) throw ParseError(who + ": constant without dtype");
      if (length != b.elements() * b.dtype->bytes())
        throw ParseError(who + ": payload length " + std::to_string(length) +
                         " does not match shape " + shape_str(b.shape));
      b.payload.assign(weights.begin() + offset, weights.begin() + offset + length);
    }
    if (g.has_buffer(b.name)) throw ParseError(who + " declared twice");
    g.buffers.push_back(std::move(b));
  }

  for (const auto& jn : get_field<json>(doc, "nodes", "graph")) {
    Node n;
    n.name = get_field<std::string>(jn, "name", "node");
    const std::string who = "node '" + n.name + "'";
    n.op = get_field<std::string>(jn, "op", who);
    if (!find_op_schema(n.op)) throw ParseError(who + ": unknown op kind '" + n.op + "'");
    if (jn.contains("attrs")) {
      for (const auto& [key, value] : jn.at("attrs").items()) {
        if (value.is_number_integer()) {
          n.attrs[key] = value.get<int64_t>();
        } else if (value.is_array()) {
          try {
            n.attrs[key] = value.get<std::vector<int64_t>>();
          } catch (const json::exception&) {
            throw ParseError(who + ": attribute '" + key + "' must hold integers");
          }
        } else {
          throw ParseError(who + ": attribute '" + key + "' must be an integer or list");
        }
      }
    }
    n.inputs = get_field<std::vector<std::string>>(jn, "inputs", who);
    n.outputs = get_field<std::vector<std::string>>(jn, "outputs", who);
    for (const auto& ref : n.inputs)
      if (!g.has_buffer(ref)) throw ParseError(who + ": dangling buffer reference '" + ref + "'");
    for (const auto& ref : n.outputs)
      if (!g.has_buffer(ref)) throw ParseError(who + ": dangling buffer reference '" + ref + "'");
    g.nodes.push_back(std::move(n));
  }

  const json io = get_field<json>(doc, "io", "graph");
  g.inputs = get_field<std::vector<std::string>>(io, "inputs", "io");
  g.outputs = get_field<std::vector<std::string>>(io, "outputs", "io");
  for (const auto& ref : g.inputs)
    if (!g.has_buffer(ref)) throw ParseError("io: dangling buffer reference '" + ref + "'");
  for (const auto& ref : g.outputs)
    if (!g.has_buffer(ref)) throw ParseError("io: dangling buffer reference '" + ref + "'");

  auto diags = validate(g);
  if (!diags.empty()) {
    std::string msg = "invalid graph:";
    for (const auto& d : diags) msg += "\n  [" + d.kind + "] " + d.message;
    throw ParseError(msg);
  }
  return g;
}

SerializedGraph serialize_graph(const Graph& g) {
  SerializedGraph out;
  json doc;
  doc["format"] = "tinydeploy-graph";
  doc["version"] = kGraphFormatVersion;
  json tensors = json::array();
  for (const Buffer& b : g.buffers) {
    json t;
    t["name"] = b.name;
    t["kind"] = to_string(b.kind);
    t["scope"] = to_string(b.scope);
    t["shape"] = b.shape;
    if (b.dtype) t["dtype"] = b.dtype->name;
    if (!b.level.empty()) t["level"] = b.level;
    if (b.kind == BufferKind::Constant) {
      t["offset"] = out.weights.size();
      t["length"] = b.payload.size();
      out.weights.insert(out.weights.end(), b.payload.begin(), b.payload.end());
    }
    tensors.push_back(std::move(t));
  }
  doc["tensors"] = std::move(tensors);
  json nodes = json::array();
  for (const Node& n : g.nodes) {
    json jn;
    jn["name"] = n.name;
    jn["op"] = n.op;
    json attrs = json::object();
    for (const auto& [key, value] : n.attrs)
      std::visit([&](const auto& v) { attrs[key] = v; }, value);
    jn["attrs"] = std::move(attrs);
    jn["inputs"] = n.inputs;
    jn["outputs"] = n.outputs;
    nodes.push_back(std::move(jn));
  }
  doc["nodes"] = std::move(nodes);
  doc["io"] = {{"inputs", g.inputs}, {"outputs", g.outputs}};
  out.text = doc.dump(1) + "\n";
  return out;
}

}  // namespace tinydeploy
