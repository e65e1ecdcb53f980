// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tinydeploy/target.hpp"

#include <cmath>

#include "json.hpp"

namespace tinydeploy {

using json = nlohmann::ordered_json;

int64_t DmaChannel::cycles(int64_t bytes) const {
  return setup + static_cast<int64_t>(std::ceil(static_cast<double>(bytes) / bandwidth));
}

const char* to_string(EngineKind kind) {
  switch (kind) {
    case EngineKind::ScalarCore: return "scalar-core";
    case EngineKind::MultiCoreCluster: return "multi-core-cluster";
    case EngineKind::ConvNpu: return "conv-npu";
  }
  return "?";
}

int64_t Engine::kernel_cycles(const std::string& op, int64_t work) const {
  auto it = throughput.find(op);
  if (it == throughput.end())
    throw Error("engine '" + name + "' has no throughput entry for '" + op + "'");
  return static_cast<int64_t>(std::ceil(static_cast<double>(work) / it->second));
}

const MemoryLevel* TargetDescription::find_level(const std::string& n) const {
  for (const auto& l : levels)
    if (l.name == n) return &l;
  return nullptr;
}

const MemoryLevel& TargetDescription::level(const std::string& n) const {
  const MemoryLevel* l = find_level(n);
  if (!l) throw Error("unknown memory level '" + n + "'");
  return *l;
}

const Engine* TargetDescription::find_engine(const std::string& n) const {
  for (const auto& e : engines)
    if (e.name == n) return &e;
  return nullptr;
}

const Engine& TargetDescription::engine(const std::string& n) const {
  const Engine* e = find_engine(n);
  if (!e) throw Error("unknown engine '" + n + "'");
  return *e;
}

const MemoryLevel& TargetDescription::root() const {
  for (const auto& l : levels)
    if (!l.parent) return l;
  throw Error("target '" + name + "' has no root level");
}

std::vector<std::string> TargetDescription::children(const std::string& n) const {
  std::vector<std::string> out;
  for (const auto& l : levels)
    if (l.parent && *l.parent == n) out.push_back(l.name);
  return out;
}

std::set<std::string> reachable_levels(const TargetDescription& t, const std::string& engine) {
  if (!t.find_engine(engine)) throw Error("unknown engine '" + engine + "'");
  std::set<std::string> out;
  for (const auto& l : t.levels)
    if (l.accessible_by.count(engine)) out.insert(l.name);
  return out;
}

namespace {

EngineKind engine_kind_from_name(const std::string& s, const std::string& who) {
  if (s == "scalar-core") return EngineKind::ScalarCore;
  if (s == "multi-core-cluster") return EngineKind::MultiCoreCluster;
  if (s == "conv-npu") return EngineKind::ConvNpu;
  throw ParseError("engine '" + who + "': unknown engine kind '" + s + "'");
}

template <typename T>
T field(const json& obj, const char* key, const std::string& who) {
  if (!obj.is_object() || !obj.contains(key)) throw ParseError(who + ": missing field '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ParseError(who + ": field '" + key + "' has the wrong type");
  }
}

void validate_target(const TargetDescription& t) {
  if (t.levels.empty()) throw ParseError("target: no memory levels");
  std::set<std::string> names;
  int roots = 0;
  for (const auto& l : t.levels) {
    if (!names.insert(l.name).second) throw ParseError("level '" + l.name + "' declared twice");
    if (l.capacity <= 0) throw ParseError("level '" + l.name + "': capacity must be positive");
    if (!l.parent) {
      ++roots;
      continue;
    }
    if (!t.find_level(*l.parent))
      throw ParseError("level '" + l.name + "': parent '" + *l.parent + "' does not exist");
    if (!l.dma) throw ParseError("level '" + l.name + "': no DMA channel to its parent");
    if (l.dma->bandwidth <= 0 || l.dma->setup < 0)
      throw ParseError("level '" + l.name + "': invalid DMA parameters");
  }
  if (roots != 1) throw ParseError("target: memory levels must form a single tree");
  // Every level must reach the root without revisiting a level.
  for (const auto& l : t.levels) {
    std::set<std::string> seen;
    const MemoryLevel* cur = &l;
    while (cur->parent) {
      if (!seen.insert(cur->name).second)
        throw ParseError("level '" + l.name + "': parent chain is cyclic");
      cur = t.find_level(*cur->parent);
    }
  }
  std::set<std::string> engine_names;
  for (const auto& e : t.engines) {
    if (!engine_names.insert(e.name).second) throw ParseError("engine '" + e.name + "' declared twice");
    for (const auto& op : e.supported_ops) {
      auto it = e.throughput.find(op);
      if (it == e.throughput.end() || !(it->second > 0))
        throw ParseError("engine '" + e.name + "': missing or non-positive throughput for '" + op + "'");
      if (e.kind == EngineKind::ConvNpu && op != "pwconv")
        throw ParseError("engine '" + e.name + "': conv-npu engines only run convolutions, not '" +
                         op + "'");
    }
    if (e.offload_setup < 0) throw ParseError("engine '" + e.name + "': negative offload setup");
  }
  if (t.engines.empty()) throw ParseError("target: no engines");
  for (const auto& l : t.levels)
    for (const auto& e : l.accessible_by)
      if (!t.find_engine(e))
        throw ParseError("level '" + l.name + "': unknown engine '" + e + "' in accessible_by");
  for (const auto& e : t.engines) {
    bool reaches = false;
    for (const auto& l : t.levels) reaches |= l.accessible_by.count(e.name) != 0;
    if (!reaches) throw ParseError("engine '" + e.name + "' reaches no memory level");
  }
  if (!t.find_level(t.global_level)) throw ParseError("defaults: unknown global level '" + t.global_level + "'");
  if (!t.find_level(t.local_level)) throw ParseError("defaults: unknown local level '" + t.local_level + "'");
  if (!t.find_engine(t.host)) throw ParseError("defaults: unknown host engine '" + t.host + "'");
  if (t.alignment <= 0) throw ParseError("emission: alignment must be positive");
}

}  // namespace

TargetDescription load_target(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed target document: ") + e.what());
  }
  if (field<std::string>(doc, "format", "target") != "tinydeploy-target")
    throw ParseError("target: unexpected format tag");
  if (field<int>(doc, "version", "target") != 1) throw ParseError("target: unsupported version");

  TargetDescription t;
  t.name = field<std::string>(doc, "name", "target");
  for (const auto& jl : field<json>(doc, "levels", "target")) {
    MemoryLevel l;
    l.name = field<std::string>(jl, "name", "level");
    const std::string who = "level '" + l.name + "'";
    l.capacity = field<int64_t>(jl, "capacity", who);
    if (jl.contains("parent") && !jl.at("parent").is_null())
      l.parent = field<std::string>(jl, "parent", who);
    if (jl.contains("dma")) {
      const json& jd = jl.at("dma");
      l.dma = DmaChannel{field<double>(jd, "bandwidth", who + " dma"),
                         field<int64_t>(jd, "setup", who + " dma")};
    }
    for (const auto& e : field<std::vector<std::string>>(jl, "accessible_by", who))
      l.accessible_by.insert(e);
    t.levels.push_back(std::move(l));
  }
  for (const auto& je : field<json>(doc, "engines", "target")) {
    Engine e;
    e.name = field<std::string>(je, "name", "engine");
    const std::string who = "engine '" + e.name + "'";
    e.kind = engine_kind_from_name(field<std::string>(je, "kind", who), e.name);
    for (const auto& op : field<std::vector<std::string>>(je, "supported_ops", who))
      e.supported_ops.insert(op);
    const json tp = field<json>(je, "throughput", who);
    for (const auto& [op, v] : tp.items()) {
      if (!v.is_number()) throw ParseError(who + ": throughput for '" + op + "' is not a number");
      e.throughput[op] = v.get<double>();
    }
    if (je.contains("offload_setup")) e.offload_setup = field<int64_t>(je, "offload_setup", who);
    t.engines.push_back(std::move(e));
  }
  const json defaults = field<json>(doc, "defaults", "target");
  t.global_level = field<std::string>(defaults, "global_level", "defaults");
  t.local_level = field<std::string>(defaults, "local_level", "defaults");
  t.host = field<std::string>(defaults, "host", "defaults");
  if (doc.contains("emission")) {
    const json& em = doc.at("emission");
    if (em.contains("alignment")) t.alignment = field<int64_t>(em, "alignment", "emission");
  }
  validate_target(t);
  return t;
}

std::string dump_target(const TargetDescription& t) {
  json doc;
  doc["format"] = "tinydeploy-target";
  doc["version"] = 1;
  doc["name"] = t.name;
  json levels = json::array();
  for (const auto& l : t.levels) {
    json jl;
    jl["name"] = l.name;
    jl["capacity"] = l.capacity;
    jl["parent"] = l.parent ? json(*l.parent) : json(nullptr);
    if (l.dma) jl["dma"] = {{"bandwidth", l.dma->bandwidth}, {"setup", l.dma->setup}};
    jl["accessible_by"] = std::vector<std::string>(l.accessible_by.begin(), l.accessible_by.end());
    levels.push_back(std::move(jl));
  }
  doc["levels"] = std::move(levels);
  json engines = json::array();
  for (const auto& e : t.engines) {
    json je;
    je["name"] = e.name;
    je["kind"] = to_string(e.kind);
    je["supported_ops"] = std::vector<std::string>(e.supported_ops.begin(), e.supported_ops.end());
    json tp = json::object();
    for (const auto& [op, v] : e.throughput) tp[op] = v;
    je["throughput"] = std::move(tp);
    je["offload_setup"] = e.offload_setup;
    engines.push_back(std::move(je));
  }
  doc["engines"] = std::move(engines);
  doc["defaults"] = {{"global_level", t.global_level}, {"local_level", t.local_level}, {"host", t.host}};
  doc["emission"] = {{"alignment", t.alignment}};
  return doc.dump(2) + "\n";
}

namespace {

const char* kMinimalPreset = R"({
  "format": "tinydeploy-target",
  "version": 1,
  "name": "minimal",
  "levels": [
    {"name": "MEM", "capacity": 16777216, "parent": null, "accessible_by": ["core"]}
  ],
  "engines": [
    {"name": "core", "kind": "scalar-core",
     "supported_ops": ["gemm", "requant", "gemm_q8", "softmax", "rmsnorm", "rope", "add_requant",
                       "mul_requant", "hardswish_q", "transpose", "gather_rows", "concat_seq",
                       "reshape", "pwconv"],
     "throughput": {"gemm": 2, "requant": 1, "gemm_q8": 2, "softmax": 0.25, "rmsnorm": 0.5,
                    "rope": 0.5, "add_requant": 1, "mul_requant": 1, "hardswish_q": 1,
                    "transpose": 1, "gather_rows": 2, "concat_seq": 2, "reshape": 4, "pwconv": 2},
     "offload_setup": 0}
  ],
  "defaults": {"global_level": "MEM", "local_level": "MEM", "host": "core"},
  "emission": {"alignment": 4}
}
)";

// L2 2 MiB -> L1 256 KiB over a 64-bit DMA; a 4 MiB weight memory only the
// NPU can read; one cluster core, the eight-core cluster and the NPU.
const char* kSiracusaPreset = R"({
  "format": "tinydeploy-target",
  "version": 1,
  "name": "siracusa-like",
  "levels": [
    {"name": "L2", "capacity": 2097152, "parent": null, "accessible_by": []},
    {"name": "L1", "capacity": 262144, "parent": "L2", "dma": {"bandwidth": 8, "setup": 20},
     "accessible_by": ["core", "cluster", "npu"]},
    {"name": "WMEM", "capacity": 4194304, "parent": "L2", "dma": {"bandwidth": 8, "setup": 20},
     "accessible_by": ["npu"]}
  ],
  "engines": [
    {"name": "core", "kind": "scalar-core",
     "supported_ops": ["gemm", "requant", "gemm_q8", "softmax", "rmsnorm", "rope", "add_requant",
                       "mul_requant", "hardswish_q", "transpose", "gather_rows", "concat_seq",
                       "reshape", "pwconv"],
     "throughput": {"gemm": 2, "requant": 1, "gemm_q8": 2, "softmax": 0.25, "rmsnorm": 0.5,
                    "rope": 0.5, "add_requant": 1, "mul_requant": 1, "hardswish_q": 1,
                    "transpose": 1, "gather_rows": 2, "concat_seq": 2, "reshape": 4, "pwconv": 2},
     "offload_setup": 0},
    {"name": "cluster", "kind": "multi-core-cluster",
     "supported_ops": ["gemm", "requant", "gemm_q8", "softmax", "rmsnorm", "rope", "add_requant",
                       "mul_requant", "hardswish_q", "transpose", "gather_rows", "concat_seq",
                       "reshape", "pwconv"],
     "throughput": {"gemm": 16, "requant": 8, "gemm_q8": 16, "softmax": 2, "rmsnorm": 4,
                    "rope": 4, "add_requant": 8, "mul_requant": 8, "hardswish_q": 8,
                    "transpose": 8, "gather_rows": 16, "concat_seq": 16, "reshape": 32, "pwconv": 16},
     "offload_setup": 120},
    {"name": "npu", "kind": "conv-npu", "supported_ops": ["pwconv"],
     "throughput": {"pwconv": 128}, "offload_setup": 300}
  ],
  "defaults": {"global_level": "L2", "local_level": "L2", "host": "core"},
  "emission": {"alignment": 4}
}
)";

}  // namespace

const std::string& target_preset_text(const std::string& name) {
  static const std::map<std::string, std::string> presets = {
      {"minimal", kMinimalPreset}, {"siracusa-like", kSiracusaPreset}};
  auto it = presets.find(name);
  if (it == presets.end()) throw Error("unknown target preset '" + name + "'");
  return it->second;
}

TargetDescription target_preset(const std::string& name) { return load_target(target_preset_text(name)); }

std::vector<std::string> target_preset_names() { return {"minimal", "siracusa-like"}; }

}  // namespace tinydeploy
