// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tinydeploy/program.hpp"

#include "json.hpp"

namespace tinydeploy {

using nlohmann::ordered_json;

const char* to_string(AllocationItem::Kind k) {
  switch (k) {
    case AllocationItem::Kind::Home:
      return "home";
    case AllocationItem::Kind::Arena:
      return "arena";
    case AllocationItem::Kind::Scratch:
      return "scratch";
  }
  return "?";
}

int Program::find_allocation(const std::string& symbol) const {
  for (size_t i = 0; i < allocations.size(); ++i)
    if (allocations[i].symbol == symbol) return static_cast<int>(i);
  return -1;
}

Program build_program(const std::string& name, const Graph& g, const Binding& b, const TargetDescription& t,
                      const TileFlow& flow, const MemoryMap& mm, const TilingSolution& ts,
                      const std::vector<NodeTransfers>& transfers) {
  Program p;
  p.name = name;
  p.target = t.name;
  p.double_buffer = ts.double_buffer;
  for (const auto& lvl : mm.levels) {
    p.peaks[lvl.name] = lvl.peak;
    for (const auto& e : lvl.entries) {
      Allocation a;
      a.symbol = e.symbol;
      a.level = lvl.name;
      a.offset = e.offset;
      a.size = e.size;
      a.start = e.life.start;
      a.end = e.life.end;
      a.kind = e.kind;
      a.node = e.node;
      if (e.kind == AllocationItem::Kind::Home) {
        a.buffer = e.symbol;
      } else if (e.kind == AllocationItem::Kind::Arena) {
        a.buffer = e.symbol.substr(e.symbol.rfind(':') + 1);
      }
      p.allocations.push_back(std::move(a));
    }
  }
  auto require = [&](const std::string& sym) {
    const int i = p.find_allocation(sym);
    if (i < 0) throw Error("no allocation for '" + sym + "'");
    return i;
  };

  for (size_t s = 0; s < flow.nodes.size(); ++s) {
    const NodeTiling& nt = flow.nodes[s];
    const NodeTransfers& tr = transfers.at(s);
    const Node& n = g.nodes[nt.node];
    ProgramStep st;
    st.node = nt.node;
    st.node_name = n.name;
    st.op = n.op;
    st.engine = nt.engine;
    st.kernel_id = b.nodes.at(nt.node).kernel.id;
    st.c_function = b.nodes.at(nt.node).kernel.c_function;
    st.compute_level = nt.compute_level;
    st.tiles = tr.tiles;
    for (size_t k = 0; k < nt.operands.size(); ++k) {
      const OperandTiling& ot = nt.operands[k];
      ProgramOperand po;
      po.operand = ot.operand;
      po.tensor = ot.tensor;
      po.direct = ot.direct;
      po.links = ot.links;
      if (ot.operand < 0) {
        po.direct = false;
        po.arena = require(n.name + ":scratch");
        po.slot_bytes = p.allocations[po.arena].size;
      } else {
        const Buffer& buf = g.buffer(ot.tensor);
        po.dtype = *buf.dtype;
        po.full_shape = buf.shape;
        po.tile_shape = ts.tensors.at(ot.tensor).shape;
        po.home = require(ot.tensor);
        if (!ot.direct) {
          po.arena = require(n.name + ":" + std::to_string(ot.operand) + ":" + ot.tensor);
          po.slots = ot.factor;
          po.slot_bytes = num_elements(po.tile_shape) * po.dtype.bytes();
          po.stationary = tr.stationary.at(k);
        }
      }
      st.operands.push_back(std::move(po));
    }
    for (const auto& ev : tr.events)
      st.events.push_back({ev.kind, ev.operand, ev.tile, ev.slot, ev.bytes, ev.src_level, ev.dst_level});
    p.steps.push_back(std::move(st));
  }
  return p;
}

// ---------------------------------------------------------------------------
// JSON

namespace {

const char* kind_name(Transfer::Kind k) {
  switch (k) {
    case Transfer::Kind::In:
      return "in";
    case Transfer::Kind::Out:
      return "out";
    case Transfer::Kind::Compute:
      return "compute";
  }
  return "?";
}

Transfer::Kind kind_from(const std::string& s) {
  if (s == "in") return Transfer::Kind::In;
  if (s == "out") return Transfer::Kind::Out;
  if (s == "compute") return Transfer::Kind::Compute;
  throw ParseError("program: unknown event kind '" + s + "'");
}

AllocationItem::Kind alloc_kind_from(const std::string& s) {
  if (s == "home") return AllocationItem::Kind::Home;
  if (s == "arena") return AllocationItem::Kind::Arena;
  if (s == "scratch") return AllocationItem::Kind::Scratch;
  throw ParseError("program: unknown allocation kind '" + s + "'");
}

ordered_json region_json(const Region& r) { return ordered_json{{"origin", r.origin}, {"extent", r.extent}}; }

}  // namespace

std::string program_to_json(const Program& p) {
  ordered_json j;
  j["name"] = p.name;
  j["target"] = p.target;
  j["double_buffer"] = p.double_buffer;
  j["peaks"] = ordered_json::object();
  for (const auto& [l, v] : p.peaks) j["peaks"][l] = v;
  j["allocations"] = ordered_json::array();
  for (const auto& a : p.allocations)
    j["allocations"].push_back({{"symbol", a.symbol},
                                {"buffer", a.buffer},
                                {"level", a.level},
                                {"offset", a.offset},
                                {"size", a.size},
                                {"start", a.start},
                                {"end", a.end},
                                {"kind", to_string(a.kind)},
                                {"node", a.node}});
  j["steps"] = ordered_json::array();
  for (const auto& s : p.steps) {
    ordered_json js{{"node", s.node},          {"name", s.node_name},   {"op", s.op},
                    {"engine", s.engine},      {"kernel", s.kernel_id}, {"c_function", s.c_function},
                    {"compute_level", s.compute_level}};
    js["operands"] = ordered_json::array();
    for (const auto& o : s.operands)
      js["operands"].push_back({{"operand", o.operand},
                                {"tensor", o.tensor},
                                {"direct", o.direct},
                                {"home", o.home},
                                {"arena", o.arena},
                                {"slots", o.slots},
                                {"slot_bytes", o.slot_bytes},
                                {"stationary", o.stationary},
                                {"links", o.links},
                                {"tile_shape", o.tile_shape},
                                {"full_shape", o.full_shape},
                                {"dtype", o.dtype.name}});
    js["tiles"] = ordered_json::array();
    for (const auto& r : s.tiles) js["tiles"].push_back(region_json(r));
    js["events"] = ordered_json::array();
    for (const auto& e : s.events)
      js["events"].push_back({{"kind", kind_name(e.kind)},
                              {"operand", e.operand},
                              {"tile", e.tile},
                              {"slot", e.slot},
                              {"bytes", e.bytes},
                              {"src", e.src_level},
                              {"dst", e.dst_level}});
    j["steps"].push_back(std::move(js));
  }
  return j.dump(1) + "\n";
}

Program program_from_json(const std::string& text) {
  try {
    const auto j = ordered_json::parse(text);
    Program p;
    p.name = j.at("name").get<std::string>();
    p.target = j.at("target").get<std::string>();
    p.double_buffer = j.at("double_buffer").get<bool>();
    for (const auto& [l, v] : j.at("peaks").items()) p.peaks[l] = v.get<int64_t>();
    for (const auto& ja : j.at("allocations")) {
      Allocation a;
      a.symbol = ja.at("symbol").get<std::string>();
      a.buffer = ja.at("buffer").get<std::string>();
      a.level = ja.at("level").get<std::string>();
      a.offset = ja.at("offset").get<int64_t>();
      a.size = ja.at("size").get<int64_t>();
      a.start = ja.at("start").get<int>();
      a.end = ja.at("end").get<int>();
      a.kind = alloc_kind_from(ja.at("kind").get<std::string>());
      a.node = ja.at("node").get<int>();
      p.allocations.push_back(std::move(a));
    }
    for (const auto& js : j.at("steps")) {
      ProgramStep s;
      s.node = js.at("node").get<int>();
      s.node_name = js.at("name").get<std::string>();
      s.op = js.at("op").get<std::string>();
      s.engine = js.at("engine").get<std::string>();
      s.kernel_id = js.at("kernel").get<std::string>();
      s.c_function = js.at("c_function").get<std::string>();
      s.compute_level = js.at("compute_level").get<std::string>();
      for (const auto& jo : js.at("operands")) {
        ProgramOperand o;
        o.operand = jo.at("operand").get<int>();
        o.tensor = jo.at("tensor").get<std::string>();
        o.direct = jo.at("direct").get<bool>();
        o.home = jo.at("home").get<int>();
        o.arena = jo.at("arena").get<int>();
        o.slots = jo.at("slots").get<int>();
        o.slot_bytes = jo.at("slot_bytes").get<int64_t>();
        o.stationary = jo.at("stationary").get<bool>();
        o.links = jo.at("links").get<std::vector<int>>();
        o.tile_shape = jo.at("tile_shape").get<Shape>();
        o.full_shape = jo.at("full_shape").get<Shape>();
        o.dtype = dtype_from_name(jo.at("dtype").get<std::string>());
        s.operands.push_back(std::move(o));
      }
      for (const auto& jr : js.at("tiles"))
        s.tiles.push_back({jr.at("origin").get<std::vector<int64_t>>(), jr.at("extent").get<std::vector<int64_t>>()});
      for (const auto& je : js.at("events"))
        s.events.push_back({kind_from(je.at("kind").get<std::string>()), je.at("operand").get<int>(),
                            je.at("tile").get<int>(), je.at("slot").get<int>(), je.at("bytes").get<int64_t>(),
                            je.at("src").get<std::string>(), je.at("dst").get<std::string>()});
      p.steps.push_back(std::move(s));
    }
    const int n = static_cast<int>(p.allocations.size());
    for (const auto& s : p.steps)
      for (const auto& o : s.operands)
        if (o.home >= n || o.arena >= n) throw ParseError("program: step '" + s.node_name + "' references a missing allocation");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("program: ") + e.what());
  }
}

}  // namespace tinydeploy
