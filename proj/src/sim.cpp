// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tinydeploy/sim.hpp"

#include <algorithm>
#include <iomanip>
#include <random>
#include <sstream>

#include "tinydeploy/kernels.hpp"
#include "tinydeploy/ops.hpp"

namespace tinydeploy {

namespace {

Tensor constant_tensor(const Buffer& b) { return Tensor(b.shape, *b.dtype, b.payload); }

void check_input(const Buffer& b, const Tensor& t) {
  if (t.shape != b.shape)
    throw SimError("input '" + b.name + "': shape " + shape_str(t.shape) + " does not match " + shape_str(b.shape));
  if (b.dtype && t.dtype != *b.dtype)
    throw SimError("input '" + b.name + "': type " + t.dtype.name + " does not match " + b.dtype->name);
}

// Calls fn(byte offset in the full tensor, byte offset in the dense tile,
// bytes) once per innermost row of `r`.
template <typename Fn>
void for_each_row(const Shape& full, const Region& r, int64_t elem, Fn fn) {
  const size_t rank = full.size();
  if (rank == 0) {
    fn(0, 0, elem);
    return;
  }
  const auto strides = strides_of(full);
  const int64_t row = r.extent[rank - 1] * elem;
  if (num_elements(r.extent) == 0) return;
  std::vector<int64_t> idx(rank - 1, 0);
  int64_t dense = 0;
  while (true) {
    int64_t off = r.origin[rank - 1];
    for (size_t d = 0; d + 1 < rank; ++d) off += (r.origin[d] + idx[d]) * strides[d];
    fn(off * elem, dense, row);
    dense += row;
    int d = static_cast<int>(rank) - 2;
    while (d >= 0 && ++idx[d] == r.extent[d]) idx[d--] = 0;
    if (d < 0) break;
  }
}

class Machine {
 public:
  Machine(const Program& p, const TargetDescription& t) : p_(p) {
    for (const auto& l : t.levels) {
      int64_t top = 0;
      for (const auto& a : p.allocations)
        if (a.level == l.name) top = std::max(top, a.offset + a.size);
      if (top > l.capacity)
        throw SimError("level '" + l.name + "': allocations reach " + std::to_string(top) + " bytes, capacity " +
                       std::to_string(l.capacity));
      mem_[l.name].assign(static_cast<size_t>(top), 0xA5);
      owner_[l.name].assign(static_cast<size_t>(top), -1);
    }
    for (const auto& a : p.allocations)
      if (!mem_.count(a.level)) throw SimError("allocation '" + a.symbol + "' in unknown level '" + a.level + "'");
  }

  void write(int alloc, int64_t off, const uint8_t* src, int64_t n) {
    const Allocation& a = p_.allocations.at(alloc);
    if (off < 0 || off + n > a.size)
      throw SimError("write of " + std::to_string(n) + " bytes at " + std::to_string(off) + " overruns '" + a.symbol +
                     "' (" + std::to_string(a.size) + " bytes)");
    auto& m = mem_.at(a.level);
    auto& o = owner_.at(a.level);
    std::copy_n(src, n, m.begin() + a.offset + off);
    std::fill_n(o.begin() + a.offset + off, n, alloc);
  }

  void read(int alloc, int64_t off, uint8_t* dst, int64_t n, int step) const {
    const Allocation& a = p_.allocations.at(alloc);
    if (off < 0 || off + n > a.size)
      throw SimError("read of " + std::to_string(n) + " bytes at " + std::to_string(off) + " overruns '" + a.symbol +
                     "'");
    const auto& m = mem_.at(a.level);
    const auto& o = owner_.at(a.level);
    for (int64_t i = 0; i < n; ++i) {
      const int32_t w = o[a.offset + off + i];
      if (w != alloc) {
        if (w < 0)
          throw SimError("step " + std::to_string(step) + ": uninitialized read of '" + a.symbol + "'");
        throw SimError("step " + std::to_string(step) + ": '" + a.symbol + "' was overwritten by '" +
                       p_.allocations[w].symbol + "'");
      }
    }
    std::copy_n(m.begin() + a.offset + off, n, dst);
  }

  Tensor read_region(const ProgramOperand& o, const Region& r, int step) const {
    Tensor t(r.extent, o.dtype);
    for_each_row(o.full_shape, r, o.dtype.bytes(),
                 [&](int64_t src, int64_t dst, int64_t n) { read(o.home, src, t.data.data() + dst, n, step); });
    return t;
  }

  void write_region(const ProgramOperand& o, const Region& r, const Tensor& t) {
    for_each_row(o.full_shape, r, o.dtype.bytes(),
                 [&](int64_t dst, int64_t src, int64_t n) { write(o.home, dst, t.data.data() + src, n); });
  }

  Tensor read_slot(const ProgramOperand& o, int slot, const Shape& shape, int step) const {
    Tensor t(shape, o.dtype);
    read(o.arena, slot * o.slot_bytes, t.data.data(), static_cast<int64_t>(t.data.size()), step);
    return t;
  }

  void write_slot(const ProgramOperand& o, int slot, const Tensor& t) {
    write(o.arena, slot * o.slot_bytes, t.data.data(), static_cast<int64_t>(t.data.size()));
  }

 private:
  const Program& p_;
  std::map<std::string, std::vector<uint8_t>> mem_;
  std::map<std::string, std::vector<int32_t>> owner_;
};

Region operand_tile(const ProgramOperand& o, const Region& out) { return operand_region(out, o.links, o.full_shape); }

int home_of(const Program& p, const std::string& buffer) {
  const int i = p.find_allocation(buffer);
  if (i < 0 || p.allocations[i].kind != AllocationItem::Kind::Home)
    throw SimError("buffer '" + buffer + "' has no home allocation");
  return i;
}

ProgramOperand whole(const Program& p, const Buffer& b) {
  ProgramOperand o;
  o.tensor = b.name;
  o.home = home_of(p, b.name);
  o.full_shape = b.shape;
  o.tile_shape = b.shape;
  o.dtype = *b.dtype;
  return o;
}

int64_t channel_cycles(const TargetDescription& t, const ProgramEvent& e) {
  const std::string& tile_level = e.kind == Transfer::Kind::In ? e.dst_level : e.src_level;
  const MemoryLevel& l = t.level(tile_level);
  if (!l.dma) throw SimError("level '" + tile_level + "' has no DMA channel");
  return l.dma->cycles(e.bytes);
}

int output_index(const ProgramStep& st) {
  int out = -1;
  for (size_t k = 0; k < st.operands.size(); ++k)
    if (st.operands[k].operand >= 0) out = static_cast<int>(k);
  return out;
}

NodeCycles step_cycles(const Graph& g, const ProgramStep& st, const TargetDescription& t, bool double_buffer) {
  NodeCycles nc;
  nc.node = st.node_name;
  nc.op = st.op;
  nc.engine = st.engine;
  nc.tiles = static_cast<int>(st.tiles.size());
  const Engine& eng = t.engine(st.engine);
  const Node& n = g.nodes.at(st.node);
  const int out = output_index(st);
  for (const auto& e : st.events) {
    if (e.kind == Transfer::Kind::Compute) {
      const Region& r = st.tiles.at(e.tile);
      std::vector<Shape> ins;
      for (int k = 0; k < out; ++k) ins.push_back(operand_tile(st.operands[k], r).extent);
      const Node sn = specialize_for_tile(n, r, ins);
      nc.kernel += eng.kernel_cycles(n.op, op_work(sn, ins, {r.extent}));
    } else {
      nc.dma += channel_cycles(t, e);
    }
  }
  nc.setup = st.engine != t.host ? eng.offload_setup * nc.tiles : 0;
  nc.overlapped = double_buffer ? std::min(nc.kernel, nc.dma) : 0;
  nc.latency = nc.kernel + nc.dma - nc.overlapped + nc.setup;
  return nc;
}

void add_totals(CycleReport& c, const NodeCycles& n) {
  c.kernel += n.kernel;
  c.dma += n.dma;
  c.overlapped += n.overlapped;
  c.setup += n.setup;
  c.total += n.latency;
  c.nodes.push_back(n);
}

}  // namespace

NamedTensors reference_eval(const Graph& g, const NamedTensors& inputs) {
  std::map<std::string, Tensor> values;
  for (const auto& b : g.buffers)
    if (b.is_constant()) values[b.name] = constant_tensor(b);
  for (const auto& name : g.inputs) {
    auto it = inputs.find(name);
    if (it == inputs.end()) throw SimError("missing input '" + name + "'");
    check_input(g.buffer(name), it->second);
    values[name] = it->second;
  }
  for (int idx : topo_schedule(g).order) {
    const Node& n = g.nodes[idx];
    std::vector<Tensor> in;
    for (const auto& i : n.inputs) in.push_back(values.at(i));
    values[n.outputs.at(0)] = evaluate_node(n, in);
  }
  NamedTensors out;
  for (const auto& name : g.outputs) out[name] = values.at(name);
  return out;
}

int64_t MemTrace::peak(const std::string& level) const {
  const auto it = std::find(levels.begin(), levels.end(), level);
  if (it == levels.end()) return 0;
  const size_t l = static_cast<size_t>(it - levels.begin());
  int64_t best = 0;
  for (const auto& row : high_water) best = std::max(best, row[l]);
  return best;
}

double CycleReport::marshaling() const {
  if (total == 0) return 0.0;
  return static_cast<double>(total - kernel) / static_cast<double>(total);
}

CycleReport model_cycles(const Graph& g, const Program& p, const TargetDescription& t) {
  CycleReport c;
  for (const auto& st : p.steps) add_totals(c, step_cycles(g, st, t, p.double_buffer));
  return c;
}

MemTrace plan_trace(const Program& p, const TargetDescription& t) {
  MemTrace trace;
  const int steps = static_cast<int>(p.steps.size());
  for (const auto& l : t.levels) trace.levels.push_back(l.name);
  const int rows = std::max(steps, 1);
  trace.live.assign(rows, std::vector<int64_t>(t.levels.size(), 0));
  trace.high_water.assign(rows, std::vector<int64_t>(t.levels.size(), 0));
  for (const auto& a : p.allocations) {
    const size_t l = static_cast<size_t>(std::find(trace.levels.begin(), trace.levels.end(), a.level) -
                                         trace.levels.begin());
    if (l == trace.levels.size()) throw SimError("allocation '" + a.symbol + "' in unknown level");
    for (int s = std::max(a.start, 0); s <= std::min(a.end, rows - 1); ++s) {
      trace.live[s][l] += a.size;
      trace.high_water[s][l] = std::max(trace.high_water[s][l], a.offset + a.size);
    }
  }
  return trace;
}

SimResult run(const Graph& g, const Program& p, const TargetDescription& t, const NamedTensors& inputs) {
  SimResult res;
  const int steps = static_cast<int>(p.steps.size());

  // Independent check of the address plan.
  for (size_t i = 0; i < p.allocations.size(); ++i)
    for (size_t j = i + 1; j < p.allocations.size(); ++j) {
      const auto& a = p.allocations[i];
      const auto& b = p.allocations[j];
      if (a.level != b.level || a.size == 0 || b.size == 0) continue;
      if (a.start > b.end || b.start > a.end) continue;
      if (a.offset < b.offset + b.size && b.offset < a.offset + a.size)
        throw SimError("level '" + a.level + "': '" + a.symbol + "' and '" + b.symbol +
                       "' are live together and overlap");
    }

  res.trace = plan_trace(p, t);
  const int rows = static_cast<int>(res.trace.high_water.size());
  for (int s = 0; s < rows; ++s)
    for (size_t l = 0; l < t.levels.size(); ++l)
      if (res.trace.high_water[s][l] > t.levels[l].capacity)
        throw SimError("step " + std::to_string(s) + ": level '" + t.levels[l].name + "' holds " +
                       std::to_string(res.trace.high_water[s][l]) + " bytes, capacity " +
                       std::to_string(t.levels[l].capacity));

  Machine m(p, t);
  for (const auto& b : g.buffers)
    if (b.is_constant()) {
      if (static_cast<int64_t>(b.payload.size()) != b.bytes())
        throw SimError("constant '" + b.name + "' has a payload of the wrong size");
      m.write(home_of(p, b.name), 0, b.payload.data(), static_cast<int64_t>(b.payload.size()));
    }
  for (const auto& name : g.inputs) {
    auto it = inputs.find(name);
    if (it == inputs.end()) throw SimError("missing input '" + name + "'");
    const Buffer& b = g.buffer(name);
    check_input(b, it->second);
    m.write(home_of(p, name), 0, it->second.data.data(), static_cast<int64_t>(it->second.data.size()));
  }

  for (int s = 0; s < steps; ++s) {
    const ProgramStep& st = p.steps[s];
    const Node& n = g.nodes.at(st.node);
    if (n.name != st.node_name) throw SimError("step " + std::to_string(s) + " names '" + st.node_name + "'");
    const int out = output_index(st);
    for (const auto& e : st.events) {
      const Region& r = st.tiles.at(e.tile);
      if (e.kind == Transfer::Kind::In) {
        const ProgramOperand& o = st.operands.at(e.operand);
        const Tensor tile = m.read_region(o, operand_tile(o, r), s);
        m.write_slot(o, e.slot, tile);
        res.trace.transfers.push_back({s, st.node_name, e.bytes, e.src_level, e.dst_level, channel_cycles(t, e)});
      } else if (e.kind == Transfer::Kind::Out) {
        const ProgramOperand& o = st.operands.at(e.operand);
        const Region rr = operand_tile(o, r);
        const Tensor tile = m.read_slot(o, e.slot, rr.extent, s);
        m.write_region(o, rr, tile);
        res.trace.transfers.push_back({s, st.node_name, e.bytes, e.src_level, e.dst_level, channel_cycles(t, e)});
      } else {
        std::vector<Tensor> ins;
        std::vector<Shape> shapes;
        for (int k = 0; k < out; ++k) {
          const ProgramOperand& o = st.operands[k];
          const Region rr = operand_tile(o, r);
          ins.push_back(o.direct ? m.read_region(o, rr, s) : m.read_slot(o, o.stationary ? 0 : e.slot, rr.extent, s));
          shapes.push_back(rr.extent);
        }
        const Node sn = specialize_for_tile(n, r, shapes);
        const Tensor y = evaluate_node(sn, ins);
        if (y.shape != r.extent)
          throw SimError("step " + std::to_string(s) + ": node '" + n.name + "' produced " + shape_str(y.shape) +
                         " for a " + shape_str(r.extent) + " tile");
        const ProgramOperand& o = st.operands[out];
        if (o.direct) {
          m.write_region(o, r, y);
        } else {
          m.write_slot(o, e.slot, y);
        }
        for (const auto& sc : st.operands)
          if (sc.operand < 0) {
            std::vector<uint8_t> junk(static_cast<size_t>(sc.slot_bytes), 0);
            m.write(sc.arena, 0, junk.data(), sc.slot_bytes);
          }
      }
    }
  }

  for (const auto& name : g.outputs) {
    const Buffer& b = g.buffer(name);
    ProgramOperand o = whole(p, b);
    res.outputs[name] = m.read_region(o, full_region(b.shape), steps);
  }
  res.cycles = model_cycles(g, p, t);
  return res;
}

std::pair<int64_t, int64_t> compare_buffering(const Graph& g, const TargetDescription& t, CompileOptions opts) {
  opts.double_buffer = true;
  const CompiledModel a = compile(g, t, opts);
  opts.double_buffer = false;
  const CompiledModel b = compile(g, t, opts);
  return {model_cycles(a.graph, a.program, t).total, model_cycles(b.graph, b.program, t).total};
}

std::string report_mem(const Program& p, const MemTrace& trace) {
  std::ostringstream os;
  for (size_t l = 0; l < trace.levels.size(); ++l) {
    const std::string& level = trace.levels[l];
    const auto pk = p.peaks.find(level);
    os << "level " << level << " peak " << (pk == p.peaks.end() ? 0 : pk->second) << "\n";
    os << "symbol\tkind\toffset\tsize\tstart\tend\n";
    std::vector<const Allocation*> in_level;
    for (const auto& a : p.allocations)
      if (a.level == level) in_level.push_back(&a);
    std::stable_sort(in_level.begin(), in_level.end(),
                     [](const Allocation* x, const Allocation* y) { return x->offset < y->offset; });
    for (const Allocation* a : in_level)
      os << a->symbol << "\t" << to_string(a->kind) << "\t" << a->offset << "\t" << a->size << "\t" << a->start
         << "\t" << a->end << "\n";
    // Occupancy grid: one row per step, 64 address columns.
    const int64_t top = pk == p.peaks.end() ? 0 : pk->second;
    if (top > 0 && !in_level.empty()) {
      constexpr int kCols = 64;
      os << "occupancy (step x address, " << (top + kCols - 1) / kCols << " bytes per column)\n";
      for (size_t s = 0; s < trace.high_water.size(); ++s) {
        std::string row(kCols, '.');
        for (const Allocation* a : in_level) {
          if (static_cast<int>(s) < a->start || static_cast<int>(s) > a->end || a->size == 0) continue;
          const int64_t c0 = a->offset * kCols / top;
          const int64_t c1 = std::min<int64_t>((a->offset + a->size - 1) * kCols / top, kCols - 1);
          for (int64_t c = c0; c <= c1; ++c) row[c] = '#';
        }
        os << std::setw(5) << s << " |" << row << "| " << trace.live[s][l] << "\n";
      }
    }
    os << "\n";
  }
  return os.str();
}

std::string report_cycles(const CycleReport& c) {
  std::ostringstream os;
  os << "node\top\tengine\ttiles\tkernel\tdma\toverlap\tsetup\tlatency\tmarshaling\n";
  for (const auto& n : c.nodes)
    os << n.node << "\t" << n.op << "\t" << n.engine << "\t" << n.tiles << "\t" << n.kernel << "\t" << n.dma << "\t"
       << n.overlapped << "\t" << n.setup << "\t" << n.latency << "\t" << (n.latency - n.kernel) << "\n";
  os << "total\t\t\t\t" << c.kernel << "\t" << c.dma << "\t" << c.overlapped << "\t" << c.setup << "\t" << c.total
     << "\t" << (c.total - c.kernel) << "\n";
  os << std::fixed << std::setprecision(4) << "marshaling fraction " << c.marshaling() << "\n";
  return os.str();
}

NamedTensors random_inputs(const Graph& g, uint64_t seed) {
  std::mt19937_64 rng(seed);
  NamedTensors out;
  for (const auto& name : g.inputs) {
    const Buffer& b = g.buffer(name);
    const DataType dt = b.dtype ? *b.dtype : dtypes::kInt8;
    Tensor t(b.shape, dt);
    int64_t lo = -128, hi = 127;
    if (dt == dtypes::kInt16) lo = -32768, hi = 32767;
    if (dt == dtypes::kInt32) lo = -1000, hi = 1000;
    for (int c : g.consumers(name)) {
      const Node& n = g.nodes[c];
      if (n.op == ops::kGatherRows && n.inputs.size() == 2 && n.inputs[1] == name)
        lo = 0, hi = g.buffer(n.inputs[0]).shape[0] - 1;
    }
    std::uniform_int_distribution<int64_t> dist(lo, hi);
    for (int64_t i = 0; i < t.elements(); ++i) t.set(i, dist(rng));
    out[name] = std::move(t);
  }
  return out;
}

}  // namespace tinydeploy
