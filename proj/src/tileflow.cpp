// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tinydeploy/tileflow.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

#include "tinydeploy/ops.hpp"

namespace tinydeploy {

int64_t align_up(int64_t v, int64_t a) { return a <= 1 ? v : (v + a - 1) / a * a; }

int64_t evaluate_size_var(const SizeVar& s, const std::vector<int64_t>& dim_values) {
  int64_t v = s.coef;
  for (int d : s.dims) v *= dim_values[d];
  return align_up(v, s.align);
}

int ConstraintProgram::add_dim(DimVar d) {
  dims.push_back(std::move(d));
  return static_cast<int>(dims.size()) - 1;
}

int ConstraintProgram::add_size(SizeVar s) {
  sizes.push_back(std::move(s));
  return static_cast<int>(sizes.size()) - 1;
}

int64_t objective_value(const ConstraintProgram& cp, const std::vector<int64_t>& dims) {
  int64_t v = 0;
  for (int s : cp.objective) v += evaluate_size_var(cp.sizes[s], dims);
  return v;
}

// ---------------------------------------------------------------------------
// Propagation

std::vector<int64_t> DimClasses::domain(int c) const {
  if (fixed[c]) return {fixed[c]};
  std::vector<int64_t> out;
  for (int64_t v = hi[c]; v >= 1; --v)
    if (v == hi[c] || v % multiple[c] == 0) out.push_back(v);
  return out;
}

DimClasses propagate_dims(const ConstraintProgram& cp) {
  const int n = static_cast<int>(cp.dims.size());
  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& c : cp.constraints)
    if (c.kind == Constraint::Kind::Equal) {
      int a = find(c.a), b = find(c.b);
      if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
  DimClasses dc;
  dc.of.assign(n, -1);
  std::map<int, int> root_class;
  for (int d = 0; d < n; ++d) {
    int r = find(d);
    auto [it, inserted] = root_class.emplace(r, static_cast<int>(dc.members.size()));
    if (inserted) {
      dc.members.emplace_back();
      dc.hi.push_back(cp.dims[d].hi);
      dc.fixed.push_back(0);
      dc.multiple.push_back(1);
    }
    const int c = it->second;
    dc.of[d] = c;
    dc.members[c].push_back(d);
    dc.hi[c] = std::min(dc.hi[c], cp.dims[d].hi);
  }
  auto describe = [&](int d) { return cp.dims[d].tensor + "." + std::to_string(cp.dims[d].dim); };
  for (const auto& con : cp.constraints) {
    if (con.kind == Constraint::Kind::Fix) {
      const int c = dc.of[con.a];
      if (dc.fixed[c] && dc.fixed[c] != con.value)
        throw InfeasibleError("tile dimension " + describe(con.a) + " must equal both " +
                              std::to_string(dc.fixed[c]) + " and " + std::to_string(con.value) + " (" +
                              con.origin + ")");
      dc.fixed[c] = con.value;
    } else if (con.kind == Constraint::Kind::Divisible) {
      const int c = dc.of[con.a];
      dc.multiple[c] = std::lcm(dc.multiple[c], con.value);
    }
  }
  for (size_t c = 0; c < dc.members.size(); ++c) {
    if (dc.fixed[c] > dc.hi[c] || dc.fixed[c] < 0)
      throw InfeasibleError("tile dimension " + describe(dc.members[c][0]) + " fixed to " +
                            std::to_string(dc.fixed[c]) + " beyond extent " + std::to_string(dc.hi[c]));
    if (dc.fixed[c] && dc.fixed[c] != dc.hi[c] && dc.fixed[c] % dc.multiple[c] != 0)
      throw InfeasibleError("tile dimension " + describe(dc.members[c][0]) + " fixed to " +
                            std::to_string(dc.fixed[c]) + " violates a divisibility rule");
  }
  return dc;
}

// ---------------------------------------------------------------------------
// Checking

std::vector<std::string> check_assignment(const ConstraintProgram& cp, const Assignment& a) {
  std::vector<std::string> bad;
  if (a.dims.size() != cp.dims.size()) return {"assignment has the wrong number of dims"};
  for (size_t d = 0; d < cp.dims.size(); ++d) {
    const auto& v = cp.dims[d];
    if (a.dims[d] < v.lo || a.dims[d] > v.hi)
      bad.push_back("d" + std::to_string(d) + " = " + std::to_string(a.dims[d]) + " outside [" +
                    std::to_string(v.lo) + ", " + std::to_string(v.hi) + "]");
  }
  if (!bad.empty()) return bad;
  for (const auto& c : cp.constraints) {
    switch (c.kind) {
      case Constraint::Kind::Equal:
        if (a.dims[c.a] != a.dims[c.b])
          bad.push_back("d" + std::to_string(c.a) + " != d" + std::to_string(c.b) + " (" + c.origin + ")");
        break;
      case Constraint::Kind::Fix:
        if (a.dims[c.a] != c.value)
          bad.push_back("d" + std::to_string(c.a) + " != " + std::to_string(c.value) + " (" + c.origin + ")");
        break;
      case Constraint::Kind::Divisible:
        if (a.dims[c.a] % c.value != 0 && a.dims[c.a] != cp.dims[c.a].hi)
          bad.push_back("d" + std::to_string(c.a) + " not a multiple of " + std::to_string(c.value) + " (" +
                        c.origin + ")");
        break;
      case Constraint::Kind::Tetris: {
        const size_t n = c.items.size();
        auto ord = a.order.find(c.level);
        auto off = a.offsets.find(c.level);
        if (ord == a.order.end() || off == a.offsets.end()) {
          bad.push_back("level '" + c.level + "': no order or offsets");
          break;
        }
        // Permutation block: every position used exactly once.
        std::vector<int> seen(n, 0);
        bool perm_ok = ord->second.size() == n && off->second.size() == n;
        if (perm_ok)
          for (int p : ord->second) {
            if (p < 0 || p >= static_cast<int>(n) || seen[p]++) perm_ok = false;
          }
        if (!perm_ok) {
          bad.push_back("level '" + c.level + "': order is not a permutation");
          break;
        }
        std::vector<int64_t> size(n);
        for (size_t i = 0; i < n; ++i) size[i] = evaluate_size_var(cp.sizes[c.items[i]], a.dims);
        auto overlap = [&](size_t i, size_t j) {
          return c.lifetimes[i].first <= c.lifetimes[j].second && c.lifetimes[j].first <= c.lifetimes[i].second;
        };
        // H recurrence, pairwise form.
        std::vector<int64_t> h(n, 0);
        int64_t peak = 0;
        for (size_t k = 0; k < n; ++k) {
          const size_t j = ord->second[k];
          int64_t base = 0;
          for (size_t q = 0; q < k; ++q) {
            const size_t i = ord->second[q];
            if (overlap(i, j)) base = std::max(base, h[i]);
          }
          h[j] = base + size[j];
          peak = std::max(peak, h[j]);
          if (off->second[j] != base)
            bad.push_back("level '" + c.level + "': item " + std::to_string(j) + " at offset " +
                          std::to_string(off->second[j]) + ", recurrence gives " + std::to_string(base));
        }
        auto pk = a.peak.find(c.level);
        if (pk == a.peak.end() || pk->second != peak)
          bad.push_back("level '" + c.level + "': peak differs from recurrence value " + std::to_string(peak));
        break;
      }
      case Constraint::Kind::Capacity: {
        auto pk = a.peak.find(c.level);
        const int64_t peak = pk == a.peak.end() ? 0 : pk->second;
        if (peak > c.value)
          bad.push_back("level '" + c.level + "': peak " + std::to_string(peak) + " exceeds capacity " +
                        std::to_string(c.value));
        break;
      }
    }
  }
  return bad;
}

// ---------------------------------------------------------------------------
// Dump

std::string dump_cp(const ConstraintProgram& cp) {
  std::ostringstream os;
  for (size_t d = 0; d < cp.dims.size(); ++d) {
    const auto& v = cp.dims[d];
    os << "dim d" << d << " " << v.tensor << "." << v.dim << " in [" << v.lo << ", " << v.hi << "]\n";
  }
  for (size_t s = 0; s < cp.sizes.size(); ++s) {
    const auto& v = cp.sizes[s];
    os << "size s" << s << " " << v.name << " @" << v.level << " = align(" << v.align << ", " << v.coef;
    for (int d : v.dims) os << " * d" << d;
    os << ")\n";
  }
  for (const auto& c : cp.constraints) {
    switch (c.kind) {
      case Constraint::Kind::Equal:
        os << "eq d" << c.a << " d" << c.b;
        break;
      case Constraint::Kind::Fix:
        os << "fix d" << c.a << " = " << c.value;
        break;
      case Constraint::Kind::Divisible:
        os << "div d" << c.a << " % " << c.value << " or full";
        break;
      case Constraint::Kind::Tetris:
        os << "perm " << c.level << " " << c.items.size() << "x" << c.items.size() << "\n";
        os << "tetris " << c.level;
        for (size_t i = 0; i < c.items.size(); ++i)
          os << " s" << c.items[i] << "[" << c.lifetimes[i].first << ".." << c.lifetimes[i].second << "]";
        os << "\nH " << c.level << ": H[j] = max(H[i] : i before j, A[j,i] = 1) + C[j]";
        break;
      case Constraint::Kind::Capacity:
        os << "cap " << c.level << " peak <= " << c.value;
        break;
    }
    if (!c.origin.empty()) os << "  # " << c.origin;
    os << "\n";
  }
  if (cp.has_objective) {
    os << "maximize";
    if (cp.objective.empty()) os << " 0";
    for (size_t i = 0; i < cp.objective.size(); ++i) os << (i ? " + s" : " s") << cp.objective[i];
    os << "\ntiebreak leximin";
    for (int d : cp.tie_break) os << " d" << d;
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Construction

namespace {

std::string hop_level(const TargetDescription& t, const std::string& home, const std::string& engine) {
  for (const auto& child : t.children(home))
    if (t.level(child).accessible_by.count(engine)) return child;
  return {};
}

}  // namespace

TileFlow build_tile_cp(const Graph& g, const Binding& b, const TargetDescription& t, const Schedule& s,
                       const TileOptions& opts) {
  TileFlow flow;
  ConstraintProgram& cp = flow.cp;
  auto type_of = [&](const std::string& name) {
    const Buffer& buf = g.buffer(name);
    return buf.dtype ? *buf.dtype : b.types.at(name);
  };

  for (const auto& buf : g.buffers) {
    std::vector<int> dims;
    for (size_t d = 0; d < buf.shape.size(); ++d)
      dims.push_back(cp.add_dim(DimVar{buf.name, static_cast<int>(d), 1, buf.shape[d]}));
    flow.tensor_dims[buf.name] = dims;
    if (buf.level.empty()) throw Error("buffer '" + buf.name + "' has no memory level");
    SizeVar sv;
    sv.name = buf.name;
    sv.level = buf.level;
    sv.coef = buf.elements() * type_of(buf.name).bytes();
    sv.align = t.alignment;
    flow.home_size[buf.name] = cp.add_size(sv);
  }

  for (size_t step = 0; step < s.order.size(); ++step) {
    const int idx = s.order[step];
    const Node& n = g.nodes[idx];
    const NodeBinding& nb = b.nodes.at(idx);
    NodeTiling nt;
    nt.node = idx;
    nt.step = static_cast<int>(step);
    nt.engine = nb.engine;
    const std::string who = "node '" + n.name + "'";

    std::vector<std::string> operands = n.inputs;
    operands.push_back(n.outputs.at(0));
    std::vector<Shape> shapes;
    for (const auto& o : operands) shapes.push_back(g.buffer(o).shape);
    const TileConstraintSpec spec = tile_constraints_for(nb.kernel, n, shapes);
    const int out = static_cast<int>(n.inputs.size());

    for (int k = 0; k <= out; ++k) {
      OperandTiling ot;
      ot.operand = k;
      ot.tensor = operands[k];
      const Buffer& buf = g.buffer(ot.tensor);
      ot.home_level = buf.level;
      ot.dims = flow.tensor_dims.at(ot.tensor);
      ot.direct = t.level(buf.level).accessible_by.count(nb.engine) != 0;
      if (!ot.direct) {
        ot.tile_level = hop_level(t, buf.level, nb.engine);
        if (ot.tile_level.empty())
          throw Error(who + ": operand '" + ot.tensor + "' in level '" + buf.level + "' is unreachable from engine '" +
                      nb.engine + "'");
      }
      const int rank = static_cast<int>(buf.shape.size());
      ot.links.assign(rank, -1);
      for (int d = 0; d < rank; ++d) {
        const DimRef ref{k, d};
        const std::string where = who + " operand " + std::to_string(k) + " dim " + std::to_string(d);
        if (k == out) {
          ot.links[d] = d;
          if (spec.is_untileable(ref)) cp.add({Constraint::Kind::Fix, ot.dims[d], -1, buf.shape[d], {}, {}, {}, where + " untileable"});
          continue;
        }
        auto link = spec.link_of(ref);
        if (link && !spec.is_untileable(ref)) {
          ot.links[d] = link->dim;
          const int out_dim = flow.tensor_dims.at(operands[out])[link->dim];
          cp.add({Constraint::Kind::Equal, ot.dims[d], out_dim, 0, {}, {}, {}, where + " = output dim " + std::to_string(link->dim)});
        } else {
          cp.add({Constraint::Kind::Fix, ot.dims[d], -1, buf.shape[d], {}, {}, {}, where + " untileable"});
        }
      }
      // In-place access needs contiguous tiles: only the outermost dim may be split.
      if (ot.direct)
        for (int d = 1; d < rank; ++d)
          cp.add({Constraint::Kind::Fix, ot.dims[d], -1, buf.shape[d], {}, {}, {}, who + " operand '" + ot.tensor + "' accessed in place"});
      nt.operands.push_back(std::move(ot));
    }
    for (const auto& dv : spec.platform.divisible) {
      const int dim = nt.operands.at(dv.ref.operand).dims.at(dv.ref.dim);
      cp.add({Constraint::Kind::Divisible, dim, -1, dv.multiple, {}, {}, {}, who + " platform rule"});
    }
    for (const auto& bd : spec.platform.bounds) {
      DimVar& v = cp.dims[nt.operands.at(bd.ref.operand).dims.at(bd.ref.dim)];
      v.lo = std::max(v.lo, bd.min);
      v.hi = std::min(v.hi, bd.max);
    }

    // Compute level: where hop tiles land, else the output's home.
    nt.compute_level = nt.operands[out].direct ? nt.operands[out].home_level : nt.operands[out].tile_level;
    for (const auto& ot : nt.operands)
      if (!ot.direct) nt.compute_level = ot.tile_level;

    for (auto& ot : nt.operands) {
      if (ot.direct) continue;
      ot.factor = opts.double_buffer ? 2 : 1;
      SizeVar sv;
      sv.name = n.name + ":" + ot.tensor;
      sv.level = ot.tile_level;
      sv.coef = ot.factor * type_of(ot.tensor).bytes();
      sv.dims = ot.dims;
      sv.align = t.alignment;
      ot.size_var = cp.add_size(sv);
    }

    if (nb.kernel.transient_size) {
      const SizeExpr e = nb.kernel.transient_size(n, shapes);
      if (e.coef > 0) {
        OperandTiling sc;
        sc.operand = -1;
        sc.home_level = nt.compute_level;
        sc.tile_level = nt.compute_level;
        SizeVar sv;
        sv.name = n.name + ":scratch";
        sv.level = nt.compute_level;
        sv.coef = e.coef;
        for (const auto& r : e.dims) sv.dims.push_back(nt.operands.at(r.operand).dims.at(r.dim));
        sv.align = t.alignment;
        sc.size_var = cp.add_size(sv);
        nt.operands.push_back(std::move(sc));
      }
    }
    flow.nodes.push_back(std::move(nt));
  }

  // Arenas that cannot fit even with every free dimension at 1.
  const DimClasses dc = propagate_dims(cp);
  std::vector<int64_t> minimal(cp.dims.size());
  for (size_t d = 0; d < cp.dims.size(); ++d) {
    const int c = dc.of[d];
    minimal[d] = dc.fixed[c] ? dc.fixed[c] : dc.domain(c).back();
  }
  for (const auto& nt : flow.nodes) {
    std::map<std::string, int64_t> per_level;
    for (const auto& ot : nt.operands)
      if (ot.size_var >= 0) per_level[cp.sizes[ot.size_var].level] += evaluate_size_var(cp.sizes[ot.size_var], minimal);
    for (const auto& [lvl, bytes] : per_level)
      if (bytes > t.level(lvl).capacity)
        throw InfeasibleError("node '" + g.nodes[nt.node].name + "' needs at least " + std::to_string(bytes) +
                              " bytes of tiles in level '" + lvl + "' (capacity " +
                              std::to_string(t.level(lvl).capacity) + ")");
  }
  return flow;
}

void tiling_objective(TileFlow& flow, TilingPolicy) {
  ConstraintProgram& cp = flow.cp;
  cp.objective.clear();
  cp.tie_break.clear();
  std::set<int> seen;
  for (const auto& nt : flow.nodes)
    for (const auto& ot : nt.operands) {
      if (ot.operand < 0 || ot.direct) continue;
      cp.objective.push_back(ot.size_var);
      const int inner = ot.dims.empty() ? -1 : ot.dims.back();
      if (inner >= 0 && seen.insert(inner).second) cp.tie_break.push_back(inner);
    }
  cp.has_objective = true;
}

}  // namespace tinydeploy
