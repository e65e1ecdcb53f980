// Copyright 2026 The TinyDeploy Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tinydeploy/memalloc.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "tinydeploy/frontend.hpp"

namespace tinydeploy {

// ---------------------------------------------------------------------------
// Lifetimes

std::vector<Lifetime> compute_lifetimes(const Graph& g, const Schedule& s) {
  const int last = std::max<int>(static_cast<int>(s.size()) - 1, 0);
  const auto step_of = s.steps();
  std::vector<Lifetime> out;
  for (const auto& b : g.buffers) {
    Lifetime l{b.name, 0, last};
    const bool global = b.scope == Scope::Global || b.is_constant() || g.is_graph_input(b.name) ||
                        g.is_graph_output(b.name);
    if (!global) {
      const int p = g.producer(b.name);
      if (p < 0) throw Error("buffer '" + b.name + "' is never produced");
      l.start = l.end = step_of[p];
      for (int c : g.consumers(b.name)) l.end = std::max(l.end, step_of[c]);
    }
    out.push_back(l);
  }
  return out;
}

Lifetime arena_lifetime(const std::string& name, int step, int steps, bool double_buffer) {
  if (!double_buffer) return {name, step, step};
  return {name, std::max(step - 1, 0), std::min(step + 1, std::max(steps - 1, 0))};
}

// ---------------------------------------------------------------------------
// Tetris

namespace {

// Lifetimes mapped onto compressed step coordinates; overlap is preserved
// because two intervals that meet share the later start point.
struct Compressed {
  std::vector<int> lo, hi;
  int points = 0;
};

Compressed compress(std::span<const Lifetime> lifetimes) {
  std::vector<int> pts;
  for (const auto& l : lifetimes) {
    pts.push_back(l.start);
    pts.push_back(l.end);
  }
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  Compressed c;
  c.points = static_cast<int>(pts.size());
  for (const auto& l : lifetimes) {
    c.lo.push_back(static_cast<int>(std::lower_bound(pts.begin(), pts.end(), l.start) - pts.begin()));
    c.hi.push_back(static_cast<int>(std::lower_bound(pts.begin(), pts.end(), l.end) - pts.begin()));
  }
  return c;
}

// Reusable evaluator with a per-point running top.
class TetrisEval {
 public:
  explicit TetrisEval(std::span<const Lifetime> lifetimes) : c_(compress(lifetimes)), top_(c_.points, 0) {}

  int64_t peak(std::span<const int> order, std::span<const int64_t> sizes, int64_t* work,
               std::vector<int64_t>* offsets = nullptr) {
    std::fill(top_.begin(), top_.end(), 0);
    int64_t peak = 0;
    for (int j : order) {
      int64_t base = 0;
      for (int p = c_.lo[j]; p <= c_.hi[j]; ++p) base = std::max(base, top_[p]);
      const int64_t h = base + sizes[j];
      for (int p = c_.lo[j]; p <= c_.hi[j]; ++p) top_[p] = h;
      if (offsets) (*offsets)[j] = base;
      peak = std::max(peak, h);
      if (work) *work += 1 + c_.hi[j] - c_.lo[j];
    }
    return peak;
  }

  /// Largest total size live at one point.
  int64_t clique_bound(std::span<const int64_t> sizes) const {
    std::vector<int64_t> sum(c_.points + 1, 0);
    for (size_t j = 0; j < sizes.size(); ++j) {
      sum[c_.lo[j]] += sizes[j];
      sum[c_.hi[j] + 1] -= sizes[j];
    }
    int64_t run = 0, best = 0;
    for (int p = 0; p < c_.points; ++p) best = std::max(best, run += sum[p]);
    return best;
  }

  const Compressed& compressed() const { return c_; }

 private:
  Compressed c_;
  std::vector<int64_t> top_;
};

}  // namespace

TetrisResult tetris_allocate(std::span<const int> order, std::span<const Lifetime> lifetimes,
                             std::span<const int64_t> sizes) {
  TetrisResult r;
  r.offsets.assign(sizes.size(), 0);
  r.heights.assign(sizes.size(), 0);
  TetrisEval eval(lifetimes);
  r.peak = eval.peak(order, sizes, nullptr, &r.offsets);
  for (size_t j = 0; j < sizes.size(); ++j) r.heights[j] = r.offsets[j] + sizes[j];
  return r;
}

// ---------------------------------------------------------------------------
// Allocation problems

std::vector<std::vector<uint8_t>> AllocationProblem::adjacency() const {
  const size_t n = items.size();
  std::vector<std::vector<uint8_t>> a(n, std::vector<uint8_t>(n, 0));
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j) a[i][j] = i != j && items[i].life.overlaps(items[j].life);
  return a;
}

std::vector<AllocationProblem> build_allocation_problems(const Graph& g, const Schedule& s, TileFlow& flow,
                                                         const TargetDescription& t, bool double_buffer) {
  std::map<std::string, AllocationProblem> by_level;
  for (const auto& l : t.levels) by_level[l.name] = AllocationProblem{l.name, l.capacity, {}};
  const int steps = static_cast<int>(s.size());

  for (const auto& life : compute_lifetimes(g, s)) {
    const int sv = flow.home_size.at(life.buffer);
    AllocationItem item{life.buffer, sv, life, AllocationItem::Kind::Home, -1};
    by_level.at(flow.cp.sizes[sv].level).items.push_back(item);
  }
  for (const auto& nt : flow.nodes) {
    const std::string& node = g.nodes[nt.node].name;
    for (const auto& ot : nt.operands) {
      if (ot.size_var < 0) continue;
      AllocationItem item;
      item.size_var = ot.size_var;
      item.node = nt.node;
      if (ot.operand < 0) {
        item.kind = AllocationItem::Kind::Scratch;
        item.symbol = node + ":scratch";
        item.life = {item.symbol, nt.step, nt.step};
      } else {
        item.kind = AllocationItem::Kind::Arena;
        item.symbol = node + ":" + std::to_string(ot.operand) + ":" + ot.tensor;
        item.life = arena_lifetime(item.symbol, nt.step, steps, double_buffer);
      }
      by_level.at(flow.cp.sizes[ot.size_var].level).items.push_back(item);
    }
  }
  std::vector<AllocationProblem> out;
  for (const auto& l : t.levels) {
    AllocationProblem p = std::move(by_level.at(l.name));
    Constraint tet;
    tet.kind = Constraint::Kind::Tetris;
    tet.level = l.name;
    for (const auto& it : p.items) {
      tet.items.push_back(it.size_var);
      tet.lifetimes.emplace_back(it.life.start, it.life.end);
    }
    tet.origin = "allocation of level '" + l.name + "'";
    flow.cp.add(tet);
    Constraint cap;
    cap.kind = Constraint::Kind::Capacity;
    cap.level = l.name;
    cap.value = l.capacity;
    cap.origin = "capacity of level '" + l.name + "'";
    flow.cp.add(cap);
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Level solver

namespace {

constexpr int64_t kWorkPerMs = 50000;

std::vector<int> first_use_order(const AllocationProblem& p) {
  std::vector<int> o(p.items.size());
  std::iota(o.begin(), o.end(), 0);
  std::stable_sort(o.begin(), o.end(), [&](int a, int b) { return p.items[a].life.start < p.items[b].life.start; });
  return o;
}

std::vector<int> size_desc_order(const AllocationProblem& p, std::span<const int64_t> sizes) {
  std::vector<int> o(p.items.size());
  std::iota(o.begin(), o.end(), 0);
  std::stable_sort(o.begin(), o.end(), [&](int a, int b) {
    if (sizes[a] != sizes[b]) return sizes[a] > sizes[b];
    return p.items[a].life.start < p.items[b].life.start;
  });
  return o;
}

// Interval colouring by decreasing size; colours are emitted bottom-up.
std::vector<int> colour_order(const AllocationProblem& p, std::span<const int64_t> sizes) {
  std::vector<std::vector<int>> colours;
  for (int j : size_desc_order(p, sizes)) {
    bool placed = false;
    for (auto& c : colours) {
      bool clash = false;
      for (int i : c)
        if (p.items[i].life.overlaps(p.items[j].life)) {
          clash = true;
          break;
        }
      if (!clash) {
        c.push_back(j);
        placed = true;
        break;
      }
    }
    if (!placed) colours.push_back({j});
  }
  std::vector<int> o;
  for (auto& c : colours) {
    std::stable_sort(c.begin(), c.end(), [&](int a, int b) { return p.items[a].life.start < p.items[b].life.start; });
    o.insert(o.end(), c.begin(), c.end());
  }
  return o;
}

// Exact minimum-peak order by depth-first search over prefixes.
void exact_orders(TetrisEval& eval, std::span<const int64_t> sizes, std::vector<int>& best, int64_t& best_peak,
                  int64_t lower_bound, int64_t* work) {
  const int n = static_cast<int>(sizes.size());
  const auto& c = eval.compressed();
  std::vector<int> prefix;
  std::vector<std::vector<int64_t>> tops(n + 1, std::vector<int64_t>(c.points, 0));
  std::vector<char> used(n, 0);
  std::function<void(int, int64_t)> dfs = [&](int depth, int64_t peak) {
    if (best_peak == lower_bound) return;
    if (depth == n) {
      if (peak < best_peak) {
        best_peak = peak;
        best = prefix;
      }
      return;
    }
    for (int j = 0; j < n; ++j) {
      if (used[j]) continue;
      const auto& top = tops[depth];
      int64_t base = 0;
      for (int p = c.lo[j]; p <= c.hi[j]; ++p) base = std::max(base, top[p]);
      const int64_t h = base + sizes[j];
      if (work) *work += 1;
      if (std::max(peak, h) >= best_peak) continue;
      tops[depth + 1] = top;
      for (int p = c.lo[j]; p <= c.hi[j]; ++p) tops[depth + 1][p] = h;
      used[j] = 1;
      prefix.push_back(j);
      dfs(depth + 1, std::max(peak, h));
      prefix.pop_back();
      used[j] = 0;
    }
  };
  dfs(0, 0);
}

struct LevelSolveConfig {
  bool local_search = true;
  int64_t work_limit = 0;
};

LevelSolution solve_level_impl(const AllocationProblem& p, std::span<const int64_t> sizes, const SolveOptions& opts,
                               const LevelSolveConfig& cfg, int64_t* work) {
  LevelSolution ls;
  ls.level = p.level;
  ls.sizes.assign(sizes.begin(), sizes.end());
  const int n = static_cast<int>(p.items.size());
  ls.offsets.assign(n, 0);
  if (n == 0) {
    ls.exact = true;
    return ls;
  }
  std::vector<Lifetime> lives;
  for (const auto& it : p.items) lives.push_back(it.life);
  TetrisEval eval(lives);
  ls.lower_bound = eval.clique_bound(sizes);

  std::vector<std::vector<int>> candidates = {first_use_order(p), colour_order(p, sizes), size_desc_order(p, sizes)};
  std::vector<int> best;
  int64_t best_peak = std::numeric_limits<int64_t>::max();
  for (const auto& o : candidates) {
    const int64_t pk = eval.peak(o, sizes, work);
    if (pk < best_peak) {
      best_peak = pk;
      best = o;
    }
  }
  if (n <= opts.exact_buffer_limit) {
    exact_orders(eval, sizes, best, best_peak, ls.lower_bound, work);
    ls.exact = true;
  } else if (cfg.local_search && best_peak > ls.lower_bound) {
    std::mt19937_64 rng(opts.seed);
    for (int r = 0; r < 2; ++r) {
      std::vector<int> o = first_use_order(p);
      std::shuffle(o.begin(), o.end(), rng);
      const int64_t pk = eval.peak(o, sizes, work);
      if (pk < best_peak) {
        best_peak = pk;
        best = o;
      }
    }
    // Seeded insertion moves; a move is kept when the peak does not grow.
    std::vector<int> cur = best;
    int64_t cur_peak = best_peak;
    while (best_peak > ls.lower_bound && (!work || *work < cfg.work_limit)) {
      const int from = static_cast<int>(rng() % n);
      const int to = static_cast<int>(rng() % n);
      if (from == to) continue;
      std::vector<int> next = cur;
      const int v = next[from];
      next.erase(next.begin() + from);
      next.insert(next.begin() + to, v);
      const int64_t pk = eval.peak(next, sizes, work);
      if (pk <= cur_peak) {
        cur = std::move(next);
        cur_peak = pk;
        if (pk < best_peak) {
          best_peak = pk;
          best = cur;
        }
      }
      if (!work) break;
    }
    ls.exact = best_peak == ls.lower_bound;
  } else {
    ls.exact = best_peak == ls.lower_bound;
  }
  ls.order = best;
  ls.peak = eval.peak(best, sizes, nullptr, &ls.offsets);
  return ls;
}

}  // namespace

LevelSolution solve_level(const AllocationProblem& p, std::span<const int64_t> sizes, const SolveOptions& opts,
                          int64_t* work) {
  int64_t local = 0;
  int64_t* w = work ? work : &local;
  LevelSolveConfig cfg{true, *w + opts.budget_ms * kWorkPerMs};
  return solve_level_impl(p, sizes, opts, cfg, w);
}

// ---------------------------------------------------------------------------
// Joint solve

const LevelSolution& JointSolution::level(const std::string& name) const {
  for (const auto& l : levels)
    if (l.level == name) return l;
  throw Error("no solution for level '" + name + "'");
}

Assignment JointSolution::assignment() const {
  Assignment a;
  a.dims = dims;
  for (const auto& l : levels) {
    a.order[l.level] = l.order;
    a.offsets[l.level] = l.offsets;
    a.peak[l.level] = l.peak;
  }
  return a;
}

namespace {

class JointSolver {
 public:
  JointSolver(const ConstraintProgram& cp, const std::vector<AllocationProblem>& problems, const SolveOptions& opts)
      : cp_(cp), problems_(problems), opts_(opts), dc_(propagate_dims(cp)) {
    limit_ = opts.budget_ms * kWorkPerMs;
    value_.resize(dc_.members.size());
    for (size_t c = 0; c < dc_.members.size(); ++c) {
      domain_.push_back(dc_.domain(static_cast<int>(c)));
      value_[c] = domain_.back().front();
    }
    for (size_t l = 0; l < problems_.size(); ++l) {
      bool variable = false;
      for (const auto& it : problems_[l].items)
        for (int d : cp_.sizes[it.size_var].dims)
          if (domain_[dc_.of[d]].size() > 1) {
            variable = true;
            active_.insert(dc_.of[d]);
          }
      (variable ? variable_levels_ : fixed_levels_).push_back(static_cast<int>(l));
    }
  }

  JointSolution solve() {
    JointSolution sol;
    // Levels whose sizes do not depend on tiling are solved once.
    for (int l : fixed_levels_) {
      auto ls = solve_level_impl(problems_[l], sizes_of(l), opts_, {true, work_ + limit_ / 4}, &work_);
      if (ls.peak > problems_[l].capacity) infeasible(l, ls);
      fixed_solutions_[l] = ls;
    }
    std::vector<int> active(active_.begin(), active_.end());
    size_t var_items = 0;
    for (int l : variable_levels_) var_items += problems_[l].items.size();
    double space = 1;
    for (int c : active) space *= static_cast<double>(domain_[c].size());
    const bool exact = !active.empty() && static_cast<int64_t>(var_items) <= opts_.exact_buffer_limit && space <= 2e6;
    bool optimal = false;
    if (active.empty()) {
      for (int l : variable_levels_) check_feasible_or_throw(l);
    } else if (exact) {
      exact_search(active);
      optimal = true;
      sol.log.push_back("search: exact over " + std::to_string(active.size()) + " dimension classes");
    } else {
      const int shrinks = shrink(active);
      const int grows = grow(active);
      sol.log.push_back("search: heuristic, " + std::to_string(shrinks) + " shrink and " + std::to_string(grows) +
                        " grow steps");
    }
    sol.dims = expand(value_);
    bool at_max = true;
    for (int c : active) at_max = at_max && value_[c] == domain_[c].front();
    bool levels_tight = true;
    for (size_t l = 0; l < problems_.size(); ++l) {
      LevelSolution ls;
      auto it = fixed_solutions_.find(static_cast<int>(l));
      if (it != fixed_solutions_.end()) {
        ls = it->second;
      } else {
        ls = solve_level_impl(problems_[l], sizes_of(static_cast<int>(l)), opts_, {true, work_ + limit_ / 4}, &work_);
        if (ls.peak > problems_[l].capacity) infeasible(static_cast<int>(l), ls);
      }
      levels_tight = levels_tight && ls.exact;
      std::ostringstream os;
      os << "level " << ls.level << ": " << problems_[l].items.size() << " buffers, peak " << ls.peak << " / "
         << problems_[l].capacity << ", lower bound " << ls.lower_bound << (ls.exact ? ", order optimal" : "");
      sol.log.push_back(os.str());
      sol.levels.push_back(std::move(ls));
    }
    sol.objective = objective_value(cp_, sol.dims);
    sol.optimal = levels_tight && (optimal || at_max);
    sol.work = work_;
    sol.log.push_back("objective " + std::to_string(sol.objective) + (sol.optimal ? " (optimal)" : " (best found)"));
    sol.log.push_back("work units " + std::to_string(work_));
    return sol;
  }

 private:
  std::vector<int64_t> expand(const std::vector<int64_t>& value) const {
    std::vector<int64_t> dims(cp_.dims.size());
    for (size_t d = 0; d < dims.size(); ++d) dims[d] = value[dc_.of[d]];
    return dims;
  }

  std::vector<int64_t> sizes_of(int l, const std::vector<int64_t>* value = nullptr) const {
    const auto dims = expand(value ? *value : value_);
    std::vector<int64_t> s;
    for (const auto& it : problems_[l].items) s.push_back(evaluate_size_var(cp_.sizes[it.size_var], dims));
    return s;
  }

  int64_t quick_peak(int l, const std::vector<int64_t>& value) {
    auto s = sizes_of(l, &value);
    return solve_level_impl(problems_[l], s, opts_, {false, 0}, &work_).peak;
  }

  bool feasible(const std::vector<int64_t>& value) {
    for (int l : variable_levels_)
      if (quick_peak(l, value) > problems_[l].capacity) return false;
    return true;
  }

  [[noreturn]] void infeasible(int l, const LevelSolution& ls) const {
    std::ostringstream os;
    os << "level '" << problems_[l].level << "': minimum peak " << ls.peak << " bytes exceeds capacity "
       << problems_[l].capacity << " bytes";
    if (!ls.exact) os << " (lower bound " << ls.lower_bound << ")";
    throw InfeasibleError(os.str());
  }

  void check_feasible_or_throw(int l) {
    auto ls = solve_level_impl(problems_[l], sizes_of(l), opts_, {true, work_ + limit_ / 4}, &work_);
    if (ls.peak > problems_[l].capacity) infeasible(l, ls);
  }

  std::vector<int64_t> tie_vector(const std::vector<int64_t>& dims) const {
    std::vector<int64_t> v;
    for (int d : cp_.tie_break) v.push_back(dims[d]);
    std::sort(v.begin(), v.end());
    return v;
  }

  void exact_search(const std::vector<int>& active) {
    std::vector<int64_t> best_value;
    int64_t best_obj = -1;
    std::vector<int64_t> best_tie;
    std::vector<int64_t> cur = value_;
    std::function<void(size_t)> dfs = [&](size_t k) {
      if (k == active.size()) {
        if (!feasible(cur)) return;
        const auto dims = expand(cur);
        const int64_t obj = objective_value(cp_, dims);
        const auto tie = tie_vector(dims);
        if (obj > best_obj || (obj == best_obj && tie > best_tie)) {
          best_obj = obj;
          best_tie = tie;
          best_value = cur;
        }
        return;
      }
      const int c = active[k];
      for (int64_t v : domain_[c]) {
        cur[c] = v;
        // Upper bound: the rest at their largest values.
        std::vector<int64_t> ub = cur;
        for (size_t q = k + 1; q < active.size(); ++q) ub[active[q]] = domain_[active[q]].front();
        if (objective_value(cp_, expand(ub)) < best_obj) break;
        // Feasibility is monotone: try the rest at their smallest values.
        std::vector<int64_t> lb = cur;
        for (size_t q = k + 1; q < active.size(); ++q) lb[active[q]] = domain_[active[q]].back();
        if (!feasible(lb)) continue;
        dfs(k + 1);
      }
      cur[c] = value_[c];
    };
    dfs(0);
    if (best_obj < 0) {
      std::vector<int64_t> minimal = value_;
      for (int c : active) minimal[c] = domain_[c].back();
      value_ = minimal;
      for (int l : variable_levels_) check_feasible_or_throw(l);
      throw InfeasibleError("no tiling fits the memory levels");
    }
    value_ = best_value;
  }

  // Next smaller admissible value that adds at least one tile.
  std::optional<int64_t> next_smaller(int c) const {
    const int64_t hi = dc_.hi[c];
    const int64_t count = (hi + value_[c] - 1) / value_[c];
    for (int64_t v : domain_[c])
      if (v < value_[c] && (hi + v - 1) / v > count) return v;
    return std::nullopt;
  }

  int shrink(const std::vector<int>& active) {
    int steps = 0;
    while (true) {
      int bad = -1;
      int64_t bad_peak = 0;
      for (int l : variable_levels_) {
        const int64_t pk = quick_peak(l, value_);
        if (pk > problems_[l].capacity) {
          bad = l;
          bad_peak = pk;
          break;
        }
      }
      if (bad < 0) return steps;
      std::set<int> in_level;
      for (const auto& it : problems_[bad].items)
        for (int d : cp_.sizes[it.size_var].dims) in_level.insert(dc_.of[d]);
      int pick = -1;
      int64_t pick_v = 0, pick_gain = -1, pick_bytes = -1, pick_loss = 0;
      const int64_t obj0 = objective_value(cp_, expand(value_));
      const auto bytes0 = sizes_of(bad);
      const int64_t total0 = std::accumulate(bytes0.begin(), bytes0.end(), int64_t{0});
      for (int c : active) {
        if (!in_level.count(c)) continue;
        auto v = next_smaller(c);
        if (!v) continue;
        std::vector<int64_t> trial = value_;
        trial[c] = *v;
        const int64_t gain = bad_peak - quick_peak(bad, trial);
        const auto bytes = sizes_of(bad, &trial);
        const int64_t saved = total0 - std::accumulate(bytes.begin(), bytes.end(), int64_t{0});
        const int64_t loss = obj0 - objective_value(cp_, expand(trial));
        const bool better = gain > pick_gain || (gain == pick_gain && saved > pick_bytes) ||
                            (gain == pick_gain && saved == pick_bytes && loss < pick_loss);
        if (pick < 0 || better) {
          pick = c;
          pick_v = *v;
          pick_gain = gain;
          pick_bytes = saved;
          pick_loss = loss;
        }
      }
      if (pick < 0) {
        auto ls = solve_level_impl(problems_[bad], sizes_of(bad), opts_, {true, work_ + limit_ / 4}, &work_);
        if (ls.peak > problems_[bad].capacity) infeasible(bad, ls);
        return steps;
      }
      value_[pick] = pick_v;
      ++steps;
    }
  }

  int grow(const std::vector<int>& active) {
    int steps = 0;
    for (int pass = 0; pass < 2; ++pass) {
      bool changed = false;
      for (int c : active) {
        // Domain is descending; candidates are the values above the current one.
        const auto& dom = domain_[c];
        auto pos = std::find(dom.begin(), dom.end(), value_[c]);
        int lo = 0, hi = static_cast<int>(pos - dom.begin()) - 1;  // indices of larger values
        int found = -1;
        while (lo <= hi) {
          const int mid = (lo + hi) / 2;
          std::vector<int64_t> trial = value_;
          trial[c] = dom[mid];
          if (feasible(trial)) {
            found = mid;
            hi = mid - 1;
          } else {
            lo = mid + 1;
          }
        }
        if (found >= 0) {
          value_[c] = dom[found];
          changed = true;
          ++steps;
        }
      }
      if (!changed) break;
    }
    return steps;
  }

  const ConstraintProgram& cp_;
  const std::vector<AllocationProblem>& problems_;
  SolveOptions opts_;
  DimClasses dc_;
  std::vector<std::vector<int64_t>> domain_;
  std::vector<int64_t> value_;
  std::set<int> active_;
  std::vector<int> variable_levels_, fixed_levels_;
  std::map<int, LevelSolution> fixed_solutions_;
  int64_t work_ = 0;
  int64_t limit_ = 0;
};

}  // namespace

JointSolution solve_joint(const ConstraintProgram& cp, const std::vector<AllocationProblem>& problems,
                          const SolveOptions& opts) {
  return JointSolver(cp, problems, opts).solve();
}

// ---------------------------------------------------------------------------
// Memory map

const MemoryMap::Level& MemoryMap::level(const std::string& name) const {
  for (const auto& l : levels)
    if (l.name == name) return l;
  throw Error("memory map has no level '" + name + "'");
}

std::vector<std::string> MemoryMap::check() const {
  std::vector<std::string> bad;
  for (const auto& l : levels) {
    for (const auto& e : l.entries)
      if (e.offset < 0 || e.offset + e.size > l.capacity)
        bad.push_back("level '" + l.name + "': '" + e.symbol + "' at [" + std::to_string(e.offset) + ", " +
                      std::to_string(e.offset + e.size) + ") exceeds capacity " + std::to_string(l.capacity));
    for (size_t i = 0; i < l.entries.size(); ++i)
      for (size_t j = i + 1; j < l.entries.size(); ++j) {
        const auto& a = l.entries[i];
        const auto& b = l.entries[j];
        if (!a.life.overlaps(b.life) || a.size == 0 || b.size == 0) continue;
        if (a.offset < b.offset + b.size && b.offset < a.offset + a.size)
          bad.push_back("level '" + l.name + "': '" + a.symbol + "' and '" + b.symbol +
                        "' are live together and share bytes");
      }
  }
  return bad;
}

MemoryMap make_memory_map(const std::vector<AllocationProblem>& problems, const JointSolution& sol) {
  MemoryMap mm;
  for (const auto& p : problems) {
    const LevelSolution& ls = sol.level(p.level);
    MemoryMap::Level l{p.level, p.capacity, ls.peak, {}};
    for (size_t i = 0; i < p.items.size(); ++i) {
      const auto& it = p.items[i];
      l.entries.push_back({it.symbol, ls.offsets[i], ls.sizes[i], it.life, it.kind, it.node});
    }
    mm.levels.push_back(std::move(l));
  }
  return mm;
}

// ---------------------------------------------------------------------------
// Tiling and transfers

TilingSolution make_tiling_solution(const Graph& g, const TileFlow& flow, const JointSolution& sol,
                                    bool double_buffer) {
  TilingSolution ts;
  ts.double_buffer = double_buffer;
  for (const auto& b : g.buffers) {
    TensorTile tt;
    for (size_t d = 0; d < b.shape.size(); ++d) {
      const int64_t v = sol.dims[flow.tensor_dims.at(b.name)[d]];
      tt.shape.push_back(v);
      tt.count *= (b.shape[d] + v - 1) / v;
    }
    ts.tensors[b.name] = tt;
  }
  return ts;
}

std::vector<Region> tile_grid(const Shape& full, const Shape& tile) {
  const size_t rank = full.size();
  std::vector<int64_t> counts(rank);
  for (size_t d = 0; d < rank; ++d) counts[d] = (full[d] + tile[d] - 1) / tile[d];
  std::vector<Region> out;
  std::vector<int64_t> idx(rank, 0);
  while (true) {
    Region r;
    for (size_t d = 0; d < rank; ++d) {
      r.origin.push_back(idx[d] * tile[d]);
      r.extent.push_back(std::min(tile[d], full[d] - idx[d] * tile[d]));
    }
    out.push_back(std::move(r));
    int d = static_cast<int>(rank) - 1;
    while (d >= 0 && ++idx[d] == counts[d]) idx[d--] = 0;
    if (d < 0) break;
  }
  return out;
}

Region operand_region(const Region& out, const std::vector<int>& links, const Shape& full) {
  Region r;
  for (size_t d = 0; d < full.size(); ++d) {
    if (links[d] >= 0) {
      r.origin.push_back(out.origin[links[d]]);
      r.extent.push_back(out.extent[links[d]]);
    } else {
      r.origin.push_back(0);
      r.extent.push_back(full[d]);
    }
  }
  return r;
}

std::vector<NodeTransfers> plan_transfers(const TilingSolution& ts, const Graph& g, const TileFlow& flow,
                                          const TargetDescription& t) {
  std::vector<NodeTransfers> plan;
  for (const auto& nt : flow.nodes) {
    const Node& n = g.nodes[nt.node];
    NodeTransfers tr;
    tr.node = nt.node;
    const int out = static_cast<int>(n.inputs.size());
    const Buffer& ob = g.buffer(n.outputs[0]);
    tr.tiles = tile_grid(ob.shape, ts.tensors.at(ob.name).shape);
    const int tiles = static_cast<int>(tr.tiles.size());
    tr.stationary.assign(nt.operands.size(), false);

    std::vector<int> hops_in, hops_out;
    for (size_t k = 0; k < nt.operands.size(); ++k) {
      const auto& ot = nt.operands[k];
      if (ot.operand < 0 || ot.direct) continue;
      if (t.level(ot.tile_level).parent != ot.home_level)
        throw Error("node '" + n.name + "': operand '" + ot.tensor + "' has no DMA path");
      if (ot.operand == out) {
        hops_out.push_back(static_cast<int>(k));
        continue;
      }
      hops_in.push_back(static_cast<int>(k));
      const Shape& full = g.buffer(ot.tensor).shape;
      const Region first = operand_region(tr.tiles[0], ot.links, full);
      bool same = true;
      for (int i = 1; i < tiles && same; ++i) same = operand_region(tr.tiles[i], ot.links, full) == first;
      tr.stationary[k] = same;
    }
    auto bytes_of = [&](int k, int tile) {
      const auto& ot = nt.operands[k];
      const Buffer& b = g.buffer(ot.tensor);
      return operand_region(tr.tiles[tile], ot.links, b.shape).elements() * b.dtype->bytes();
    };
    auto in = [&](int tile, int slot, bool prologue) {
      for (int k : hops_in) {
        if (tr.stationary[k] && !prologue) continue;
        const auto& ot = nt.operands[k];
        tr.events.push_back({Transfer::Kind::In, k, tile, tr.stationary[k] ? 0 : slot, ot.home_level, ot.tile_level,
                             bytes_of(k, tile)});
      }
    };
    auto out_ev = [&](int tile, int slot) {
      for (int k : hops_out) {
        const auto& ot = nt.operands[k];
        tr.events.push_back({Transfer::Kind::Out, k, tile, slot, ot.tile_level, ot.home_level, bytes_of(k, tile)});
      }
    };
    auto compute = [&](int tile, int slot) {
      tr.events.push_back({Transfer::Kind::Compute, -1, tile, slot, nt.compute_level, nt.compute_level, 0});
    };
    if (!ts.double_buffer) {
      for (int k = 0; k < tiles; ++k) {
        in(k, 0, k == 0);
        compute(k, 0);
        out_ev(k, 0);
      }
    } else {
      in(0, 0, true);
      for (int k = 0; k < tiles; ++k) {
        if (k + 1 < tiles) in(k + 1, (k + 1) & 1, false);
        if (k >= 1) out_ev(k - 1, (k - 1) & 1);
        compute(k, k & 1);
      }
      out_ev(tiles - 1, (tiles - 1) & 1);
    }
    plan.push_back(std::move(tr));
  }
  return plan;
}

}  // namespace tinydeploy
