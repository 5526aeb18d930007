// Stage-2 edge selection: turning a score set into a circuit under an edge
// budget. Four selectors share one problem description:
//
//   * select_topk_abs — the B largest |score| edges, ties broken by canonical
//     edge order (the same ranking circuits_from_scores uses).
//   * select_pnr     — a positive/negative-ratio rule: a quota of
//     round-half-up(rho * B) edges taken from the positive-score pool by
//     descending signed score, the remaining budget filled by |score|.
//   * select_ilp     — exact 0/1 optimization of the summed edge weight under
//     the budget and one-hop connectivity constraints (every selected edge
//     must have a selected supporting edge into its source and a selected
//     continuation out of its destination, embed and logits exempt), solved
//     by branch-and-bound over the linear relaxation.
//   * brute_force_select — exhaustive enumeration over the same feasible
//     set; the oracle the optimizer is checked against.
//
// Selected sets that tie on objective are resolved to the canonical minimum:
// the lexicographically smallest sorted edge-index list. select_ilp runs a
// final deterministic pass that walks candidate sets in exactly that order
// with an admissible bound, so its result is independent of branch
// exploration order (and of the jobs parameter).

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include "circuitlab/common.hpp"
#include "circuitlab/graph.hpp"
#include "circuitlab/lp.hpp"

namespace circuitlab {

struct SelectionProblem {
  ScoreSet scores;
  int budget = 0;            // edge count B
  bool connectivity = false; // enforce one-hop support constraints
  std::optional<double> positive_ratio;  // rho for the ILP's quota constraint
  RankBy objective = RankBy::absolute;   // edge weight: |score| or signed score
  int max_ilp_edges = 10000;             // exact-solve guard
};

struct SelectionResult {
  Circuit circuit;
  double objective = 0.0;
  std::map<std::string, std::string> provenance;
};

// Budget from an edge-fraction threshold, matching the circuit-series rule.
inline int budget_from_fraction(double k, int num_edges) {
  require(k > 0.0 && k <= 1.0, "budget_from_fraction: k " + str(k) + " outside (0, 1]");
  require(num_edges >= 0, "budget_from_fraction: negative edge count");
  return static_cast<int>(std::floor(k * static_cast<double>(num_edges)));
}

namespace seldetail {

inline void validate(const SelectionProblem& p) {
  require(p.scores.graph != nullptr, "selection: unbound score set");
  int E = p.scores.graph->num_edges();
  require(p.budget >= 0 && p.budget <= E,
          "selection: budget " + std::to_string(p.budget) + " outside [0, " +
              std::to_string(E) + "]");
  if (p.positive_ratio) {
    require(*p.positive_ratio >= 0.0 && *p.positive_ratio <= 1.0,
            "selection: positive ratio " + str(*p.positive_ratio) + " outside [0, 1]");
  }
}

inline double edge_weight(const SelectionProblem& p, int e) {
  double v = p.scores.edge_values[static_cast<size_t>(e)];
  return p.objective == RankBy::absolute ? std::fabs(v) : v;
}

// Canonical descending rank: |score| descending, canonical edge order among
// ties (identical to the circuit-series ranking).
inline std::vector<int> rank_by_abs(const ScoreSet& scores) {
  int E = scores.graph->num_edges();
  std::vector<int> order(static_cast<size_t>(E));
  for (int e = 0; e < E; ++e) order[static_cast<size_t>(e)] = e;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return std::fabs(scores.edge_values[static_cast<size_t>(a)]) >
           std::fabs(scores.edge_values[static_cast<size_t>(b)]);
  });
  return order;
}

inline int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

// Exact objective of an ascending edge-index set, summed in index order so
// every selector reports bit-identical objectives for identical sets.
inline double set_objective(const SelectionProblem& p, const std::vector<int>& edges) {
  double total = 0.0;
  for (int e : edges) total += edge_weight(p, e);
  return total;
}

// One-hop support feasibility of an ascending edge set: every selected edge
// (u, v) needs a selected edge into u (unless u is the embedding) and a
// selected edge out of v (unless v is the logits).
inline bool connected_ok(const ComputationGraph& g, const std::vector<uint8_t>& in_set) {
  for (size_t e = 0; e < in_set.size(); ++e) {
    if (!in_set[e]) continue;
    const GraphEdge& ed = g.edge(static_cast<int>(e));
    if (ed.src != g.embed_node()) {
      bool supported = false;
      for (int f : g.incoming(ed.src)) supported |= in_set[static_cast<size_t>(f)] != 0;
      if (!supported) return false;
    }
    if (ed.dst != g.logits_node()) {
      bool continued = false;
      for (int f : g.outgoing(ed.dst)) continued |= in_set[static_cast<size_t>(f)] != 0;
      if (!continued) return false;
    }
  }
  return true;
}

struct QuotaInfo {
  std::vector<int> pool;  // ascending indices of strictly positive scores
  int quota = 0;          // effective quota (capped at pool size)
  int shortfall = 0;      // requested minus effective
};

inline QuotaInfo quota_info(const SelectionProblem& p) {
  QuotaInfo q;
  if (!p.positive_ratio) return q;
  int E = p.scores.graph->num_edges();
  for (int e = 0; e < E; ++e) {
    if (p.scores.edge_values[static_cast<size_t>(e)] > 0.0) q.pool.push_back(e);
  }
  int requested = round_half_up(*p.positive_ratio * static_cast<double>(p.budget));
  q.quota = std::min(requested, static_cast<int>(q.pool.size()));
  q.shortfall = requested - q.quota;
  return q;
}

inline void stamp(SelectionResult& r, const SelectionProblem& p, const std::string& method) {
  r.provenance["method"] = method;
  r.provenance["budget"] = std::to_string(p.budget);
  r.provenance["objective"] = p.objective == RankBy::absolute ? "absolute" : "signed";
  r.provenance["connectivity"] = p.connectivity ? "on" : "off";
  if (p.positive_ratio) r.provenance["rho"] = str(*p.positive_ratio);
}

// Shortest embed-to-logits path length in edges (the smallest nonempty
// feasible selection under the support constraints is a full such path).
inline int min_path_edges(const ComputationGraph& g) {
  std::vector<int> dist(static_cast<size_t>(g.num_nodes()), -1);
  std::queue<int> q;
  dist[static_cast<size_t>(g.embed_node())] = 0;
  q.push(g.embed_node());
  while (!q.empty()) {
    int u = q.front();
    q.pop();
    for (int e : g.outgoing(u)) {
      int v = g.edge(e).dst;
      if (dist[static_cast<size_t>(v)] < 0) {
        dist[static_cast<size_t>(v)] = dist[static_cast<size_t>(u)] + 1;
        q.push(v);
      }
    }
  }
  int d = dist[static_cast<size_t>(g.logits_node())];
  require(d > 0, "selection: graph has no embed-to-logits path");
  return d;
}

}  // namespace seldetail

// ===== greedy selectors =====================================================

inline SelectionResult select_topk_abs(const SelectionProblem& p) {
  seldetail::validate(p);
  std::vector<int> order = seldetail::rank_by_abs(p.scores);
  std::vector<int> chosen(order.begin(), order.begin() + p.budget);
  std::sort(chosen.begin(), chosen.end());
  SelectionResult r;
  r.circuit = Circuit::of_edges(p.scores.graph, chosen);
  r.objective = seldetail::set_objective(p, chosen);
  seldetail::stamp(r, p, "select-topk-abs");
  return r;
}

inline SelectionResult select_pnr(const SelectionProblem& p, double rho) {
  seldetail::validate(p);
  require(rho >= 0.0 && rho <= 1.0, "select_pnr: rho " + str(rho) + " outside [0, 1]");
  const ScoreSet& s = p.scores;
  int E = s.graph->num_edges();

  int requested = seldetail::round_half_up(rho * static_cast<double>(p.budget));
  // Positive pool in descending signed score, canonical order among ties.
  std::vector<int> pool;
  for (int e = 0; e < E; ++e) {
    if (s.edge_values[static_cast<size_t>(e)] > 0.0) pool.push_back(e);
  }
  std::stable_sort(pool.begin(), pool.end(), [&](int a, int b) {
    return s.edge_values[static_cast<size_t>(a)] > s.edge_values[static_cast<size_t>(b)];
  });
  int take_pos = std::min(requested, static_cast<int>(pool.size()));
  int shortfall = requested - take_pos;

  std::vector<uint8_t> picked(static_cast<size_t>(E), 0);
  std::vector<int> chosen;
  for (int i = 0; i < take_pos; ++i) {
    chosen.push_back(pool[static_cast<size_t>(i)]);
    picked[static_cast<size_t>(pool[static_cast<size_t>(i)])] = 1;
  }
  // Remaining budget (including any quota shortfall) from the absolute rank.
  for (int e : seldetail::rank_by_abs(s)) {
    if (static_cast<int>(chosen.size()) >= p.budget) break;
    if (picked[static_cast<size_t>(e)]) continue;
    chosen.push_back(e);
    picked[static_cast<size_t>(e)] = 1;
  }
  std::sort(chosen.begin(), chosen.end());

  SelectionResult r;
  r.circuit = Circuit::of_edges(s.graph, chosen);
  r.objective = seldetail::set_objective(p, chosen);
  seldetail::stamp(r, p, "select-pnr");
  r.provenance["rho"] = str(rho);
  r.provenance["pnr_quota"] = std::to_string(requested);
  if (shortfall > 0) r.provenance["pnr_shortfall"] = std::to_string(shortfall);
  return r;
}

// ===== exact selectors ======================================================

namespace seldetail {

// Builds the 0/1 relaxation for a branch-and-bound node. fixing[e] is -1
// (free), 0 or 1.
inline LpProblem node_relaxation(const SelectionProblem& p, const QuotaInfo& q,
                                 const std::vector<int8_t>& fixing) {
  const ComputationGraph& g = *p.scores.graph;
  int E = g.num_edges();
  std::vector<double> c(static_cast<size_t>(E));
  for (int e = 0; e < E; ++e) c[static_cast<size_t>(e)] = edge_weight(p, e);
  LpProblem lp = LpProblem::maximize(std::move(c));

  std::vector<double> row(static_cast<size_t>(E), 1.0);
  lp.constrain(row, '<', static_cast<double>(p.budget));
  for (int e = 0; e < E; ++e) {
    std::vector<double> ub(static_cast<size_t>(E), 0.0);
    ub[static_cast<size_t>(e)] = 1.0;
    if (fixing[static_cast<size_t>(e)] == 0) {
      lp.constrain(ub, '<', 0.0);
    } else if (fixing[static_cast<size_t>(e)] == 1) {
      lp.constrain(ub, '>', 1.0);
      lp.constrain(ub, '<', 1.0);
    } else {
      lp.constrain(ub, '<', 1.0);
    }
  }
  for (int e = 0; e < E; ++e) {
    const GraphEdge& ed = g.edge(e);
    if (ed.src != g.embed_node()) {
      std::vector<double> cr(static_cast<size_t>(E), 0.0);
      cr[static_cast<size_t>(e)] = 1.0;
      for (int f : g.incoming(ed.src)) cr[static_cast<size_t>(f)] -= 1.0;
      lp.constrain(cr, '<', 0.0);
    }
    if (ed.dst != g.logits_node()) {
      std::vector<double> cr(static_cast<size_t>(E), 0.0);
      cr[static_cast<size_t>(e)] = 1.0;
      for (int f : g.outgoing(ed.dst)) cr[static_cast<size_t>(f)] -= 1.0;
      lp.constrain(cr, '<', 0.0);
    }
  }
  if (q.quota >= 1) {
    std::vector<double> qr(static_cast<size_t>(E), 0.0);
    for (int e : q.pool) qr[static_cast<size_t>(e)] = 1.0;
    lp.constrain(qr, '>', static_cast<double>(q.quota));
  }
  return lp;
}

// Walks candidate edge sets in canonical lexicographic order (the order of
// sorted index lists), pruning by an admissible weight bound, and returns
// the first feasible set whose objective reaches the threshold: by
// construction the canonical minimum among optimal sets.
struct CanonicalSearch {
  const SelectionProblem& p;
  const QuotaInfo& q;
  const ComputationGraph& g;
  double threshold;
  int E;
  // suffix_best[i][t] = largest possible weight of t edges drawn from
  // indices >= i (weights sorted descending per suffix, prefix-summed).
  std::vector<std::vector<double>> suffix_best;
  std::vector<uint8_t> in_set;
  std::vector<int> current;
  std::vector<int> found;

  CanonicalSearch(const SelectionProblem& prob, const QuotaInfo& quota, double thr)
      : p(prob), q(quota), g(*prob.scores.graph), threshold(thr),
        E(g.num_edges()), in_set(static_cast<size_t>(E), 0) {
    suffix_best.assign(static_cast<size_t>(E) + 1, {});
    for (int i = E; i >= 0; --i) {
      std::vector<double> w;
      for (int e = i; e < E; ++e) {
        double we = edge_weight(p, e);
        if (we > 0.0) w.push_back(we);
      }
      std::sort(w.begin(), w.end(), std::greater<double>());
      std::vector<double> acc{0.0};
      for (double v : w) acc.push_back(acc.back() + v);
      suffix_best[static_cast<size_t>(i)] = std::move(acc);
    }
  }

  double bound_from(int next, int used, double obj) const {
    const std::vector<double>& acc = suffix_best[static_cast<size_t>(next)];
    size_t t = std::min(acc.size() - 1, static_cast<size_t>(p.budget - used));
    return obj + acc[t];
  }

  bool emit_ok(double obj) {
    if (obj < threshold) return false;
    if (p.connectivity && !connected_ok(g, in_set)) return false;
    if (q.quota >= 1) {
      int npos = 0;
      for (int e : q.pool) npos += in_set[static_cast<size_t>(e)];
      if (npos < q.quota) return false;
    }
    return true;
  }

  bool walk(int next, double obj) {
    if (emit_ok(obj)) {
      found = current;
      return true;
    }
    if (static_cast<int>(current.size()) >= p.budget) return false;
    for (int e = next; e < E; ++e) {
      double nobj = obj + edge_weight(p, e);
      if (bound_from(e + 1, static_cast<int>(current.size()) + 1, nobj) < threshold) continue;
      current.push_back(e);
      in_set[static_cast<size_t>(e)] = 1;
      if (walk(e + 1, nobj)) return true;
      in_set[static_cast<size_t>(e)] = 0;
      current.pop_back();
    }
    return false;
  }
};

}  // namespace seldetail

// Exact budgeted selection under connectivity, by best-bound branch-and-bound
// over the linear relaxation (integrality tolerance 1e-6), followed by a
// deterministic canonical pass at the proven optimum. jobs > 1 solves the
// relaxations of a frontier wave in parallel; the result is identical for
// every jobs value.
inline SelectionResult select_ilp(const SelectionProblem& p, int jobs = 1) {
  seldetail::validate(p);
  require(p.connectivity,
          "select_ilp: connectivity constraints are off; use select_topk_abs for "
          "unconstrained budgets");
  const ComputationGraph& g = *p.scores.graph;
  int E = g.num_edges();
  require(E <= p.max_ilp_edges, "select_ilp: " + std::to_string(E) +
                                    " edges exceeds the exact-solve limit of " +
                                    std::to_string(p.max_ilp_edges));
  require(jobs >= 1, "select_ilp: jobs must be >= 1");
  int min_b = seldetail::min_path_edges(g);
  if (p.budget < min_b) {
    throw ValidationError("select_ilp: budget " + std::to_string(p.budget) +
                          " cannot fit any embed-to-logits path; minimal feasible budget is " +
                          std::to_string(min_b));
  }
  seldetail::QuotaInfo quota = seldetail::quota_info(p);

  constexpr double kIntTol = 1e-6;
  constexpr double kBoundSlack = 1e-7;  // protects pruning against LP round-off

  struct Node {
    std::vector<int8_t> fixing;
    double bound = 0.0;
    std::vector<double> x;
    uint64_t seq = 0;
  };
  struct ByBound {
    bool operator()(const Node& a, const Node& b) const {
      if (a.bound != b.bound) return a.bound < b.bound;
      return a.seq > b.seq;  // FIFO among equal bounds
    }
  };

  auto solve_node = [&](Node& node) -> bool {
    LpSolution s = solve_lp(seldetail::node_relaxation(p, quota, node.fixing));
    if (s.status != LpStatus::optimal) return false;  // infeasible subtree
    node.bound = s.objective;
    node.x = std::move(s.x);
    return true;
  };

  bool have_incumbent = false;
  double best_obj = 0.0;
  if (quota.quota == 0) {
    have_incumbent = true;  // the empty selection is always feasible
    best_obj = 0.0;
  }

  std::priority_queue<Node, std::vector<Node>, ByBound> frontier;
  uint64_t seq = 0;
  uint64_t explored = 0;
  Node root{std::vector<int8_t>(static_cast<size_t>(E), -1), 0.0, {}, seq++};
  if (solve_node(root)) frontier.push(std::move(root));

  auto consider = [&](const std::vector<double>& x) {
    std::vector<int> set;
    for (int e = 0; e < E; ++e) {
      if (x[static_cast<size_t>(e)] > 0.5) set.push_back(e);
    }
    double obj = seldetail::set_objective(p, set);
    if (!have_incumbent || obj > best_obj) {
      have_incumbent = true;
      best_obj = obj;
    }
  };

  while (!frontier.empty()) {
    // A wave of up-to-jobs best nodes; children relaxations solve in
    // parallel, results merge in wave order.
    std::vector<Node> wave;
    while (!frontier.empty() && static_cast<int>(wave.size()) < jobs) {
      Node n = frontier.top();
      frontier.pop();
      if (have_incumbent && n.bound <= best_obj + kBoundSlack) continue;  // cannot improve
      wave.push_back(std::move(n));
    }
    if (wave.empty()) break;

    std::vector<Node> children;
    std::vector<uint8_t> child_ok;
    for (Node& n : wave) {
      ++explored;
      int frac = -1;
      for (int e = 0; e < E; ++e) {
        double v = n.x[static_cast<size_t>(e)];
        if (std::fabs(v - std::round(v)) > kIntTol) {
          frac = e;
          break;
        }
      }
      if (frac < 0) {
        consider(n.x);
        continue;
      }
      for (int val = 0; val <= 1; ++val) {
        Node child;
        child.fixing = n.fixing;
        child.fixing[static_cast<size_t>(frac)] = static_cast<int8_t>(val);
        child.seq = seq++;
        children.push_back(std::move(child));
      }
    }
    child_ok.assign(children.size(), 0);
    parallel_for(children.size(), jobs, [&](size_t i) {
      child_ok[i] = solve_node(children[i]) ? 1 : 0;
    });
    for (size_t i = 0; i < children.size(); ++i) {
      if (!child_ok[i]) continue;
      Node& c = children[i];
      int frac = -1;
      for (int e = 0; e < E; ++e) {
        double v = c.x[static_cast<size_t>(e)];
        if (std::fabs(v - std::round(v)) > kIntTol) {
          frac = e;
          break;
        }
      }
      if (frac < 0) {
        ++explored;
        consider(c.x);
      } else if (!have_incumbent || c.bound > best_obj + kBoundSlack) {
        frontier.push(std::move(c));
      }
    }
  }

  if (!have_incumbent) {
    throw ValidationError(
        "select_ilp: no selection satisfies the positive-edge quota of " +
        std::to_string(quota.quota) + " at budget " + std::to_string(p.budget));
  }

  // Canonical pass: the lexicographically smallest edge set achieving the
  // proven optimum (up to round-off slack).
  seldetail::CanonicalSearch search(p, quota, best_obj - 1e-9);
  bool found = search.walk(0, 0.0);
  require(found, "select_ilp: canonical pass lost the optimum (internal invariant)");

  SelectionResult r;
  r.circuit = Circuit::of_edges(p.scores.graph, search.found);
  r.objective = seldetail::set_objective(p, search.found);
  seldetail::stamp(r, p, "select-ilp");
  if (p.positive_ratio) {
    r.provenance["pnr_quota"] = std::to_string(quota.quota);
    if (quota.shortfall > 0) {
      r.provenance["pnr_shortfall"] = std::to_string(quota.shortfall);
    }
  }
  r.provenance["bb_nodes"] = std::to_string(explored);
  return r;
}

// Exhaustive oracle over the same feasible set (budget, optional
// connectivity, optional quota). Ties resolve to the canonical minimum set.
inline SelectionResult brute_force_select(const SelectionProblem& p) {
  seldetail::validate(p);
  const ComputationGraph& g = *p.scores.graph;
  int E = g.num_edges();
  require(E <= 20, "brute_force_select: " + std::to_string(E) +
                       " edges exceeds the exhaustive limit of 20");
  seldetail::QuotaInfo quota = seldetail::quota_info(p);

  uint32_t pool_mask = 0;
  for (int e : quota.pool) pool_mask |= 1u << e;

  bool have = false;
  double best_obj = 0.0;
  std::vector<int> best_set;
  std::vector<uint8_t> in_set(static_cast<size_t>(E), 0);

  uint32_t total = 1u << E;
  for (uint32_t mask = 0; mask < total; ++mask) {
    int count = __builtin_popcount(mask);
    if (count > p.budget) continue;
    if (quota.quota >= 1 && __builtin_popcount(mask & pool_mask) < quota.quota) continue;
    std::vector<int> set;
    for (int e = 0; e < E; ++e) {
      bool on = (mask >> e) & 1u;
      in_set[static_cast<size_t>(e)] = on ? 1 : 0;
      if (on) set.push_back(e);
    }
    if (p.connectivity && !seldetail::connected_ok(g, in_set)) continue;
    double obj = seldetail::set_objective(p, set);
    if (!have || obj > best_obj + 1e-12 ||
        (obj > best_obj - 1e-12 && set < best_set)) {
      have = true;
      best_obj = obj;
      best_set = std::move(set);
    }
  }
  if (!have) {
    throw ValidationError(
        "brute_force_select: no selection satisfies the positive-edge quota of " +
        std::to_string(quota.quota) + " at budget " + std::to_string(p.budget));
  }

  SelectionResult r;
  r.circuit = Circuit::of_edges(p.scores.graph, best_set);
  r.objective = seldetail::set_objective(p, best_set);
  seldetail::stamp(r, p, "brute-force");
  if (p.positive_ratio) {
    r.provenance["pnr_quota"] = std::to_string(quota.quota);
    if (quota.shortfall > 0) {
      r.provenance["pnr_shortfall"] = std::to_string(quota.shortfall);
    }
  }
  return r;
}

}  // namespace circuitlab
