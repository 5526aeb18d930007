// A small dense linear-programming solver: maximize c·x subject to general
// rows (<=, ==, >=) and x >= 0, via the two-phase simplex method on a dense
// tableau. Bland's smallest-index pivoting rule is used throughout, which
// makes every run terminate (no cycling) and deterministic.
//
// The solver targets the small, dense relaxations produced by the edge
// selection module (tens of variables, tens of rows); it favors clarity and
// exactness of status reporting over sparse-matrix performance.

#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "circuitlab/common.hpp"

namespace circuitlab {

enum class LpStatus { optimal, infeasible, unbounded };

inline const char* lp_status_name(LpStatus s) {
  switch (s) {
    case LpStatus::optimal: return "optimal";
    case LpStatus::infeasible: return "infeasible";
    default: return "unbounded";
  }
}

// One constraint row: sum_j coeff[j] * x[j]  (rel)  rhs, with rel one of
// '<' (<=), '=' (==), '>' (>=).
struct LpRow {
  std::vector<double> coeff;
  char rel = '<';
  double rhs = 0.0;
};

struct LpProblem {
  int num_vars = 0;
  std::vector<double> objective;  // maximized; size num_vars
  std::vector<LpRow> rows;

  static LpProblem maximize(std::vector<double> c) {
    LpProblem p;
    p.num_vars = static_cast<int>(c.size());
    p.objective = std::move(c);
    return p;
  }

  void constrain(std::vector<double> coeff, char rel, double rhs) {
    require(static_cast<int>(coeff.size()) == num_vars,
            "LpProblem: row has " + std::to_string(coeff.size()) + " coefficients for " +
                std::to_string(num_vars) + " variables");
    require(rel == '<' || rel == '=' || rel == '>',
            std::string("LpProblem: relation must be '<', '=' or '>', got '") + rel + "'");
    rows.push_back({std::move(coeff), rel, rhs});
  }
};

struct LpSolution {
  LpStatus status = LpStatus::optimal;
  double objective = 0.0;
  std::vector<double> x;  // size num_vars when status == optimal
  int iterations = 0;     // total simplex pivots across both phases
};

namespace lpdetail {

constexpr double kPivotTol = 1e-9;
constexpr int kMaxPivots = 100000;

// Dense simplex state: m tableau rows over n_total columns plus the
// right-hand side in column n_total; reduced costs in zrow with the negated
// objective value in zrow[n_total].
struct Tableau {
  int m = 0;
  int n_total = 0;
  std::vector<std::vector<double>> t;  // m x (n_total + 1)
  std::vector<int> basis;              // size m, column index basic in each row
  std::vector<double> zrow;            // n_total + 1
};

// Builds zrow for costs c (size n_total): zrow[j] = c[j] - c_B . B^-1 A_j,
// computable directly from the current tableau because each row i reads
// x[basis[i]] = t[i] applied to the nonbasic vars.
inline void load_costs(Tableau& tb, const std::vector<double>& c) {
  tb.zrow.assign(static_cast<size_t>(tb.n_total) + 1, 0.0);
  for (int j = 0; j <= tb.n_total; ++j) {
    double r = j < tb.n_total ? c[static_cast<size_t>(j)] : 0.0;
    for (int i = 0; i < tb.m; ++i) {
      r -= c[static_cast<size_t>(tb.basis[static_cast<size_t>(i)])] *
           tb.t[static_cast<size_t>(i)][static_cast<size_t>(j)];
    }
    tb.zrow[static_cast<size_t>(j)] = r;
  }
}

inline void pivot(Tableau& tb, int row, int col) {
  std::vector<double>& pr = tb.t[static_cast<size_t>(row)];
  double p = pr[static_cast<size_t>(col)];
  for (double& v : pr) v /= p;
  for (int i = 0; i < tb.m; ++i) {
    if (i == row) continue;
    std::vector<double>& ri = tb.t[static_cast<size_t>(i)];
    double f = ri[static_cast<size_t>(col)];
    if (f == 0.0) continue;
    for (int j = 0; j <= tb.n_total; ++j) {
      ri[static_cast<size_t>(j)] -= f * pr[static_cast<size_t>(j)];
    }
    ri[static_cast<size_t>(col)] = 0.0;
  }
  double f = tb.zrow[static_cast<size_t>(col)];
  if (f != 0.0) {
    for (int j = 0; j <= tb.n_total; ++j) {
      tb.zrow[static_cast<size_t>(j)] -= f * pr[static_cast<size_t>(j)];
    }
    tb.zrow[static_cast<size_t>(col)] = 0.0;
  }
  tb.basis[static_cast<size_t>(row)] = col;
}

// Runs simplex to optimality on the loaded costs. Columns with banned[j]
// set never enter the basis. Returns false when the objective is unbounded.
inline bool run_simplex(Tableau& tb, const std::vector<uint8_t>& banned, int& iterations) {
  for (;;) {
    // Bland: the entering column is the smallest improvable index.
    int enter = -1;
    for (int j = 0; j < tb.n_total; ++j) {
      if (banned[static_cast<size_t>(j)]) continue;
      if (tb.zrow[static_cast<size_t>(j)] > kPivotTol) {
        enter = j;
        break;
      }
    }
    if (enter < 0) return true;
    // Ratio test; ties broken by the smallest basic variable index (Bland).
    int leave = -1;
    double best = 0.0;
    for (int i = 0; i < tb.m; ++i) {
      double a = tb.t[static_cast<size_t>(i)][static_cast<size_t>(enter)];
      if (a <= kPivotTol) continue;
      double ratio = tb.t[static_cast<size_t>(i)][static_cast<size_t>(tb.n_total)] / a;
      if (leave < 0 || ratio < best - kPivotTol ||
          (ratio < best + kPivotTol &&
           tb.basis[static_cast<size_t>(i)] < tb.basis[static_cast<size_t>(leave)])) {
        leave = i;
        best = ratio;
      }
    }
    if (leave < 0) return false;  // unbounded direction
    pivot(tb, leave, enter);
    if (++iterations > kMaxPivots) {
      throw NumericError("simplex: pivot limit exceeded (" + std::to_string(kMaxPivots) + ")");
    }
  }
}

}  // namespace lpdetail

// Solves the problem exactly (up to the pivot tolerance). Phase 1 minimizes
// artificial variables to find a starting basis; phase 2 optimizes the real
// objective. The reported objective is recomputed from the final x so it is
// an exact dot product rather than accumulated tableau arithmetic.
inline LpSolution solve_lp(const LpProblem& p) {
  require(p.num_vars >= 1, "solve_lp: problem has no variables");
  require(static_cast<int>(p.objective.size()) == p.num_vars,
          "solve_lp: objective size mismatch");
  using namespace lpdetail;

  int n = p.num_vars;
  int m = static_cast<int>(p.rows.size());

  // Column layout: structural | slack/surplus | artificial.
  int n_slack = 0;
  for (const LpRow& r : p.rows) {
    if (r.rel != '=') ++n_slack;
  }
  // Rows are normalized to rhs >= 0 first; '<' rows with nonnegative rhs get
  // a basic slack, everything else a basic artificial.
  std::vector<double> rhs(static_cast<size_t>(m));
  std::vector<char> rel(static_cast<size_t>(m));
  std::vector<std::vector<double>> coeff(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    const LpRow& r = p.rows[static_cast<size_t>(i)];
    coeff[static_cast<size_t>(i)] = r.coeff;
    rhs[static_cast<size_t>(i)] = r.rhs;
    rel[static_cast<size_t>(i)] = r.rel;
    if (r.rhs < 0.0) {
      for (double& v : coeff[static_cast<size_t>(i)]) v = -v;
      rhs[static_cast<size_t>(i)] = -r.rhs;
      rel[static_cast<size_t>(i)] = r.rel == '<' ? '>' : (r.rel == '>' ? '<' : '=');
    }
  }
  int n_art = 0;
  for (int i = 0; i < m; ++i) {
    if (rel[static_cast<size_t>(i)] != '<') ++n_art;
  }

  Tableau tb;
  tb.m = m;
  tb.n_total = n + n_slack + n_art;
  tb.t.assign(static_cast<size_t>(m),
              std::vector<double>(static_cast<size_t>(tb.n_total) + 1, 0.0));
  tb.basis.assign(static_cast<size_t>(m), -1);

  int slack_at = n;
  int art_at = n + n_slack;
  const int art_start = art_at;
  for (int i = 0; i < m; ++i) {
    std::vector<double>& row = tb.t[static_cast<size_t>(i)];
    for (int j = 0; j < n; ++j) row[static_cast<size_t>(j)] = coeff[static_cast<size_t>(i)][static_cast<size_t>(j)];
    row[static_cast<size_t>(tb.n_total)] = rhs[static_cast<size_t>(i)];
    char c = rel[static_cast<size_t>(i)];
    if (c == '<') {
      row[static_cast<size_t>(slack_at)] = 1.0;
      tb.basis[static_cast<size_t>(i)] = slack_at++;
    } else if (c == '>') {
      row[static_cast<size_t>(slack_at)] = -1.0;
      ++slack_at;
      row[static_cast<size_t>(art_at)] = 1.0;
      tb.basis[static_cast<size_t>(i)] = art_at++;
    } else {
      row[static_cast<size_t>(art_at)] = 1.0;
      tb.basis[static_cast<size_t>(i)] = art_at++;
    }
  }

  LpSolution sol;
  std::vector<uint8_t> banned(static_cast<size_t>(tb.n_total), 0);

  // Phase 1: drive the artificial variables to zero.
  if (n_art > 0) {
    std::vector<double> c1(static_cast<size_t>(tb.n_total), 0.0);
    for (int j = art_start; j < tb.n_total; ++j) c1[static_cast<size_t>(j)] = -1.0;
    load_costs(tb, c1);
    if (!run_simplex(tb, banned, sol.iterations)) {
      throw NumericError("solve_lp: phase-1 objective unbounded (internal invariant)");
    }
    // zrow[n_total] holds -(objective); the phase-1 objective is -(sum of
    // artificials), so feasibility means it reached ~0 from below.
    double phase1 = -tb.zrow[static_cast<size_t>(tb.n_total)];
    if (phase1 < -1e-7) {
      sol.status = LpStatus::infeasible;
      return sol;
    }
    // Pivot leftover artificials out of the basis (degenerate pivots); a row
    // with no eligible pivot column is redundant and is dropped.
    for (int i = 0; i < tb.m;) {
      if (tb.basis[static_cast<size_t>(i)] < art_start) {
        ++i;
        continue;
      }
      int col = -1;
      for (int j = 0; j < art_start; ++j) {
        if (std::fabs(tb.t[static_cast<size_t>(i)][static_cast<size_t>(j)]) > kPivotTol) {
          col = j;
          break;
        }
      }
      if (col >= 0) {
        pivot(tb, i, col);
        ++i;
      } else {
        tb.t.erase(tb.t.begin() + i);
        tb.basis.erase(tb.basis.begin() + i);
        --tb.m;
      }
    }
    for (int j = art_start; j < tb.n_total; ++j) banned[static_cast<size_t>(j)] = 1;
  }

  // Phase 2: the real objective over structural columns.
  std::vector<double> c2(static_cast<size_t>(tb.n_total), 0.0);
  for (int j = 0; j < n; ++j) c2[static_cast<size_t>(j)] = p.objective[static_cast<size_t>(j)];
  load_costs(tb, c2);
  if (!run_simplex(tb, banned, sol.iterations)) {
    sol.status = LpStatus::unbounded;
    return sol;
  }

  sol.status = LpStatus::optimal;
  sol.x.assign(static_cast<size_t>(n), 0.0);
  for (int i = 0; i < tb.m; ++i) {
    int b = tb.basis[static_cast<size_t>(i)];
    if (b < n) {
      sol.x[static_cast<size_t>(b)] = tb.t[static_cast<size_t>(i)][static_cast<size_t>(tb.n_total)];
    }
  }
  double obj = 0.0;
  for (int j = 0; j < n; ++j) obj += p.objective[static_cast<size_t>(j)] * sol.x[static_cast<size_t>(j)];
  sol.objective = obj;
  return sol;
}

}  // namespace circuitlab
