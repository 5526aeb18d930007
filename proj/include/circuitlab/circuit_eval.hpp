// Circuit scoring: the logit-difference metric, faithfulness ratios, the
// faithfulness curve over the threshold grid, its two area summaries (CPR and
// CMD), and AUROC against a known circuit.
//
// Conventions pinned here:
//   * m(instance) = logit(answer) - logit(counterfactual answer) at the final
//     position of the (possibly patched) forward pass; dataset-level m is the
//     mean over instances, averaged before any ratio is taken.
//   * faithfulness(C) = (m(C) - m(empty)) / (m(full) - m(empty)), where m(C)
//     patches every NON-member edge from the ablation source. The full
//     circuit scores exactly 1 and the empty circuit exactly 0, by algebra.
//   * CPR = sum_i w_i f(k_i) and CMD = sum_i w_i |f(k_i) - 1| with trapezoidal
//     weights in log10(k) normalized to sum 1 (the constant-1 curve has
//     CPR = 1). |f - 1| keeps CMD meaningful when curves overshoot f > 1.
//     Absolute CPR/CMD values are weight-scheme-dependent; the scheme is
//     fixed here and versioned with the file format.
//   * Ablation sources: per-instance counterfactual caches (default), or
//     position-resolved mean contributions over a reference split.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "circuitlab/common.hpp"
#include "circuitlab/graph.hpp"
#include "circuitlab/model.hpp"
#include "circuitlab/tasks.hpp"

namespace circuitlab {

// ===== ablation sources =====================================================

inline AblationKind ablation_kind_from(const std::string& s) {
  if (s == "counterfactual") return AblationKind::counterfactual;
  if (s == "mean") return AblationKind::mean;
  if (s == "zero") return AblationKind::zero;
  throw ValidationError("unknown ablation kind \"" + s +
                        "\" (known: counterfactual, mean, zero)");
}

// Where patched-out edges take their replacement messages from. The
// counterfactual kind reads each instance's paired counterfactual run; the
// mean kind uses per-(node, position) averages over a reference split, so
// every instance shares one replacement table. Circuit evaluation accepts
// only these two kinds (zero ablation exists for gate mixing elsewhere).
struct AblationSpec {
  AblationKind kind = AblationKind::counterfactual;
  AblationMessages mean_messages;  // only used when kind == mean

  static AblationSpec counterfactual() { return AblationSpec{}; }

  static AblationSpec mean_over(const Model& model,
                                const std::vector<TaskInstance>& reference) {
    require(!reference.empty(), "mean ablation: empty reference split");
    size_t T = reference.front().tokens.size();
    for (const TaskInstance& inst : reference) {
      require(inst.tokens.size() == T,
              "mean ablation: reference instances must share one template length");
    }
    AblationSpec spec;
    spec.kind = AblationKind::mean;
    spec.mean_messages = AblationMessages::zeros(*model.graph, static_cast<int>(T));
    for (const TaskInstance& inst : reference) {
      ActivationCache cache = forward_cache(model, inst.tokens);
      for (size_t node = 0; node < spec.mean_messages.by_node.size(); ++node) {
        const std::vector<double>& src = cache.contributions[node];
        std::vector<double>& dst = spec.mean_messages.by_node[node];
        for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
    }
    double inv = 1.0 / static_cast<double>(reference.size());
    for (std::vector<double>& row : spec.mean_messages.by_node) {
      for (double& x : row) x *= inv;
    }
    return spec;
  }

  // Replacement messages for one instance.
  AblationMessages messages_for(const Model& model, const TaskInstance& inst) const {
    require(kind == AblationKind::counterfactual || kind == AblationKind::mean,
            "AblationSpec: circuit evaluation supports counterfactual and mean ablations");
    if (kind == AblationKind::mean) {
      require(static_cast<size_t>(mean_messages.seq_len) == inst.tokens.size(),
              "mean ablation: instance length " + std::to_string(inst.tokens.size()) +
                  " does not match the mean table length " +
                  std::to_string(mean_messages.seq_len));
      return mean_messages;
    }
    return AblationMessages::from_cache(forward_cache(model, inst.cf_tokens));
  }
};

// ===== the metric ===========================================================

// m = logit(y) - logit(y') at the final position.
inline double metric_m(const Model& model, const TaskInstance& inst,
                       const PatchPlan* plan = nullptr) {
  require(inst.answer >= 0 && inst.answer < model.config.vocab_size &&
              inst.cf_answer >= 0 && inst.cf_answer < model.config.vocab_size,
          "metric_m: answer tokens outside the model vocabulary");
  Tensor logits;
  if (plan) {
    logits = forward_patched(model, inst.tokens, *plan);
  } else {
    logits = forward_logits(model, inst.tokens);
  }
  int T = logits.dim(0);
  int vocab = logits.dim(1);
  const double* row = &logits.data()[static_cast<size_t>(T - 1) * vocab];
  return row[inst.answer] - row[inst.cf_answer];
}

inline uint64_t dataset_fingerprint(const std::vector<TaskInstance>& instances) {
  uint64_t h = fnv1a64(std::to_string(instances.size()));
  for (const TaskInstance& inst : instances) {
    h = fnv1a64(inst.tokens, h);
    h = fnv1a64(inst.cf_tokens, h);
    h = fnv1a64(std::vector<int>{inst.answer, inst.cf_answer}, h);
  }
  return h;
}

namespace evaldetail {

// Mean of m over the dataset with every non-member edge of `circuit` patched
// from the ablation source. Instances are visited in order and summed left to
// right, so results are bit-reproducible.
inline double mean_metric_with_complement_patched(const Model& model, const Circuit& circuit,
                                                  const std::vector<TaskInstance>& instances,
                                                  const AblationSpec& ablation) {
  require(!instances.empty(), "circuit evaluation: empty dataset");
  double sum = 0.0;
  for (const TaskInstance& inst : instances) {
    AblationMessages messages = ablation.messages_for(model, inst);
    PatchPlan plan = plan_patch_complement(circuit, messages);
    sum += metric_m(model, inst, &plan);
  }
  return sum / static_cast<double>(instances.size());
}

inline double mean_metric_plain(const Model& model, const std::vector<TaskInstance>& instances) {
  require(!instances.empty(), "circuit evaluation: empty dataset");
  double sum = 0.0;
  for (const TaskInstance& inst : instances) sum += metric_m(model, inst);
  return sum / static_cast<double>(instances.size());
}

}  // namespace evaldetail

// ===== faithfulness =========================================================

// f = (m(C) - m(empty)) / (m(full) - m(empty)).
inline double faithfulness(const Model& model, const Circuit& circuit,
                           const std::vector<TaskInstance>& instances,
                           const AblationSpec& ablation = AblationSpec::counterfactual()) {
  circuit.validate();
  require(circuit.graph->num_edges() == model.graph->num_edges(),
          "faithfulness: circuit graph does not match the model graph");
  double m_full = evaldetail::mean_metric_plain(model, instances);
  double m_empty = evaldetail::mean_metric_with_complement_patched(
      model, Circuit::empty(circuit.graph), instances, ablation);
  double denom = m_full - m_empty;
  if (std::fabs(denom) <= 1e-9) {
    throw NumericError("faithfulness: degenerate task, |m(full) - m(empty)| = " +
                       str(std::fabs(denom)) + " <= 1e-9");
  }
  double m_c = evaldetail::mean_metric_with_complement_patched(model, circuit, instances,
                                                               ablation);
  return (m_c - m_empty) / denom;
}

// ===== faithfulness curves ==================================================

struct FaithfulnessCurve {
  std::vector<double> ks;  // strictly increasing thresholds
  std::vector<double> f;   // faithfulness per threshold
  AblationKind ablation = AblationKind::counterfactual;
  uint64_t dataset_hash = 0;
  double m_full = 0.0;
  double m_empty = 0.0;

  void validate() const {
    require(!ks.empty() && ks.size() == f.size(), "FaithfulnessCurve: ragged or empty");
    for (size_t i = 0; i + 1 < ks.size(); ++i) {
      require(ks[i] < ks[i + 1], "FaithfulnessCurve: thresholds not strictly increasing");
    }
    for (double v : f) {
      require(std::isfinite(v), "FaithfulnessCurve: non-finite faithfulness value");
    }
  }
};

inline FaithfulnessCurve faithfulness_curve(
    const Model& model, const CircuitSeries& series, const std::vector<TaskInstance>& instances,
    const AblationSpec& ablation = AblationSpec::counterfactual()) {
  validate_series(series);
  require(!instances.empty(), "faithfulness_curve: empty dataset");
  require(series.circuits[0].graph->num_edges() == model.graph->num_edges(),
          "faithfulness_curve: series graph does not match the model graph");

  FaithfulnessCurve curve;
  curve.ks = series.ks;
  curve.ablation = ablation.kind;
  curve.dataset_hash = dataset_fingerprint(instances);

  // Instance-outer evaluation shares each instance's ablation messages across
  // all thresholds; sums accumulate in fixed order for reproducibility.
  size_t n = series.size();
  std::vector<double> sum_k(n, 0.0);
  double sum_full = 0.0, sum_empty = 0.0;
  Circuit empty = Circuit::empty(series.circuits[0].graph);
  for (const TaskInstance& inst : instances) {
    sum_full += metric_m(model, inst);
    AblationMessages messages = ablation.messages_for(model, inst);
    PatchPlan empty_plan = plan_patch_complement(empty, messages);
    sum_empty += metric_m(model, inst, &empty_plan);
    for (size_t i = 0; i < n; ++i) {
      PatchPlan plan = plan_patch_complement(series.circuits[i], messages);
      sum_k[i] += metric_m(model, inst, &plan);
    }
  }
  double inv = 1.0 / static_cast<double>(instances.size());
  curve.m_full = sum_full * inv;
  curve.m_empty = sum_empty * inv;
  double denom = curve.m_full - curve.m_empty;
  if (std::fabs(denom) <= 1e-9) {
    throw NumericError("faithfulness_curve: degenerate task, |m(full) - m(empty)| = " +
                       str(std::fabs(denom)) + " <= 1e-9");
  }
  for (size_t i = 0; i < n; ++i) {
    curve.f.push_back((sum_k[i] * inv - curve.m_empty) / denom);
  }
  curve.validate();
  return curve;
}

// ===== area summaries =======================================================

// Trapezoidal weights over log10(k), normalized to sum 1. A single point gets
// weight 1.
inline std::vector<double> curve_weights(const std::vector<double>& ks) {
  require(!ks.empty(), "curve_weights: empty grid");
  size_t n = ks.size();
  for (size_t i = 0; i < n; ++i) {
    require(ks[i] > 0.0, "curve_weights: thresholds must be positive");
    if (i + 1 < n) require(ks[i] < ks[i + 1], "curve_weights: grid not strictly increasing");
  }
  if (n == 1) return {1.0};
  std::vector<double> x(n);
  for (size_t i = 0; i < n; ++i) x[i] = std::log10(ks[i]);
  std::vector<double> w(n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    double left = i == 0 ? 0.0 : (x[i] - x[i - 1]) / 2.0;
    double right = i + 1 == n ? 0.0 : (x[i + 1] - x[i]) / 2.0;
    w[i] = left + right;
  }
  double total = x[n - 1] - x[0];
  for (double& v : w) v /= total;
  return w;
}

inline double cpr(const FaithfulnessCurve& curve) {
  curve.validate();
  std::vector<double> w = curve_weights(curve.ks);
  double s = 0.0;
  for (size_t i = 0; i < w.size(); ++i) s += w[i] * curve.f[i];
  return s;
}

inline double cmd(const FaithfulnessCurve& curve) {
  curve.validate();
  std::vector<double> w = curve_weights(curve.ks);
  double s = 0.0;
  for (size_t i = 0; i < w.size(); ++i) s += w[i] * std::fabs(curve.f[i] - 1.0);
  return s;
}

// ===== ground-truth recovery ================================================

namespace evaldetail {

// Midrank (tie-aware) AUROC over (value, is_positive) pairs.
inline double midrank_auroc(std::vector<std::pair<double, int>> ranked) {
  int64_t pos = 0;
  for (const auto& [v, p] : ranked) pos += p;
  require(pos > 0, "auroc: no positive examples; AUROC undefined");
  require(pos < static_cast<int64_t>(ranked.size()),
          "auroc: no negative examples; AUROC undefined");
  std::sort(ranked.begin(), ranked.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < ranked.size()) {
    size_t j = i;
    while (j < ranked.size() && ranked[j].first == ranked[i].first) ++j;
    double midrank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (size_t t = i; t < j; ++t) {
      if (ranked[t].second) rank_sum_pos += midrank;
    }
    i = j;
  }
  double P = static_cast<double>(pos);
  double N = static_cast<double>(ranked.size()) - P;
  return (rank_sum_pos - P * (P + 1.0) / 2.0) / (P * N);
}

}  // namespace evaldetail

// Area under the ROC of |score| as a ranker of membership in the known
// circuit. Midranks handle ties, so interchangeable scores average to 1/2.
inline double ground_truth_auroc(const ScoreSet& scores, const Circuit& truth) {
  require(scores.graph != nullptr && truth.graph != nullptr, "ground_truth_auroc: unbound");
  require(scores.graph->num_edges() == truth.graph->num_edges(),
          "ground_truth_auroc: score set and truth circuit use different graphs");
  int E = scores.graph->num_edges();
  require(truth.count_edges() > 0, "ground_truth_auroc: truth circuit is empty; AUROC undefined");
  require(truth.count_edges() < E,
          "ground_truth_auroc: truth circuit is the full graph; AUROC undefined");
  std::vector<std::pair<double, int>> ranked;  // (|score|, is_member)
  ranked.reserve(static_cast<size_t>(E));
  for (int e = 0; e < E; ++e) {
    ranked.emplace_back(std::fabs(scores.edge_values[static_cast<size_t>(e)]),
                        truth.contains(e) ? 1 : 0);
  }
  return evaldetail::midrank_auroc(std::move(ranked));
}

// Node-granularity variant: |node score| as a ranker of membership in the
// truth circuit's node set (nodes with at least one outgoing member edge).
// Candidates are all writer nodes, i.e. every node with outgoing edges.
inline double ground_truth_auroc_nodes(const ScoreSet& scores, const Circuit& truth) {
  require(scores.graph != nullptr && truth.graph != nullptr, "ground_truth_auroc_nodes: unbound");
  require(scores.graph->num_edges() == truth.graph->num_edges(),
          "ground_truth_auroc_nodes: score set and truth circuit use different graphs");
  require(scores.granularity == Granularity::node,
          "ground_truth_auroc_nodes: score set is not node-granularity");
  std::vector<std::pair<double, int>> ranked;
  for (int u = 0; u < scores.graph->num_nodes(); ++u) {
    const std::vector<int>& out = scores.graph->outgoing(u);
    if (out.empty()) continue;
    bool member = false;
    for (int e : out) {
      if (truth.contains(e)) {
        member = true;
        break;
      }
    }
    auto it = scores.node_values.find(u);
    double v = it == scores.node_values.end() ? 0.0 : std::fabs(it->second);
    ranked.emplace_back(v, member ? 1 : 0);
  }
  return evaldetail::midrank_auroc(std::move(ranked));
}

// ===== curve serialization ==================================================

inline constexpr const char* kCurveFormatVersion = "circuitlab-curve-v1";

inline nlohmann::json curve_to_json(const FaithfulnessCurve& curve) {
  curve.validate();
  nlohmann::json j;
  j["format_version"] = kCurveFormatVersion;
  j["ablation"] = ablation_kind_name(curve.ablation);
  j["dataset_hash"] = curve.dataset_hash;
  j["m_full"] = curve.m_full;
  j["m_empty"] = curve.m_empty;
  j["k"] = curve.ks;
  j["f"] = curve.f;
  return j;
}

inline FaithfulnessCurve curve_from_json(const nlohmann::json& j) {
  require(j.value("format_version", "") == kCurveFormatVersion,
          "curve_from_json: unsupported or missing format_version (expected " +
              std::string(kCurveFormatVersion) + ")");
  FaithfulnessCurve curve;
  curve.ablation = ablation_kind_from(j.at("ablation").get<std::string>());
  curve.dataset_hash = j.at("dataset_hash").get<uint64_t>();
  curve.m_full = j.at("m_full").get<double>();
  curve.m_empty = j.at("m_empty").get<double>();
  curve.ks = j.at("k").get<std::vector<double>>();
  curve.f = j.at("f").get<std::vector<double>>();
  curve.validate();
  return curve;
}

}  // namespace circuitlab
