#pragma once
// Edge and node attribution: gradient-based scorers (one-step and
// integrated-gradient variants over inputs or activations), exact per-edge
// patching, bootstrap sign-stability filtering, score-set ensembling
// (parallel merging, warm-started learned-mask pruning, and their hybrid),
// and single-path effect isolation.
//
// Every scorer follows the same concurrency contract: per-instance work runs
// under parallel_for into an index-addressed buffer and the reduction over
// instances happens afterwards, sequentially, in index order — so results are
// independent of the worker count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "circuitlab/circuit_eval.hpp"
#include "circuitlab/common.hpp"
#include "circuitlab/graph.hpp"
#include "circuitlab/model.hpp"
#include "circuitlab/tasks.hpp"
#include "circuitlab/train.hpp"

namespace circuitlab {

namespace attrdetail {

// The evaluation metric as a differentiable scalar: final-position logit of
// the answer minus the final-position logit of the counterfactual answer.
inline Tensor metric_scalar(const Tensor& logits, const TaskInstance& inst, int vocab_size) {
  require(inst.answer >= 0 && inst.answer < vocab_size,
          "attribution: answer token " + std::to_string(inst.answer) +
              " outside vocabulary of " + std::to_string(vocab_size));
  require(inst.cf_answer >= 0 && inst.cf_answer < vocab_size,
          "attribution: counterfactual answer token " + std::to_string(inst.cf_answer) +
              " outside vocabulary of " + std::to_string(vocab_size));
  int T = logits.dim(0);
  Tensor row = reshape(slice(logits, 0, T - 1, 1), {vocab_size});
  return sub(slice(row, 0, inst.answer, 1), slice(row, 0, inst.cf_answer, 1));
}

// Everything one reverse pass yields for one instance: the metric value, the
// gradient of the metric w.r.t. each reader's assembled input and each
// writer's contribution, and the contribution values themselves.
struct InstanceGrads {
  double m = 0.0;
  std::vector<std::vector<double>> input_grads;    // per node; empty for the embedding
  std::vector<std::vector<double>> output_grads;   // per node; zeros when detached
  std::vector<std::vector<double>> contributions;  // per node; values
};

inline InstanceGrads metric_gradients(const Model& model, const TaskInstance& inst,
                                      const Tensor* embed_override, const GateSpec* gates,
                                      size_t instance_index) {
  const ComputationGraph& graph = *model.graph;
  Tape tape;
  TapeScope scope(tape);
  ForwardOptions opt;
  opt.keep_tensors = true;
  opt.grad_inputs = true;
  opt.embed_override = embed_override;
  opt.gates = gates;
  ForwardResult res = run_forward(model, inst.tokens, opt);
  Tensor m = metric_scalar(res.logits, inst, model.config.vocab_size);
  backward(tape, m);

  InstanceGrads out;
  out.m = m.at(0);
  int n = graph.num_nodes();
  out.input_grads.resize(static_cast<size_t>(n));
  out.output_grads.resize(static_cast<size_t>(n));
  out.contributions.resize(static_cast<size_t>(n));
  for (int v = 0; v < n; ++v) {
    const Tensor& xi = res.value_inputs[static_cast<size_t>(v)];
    if (xi.defined()) {
      out.input_grads[static_cast<size_t>(v)] =
          xi.has_grad() ? xi.grad() : std::vector<double>(static_cast<size_t>(xi.numel()), 0.0);
    }
    const Tensor& z = res.contributions[static_cast<size_t>(v)];
    if (z.defined()) {
      out.contributions[static_cast<size_t>(v)] = z.data();
      out.output_grads[static_cast<size_t>(v)] =
          z.has_grad() ? z.grad() : std::vector<double>(static_cast<size_t>(z.numel()), 0.0);
    }
  }
  auto scan = [&](const std::vector<std::vector<double>>& rows) {
    for (const auto& r : rows)
      for (double v : r)
        if (!std::isfinite(v)) {
          throw NumericError("attribution: non-finite gradient on instance " +
                             std::to_string(instance_index));
        }
  };
  if (!std::isfinite(out.m)) {
    throw NumericError("attribution: non-finite metric on instance " +
                       std::to_string(instance_index));
  }
  scan(out.input_grads);
  scan(out.output_grads);
  return out;
}

// (ablation - clean) . grad, summed in fixed coordinate order.
inline double delta_dot(const std::vector<double>& ablation, const std::vector<double>& clean,
                        const std::vector<double>& grad) {
  double s = 0.0;
  for (size_t k = 0; k < grad.size(); ++k) s += (ablation[k] - clean[k]) * grad[k];
  return s;
}

// The clean embedding values, computed exactly as the forward engine does.
inline Tensor clean_embedding(const Model& model, const TaskInstance& inst) {
  int T = static_cast<int>(inst.tokens.size());
  return add(embed_lookup(model.tok_emb, inst.tokens), slice(model.pos_emb, 0, 0, T));
}

// A parameter-frozen copy: reverse passes over it never write parameter
// gradients, so instance-parallel scoring shares it without races and the
// caller's model is left untouched.
inline Model frozen_copy(const Model& model) {
  Model scratch = model.clone();
  scratch.set_requires_grad(false);
  return scratch;
}

inline void stamp_provenance(ScoreSet& s, const std::string& method, const AblationSpec& ablation,
                             const std::vector<TaskInstance>& instances) {
  s.provenance["method"] = method;
  s.provenance["ablation"] = ablation_kind_name(ablation.kind);
  s.provenance["dataset"] = hex64(dataset_fingerprint(instances));
  s.provenance["instances"] = std::to_string(instances.size());
}

// Mean of per-instance edge scores, reduced in index order.
inline ScoreSet reduce_edge_means(GraphPtr graph, const std::vector<std::vector<double>>& per_instance) {
  ScoreSet out = ScoreSet::edges_of(std::move(graph));
  int E = out.graph->num_edges();
  double inv = 1.0 / static_cast<double>(per_instance.size());
  for (int e = 0; e < E; ++e) {
    double s = 0.0;
    for (const auto& row : per_instance) s += row[static_cast<size_t>(e)];
    out.set(e, s * inv);
  }
  return out;
}

}  // namespace attrdetail

// ===== one-step gradient attribution ========================================

// Linear estimate of each edge's patch effect: for edge u->v the score is
// the dataset mean of (ablation message of u - clean contribution of u)
// dotted with the gradient of the metric w.r.t. v's assembled input. The
// sign convention matches exact patching: negative means patching the edge
// hurts the metric.
inline ScoreSet eap_scores(const Model& model, const std::vector<TaskInstance>& instances,
                           const AblationSpec& ablation = AblationSpec::counterfactual(),
                           int jobs = 1) {
  require(!instances.empty(), "eap_scores: empty dataset");
  Model scratch = attrdetail::frozen_copy(model);
  const ComputationGraph& graph = *scratch.graph;
  int E = graph.num_edges();
  std::vector<std::vector<double>> per_instance(instances.size());
  parallel_for(instances.size(), jobs, [&](size_t i) {
    const TaskInstance& inst = instances[i];
    AblationMessages abl = ablation.messages_for(scratch, inst);
    attrdetail::InstanceGrads g = attrdetail::metric_gradients(scratch, inst, nullptr, nullptr, i);
    std::vector<double> s(static_cast<size_t>(E), 0.0);
    for (int e = 0; e < E; ++e) {
      const GraphEdge& ed = graph.edge(e);
      s[static_cast<size_t>(e)] =
          attrdetail::delta_dot(abl.by_node[static_cast<size_t>(ed.src)],
                                g.contributions[static_cast<size_t>(ed.src)],
                                g.input_grads[static_cast<size_t>(ed.dst)]);
    }
    per_instance[i] = std::move(s);
  });
  ScoreSet out = attrdetail::reduce_edge_means(model.graph, per_instance);
  attrdetail::stamp_provenance(out, "eap", ablation, instances);
  return out;
}

// ===== integrated gradients over inputs =====================================

// Same estimate as eap_scores but with the reader-input gradients averaged
// along the straight path from the clean embedding to the ablation's
// embedding message (left endpoints t = j/steps, j = 0..steps-1). steps == 1
// reproduces eap_scores bit for bit.
inline ScoreSet eap_ig_inputs_scores(const Model& model,
                                     const std::vector<TaskInstance>& instances, int steps = 32,
                                     const AblationSpec& ablation = AblationSpec::counterfactual(),
                                     int jobs = 1) {
  require(!instances.empty(), "eap_ig_inputs_scores: empty dataset");
  require(steps >= 1, "eap_ig_inputs_scores: steps must be >= 1, got " + std::to_string(steps));
  Model scratch = attrdetail::frozen_copy(model);
  const ComputationGraph& graph = *scratch.graph;
  int E = graph.num_edges();
  int n_nodes = graph.num_nodes();
  std::vector<std::vector<double>> per_instance(instances.size());
  parallel_for(instances.size(), jobs, [&](size_t i) {
    const TaskInstance& inst = instances[i];
    AblationMessages abl = ablation.messages_for(scratch, inst);
    // Clean endpoint: identical to the one-step scorer's pass.
    attrdetail::InstanceGrads g0 = attrdetail::metric_gradients(scratch, inst, nullptr, nullptr, i);
    const std::vector<double>& e_clean =
        g0.contributions[static_cast<size_t>(graph.embed_node())];
    const std::vector<double>& e_abl = abl.by_node[static_cast<size_t>(graph.embed_node())];
    int T = static_cast<int>(inst.tokens.size());

    std::vector<std::vector<double>> avg(static_cast<size_t>(n_nodes));
    double inv_steps = 1.0 / static_cast<double>(steps);
    auto accumulate = [&](const attrdetail::InstanceGrads& g) {
      for (int v = 0; v < n_nodes; ++v) {
        const std::vector<double>& iv = g.input_grads[static_cast<size_t>(v)];
        if (iv.empty()) continue;
        std::vector<double>& a = avg[static_cast<size_t>(v)];
        if (a.empty()) a.assign(iv.size(), 0.0);
        for (size_t k = 0; k < iv.size(); ++k) a[k] += iv[k] * inv_steps;
      }
    };
    accumulate(g0);
    for (int j = 1; j < steps; ++j) {
      double t = static_cast<double>(j) / static_cast<double>(steps);
      Tensor ej = Tensor::zeros({T, graph.d_model()});
      for (size_t k = 0; k < e_clean.size(); ++k) {
        ej.data()[k] = e_clean[k] + t * (e_abl[k] - e_clean[k]);
      }
      accumulate(attrdetail::metric_gradients(scratch, inst, &ej, nullptr, i));
    }

    std::vector<double> s(static_cast<size_t>(E), 0.0);
    for (int e = 0; e < E; ++e) {
      const GraphEdge& ed = graph.edge(e);
      s[static_cast<size_t>(e)] =
          attrdetail::delta_dot(abl.by_node[static_cast<size_t>(ed.src)],
                                g0.contributions[static_cast<size_t>(ed.src)],
                                avg[static_cast<size_t>(ed.dst)]);
    }
    per_instance[i] = std::move(s);
  });
  ScoreSet out = attrdetail::reduce_edge_means(model.graph, per_instance);
  attrdetail::stamp_provenance(out, "eap-ig-inputs", ablation, instances);
  out.provenance["steps"] = std::to_string(steps);
  return out;
}

// ===== integrated gradients over activations ================================

// Reader-input gradients averaged along the gate path that convexly mixes
// every edge's live message with its ablation message (gate 1 - j/steps on
// all edges simultaneously). steps == 1 reproduces eap_scores bit for bit.
inline ScoreSet eap_ig_acts_scores(const Model& model, const std::vector<TaskInstance>& instances,
                                   int steps = 32,
                                   const AblationSpec& ablation = AblationSpec::counterfactual(),
                                   int jobs = 1) {
  require(!instances.empty(), "eap_ig_acts_scores: empty dataset");
  require(steps >= 1, "eap_ig_acts_scores: steps must be >= 1, got " + std::to_string(steps));
  Model scratch = attrdetail::frozen_copy(model);
  const ComputationGraph& graph = *scratch.graph;
  int E = graph.num_edges();
  int n_nodes = graph.num_nodes();
  std::vector<std::vector<double>> per_instance(instances.size());
  parallel_for(instances.size(), jobs, [&](size_t i) {
    const TaskInstance& inst = instances[i];
    AblationMessages abl = ablation.messages_for(scratch, inst);
    attrdetail::InstanceGrads g0 = attrdetail::metric_gradients(scratch, inst, nullptr, nullptr, i);

    std::vector<std::vector<double>> avg(static_cast<size_t>(n_nodes));
    double inv_steps = 1.0 / static_cast<double>(steps);
    auto accumulate = [&](const attrdetail::InstanceGrads& g) {
      for (int v = 0; v < n_nodes; ++v) {
        const std::vector<double>& iv = g.input_grads[static_cast<size_t>(v)];
        if (iv.empty()) continue;
        std::vector<double>& a = avg[static_cast<size_t>(v)];
        if (a.empty()) a.assign(iv.size(), 0.0);
        for (size_t k = 0; k < iv.size(); ++k) a[k] += iv[k] * inv_steps;
      }
    };
    accumulate(g0);
    for (int j = 1; j < steps; ++j) {
      double gate = 1.0 - static_cast<double>(j) / static_cast<double>(steps);
      GateSpec gs;
      gs.edge_gates.reserve(static_cast<size_t>(E));
      for (int e = 0; e < E; ++e) gs.edge_gates.push_back(Tensor::scalar(gate));
      gs.ablation = &abl;
      accumulate(attrdetail::metric_gradients(scratch, inst, nullptr, &gs, i));
    }

    std::vector<double> s(static_cast<size_t>(E), 0.0);
    for (int e = 0; e < E; ++e) {
      const GraphEdge& ed = graph.edge(e);
      s[static_cast<size_t>(e)] =
          attrdetail::delta_dot(abl.by_node[static_cast<size_t>(ed.src)],
                                g0.contributions[static_cast<size_t>(ed.src)],
                                avg[static_cast<size_t>(ed.dst)]);
    }
    per_instance[i] = std::move(s);
  });
  ScoreSet out = attrdetail::reduce_edge_means(model.graph, per_instance);
  attrdetail::stamp_provenance(out, "eap-ig-activations", ablation, instances);
  out.provenance["steps"] = std::to_string(steps);
  return out;
}

// ===== exact per-edge patching ==============================================

// Ground-truth single-edge effects: for each edge, actually run the model
// with that one edge's message replaced and record the metric change,
// averaged over the dataset. Cost is one forward per edge per instance, so a
// budget guards against accidental blow-ups; sub-sample the dataset to stay
// under it.
inline ScoreSet exact_edge_patch_scores(const Model& model,
                                        const std::vector<TaskInstance>& instances,
                                        const AblationSpec& ablation = AblationSpec::counterfactual(),
                                        int64_t budget = 100000, int jobs = 1) {
  require(!instances.empty(), "exact_edge_patch_scores: empty dataset");
  Model scratch = attrdetail::frozen_copy(model);
  const ComputationGraph& graph = *scratch.graph;
  int E = graph.num_edges();
  int64_t cost = static_cast<int64_t>(E) * static_cast<int64_t>(instances.size());
  require(cost <= budget,
          "exact_edge_patch_scores: " + std::to_string(E) + " edges x " +
              std::to_string(instances.size()) + " instances = " + std::to_string(cost) +
              " forwards exceeds the budget of " + std::to_string(budget) +
              "; sub-sample the dataset or raise the budget");
  std::vector<std::vector<double>> per_instance(instances.size());
  parallel_for(instances.size(), jobs, [&](size_t i) {
    const TaskInstance& inst = instances[i];
    AblationMessages abl = ablation.messages_for(scratch, inst);
    double m_clean = metric_m(scratch, inst);
    std::vector<double> s(static_cast<size_t>(E), 0.0);
    for (int e = 0; e < E; ++e) {
      PatchPlan plan = plan_patch_edges(graph, {e}, abl);
      s[static_cast<size_t>(e)] = metric_m(scratch, inst, &plan) - m_clean;
    }
    per_instance[i] = std::move(s);
  });
  ScoreSet out = attrdetail::reduce_edge_means(model.graph, per_instance);
  attrdetail::stamp_provenance(out, "exact-edge-patch", ablation, instances);
  return out;
}

// ===== node attribution =====================================================

// Per-writer linear estimate of replacing the node's entire contribution:
// (ablation message - clean contribution) . d(metric)/d(contribution),
// averaged over the dataset. ig_steps > 1 averages the contribution
// gradients along the embedding-interpolation path (the inputs variant);
// ig_steps == 1 is the plain one-step estimate. Scores land on nodes and are
// broadcast onto each node's outgoing edges.
inline ScoreSet node_attribution_scores(const Model& model,
                                        const std::vector<TaskInstance>& instances,
                                        const AblationSpec& ablation = AblationSpec::counterfactual(),
                                        int ig_steps = 1, int jobs = 1) {
  require(!instances.empty(), "node_attribution_scores: empty dataset");
  require(ig_steps >= 1,
          "node_attribution_scores: ig_steps must be >= 1, got " + std::to_string(ig_steps));
  Model scratch = attrdetail::frozen_copy(model);
  const ComputationGraph& graph = *scratch.graph;
  int n_nodes = graph.num_nodes();
  std::vector<std::vector<double>> per_instance(instances.size());
  parallel_for(instances.size(), jobs, [&](size_t i) {
    const TaskInstance& inst = instances[i];
    AblationMessages abl = ablation.messages_for(scratch, inst);
    attrdetail::InstanceGrads g0 = attrdetail::metric_gradients(scratch, inst, nullptr, nullptr, i);
    const std::vector<double>& e_clean =
        g0.contributions[static_cast<size_t>(graph.embed_node())];
    const std::vector<double>& e_abl = abl.by_node[static_cast<size_t>(graph.embed_node())];
    int T = static_cast<int>(inst.tokens.size());

    std::vector<std::vector<double>> avg(static_cast<size_t>(n_nodes));
    double inv_steps = 1.0 / static_cast<double>(ig_steps);
    auto accumulate = [&](const attrdetail::InstanceGrads& g) {
      for (int v = 0; v < n_nodes; ++v) {
        const std::vector<double>& ov = g.output_grads[static_cast<size_t>(v)];
        if (ov.empty()) continue;
        std::vector<double>& a = avg[static_cast<size_t>(v)];
        if (a.empty()) a.assign(ov.size(), 0.0);
        for (size_t k = 0; k < ov.size(); ++k) a[k] += ov[k] * inv_steps;
      }
    };
    accumulate(g0);
    for (int j = 1; j < ig_steps; ++j) {
      double t = static_cast<double>(j) / static_cast<double>(ig_steps);
      Tensor ej = Tensor::zeros({T, graph.d_model()});
      for (size_t k = 0; k < e_clean.size(); ++k) {
        ej.data()[k] = e_clean[k] + t * (e_abl[k] - e_clean[k]);
      }
      accumulate(attrdetail::metric_gradients(scratch, inst, &ej, nullptr, i));
    }

    // Scores indexed by node; only writers (out-degree >= 1) are scored.
    std::vector<double> s(static_cast<size_t>(n_nodes), 0.0);
    for (int u = 0; u < n_nodes; ++u) {
      if (graph.outgoing(u).empty()) continue;
      s[static_cast<size_t>(u)] = attrdetail::delta_dot(abl.by_node[static_cast<size_t>(u)],
                                                        g0.contributions[static_cast<size_t>(u)],
                                                        avg[static_cast<size_t>(u)]);
    }
    per_instance[i] = std::move(s);
  });

  ScoreSet out = ScoreSet::edges_of(model.graph);
  std::map<int, double> node_scores;
  double inv = 1.0 / static_cast<double>(instances.size());
  for (int u = 0; u < n_nodes; ++u) {
    if (graph.outgoing(u).empty()) continue;
    double s = 0.0;
    for (const auto& row : per_instance) s += row[static_cast<size_t>(u)];
    node_scores[u] = s * inv;
  }
  out.set_node_scores(node_scores);
  attrdetail::stamp_provenance(out, "node-attribution", ablation, instances);
  out.provenance["steps"] = std::to_string(ig_steps);
  return out;
}

// ===== bootstrap sign-stability filtering ===================================

using ScoreFn = std::function<ScoreSet(const std::vector<TaskInstance>&)>;

// Re-scores bootstrap resamples of the dataset and keeps only the edges
// whose score sign is stable: an edge survives when
//   (max(#positive, #negative) + #zero) / resamples >= tau.
// Exact zeros count as consistent with either sign — an edge that is
// sometimes dead but never flips is not evidence of instability. Survivors
// keep their full-dataset score; filtered edges are zeroed (and stay
// present, so ensembles see identical coverage). Node-granularity inputs
// come back at edge granularity: the filter acts on the broadcast values.
inline ScoreSet bootstrap_filter(const ScoreFn& score_fn,
                                 const std::vector<TaskInstance>& instances, int resamples = 50,
                                 double tau = 0.95, uint64_t seed = 17) {
  require(!instances.empty(), "bootstrap_filter: empty dataset");
  require(resamples >= 2,
          "bootstrap_filter: needs at least 2 resamples, got " + std::to_string(resamples));
  require(tau > 0.5 && tau <= 1.0,
          "bootstrap_filter: tau must lie in (0.5, 1], got " + str(tau));
  ScoreSet full = score_fn(instances);
  require(full.graph != nullptr, "bootstrap_filter: scorer returned an unbound score set");
  int E = full.graph->num_edges();

  std::vector<int> c_pos(static_cast<size_t>(E), 0), c_neg(static_cast<size_t>(E), 0),
      c_zero(static_cast<size_t>(E), 0);
  Rng rng(seed);
  for (int r = 0; r < resamples; ++r) {
    std::vector<TaskInstance> sample;
    sample.reserve(instances.size());
    for (size_t i = 0; i < instances.size(); ++i) {
      sample.push_back(instances[static_cast<size_t>(rng.below(instances.size()))]);
    }
    ScoreSet s = score_fn(sample);
    require(s.graph != nullptr && s.graph->num_edges() == E,
            "bootstrap_filter: resample " + std::to_string(r) +
                " was scored against a different graph");
    for (int e = 0; e < E; ++e) {
      if (!full.edge_present[static_cast<size_t>(e)]) continue;
      double v = s.edge_values[static_cast<size_t>(e)];
      if (v > 0.0) {
        ++c_pos[static_cast<size_t>(e)];
      } else if (v < 0.0) {
        ++c_neg[static_cast<size_t>(e)];
      } else {
        ++c_zero[static_cast<size_t>(e)];
      }
    }
  }

  ScoreSet out = ScoreSet::edges_of(full.graph);
  out.provenance = full.provenance;
  int filtered = 0;
  std::string filtered_names;
  for (int e = 0; e < E; ++e) {
    if (!full.edge_present[static_cast<size_t>(e)]) continue;
    double freq = (static_cast<double>(std::max(c_pos[static_cast<size_t>(e)],
                                                c_neg[static_cast<size_t>(e)])) +
                   static_cast<double>(c_zero[static_cast<size_t>(e)])) /
                  static_cast<double>(resamples);
    if (freq >= tau) {
      out.set(e, full.edge_values[static_cast<size_t>(e)]);
    } else {
      out.set(e, 0.0);
      ++filtered;
      if (!filtered_names.empty()) filtered_names += " ";
      filtered_names += full.graph->edge_name(e);
    }
  }
  out.provenance["bootstrap_resamples"] = std::to_string(resamples);
  out.provenance["bootstrap_tau"] = str(tau);
  out.provenance["bootstrap_seed"] = hex64(seed);
  out.provenance["bootstrap_filtered_count"] = std::to_string(filtered);
  out.provenance["bootstrap_filtered_edges"] = filtered_names;
  return out;
}

// ===== parallel ensembling ==================================================

enum class MergeRule { mean, weighted, max, min };

inline const char* merge_rule_name(MergeRule r) {
  switch (r) {
    case MergeRule::mean: return "mean";
    case MergeRule::weighted: return "weighted";
    case MergeRule::max: return "max";
    case MergeRule::min: return "min";
  }
  return "?";
}

// Merges score sets produced by different methods on the same graph. Each
// set is first normalized by its own maximum absolute present score (so
// methods with different natural scales contribute comparably; an all-zero
// set is left unchanged), then combined per edge: mean or weighted mean of
// the normalized scores, or the normalized score of largest/smallest
// magnitude with its sign preserved (ties resolve to the earliest set).
inline ScoreSet ensemble_parallel(const std::vector<ScoreSet>& sets,
                                  MergeRule rule = MergeRule::mean,
                                  const std::vector<double>& weights = {}) {
  require(sets.size() >= 2, "ensemble_parallel: needs at least 2 score sets, got " +
                                std::to_string(sets.size()));
  const GraphPtr& graph = sets.front().graph;
  require(graph != nullptr, "ensemble_parallel: unbound score set");
  int E = graph->num_edges();
  for (size_t k = 1; k < sets.size(); ++k) {
    require(sets[k].graph != nullptr && sets[k].graph->num_edges() == E,
            "ensemble_parallel: score set " + std::to_string(k) + " uses a different graph");
    std::string mismatched;
    for (int e = 0; e < E; ++e) {
      if (sets[k].edge_present[static_cast<size_t>(e)] !=
          sets.front().edge_present[static_cast<size_t>(e)]) {
        if (!mismatched.empty()) mismatched += " ";
        mismatched += graph->edge_name(e);
      }
    }
    require(mismatched.empty(), "ensemble_parallel: score set " + std::to_string(k) +
                                    " covers different edges than set 0: " + mismatched);
  }
  if (rule == MergeRule::weighted) {
    require(weights.size() == sets.size(),
            "ensemble_parallel: " + std::to_string(weights.size()) + " weights for " +
                std::to_string(sets.size()) + " score sets");
    for (double w : weights) {
      require(std::isfinite(w) && w > 0.0,
              "ensemble_parallel: weights must be finite and positive");
    }
  } else {
    require(weights.empty(), "ensemble_parallel: weights are only valid with the weighted rule");
  }

  // Per-set normalization by the maximum absolute present score.
  std::vector<std::vector<double>> norm(sets.size());
  for (size_t k = 0; k < sets.size(); ++k) {
    double max_abs = 0.0;
    for (int e = 0; e < E; ++e) {
      if (!sets[k].edge_present[static_cast<size_t>(e)]) continue;
      max_abs = std::max(max_abs, std::fabs(sets[k].edge_values[static_cast<size_t>(e)]));
    }
    norm[k] = sets[k].edge_values;
    if (max_abs > 0.0) {
      for (double& v : norm[k]) v /= max_abs;
    }
  }

  ScoreSet out = ScoreSet::edges_of(graph);
  double weight_total = 0.0;
  for (double w : weights) weight_total += w;
  for (int e = 0; e < E; ++e) {
    if (!sets.front().edge_present[static_cast<size_t>(e)]) continue;
    double v = 0.0;
    switch (rule) {
      case MergeRule::mean: {
        for (size_t k = 0; k < sets.size(); ++k) v += norm[k][static_cast<size_t>(e)];
        v /= static_cast<double>(sets.size());
        break;
      }
      case MergeRule::weighted: {
        for (size_t k = 0; k < sets.size(); ++k) {
          v += weights[k] * norm[k][static_cast<size_t>(e)];
        }
        v /= weight_total;
        break;
      }
      case MergeRule::max: {
        v = norm[0][static_cast<size_t>(e)];
        for (size_t k = 1; k < sets.size(); ++k) {
          if (std::fabs(norm[k][static_cast<size_t>(e)]) > std::fabs(v)) {
            v = norm[k][static_cast<size_t>(e)];
          }
        }
        break;
      }
      case MergeRule::min: {
        v = norm[0][static_cast<size_t>(e)];
        for (size_t k = 1; k < sets.size(); ++k) {
          if (std::fabs(norm[k][static_cast<size_t>(e)]) < std::fabs(v)) {
            v = norm[k][static_cast<size_t>(e)];
          }
        }
        break;
      }
    }
    out.set(e, v);
  }
  out.provenance["method"] = "ensemble-parallel";
  out.provenance["merge"] = merge_rule_name(rule);
  std::string components;
  for (size_t k = 0; k < sets.size(); ++k) {
    if (k) components += " ";
    auto it = sets[k].provenance.find("method");
    components += it == sets[k].provenance.end() ? std::string("?") : it->second;
  }
  out.provenance["components"] = components;
  return out;
}

// ===== sequential ensembling (learned-mask pruning) =========================

struct PruneConfig {
  int steps = 200;
  AdamSettings adam{0.05, 0.9, 0.999, 1e-8};
  // Penalty on the mean gate value: with target_fraction < 0 the penalty is
  // sparsity_weight * mean(gate) (pure shrinkage); with target_fraction in
  // [0, 1] it is sparsity_weight * (mean(gate) - target_fraction)^2.
  double sparsity_weight = 1e-2;
  double target_fraction = -1.0;
  // Warm-start range: scores are mapped by magnitude onto [warm_low,
  // warm_high] as initial gate logits. A constant-magnitude (e.g. all-zero)
  // initializer lands every logit on the midpoint.
  double warm_low = -2.0;
  double warm_high = 2.0;
  std::function<void(int, double)> on_step;  // (step index, loss before the update)
};

// Refines a prior score set into per-edge gates in (0, 1) by gradient
// descent: each edge's message is convexly mixed with its ablation message
// through a sigmoid gate, and the gates are trained to keep the gated
// model's final-position distribution close to the full model's (soft
// cross-entropy) while a sparsity penalty pushes gates shut. The prior
// enters as a warm start: larger-magnitude scores open their gates further
// at initialization. Returns the trained gate values as scores.
inline ScoreSet ensemble_sequential(const ScoreSet& init, const Model& model,
                                    const std::vector<TaskInstance>& instances,
                                    const PruneConfig& cfg = {},
                                    const AblationSpec& ablation = AblationSpec::counterfactual()) {
  require(!instances.empty(), "ensemble_sequential: empty dataset");
  require(cfg.steps >= 1,
          "ensemble_sequential: steps must be >= 1, got " + std::to_string(cfg.steps));
  require(cfg.warm_low <= cfg.warm_high, "ensemble_sequential: warm_low exceeds warm_high");
  require(init.graph != nullptr && model.graph != nullptr &&
              init.graph->num_edges() == model.graph->num_edges(),
          "ensemble_sequential: initializer and model use different graphs");
  const ComputationGraph& graph = *model.graph;
  int E = graph.num_edges();
  for (int e = 0; e < E; ++e) {
    require(init.edge_present[static_cast<size_t>(e)],
            "ensemble_sequential: warm start requires a score for every edge; " +
                graph.edge_name(e) + " is unscored");
  }
  Model scratch = attrdetail::frozen_copy(model);
  int vocab = scratch.config.vocab_size;

  // Warm start: map score magnitudes affinely onto [warm_low, warm_high].
  double lo = std::fabs(init.edge_values[0]), hi = lo;
  for (int e = 1; e < E; ++e) {
    double a = std::fabs(init.edge_values[static_cast<size_t>(e)]);
    lo = std::min(lo, a);
    hi = std::max(hi, a);
  }
  std::vector<Tensor> log_alpha;
  log_alpha.reserve(static_cast<size_t>(E));
  for (int e = 0; e < E; ++e) {
    double x;
    if (hi == lo) {
      x = 0.5 * (cfg.warm_low + cfg.warm_high);
    } else {
      double a = std::fabs(init.edge_values[static_cast<size_t>(e)]);
      x = cfg.warm_low + (a - lo) / (hi - lo) * (cfg.warm_high - cfg.warm_low);
    }
    log_alpha.push_back(Tensor::scalar(x));
    log_alpha.back().set_requires_grad(true);
  }
  std::vector<Tensor*> params;
  params.reserve(static_cast<size_t>(E));
  for (Tensor& t : log_alpha) params.push_back(&t);
  Adam opt(params, cfg.adam);

  // Per-instance ablation messages and full-model target distributions,
  // computed once up front.
  std::vector<AblationMessages> abl(instances.size());
  std::vector<std::vector<double>> targets(instances.size());
  for (size_t i = 0; i < instances.size(); ++i) {
    try {
      abl[i] = ablation.messages_for(scratch, instances[i]);
      Tensor logits = forward_logits(scratch, instances[i].tokens);
      Tensor dist = softmax(reshape(slice(logits, 0, logits.dim(0) - 1, 1), {vocab}));
      targets[i] = dist.data();
    } catch (const NumericError& err) {
      throw NumericError("ensemble_sequential: diverged at step 1 (preparing targets on instance " +
                         std::to_string(i) + ": " + err.what() + ")");
    }
  }

  double inv_n = 1.0 / static_cast<double>(instances.size());
  for (int step = 0; step < cfg.steps; ++step) {
    try {
      Tape tape;
      TapeScope scope(tape);
      std::vector<Tensor> gates;
      gates.reserve(static_cast<size_t>(E));
      for (Tensor& la : log_alpha) gates.push_back(sigmoid(la));
      Tensor loss;
      for (size_t i = 0; i < instances.size(); ++i) {
        GateSpec gs;
        gs.edge_gates = gates;
        gs.ablation = &abl[i];
        ForwardOptions fopt;
        fopt.gates = &gs;
        Tensor logits = run_forward(scratch, instances[i].tokens, fopt).logits;
        Tensor row = reshape(slice(logits, 0, logits.dim(0) - 1, 1), {vocab});
        Tensor ce = cross_entropy_with_logits(row, Tensor::from({vocab}, targets[i]));
        loss = loss.defined() ? add(loss, ce) : ce;
      }
      loss = scale(loss, inv_n);
      Tensor mean_gate = mean_all(concat(gates, 0));
      if (cfg.target_fraction < 0.0) {
        loss = add(loss, scale(mean_gate, cfg.sparsity_weight));
      } else {
        Tensor d = sub(mean_gate, Tensor::scalar(cfg.target_fraction));
        loss = add(loss, scale(mul(d, d), cfg.sparsity_weight));
      }
      opt.zero_grad();
      backward(tape, loss);
      opt.step();
      if (cfg.on_step) cfg.on_step(step, loss.at(0));
    } catch (const NumericError& err) {
      throw NumericError("ensemble_sequential: diverged at step " + std::to_string(step + 1) +
                         " (" + err.what() + ")");
    }
  }

  ScoreSet out = ScoreSet::edges_of(model.graph);
  for (int e = 0; e < E; ++e) {
    double x = log_alpha[static_cast<size_t>(e)].at(0);
    out.set(e, 0.5 * std::tanh(0.5 * x) + 0.5);  // the engine's sigmoid, elementwise
  }
  attrdetail::stamp_provenance(out, "ensemble-sequential", ablation, instances);
  out.provenance["steps"] = std::to_string(cfg.steps);
  out.provenance["sparsity_weight"] = str(cfg.sparsity_weight);
  out.provenance["target_fraction"] = str(cfg.target_fraction);
  return out;
}

// ===== hybrid ensembling ====================================================

struct HybridConfig {
  int ig_steps = 32;
  bool include_sequential = true;
  PruneConfig prune{};
};

// Mean-merges the three gradient scorers (one-step, integrated over inputs,
// integrated over activations) and, unless disabled, a learned-mask pruning
// run warm-started from the inputs-integrated scores. With
// include_sequential = false the result is exactly the parallel mean of the
// three gradient scorers.
inline ScoreSet ensemble_hybrid(const Model& model, const std::vector<TaskInstance>& instances,
                                const HybridConfig& cfg = {},
                                const AblationSpec& ablation = AblationSpec::counterfactual(),
                                int jobs = 1) {
  std::vector<ScoreSet> parts;
  parts.push_back(eap_scores(model, instances, ablation, jobs));
  parts.push_back(eap_ig_inputs_scores(model, instances, cfg.ig_steps, ablation, jobs));
  parts.push_back(eap_ig_acts_scores(model, instances, cfg.ig_steps, ablation, jobs));
  if (cfg.include_sequential) {
    parts.push_back(ensemble_sequential(parts[1], model, instances, cfg.prune, ablation));
  }
  ScoreSet out = ensemble_parallel(parts, MergeRule::mean);
  attrdetail::stamp_provenance(out, "ensemble-hybrid", ablation, instances);
  out.provenance["ig_steps"] = std::to_string(cfg.ig_steps);
  out.provenance["sequential"] = cfg.include_sequential ? "yes" : "no";
  return out;
}

// ===== path effect isolation ================================================

enum class PathMode { ablate, counterfactual };

// Measures the metric effect carried by ONE complete embedding-to-logits
// path. The embedding end of the path is perturbed (zeroed for ablate, the
// counterfactual run's embedding for counterfactual); the induced
// contribution change is then propagated one edge at a time — each hop
// patches only that edge with the writer's clean contribution plus the
// accumulated delta, reads the resulting change in the reader's
// contribution, and carries it to the next hop. Returns the metric change
// m(final hop patched) - m(clean). Effects of edge-disjoint paths add
// exactly in linear models and approximately otherwise.
inline double isolate_path_effect(const Model& model, const TaskInstance& inst,
                                  const std::vector<int>& path, PathMode mode) {
  const ComputationGraph& graph = *model.graph;
  require(!path.empty(), "isolate_path_effect: empty path");
  for (int e : path) {
    require(e >= 0 && e < graph.num_edges(),
            "isolate_path_effect: edge index " + std::to_string(e) + " outside 0.." +
                std::to_string(graph.num_edges() - 1));
  }
  require(graph.edge(path.front()).src == graph.embed_node(),
          "isolate_path_effect: path must start at the embedding, got edge " +
              graph.edge_name(path.front()));
  require(graph.edge(path.back()).dst == graph.logits_node(),
          "isolate_path_effect: path must end at the logits, got edge " +
              graph.edge_name(path.back()));
  for (size_t i = 0; i + 1 < path.size(); ++i) {
    require(graph.edge(path[i]).dst == graph.edge(path[i + 1]).src,
            "isolate_path_effect: disconnected path: " + graph.edge_name(path[i]) +
                " is followed by " + graph.edge_name(path[i + 1]));
  }

  ActivationCache clean = forward_cache(model, inst.tokens);
  double m_clean = metric_m(model, inst);
  int T = clean.seq_len;
  int D = clean.d_model;
  size_t extent = static_cast<size_t>(T) * static_cast<size_t>(D);

  std::vector<double> replacement;
  if (mode == PathMode::counterfactual) {
    replacement = forward_cache(model, inst.cf_tokens)
                      .contributions[static_cast<size_t>(graph.embed_node())];
  } else {
    replacement.assign(extent, 0.0);
  }
  std::vector<double> delta(extent);
  const std::vector<double>& emb = clean.contributions[static_cast<size_t>(graph.embed_node())];
  for (size_t k = 0; k < extent; ++k) delta[k] = replacement[k] - emb[k];

  for (size_t i = 0; i < path.size(); ++i) {
    int e = path[i];
    int u = graph.edge(e).src;
    int v = graph.edge(e).dst;
    const std::vector<double>& z_u = clean.contributions[static_cast<size_t>(u)];
    PatchPlan plan;
    for (int pos = 0; pos < T; ++pos) {
      std::vector<double> row(static_cast<size_t>(D));
      for (int k = 0; k < D; ++k) {
        size_t idx = static_cast<size_t>(pos) * static_cast<size_t>(D) + static_cast<size_t>(k);
        row[static_cast<size_t>(k)] = z_u[idx] + delta[idx];
      }
      plan.add(e, pos, std::move(row));
    }
    if (i + 1 == path.size()) {
      return metric_m(model, inst, &plan) - m_clean;
    }
    ForwardOptions opt;
    opt.patches = &plan;
    opt.with_cache = true;
    ActivationCache patched = run_forward(model, inst.tokens, opt).cache;
    const std::vector<double>& z_new = patched.contributions[static_cast<size_t>(v)];
    const std::vector<double>& z_old = clean.contributions[static_cast<size_t>(v)];
    for (size_t k = 0; k < extent; ++k) delta[k] = z_new[k] - z_old[k];
  }
  throw ValidationError("isolate_path_effect: unreachable");
}

}  // namespace circuitlab
