// Attribution scorers: one-step and integrated-gradient edge estimates,
// exact per-edge patching, node attribution, bootstrap sign filtering,
// ensembling (parallel, sequential learned-mask, hybrid), and path-effect
// isolation. Exactness claims (bit-identical reductions, exact zeros on dead
// structure) are asserted with EXPECT_EQ on doubles.

#include "circuitlab/attribution.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "circuitlab/ground_truth.hpp"

namespace cl = circuitlab;

namespace {

const cl::GroundTruthModel& copy_fixture() {
  static cl::GroundTruthModel gt =
      cl::build_ground_truth_model(cl::GroundTruthKind::copy_head, 32, 7);
  return gt;
}

const cl::GroundTruthModel& xor_fixture() {
  static cl::GroundTruthModel gt =
      cl::build_ground_truth_model(cl::GroundTruthKind::xor_pair, 32, 11);
  return gt;
}

std::vector<cl::TaskInstance> take(const std::vector<cl::TaskInstance>& all, size_t n) {
  return std::vector<cl::TaskInstance>(all.begin(), all.begin() + static_cast<ptrdiff_t>(n));
}

// A fully linear model: identity norms and activation, constant uniform
// attention. Every message-to-metric map is affine, so one-step gradient
// estimates equal exact patch effects.
const cl::Model& linear_model() {
  static cl::Model m = [] {
    cl::ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 12;
    cfg.d_head = 6;
    cfg.d_mlp = 10;
    cfg.vocab_size = 9;
    cfg.max_seq_len = 6;
    cfg.identity_norm = true;
    cfg.identity_gelu = true;
    cfg.fixed_uniform_attention = true;
    cfg.init_seed = 505;
    return cl::Model::init(cfg);
  }();
  return m;
}

std::vector<cl::TaskInstance> linear_instances(size_t n) {
  cl::Rng rng(909);
  std::vector<cl::TaskInstance> out;
  for (size_t i = 0; i < n; ++i) {
    cl::TaskInstance inst;
    for (int p = 0; p < 4; ++p) inst.tokens.push_back(static_cast<int>(rng.below(9)));
    for (int p = 0; p < 4; ++p) inst.cf_tokens.push_back(static_cast<int>(rng.below(9)));
    inst.answer = static_cast<int>(rng.below(9));
    inst.cf_answer = static_cast<int>(rng.below(8));
    if (inst.cf_answer >= inst.answer) ++inst.cf_answer;
    out.push_back(std::move(inst));
  }
  return out;
}

// An instance whose counterfactual equals its prompt: every ablation delta
// is exactly zero, so every scorer must return exact zeros.
cl::TaskInstance null_delta_instance() {
  cl::TaskInstance inst;
  inst.tokens = {1, 5, 3};
  inst.cf_tokens = {1, 5, 3};
  inst.answer = 1;
  inst.cf_answer = 2;
  return inst;
}

double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::fabs(x));
  return m;
}

// All embedding-to-logits paths (as edge-index sequences), DFS order.
void enumerate_paths(const cl::ComputationGraph& g, int node, std::vector<int>& prefix,
                     std::vector<std::vector<int>>& out) {
  if (node == g.logits_node()) {
    out.push_back(prefix);
    return;
  }
  for (int e : g.outgoing(node)) {
    prefix.push_back(e);
    enumerate_paths(g, g.edge(e).dst, prefix, out);
    prefix.pop_back();
  }
}

}  // namespace

// ===== one-step gradient attribution ========================================

TEST(Eap, LinearModelMatchesExactPatchingEverywhere) {
  const cl::Model& m = linear_model();
  std::vector<cl::TaskInstance> data = linear_instances(6);
  cl::ScoreSet eap = cl::eap_scores(m, data);
  cl::ScoreSet exact = cl::exact_edge_patch_scores(m, data);
  for (int e = 0; e < m.graph->num_edges(); ++e) {
    double tol = 1e-6 * std::max(1.0, std::fabs(exact.edge_values[static_cast<size_t>(e)]));
    EXPECT_NEAR(eap.edge_values[static_cast<size_t>(e)],
                exact.edge_values[static_cast<size_t>(e)], tol)
        << m.graph->edge_name(e);
  }
}

TEST(Eap, ZeroCounterfactualDeltaScoresExactlyZero) {
  const cl::GroundTruthModel& gt = copy_fixture();
  std::vector<cl::TaskInstance> data{null_delta_instance()};
  cl::ScoreSet s = cl::eap_scores(gt.model, data);
  for (double v : s.edge_values) EXPECT_EQ(v, 0.0);
}

TEST(Eap, RecoversTheCopyCircuitExactly) {
  const cl::GroundTruthModel& gt = copy_fixture();
  cl::ScoreSet s = cl::eap_scores(gt.model, take(gt.dataset.train, 16));
  EXPECT_EQ(cl::ground_truth_auroc(s, gt.known_circuit), 1.0);
  // Off-circuit edges are exactly zero: dead heads contribute nothing and the
  // direct embedding path is untouched at the final position.
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    if (!gt.known_circuit.contains(e)) {
      EXPECT_EQ(s.edge_values[static_cast<size_t>(e)], 0.0) << gt.model.graph->edge_name(e);
    } else {
      EXPECT_GT(std::fabs(s.edge_values[static_cast<size_t>(e)]), 1.0)
          << gt.model.graph->edge_name(e);
    }
  }
}

TEST(Eap, RecoversTheXorCircuitExactly) {
  const cl::GroundTruthModel& gt = xor_fixture();
  cl::ScoreSet s = cl::eap_scores(gt.model, take(gt.dataset.train, 16));
  EXPECT_EQ(cl::ground_truth_auroc(s, gt.known_circuit), 1.0);
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    if (!gt.known_circuit.contains(e)) {
      EXPECT_EQ(s.edge_values[static_cast<size_t>(e)], 0.0) << gt.model.graph->edge_name(e);
    }
  }
}

TEST(Eap, WorkerCountDoesNotChangeScores) {
  const cl::GroundTruthModel& gt = copy_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 10);
  cl::ScoreSet a = cl::eap_scores(gt.model, data, cl::AblationSpec::counterfactual(), 1);
  cl::ScoreSet b = cl::eap_scores(gt.model, data, cl::AblationSpec::counterfactual(), 4);
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    EXPECT_EQ(a.edge_values[static_cast<size_t>(e)], b.edge_values[static_cast<size_t>(e)]);
  }
}

TEST(Eap, RejectsEmptyDatasetsAndStampsProvenance) {
  const cl::GroundTruthModel& gt = copy_fixture();
  EXPECT_THROW(cl::eap_scores(gt.model, {}), cl::ValidationError);
  cl::ScoreSet s = cl::eap_scores(gt.model, take(gt.dataset.train, 2));
  EXPECT_EQ(s.provenance.at("method"), "eap");
  EXPECT_EQ(s.provenance.at("ablation"), "counterfactual");
  EXPECT_EQ(s.provenance.at("instances"), "2");
  EXPECT_FALSE(s.provenance.at("dataset").empty());
}

// ===== integrated gradients over inputs =====================================

TEST(IgInputs, OneStepReproducesTheOneStepScorerBitForBit) {
  const cl::GroundTruthModel& gt = copy_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 8);
  cl::ScoreSet eap = cl::eap_scores(gt.model, data);
  cl::ScoreSet ig = cl::eap_ig_inputs_scores(gt.model, data, 1);
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    EXPECT_EQ(eap.edge_values[static_cast<size_t>(e)], ig.edge_values[static_cast<size_t>(e)]);
  }
}

TEST(IgInputs, SelfConvergesAsStepsGrow) {
  const cl::GroundTruthModel& gt = xor_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 12);
  cl::ScoreSet coarse = cl::eap_ig_inputs_scores(gt.model, data, 64);
  cl::ScoreSet fine = cl::eap_ig_inputs_scores(gt.model, data, 128);
  double scale = max_abs(fine.edge_values);
  ASSERT_GT(scale, 0.0);
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    EXPECT_NEAR(coarse.edge_values[static_cast<size_t>(e)],
                fine.edge_values[static_cast<size_t>(e)], 1e-3 * scale)
        << gt.model.graph->edge_name(e);
  }
}

TEST(IgInputs, EmbeddingScoresSumToTheFullInputSwing) {
  const cl::GroundTruthModel& gt = xor_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 12);
  cl::ScoreSet s = cl::eap_ig_inputs_scores(gt.model, data, 256);
  double lhs = 0.0;
  int embed = gt.model.graph->embed_node();
  for (int e : gt.model.graph->outgoing(embed)) lhs += s.edge_values[static_cast<size_t>(e)];
  // Reference: mean metric swing from running with the counterfactual input.
  double rhs = 0.0;
  for (const cl::TaskInstance& inst : data) {
    cl::TaskInstance swapped = inst;
    swapped.tokens = inst.cf_tokens;
    rhs += cl::metric_m(gt.model, swapped) - cl::metric_m(gt.model, inst);
  }
  rhs /= static_cast<double>(data.size());
  EXPECT_NEAR(lhs, rhs, 0.01 * std::max(1.0, std::fabs(rhs)));
}

TEST(IgInputs, PerfectRecoveryAndStepValidation) {
  const cl::GroundTruthModel& gt = xor_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 12);
  cl::ScoreSet s = cl::eap_ig_inputs_scores(gt.model, data, 8);
  EXPECT_EQ(cl::ground_truth_auroc(s, gt.known_circuit), 1.0);
  EXPECT_THROW(cl::eap_ig_inputs_scores(gt.model, data, 0), cl::ValidationError);
}

// ===== integrated gradients over activations ================================

TEST(IgActs, OneStepReproducesTheOneStepScorerBitForBit) {
  const cl::GroundTruthModel& gt = copy_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 8);
  cl::ScoreSet eap = cl::eap_scores(gt.model, data);
  cl::ScoreSet ig = cl::eap_ig_acts_scores(gt.model, data, 1);
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    EXPECT_EQ(eap.edge_values[static_cast<size_t>(e)], ig.edge_values[static_cast<size_t>(e)]);
  }
}

TEST(IgActs, InterpolatedGatesActuallyChangeTheEstimates) {
  const cl::GroundTruthModel& gt = xor_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 8);
  cl::ScoreSet eap = cl::eap_scores(gt.model, data);
  cl::ScoreSet ig = cl::eap_ig_acts_scores(gt.model, data, 8);
  double diff = 0.0;
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    diff = std::max(diff, std::fabs(eap.edge_values[static_cast<size_t>(e)] -
                                    ig.edge_values[static_cast<size_t>(e)]));
  }
  EXPECT_GT(diff, 0.0);  // the nonlinear readout bends the gate path
}

TEST(IgActs, PerfectRecoveryOnTheNonlinearFixture) {
  const cl::GroundTruthModel& gt = xor_fixture();
  cl::ScoreSet s = cl::eap_ig_acts_scores(gt.model, take(gt.dataset.train, 12), 8);
  EXPECT_EQ(cl::ground_truth_auroc(s, gt.known_circuit), 1.0);
}

TEST(IgActs, WorkerCountDoesNotChangeScores) {
  const cl::GroundTruthModel& gt = xor_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 6);
  cl::ScoreSet a = cl::eap_ig_acts_scores(gt.model, data, 4, cl::AblationSpec::counterfactual(), 1);
  cl::ScoreSet b = cl::eap_ig_acts_scores(gt.model, data, 4, cl::AblationSpec::counterfactual(), 3);
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    EXPECT_EQ(a.edge_values[static_cast<size_t>(e)], b.edge_values[static_cast<size_t>(e)]);
  }
}

// ===== exact per-edge patching ==============================================

TEST(ExactPatch, SelfAblationScoresExactlyZero) {
  const cl::GroundTruthModel& gt = copy_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 1);
  // The mean over a single-instance reference split IS that instance's clean
  // activations, so every patch replaces a message with itself.
  cl::AblationSpec self = cl::AblationSpec::mean_over(gt.model, data);
  cl::ScoreSet s = cl::exact_edge_patch_scores(gt.model, data, self);
  for (double v : s.edge_values) EXPECT_EQ(v, 0.0);
}

TEST(ExactPatch, AgreesWithTheLinearEstimateOnTheCopyFixture) {
  const cl::GroundTruthModel& gt = copy_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 8);
  cl::ScoreSet eap = cl::eap_scores(gt.model, data);
  cl::ScoreSet exact = cl::exact_edge_patch_scores(gt.model, data);
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    double tol = 0.05 * std::max(1.0, std::fabs(exact.edge_values[static_cast<size_t>(e)]));
    EXPECT_NEAR(eap.edge_values[static_cast<size_t>(e)],
                exact.edge_values[static_cast<size_t>(e)], tol)
        << gt.model.graph->edge_name(e);
  }
}

TEST(ExactPatch, NonAdditiveInteractionsOnTheNonlinearFixture) {
  const cl::GroundTruthModel& gt = xor_fixture();
  const cl::ComputationGraph& g = *gt.model.graph;
  // A counterfactual that flips BOTH bits: each single-edge patch flips the
  // parity, both together restore it — the effects cannot add.
  cl::TaskInstance inst = cl::gtdetail::make_xor_instance(0, 0);
  inst.cf_tokens = cl::gtdetail::make_xor_instance(1, 1).tokens;
  cl::AblationMessages abl =
      cl::AblationSpec::counterfactual().messages_for(gt.model, inst);
  int e1 = g.edge_index_by_name("embed.0.0->head.0.0");
  int e2 = g.edge_index_by_name("embed.0.0->head.0.1");
  double m0 = cl::metric_m(gt.model, inst);
  cl::PatchPlan p1 = cl::plan_patch_edges(g, {e1}, abl);
  cl::PatchPlan p2 = cl::plan_patch_edges(g, {e2}, abl);
  cl::PatchPlan p12 = cl::plan_patch_edges(g, {e1, e2}, abl);
  double d1 = cl::metric_m(gt.model, inst, &p1) - m0;
  double d2 = cl::metric_m(gt.model, inst, &p2) - m0;
  double d12 = cl::metric_m(gt.model, inst, &p12) - m0;
  EXPECT_GT(std::fabs(d12 - (d1 + d2)), 1.0);
}

TEST(ExactPatch, BudgetGuardNamesTheCost) {
  const cl::GroundTruthModel& gt = copy_fixture();
  try {
    cl::exact_edge_patch_scores(gt.model, take(gt.dataset.train, 2),
                                cl::AblationSpec::counterfactual(), 5);
    FAIL() << "expected ValidationError";
  } catch (const cl::ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("budget"), std::string::npos);
  }
}

TEST(ExactPatch, PerfectRecoveryOnBothFixtures) {
  const cl::GroundTruthModel& copy = copy_fixture();
  cl::ScoreSet sc = cl::exact_edge_patch_scores(copy.model, take(copy.dataset.train, 8));
  EXPECT_EQ(cl::ground_truth_auroc(sc, copy.known_circuit), 1.0);
  const cl::GroundTruthModel& xg = xor_fixture();
  cl::ScoreSet sx = cl::exact_edge_patch_scores(xg.model, take(xg.dataset.train, 8));
  EXPECT_EQ(cl::ground_truth_auroc(sx, xg.known_circuit), 1.0);
}

TEST(ExactPatch, WorkerCountDoesNotChangeScores) {
  const cl::GroundTruthModel& gt = copy_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 6);
  cl::ScoreSet a =
      cl::exact_edge_patch_scores(gt.model, data, cl::AblationSpec::counterfactual(), 100000, 1);
  cl::ScoreSet b =
      cl::exact_edge_patch_scores(gt.model, data, cl::AblationSpec::counterfactual(), 100000, 4);
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    EXPECT_EQ(a.edge_values[static_cast<size_t>(e)], b.edge_values[static_cast<size_t>(e)]);
  }
}

// ===== node attribution =====================================================

TEST(NodeAttribution, DeadNodesScoreExactlyZero) {
  const cl::GroundTruthModel& gt = copy_fixture();
  cl::ScoreSet s = cl::node_attribution_scores(gt.model, take(gt.dataset.train, 8));
  EXPECT_EQ(s.granularity, cl::Granularity::node);
  const cl::ComputationGraph& g = *gt.model.graph;
  EXPECT_EQ(s.node_values.at(g.node_index_by_name("head.0.1")), 0.0);
  EXPECT_EQ(s.node_values.at(g.node_index_by_name("mlp.0.0")), 0.0);
  EXPECT_GT(std::fabs(s.node_values.at(g.node_index_by_name("embed.0.0"))), 0.0);
  EXPECT_GT(std::fabs(s.node_values.at(g.node_index_by_name("head.0.0"))), 0.0);
}

TEST(NodeAttribution, RecoversTheCopyWritersExactly) {
  const cl::GroundTruthModel& gt = copy_fixture();
  cl::ScoreSet s = cl::node_attribution_scores(gt.model, take(gt.dataset.train, 8));
  EXPECT_EQ(cl::ground_truth_auroc_nodes(s, gt.known_circuit), 1.0);
}

TEST(NodeAttribution, BroadcastsOntoOutgoingEdges) {
  const cl::GroundTruthModel& gt = copy_fixture();
  cl::ScoreSet s = cl::node_attribution_scores(gt.model, take(gt.dataset.train, 8));
  const cl::ComputationGraph& g = *gt.model.graph;
  for (const auto& [node, value] : s.node_values) {
    for (int e : g.outgoing(node)) {
      EXPECT_EQ(s.edge_values[static_cast<size_t>(e)], value) << g.edge_name(e);
    }
  }
  // Deriving a circuit from the broadcast keeps whole nodes together: the top
  // 6 of 9 edges are exactly the out-edges of the two live writers.
  cl::CircuitSeries series = cl::circuits_from_scores(s, {0.67});
  const cl::Circuit& c = series.circuits.front();
  EXPECT_EQ(c.count_edges(), 6);
  int embed = g.node_index_by_name("embed.0.0");
  int live_head = g.node_index_by_name("head.0.0");
  for (int e : g.outgoing(embed)) EXPECT_TRUE(c.contains(e)) << g.edge_name(e);
  for (int e : g.outgoing(live_head)) EXPECT_TRUE(c.contains(e)) << g.edge_name(e);
}

TEST(NodeAttribution, OneStepIgEqualsThePlainEstimateBitForBit) {
  const cl::GroundTruthModel& gt = copy_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 6);
  cl::ScoreSet a = cl::node_attribution_scores(gt.model, data);
  cl::ScoreSet b = cl::node_attribution_scores(gt.model, data,
                                               cl::AblationSpec::counterfactual(), 1);
  ASSERT_EQ(a.node_values.size(), b.node_values.size());
  for (const auto& [node, value] : a.node_values) EXPECT_EQ(b.node_values.at(node), value);
}

TEST(NodeAttribution, MultiStepIgStaysPerfectOnTheNonlinearFixture) {
  const cl::GroundTruthModel& gt = xor_fixture();
  cl::ScoreSet s = cl::node_attribution_scores(gt.model, take(gt.dataset.train, 8),
                                               cl::AblationSpec::counterfactual(), 4);
  EXPECT_EQ(cl::ground_truth_auroc_nodes(s, gt.known_circuit), 1.0);
}

// ===== bootstrap sign filtering =============================================

TEST(Bootstrap, StableSignsSurviveAndZerosCountAsConsistent) {
  const cl::GroundTruthModel& gt = copy_fixture();
  // Two distinguishable instances; scorer behavior depends on the resample
  // composition. Edge 0: constant sign. Edge 1: sign flips with composition.
  // Edge 2: zero on lopsided resamples, positive on balanced ones — never
  // flips, and the full dataset (balanced) gives it a nonzero score.
  std::vector<cl::TaskInstance> data{cl::gtdetail::make_copy_instance(0, 4, 5, 1),
                                     cl::gtdetail::make_copy_instance(2, 4, 5, 3)};
  auto count_first = [](const std::vector<cl::TaskInstance>& sample) {
    int n0 = 0;
    for (const auto& inst : sample) n0 += inst.tokens[0] == 0 ? 1 : 0;
    return n0;
  };
  cl::ScoreFn fn = [&](const std::vector<cl::TaskInstance>& sample) {
    cl::ScoreSet s = cl::ScoreSet::edges_of(gt.model.graph);
    int n0 = count_first(sample);
    int n1 = static_cast<int>(sample.size()) - n0;
    s.set(0, 1.0);
    s.set(1, n0 >= n1 ? 1.0 : -1.0);
    s.set(2, n0 == n1 ? 1.0 : 0.0);
    for (int e = 3; e < gt.model.graph->num_edges(); ++e) s.set(e, 1.0);
    return s;
  };
  cl::ScoreSet out = cl::bootstrap_filter(fn, data, 50, 0.95, 17);
  EXPECT_EQ(out.edge_values[0], 1.0);
  EXPECT_EQ(out.edge_values[1], 0.0);  // sign unstable -> filtered
  EXPECT_EQ(out.edge_values[2], 1.0);  // zeros are consistent with positive
  EXPECT_EQ(out.provenance.at("bootstrap_filtered_count"), "1");
  EXPECT_NE(out.provenance.at("bootstrap_filtered_edges").find(gt.model.graph->edge_name(1)),
            std::string::npos);
}

TEST(Bootstrap, RejectsBadParameters) {
  const cl::GroundTruthModel& gt = copy_fixture();
  cl::ScoreFn fn = [&](const std::vector<cl::TaskInstance>&) {
    return cl::ScoreSet::edges_of(gt.model.graph);
  };
  std::vector<cl::TaskInstance> data = take(copy_fixture().dataset.train, 2);
  EXPECT_THROW(cl::bootstrap_filter(fn, data, 1), cl::ValidationError);
  EXPECT_THROW(cl::bootstrap_filter(fn, data, 10, 0.5), cl::ValidationError);
  EXPECT_THROW(cl::bootstrap_filter(fn, data, 10, 1.1), cl::ValidationError);
  EXPECT_THROW(cl::bootstrap_filter(fn, {}, 10), cl::ValidationError);
}

TEST(Bootstrap, SurvivorsKeepTheirFullDatasetScores) {
  const cl::GroundTruthModel& gt = copy_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 12);
  cl::ScoreFn fn = [&](const std::vector<cl::TaskInstance>& s) {
    return cl::eap_scores(gt.model, s);
  };
  cl::ScoreSet full = cl::eap_scores(gt.model, data);
  cl::ScoreSet filtered = cl::bootstrap_filter(fn, data, 10, 0.9, 23);
  // The copy circuit's scores have the same sign on every instance, so both
  // circuit edges survive with their exact full-dataset values; the dead
  // edges are exactly zero in every resample and survive as zeros.
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    EXPECT_EQ(filtered.edge_values[static_cast<size_t>(e)],
              full.edge_values[static_cast<size_t>(e)]);
  }
  EXPECT_EQ(cl::ground_truth_auroc(filtered, gt.known_circuit), 1.0);
  EXPECT_EQ(filtered.provenance.at("bootstrap_filtered_count"), "0");
}

TEST(Bootstrap, NodeGranularityInputDegradesToEdgeGranularity) {
  const cl::GroundTruthModel& gt = copy_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 8);
  cl::ScoreFn fn = [&](const std::vector<cl::TaskInstance>& s) {
    return cl::node_attribution_scores(gt.model, s);
  };
  cl::ScoreSet out = cl::bootstrap_filter(fn, data, 8, 0.9, 29);
  EXPECT_EQ(out.granularity, cl::Granularity::edge);
  EXPECT_TRUE(out.node_values.empty());
  cl::ScoreSet full = cl::node_attribution_scores(gt.model, data);
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    EXPECT_EQ(out.edge_values[static_cast<size_t>(e)],
              full.edge_values[static_cast<size_t>(e)]);
  }
}

TEST(Bootstrap, DeterministicGivenTheSeed) {
  const cl::GroundTruthModel& gt = copy_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 6);
  cl::ScoreFn fn = [&](const std::vector<cl::TaskInstance>& s) {
    return cl::eap_scores(gt.model, s);
  };
  cl::ScoreSet a = cl::bootstrap_filter(fn, data, 6, 0.8, 31);
  cl::ScoreSet b = cl::bootstrap_filter(fn, data, 6, 0.8, 31);
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    EXPECT_EQ(a.edge_values[static_cast<size_t>(e)], b.edge_values[static_cast<size_t>(e)]);
  }
}

// ===== parallel ensembling ==================================================

namespace {

cl::ScoreSet scores_with(const cl::GroundTruthModel& gt, const std::vector<double>& leading,
                         double rest = 0.0) {
  cl::ScoreSet s = cl::ScoreSet::edges_of(gt.model.graph);
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    size_t idx = static_cast<size_t>(e);
    s.set(e, idx < leading.size() ? leading[idx] : rest);
  }
  return s;
}

}  // namespace

TEST(EnsembleParallel, NormalizesEachSetByItsLargestMagnitude) {
  const cl::GroundTruthModel& gt = copy_fixture();
  cl::ScoreSet s = scores_with(gt, {2.0, -4.0});
  cl::ScoreSet merged = cl::ensemble_parallel({s, s});
  EXPECT_EQ(merged.edge_values[0], 0.5);
  EXPECT_EQ(merged.edge_values[1], -1.0);
  for (int e = 2; e < gt.model.graph->num_edges(); ++e) {
    EXPECT_EQ(merged.edge_values[static_cast<size_t>(e)], 0.0);
  }
}

TEST(EnsembleParallel, MergeRulesFollowTheirFormulas) {
  const cl::GroundTruthModel& gt = copy_fixture();
  cl::ScoreSet a = scores_with(gt, {0.25, -1.0});
  cl::ScoreSet b = scores_with(gt, {1.0, 0.5});
  cl::ScoreSet mean = cl::ensemble_parallel({a, b}, cl::MergeRule::mean);
  EXPECT_EQ(mean.edge_values[0], 0.625);
  EXPECT_EQ(mean.edge_values[1], -0.25);
  cl::ScoreSet weighted = cl::ensemble_parallel({a, b}, cl::MergeRule::weighted, {1.0, 3.0});
  EXPECT_EQ(weighted.edge_values[0], 0.8125);
  EXPECT_EQ(weighted.edge_values[1], 0.125);
  cl::ScoreSet mx = cl::ensemble_parallel({a, b}, cl::MergeRule::max);
  EXPECT_EQ(mx.edge_values[0], 1.0);
  EXPECT_EQ(mx.edge_values[1], -1.0);  // sign preserved, magnitude wins
  cl::ScoreSet mn = cl::ensemble_parallel({a, b}, cl::MergeRule::min);
  EXPECT_EQ(mn.edge_values[0], 0.25);
  EXPECT_EQ(mn.edge_values[1], 0.5);
  EXPECT_EQ(mean.provenance.at("merge"), "mean");
}

TEST(EnsembleParallel, RejectsMismatchedCoverageNamingTheEdges) {
  const cl::GroundTruthModel& gt = copy_fixture();
  cl::ScoreSet a = scores_with(gt, {1.0});
  cl::ScoreSet b = cl::ScoreSet::edges_of(gt.model.graph);
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    if (e != 3) b.set(e, 1.0);
  }
  try {
    cl::ensemble_parallel({a, b});
    FAIL() << "expected ValidationError";
  } catch (const cl::ValidationError& err) {
    EXPECT_NE(std::string(err.what()).find(gt.model.graph->edge_name(3)), std::string::npos);
  }
}

TEST(EnsembleParallel, RejectsSingleSetsAndBadWeights) {
  const cl::GroundTruthModel& gt = copy_fixture();
  cl::ScoreSet s = scores_with(gt, {1.0});
  EXPECT_THROW(cl::ensemble_parallel({s}), cl::ValidationError);
  EXPECT_THROW(cl::ensemble_parallel({s, s}, cl::MergeRule::weighted, {1.0}),
               cl::ValidationError);
  EXPECT_THROW(cl::ensemble_parallel({s, s}, cl::MergeRule::weighted, {1.0, -1.0}),
               cl::ValidationError);
  EXPECT_THROW(cl::ensemble_parallel({s, s}, cl::MergeRule::mean, {1.0, 1.0}),
               cl::ValidationError);
}

// ===== sequential ensembling ================================================

namespace {

cl::ScoreSet zero_init(const cl::GroundTruthModel& gt) {
  cl::ScoreSet s = cl::ScoreSet::edges_of(gt.model.graph);
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) s.set(e, 0.0);
  return s;
}

}  // namespace

TEST(EnsembleSequential, GatesLieStrictlyInsideTheUnitInterval) {
  const cl::GroundTruthModel& gt = copy_fixture();
  cl::PruneConfig cfg;
  cfg.steps = 5;
  cl::ScoreSet s = cl::ensemble_sequential(zero_init(gt), gt.model,
                                           take(gt.dataset.train, 4), cfg);
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    EXPECT_TRUE(s.edge_present[static_cast<size_t>(e)]);
    EXPECT_GT(s.edge_values[static_cast<size_t>(e)], 0.0);
    EXPECT_LT(s.edge_values[static_cast<size_t>(e)], 1.0);
  }
}

TEST(EnsembleSequential, OpensTheGatesThatMatterAndLeavesDeadGatesUntouched) {
  const cl::GroundTruthModel& gt = copy_fixture();
  cl::PruneConfig cfg;
  cfg.steps = 300;
  cfg.adam.lr = 0.15;
  cfg.sparsity_weight = 0.0;
  cl::ScoreSet s = cl::ensemble_sequential(zero_init(gt), gt.model,
                                           take(gt.dataset.train, 8), cfg);
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    if (gt.known_circuit.contains(e)) {
      EXPECT_GT(s.edge_values[static_cast<size_t>(e)], 0.8) << gt.model.graph->edge_name(e);
    } else {
      // Edges with no effect on the final position get an exactly-zero
      // gradient, so their gates never move off the cold-start midpoint.
      EXPECT_EQ(s.edge_values[static_cast<size_t>(e)], 0.5) << gt.model.graph->edge_name(e);
    }
  }
}

TEST(EnsembleSequential, WarmStartBeatsColdStartEarly) {
  const cl::GroundTruthModel& gt = copy_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 8);
  std::vector<double> cold_losses, warm_losses;
  cl::PruneConfig cfg;
  cfg.steps = 60;
  cfg.adam.lr = 0.1;
  cfg.sparsity_weight = 0.0;
  cfg.on_step = [&](int, double loss) { cold_losses.push_back(loss); };
  cl::ensemble_sequential(zero_init(gt), gt.model, data, cfg);
  cfg.on_step = [&](int, double loss) { warm_losses.push_back(loss); };
  cl::ScoreSet prior = cl::eap_scores(gt.model, data);
  cl::ensemble_sequential(prior, gt.model, data, cfg);
  ASSERT_EQ(cold_losses.size(), 60u);
  ASSERT_EQ(warm_losses.size(), 60u);
  EXPECT_LT(warm_losses.front(), cold_losses.front());
  double cold_final = cold_losses.back();
  double warm_best_early = *std::min_element(warm_losses.begin(), warm_losses.begin() + 30);
  EXPECT_LE(warm_best_early, cold_final * 1.1 + 1e-9);
}

TEST(EnsembleSequential, TargetFractionPenaltyShrinksTheMeanGate) {
  const cl::GroundTruthModel& gt = copy_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 4);
  cl::PruneConfig open_cfg;
  open_cfg.steps = 80;
  open_cfg.adam.lr = 0.15;
  open_cfg.sparsity_weight = 0.0;
  cl::ScoreSet open_gates = cl::ensemble_sequential(zero_init(gt), gt.model, data, open_cfg);
  cl::PruneConfig tight_cfg = open_cfg;
  tight_cfg.sparsity_weight = 5.0;
  tight_cfg.target_fraction = 0.2;
  cl::ScoreSet tight_gates = cl::ensemble_sequential(zero_init(gt), gt.model, data, tight_cfg);
  auto mean_gate = [&](const cl::ScoreSet& s) {
    double m = 0.0;
    for (double v : s.edge_values) m += v;
    return m / static_cast<double>(s.edge_values.size());
  };
  EXPECT_LT(mean_gate(tight_gates), mean_gate(open_gates));
}

TEST(EnsembleSequential, DivergenceNamesTheStep) {
  const cl::GroundTruthModel& gt = copy_fixture();
  cl::Model poisoned = gt.model.clone();
  // Overflow the logits matmul: huge token embeddings squared through the
  // tied unembedding produce an infinity on the very first forward.
  for (int v = 0; v < poisoned.config.vocab_size; ++v) poisoned.tok_emb.at(v, 0) = 1e200;
  poisoned.layers[0].wv[0].at(0, 0) = 1e200;
  cl::PruneConfig cfg;
  cfg.steps = 3;
  cl::ScoreSet init = cl::ScoreSet::edges_of(poisoned.graph);
  for (int e = 0; e < poisoned.graph->num_edges(); ++e) init.set(e, 0.0);
  try {
    cl::ensemble_sequential(init, poisoned, take(gt.dataset.train, 2), cfg);
    FAIL() << "expected NumericError";
  } catch (const cl::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("diverged at step 1"), std::string::npos)
        << e.what();
  }
}

TEST(EnsembleSequential, RequiresAFullyCoveredInitializer) {
  const cl::GroundTruthModel& gt = copy_fixture();
  cl::ScoreSet partial = cl::ScoreSet::edges_of(gt.model.graph);
  for (int e = 1; e < gt.model.graph->num_edges(); ++e) partial.set(e, 1.0);
  EXPECT_THROW(
      cl::ensemble_sequential(partial, gt.model, take(gt.dataset.train, 2)),
      cl::ValidationError);
}

TEST(EnsembleSequential, DeterministicAcrossRuns) {
  const cl::GroundTruthModel& gt = copy_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 4);
  cl::PruneConfig cfg;
  cfg.steps = 10;
  cl::ScoreSet a = cl::ensemble_sequential(zero_init(gt), gt.model, data, cfg);
  cl::ScoreSet b = cl::ensemble_sequential(zero_init(gt), gt.model, data, cfg);
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    EXPECT_EQ(a.edge_values[static_cast<size_t>(e)], b.edge_values[static_cast<size_t>(e)]);
  }
}

// ===== hybrid ensembling ====================================================

TEST(Hybrid, WithoutSequentialEqualsTheParallelMeanBitForBit) {
  const cl::GroundTruthModel& gt = copy_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 6);
  cl::HybridConfig cfg;
  cfg.ig_steps = 4;
  cfg.include_sequential = false;
  cl::ScoreSet hybrid = cl::ensemble_hybrid(gt.model, data, cfg);
  cl::ScoreSet expected = cl::ensemble_parallel(
      {cl::eap_scores(gt.model, data), cl::eap_ig_inputs_scores(gt.model, data, 4),
       cl::eap_ig_acts_scores(gt.model, data, 4)},
      cl::MergeRule::mean);
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    EXPECT_EQ(hybrid.edge_values[static_cast<size_t>(e)],
              expected.edge_values[static_cast<size_t>(e)]);
  }
  EXPECT_EQ(cl::ground_truth_auroc(hybrid, gt.known_circuit), 1.0);
}

TEST(Hybrid, DeterministicAndDocumentsItsComponents) {
  const cl::GroundTruthModel& gt = copy_fixture();
  std::vector<cl::TaskInstance> data = take(gt.dataset.train, 4);
  cl::HybridConfig cfg;
  cfg.ig_steps = 2;
  cfg.prune.steps = 8;
  cl::ScoreSet a = cl::ensemble_hybrid(gt.model, data, cfg);
  cl::ScoreSet b = cl::ensemble_hybrid(gt.model, data, cfg);
  for (int e = 0; e < gt.model.graph->num_edges(); ++e) {
    EXPECT_EQ(a.edge_values[static_cast<size_t>(e)], b.edge_values[static_cast<size_t>(e)]);
  }
  EXPECT_EQ(a.provenance.at("method"), "ensemble-hybrid");
  EXPECT_EQ(a.provenance.at("components"),
            "eap eap-ig-inputs eap-ig-activations ensemble-sequential");
  EXPECT_EQ(a.provenance.at("sequential"), "yes");
}

// ===== path effect isolation ================================================

TEST(PathEffect, TheCopyPathCarriesTheWholeEffect) {
  const cl::GroundTruthModel& gt = copy_fixture();
  const cl::ComputationGraph& g = *gt.model.graph;
  cl::TaskInstance inst = gt.dataset.train.front();
  std::vector<int> path{g.edge_index_by_name("embed.0.0->head.0.0"),
                        g.edge_index_by_name("head.0.0->logits.1.0")};
  double ipe = cl::isolate_path_effect(gt.model, inst, path, cl::PathMode::counterfactual);
  cl::TaskInstance swapped = inst;
  swapped.tokens = inst.cf_tokens;
  double full = cl::metric_m(gt.model, swapped) - cl::metric_m(gt.model, inst);
  EXPECT_NEAR(ipe, full, 0.01 * std::fabs(full));
}

TEST(PathEffect, DeadPathContributesExactlyZero) {
  const cl::GroundTruthModel& gt = copy_fixture();
  const cl::ComputationGraph& g = *gt.model.graph;
  cl::TaskInstance inst = gt.dataset.train.front();
  std::vector<int> path{g.edge_index_by_name("embed.0.0->head.0.1"),
                        g.edge_index_by_name("head.0.1->logits.1.0")};
  EXPECT_EQ(cl::isolate_path_effect(gt.model, inst, path, cl::PathMode::counterfactual), 0.0);
}

TEST(PathEffect, ZeroAblationIsHalfTheCounterfactualSwing) {
  const cl::GroundTruthModel& gt = copy_fixture();
  const cl::ComputationGraph& g = *gt.model.graph;
  cl::TaskInstance inst = gt.dataset.train.front();
  std::vector<int> path{g.edge_index_by_name("embed.0.0->head.0.0"),
                        g.edge_index_by_name("head.0.0->logits.1.0")};
  double cf = cl::isolate_path_effect(gt.model, inst, path, cl::PathMode::counterfactual);
  double abl = cl::isolate_path_effect(gt.model, inst, path, cl::PathMode::ablate);
  // Counterfactual swings the copied logit from +answer to +cf_answer; zero
  // ablation only removes the +answer half.
  EXPECT_NEAR(abl, 0.5 * cf, 1e-6);
}

TEST(PathEffect, PathEffectsAddExactlyInALinearModel) {
  const cl::Model& m = linear_model();
  const cl::ComputationGraph& g = *m.graph;
  cl::TaskInstance inst = linear_instances(1).front();
  std::vector<std::vector<int>> paths;
  std::vector<int> prefix;
  enumerate_paths(g, g.embed_node(), prefix, paths);
  double total = 0.0;
  for (const auto& p : paths) {
    total += cl::isolate_path_effect(m, inst, p, cl::PathMode::counterfactual);
  }
  cl::TaskInstance swapped = inst;
  swapped.tokens = inst.cf_tokens;
  double full = cl::metric_m(m, swapped) - cl::metric_m(m, inst);
  EXPECT_NEAR(total, full, 1e-9 * std::max(1.0, std::fabs(full)));
}

TEST(PathEffect, MalformedPathsAreRejected) {
  const cl::GroundTruthModel& gt = copy_fixture();
  const cl::ComputationGraph& g = *gt.model.graph;
  cl::TaskInstance inst = gt.dataset.train.front();
  int e_eh0 = g.edge_index_by_name("embed.0.0->head.0.0");
  int e_eh1 = g.edge_index_by_name("embed.0.0->head.0.1");
  int e_h0l = g.edge_index_by_name("head.0.0->logits.1.0");
  EXPECT_THROW(cl::isolate_path_effect(gt.model, inst, {}, cl::PathMode::ablate),
               cl::ValidationError);
  EXPECT_THROW(cl::isolate_path_effect(gt.model, inst, {e_h0l, e_h0l}, cl::PathMode::ablate),
               cl::ValidationError);  // does not start at the embedding
  EXPECT_THROW(cl::isolate_path_effect(gt.model, inst, {e_eh0}, cl::PathMode::ablate),
               cl::ValidationError);  // does not end at the logits
  try {
    cl::isolate_path_effect(gt.model, inst, {e_eh1, e_h0l}, cl::PathMode::ablate);
    FAIL() << "expected ValidationError";
  } catch (const cl::ValidationError& err) {
    EXPECT_NE(std::string(err.what()).find("disconnected"), std::string::npos);
  }
}
