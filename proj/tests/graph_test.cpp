// Graph topology, circuit containers, weighted edge counting, and the
// circuit file formats.

#include "circuitlab/graph.hpp"

#include <gtest/gtest.h>

#include <set>

#include "circuitlab/common.hpp"

using namespace circuitlab;

namespace {

// Test-side edge enumeration, written from the reader's perspective (the
// production code enumerates from a writer predicate): for every reader,
// count which nodes may feed it based purely on layer arithmetic.
int enumerate_edges_ref(int L, int H) {
  int count = 0;
  // head(l, h) readers: embed + all heads/mlps below layer l.
  for (int l = 0; l < L; ++l) {
    count += H * (1 + l * H + l);
  }
  // mlp(l) readers: embed + heads/mlps below + own-layer heads.
  for (int l = 0; l < L; ++l) {
    count += 1 + l * H + l + H;
  }
  // logits: everything.
  count += 1 + L * H + L;
  return count;
}

TEST(Graph, NodeUniverseAndOrder) {
  auto g = make_graph(2, 4, 32);
  // embed + 2*(4 heads + 1 mlp) + logits = 12 nodes.
  EXPECT_EQ(g->num_nodes(), 12);
  EXPECT_EQ(g->node(0).name(), "embed.0.0");
  EXPECT_EQ(g->node(1).name(), "head.0.0");
  EXPECT_EQ(g->node(4).name(), "head.0.3");
  EXPECT_EQ(g->node(5).name(), "mlp.0.0");
  EXPECT_EQ(g->node(6).name(), "head.1.0");
  EXPECT_EQ(g->node(11).name(), "logits.2.0");
}

TEST(Graph, EdgeCountMatchesHandDerivedValue) {
  // For L=2, H=4: heads 4*1 + 4*6 = 28, mlps 5 + 10 = 15, logits 11 -> 54.
  auto g = make_graph(2, 4, 32);
  EXPECT_EQ(g->num_edges(), 54);
  EXPECT_EQ(enumerate_edges_ref(2, 4), 54);
}

TEST(Graph, EdgeCountMatchesReferenceAcrossConfigs) {
  for (int L = 1; L <= 4; ++L) {
    for (int H : {1, 2, 4, 8}) {
      auto g = make_graph(L, H, 16);
      EXPECT_EQ(g->num_edges(), enumerate_edges_ref(L, H)) << "L=" << L << " H=" << H;
      EXPECT_EQ(ComputationGraph::closed_form_edge_count(L, H), enumerate_edges_ref(L, H));
    }
  }
}

TEST(Graph, EdgeNamesAndLookup) {
  auto g = make_graph(2, 4, 32);
  int embed = g->node_index_by_name("embed.0.0");
  int h13 = g->node_index_by_name("head.1.3");
  int e = g->edge_index(embed, h13);
  EXPECT_EQ(g->edge_name(e), "embed.0.0->head.1.3");
  EXPECT_EQ(g->edge_index_by_name("embed.0.0->head.1.3"), e);
  // Same-layer head-to-head must not exist; head feeds its own layer's mlp.
  EXPECT_FALSE(g->has_edge(g->node_index_by_name("head.0.0"), g->node_index_by_name("head.0.1")));
  EXPECT_TRUE(g->has_edge(g->node_index_by_name("head.0.0"), g->node_index_by_name("mlp.0.0")));
  EXPECT_FALSE(g->has_edge(g->node_index_by_name("mlp.0.0"), g->node_index_by_name("head.0.0")));
  EXPECT_TRUE(g->has_edge(g->node_index_by_name("mlp.0.0"), g->node_index_by_name("head.1.0")));
  EXPECT_THROW(g->edge_index_by_name("head.0.0->head.0.1"), ValidationError);
}

TEST(Graph, CanonicalEdgeOrderIsReaderMajor) {
  auto g = make_graph(1, 2, 8);
  // Readers in node order: head.0.0, head.0.1, mlp.0.0, logits.1.0.
  std::vector<std::string> expected{
      "embed.0.0->head.0.0",
      "embed.0.0->head.0.1",
      "embed.0.0->mlp.0.0",
      "head.0.0->mlp.0.0",
      "head.0.1->mlp.0.0",
      "embed.0.0->logits.1.0",
      "head.0.0->logits.1.0",
      "head.0.1->logits.1.0",
      "mlp.0.0->logits.1.0",
  };
  ASSERT_EQ(g->num_edges(), static_cast<int>(expected.size()));
  for (int e = 0; e < g->num_edges(); ++e) {
    EXPECT_EQ(g->edge_name(e), expected[static_cast<size_t>(e)]);
  }
}

// ===== weighted edge count ==================================================

TEST(WeightedEdgeCount, FullCircuitEqualsEdgeCount) {
  auto g = make_graph(2, 4, 32);
  EXPECT_DOUBLE_EQ(weighted_edge_count(Circuit::full(g)), 54.0);
}

TEST(WeightedEdgeCount, EmptyCircuitIsZero) {
  auto g = make_graph(2, 4, 32);
  EXPECT_DOUBLE_EQ(weighted_edge_count(Circuit::empty(g)), 0.0);
}

TEST(WeightedEdgeCount, HalfNeuronSubsetContributesHalf) {
  auto g = make_graph(1, 2, 8);
  int embed = g->node_index_by_name("embed.0.0");
  int h00 = g->node_index_by_name("head.0.0");
  Circuit c = Circuit::of_edges(g, {g->edge_index(embed, h00)});
  c.neuron_subsets[embed] = {1, 2, 3, 4};  // 4 of 8
  EXPECT_DOUBLE_EQ(weighted_edge_count(c), 0.5);
}

TEST(WeightedEdgeCount, RandomPropertySuite) {
  // 1000 random circuits: the weighted count must match an independently
  // written accumulation and obey 0 <= wec <= plain count, with equality to
  // the plain count exactly when no member edge leaves a subset node.
  auto g = make_graph(2, 3, 16);
  Rng rng(991);
  for (int iter = 0; iter < 1000; ++iter) {
    Circuit c = Circuit::empty(g);
    for (size_t e = 0; e < c.member.size(); ++e) {
      c.member[e] = rng.uniform() < 0.4 ? 1 : 0;
    }
    // Random neuron subsets on nodes that have a member outgoing edge.
    std::set<int> sources;
    for (int e = 0; e < g->num_edges(); ++e) {
      if (c.contains(e)) sources.insert(g->edge(e).src);
    }
    for (int node : sources) {
      if (rng.uniform() < 0.5) continue;
      int sz = 1 + rng.below_int(g->d_model());
      std::vector<int> pool;
      for (int i = 1; i <= g->d_model(); ++i) pool.push_back(i);
      rng.shuffle(pool);
      std::vector<int> subset(pool.begin(), pool.begin() + sz);
      std::sort(subset.begin(), subset.end());
      c.neuron_subsets[node] = subset;
    }

    double expected = 0.0;
    for (int e = 0; e < g->num_edges(); ++e) {
      if (!c.contains(e)) continue;
      int src = g->edge(e).src;
      auto it = c.neuron_subsets.find(src);
      double frac = it == c.neuron_subsets.end()
                        ? 1.0
                        : static_cast<double>(it->second.size()) / g->d_model();
      expected += frac;
    }
    double got = weighted_edge_count(c);
    ASSERT_NEAR(got, expected, 1e-12) << "iteration " << iter;
    ASSERT_GE(got, 0.0);
    ASSERT_LE(got, static_cast<double>(c.count_edges()) + 1e-12);
    if (c.neuron_subsets.empty()) {
      ASSERT_DOUBLE_EQ(got, static_cast<double>(c.count_edges()));
    }
  }
}

TEST(WeightedEdgeCount, SubsetValidation) {
  auto g = make_graph(1, 2, 8);
  int embed = g->node_index_by_name("embed.0.0");
  int h00 = g->node_index_by_name("head.0.0");
  {
    // Index beyond the residual width.
    Circuit c = Circuit::of_edges(g, {g->edge_index(embed, h00)});
    c.neuron_subsets[embed] = {9};
    EXPECT_THROW(weighted_edge_count(c), ValidationError);
  }
  {
    // Subset on a node with no member outgoing edge.
    Circuit c = Circuit::of_edges(g, {g->edge_index(embed, h00)});
    c.neuron_subsets[h00] = {1};
    EXPECT_THROW(weighted_edge_count(c), ValidationError);
  }
}

// ===== circuits from scores =================================================

TEST(CircuitsFromScores, BudgetsTiesAndNesting) {
  auto g = make_graph(1, 2, 8);  // 9 edges
  ScoreSet s = ScoreSet::edges_of(g);
  for (int e = 0; e < g->num_edges(); ++e) s.set(e, 0.0);
  s.set(0, -5.0);  // largest magnitude, negative
  s.set(3, 4.0);
  s.set(7, 4.0);  // tie with edge 3; canonical order must prefer edge 3

  CircuitSeries series = circuits_from_scores(s, {0.1, 0.3, 0.5});
  validate_series(series);
  // floor(0.1*9)=0, floor(0.3*9)=2, floor(0.5*9)=4
  EXPECT_EQ(series.circuits[0].count_edges(), 0);
  EXPECT_EQ(series.circuits[1].count_edges(), 2);
  EXPECT_TRUE(series.circuits[1].contains(0));
  EXPECT_TRUE(series.circuits[1].contains(3));
  EXPECT_FALSE(series.circuits[1].contains(7));
  EXPECT_EQ(series.circuits[2].count_edges(), 4);
  EXPECT_TRUE(series.circuits[2].contains(7));
}

TEST(CircuitsFromScores, SignedRankingFlag) {
  auto g = make_graph(1, 2, 8);
  ScoreSet s = ScoreSet::edges_of(g);
  for (int e = 0; e < g->num_edges(); ++e) s.set(e, 0.0);
  s.set(0, -5.0);
  s.set(3, 4.0);
  CircuitSeries series = circuits_from_scores(s, {0.2}, RankBy::signed_value);
  // floor(0.2*9) = 1; signed ranking prefers +4 over -5.
  EXPECT_EQ(series.circuits[0].count_edges(), 1);
  EXPECT_TRUE(series.circuits[0].contains(3));
}

TEST(CircuitsFromScores, RejectsThresholdOutsideUnitInterval) {
  auto g = make_graph(1, 2, 8);
  ScoreSet s = ScoreSet::edges_of(g);
  EXPECT_THROW(circuits_from_scores(s, {0.0}), ValidationError);
  EXPECT_THROW(circuits_from_scores(s, {1.5}), ValidationError);
}

TEST(CircuitsFromScores, DefaultGridIsTheNineCanonicalThresholds) {
  const auto& grid = default_threshold_grid();
  ASSERT_EQ(grid.size(), 9u);
  EXPECT_DOUBLE_EQ(grid.front(), 0.001);
  EXPECT_DOUBLE_EQ(grid.back(), 0.5);
}

TEST(CircuitSeries, FixedSeriesSkipsSizeRuleButKeepsGridOrder) {
  auto g = make_graph(1, 2, 8);
  Circuit c = Circuit::full(g);
  CircuitSeries series = fixed_circuit_series(c);
  validate_series(series);  // no size rule for fixed series
  EXPECT_EQ(series.size(), 9u);
  for (const Circuit& ck : series.circuits) EXPECT_EQ(ck.count_edges(), 9);
}

// ===== file formats =========================================================

TEST(CircuitFiles, MembershipRoundTripIsExact) {
  auto g = make_graph(2, 4, 32);
  Rng rng(5);
  Circuit c = Circuit::empty(g);
  for (size_t e = 0; e < c.member.size(); ++e) c.member[e] = rng.uniform() < 0.5;
  int embed = g->node_index_by_name("embed.0.0");
  // Guarantee embed has a member outgoing edge, then attach a subset.
  c.member[static_cast<size_t>(g->outgoing(embed)[0])] = 1;
  c.neuron_subsets[embed] = {1, 5, 32};

  nlohmann::json j = circuit_to_json(c, 0.2);
  std::string text = j.dump(2);
  ParsedCircuitFile parsed = circuit_from_json(nlohmann::json::parse(text), g);
  EXPECT_FALSE(parsed.is_scores);
  EXPECT_DOUBLE_EQ(parsed.k, 0.2);
  EXPECT_TRUE(parsed.circuit == c);
}

TEST(CircuitFiles, ScoreRoundTripPreservesDoublesBitExactly) {
  auto g = make_graph(1, 2, 8);
  ScoreSet s = ScoreSet::edges_of(g);
  Rng rng(17);
  for (int e = 0; e < g->num_edges(); ++e) s.set(e, rng.normal() * 1e-7);
  s.provenance["method"] = "unit-test";
  std::string text = scores_to_json(s).dump();
  ParsedCircuitFile parsed = circuit_from_json(nlohmann::json::parse(text), g);
  ASSERT_TRUE(parsed.is_scores);
  for (int e = 0; e < g->num_edges(); ++e) {
    EXPECT_EQ(parsed.scores.edge_values[static_cast<size_t>(e)],
              s.edge_values[static_cast<size_t>(e)])
        << "edge " << e;
  }
  EXPECT_EQ(parsed.scores.provenance.at("method"), "unit-test");
}

TEST(CircuitFiles, UnknownEdgeNameErrorListsKey) {
  auto g = make_graph(1, 2, 8);
  nlohmann::json j;
  j["format_version"] = kCircuitFormatVersion;
  j["type"] = "membership";
  j["k"] = 0.1;
  j["edges"] = {{"embed.0.0->head.9.9", true}};
  try {
    circuit_from_json(j, g);
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("embed.0.0->head.9.9"), std::string::npos) << e.what();
  }
}

TEST(CircuitFiles, MixedValueTypesRejected) {
  auto g = make_graph(1, 2, 8);
  nlohmann::json j;
  j["format_version"] = kCircuitFormatVersion;
  j["type"] = "scores";
  j["edges"] = {{"embed.0.0->head.0.0", 0.5}, {"embed.0.0->head.0.1", true}};
  EXPECT_THROW(circuit_from_json(j, g), ValidationError);

  nlohmann::json m;
  m["format_version"] = kCircuitFormatVersion;
  m["type"] = "membership";
  m["k"] = 0.1;
  m["edges"] = {{"embed.0.0->head.0.0", true}, {"embed.0.0->head.0.1", 0.25}};
  EXPECT_THROW(circuit_from_json(m, g), ValidationError);
}

TEST(CircuitFiles, NeuronIndexOutsideWidthRejected) {
  auto g = make_graph(1, 2, 8);
  nlohmann::json j;
  j["format_version"] = kCircuitFormatVersion;
  j["type"] = "membership";
  j["k"] = 0.5;
  j["edges"] = {{"embed.0.0->head.0.0", true}};
  j["neurons"] = {{"embed.0.0", {1, 9}}};
  EXPECT_THROW(circuit_from_json(j, g), ValidationError);
}

TEST(CircuitFiles, VersionMismatchRejected) {
  auto g = make_graph(1, 2, 8);
  nlohmann::json j;
  j["format_version"] = "something-else";
  j["type"] = "membership";
  j["k"] = 0.5;
  j["edges"] = nlohmann::json::object();
  EXPECT_THROW(circuit_from_json(j, g), ValidationError);
}

}  // namespace
