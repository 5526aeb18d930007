#pragma once

// Decomposed-model computation graph and circuit containers.
//
// Node universe for a decoder-only model with L layers and H heads:
//   embed, head(l,h) for l<L,h<H, mlp(l) for l<L, logits.
// Writer order (also evaluation order): embed, then per layer its heads in
// index order followed by its mlp, finally logits (a pure reader).
//
// Edges connect writers to the *value-path* inputs of downstream readers:
//   head(l,h) reads embed and every head/mlp of layers < l;
//   mlp(l) additionally reads the heads of its own layer;
//   logits reads every writer.
// Query/key paths read the live residual stream and are not edges by default
// (config flag `qk_edges` reserves the extension point; unset everywhere).
//
// Canonical edge order: readers in node order, and for each reader its
// incoming edges in writer node order. All score files, circuits and
// tie-breaks use this order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "circuitlab/common.hpp"
#include "json.hpp"

namespace circuitlab {

// Default evaluation grid of edge-fraction thresholds k.
inline const std::vector<double>& default_threshold_grid() {
  static const std::vector<double> grid{0.001, 0.002, 0.005, 0.01, 0.02,
                                        0.05,  0.1,   0.2,   0.5};
  return grid;
}

enum class NodeKind { embed, head, mlp, logits };

inline const char* node_kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::embed: return "embed";
    case NodeKind::head: return "head";
    case NodeKind::mlp: return "mlp";
    case NodeKind::logits: return "logits";
  }
  return "?";
}

struct NodeId {
  NodeKind kind = NodeKind::embed;
  int layer = 0;
  int index = 0;

  std::string name() const {
    return std::string(node_kind_name(kind)) + "." + std::to_string(layer) + "." +
           std::to_string(index);
  }
  bool operator==(const NodeId& o) const {
    return kind == o.kind && layer == o.layer && index == o.index;
  }
};

struct GraphEdge {
  int src = -1;  // node index
  int dst = -1;
};

class ComputationGraph {
 public:
  ComputationGraph(int n_layers, int n_heads, int d_model)
      : n_layers_(n_layers), n_heads_(n_heads), d_model_(d_model) {
    require(n_layers >= 1 && n_heads >= 1 && d_model >= 1,
            "ComputationGraph: n_layers, n_heads, d_model must be positive");
    // Nodes in writer/evaluation order.
    nodes_.push_back({NodeKind::embed, 0, 0});
    for (int l = 0; l < n_layers; ++l) {
      for (int h = 0; h < n_heads; ++h) nodes_.push_back({NodeKind::head, l, h});
      nodes_.push_back({NodeKind::mlp, l, 0});
    }
    nodes_.push_back({NodeKind::logits, n_layers, 0});
    for (size_t i = 0; i < nodes_.size(); ++i) name_to_node_[nodes_[i].name()] = static_cast<int>(i);

    // Edges in canonical order.
    for (int v = 0; v < static_cast<int>(nodes_.size()); ++v) {
      const NodeId& reader = nodes_[static_cast<size_t>(v)];
      if (reader.kind == NodeKind::embed) continue;
      for (int u = 0; u < static_cast<int>(nodes_.size()); ++u) {
        if (writes_into(nodes_[static_cast<size_t>(u)], reader)) {
          incoming_.resize(nodes_.size());
          outgoing_.resize(nodes_.size());
          int e = static_cast<int>(edges_.size());
          edges_.push_back({u, v});
          incoming_[static_cast<size_t>(v)].push_back(e);
          outgoing_[static_cast<size_t>(u)].push_back(e);
          edge_lookup_[{u, v}] = e;
        }
      }
    }
    incoming_.resize(nodes_.size());
    outgoing_.resize(nodes_.size());
    for (size_t e = 0; e < edges_.size(); ++e) {
      name_to_edge_[edge_name(static_cast<int>(e))] = static_cast<int>(e);
    }

    // The enumerated count must equal the closed form implied by the config.
    int64_t expected = closed_form_edge_count(n_layers, n_heads);
    require(static_cast<int64_t>(edges_.size()) == expected,
            "ComputationGraph: enumerated " + std::to_string(edges_.size()) +
                " edges but closed form gives " + std::to_string(expected));
  }

  // E = sum_l H(1 + l(H+1)) + sum_l (1 + l(H+1) + H) + (1 + L(H+1)).
  static int64_t closed_form_edge_count(int n_layers, int n_heads) {
    int64_t e = 0;
    for (int l = 0; l < n_layers; ++l) {
      e += static_cast<int64_t>(n_heads) * (1 + l * (n_heads + 1));  // heads
      e += 1 + l * (n_heads + 1) + n_heads;                          // mlp
    }
    e += 1 + static_cast<int64_t>(n_layers) * (n_heads + 1);         // logits
    return e;
  }

  int n_layers() const { return n_layers_; }
  int n_heads() const { return n_heads_; }
  int d_model() const { return d_model_; }
  int num_nodes() const { return static_cast<int>(nodes_.size()); }
  int num_edges() const { return static_cast<int>(edges_.size()); }
  const std::vector<NodeId>& nodes() const { return nodes_; }
  const std::vector<GraphEdge>& edges() const { return edges_; }
  const NodeId& node(int i) const { return nodes_[static_cast<size_t>(i)]; }
  const GraphEdge& edge(int e) const { return edges_[static_cast<size_t>(e)]; }
  const std::vector<int>& incoming(int node_idx) const {
    return incoming_[static_cast<size_t>(node_idx)];
  }
  const std::vector<int>& outgoing(int node_idx) const {
    return outgoing_[static_cast<size_t>(node_idx)];
  }

  int embed_node() const { return 0; }
  int logits_node() const { return num_nodes() - 1; }

  int node_index(const NodeId& id) const {
    auto it = name_to_node_.find(id.name());
    require(it != name_to_node_.end(), "unknown node " + id.name());
    return it->second;
  }

  int node_index_by_name(const std::string& name) const {
    auto it = name_to_node_.find(name);
    require(it != name_to_node_.end(), "unknown node name \"" + name + "\"");
    return it->second;
  }

  bool has_edge(int u, int v) const { return edge_lookup_.count({u, v}) > 0; }

  int edge_index(int u, int v) const {
    auto it = edge_lookup_.find({u, v});
    require(it != edge_lookup_.end(), "no edge " + nodes_[static_cast<size_t>(u)].name() +
                                          "->" + nodes_[static_cast<size_t>(v)].name());
    return it->second;
  }

  std::string edge_name(int e) const {
    const GraphEdge& ed = edges_[static_cast<size_t>(e)];
    return nodes_[static_cast<size_t>(ed.src)].name() + "->" +
           nodes_[static_cast<size_t>(ed.dst)].name();
  }

  int edge_index_by_name(const std::string& name) const {
    auto it = name_to_edge_.find(name);
    require(it != name_to_edge_.end(), "unknown edge name \"" + name + "\"");
    return it->second;
  }

  bool same_structure(const ComputationGraph& o) const {
    return n_layers_ == o.n_layers_ && n_heads_ == o.n_heads_ && d_model_ == o.d_model_;
  }

 private:
  static bool writes_into(const NodeId& u, const NodeId& v) {
    if (u.kind == NodeKind::logits || v.kind == NodeKind::embed) return false;
    switch (v.kind) {
      case NodeKind::head:
        if (u.kind == NodeKind::embed) return true;
        return u.layer < v.layer;
      case NodeKind::mlp:
        if (u.kind == NodeKind::embed) return true;
        if (u.kind == NodeKind::head) return u.layer <= v.layer;
        return u.layer < v.layer;
      case NodeKind::logits:
        return true;
      default:
        return false;
    }
  }

  int n_layers_, n_heads_, d_model_;
  std::vector<NodeId> nodes_;
  std::vector<GraphEdge> edges_;
  std::vector<std::vector<int>> incoming_, outgoing_;
  std::map<std::pair<int, int>, int> edge_lookup_;
  std::map<std::string, int> name_to_node_;
  std::map<std::string, int> name_to_edge_;
};

using GraphPtr = std::shared_ptr<const ComputationGraph>;

inline GraphPtr make_graph(int n_layers, int n_heads, int d_model) {
  return std::make_shared<const ComputationGraph>(n_layers, n_heads, d_model);
}

// ===== scores ===============================================================

enum class Granularity { edge, node };

// A full or partial assignment of importance scores, bound to a graph.
// Node-granularity sets carry per-node scores and their broadcast onto each
// node's outgoing edges (the broadcast is what circuit derivation consumes).
struct ScoreSet {
  GraphPtr graph;
  std::vector<double> edge_values;   // dense, size num_edges
  std::vector<uint8_t> edge_present; // 1 when the edge was actually scored
  Granularity granularity = Granularity::edge;
  std::map<int, double> node_values; // node-granularity payload
  std::map<std::string, std::string> provenance;

  static ScoreSet edges_of(GraphPtr g) {
    ScoreSet s;
    s.graph = std::move(g);
    s.edge_values.assign(static_cast<size_t>(s.graph->num_edges()), 0.0);
    s.edge_present.assign(static_cast<size_t>(s.graph->num_edges()), 0);
    return s;
  }

  void set(int edge, double v) {
    edge_values[static_cast<size_t>(edge)] = v;
    edge_present[static_cast<size_t>(edge)] = 1;
  }

  // Installs node scores and broadcasts them onto outgoing edges.
  void set_node_scores(const std::map<int, double>& scores) {
    granularity = Granularity::node;
    node_values = scores;
    for (const auto& [node, v] : scores) {
      for (int e : graph->outgoing(node)) set(e, v);
    }
  }
};

// ===== circuits =============================================================

// Membership representation of a circuit: a subset of edges, optionally with
// per-node neuron subsets (1-based indices into the residual width). A node
// may carry a subset only when at least one of its outgoing edges is a
// member.
struct Circuit {
  GraphPtr graph;
  std::vector<uint8_t> member;                    // size num_edges
  std::map<int, std::vector<int>> neuron_subsets; // node index -> sorted ids

  static Circuit empty(GraphPtr g) {
    Circuit c;
    c.graph = std::move(g);
    c.member.assign(static_cast<size_t>(c.graph->num_edges()), 0);
    return c;
  }

  static Circuit full(GraphPtr g) {
    Circuit c = empty(std::move(g));
    std::fill(c.member.begin(), c.member.end(), 1);
    return c;
  }

  static Circuit of_edges(GraphPtr g, const std::vector<int>& edge_indices) {
    Circuit c = empty(std::move(g));
    for (int e : edge_indices) {
      require(e >= 0 && e < c.graph->num_edges(),
              "Circuit: edge index " + std::to_string(e) + " out of range");
      c.member[static_cast<size_t>(e)] = 1;
    }
    return c;
  }

  bool contains(int e) const { return member[static_cast<size_t>(e)] != 0; }

  int64_t count_edges() const {
    int64_t n = 0;
    for (uint8_t m : member) n += m;
    return n;
  }

  std::vector<int> member_edges() const {
    std::vector<int> out;
    for (size_t e = 0; e < member.size(); ++e) {
      if (member[e]) out.push_back(static_cast<int>(e));
    }
    return out;
  }

  void validate() const {
    require(graph != nullptr, "Circuit: no graph bound");
    require(member.size() == static_cast<size_t>(graph->num_edges()),
            "Circuit: membership extent " + std::to_string(member.size()) +
                " vs " + std::to_string(graph->num_edges()) + " edges");
    for (const auto& [node, subset] : neuron_subsets) {
      require(node >= 0 && node < graph->num_nodes(),
              "Circuit: neuron subset on unknown node index " + std::to_string(node));
      bool any_member_out = false;
      for (int e : graph->outgoing(node)) any_member_out |= contains(e);
      require(any_member_out, "Circuit: neuron subset on node " + graph->node(node).name() +
                                  " which has no member outgoing edge");
      require(!subset.empty(), "Circuit: empty neuron subset on " + graph->node(node).name());
      int prev = 0;
      for (int idx : subset) {
        require(idx >= 1 && idx <= graph->d_model(),
                "Circuit: neuron index " + std::to_string(idx) + " on node " +
                    graph->node(node).name() + " outside 1.." +
                    std::to_string(graph->d_model()));
        require(idx > prev, "Circuit: neuron subset not sorted/unique on " +
                                graph->node(node).name());
        prev = idx;
      }
    }
  }

  bool operator==(const Circuit& o) const {
    return member == o.member && neuron_subsets == o.neuron_subsets;
  }
};

// Weighted edge count: each member edge (u -> v) contributes
// |selected neurons of u| / d_model (1 when u carries no subset), so a
// circuit selecting half of a source node's units pays half per outgoing
// member edge, and a circuit with no subsets degenerates to the plain count.
inline double weighted_edge_count(const Circuit& c) {
  c.validate();
  double total = 0.0;
  double d = static_cast<double>(c.graph->d_model());
  for (size_t e = 0; e < c.member.size(); ++e) {
    if (!c.member[e]) continue;
    int u = c.graph->edge(static_cast<int>(e)).src;
    auto it = c.neuron_subsets.find(u);
    if (it == c.neuron_subsets.end()) {
      total += 1.0;
    } else {
      total += static_cast<double>(it->second.size()) / d;
    }
  }
  return total;
}

// ===== circuit series =======================================================

// Circuits indexed by an edge-fraction threshold grid. Series derived from a
// single score set are nested and size-compliant (|C_k| <= floor(k * E));
// fixed series (the same circuit at every k, used to evaluate a given
// circuit's metric curve) skip the size rule.
struct CircuitSeries {
  std::vector<double> ks;
  std::vector<Circuit> circuits;
  bool derived_from_scores = false;

  size_t size() const { return ks.size(); }
};

enum class RankBy { absolute, signed_value };

// Ranks edges by |score| (or signed score) descending, ties by canonical edge
// order, and takes floor(k * E) edges for each k in the grid.
inline CircuitSeries circuits_from_scores(const ScoreSet& scores,
                                          const std::vector<double>& grid = default_threshold_grid(),
                                          RankBy rank = RankBy::absolute) {
  require(scores.graph != nullptr, "circuits_from_scores: unbound score set");
  require(!grid.empty(), "circuits_from_scores: empty threshold grid");
  for (double k : grid) {
    require(k > 0.0 && k <= 1.0,
            "circuits_from_scores: threshold " + str(k) + " outside (0, 1]");
  }
  std::vector<double> sorted_grid = grid;
  std::sort(sorted_grid.begin(), sorted_grid.end());

  int E = scores.graph->num_edges();
  std::vector<int> order(static_cast<size_t>(E));
  for (int e = 0; e < E; ++e) order[static_cast<size_t>(e)] = e;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    double va = scores.edge_values[static_cast<size_t>(a)];
    double vb = scores.edge_values[static_cast<size_t>(b)];
    if (rank == RankBy::absolute) {
      va = std::abs(va);
      vb = std::abs(vb);
    }
    return va > vb;  // stable sort keeps canonical order among ties
  });

  CircuitSeries series;
  series.derived_from_scores = true;
  for (double k : sorted_grid) {
    auto budget = static_cast<int64_t>(std::floor(k * static_cast<double>(E)));
    Circuit c = Circuit::empty(scores.graph);
    for (int64_t i = 0; i < budget; ++i) {
      c.member[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
    }
    series.ks.push_back(k);
    series.circuits.push_back(std::move(c));
  }
  return series;
}

// The same circuit at every grid point (its own metric curve).
inline CircuitSeries fixed_circuit_series(const Circuit& c,
                                          const std::vector<double>& grid = default_threshold_grid()) {
  c.validate();
  CircuitSeries series;
  series.derived_from_scores = false;
  std::vector<double> sorted_grid = grid;
  std::sort(sorted_grid.begin(), sorted_grid.end());
  for (double k : sorted_grid) {
    series.ks.push_back(k);
    series.circuits.push_back(c);
  }
  return series;
}

// Checks the structural invariants of a score-derived series: thresholds
// ascending, nesting, and the size rule.
inline void validate_series(const CircuitSeries& s) {
  require(s.ks.size() == s.circuits.size(), "CircuitSeries: ragged series");
  require(!s.ks.empty(), "CircuitSeries: empty series");
  for (size_t i = 0; i + 1 < s.ks.size(); ++i) {
    require(s.ks[i] < s.ks[i + 1], "CircuitSeries: thresholds not strictly ascending");
  }
  if (!s.derived_from_scores) return;
  int E = s.circuits[0].graph->num_edges();
  for (size_t i = 0; i < s.ks.size(); ++i) {
    auto budget = static_cast<int64_t>(std::floor(s.ks[i] * static_cast<double>(E)));
    require(s.circuits[i].count_edges() <= budget,
            "CircuitSeries: circuit at k=" + str(s.ks[i]) + " has " +
                std::to_string(s.circuits[i].count_edges()) + " edges, budget " +
                std::to_string(budget));
    if (i + 1 < s.ks.size()) {
      for (size_t e = 0; e < s.circuits[i].member.size(); ++e) {
        require(!s.circuits[i].member[e] || s.circuits[i + 1].member[e],
                "CircuitSeries: circuits not nested between k=" + str(s.ks[i]) +
                    " and k=" + str(s.ks[i + 1]));
      }
    }
  }
}

// ===== file formats =========================================================
//
// Score file (one per model/task in an importance submission):
//   { "format_version": ..., "type": "scores", "edges": {edge_name: float},
//     optional "nodes": {node_name: float}, optional "neurons",
//     optional "provenance" }
// Membership file (one per threshold in a binary submission):
//   { "format_version": ..., "type": "membership", "k": float,
//     "edges": {edge_name: bool}, optional "neurons": {node_name: [ids]} }

inline nlohmann::json circuit_to_json(const Circuit& c, double k) {
  c.validate();
  nlohmann::json j;
  j["format_version"] = kCircuitFormatVersion;
  j["type"] = "membership";
  j["k"] = k;
  nlohmann::json edges = nlohmann::json::object();
  for (int e = 0; e < c.graph->num_edges(); ++e) {
    edges[c.graph->edge_name(e)] = c.contains(e);
  }
  j["edges"] = std::move(edges);
  if (!c.neuron_subsets.empty()) {
    nlohmann::json neurons = nlohmann::json::object();
    for (const auto& [node, subset] : c.neuron_subsets) {
      neurons[c.graph->node(node).name()] = subset;
    }
    j["neurons"] = std::move(neurons);
  }
  return j;
}

inline nlohmann::json scores_to_json(const ScoreSet& s) {
  nlohmann::json j;
  j["format_version"] = kCircuitFormatVersion;
  j["type"] = "scores";
  nlohmann::json edges = nlohmann::json::object();
  for (int e = 0; e < s.graph->num_edges(); ++e) {
    if (s.edge_present[static_cast<size_t>(e)]) {
      edges[s.graph->edge_name(e)] = s.edge_values[static_cast<size_t>(e)];
    }
  }
  j["edges"] = std::move(edges);
  if (s.granularity == Granularity::node) {
    nlohmann::json nodes = nlohmann::json::object();
    for (const auto& [node, v] : s.node_values) {
      nodes[s.graph->node(node).name()] = v;
    }
    j["nodes"] = std::move(nodes);
  }
  if (!s.provenance.empty()) {
    j["provenance"] = s.provenance;
  }
  return j;
}

struct ParsedCircuitFile {
  bool is_scores = false;
  double k = 0.0;  // membership files only
  Circuit circuit; // membership files
  ScoreSet scores; // score files
};

inline ParsedCircuitFile circuit_from_json(const nlohmann::json& j, GraphPtr graph) {
  require(j.is_object(), "circuit file: top level must be an object");
  require(j.contains("format_version") && j["format_version"].is_string(),
          "circuit file: missing format_version");
  std::string version = j["format_version"].get<std::string>();
  require(version == kCircuitFormatVersion,
          "circuit file: unsupported format_version \"" + version + "\" (expected " +
              std::string(kCircuitFormatVersion) + ")");
  require(j.contains("type") && j["type"].is_string(), "circuit file: missing type");
  std::string type = j["type"].get<std::string>();
  require(j.contains("edges") && j["edges"].is_object(), "circuit file: missing edges map");

  ParsedCircuitFile out;
  if (type == "scores") {
    out.is_scores = true;
    out.scores = ScoreSet::edges_of(graph);
    for (const auto& [key, value] : j["edges"].items()) {
      int e = graph->edge_index_by_name(key);  // throws listing the key
      require(value.is_number(), "circuit file: score for \"" + key + "\" is not a number" +
                                     (value.is_boolean() ? " (boolean found in a scores file)" : ""));
      out.scores.set(e, value.get<double>());
    }
    if (j.contains("nodes")) {
      require(j["nodes"].is_object(), "circuit file: nodes must be a map");
      out.scores.granularity = Granularity::node;
      for (const auto& [key, value] : j["nodes"].items()) {
        int n = graph->node_index_by_name(key);
        require(value.is_number(), "circuit file: node score for \"" + key + "\" is not a number");
        out.scores.node_values[n] = value.get<double>();
      }
    }
    if (j.contains("provenance") && j["provenance"].is_object()) {
      for (const auto& [key, value] : j["provenance"].items()) {
        out.scores.provenance[key] = value.is_string() ? value.get<std::string>() : value.dump();
      }
    }
  } else if (type == "membership") {
    out.circuit = Circuit::empty(graph);
    require(j.contains("k") && j["k"].is_number(), "circuit file: membership file missing k");
    out.k = j["k"].get<double>();
    for (const auto& [key, value] : j["edges"].items()) {
      int e = graph->edge_index_by_name(key);
      require(value.is_boolean(), "circuit file: membership for \"" + key + "\" is not a boolean" +
                                      (value.is_number() ? " (number found in a membership file)" : ""));
      out.circuit.member[static_cast<size_t>(e)] = value.get<bool>() ? 1 : 0;
    }
    if (j.contains("neurons")) {
      require(j["neurons"].is_object(), "circuit file: neurons must be a map");
      for (const auto& [key, value] : j["neurons"].items()) {
        int n = graph->node_index_by_name(key);
        require(value.is_array(), "circuit file: neuron subset for \"" + key + "\" must be an array");
        std::vector<int> subset;
        for (const auto& v : value) {
          require(v.is_number_integer(), "circuit file: neuron index for \"" + key + "\" not an integer");
          subset.push_back(v.get<int>());
        }
        out.circuit.neuron_subsets[n] = std::move(subset);
      }
    }
    out.circuit.validate();  // catches neuron indices outside 1..d_model
  } else {
    throw ValidationError("circuit file: unknown type \"" + type + "\"");
  }
  return out;
}

}  // namespace circuitlab
