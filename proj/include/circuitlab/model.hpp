#pragma once

// Decoder-only toy transformer with a decomposed residual stream, plus the
// single forward engine that powers every evaluation mode.
//
// Residual decomposition: each writer node (embed, head(l,h), mlp(l)) emits a
// contribution tensor [T, d_model]; a reader's input is the sum of messages
// on its incoming edges, assembled in canonical writer order. In an
// unmodified run every message equals the writer's contribution, so the
// assembled input equals the conventional residual stream bit-for-bit.
//
// Edge semantics: there is a single edge per (writer, attention head) pair,
// and its message feeds the head's entire computation — value projection and
// query/key reads alike — through the head's assembled input. This is what
// makes the patched-forward contract hold structurally: replacing every
// message with another run's contributions makes every reader recompute from
// exactly that run's inputs, so the logits match that run's logits. Splitting
// q/k/v into separately patchable edges is the reserved qk_edges extension.
//
// Evaluation modes, all through the same assembly code so that "no
// modification" degenerates bit-exactly to the plain forward:
//  * patches: per-(edge, position) message replacement from a PatchPlan;
//  * gates: per-edge convex mixing  g*live + (1-g)*ablation  with scalar
//    gate tensors (differentiable; powers pruning-based scoring and
//    activation-path integration);
//  * hooks: capture/replace of a residual-stream row or a head-output row
//    at a (layer, position) site (powers causal-variable interventions);
//  * embed override: replaces the embedding contribution (powers
//    input-interpolation gradients).

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "circuitlab/common.hpp"
#include "circuitlab/graph.hpp"
#include "circuitlab/tensor.hpp"
#include "json.hpp"

namespace circuitlab {

// ===== config ===============================================================

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 32;
  int d_head = 8;
  int d_mlp = 64;
  int vocab_size = 64;
  int max_seq_len = 16;
  double norm_eps = 1e-5;
  // Analytic variants. identity_norm replaces every normalization with the
  // identity map; identity_gelu replaces the MLP activation; with
  // fixed_uniform_attention heads attend uniformly over the causal prefix
  // regardless of q/k. All three together make the network exactly linear in
  // its contributions (affine with constant attention), which is what the
  // gradient-vs-exact-patching oracle requires.
  bool identity_norm = false;
  bool identity_gelu = false;
  bool fixed_uniform_attention = false;
  // Reserved extension point: expose q/k reads as graph edges. Not
  // implemented; must stay false.
  bool qk_edges = false;
  uint64_t init_seed = 0;
  std::string name = "toy";

  bool linearized() const {
    return identity_norm && identity_gelu && fixed_uniform_attention;
  }

  void validate() const {
    require(n_layers >= 1 && n_layers <= 4, "ModelConfig: n_layers must be 1..4");
    require(n_heads >= 1 && n_heads <= 16, "ModelConfig: n_heads must be 1..16");
    require(d_model >= 1 && d_model <= 128, "ModelConfig: d_model must be 1..128");
    require(d_head >= 1 && n_heads * d_head == d_model,
            "ModelConfig: n_heads * d_head must equal d_model (got " +
                std::to_string(n_heads) + " * " + std::to_string(d_head) + " vs " +
                std::to_string(d_model) + ")");
    require(d_mlp >= 1 && d_mlp <= 512, "ModelConfig: d_mlp must be 1..512");
    require(vocab_size >= 2 && vocab_size <= 512, "ModelConfig: vocab_size must be 2..512");
    require(max_seq_len >= 1 && max_seq_len <= 32, "ModelConfig: max_seq_len must be 1..32");
    require(norm_eps > 0, "ModelConfig: norm_eps must be positive");
    require(!qk_edges, "ModelConfig: qk_edges is a reserved flag and must stay false");
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["n_layers"] = n_layers;
    j["n_heads"] = n_heads;
    j["d_model"] = d_model;
    j["d_head"] = d_head;
    j["d_mlp"] = d_mlp;
    j["vocab_size"] = vocab_size;
    j["max_seq_len"] = max_seq_len;
    j["norm_eps"] = norm_eps;
    j["identity_norm"] = identity_norm;
    j["identity_gelu"] = identity_gelu;
    j["fixed_uniform_attention"] = fixed_uniform_attention;
    j["qk_edges"] = qk_edges;
    j["init_seed"] = init_seed;
    j["name"] = name;
    return j;
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_head = j.at("d_head").get<int>();
    c.d_mlp = j.at("d_mlp").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.norm_eps = j.at("norm_eps").get<double>();
    c.identity_norm = j.value("identity_norm", false);
    c.identity_gelu = j.value("identity_gelu", false);
    c.fixed_uniform_attention = j.value("fixed_uniform_attention", false);
    c.qk_edges = j.value("qk_edges", false);
    c.init_seed = j.value("init_seed", static_cast<uint64_t>(0));
    c.name = j.value("name", std::string("toy"));
    c.validate();
    return c;
  }
};

// ===== parameters ===========================================================

struct LayerParams {
  std::vector<Tensor> wq, wk, wv;  // per head [d_model, d_head]
  std::vector<Tensor> wo;         // per head [d_head, d_model]
  Tensor ln1_g, ln1_b;            // [d_model]
  Tensor w_in, b_in;              // [d_model, d_mlp], [d_mlp]
  Tensor w_out, b_out;            // [d_mlp, d_model], [d_model]
  Tensor ln2_g, ln2_b;            // [d_model]
};

struct Model {
  ModelConfig config;
  Tensor tok_emb;  // [vocab, d_model]; also the tied unembedding
  Tensor pos_emb;  // [max_seq_len, d_model]
  std::vector<LayerParams> layers;
  Tensor lnf_g, lnf_b;  // final norm affine
  GraphPtr graph;

  static Model init(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.config = cfg;
    m.graph = make_graph(cfg.n_layers, cfg.n_heads, cfg.d_model);
    Rng rng(cfg.init_seed);
    auto randn = [&](Shape shape, double sigma) {
      Tensor t = Tensor::zeros(std::move(shape));
      for (double& v : t.data()) v = rng.normal() * sigma;
      return t;
    };
    m.tok_emb = randn({cfg.vocab_size, cfg.d_model}, 0.02);
    m.pos_emb = randn({cfg.max_seq_len, cfg.d_model}, 0.02);
    for (int l = 0; l < cfg.n_layers; ++l) {
      LayerParams lp;
      for (int h = 0; h < cfg.n_heads; ++h) {
        lp.wq.push_back(randn({cfg.d_model, cfg.d_head}, 0.02));
        lp.wk.push_back(randn({cfg.d_model, cfg.d_head}, 0.02));
        lp.wv.push_back(randn({cfg.d_model, cfg.d_head}, 0.02));
        lp.wo.push_back(randn({cfg.d_head, cfg.d_model}, 0.02));
      }
      lp.ln1_g = Tensor::full({cfg.d_model}, 1.0);
      lp.ln1_b = Tensor::zeros({cfg.d_model});
      lp.w_in = randn({cfg.d_model, cfg.d_mlp}, 0.02);
      lp.b_in = Tensor::zeros({cfg.d_mlp});
      lp.w_out = randn({cfg.d_mlp, cfg.d_model}, 0.02);
      lp.b_out = Tensor::zeros({cfg.d_model});
      lp.ln2_g = Tensor::full({cfg.d_model}, 1.0);
      lp.ln2_b = Tensor::zeros({cfg.d_model});
      m.layers.push_back(std::move(lp));
    }
    m.lnf_g = Tensor::full({cfg.d_model}, 1.0);
    m.lnf_b = Tensor::zeros({cfg.d_model});
    return m;
  }

  // Parameter traversal order is part of the determinism contract
  // (optimizers walk it sequentially).
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> ps{&tok_emb, &pos_emb};
    for (auto& lp : layers) {
      ps.push_back(&lp.ln1_g);
      ps.push_back(&lp.ln1_b);
      for (auto& t : lp.wq) ps.push_back(&t);
      for (auto& t : lp.wk) ps.push_back(&t);
      for (auto& t : lp.wv) ps.push_back(&t);
      for (auto& t : lp.wo) ps.push_back(&t);
      ps.push_back(&lp.ln2_g);
      ps.push_back(&lp.ln2_b);
      ps.push_back(&lp.w_in);
      ps.push_back(&lp.b_in);
      ps.push_back(&lp.w_out);
      ps.push_back(&lp.b_out);
    }
    ps.push_back(&lnf_g);
    ps.push_back(&lnf_b);
    return ps;
  }

  std::vector<const Tensor*> parameters() const {
    auto* self = const_cast<Model*>(this);
    std::vector<const Tensor*> out;
    for (Tensor* t : self->parameters()) out.push_back(t);
    return out;
  }

  void set_requires_grad(bool v) {
    for (Tensor* t : parameters()) t->set_requires_grad(v);
  }

  Model clone() const {
    Model copy;
    copy.config = config;
    copy.graph = graph;
    auto deep = [](const Tensor& t) { return Tensor::from(t.shape(), t.data()); };
    copy.tok_emb = deep(tok_emb);
    copy.pos_emb = deep(pos_emb);
    for (const auto& lp : layers) {
      LayerParams c;
      for (const auto& t : lp.wq) c.wq.push_back(deep(t));
      for (const auto& t : lp.wk) c.wk.push_back(deep(t));
      for (const auto& t : lp.wv) c.wv.push_back(deep(t));
      for (const auto& t : lp.wo) c.wo.push_back(deep(t));
      c.ln1_g = deep(lp.ln1_g);
      c.ln1_b = deep(lp.ln1_b);
      c.w_in = deep(lp.w_in);
      c.b_in = deep(lp.b_in);
      c.w_out = deep(lp.w_out);
      c.b_out = deep(lp.b_out);
      c.ln2_g = deep(lp.ln2_g);
      c.ln2_b = deep(lp.ln2_b);
      copy.layers.push_back(std::move(c));
    }
    copy.lnf_g = deep(lnf_g);
    copy.lnf_b = deep(lnf_b);
    return copy;
  }

  uint64_t fingerprint() const {
    uint64_t h = fnv1a64(config.to_json().dump());
    for (const Tensor* t : parameters()) h = fnv1a64(t->data(), h);
    return h;
  }
};

// ===== caches ===============================================================

// Frozen numeric snapshot of one run. Contributions are stored for every
// node and every position (the logits node, which writes nothing forward,
// stores the assembled final residual it reads, keeping the entry count at
// exactly num_nodes * seq_len). Reader inputs are stored before and after
// their normalization.
struct ActivationCache {
  int seq_len = 0;
  int d_model = 0;
  std::vector<std::vector<double>> contributions;    // per node, [T * d_model]
  std::vector<std::vector<double>> prenorm_inputs;   // readers only
  std::vector<std::vector<double>> postnorm_inputs;  // readers only
  std::vector<double> logits;                        // [T * vocab]

  size_t contribution_entries() const {
    size_t n = 0;
    for (const auto& c : contributions) n += c.size() / static_cast<size_t>(d_model);
    return n;
  }

  const double* contribution_row(int node, int pos) const {
    return &contributions[static_cast<size_t>(node)]
                         [static_cast<size_t>(pos) * static_cast<size_t>(d_model)];
  }

  std::vector<double> contribution_vec(int node, int pos) const {
    const double* p = contribution_row(node, pos);
    return std::vector<double>(p, p + d_model);
  }
};

// ===== patch plans ==========================================================

enum class AblationKind { zero, mean, counterfactual };

inline const char* ablation_kind_name(AblationKind k) {
  switch (k) {
    case AblationKind::zero: return "zero";
    case AblationKind::mean: return "mean";
    case AblationKind::counterfactual: return "counterfactual";
  }
  return "?";
}

// Replacement messages for a set of (edge, position) slots.
struct PatchPlan {
  // edge index -> (position -> replacement vector of extent d_model)
  std::map<int, std::map<int, std::vector<double>>> entries;

  void add(int edge, int pos, std::vector<double> replacement) {
    entries[edge][pos] = std::move(replacement);
  }

  bool empty() const { return entries.empty(); }

  void validate(const ComputationGraph& graph, int seq_len) const {
    for (const auto& [edge, by_pos] : entries) {
      require(edge >= 0 && edge < graph.num_edges(),
              "PatchPlan: edge index " + std::to_string(edge) + " outside 0.." +
                  std::to_string(graph.num_edges() - 1));
      for (const auto& [pos, vec] : by_pos) {
        require(pos >= 0 && pos < seq_len,
                "PatchPlan: position " + std::to_string(pos) + " outside sequence of length " +
                    std::to_string(seq_len) + " on edge " + graph.edge_name(edge));
        require(static_cast<int>(vec.size()) == graph.d_model(),
                "PatchPlan: replacement extent " + std::to_string(vec.size()) + " vs d_model " +
                    std::to_string(graph.d_model()) + " on edge " + graph.edge_name(edge));
        for (double v : vec) {
          if (!std::isfinite(v)) {
            throw NumericError("PatchPlan: non-finite replacement on edge " +
                               graph.edge_name(edge));
          }
        }
      }
    }
  }
};

// Per-node replacement messages used by gate mixing and full-node ablations.
struct AblationMessages {
  int seq_len = 0;
  int d_model = 0;
  std::vector<std::vector<double>> by_node;  // [T * d_model] per node

  static AblationMessages zeros(const ComputationGraph& g, int seq_len) {
    AblationMessages a;
    a.seq_len = seq_len;
    a.d_model = g.d_model();
    a.by_node.assign(static_cast<size_t>(g.num_nodes()),
                     std::vector<double>(static_cast<size_t>(seq_len) * g.d_model(), 0.0));
    return a;
  }

  static AblationMessages from_cache(const ActivationCache& cache) {
    AblationMessages a;
    a.seq_len = cache.seq_len;
    a.d_model = cache.d_model;
    a.by_node = cache.contributions;
    return a;
  }
};

// Builds the plan that replaces every listed edge at every position with the
// message from `source`.
inline PatchPlan plan_patch_edges(const ComputationGraph& graph, const std::vector<int>& edges,
                                  const AblationMessages& source) {
  PatchPlan plan;
  for (int e : edges) {
    require(e >= 0 && e < graph.num_edges(), "plan_patch_edges: bad edge index");
    int u = graph.edge(e).src;
    for (int pos = 0; pos < source.seq_len; ++pos) {
      const double* row = &source.by_node[static_cast<size_t>(u)]
                                         [static_cast<size_t>(pos) * source.d_model];
      plan.add(e, pos, std::vector<double>(row, row + source.d_model));
    }
  }
  return plan;
}

// The complement plan used for circuit evaluation: every NON-member edge is
// replaced, member edges run live.
inline PatchPlan plan_patch_complement(const Circuit& circuit, const AblationMessages& source) {
  std::vector<int> edges;
  for (int e = 0; e < circuit.graph->num_edges(); ++e) {
    if (!circuit.contains(e)) edges.push_back(e);
  }
  return plan_patch_edges(*circuit.graph, edges, source);
}

// ===== gates ================================================================

// Per-edge convex mixing of live and ablation messages:
//   msg(e) = gate_e * live + (1 - gate_e) * ablation.
// Gates are scalar tensors so gradients flow into them when training
// pruning masks; constant gates implement interpolated-activation forwards.
struct GateSpec {
  std::vector<Tensor> edge_gates;  // size num_edges, each shape [1]
  const AblationMessages* ablation = nullptr;
};

// ===== intervention sites ===================================================

enum class SiteComponent { residual, head_output };

// residual: the stream as read by layer `layer` (layer == n_layers
// addresses the stream entering the logits reader).
// head_output: the contribution of head(layer, head) before fan-out.
struct InterventionSite {
  SiteComponent component = SiteComponent::residual;
  int layer = 0;
  int head = 0;

  std::string name() const {
    if (component == SiteComponent::residual) {
      return "resid." + std::to_string(layer);
    }
    return "head_out." + std::to_string(layer) + "." + std::to_string(head);
  }
};

struct SiteHook {
  InterventionSite site;
  int position = 0;
  // Maps the captured row [1, d_model] to its replacement; null = capture only.
  std::function<Tensor(const Tensor&)> transform;
  Tensor captured;  // filled by the engine (pre-transform value)
};

// ===== forward engine =======================================================

struct ForwardOptions {
  const PatchPlan* patches = nullptr;
  const GateSpec* gates = nullptr;
  std::vector<SiteHook>* hooks = nullptr;
  const Tensor* embed_override = nullptr;  // [T, d_model]
  bool with_cache = false;
  bool keep_tensors = false;  // retain contribution/input tensors for gradient reads
  // Marks the embedding contribution as a gradient root so that activation
  // gradients (∂metric/∂input of each reader) can be read off the tape even
  // when all parameters are frozen.
  bool grad_inputs = false;
};

struct ForwardResult {
  Tensor logits;  // [T, vocab_size]
  ActivationCache cache;
  // Populated when keep_tensors: per node, the contribution tensor (logits
  // slot holds the assembled final residual); per reader, the value-path
  // input sum (undefined Tensor for embed).
  std::vector<Tensor> contributions;
  std::vector<Tensor> value_inputs;
};

namespace detail {

inline Tensor norm_affine(const Tensor& x, const Tensor& g, const Tensor& b, double eps,
                          bool identity) {
  if (identity) return x;
  return add(mul(layernorm(x, eps), g), b);
}

// Constant causal mask: 0 on/below the diagonal, -1e30 above.
inline Tensor causal_mask(int T) {
  Tensor m = Tensor::zeros({T, T});
  for (int i = 0; i < T; ++i) {
    for (int j = i + 1; j < T; ++j) m.at(i, j) = -1e30;
  }
  return m;
}

// Constant row-uniform causal attention probabilities.
inline Tensor uniform_causal_probs(int T) {
  Tensor p = Tensor::zeros({T, T});
  for (int i = 0; i < T; ++i) {
    for (int j = 0; j <= i; ++j) p.at(i, j) = 1.0 / static_cast<double>(i + 1);
  }
  return p;
}

// Column indicator e_pos [T, 1] for scattering one row's delta.
inline Tensor row_indicator(int T, int pos) {
  Tensor e = Tensor::zeros({T, 1});
  e.at(pos, 0) = 1.0;
  return e;
}

}  // namespace detail

inline ForwardResult run_forward(const Model& model, const std::vector<int>& tokens,
                                 const ForwardOptions& opt = {}) {
  const ModelConfig& cfg = model.config;
  const ComputationGraph& graph = *model.graph;
  int T = static_cast<int>(tokens.size());
  require(T >= 1, "run_forward: empty token sequence");
  require(T <= cfg.max_seq_len, "run_forward: sequence length " + std::to_string(T) +
                                    " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  for (size_t i = 0; i < tokens.size(); ++i) {
    require(tokens[i] >= 0 && tokens[i] < cfg.vocab_size,
            "run_forward: token " + std::to_string(tokens[i]) + " at position " +
                std::to_string(i) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
  }
  if (opt.patches) opt.patches->validate(graph, T);
  if (opt.gates) {
    require(opt.gates->edge_gates.size() == static_cast<size_t>(graph.num_edges()),
            "run_forward: gate spec has " + std::to_string(opt.gates->edge_gates.size()) +
                " gates for " + std::to_string(graph.num_edges()) + " edges");
    require(opt.gates->ablation != nullptr, "run_forward: gate spec without ablation messages");
    require(opt.gates->ablation->seq_len == T, "run_forward: gate ablation seq_len mismatch");
  }
  if (opt.hooks) {
    for (const SiteHook& h : *opt.hooks) {
      require(h.position >= 0 && h.position < T,
              "run_forward: hook position " + std::to_string(h.position) +
                  " outside sequence of length " + std::to_string(T));
      bool layer_ok = h.site.component == SiteComponent::residual
                          ? (h.site.layer >= 0 && h.site.layer <= cfg.n_layers)
                          : (h.site.layer >= 0 && h.site.layer < cfg.n_layers &&
                             h.site.head >= 0 && h.site.head < cfg.n_heads);
      require(layer_ok, "run_forward: hook site " + h.site.name() + " outside model");
    }
  }

  ForwardResult result;
  int n_nodes = graph.num_nodes();
  std::vector<Tensor> contribs(static_cast<size_t>(n_nodes));
  std::vector<Tensor> value_inputs(static_cast<size_t>(n_nodes));
  std::vector<Tensor> postnorm(static_cast<size_t>(n_nodes));

  // Embedding contribution.
  Tensor emb;
  if (opt.embed_override) {
    require(opt.embed_override->rank() == 2 && opt.embed_override->dim(0) == T &&
                opt.embed_override->dim(1) == cfg.d_model,
            "run_forward: embed override shape " + shape_str(opt.embed_override->shape()) +
                " vs [" + std::to_string(T) + "," + std::to_string(cfg.d_model) + "]");
    emb = *opt.embed_override;
  } else {
    emb = add(embed_lookup(model.tok_emb, tokens), slice(model.pos_emb, 0, 0, T));
  }
  if (opt.grad_inputs) emb.set_requires_grad(true);
  contribs[static_cast<size_t>(graph.embed_node())] = emb;

  // Residual-row rewrites activated so far; each applies to every reader at
  // or above its activation layer (both live and value-path inputs).
  std::vector<Tensor> active_deltas;

  auto apply_hooks = [&](SiteComponent component, int layer, int head, Tensor current,
                         bool* changed) -> Tensor {
    if (!opt.hooks) return current;
    for (SiteHook& h : *opt.hooks) {
      if (h.site.component != component || h.site.layer != layer) continue;
      if (component == SiteComponent::head_output && h.site.head != head) continue;
      Tensor row = slice(current, 0, h.position, 1);  // [1, d_model]
      h.captured = row;
      if (h.transform) {
        Tensor new_row = h.transform(row);
        require(new_row.defined() && new_row.rank() == 2 && new_row.dim(0) == 1 &&
                    new_row.dim(1) == cfg.d_model,
                "run_forward: hook transform must return a [1, d_model] row");
        Tensor delta = sub(new_row, row);
        Tensor delta_full = matmul(detail::row_indicator(T, h.position), delta);
        if (component == SiteComponent::residual) {
          active_deltas.push_back(delta_full);
        }
        current = add(current, delta_full);
        if (changed) *changed = true;
      }
    }
    return current;
  };

  // Message on edge e given the writer's live contribution.
  auto edge_message = [&](int e, const Tensor& live) -> Tensor {
    Tensor msg = live;
    if (opt.patches) {
      auto it = opt.patches->entries.find(e);
      if (it != opt.patches->entries.end()) {
        Tensor keep = Tensor::full({T, cfg.d_model}, 1.0);
        Tensor repl = Tensor::zeros({T, cfg.d_model});
        for (const auto& [pos, vec] : it->second) {
          for (int j = 0; j < cfg.d_model; ++j) {
            keep.at(pos, j) = 0.0;
            repl.at(pos, j) = vec[static_cast<size_t>(j)];
          }
        }
        msg = add(mul(msg, keep), repl);
      }
    }
    if (opt.gates) {
      int u = graph.edge(e).src;
      const Tensor& g = opt.gates->edge_gates[static_cast<size_t>(e)];
      require(g.defined() && g.numel() == 1, "run_forward: gate on edge " +
                                                 graph.edge_name(e) + " must be scalar");
      Tensor abl = Tensor::from({T, cfg.d_model},
                                opt.gates->ablation->by_node[static_cast<size_t>(u)]);
      Tensor one_minus = add(scale(g, -1.0), Tensor::scalar(1.0));
      msg = add(mul(msg, g), mul(abl, one_minus));
    }
    return msg;
  };

  // Sum of incoming messages in canonical writer order, then active rewrites.
  auto assemble_input = [&](int reader) -> Tensor {
    Tensor x;
    int terms = 0;
    for (int e : graph.incoming(reader)) {
      Tensor msg = edge_message(e, contribs[static_cast<size_t>(graph.edge(e).src)]);
      x = x.defined() ? add(x, msg) : msg;
      ++terms;
    }
    for (const Tensor& delta : active_deltas) {
      x = add(x, delta);
      ++terms;
    }
    // A lone untransformed message would alias the writer's contribution
    // tensor, making this reader's input gradient indistinguishable from the
    // writer's total gradient across all readers. Multiplying by 1.0 is
    // bitwise-exact on values and pass-through for gradients, but gives the
    // reader a private node whose gradient is its own.
    if (terms == 1) x = scale(x, 1.0);
    return x;
  };

  // The canonical residual stream (sum of contributions in writer order),
  // maintained for residual-site hook capture. Reader inputs are assembled
  // per reader from their own incoming messages.
  Tensor live = emb;
  bool live_dummy = false;
  live = apply_hooks(SiteComponent::residual, 0, 0, live, &live_dummy);

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& lp = model.layers[static_cast<size_t>(l)];
    std::vector<Tensor> head_outs;
    for (int h = 0; h < cfg.n_heads; ++h) {
      int reader = graph.node_index({NodeKind::head, l, h});
      Tensor xv = assemble_input(reader);
      value_inputs[static_cast<size_t>(reader)] = xv;
      Tensor x_in = detail::norm_affine(xv, lp.ln1_g, lp.ln1_b, cfg.norm_eps,
                                        cfg.identity_norm);
      postnorm[static_cast<size_t>(reader)] = x_in;
      Tensor V = matmul(x_in, lp.wv[static_cast<size_t>(h)]);
      Tensor P;
      if (cfg.fixed_uniform_attention) {
        P = detail::uniform_causal_probs(T);
      } else {
        Tensor Q = matmul(x_in, lp.wq[static_cast<size_t>(h)]);
        Tensor K = matmul(x_in, lp.wk[static_cast<size_t>(h)]);
        Tensor scores = scale(matmul(Q, K, /*transpose_b=*/true),
                              1.0 / std::sqrt(static_cast<double>(cfg.d_head)));
        P = softmax(add(scores, detail::causal_mask(T)));
      }
      Tensor out = matmul(matmul(P, V), lp.wo[static_cast<size_t>(h)]);
      out = apply_hooks(SiteComponent::head_output, l, h, out, nullptr);
      contribs[static_cast<size_t>(reader)] = out;
      head_outs.push_back(out);
    }
    for (const Tensor& ho : head_outs) live = add(live, ho);

    int mlp_reader = graph.node_index({NodeKind::mlp, l, 0});
    Tensor xm = assemble_input(mlp_reader);
    value_inputs[static_cast<size_t>(mlp_reader)] = xm;
    Tensor xn = detail::norm_affine(xm, lp.ln2_g, lp.ln2_b, cfg.norm_eps, cfg.identity_norm);
    postnorm[static_cast<size_t>(mlp_reader)] = xn;
    Tensor hmid = add(matmul(xn, lp.w_in), lp.b_in);
    if (!cfg.identity_gelu) hmid = gelu(hmid);
    Tensor mlp_out = add(matmul(hmid, lp.w_out), lp.b_out);
    contribs[static_cast<size_t>(mlp_reader)] = mlp_out;
    live = add(live, mlp_out);
    live = apply_hooks(SiteComponent::residual, l + 1, 0, live, &live_dummy);
  }

  int logits_reader = graph.logits_node();
  Tensor xf = assemble_input(logits_reader);
  value_inputs[static_cast<size_t>(logits_reader)] = xf;
  contribs[static_cast<size_t>(logits_reader)] = xf;  // see ActivationCache docs
  Tensor fin = detail::norm_affine(xf, model.lnf_g, model.lnf_b, cfg.norm_eps,
                                   cfg.identity_norm);
  postnorm[static_cast<size_t>(logits_reader)] = fin;
  result.logits = matmul(fin, model.tok_emb, /*transpose_b=*/true);

  if (opt.with_cache) {
    ActivationCache& cache = result.cache;
    cache.seq_len = T;
    cache.d_model = cfg.d_model;
    cache.contributions.resize(static_cast<size_t>(n_nodes));
    cache.prenorm_inputs.resize(static_cast<size_t>(n_nodes));
    cache.postnorm_inputs.resize(static_cast<size_t>(n_nodes));
    for (int n = 0; n < n_nodes; ++n) {
      cache.contributions[static_cast<size_t>(n)] = contribs[static_cast<size_t>(n)].data();
      if (value_inputs[static_cast<size_t>(n)].defined()) {
        cache.prenorm_inputs[static_cast<size_t>(n)] = value_inputs[static_cast<size_t>(n)].data();
      }
      if (postnorm[static_cast<size_t>(n)].defined()) {
        cache.postnorm_inputs[static_cast<size_t>(n)] = postnorm[static_cast<size_t>(n)].data();
      }
    }
    cache.logits = result.logits.data();
  }
  if (opt.keep_tensors) {
    result.contributions = std::move(contribs);
    result.value_inputs = std::move(value_inputs);
  }
  return result;
}

// ===== conveniences =========================================================

inline Tensor forward_logits(const Model& model, const std::vector<int>& tokens) {
  return run_forward(model, tokens).logits;
}

inline ActivationCache forward_cache(const Model& model, const std::vector<int>& tokens) {
  ForwardOptions opt;
  opt.with_cache = true;
  return run_forward(model, tokens, opt).cache;
}

inline Tensor forward_patched(const Model& model, const std::vector<int>& tokens,
                              const PatchPlan& plan) {
  ForwardOptions opt;
  opt.patches = &plan;
  return run_forward(model, tokens, opt).logits;
}

// Greedy decode at the final position; ties resolve to the lowest token id.
inline int greedy_token(const Tensor& logits) {
  int T = logits.dim(0);
  int vocab = logits.dim(1);
  int best = 0;
  double best_v = logits.at(T - 1, 0);
  for (int j = 1; j < vocab; ++j) {
    if (logits.at(T - 1, j) > best_v) {
      best_v = logits.at(T - 1, j);
      best = j;
    }
  }
  return best;
}

// ===== checkpoints ==========================================================

namespace detail {
inline nlohmann::json tensor_to_json(const Tensor& t) {
  nlohmann::json j;
  j["shape"] = t.shape();
  j["data"] = t.data();
  return j;
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
  Shape shape = j.at("shape").get<Shape>();
  std::vector<double> data = j.at("data").get<std::vector<double>>();
  return Tensor::from(std::move(shape), std::move(data));
}
}  // namespace detail

inline nlohmann::json model_to_json(const Model& m) {
  nlohmann::json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["config"] = m.config.to_json();
  nlohmann::json params = nlohmann::json::object();
  params["tok_emb"] = detail::tensor_to_json(m.tok_emb);
  params["pos_emb"] = detail::tensor_to_json(m.pos_emb);
  for (int l = 0; l < m.config.n_layers; ++l) {
    const LayerParams& lp = m.layers[static_cast<size_t>(l)];
    std::string p = "layer." + std::to_string(l) + ".";
    for (int h = 0; h < m.config.n_heads; ++h) {
      std::string hp = p + "head." + std::to_string(h) + ".";
      params[hp + "wq"] = detail::tensor_to_json(lp.wq[static_cast<size_t>(h)]);
      params[hp + "wk"] = detail::tensor_to_json(lp.wk[static_cast<size_t>(h)]);
      params[hp + "wv"] = detail::tensor_to_json(lp.wv[static_cast<size_t>(h)]);
      params[hp + "wo"] = detail::tensor_to_json(lp.wo[static_cast<size_t>(h)]);
    }
    params[p + "ln1_g"] = detail::tensor_to_json(lp.ln1_g);
    params[p + "ln1_b"] = detail::tensor_to_json(lp.ln1_b);
    params[p + "w_in"] = detail::tensor_to_json(lp.w_in);
    params[p + "b_in"] = detail::tensor_to_json(lp.b_in);
    params[p + "w_out"] = detail::tensor_to_json(lp.w_out);
    params[p + "b_out"] = detail::tensor_to_json(lp.b_out);
    params[p + "ln2_g"] = detail::tensor_to_json(lp.ln2_g);
    params[p + "ln2_b"] = detail::tensor_to_json(lp.ln2_b);
  }
  params["lnf_g"] = detail::tensor_to_json(m.lnf_g);
  params["lnf_b"] = detail::tensor_to_json(m.lnf_b);
  j["params"] = std::move(params);
  return j;
}

inline Model model_from_json(const nlohmann::json& j) {
  require(j.is_object() && j.contains("format_version"),
          "checkpoint: missing format_version");
  std::string version = j["format_version"].get<std::string>();
  require(version == kCheckpointFormatVersion,
          "checkpoint: unsupported format_version \"" + version + "\" (expected " +
              std::string(kCheckpointFormatVersion) + ")");
  Model m;
  m.config = ModelConfig::from_json(j.at("config"));
  m.graph = make_graph(m.config.n_layers, m.config.n_heads, m.config.d_model);
  const nlohmann::json& params = j.at("params");
  auto get = [&](const std::string& key, Shape expected) {
    require(params.contains(key), "checkpoint: missing parameter \"" + key + "\"");
    Tensor t = detail::tensor_from_json(params[key]);
    require(t.shape() == expected, "checkpoint: parameter \"" + key + "\" has shape " +
                                       shape_str(t.shape()) + ", expected " +
                                       shape_str(expected));
    return t;
  };
  const ModelConfig& c = m.config;
  m.tok_emb = get("tok_emb", {c.vocab_size, c.d_model});
  m.pos_emb = get("pos_emb", {c.max_seq_len, c.d_model});
  for (int l = 0; l < c.n_layers; ++l) {
    LayerParams lp;
    std::string p = "layer." + std::to_string(l) + ".";
    for (int h = 0; h < c.n_heads; ++h) {
      std::string hp = p + "head." + std::to_string(h) + ".";
      lp.wq.push_back(get(hp + "wq", {c.d_model, c.d_head}));
      lp.wk.push_back(get(hp + "wk", {c.d_model, c.d_head}));
      lp.wv.push_back(get(hp + "wv", {c.d_model, c.d_head}));
      lp.wo.push_back(get(hp + "wo", {c.d_head, c.d_model}));
    }
    lp.ln1_g = get(p + "ln1_g", {c.d_model});
    lp.ln1_b = get(p + "ln1_b", {c.d_model});
    lp.w_in = get(p + "w_in", {c.d_model, c.d_mlp});
    lp.b_in = get(p + "b_in", {c.d_mlp});
    lp.w_out = get(p + "w_out", {c.d_mlp, c.d_model});
    lp.b_out = get(p + "b_out", {c.d_model});
    lp.ln2_g = get(p + "ln2_g", {c.d_model});
    lp.ln2_b = get(p + "ln2_b", {c.d_model});
    m.layers.push_back(std::move(lp));
  }
  m.lnf_g = get("lnf_g", {c.d_model});
  m.lnf_b = get("lnf_b", {c.d_model});
  return m;
}

inline void save_model(const Model& m, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "save_model: cannot open \"" + path + "\" for writing");
  out << model_to_json(m).dump(1);
  out.close();
  require(out.good(), "save_model: failed writing \"" + path + "\"");
}

inline Model load_model(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "load_model: cannot open \"" + path + "\"");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("load_model: \"" + path + "\" is not valid JSON: " + e.what());
  }
  return model_from_json(j);
}

}  // namespace circuitlab
