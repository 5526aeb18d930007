// Hand-wired reference models with known circuits and known causal directions.
//
// Each builder returns a small transformer whose weights are set by hand (no
// training), chosen so that the causal structure is exact by construction:
//
//   * copy_head        — head(0,0) attends to position 0 and copies that
//                        token's embedding into the final position, so the
//                        known circuit is {embed->head(0,0), head(0,0)->logits}
//                        and every other head/MLP has all-zero weights (and
//                        therefore exactly zero causal effect under patching).
//   * planted_direction — a unit vector u in the stream entering layer 1
//                        linearly encodes a binary variable X_Sign; swapping
//                        the u-component between a pair of runs flips the
//                        output token. The axis variant pins u to a standard
//                        basis coordinate so mask-style featurizers can be
//                        checked against the exact coordinate index.
//   * xor_pair         — two directions u1, u2 carry two independent bits and
//                        the output depends on their XOR, computed by a
//                        hand-wired GELU MLP in layer 1. No single direction
//                        in the layer-1 stream determines the answer, which
//                        makes this the stress fixture for linear featurizers.
//
// Every fixture ships with a matching toy task (instances + counterfactuals),
// a dataset, and a high-level causal model, so circuit scoring, attribution,
// and featurizer training can all be exercised against ground truth.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "circuitlab/common.hpp"
#include "circuitlab/graph.hpp"
#include "circuitlab/model.hpp"
#include "circuitlab/tasks.hpp"

namespace circuitlab {

enum class GroundTruthKind {
  copy_head,
  planted_direction,
  planted_direction_axis,
  xor_pair,
};

inline const char* ground_truth_kind_name(GroundTruthKind k) {
  switch (k) {
    case GroundTruthKind::copy_head: return "copy-head";
    case GroundTruthKind::planted_direction: return "planted-direction";
    case GroundTruthKind::planted_direction_axis: return "planted-direction-axis";
    case GroundTruthKind::xor_pair: return "xor-pair";
  }
  throw ValidationError("ground_truth_kind_name: bad kind");
}

inline GroundTruthKind ground_truth_kind_from(const std::string& s) {
  if (s == "copy-head") return GroundTruthKind::copy_head;
  if (s == "planted-direction") return GroundTruthKind::planted_direction;
  if (s == "planted-direction-axis") return GroundTruthKind::planted_direction_axis;
  if (s == "xor-pair") return GroundTruthKind::xor_pair;
  throw ValidationError(
      "unknown ground-truth model kind \"" + s +
      "\"; known kinds: copy-head, planted-direction, planted-direction-axis, xor-pair");
}

struct GroundTruthModel {
  GroundTruthKind kind = GroundTruthKind::copy_head;
  Model model;
  Circuit known_circuit;  // exact edge-level circuit

  // Where the causal variable lives in the model: residual stream index
  // (site_layer = L means "stream entering layer L"; n_layers means the final
  // stream) and token position.
  int site_layer = 0;
  int site_position = 0;
  std::string variable;  // causal-model variable encoded at the site

  // Unit vector along which the variable is linearly encoded, when one exists.
  bool has_direction = false;
  std::vector<double> direction;  // [d_model]

  // Second planted direction for the xor fixture (both bits, no single axis).
  bool has_direction_pair = false;
  std::vector<double> direction_b;  // [d_model]

  DatasetSplit dataset;
  HighLevelCausalModel causal;
};

namespace gtdetail {

inline void zero_all_parameters(Model& m) {
  for (Tensor* p : m.parameters())
    for (double& v : p->data()) v = 0.0;
}

// t[row, :] — write a full row of a rank-2 tensor.
inline void set_row(Tensor& t, int row, const std::vector<double>& vals) {
  require(t.shape().size() == 2, "set_row: rank-2 tensor expected");
  int cols = t.shape()[1];
  require(row >= 0 && row < t.shape()[0], "set_row: row out of range");
  require((int)vals.size() == cols, "set_row: width mismatch");
  for (int c = 0; c < cols; ++c) t.data()[(size_t)row * cols + c] = vals[c];
}

inline void set_entry(Tensor& t, int row, int col, double v) {
  require(t.shape().size() == 2, "set_entry: rank-2 tensor expected");
  int cols = t.shape()[1];
  t.data()[(size_t)row * cols + col] = v;
}

inline std::vector<double> basis(int d, int i, double scale = 1.0) {
  std::vector<double> v((size_t)d, 0.0);
  v[(size_t)i] = scale;
  return v;
}

inline std::vector<double> scaled(const std::vector<double>& v, double s) {
  std::vector<double> out = v;
  for (double& x : out) x *= s;
  return out;
}

inline std::vector<double> vsum(const std::vector<double>& a, const std::vector<double>& b,
                                double sb = 1.0) {
  require(a.size() == b.size(), "vsum: length mismatch");
  std::vector<double> out = a;
  for (size_t i = 0; i < out.size(); ++i) out[i] += sb * b[i];
  return out;
}

// Point every query position at key position `key_pos` with a large positive
// score, independent of token content. Embeddings carry a one-hot position
// block starting at `pos_dim0`, so a weight matrix that reads any position
// coordinate into the same query channel produces a constant query vector,
// and a key matrix that reads only the `key_pos` coordinate produces a key
// that is nonzero at exactly one position. Softmax then concentrates there.
inline void wire_position_attention(Tensor& wq, Tensor& wk, int pos_dim0, int n_positions,
                                    int key_pos, double gain = 8.0) {
  for (int p = 0; p < n_positions; ++p) set_entry(wq, pos_dim0 + p, 0, gain);
  set_entry(wk, pos_dim0 + key_pos, 0, gain);
}

inline void push_instance(DatasetSplit& ds, SplitName s, TaskInstance inst) {
  inst.validate();
  ds.split(s).push_back(std::move(inst));
}

struct SplitSizes {
  int train, validation, public_test, private_test;
};

inline SplitSizes fixture_split_sizes(int n_train) {
  require(n_train >= 4, "ground-truth fixture: need at least 4 training instances");
  int held = std::max(1, n_train / 4);
  return {n_train, held, held, held};
}

}  // namespace gtdetail

// ---------------------------------------------------------------------------
// copy-head fixture
// ---------------------------------------------------------------------------
//
// Task "copy_first": tokens [t0, t1, t2] over an 8-word vocabulary; the answer
// is always t0. The counterfactual replaces t0 with a different word (also
// distinct from t2, keeping the argmax margin clean), so the answer flips.
//
// Model: 1 layer, 2 heads, d_model 16 (dims 0..7 token one-hot, dims 8..15
// position one-hot), identity norm and identity GELU. head(0,0) attends to
// position 0 and writes 5x the attended token's one-hot back into the stream;
// the tied unembedding reads token one-hots, so the final-position argmax is
// the position-0 token. head(0,1) and the MLP have all-zero weights.

inline Vocabulary copy_first_vocabulary() {
  Vocabulary v;
  for (int i = 0; i < 8; ++i) v.add("v" + std::to_string(i));
  return v;
}

namespace gtdetail {

inline TaskInstance make_copy_instance(int t0, int t1, int t2, int t0_cf) {
  require(t0 != t0_cf, "copy fixture: counterfactual must change t0");
  const Vocabulary v = copy_first_vocabulary();
  TaskInstance inst;
  inst.task = "copy_first";
  inst.tokens = {t0, t1, t2};
  inst.answer = t0;
  inst.cf_tokens = {t0_cf, t1, t2};
  inst.cf_answer = t0_cf;
  inst.meta = nlohmann::json::object();
  inst.meta["source_pos"] = 0;
  inst.meta["fillers"] = {v.word(t0), v.word(t1), v.word(t2)};
  return inst;
}

}  // namespace gtdetail

inline HighLevelCausalModel copy_first_causal_model() {
  HighLevelCausalModel m;
  m.task = "copy_first";
  m.variables = {"X_Copy"};
  m.extract = [](const TaskInstance& inst) {
    return std::map<std::string, int>{{"X_Copy", inst.tokens.at(0)}};
  };
  m.derive = nullptr;
  m.output = [](const std::map<std::string, int>& s) { return s.at("X_Copy"); };
  return m;
}

// ---------------------------------------------------------------------------
// planted-direction fixture
// ---------------------------------------------------------------------------
//
// Task "planted_sign": tokens [s, d, q] where s picks the binary variable
// X_Sign (s0 -> 0, s1 -> 1), d is an irrelevant distractor word, and q is a
// fixed query token. Answer: outA when X_Sign = 0, outB when X_Sign = 1. The
// counterfactual flips s (distractor and query unchanged).
//
// Model: 2 layers, 2 heads, d_model 16 (dims 0..8 token one-hot, 9..11
// position one-hot, 12..15 reserved for the planted direction). head(0,0)
// attends to position 0 and writes +2u for s0 / -2u for s1 into the stream;
// layer 1 is all zeros; the unembedding rows for outA/outB are +-2u. The
// stream entering layer 1 at the final position is e_q + e_pos +- 2u, so the
// u-coordinate alone decides the output with logit margin 8.

inline Vocabulary planted_sign_vocabulary() {
  Vocabulary v;
  v.add("s0");
  v.add("s1");
  for (int i = 0; i < 4; ++i) v.add("d" + std::to_string(i));
  v.add("q");
  v.add("outA");
  v.add("outB");
  return v;
}

namespace gtdetail {

inline TaskInstance make_planted_sign_instance(int sign, int distractor) {
  const Vocabulary v = planted_sign_vocabulary();
  require(sign == 0 || sign == 1, "planted fixture: sign must be 0/1");
  require(distractor >= 0 && distractor < 4, "planted fixture: distractor out of range");
  int s_tok = v.id(sign ? "s1" : "s0");
  int s_cf = v.id(sign ? "s0" : "s1");
  int d_tok = v.id("d" + std::to_string(distractor));
  int q_tok = v.id("q");
  int a = v.id("outA"), b = v.id("outB");
  TaskInstance inst;
  inst.task = "planted_sign";
  inst.tokens = {s_tok, d_tok, q_tok};
  inst.answer = sign ? b : a;
  inst.cf_tokens = {s_cf, d_tok, q_tok};
  inst.cf_answer = sign ? a : b;
  inst.meta = nlohmann::json::object();
  inst.meta["sign"] = sign;
  inst.meta["fillers"] = {v.word(s_tok), v.word(d_tok)};
  return inst;
}

}  // namespace gtdetail

inline HighLevelCausalModel planted_sign_causal_model() {
  HighLevelCausalModel m;
  m.task = "planted_sign";
  m.variables = {"X_Sign"};
  m.extract = [](const TaskInstance& inst) {
    static const Vocabulary v = planted_sign_vocabulary();
    return std::map<std::string, int>{{"X_Sign", inst.tokens.at(0) == v.id("s1") ? 1 : 0}};
  };
  m.derive = nullptr;
  m.output = [](const std::map<std::string, int>& s) {
    static const Vocabulary v = planted_sign_vocabulary();
    return s.at("X_Sign") ? v.id("outB") : v.id("outA");
  };
  return m;
}

// ---------------------------------------------------------------------------
// xor fixture
// ---------------------------------------------------------------------------
//
// Task "xor_pair": tokens [p, q, xq] carry two independent bits b1 = [p=p1]
// and b2 = [q=q1]; the answer is xorA when b1 XOR b2 = 1, else xorB. The
// counterfactual flips p when b1 = b2 and flips q otherwise, so it always
// flips the XOR while alternating which input bit moves — no single planted
// direction tracks the answer across the dataset.
//
// Model: 2 layers, 2 heads, d_model 14 (dims 0..6 token one-hot, 7..9
// position one-hot, 10..12 planted u1/u2/u3). head(0,0) writes +-2*u1 from p,
// head(0,1) writes +-2*u2 from q. The layer-1 MLP (real GELU) computes the
// XOR of the two signs: hidden units read (a+b), -(a+b), (a-b), (b-a); the
// same-sign pair sums to ~2c exactly when signs agree and the diff pair when
// they disagree, and the output matrix maps (diff - same) onto u3. The
// unembedding rows for xorA/xorB are +-1.5*u3.

inline Vocabulary xor_pair_vocabulary() {
  Vocabulary v;
  v.add("p0");
  v.add("p1");
  v.add("q0");
  v.add("q1");
  v.add("xq");
  v.add("xorA");
  v.add("xorB");
  return v;
}

namespace gtdetail {

inline TaskInstance make_xor_instance(int b1, int b2) {
  const Vocabulary v = xor_pair_vocabulary();
  require((b1 == 0 || b1 == 1) && (b2 == 0 || b2 == 1), "xor fixture: bits must be 0/1");
  int p_tok = v.id(b1 ? "p1" : "p0");
  int q_tok = v.id(b2 ? "q1" : "q0");
  int xq = v.id("xq");
  int a = v.id("xorA"), b = v.id("xorB");
  auto out_tok = [&](int x) { return x ? a : b; };
  int x = b1 ^ b2;
  // Flip p when the bits agree, q when they differ; either way XOR flips.
  int cb1 = (b1 == b2) ? 1 - b1 : b1;
  int cb2 = (b1 == b2) ? b2 : 1 - b2;
  TaskInstance inst;
  inst.task = "xor_pair";
  inst.tokens = {p_tok, q_tok, xq};
  inst.answer = out_tok(x);
  inst.cf_tokens = {v.id(cb1 ? "p1" : "p0"), v.id(cb2 ? "q1" : "q0"), xq};
  inst.cf_answer = out_tok(cb1 ^ cb2);
  inst.meta = nlohmann::json::object();
  inst.meta["b1"] = b1;
  inst.meta["b2"] = b2;
  inst.meta["fillers"] = {v.word(p_tok), v.word(q_tok)};
  return inst;
}

}  // namespace gtdetail

inline HighLevelCausalModel xor_pair_causal_model() {
  HighLevelCausalModel m;
  m.task = "xor_pair";
  m.variables = {"X_B1", "X_B2", "X_Xor"};
  m.extract = [](const TaskInstance& inst) {
    static const Vocabulary v = xor_pair_vocabulary();
    int b1 = inst.tokens.at(0) == v.id("p1") ? 1 : 0;
    int b2 = inst.tokens.at(1) == v.id("q1") ? 1 : 0;
    return std::map<std::string, int>{{"X_B1", b1}, {"X_B2", b2}, {"X_Xor", b1 ^ b2}};
  };
  m.derive = [](std::map<std::string, int>& s, const std::set<std::string>& pinned) {
    if (!pinned.count("X_Xor")) s["X_Xor"] = s.at("X_B1") ^ s.at("X_B2");
  };
  m.output = [](const std::map<std::string, int>& s) {
    static const Vocabulary v = xor_pair_vocabulary();
    return s.at("X_Xor") ? v.id("xorA") : v.id("xorB");
  };
  return m;
}

// ---------------------------------------------------------------------------
// builders
// ---------------------------------------------------------------------------

namespace gtdetail {

inline GroundTruthModel build_copy_head(int n_train, uint64_t seed) {
  const Vocabulary vocab = copy_first_vocabulary();
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.d_head = 8;
  cfg.d_mlp = 8;
  cfg.vocab_size = 8;
  cfg.max_seq_len = 8;
  cfg.identity_norm = true;
  cfg.identity_gelu = true;
  cfg.init_seed = seed;

  Model m = Model::init(cfg);
  zero_all_parameters(m);
  for (int v = 0; v < 8; ++v) set_row(m.tok_emb, v, basis(16, v));
  for (int p = 0; p < 8; ++p) set_row(m.pos_emb, p, basis(16, 8 + p));
  LayerParams& lp = m.layers[0];
  wire_position_attention(lp.wq[0], lp.wk[0], /*pos_dim0=*/8, /*n_positions=*/8,
                          /*key_pos=*/0);
  for (int i = 0; i < 8; ++i) set_entry(lp.wv[0], i, i, 1.0);   // value = token one-hot
  for (int i = 0; i < 8; ++i) set_entry(lp.wo[0], i, i, 5.0);   // write 5x back

  GroundTruthModel gt;
  gt.kind = GroundTruthKind::copy_head;
  gt.model = std::move(m);
  gt.known_circuit = Circuit::of_edges(
      gt.model.graph, {gt.model.graph->edge_index_by_name("embed.0.0->head.0.0"),
                       gt.model.graph->edge_index_by_name("head.0.0->logits.1.0")});
  gt.site_layer = 1;
  gt.site_position = 2;
  gt.variable = "X_Copy";
  gt.causal = copy_first_causal_model();

  gt.dataset.task = "copy_first";
  gt.dataset.seed = seed;
  gt.dataset.vocab_size = vocab.size();
  SplitSizes sizes = fixture_split_sizes(n_train);
  for (SplitName s : {SplitName::train, SplitName::validation, SplitName::public_test,
                      SplitName::private_test}) {
    Rng rng(taskdetail::split_seed(seed, "copy_first", s));
    int n = s == SplitName::train ? sizes.train : sizes.validation;
    for (int i = 0; i < n; ++i) {
      int t2 = (int)rng.below(8);
      int t0 = (int)rng.below(8);
      while (t0 == t2) t0 = (int)rng.below(8);
      int t1 = (int)rng.below(8);
      int t0_cf = (int)rng.below(8);
      while (t0_cf == t0 || t0_cf == t2) t0_cf = (int)rng.below(8);
      push_instance(gt.dataset, s, make_copy_instance(t0, t1, t2, t0_cf));
    }
  }
  return gt;
}

inline GroundTruthModel build_planted_direction(bool axis_aligned, int n_train,
                                                uint64_t seed) {
  const Vocabulary vocab = planted_sign_vocabulary();
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 16;
  cfg.d_head = 8;
  cfg.d_mlp = 8;
  cfg.vocab_size = vocab.size();  // 9
  cfg.max_seq_len = 3;
  cfg.identity_norm = true;
  cfg.identity_gelu = true;
  cfg.init_seed = seed;

  // Planted unit direction in the span of dims 12..15 (orthogonal to every
  // token and position coordinate, so the wiring invariants stay exact).
  std::vector<double> u(16, 0.0);
  if (axis_aligned) {
    u[12] = 1.0;
  } else {
    Rng rng(fnv1a64("planted-direction/" + std::to_string(seed)));
    double norm2 = 0.0;
    for (int i = 12; i < 16; ++i) {
      u[(size_t)i] = rng.normal();
      norm2 += u[(size_t)i] * u[(size_t)i];
    }
    double inv = 1.0 / std::sqrt(norm2);
    for (int i = 12; i < 16; ++i) u[(size_t)i] *= inv;
  }

  Model m = Model::init(cfg);
  zero_all_parameters(m);
  for (int v = 0; v < 7; ++v) set_row(m.tok_emb, v, basis(16, v));  // s0,s1,d0..d3,q
  set_row(m.tok_emb, vocab.id("outA"), scaled(u, 2.0));
  set_row(m.tok_emb, vocab.id("outB"), scaled(u, -2.0));
  for (int p = 0; p < 3; ++p) set_row(m.pos_emb, p, basis(16, 9 + p));

  LayerParams& lp = m.layers[0];
  wire_position_attention(lp.wq[0], lp.wk[0], /*pos_dim0=*/9, /*n_positions=*/3,
                          /*key_pos=*/0);
  set_entry(lp.wv[0], vocab.id("s0"), 0, 2.0);   // value channel 0 carries the sign
  set_entry(lp.wv[0], vocab.id("s1"), 0, -2.0);
  set_row(lp.wo[0], 0, u);  // write (+-2) * u into the stream

  GroundTruthModel gt;
  gt.kind = axis_aligned ? GroundTruthKind::planted_direction_axis
                         : GroundTruthKind::planted_direction;
  gt.model = std::move(m);
  gt.known_circuit = Circuit::of_edges(
      gt.model.graph, {gt.model.graph->edge_index_by_name("embed.0.0->head.0.0"),
                       gt.model.graph->edge_index_by_name("head.0.0->logits.2.0")});
  gt.site_layer = 1;
  gt.site_position = 2;
  gt.variable = "X_Sign";
  gt.has_direction = true;
  gt.direction = u;
  gt.causal = planted_sign_causal_model();

  gt.dataset.task = "planted_sign";
  gt.dataset.seed = seed;
  gt.dataset.vocab_size = vocab.size();
  SplitSizes sizes = fixture_split_sizes(n_train);
  for (SplitName s : {SplitName::train, SplitName::validation, SplitName::public_test,
                      SplitName::private_test}) {
    Rng rng(taskdetail::split_seed(seed, "planted_sign", s));
    int n = s == SplitName::train ? sizes.train : sizes.validation;
    for (int i = 0; i < n; ++i)
      push_instance(gt.dataset, s,
                    make_planted_sign_instance((int)rng.below(2), (int)rng.below(4)));
  }
  return gt;
}

inline GroundTruthModel build_xor_pair(int n_train, uint64_t seed) {
  const Vocabulary vocab = xor_pair_vocabulary();
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 14;
  cfg.d_head = 7;
  cfg.d_mlp = 4;
  cfg.vocab_size = vocab.size();  // 7
  cfg.max_seq_len = 3;
  cfg.identity_norm = true;
  cfg.identity_gelu = false;  // the XOR readout needs the real GELU
  cfg.init_seed = seed;

  const int D = 14;
  std::vector<double> u1 = basis(D, 10), u2 = basis(D, 11), u3 = basis(D, 12);
  const double c = 2.0;  // planted amplitude: stream carries (+-c)u1 + (+-c)u2

  Model m = Model::init(cfg);
  zero_all_parameters(m);
  for (int v = 0; v < 5; ++v) set_row(m.tok_emb, v, basis(D, v));  // p0,p1,q0,q1,xq
  set_row(m.tok_emb, vocab.id("xorA"), scaled(u3, 1.5));
  set_row(m.tok_emb, vocab.id("xorB"), scaled(u3, -1.5));
  for (int p = 0; p < 3; ++p) set_row(m.pos_emb, p, basis(D, 7 + p));

  LayerParams& l0 = m.layers[0];
  // head(0,0): read bit b1 from position 0 onto u1.
  wire_position_attention(l0.wq[0], l0.wk[0], /*pos_dim0=*/7, /*n_positions=*/3,
                          /*key_pos=*/0);
  set_entry(l0.wv[0], vocab.id("p1"), 0, c);
  set_entry(l0.wv[0], vocab.id("p0"), 0, -c);
  set_row(l0.wo[0], 0, u1);
  // head(0,1): read bit b2 from position 1 onto u2.
  wire_position_attention(l0.wq[1], l0.wk[1], /*pos_dim0=*/7, /*n_positions=*/3,
                          /*key_pos=*/1);
  set_entry(l0.wv[1], vocab.id("q1"), 0, c);
  set_entry(l0.wv[1], vocab.id("q0"), 0, -c);
  set_row(l0.wo[1], 0, u2);

  // layer-1 MLP: XOR of the signs a = <h,u1>, b = <h,u2>. GELU(x) ~ x for
  // x = 2c and ~0 for x in {0, -2c}, so gelu(a+b)+gelu(-a-b) ~ 2c iff the
  // signs agree and gelu(a-b)+gelu(b-a) ~ 2c iff they differ.
  LayerParams& l1 = m.layers[1];
  auto set_col = [](Tensor& t, int col, const std::vector<double>& v) {
    int cols = t.shape()[1];
    for (size_t r = 0; r < v.size(); ++r) t.data()[r * (size_t)cols + (size_t)col] = v[r];
  };
  set_col(l1.w_in, 0, vsum(u1, u2));         // a + b
  set_col(l1.w_in, 1, scaled(vsum(u1, u2), -1.0));
  set_col(l1.w_in, 2, vsum(u1, u2, -1.0));   // a - b
  set_col(l1.w_in, 3, vsum(u2, u1, -1.0));
  const double w_amp = 4.0 / (2.0 * c);  // map (diff - same) onto +-4 * u3
  set_row(l1.w_out, 0, scaled(u3, -w_amp));
  set_row(l1.w_out, 1, scaled(u3, -w_amp));
  set_row(l1.w_out, 2, scaled(u3, w_amp));
  set_row(l1.w_out, 3, scaled(u3, w_amp));

  GroundTruthModel gt;
  gt.kind = GroundTruthKind::xor_pair;
  gt.model = std::move(m);
  const auto& g = gt.model.graph;
  gt.known_circuit = Circuit::of_edges(g, {g->edge_index_by_name("embed.0.0->head.0.0"),
                                           g->edge_index_by_name("embed.0.0->head.0.1"),
                                           g->edge_index_by_name("head.0.0->mlp.1.0"),
                                           g->edge_index_by_name("head.0.1->mlp.1.0"),
                                           g->edge_index_by_name("mlp.1.0->logits.2.0")});
  gt.site_layer = 1;
  gt.site_position = 2;
  gt.variable = "X_Xor";
  gt.has_direction_pair = true;
  gt.direction = u1;
  gt.direction_b = u2;
  gt.causal = xor_pair_causal_model();

  gt.dataset.task = "xor_pair";
  gt.dataset.seed = seed;
  gt.dataset.vocab_size = vocab.size();
  SplitSizes sizes = fixture_split_sizes(n_train);
  for (SplitName s : {SplitName::train, SplitName::validation, SplitName::public_test,
                      SplitName::private_test}) {
    Rng rng(taskdetail::split_seed(seed, "xor_pair", s));
    int n = s == SplitName::train ? sizes.train : sizes.validation;
    for (int i = 0; i < n; ++i)
      push_instance(gt.dataset, s, make_xor_instance((int)rng.below(2), (int)rng.below(2)));
  }
  return gt;
}

}  // namespace gtdetail

inline GroundTruthModel build_ground_truth_model(GroundTruthKind kind, int n_train = 256,
                                                 uint64_t seed = 11) {
  switch (kind) {
    case GroundTruthKind::copy_head: return gtdetail::build_copy_head(n_train, seed);
    case GroundTruthKind::planted_direction:
      return gtdetail::build_planted_direction(false, n_train, seed);
    case GroundTruthKind::planted_direction_axis:
      return gtdetail::build_planted_direction(true, n_train, seed);
    case GroundTruthKind::xor_pair: return gtdetail::build_xor_pair(n_train, seed);
  }
  throw ValidationError("build_ground_truth_model: bad kind");
}

}  // namespace circuitlab
