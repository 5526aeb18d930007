#pragma once

// Synthetic next-token tasks with token-aligned counterfactual pairs, the
// high-level causal model attached to each task, and line-delimited dataset
// file I/O.
//
// Every template filler (name, operand, color, entity, ...) is a single
// vocabulary token, and filler pools are partitioned across the four splits
// (train / validation / public test / private test) so that held-out fillers
// never appear in training data. Counterfactuals are pure functions of the
// instance: regenerating with the same seed reproduces files byte-for-byte.

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "circuitlab/common.hpp"
#include "json.hpp"

namespace circuitlab {

// ===== vocabulary ===========================================================

class Vocabulary {
 public:
  int add(const std::string& word) {
    auto [it, inserted] = index_.emplace(word, static_cast<int>(words_.size()));
    if (inserted) words_.push_back(word);
    return it->second;
  }

  int id(const std::string& word) const {
    auto it = index_.find(word);
    require(it != index_.end(), "Vocabulary: unknown word \"" + word + "\"");
    return it->second;
  }

  bool contains(const std::string& word) const { return index_.count(word) > 0; }

  const std::string& word(int id) const {
    require(id >= 0 && id < size(), "Vocabulary: token id " + std::to_string(id) +
                                        " outside 0.." + std::to_string(size() - 1));
    return words_[static_cast<size_t>(id)];
  }

  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

// ===== instances and splits =================================================

struct TaskInstance {
  std::string task;
  std::vector<int> tokens;     // prompt x
  int answer = -1;             // correct next token y
  std::vector<int> cf_tokens;  // counterfactual prompt x'
  int cf_answer = -1;          // counterfactual answer y'
  nlohmann::json meta;         // template metadata incl. "fillers"

  void validate() const {
    require(!tokens.empty(), "TaskInstance: empty prompt");
    require(tokens.size() == cf_tokens.size(),
            "TaskInstance: counterfactual length " + std::to_string(cf_tokens.size()) +
                " differs from prompt length " + std::to_string(tokens.size()));
    require(answer >= 0 && cf_answer >= 0, "TaskInstance: missing answer token");
    require(answer != cf_answer, "TaskInstance: answer and counterfactual answer coincide");
  }
};

enum class SplitName { train, validation, public_test, private_test };

inline const char* split_name_str(SplitName s) {
  switch (s) {
    case SplitName::train: return "train";
    case SplitName::validation: return "validation";
    case SplitName::public_test: return "public_test";
    case SplitName::private_test: return "private_test";
  }
  return "?";
}

inline SplitName split_name_from(const std::string& s) {
  for (SplitName n : {SplitName::train, SplitName::validation, SplitName::public_test,
                      SplitName::private_test}) {
    if (s == split_name_str(n)) return n;
  }
  throw ValidationError("unknown split name \"" + s + "\"");
}

struct DatasetSplit {
  std::string task;
  uint64_t seed = 0;
  int vocab_size = 0;
  std::vector<TaskInstance> train, validation, public_test, private_test;

  const std::vector<TaskInstance>& split(SplitName s) const {
    switch (s) {
      case SplitName::train: return train;
      case SplitName::validation: return validation;
      case SplitName::public_test: return public_test;
      case SplitName::private_test: return private_test;
    }
    return train;
  }

  std::vector<TaskInstance>& split(SplitName s) {
    return const_cast<std::vector<TaskInstance>&>(
        static_cast<const DatasetSplit*>(this)->split(s));
  }

  size_t total() const {
    return train.size() + validation.size() + public_test.size() + private_test.size();
  }
};

// Filler values (as strings) recorded by the generators for the disjointness
// guarantee.
inline std::vector<std::string> filler_values(const TaskInstance& inst) {
  std::vector<std::string> out;
  if (inst.meta.contains("fillers")) {
    for (const auto& f : inst.meta["fillers"]) out.push_back(f.get<std::string>());
  }
  return out;
}

// Held-out fillers must be unseen in train; the pools are partitioned, so all
// pairwise overlaps are forbidden. Checked exhaustively at generation time.
inline void verify_split_disjointness(const DatasetSplit& d) {
  std::map<SplitName, std::set<std::string>> fillers;
  for (SplitName s : {SplitName::train, SplitName::validation, SplitName::public_test,
                      SplitName::private_test}) {
    for (const TaskInstance& inst : d.split(s)) {
      for (const std::string& f : filler_values(inst)) fillers[s].insert(f);
    }
  }
  for (SplitName s : {SplitName::validation, SplitName::public_test, SplitName::private_test}) {
    for (const std::string& f : fillers[s]) {
      require(fillers[SplitName::train].count(f) == 0,
              std::string("split disjointness violated: filler \"") + f + "\" from " +
                  split_name_str(s) + " also appears in train (task " + d.task + ")");
    }
  }
}

// ===== high-level causal models =============================================

// Named variables with an extraction map (instance -> variable setting), a
// derivation pass for internal variables, and an output function
// (setting -> answer token). Interchange pins one variable to its value under
// a source instance and re-derives the rest.
struct HighLevelCausalModel {
  std::string task;
  std::vector<std::string> variables;
  std::function<std::map<std::string, int>(const TaskInstance&)> extract;
  // Recomputes derived variables, leaving `pinned` untouched. May be null
  // when every variable is exogenous.
  std::function<void(std::map<std::string, int>&, const std::set<std::string>&)> derive;
  std::function<int(const std::map<std::string, int>&)> output;

  bool has_variable(const std::string& v) const {
    return std::find(variables.begin(), variables.end(), v) != variables.end();
  }

  int run(const TaskInstance& inst) const {
    std::map<std::string, int> setting = extract(inst);
    if (derive) derive(setting, {});
    return output(setting);
  }

  // Expected output of the base instance when `variable` takes the value it
  // has under the source instance.
  int interchange(const TaskInstance& base, const TaskInstance& source,
                  const std::string& variable) const {
    require(has_variable(variable),
            "interchange: task " + task + " has no variable \"" + variable + "\"");
    std::map<std::string, int> setting = extract(base);
    std::map<std::string, int> src = extract(source);
    if (derive) {
      derive(setting, {});
      derive(src, {});
    }
    setting[variable] = src.at(variable);
    if (derive) derive(setting, {variable});
    return output(setting);
  }
};

// ===== shared pools =========================================================

namespace taskdetail {

inline const std::vector<std::string>& ioi_names() {
  static const std::vector<std::string> names{
      // train (12)
      "mary", "john", "tom", "anna", "mike", "sara", "paul", "lucy", "mark", "kate", "liam",
      "emma",
      // validation (4)
      "noah", "ella", "ryan", "jane",
      // public test (4)
      "adam", "rose", "carl", "nina",
      // private test (4)
      "owen", "ivy", "hugo", "cora"};
  return names;
}

inline const std::vector<std::string>& mcqa_colors() {
  static const std::vector<std::string> colors{
      // train (8)
      "red", "blue", "green", "yellow", "black", "white", "brown", "pink",
      // validation (4)
      "gray", "orange", "purple", "cyan",
      // public test (4)
      "gold", "silver", "teal", "maroon",
      // private test (4)
      "olive", "navy", "coral", "beige"};
  return colors;
}

inline const std::vector<std::string>& mcqa_objects() {
  static const std::vector<std::string> objects{
      // train (6)
      "pen", "cup", "hat", "bag", "box", "key",
      // validation (2)
      "mug", "fan",
      // public test (2)
      "jar", "pot",
      // private test (2)
      "cap", "bin"};
  return objects;
}

// Pool slice for one split given per-split counts laid out consecutively.
template <typename T>
std::vector<T> pool_slice(const std::vector<T>& pool, SplitName s, const int counts[4]) {
  int offsets[4] = {0, counts[0], counts[0] + counts[1], counts[0] + counts[1] + counts[2]};
  int idx = static_cast<int>(s);
  require(offsets[idx] + counts[idx] <= static_cast<int>(pool.size()),
          "filler pool too small for disjoint splits");
  return std::vector<T>(pool.begin() + offsets[idx], pool.begin() + offsets[idx] + counts[idx]);
}

inline int split_count(SplitName s, int n) {
  return s == SplitName::train ? n : std::max(1, n / 4);
}

inline uint64_t split_seed(uint64_t seed, const std::string& task, SplitName s) {
  return fnv1a64(task + "/" + split_name_str(s) + "/" + std::to_string(seed));
}

}  // namespace taskdetail

// ===== IOI ==================================================================
//
// Template: "when <A> and <B> went to the <place> <S2> gave an <object> to"
// where S2 repeats one of the two names; the answer is the other (indirect
// object) name. The counterfactual swaps the giver/receiver roles by
// replacing the S2 token with the other name, flipping the answer.

inline Vocabulary ioi_vocabulary() {
  Vocabulary v;
  for (const char* w : {"when", "and", "went", "to", "the", "gave", "an"}) v.add(w);
  for (const char* w : {"store", "park", "school", "market"}) v.add(w);
  for (const char* w : {"apple", "book", "ball", "gift", "ring", "kite"}) v.add(w);
  for (const std::string& n : taskdetail::ioi_names()) v.add(n);
  return v;
}

namespace taskdetail {

inline TaskInstance make_ioi_instance(const Vocabulary& v, const std::string& name_a,
                                      const std::string& name_b, const std::string& place,
                                      const std::string& object, int form) {
  TaskInstance inst;
  inst.task = "ioi";
  int a = v.id(name_a), b = v.id(name_b);
  int s2 = (form == 0) ? b : a;  // the repeated (subject) name
  int io = (form == 0) ? a : b;  // the indirect object = answer
  inst.tokens = {v.id("when"), a,           v.id("and"), b,           v.id("went"),
                 v.id("to"),   v.id("the"), v.id(place), s2,          v.id("gave"),
                 v.id("an"),   v.id(object), v.id("to")};
  inst.answer = io;
  inst.cf_tokens = inst.tokens;
  inst.cf_tokens[8] = io;  // swap roles: the receiver becomes the giver
  inst.cf_answer = s2;
  inst.meta["name1_pos"] = 1;
  inst.meta["name2_pos"] = 3;
  inst.meta["s2_pos"] = 8;
  inst.meta["io_token"] = io;
  inst.meta["s_token"] = s2;
  inst.meta["form"] = form;
  inst.meta["fillers"] = std::vector<std::string>{name_a, name_b};
  inst.validate();
  return inst;
}

}  // namespace taskdetail

inline DatasetSplit gen_ioi(int n, uint64_t seed) {
  require(n >= 1, "gen_ioi: n must be >= 1");
  Vocabulary v = ioi_vocabulary();
  DatasetSplit d;
  d.task = "ioi";
  d.seed = seed;
  d.vocab_size = v.size();
  const int name_counts[4] = {12, 4, 4, 4};
  const std::vector<std::string> places{"store", "park", "school", "market"};
  const std::vector<std::string> objects{"apple", "book", "ball", "gift", "ring", "kite"};
  for (SplitName s : {SplitName::train, SplitName::validation, SplitName::public_test,
                      SplitName::private_test}) {
    std::vector<std::string> names = taskdetail::pool_slice(taskdetail::ioi_names(), s, name_counts);
    require(names.size() >= 2, "gen_ioi: name pool too small for disjoint splits");
    Rng rng(taskdetail::split_seed(seed, "ioi", s));
    int count = taskdetail::split_count(s, n);
    for (int i = 0; i < count; ++i) {
      int ai = static_cast<int>(rng.below(names.size()));
      int bi = static_cast<int>(rng.below(names.size() - 1));
      if (bi >= ai) ++bi;
      const std::string& place = places[rng.below(places.size())];
      const std::string& object = objects[rng.below(objects.size())];
      int form = static_cast<int>(rng.below(2));
      d.split(s).push_back(taskdetail::make_ioi_instance(
          v, names[static_cast<size_t>(ai)], names[static_cast<size_t>(bi)], place, object, form));
    }
  }
  verify_split_disjointness(d);
  return d;
}

inline HighLevelCausalModel ioi_causal_model() {
  HighLevelCausalModel m;
  m.task = "ioi";
  m.variables = {"X_IO", "X_S"};
  m.extract = [](const TaskInstance& inst) {
    std::map<std::string, int> s;
    s["X_IO"] = inst.meta.at("io_token").get<int>();
    s["X_S"] = inst.meta.at("s_token").get<int>();
    return s;
  };
  m.output = [](const std::map<std::string, int>& s) { return s.at("X_IO"); };
  return m;
}

// ===== arithmetic ===========================================================
//
// Prompt "<t1> <op> <t2> =" over single-token numbers. The counterfactual
// rewrites the units digit of the second operand so the carry (addition) or
// borrow (subtraction) variable flips. Operand values are partitioned across
// splits by tens digit, which the counterfactual map preserves.

inline Vocabulary arithmetic_vocabulary() {
  Vocabulary v;
  for (const char* w : {"+", "-", "="}) v.add(w);
  for (int i = 0; i <= 198; ++i) v.add("n" + std::to_string(i));
  return v;
}

enum class ArithOp { add, sub };

namespace taskdetail {

inline const std::vector<int>& arith_tens(SplitName s) {
  static const std::vector<int> train{0, 1, 2, 3}, val{4, 5}, pub{6, 7}, priv{8, 9};
  switch (s) {
    case SplitName::train: return train;
    case SplitName::validation: return val;
    case SplitName::public_test: return pub;
    case SplitName::private_test: return priv;
  }
  return train;
}

inline TaskInstance make_arith_instance(const Vocabulary& v, ArithOp op, int t1, int t2) {
  TaskInstance inst;
  inst.task = op == ArithOp::add ? "arith_add" : "arith_sub";
  auto num = [&](int x) { return v.id("n" + std::to_string(x)); };
  int u1 = t1 % 10, u2 = t2 % 10;
  int carry = op == ArithOp::add ? (u1 + u2 >= 10 ? 1 : 0) : (u1 < u2 ? 1 : 0);
  // Flip the units-interaction variable by rewriting t2's units digit.
  int u2p;
  if (op == ArithOp::add) {
    u2p = carry ? (9 - u1) : (10 - u1);  // requires u1 >= 1 when carry == 0
  } else {
    u2p = carry ? u1 : (u1 + 1);  // requires u1 <= 8 when borrow == 0
  }
  require(u2p >= 0 && u2p <= 9, "make_arith_instance: operands do not admit a flip");
  int t2p = (t2 / 10) * 10 + u2p;
  int ans = op == ArithOp::add ? t1 + t2 : t1 - t2;
  int ansp = op == ArithOp::add ? t1 + t2p : t1 - t2p;
  require(ans >= 0 && ansp >= 0, "make_arith_instance: negative answer");
  inst.tokens = {num(t1), v.id(op == ArithOp::add ? "+" : "-"), num(t2), v.id("=")};
  inst.answer = num(ans);
  inst.cf_tokens = {num(t1), v.id(op == ArithOp::add ? "+" : "-"), num(t2p), v.id("=")};
  inst.cf_answer = num(ansp);
  inst.meta["op1"] = t1;
  inst.meta["op2"] = t2;
  inst.meta["cf_op2"] = t2p;
  inst.meta["carry"] = carry;
  inst.meta["fillers"] = std::vector<std::string>{"n" + std::to_string(t1),
                                                  "n" + std::to_string(t2),
                                                  "n" + std::to_string(t2p)};
  inst.validate();
  return inst;
}

}  // namespace taskdetail

inline DatasetSplit gen_arithmetic(int n, ArithOp op, uint64_t seed) {
  require(n >= 1, "gen_arithmetic: n must be >= 1");
  Vocabulary v = arithmetic_vocabulary();
  DatasetSplit d;
  d.task = op == ArithOp::add ? "arith_add" : "arith_sub";
  d.seed = seed;
  d.vocab_size = v.size();
  for (SplitName s : {SplitName::train, SplitName::validation, SplitName::public_test,
                      SplitName::private_test}) {
    const std::vector<int>& tens = taskdetail::arith_tens(s);
    Rng rng(taskdetail::split_seed(seed, d.task, s));
    int count = taskdetail::split_count(s, n);
    for (int i = 0; i < count; ++i) {
      int t1, t2;
      if (op == ArithOp::add) {
        // Units 1..9 on the first operand keep the carry flippable both ways.
        t1 = tens[rng.below(tens.size())] * 10 + 1 + static_cast<int>(rng.below(9));
        t2 = tens[rng.below(tens.size())] * 10 + static_cast<int>(rng.below(10));
      } else {
        // Strictly larger first-operand tens digit keeps every counterfactual
        // difference non-negative; units 0..8 keep the borrow flippable.
        int hi = 1 + static_cast<int>(rng.below(tens.size() - 1));
        int lo = static_cast<int>(rng.below(static_cast<size_t>(hi)));
        t1 = tens[static_cast<size_t>(hi)] * 10 + static_cast<int>(rng.below(9));
        t2 = tens[static_cast<size_t>(lo)] * 10 + static_cast<int>(rng.below(10));
      }
      d.split(s).push_back(taskdetail::make_arith_instance(v, op, t1, t2));
    }
  }
  verify_split_disjointness(d);
  return d;
}

inline HighLevelCausalModel arithmetic_causal_model(ArithOp op) {
  HighLevelCausalModel m;
  m.task = op == ArithOp::add ? "arith_add" : "arith_sub";
  m.variables = {"X_Op1", "X_Op2", "X_Carry"};
  m.extract = [](const TaskInstance& inst) {
    std::map<std::string, int> s;
    s["X_Op1"] = inst.meta.at("op1").get<int>();
    s["X_Op2"] = inst.meta.at("op2").get<int>();
    return s;
  };
  bool is_add = op == ArithOp::add;
  m.derive = [is_add](std::map<std::string, int>& s, const std::set<std::string>& pinned) {
    if (pinned.count("X_Carry")) return;
    int u1 = s.at("X_Op1") % 10, u2 = s.at("X_Op2") % 10;
    s["X_Carry"] = is_add ? (u1 + u2 >= 10 ? 1 : 0) : (u1 < u2 ? 1 : 0);
  };
  m.output = [is_add](const std::map<std::string, int>& s) {
    int a = s.at("X_Op1"), b = s.at("X_Op2"), carry = s.at("X_Carry");
    int units, tens;
    if (is_add) {
      units = (a % 10 + b % 10) % 10;
      tens = a / 10 + b / 10 + carry;
    } else {
      units = (a % 10 - b % 10 + 10) % 10;
      tens = a / 10 - b / 10 - carry;
    }
    int ans = tens * 10 + units;
    require(ans >= 0 && ans <= 198, "arithmetic causal model: answer " + std::to_string(ans) +
                                        " outside the number vocabulary");
    return ans + 3;  // number tokens start after "+", "-", "="
  };
  return m;
}

// ===== MCQA =================================================================
//
// Prompt "<obj> is <color> which A <c0> B <c1> C <c2> D <c3> answer" where
// exactly one choice color equals the fact color; the answer is that
// choice's letter token. The counterfactual rotates the choice colors one
// slot forward, moving the correct answer to the next letter.

inline Vocabulary mcqa_vocabulary() {
  Vocabulary v;
  for (const char* w : {"is", "which", "answer", "A", "B", "C", "D"}) v.add(w);
  for (const std::string& c : taskdetail::mcqa_colors()) v.add(c);
  for (const std::string& o : taskdetail::mcqa_objects()) v.add(o);
  return v;
}

namespace taskdetail {

inline TaskInstance make_mcqa_instance(const Vocabulary& v, const std::string& object,
                                       const std::vector<std::string>& choice_colors,
                                       int correct_pos) {
  static const char* letters[4] = {"A", "B", "C", "D"};
  TaskInstance inst;
  inst.task = "mcqa";
  inst.tokens = {v.id(object), v.id("is"), v.id(choice_colors[static_cast<size_t>(correct_pos)]),
                 v.id("which")};
  for (int i = 0; i < 4; ++i) {
    inst.tokens.push_back(v.id(letters[i]));
    inst.tokens.push_back(v.id(choice_colors[static_cast<size_t>(i)]));
  }
  inst.tokens.push_back(v.id("answer"));
  inst.answer = v.id(letters[correct_pos]);
  // Rotate choice colors one slot forward; the fact color stays put, so the
  // correct letter advances by one.
  inst.cf_tokens = inst.tokens;
  for (int i = 0; i < 4; ++i) {
    inst.cf_tokens[static_cast<size_t>(5 + 2 * i)] =
        v.id(choice_colors[static_cast<size_t>((i + 3) % 4)]);
  }
  int cf_pos = (correct_pos + 1) % 4;
  inst.cf_answer = v.id(letters[cf_pos]);
  inst.meta["correct_pos"] = correct_pos;
  inst.meta["cf_correct_pos"] = cf_pos;
  inst.meta["fact_color_pos"] = 2;
  inst.meta["first_choice_pos"] = 4;
  inst.meta["answer_slot_pos"] = static_cast<int>(inst.tokens.size()) - 1;
  std::vector<std::string> fillers = choice_colors;
  fillers.push_back(object);
  inst.meta["fillers"] = fillers;
  inst.validate();
  return inst;
}

}  // namespace taskdetail

inline DatasetSplit gen_mcqa(int n, uint64_t seed) {
  require(n >= 1, "gen_mcqa: n must be >= 1");
  Vocabulary v = mcqa_vocabulary();
  DatasetSplit d;
  d.task = "mcqa";
  d.seed = seed;
  d.vocab_size = v.size();
  const int color_counts[4] = {8, 4, 4, 4};
  const int object_counts[4] = {6, 2, 2, 2};
  for (SplitName s : {SplitName::train, SplitName::validation, SplitName::public_test,
                      SplitName::private_test}) {
    std::vector<std::string> colors =
        taskdetail::pool_slice(taskdetail::mcqa_colors(), s, color_counts);
    std::vector<std::string> objects =
        taskdetail::pool_slice(taskdetail::mcqa_objects(), s, object_counts);
    require(colors.size() >= 4, "gen_mcqa: color pool too small for four choices");
    Rng rng(taskdetail::split_seed(seed, "mcqa", s));
    int count = taskdetail::split_count(s, n);
    for (int i = 0; i < count; ++i) {
      std::vector<std::string> pool = colors;
      rng.shuffle(pool);
      std::vector<std::string> choices(pool.begin(), pool.begin() + 4);
      int correct = static_cast<int>(rng.below(4));
      const std::string& object = objects[rng.below(objects.size())];
      d.split(s).push_back(taskdetail::make_mcqa_instance(v, object, choices, correct));
    }
  }
  verify_split_disjointness(d);
  return d;
}

inline HighLevelCausalModel mcqa_causal_model() {
  HighLevelCausalModel m;
  m.task = "mcqa";
  m.variables = {"X_Order"};
  m.extract = [](const TaskInstance& inst) {
    std::map<std::string, int> s;
    s["X_Order"] = inst.meta.at("correct_pos").get<int>();
    return s;
  };
  m.output = [](const std::map<std::string, int>& s) {
    int pos = s.at("X_Order");
    require(pos >= 0 && pos < 4, "mcqa causal model: X_Order outside 0..3");
    return 3 + pos;  // letter tokens A..D sit at ids 3..6
  };
  return m;
}

// ===== attribute lookup (synthetic entity table) ============================
//
// Each entity carries three independent attributes (locale: unique per
// entity; region: one of four; tongue: one of three). Prompts query one
// attribute; the counterfactual swaps in another same-split entity whose
// queried attribute differs.

struct EntityTable {
  // attribute value index per entity: locale[i] == i, region[i], tongue[i]
  int n_entities = 24;
  int region_of(int e) const { return e % 4; }
  int tongue_of(int e) const { return e % 3; }
};

inline Vocabulary attribute_vocabulary() {
  Vocabulary v;
  for (const char* w : {"q_locale", "q_region", "q_tongue"}) v.add(w);
  EntityTable table;
  for (int e = 0; e < table.n_entities; ++e) v.add("ent" + std::to_string(e));
  for (int e = 0; e < table.n_entities; ++e) v.add("locale" + std::to_string(e));
  for (int r = 0; r < 4; ++r) v.add("region" + std::to_string(r));
  for (int t = 0; t < 3; ++t) v.add("tongue" + std::to_string(t));
  return v;
}

namespace taskdetail {

inline std::vector<int> attribute_entities(SplitName s) {
  // 24 entities, 12/4/4/4 across splits.
  int counts[4] = {12, 4, 4, 4};
  int offsets[4] = {0, 12, 16, 20};
  int idx = static_cast<int>(s);
  std::vector<int> out;
  for (int i = 0; i < counts[idx]; ++i) out.push_back(offsets[idx] + i);
  return out;
}

inline std::string attribute_value_word(const EntityTable& t, int entity, int query) {
  switch (query) {
    case 0: return "locale" + std::to_string(entity);
    case 1: return "region" + std::to_string(t.region_of(entity));
    case 2: return "tongue" + std::to_string(t.tongue_of(entity));
  }
  throw ValidationError("attribute query index outside 0..2");
}

inline TaskInstance make_attribute_instance(const Vocabulary& v, const EntityTable& table,
                                            const std::vector<int>& split_entities, int entity,
                                            int query) {
  static const char* queries[3] = {"q_locale", "q_region", "q_tongue"};
  TaskInstance inst;
  inst.task = "attribute";
  inst.tokens = {v.id("ent" + std::to_string(entity)), v.id(queries[query])};
  inst.answer = v.id(attribute_value_word(table, entity, query));
  // Deterministic counterfactual: the next same-split entity (cyclic order)
  // whose queried attribute value differs.
  int cf_entity = -1;
  auto it = std::find(split_entities.begin(), split_entities.end(), entity);
  require(it != split_entities.end(), "make_attribute_instance: entity outside split pool");
  size_t start = static_cast<size_t>(it - split_entities.begin());
  for (size_t k = 1; k < split_entities.size(); ++k) {
    int cand = split_entities[(start + k) % split_entities.size()];
    if (attribute_value_word(table, cand, query) != attribute_value_word(table, entity, query)) {
      cf_entity = cand;
      break;
    }
  }
  require(cf_entity >= 0, "make_attribute_instance: no counterfactual entity with a "
                          "different attribute value in this split");
  inst.cf_tokens = {v.id("ent" + std::to_string(cf_entity)), v.id(queries[query])};
  inst.cf_answer = v.id(attribute_value_word(table, cf_entity, query));
  inst.meta["entity"] = entity;
  inst.meta["cf_entity"] = cf_entity;
  inst.meta["query"] = query;
  inst.meta["fillers"] = std::vector<std::string>{"ent" + std::to_string(entity),
                                                  "ent" + std::to_string(cf_entity)};
  inst.validate();
  return inst;
}

}  // namespace taskdetail

inline DatasetSplit gen_attribute(int n, uint64_t seed) {
  require(n >= 1, "gen_attribute: n must be >= 1");
  Vocabulary v = attribute_vocabulary();
  EntityTable table;
  DatasetSplit d;
  d.task = "attribute";
  d.seed = seed;
  d.vocab_size = v.size();
  for (SplitName s : {SplitName::train, SplitName::validation, SplitName::public_test,
                      SplitName::private_test}) {
    std::vector<int> entities = taskdetail::attribute_entities(s);
    Rng rng(taskdetail::split_seed(seed, "attribute", s));
    int count = taskdetail::split_count(s, n);
    for (int i = 0; i < count; ++i) {
      int entity = entities[rng.below(entities.size())];
      int query = static_cast<int>(rng.below(3));
      d.split(s).push_back(
          taskdetail::make_attribute_instance(v, table, entities, entity, query));
    }
  }
  verify_split_disjointness(d);
  return d;
}

inline HighLevelCausalModel attribute_causal_model() {
  HighLevelCausalModel m;
  m.task = "attribute";
  m.variables = {"A_Locale", "A_Region", "A_Tongue", "Q_Type"};
  m.extract = [](const TaskInstance& inst) {
    EntityTable table;
    static const Vocabulary v = attribute_vocabulary();
    int e = inst.meta.at("entity").get<int>();
    std::map<std::string, int> s;
    s["A_Locale"] = v.id(taskdetail::attribute_value_word(table, e, 0));
    s["A_Region"] = v.id(taskdetail::attribute_value_word(table, e, 1));
    s["A_Tongue"] = v.id(taskdetail::attribute_value_word(table, e, 2));
    s["Q_Type"] = inst.meta.at("query").get<int>();
    return s;
  };
  m.output = [](const std::map<std::string, int>& s) {
    switch (s.at("Q_Type")) {
      case 0: return s.at("A_Locale");
      case 1: return s.at("A_Region");
      case 2: return s.at("A_Tongue");
    }
    throw ValidationError("attribute causal model: Q_Type outside 0..2");
  };
  return m;
}

// ===== registry =============================================================

inline const std::vector<std::string>& task_ids() {
  static const std::vector<std::string> ids{"ioi", "arith_add", "arith_sub", "mcqa", "attribute"};
  return ids;
}

inline Vocabulary vocabulary_for(const std::string& task) {
  if (task == "ioi") return ioi_vocabulary();
  if (task == "arith_add" || task == "arith_sub") return arithmetic_vocabulary();
  if (task == "mcqa") return mcqa_vocabulary();
  if (task == "attribute") return attribute_vocabulary();
  throw ValidationError("unknown task \"" + task + "\" (known: ioi, arith_add, arith_sub, "
                        "mcqa, attribute)");
}

inline DatasetSplit generate_task(const std::string& task, int n, uint64_t seed) {
  if (task == "ioi") return gen_ioi(n, seed);
  if (task == "arith_add") return gen_arithmetic(n, ArithOp::add, seed);
  if (task == "arith_sub") return gen_arithmetic(n, ArithOp::sub, seed);
  if (task == "mcqa") return gen_mcqa(n, seed);
  if (task == "attribute") return gen_attribute(n, seed);
  throw ValidationError("unknown task \"" + task + "\" (known: ioi, arith_add, arith_sub, "
                        "mcqa, attribute)");
}

inline HighLevelCausalModel causal_model_for(const std::string& task) {
  if (task == "ioi") return ioi_causal_model();
  if (task == "arith_add") return arithmetic_causal_model(ArithOp::add);
  if (task == "arith_sub") return arithmetic_causal_model(ArithOp::sub);
  if (task == "mcqa") return mcqa_causal_model();
  if (task == "attribute") return attribute_causal_model();
  throw ValidationError("unknown task \"" + task + "\" (known: ioi, arith_add, arith_sub, "
                        "mcqa, attribute)");
}

// The counterfactual side of an instance, reinterpreted as a first-class
// instance of the same task: tokens/answers swap roles, and the meta fields a
// causal model reads are updated to describe the counterfactual prompt.
// Tasks without meta (or whose causal models read tokens directly) only need
// the swap.
inline TaskInstance counterfactual_instance(const TaskInstance& inst) {
  TaskInstance cf = inst;
  cf.tokens = inst.cf_tokens;
  cf.answer = inst.cf_answer;
  cf.cf_tokens = inst.tokens;
  cf.cf_answer = inst.answer;
  if (inst.task == "ioi") {
    cf.meta["io_token"] = inst.meta.at("s_token");
    cf.meta["s_token"] = inst.meta.at("io_token");
  } else if (inst.task == "arith_add" || inst.task == "arith_sub") {
    cf.meta["op2"] = inst.meta.at("cf_op2");
  } else if (inst.task == "mcqa") {
    cf.meta["correct_pos"] = inst.meta.at("cf_correct_pos");
  } else if (inst.task == "attribute") {
    cf.meta["entity"] = inst.meta.at("cf_entity");
  }
  return cf;
}

// ===== dataset files ========================================================
//
// Line-delimited: a header record, then one record per instance with fields
// split/tokens/answer/cf_tokens/cf_answer/meta.

inline void write_dataset(const DatasetSplit& d, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "write_dataset: cannot open \"" + path + "\" for writing");
  nlohmann::json header;
  header["format_version"] = kDatasetFormatVersion;
  header["task"] = d.task;
  header["seed"] = d.seed;
  header["vocab_size"] = d.vocab_size;
  out << header.dump() << "\n";
  for (SplitName s : {SplitName::train, SplitName::validation, SplitName::public_test,
                      SplitName::private_test}) {
    for (const TaskInstance& inst : d.split(s)) {
      nlohmann::json rec;
      rec["split"] = split_name_str(s);
      rec["tokens"] = inst.tokens;
      rec["answer"] = inst.answer;
      rec["cf_tokens"] = inst.cf_tokens;
      rec["cf_answer"] = inst.cf_answer;
      rec["meta"] = inst.meta;
      out << rec.dump() << "\n";
    }
  }
  out.close();
  require(out.good(), "write_dataset: failed writing \"" + path + "\"");
}

inline DatasetSplit read_dataset(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "read_dataset: cannot open \"" + path + "\"");
  std::string line;
  int line_no = 0;
  auto parse_line = [&](const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, /*allow_exceptions=*/false);
    require(!j.is_discarded(), "read_dataset: malformed JSON at " + path + " line " +
                                   std::to_string(line_no));
    return j;
  };

  require(static_cast<bool>(std::getline(in, line)), "read_dataset: empty file " + path);
  ++line_no;
  nlohmann::json header = parse_line(line);
  require(header.contains("format_version") &&
              header["format_version"].get<std::string>() == kDatasetFormatVersion,
          "read_dataset: unsupported or missing format_version at " + path + " line 1 "
          "(expected " + std::string(kDatasetFormatVersion) + ")");
  DatasetSplit d;
  d.task = header.at("task").get<std::string>();
  d.seed = header.at("seed").get<uint64_t>();
  d.vocab_size = header.at("vocab_size").get<int>();

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec = parse_line(line);
    try {
      TaskInstance inst;
      inst.task = d.task;
      inst.tokens = rec.at("tokens").get<std::vector<int>>();
      inst.answer = rec.at("answer").get<int>();
      inst.cf_tokens = rec.at("cf_tokens").get<std::vector<int>>();
      inst.cf_answer = rec.at("cf_answer").get<int>();
      inst.meta = rec.value("meta", nlohmann::json::object());
      inst.validate();
      for (int t : inst.tokens) {
        require(t >= 0 && t < d.vocab_size, "token outside header vocab_size");
      }
      for (int t : inst.cf_tokens) {
        require(t >= 0 && t < d.vocab_size, "counterfactual token outside header vocab_size");
      }
      d.split(split_name_from(rec.at("split").get<std::string>())).push_back(std::move(inst));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("read_dataset: bad record at " + path + " line " +
                            std::to_string(line_no) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("read_dataset: bad record at " + path + " line " +
                            std::to_string(line_no) + ": " + e.what());
    }
  }
  return d;
}

}  // namespace circuitlab
