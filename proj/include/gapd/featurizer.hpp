#pragma once

// Context construction for the token policy: vocabulary, tokenization, a per-turn
// grammar tracker, and the feature layout shared by student and teacher contexts.

#include <algorithm>
#include <array>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gapd/action_lang.hpp"
#include "gapd/executor.hpp"
#include "gapd/kb_generator.hpp"
#include "gapd/kb_store.hpp"
#include "gapd/policy.hpp"

namespace gapd {

inline constexpr std::array<const char*, 3> kStatusTokens = {"<status:ok>", "<status:empty>", "<status:error>"};

enum CandFeature : int {
  kValid = 0,
  kTopic,
  kObserved,
  kActiveSlot,
  kRelForward,
  kRelReverse,
  kTypeMember,
  kQuestionLiteral,
  kCloseComplete,
  kGoldCopy,
  kNumCandFeatures
};

inline const char* cand_feature_name(int f) {
  static const char* names[] = {"valid",         "topic_entity",     "observed_entity", "active_slot",
                                "relation_fwd",  "relation_rev",     "type_member",     "question_literal",
                                "close_complete", "gold_copy"};
  return names[f];
}

// Hand-set starting weights: a grammar and schema prior, not a trained model.
struct PriorConfig {
  double valid = 12.0;
  double topic = 2.0;
  double observed = 0.5;
  double active_slot = 1.0;
  double relation_forward = 2.5;
  double relation_reverse = 0.5;
  double type_member = 2.0;
  double question_literal = 3.0;
  double close_complete = 1.5;
  double gold_copy = 8.0;
  double first_turn_find = 1.5;  // Find_relation at turn 1
  double answer_after_ok = 1.0;  // Answer after a non-empty result
};

inline void to_json(nlohmann::json& j, const PriorConfig& p) {
  j = {{"valid", p.valid},
       {"topic", p.topic},
       {"observed", p.observed},
       {"active_slot", p.active_slot},
       {"relation_forward", p.relation_forward},
       {"relation_reverse", p.relation_reverse},
       {"type_member", p.type_member},
       {"question_literal", p.question_literal},
       {"close_complete", p.close_complete},
       {"gold_copy", p.gold_copy},
       {"first_turn_find", p.first_turn_find},
       {"answer_after_ok", p.answer_after_ok}};
}

inline void from_json(const nlohmann::json& j, PriorConfig& p) {
  PriorConfig d;
  p.valid = j.value("valid", d.valid);
  p.topic = j.value("topic", d.topic);
  p.observed = j.value("observed", d.observed);
  p.active_slot = j.value("active_slot", d.active_slot);
  p.relation_forward = j.value("relation_forward", d.relation_forward);
  p.relation_reverse = j.value("relation_reverse", d.relation_reverse);
  p.type_member = j.value("type_member", d.type_member);
  p.question_literal = j.value("question_literal", d.question_literal);
  p.close_complete = j.value("close_complete", d.close_complete);
  p.gold_copy = j.value("gold_copy", d.gold_copy);
  p.first_turn_find = j.value("first_turn_find", d.first_turn_find);
  p.answer_after_ok = j.value("answer_after_ok", d.answer_after_ok);
}

enum class ArgType { Src, Slot, SlotOrType, Rel, OrderMode, CmpMode, Number, Date, Items };

inline const std::vector<ArgType>& arg_types(ActionKind k) {
  static const std::vector<ArgType> fr{ArgType::Src, ArgType::Rel}, merge{ArgType::Slot, ArgType::SlotOrType},
      order{ArgType::OrderMode, ArgType::Slot, ArgType::Rel}, cmp{ArgType::CmpMode, ArgType::Rel, ArgType::Number},
      tc{ArgType::Rel, ArgType::Date}, count{ArgType::Slot}, answer{ArgType::Items};
  switch (k) {
    case ActionKind::FindRelation: return fr;
    case ActionKind::Merge: return merge;
    case ActionKind::Order: return order;
    case ActionKind::Compare: return cmp;
    case ActionKind::TimeConstraint: return tc;
    case ActionKind::Count: return count;
    case ActionKind::Answer: return answer;
  }
  return answer;
}

struct QuestionFeatures {
  int qtype = -1;
  std::vector<int> lexemes;          // lexeme indexes
  std::vector<int> literal_tokens;   // vocabulary ids
};

class Featurizer;

// Everything a turn's contexts depend on besides the in-turn prefix.
struct TurnData {
  QuestionFeatures question;
  int turn = 1;
  int last_status = 0;  // 0 none, 1 ok, 2 empty, 3 error
  int last_kind = 0;    // 0 none, else 1 + ActionKind
  int live_slots = 0;
  int active_slot = 0;
  std::vector<ValueSet> slot_values;
  ValueSet topic;
  std::vector<int> topic_tokens;
  std::vector<int> visible_tokens;   // topic plus every entity observed so far
  std::vector<int> observed_tokens;  // entities in the last observation
  std::vector<int> base_rows;
  const KbStore* kb = nullptr;
};

class Featurizer {
 public:
  static constexpr int kRoles = 100;
  static constexpr int kMaxItems = 6;

  Featurizer(const KbStore& kb, const std::vector<TaskSpec>& tasks, int max_turns = 8, int max_slots = 4)
      : max_turns_(max_turns), max_slots_(max_slots) {
    if (max_turns < 1 || max_slots < 1) throw PolicyError("featurizer limits must be >= 1");
    build_vocab(kb, tasks);
    build_lexicon(tasks);
    layout();
  }

  const Vocab& vocab() const { return vocab_; }
  int rows() const { return rows_; }
  int max_turns() const { return max_turns_; }
  int max_slots() const { return max_slots_; }
  int eot() const { return eot_; }
  int info_open() const { return info_open_; }
  int info_close() const { return info_close_; }
  int status_token(Status s) const { return status_[static_cast<int>(s)]; }
  int gold_kind_base() const { return gold_kind_base_; }
  bool is_gold_row(int r) const { return r >= gold_kind_base_ && r < gold_kind_base_ + kNumActionKinds; }

  nlohmann::json layout_json() const {
    return {{"bias", 0},
            {"roles", {1, kRoles}},
            {"lexemes", {lex_base_, static_cast<int>(lexemes_.size())}},
            {"qtype_turn", {qtype_turn_base_, static_cast<int>(qtypes_.size()) * max_turns_}},
            {"turn", {turn_base_, max_turns_}},
            {"status", {status_base_, 4}},
            {"last_kind", {kind_base_, kNumActionKinds + 1}},
            {"live_slots", {live_base_, max_slots_ + 1}},
            {"gold_kind", {gold_kind_base_, kNumActionKinds}},
            {"rows", rows_},
            {"vocab", vocab_.size()},
            {"scalars", kNumCandFeatures}};
  }

  // ---- tokenization

  std::vector<int> tokenize(std::string_view text) const {
    std::vector<int> out;
    std::istringstream is{std::string(text)};
    std::string piece;
    while (is >> piece) {
      if (auto id = vocab_.find(piece)) {
        out.push_back(*id);
        continue;
      }
      std::size_t start = 0;
      while (start < piece.size()) {
        std::size_t dot = piece.find('.', start + 1);
        std::string frag = piece.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        out.push_back(vocab_.id(frag));
        if (dot == std::string::npos) break;
        start = dot;
      }
    }
    return out;
  }

  std::string detokenize(const std::vector<int>& tokens) const {
    std::string out;
    for (int t : tokens) {
      if (t == eot_) continue;
      if (vocab_.cls(t) != TokenClass::Fragment && !out.empty()) out += ' ';
      out += vocab_.token(t);
    }
    return out;
  }

  // Student-surface tokens of an action (no direction marker), ending with <eot>.
  std::vector<int> action_tokens(const Action& a) const {
    auto toks = tokenize(render_action(a, false));
    toks.push_back(eot_);
    return toks;
  }

  QuestionFeatures question(const TaskSpec& task) const {
    QuestionFeatures q;
    std::istringstream is(task.question);
    std::string w;
    bool first = true;
    while (is >> w) {
      if (auto lit = infer_literal(w)) {
        if (auto id = vocab_.find(lit->lexical)) q.literal_tokens.push_back(*id);
      } else {
        auto it = lexemes_.find(w);
        if (it != lexemes_.end()) q.lexemes.push_back(it->second);
        if (first) {
          auto jt = qtypes_.find(w);
          if (jt != qtypes_.end()) q.qtype = jt->second;
        }
      }
      first = false;
    }
    return q;
  }

  // ---- parameters

  PolicyParams initial_params(const PriorConfig& prior = {}) const {
    PolicyParams p(rows_, vocab_.size(), kNumCandFeatures);
    p.w(kValid) = prior.valid;
    p.w(kTopic) = prior.topic;
    p.w(kObserved) = prior.observed;
    p.w(kActiveSlot) = prior.active_slot;
    p.w(kRelForward) = prior.relation_forward;
    p.w(kRelReverse) = prior.relation_reverse;
    p.w(kTypeMember) = prior.type_member;
    p.w(kQuestionLiteral) = prior.question_literal;
    p.w(kCloseComplete) = prior.close_complete;
    p.w(kGoldCopy) = prior.gold_copy;
    p.W(turn_base_, keyword_[static_cast<int>(ActionKind::FindRelation)]) = prior.first_turn_find;
    p.W(status_base_ + 1, keyword_[static_cast<int>(ActionKind::Answer)]) = prior.answer_after_ok;
    return p;
  }

  // ---- contexts

  std::shared_ptr<const TurnData> turn_data(const KbStore& kb, const QuestionFeatures& q, const ValueSet& topic,
                                            int turn, int last_status, int last_kind, const ExpressionEnv& env,
                                            const std::set<EntityId>& visible, const std::vector<Value>& observed) const {
    auto d = std::make_shared<TurnData>();
    d->question = q;
    d->turn = turn;
    d->last_status = last_status;
    d->last_kind = last_kind;
    d->live_slots = std::min(static_cast<int>(env.slots.size()), max_slots_);
    d->active_slot = env.active <= max_slots_ ? env.active : 0;
    for (int i = 1; i <= d->live_slots; ++i) d->slot_values.push_back(evaluate(kb, env.slot(i)).values);
    d->topic = topic;
    for (const auto& v : topic)
      if (const auto* e = std::get_if<EntityId>(&v))
        if (auto id = vocab_.find(e->id)) d->topic_tokens.push_back(*id);
    for (const auto& e : visible)
      if (auto id = vocab_.find(e.id)) d->visible_tokens.push_back(*id);
    for (const auto& v : observed)
      if (const auto* e = std::get_if<EntityId>(&v))
        if (auto id = vocab_.find(e->id)) d->observed_tokens.push_back(*id);
    std::sort(d->visible_tokens.begin(), d->visible_tokens.end());
    d->kb = &kb;
    int t = std::min(turn, max_turns_) - 1;
    auto& rows = d->base_rows;
    rows.push_back(0);
    for (int l : q.lexemes) rows.push_back(lex_base_ + l);
    if (q.qtype >= 0) rows.push_back(qtype_turn_base_ + q.qtype * max_turns_ + t);
    rows.push_back(turn_base_ + t);
    rows.push_back(status_base_ + last_status);
    rows.push_back(kind_base_ + last_kind);
    rows.push_back(live_base_ + d->live_slots);
    return d;
  }

  // Teacher context: the student context plus the gold block (gold-kind row and gold-copy feature).
  ContextState teacher_context(const ContextState& student, const std::vector<int>& gold_tokens, std::size_t position,
                               ActionKind gold_kind) const {
    ContextState t = student;
    t.teacher = true;
    t.rows.push_back(gold_kind_base_ + static_cast<int>(gold_kind));
    if (position < gold_tokens.size()) t.cands.push_back({gold_tokens[position], kGoldCopy, 1.0});
    return t;
  }

  class Turn;
  Turn start_turn(std::shared_ptr<const TurnData> data) const;

  // Ids used by the grammar tracker.
  int keyword(ActionKind k) const { return keyword_[static_cast<int>(k)]; }
  int open() const { return open_; }
  int sep() const { return sep_; }
  int close() const { return close_; }
  int slot_token(int index) const { return slot_[static_cast<std::size_t>(index - 1)]; }
  const std::vector<int>& keywords() const { return keyword_; }
  const std::vector<int>& order_modes() const { return order_mode_; }
  const std::vector<int>& compare_modes() const { return cmp_mode_; }
  const std::vector<int>& numeric_literals() const { return numeric_literals_; }
  const std::vector<int>& date_literals() const { return date_literals_; }
  int dtype_token(Datatype t) const { return dtype_[static_cast<int>(t)]; }
  std::optional<Datatype> literal_type(int token) const {
    auto it = literal_type_.find(token);
    if (it == literal_type_.end()) return std::nullopt;
    return it->second;
  }

  struct Trie {
    struct Node {
      std::map<int, int> next;
      std::string name;  // set on complete names
    };
    std::vector<Node> nodes{Node{}};
    void insert(const std::vector<int>& path, const std::string& name) {
      int cur = 0;
      for (int t : path) {
        auto it = nodes[static_cast<std::size_t>(cur)].next.find(t);
        if (it == nodes[static_cast<std::size_t>(cur)].next.end()) {
          nodes.push_back(Node{});
          int id = static_cast<int>(nodes.size()) - 1;
          nodes[static_cast<std::size_t>(cur)].next.emplace(t, id);
          cur = id;
        } else {
          cur = it->second;
        }
      }
      nodes[static_cast<std::size_t>(cur)].name = name;
    }
  };
  const Trie& relation_trie() const { return rel_trie_; }
  const Trie& type_trie() const { return type_trie_; }
  const std::vector<int>& name_tokens(const std::string& name) const { return name_tokens_.at(name); }

  int role_row(int role) const { return 1 + role; }

 private:
  static std::vector<std::string> split_name(const std::string& name) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
      std::size_t dot = name.find('.', start);
      out.push_back(start == 0 ? name.substr(0, dot) : "." + name.substr(start, dot == std::string::npos ? std::string::npos : dot - start));
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    return out;
  }

  void build_vocab(const KbStore& kb, const std::vector<TaskSpec>& tasks) {
    eot_ = vocab_.add("<eot>", TokenClass::Special);
    info_open_ = vocab_.add("<information>", TokenClass::Special);
    info_close_ = vocab_.add("</information>", TokenClass::Special);
    for (const char* s : kStatusTokens) status_.push_back(vocab_.add(s, TokenClass::Special));
    for (int k = 0; k < kNumActionKinds; ++k)
      keyword_.push_back(vocab_.add(std::string(action_name(static_cast<ActionKind>(k))), TokenClass::Keyword));
    open_ = vocab_.add("[", TokenClass::Open);
    sep_ = vocab_.add("|", TokenClass::Sep);
    close_ = vocab_.add("]", TokenClass::Close);
    for (auto m : {OrderMode::Max, OrderMode::Min}) order_mode_.push_back(vocab_.add(std::string(mode_name(m)), TokenClass::OrderMode));
    for (auto m : {CompareMode::Le, CompareMode::Lt, CompareMode::Ge, CompareMode::Gt})
      cmp_mode_.push_back(vocab_.add(std::string(mode_name(m)), TokenClass::CompareMode));
    for (int i = 1; i <= max_slots_; ++i) slot_.push_back(vocab_.add(slot_name(i), TokenClass::Slot));
    for (auto t : {Datatype::Float, Datatype::Int, Datatype::Date})
      dtype_.push_back(vocab_.add("(" + std::string(datatype_tag(t)) + ")", TokenClass::Dtype));

    std::set<std::string> relations = kb.relation_names();
    std::set<std::string> types;
    for (const auto& [t, _] : kb.types()) types.insert(t);
    std::set<std::string> heads, frags;
    for (const auto* names : {&relations, &types})
      for (const auto& n : *names) {
        auto parts = split_name(n);
        heads.insert(parts[0]);
        for (std::size_t i = 1; i < parts.size(); ++i) frags.insert(parts[i]);
      }
    for (const auto& h : heads) vocab_.add(h, TokenClass::Head);
    for (const auto& f : frags) vocab_.add(f, TokenClass::Fragment);
    for (const auto* names : {&relations, &types})
      for (const auto& n : *names) {
        std::vector<int> path;
        for (const auto& part : split_name(n)) path.push_back(vocab_.id(part));
        name_tokens_[n] = path;
        (names == &relations ? rel_trie_ : type_trie_).insert(path, n);
      }
    for (const auto& e : kb.entities()) vocab_.add(e.id, TokenClass::Entity);
    std::set<Literal> literals;
    for (const auto& t : kb.triples())
      if (const auto* l = std::get_if<Literal>(&t.object)) literals.insert(*l);
    for (const auto& task : tasks) {
      std::istringstream is(task.question);
      std::string w;
      while (is >> w)
        if (auto l = infer_literal(w)) literals.insert(*l);
      for (const auto& e : task.topic_entities) vocab_.add(e.id, TokenClass::Entity);
    }
    for (const auto& l : literals) {
      int id = vocab_.add(l.lexical, TokenClass::Literal);
      literal_type_[id] = l.type;
      (l.type == Datatype::Date ? date_literals_ : numeric_literals_).push_back(id);
    }
    std::sort(numeric_literals_.begin(), numeric_literals_.end());
    std::sort(date_literals_.begin(), date_literals_.end());
  }

  void build_lexicon(const std::vector<TaskSpec>& tasks) {
    std::set<std::string> words, firsts;
    for (const auto& t : tasks) {
      std::istringstream is(t.question);
      std::string w;
      bool first = true;
      while (is >> w) {
        if (!infer_literal(w)) {
          words.insert(w);
          if (first) firsts.insert(w);
        }
        first = false;
      }
    }
    for (const auto& w : words) lexemes_.emplace(w, static_cast<int>(lexemes_.size()));
    for (const auto& w : firsts) qtypes_.emplace(w, static_cast<int>(qtypes_.size()));
  }

  void layout() {
    lex_base_ = 1 + kRoles;
    qtype_turn_base_ = lex_base_ + static_cast<int>(lexemes_.size());
    turn_base_ = qtype_turn_base_ + static_cast<int>(qtypes_.size()) * max_turns_;
    status_base_ = turn_base_ + max_turns_;
    kind_base_ = status_base_ + 4;
    live_base_ = kind_base_ + kNumActionKinds + 1;
    gold_kind_base_ = live_base_ + max_slots_ + 1;
    rows_ = gold_kind_base_ + kNumActionKinds;
  }

  int max_turns_;
  int max_slots_;
  Vocab vocab_;
  int eot_ = 0, info_open_ = 0, info_close_ = 0, open_ = 0, sep_ = 0, close_ = 0;
  std::vector<int> status_, keyword_, order_mode_, cmp_mode_, slot_, dtype_;
  std::vector<int> numeric_literals_, date_literals_;
  std::map<int, Datatype> literal_type_;
  Trie rel_trie_, type_trie_;
  std::map<std::string, std::vector<int>> name_tokens_;
  std::map<std::string, int> lexemes_, qtypes_;
  int lex_base_ = 0, qtype_turn_base_ = 0, turn_base_ = 0, status_base_ = 0, kind_base_ = 0, live_base_ = 0,
      gold_kind_base_ = 0, rows_ = 0;
};

// Tracks the grammar position inside one turn and emits the context for the next token.
class Featurizer::Turn {
 public:
  enum class Phase { Start, Open, Arg, Eot, Invalid };

  Turn(const Featurizer* f, std::shared_ptr<const TurnData> d) : f_(f), d_(std::move(d)) {}

  Phase phase() const { return phase_; }

  int role() const {
    switch (phase_) {
      case Phase::Start: return 0;
      case Phase::Open: return 1 + kind_;
      case Phase::Arg: return 8 + (kind_ * 3 + arg_) * 4 + std::min(sub_, 3);
      case Phase::Eot: return 92 + kind_;
      case Phase::Invalid: return 99;
    }
    return 99;
  }

  std::vector<int> valid_tokens() const {
    std::vector<int> out;
    switch (phase_) {
      case Phase::Start:
        // Only Find_relation and Answer can open an empty expression environment.
        if (d_->active_slot > 0) return f_->keywords();
        return {f_->keywords()[static_cast<int>(ActionKind::FindRelation)],
                f_->keywords()[static_cast<int>(ActionKind::Answer)]};
      case Phase::Open: return {f_->open()};
      case Phase::Eot:
      case Phase::Invalid: return {f_->eot()};
      case Phase::Arg: break;
    }
    const auto& args = arg_types(static_cast<ActionKind>(kind_));
    ArgType at = args[static_cast<std::size_t>(arg_)];
    if (complete_) {
      out.push_back(arg_ + 1 < static_cast<int>(args.size()) ? f_->sep() : f_->close());
      if (at != ArgType::Items || items_ >= kMaxItems) return out;
    }
    auto add_slots = [&] {
      for (int i = 1; i <= d_->live_slots; ++i) out.push_back(f_->slot_token(i));
    };
    auto add_children = [&](const Trie& trie) {
      for (const auto& [tok, _] : trie.nodes[static_cast<std::size_t>(node_)].next) out.push_back(tok);
    };
    switch (at) {
      case ArgType::Src:
      case ArgType::Items:
        add_slots();
        out.insert(out.end(), d_->visible_tokens.begin(), d_->visible_tokens.end());
        break;
      case ArgType::Slot: add_slots(); break;
      case ArgType::SlotOrType:
        if (sub_ == 0) add_slots();
        add_children(f_->type_trie());
        break;
      case ArgType::Rel: add_children(f_->relation_trie()); break;
      case ArgType::OrderMode: return f_->order_modes();
      case ArgType::CmpMode: return f_->compare_modes();
      case ArgType::Number:
        if (sub_ == 0) return f_->numeric_literals();
        return {f_->dtype_token(pending_type_)};
      case ArgType::Date:
        if (sub_ == 0) return f_->date_literals();
        return {f_->dtype_token(Datatype::Date)};
    }
    return out;
  }

  ContextState context() const {
    ContextState ctx;
    ctx.rows = d_->base_rows;
    ctx.rows.push_back(f_->role_row(role()));
    auto valid = valid_tokens();
    for (int v : valid) ctx.cands.push_back({v, kValid, 1.0});
    if (phase_ != Phase::Arg) return ctx;
    ArgType at = arg_types(static_cast<ActionKind>(kind_))[static_cast<std::size_t>(arg_)];
    if (complete_) {
      ctx.cands.push_back({valid.front(), kCloseComplete, 1.0});
      if (at != ArgType::Items) return ctx;
    }
    auto contains = [&](int v) { return std::find(valid.begin(), valid.end(), v) != valid.end(); };
    switch (at) {
      case ArgType::Src:
      case ArgType::Items:
        if (at == ArgType::Src)
          for (int v : d_->topic_tokens)
            if (contains(v)) ctx.cands.push_back({v, kTopic, 1.0});
        for (int v : d_->observed_tokens)
          if (contains(v)) ctx.cands.push_back({v, kObserved, 1.0});
        [[fallthrough]];
      case ArgType::Slot:
        if (d_->active_slot > 0) ctx.cands.push_back({f_->slot_token(d_->active_slot), kActiveSlot, 1.0});
        break;
      case ArgType::SlotOrType:
        if (sub_ == 0 && d_->active_slot > 0 && d_->active_slot != left_slot_)
          ctx.cands.push_back({f_->slot_token(d_->active_slot), kActiveSlot, 1.0});
        for (const auto& path : type_candidates_) push_continuation(ctx, path, kTypeMember);
        break;
      case ArgType::Rel:
        for (const auto& path : rel_forward_) push_continuation(ctx, path, kRelForward);
        for (const auto& path : rel_reverse_) push_continuation(ctx, path, kRelReverse);
        break;
      case ArgType::Number:
      case ArgType::Date:
        if (sub_ == 0)
          for (int v : d_->question.literal_tokens)
            if (contains(v)) ctx.cands.push_back({v, kQuestionLiteral, 1.0});
        break;
      default: break;
    }
    return ctx;
  }

  void push(int tok) {
    if (phase_ == Phase::Eot || phase_ == Phase::Invalid) return;
    auto valid = valid_tokens();
    if (std::find(valid.begin(), valid.end(), tok) == valid.end()) {
      phase_ = Phase::Invalid;
      return;
    }
    switch (phase_) {
      case Phase::Start:
        kind_ = static_cast<int>(std::find(f_->keywords().begin(), f_->keywords().end(), tok) - f_->keywords().begin());
        phase_ = Phase::Open;
        return;
      case Phase::Open:
        phase_ = Phase::Arg;
        start_arg(0);
        return;
      default: break;
    }
    if (tok == f_->close()) {
      phase_ = Phase::Eot;
      return;
    }
    if (tok == f_->sep()) {
      start_arg(arg_ + 1);
      return;
    }
    consume(tok);
  }

 private:
  void push_continuation(ContextState& ctx, const std::vector<int>& path, int feature) const {
    if (prefix_.size() >= path.size()) return;
    if (!std::equal(prefix_.begin(), prefix_.end(), path.begin())) return;
    CandidateFeature c{path[prefix_.size()], feature, 1.0};
    if (std::find(ctx.cands.begin(), ctx.cands.end(), c) == ctx.cands.end()) ctx.cands.push_back(c);
  }

  const ValueSet& slot_set(int index) const {
    static const ValueSet kEmpty;
    if (index < 1 || index > d_->live_slots) return kEmpty;
    return d_->slot_values[static_cast<std::size_t>(index - 1)];
  }

  void start_arg(int arg) {
    arg_ = arg;
    sub_ = 0;
    node_ = 0;
    complete_ = false;
    items_ = 0;
    prefix_.clear();
    auto kind = static_cast<ActionKind>(kind_);
    ArgType at = arg_types(kind)[static_cast<std::size_t>(arg_)];
    if (at == ArgType::Rel) {
      const ValueSet* sources = nullptr;
      if (kind == ActionKind::FindRelation || kind == ActionKind::Order) {
        sources = &source_;
      } else {
        sources = &slot_set(d_->active_slot);
      }
      rel_forward_.clear();
      rel_reverse_.clear();
      if (!sources->empty()) {
        std::set<std::string> fwd;
        auto inc = d_->kb->incident_relations(*sources);
        for (const auto& [rel, dir] : inc)
          if (dir == Direction::Forward) fwd.insert(rel);
        for (const auto& [rel, dir] : inc) {
          if (dir == Direction::Forward)
            rel_forward_.push_back(f_->name_tokens(rel));
          else if (!fwd.count(rel))
            rel_reverse_.push_back(f_->name_tokens(rel));
        }
      }
    } else if (at == ArgType::SlotOrType) {
      type_candidates_.clear();
      const ValueSet& left = slot_set(left_slot_);
      for (const auto& [type, members] : d_->kb->types()) {
        for (const auto& v : left) {
          const auto* e = std::get_if<EntityId>(&v);
          if (e && members.count(*e)) {
            type_candidates_.push_back(f_->name_tokens(type));
            break;
          }
        }
      }
    }
  }

  void consume(int tok) {
    ArgType at = arg_types(static_cast<ActionKind>(kind_))[static_cast<std::size_t>(arg_)];
    ++sub_;
    const auto& vocab = f_->vocab();
    switch (at) {
      case ArgType::Src:
        if (vocab.cls(tok) == TokenClass::Slot) {
          int idx = *parse_slot_ref(vocab.token(tok));
          source_ = slot_set(idx);
        } else {
          source_ = {EntityId{vocab.token(tok)}};
        }
        complete_ = true;
        break;
      case ArgType::Slot: {
        int idx = *parse_slot_ref(vocab.token(tok));
        if (arg_ == 0) left_slot_ = idx;
        if (static_cast<ActionKind>(kind_) == ActionKind::Order) source_ = slot_set(idx);
        complete_ = true;
        break;
      }
      case ArgType::SlotOrType:
        if (sub_ == 1 && vocab.cls(tok) == TokenClass::Slot) {
          complete_ = true;
          break;
        }
        [[fallthrough]];
      case ArgType::Rel: {
        const Trie& trie = at == ArgType::Rel ? f_->relation_trie() : f_->type_trie();
        node_ = trie.nodes[static_cast<std::size_t>(node_)].next.at(tok);
        prefix_.push_back(tok);
        complete_ = !trie.nodes[static_cast<std::size_t>(node_)].name.empty();
        break;
      }
      case ArgType::OrderMode:
      case ArgType::CmpMode: complete_ = true; break;
      case ArgType::Number:
      case ArgType::Date:
        if (sub_ == 1)
          pending_type_ = f_->literal_type(tok).value_or(Datatype::Int);
        else
          complete_ = true;
        break;
      case ArgType::Items:
        ++items_;
        complete_ = true;
        break;
    }
  }

  const Featurizer* f_;
  std::shared_ptr<const TurnData> d_;
  Phase phase_ = Phase::Start;
  int kind_ = 0;
  int arg_ = 0;
  int sub_ = 0;
  int node_ = 0;
  int items_ = 0;
  int left_slot_ = 0;
  bool complete_ = false;
  Datatype pending_type_ = Datatype::Int;
  ValueSet source_;
  std::vector<int> prefix_;
  std::vector<std::vector<int>> rel_forward_, rel_reverse_, type_candidates_;
};

inline Featurizer::Turn Featurizer::start_turn(std::shared_ptr<const TurnData> data) const { return Turn(this, std::move(data)); }

}  // namespace gapd
