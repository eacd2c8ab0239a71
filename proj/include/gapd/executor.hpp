#pragma once

// Executes expression states against a KbStore and produces observations and
// entity anchors for student turns and gold sequences.

#include <algorithm>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gapd/action_lang.hpp"
#include "gapd/kb_store.hpp"

namespace gapd {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Status { Ok, Empty, Error };

inline std::string_view status_name(Status s) {
  switch (s) {
    case Status::Ok: return "ok";
    case Status::Empty: return "empty";
    case Status::Error: return "error";
  }
  return "";
}

struct EvalResult {
  ValueSet values;  // answer values; {count} for a COUNT root
  ValueSet anchor;  // entity anchor; the child set for a COUNT root
  std::optional<std::size_t> count;
  Status status = Status::Ok;
  std::string message;
};

namespace detail {

inline bool satisfies(CompareMode mode, double v, double n) {
  switch (mode) {
    case CompareMode::Le: return v <= n;
    case CompareMode::Lt: return v < n;
    case CompareMode::Ge: return v >= n;
    case CompareMode::Gt: return v > n;
  }
  return false;
}

struct Evaluator {
  const KbStore& kb;
  std::string diagnostic;

  ValueSet eval(const Expression& e) {
    switch (e->kind) {
      case NodeKind::Start:
        if (e->start_kind == StartKind::Type) return kb.members_of_type(e->symbol);
        if (e->start_kind == StartKind::Entity) return {EntityId{e->symbol}};
        return {e->literal};
      case NodeKind::Join: {
        ValueSet child = eval(e->child);
        if (child.empty()) return {};
        return kb.follow(child, e->relation, e->inverse ? Direction::Forward : Direction::Reverse);
      }
      case NodeKind::And: {
        ValueSet l = eval(e->child);
        ValueSet r = eval(e->right);
        ValueSet out;
        std::set_intersection(l.begin(), l.end(), r.begin(), r.end(), std::inserter(out, out.end()));
        return out;
      }
      case NodeKind::Cmp: {
        ValueSet out;
        double n = e->literal.number();
        for (const auto& v : eval(e->child)) {
          const auto* ent = std::get_if<EntityId>(&v);
          if (!ent) continue;
          bool keep = false;
          for (const auto& x : kb.values_of(*ent, e->relation)) {
            const auto* lit = std::get_if<Literal>(&x);
            if (!lit) continue;
            if (!lit->numeric())
              throw EvalError("type mismatch: comparison on non-numeric values of " + e->relation);
            keep = keep || satisfies(e->compare_mode, lit->number(), n);
          }
          if (keep) out.insert(v);
        }
        return out;
      }
      case NodeKind::Tc: {
        ValueSet out;
        for (const auto& v : eval(e->child)) {
          const auto* ent = std::get_if<EntityId>(&v);
          if (!ent) continue;
          bool keep = false;
          for (const auto& x : kb.values_of(*ent, e->relation)) {
            const auto* lit = std::get_if<Literal>(&x);
            if (!lit) continue;
            if (lit->type != Datatype::Date)
              throw EvalError("type mismatch: time constraint on non-date values of " + e->relation);
            keep = keep || lit->lexical == e->literal.lexical;
          }
          if (keep) out.insert(v);
        }
        return out;
      }
      case NodeKind::Arg: {
        std::optional<EntityId> best;
        double best_value = 0;
        bool want_max = e->order_mode == OrderMode::Max;
        for (const auto& v : eval(e->child)) {
          const auto* ent = std::get_if<EntityId>(&v);
          if (!ent) continue;
          for (const auto& x : kb.values_of(*ent, e->relation)) {
            const auto* lit = std::get_if<Literal>(&x);
            if (!lit) continue;
            if (!lit->numeric()) throw EvalError("type mismatch: ordering on non-numeric values of " + e->relation);
            double n = lit->number();
            // Entities are visited in id order, so strict improvement keeps the smallest id on ties.
            if (!best || (want_max ? n > best_value : n < best_value)) {
              best = *ent;
              best_value = n;
            }
          }
        }
        if (!best) {
          diagnostic = "no entity carries numeric values of " + e->relation;
          return {};
        }
        return {*best};
      }
      case NodeKind::Count:
        throw EvalError("COUNT may only appear as root");
    }
    return {};
  }
};

}  // namespace detail

inline EvalResult evaluate(const KbStore& kb, const Expression& e) {
  EvalResult r;
  detail::Evaluator ev{kb, {}};
  try {
    if (e->kind == NodeKind::Count) {
      r.anchor = ev.eval(e->child);
      r.count = r.anchor.size();
      r.values = {Literal::of_int(static_cast<long long>(*r.count))};
    } else {
      r.values = ev.eval(e);
      r.anchor = r.values;
      r.status = r.values.empty() ? Status::Empty : Status::Ok;
    }
    r.message = ev.diagnostic;
  } catch (const EvalError& err) {
    r = EvalResult{};
    r.status = Status::Error;
    r.message = err.what();
  }
  return r;
}

// ---------------------------------------------------------------------------
// Relation repair

inline std::set<std::string> relation_fragments(std::string_view rel) {
  std::set<std::string> out;
  std::string cur;
  for (char c : rel) {
    if (c == '.' || c == '_') {
      if (!cur.empty()) out.insert(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.insert(cur);
  return out;
}

inline double relation_similarity(std::string_view a, std::string_view b) {
  if (a == b) return 1.0;
  auto fa = relation_fragments(a), fb = relation_fragments(b);
  std::size_t inter = 0;
  for (const auto& f : fa) inter += fb.count(f);
  std::size_t uni = fa.size() + fb.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct RepairResult {
  std::string requested;
  std::string chosen;
  double score = 0;
  std::vector<std::pair<std::string, double>> alternatives;  // next best, at most 5
};

inline RepairResult repair_relation(const KbStore& kb, const ValueSet& sources, const std::string& requested,
                                    std::size_t top_k = 5) {
  std::set<std::string> names;
  for (const auto& [rel, _] : kb.incident_relations(sources)) names.insert(rel);
  if (names.empty()) throw EvalError("no candidate relations");
  RepairResult out;
  out.requested = requested;
  if (names.count(requested)) {
    out.chosen = requested;
    out.score = 1.0;
    return out;
  }
  std::vector<std::pair<std::string, double>> ranked;
  for (const auto& n : names) ranked.emplace_back(n, relation_similarity(requested, n));
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) { return x.second > y.second; });
  out.chosen = ranked[0].first;
  out.score = ranked[0].second;
  for (std::size_t i = 1; i < ranked.size() && out.alternatives.size() < top_k; ++i)
    out.alternatives.push_back(ranked[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Observations and anchors

struct Observation {
  std::vector<Value> results;  // sorted
  std::vector<std::string> functions;
  std::optional<RepairResult> repair;
  std::optional<std::size_t> count;
  Status status = Status::Ok;
  std::string message;
  bool terminal = false;

  std::string render() const {
    std::ostringstream os;
    if (!functions.empty()) {
      os << "functions:\n";
      for (const auto& f : functions) os << f << '\n';
    }
    if (repair) {
      os << "No relation matched " << repair->requested << " connected to the current entities; selected the most "
         << "similar relation " << repair->chosen << " to execute, score=" << std::fixed << std::setprecision(3)
         << repair->score << '.';
      os.unsetf(std::ios::fixed);
      if (!repair->alternatives.empty()) {
        os << " The other top-" << repair->alternatives.size() << " similar relations are ";
        for (std::size_t i = 0; i < repair->alternatives.size(); ++i) {
          if (i) os << (i + 1 == repair->alternatives.size() ? (i == 1 ? " and " : ", and ") : ", ");
          os << repair->alternatives[i].first;
        }
        os << '.';
      }
      os << '\n';
    }
    if (terminal) return os.str();
    if (status == Status::Error) {
      os << "Error: " << message << '\n';
      return os.str();
    }
    if (count) {
      os << "count: " << *count << '\n';
      return os.str();
    }
    os << "result_mid_list: [";
    if (!results.empty()) {
      os << ' ';
      for (std::size_t i = 0; i < results.size(); ++i) os << (i ? ", " : "") << to_string(results[i]);
      os << ' ';
    }
    os << "]\n";
    if (status == Status::Empty) os << "No results found.\n";
    if (!message.empty()) os << message << '\n';
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["status"] = status_name(status);
    auto& res = j["results"] = nlohmann::json::array();
    for (const auto& v : results) res.push_back(to_string(v));
    j["functions"] = functions;
    if (repair) {
      nlohmann::json alts = nlohmann::json::array();
      for (const auto& [n, s] : repair->alternatives) alts.push_back({{"relation", n}, {"score", s}});
      j["repair"] = {{"requested", repair->requested}, {"chosen", repair->chosen}, {"score", repair->score},
                     {"alternatives", alts}};
    }
    if (count) j["count"] = *count;
    if (!message.empty()) j["message"] = message;
    j["terminal"] = terminal;
    return j;
  }
};

struct AnchorState {
  enum class Source { Student, Gold };
  Source source = Source::Student;
  int index = 0;  // student turn t, or gold index m (0 is the initial state)
  ValueSet entities;
  Expression snapshot;  // null for an initial state
};

// E(.) of an environment: the active slot's anchor, or the initial entities when nothing is built yet.
inline ValueSet state_entities(const KbStore& kb, const ExpressionEnv& env, const ValueSet& initial) {
  if (env.empty()) return initial;
  return evaluate(kb, env.active_expression()).anchor;
}

struct StepResult {
  ExpressionEnv env;
  Observation observation;
  std::optional<AnchorState> anchor;  // post-action state; absent on Answer
  Action executed;                    // after direction resolution and repair
};

namespace detail {

inline ValueSet source_set(const KbStore& kb, const ExpressionEnv& env, const Source& src) {
  if (const auto* e = std::get_if<EntityId>(&src)) return {*e};
  return evaluate(kb, env.slot(std::get<SlotRef>(src).index)).values;
}

}  // namespace detail

inline StepResult step(const KbStore& kb, const ExpressionEnv& env, const Action& action, const ValueSet& initial,
                       int turn = 0) {
  StepResult out;
  out.env = env;
  out.executed = action;
  if (action.kind == ActionKind::Answer) {
    out.observation.terminal = true;
    return out;
  }
  auto fail = [&](const std::string& msg) {
    out.env = env;
    out.observation.status = Status::Error;
    out.observation.message = msg;
    out.anchor = AnchorState{AnchorState::Source::Student, turn, state_entities(kb, env, initial),
                             env.empty() ? nullptr : env.active_expression()};
    return out;
  };
  try {
    Action resolved = action;
    if (action.kind == ActionKind::FindRelation) {
      ValueSet sources = detail::source_set(kb, env, action.source);
      bool fwd = kb.incident(sources, action.relation, Direction::Forward);
      bool rev = kb.incident(sources, action.relation, Direction::Reverse);
      if (action.inverse ? (*action.inverse ? fwd : rev) : (fwd || rev)) {
        if (!action.inverse) resolved.inverse = fwd;
      } else {
        auto rep = repair_relation(kb, sources, action.relation);
        resolved.relation = rep.chosen;
        resolved.inverse = kb.incident(sources, rep.chosen, Direction::Forward);
        if (rep.chosen != action.relation) out.observation.repair = rep;
      }
    }
    out.env = apply_action(env, resolved);
    out.executed = resolved;
  } catch (const ActionError& err) {
    return fail(err.what());
  } catch (const EvalError& err) {
    return fail(err.what());
  }
  auto r = evaluate(kb, out.env.active_expression());
  if (r.status == Status::Error) return fail(r.message);
  out.observation.functions = out.env.history;
  out.observation.results.assign(r.values.begin(), r.values.end());
  out.observation.count = r.count;
  out.observation.status = r.status;
  out.observation.message = r.message;
  out.anchor = AnchorState{AnchorState::Source::Student, turn, r.anchor, out.env.active_expression()};
  return out;
}

// Resolves answer items (entities, literals, slot references) to a value set.
inline ValueSet answer_values(const KbStore& kb, const ExpressionEnv& env, const Action& answer) {
  ValueSet out;
  for (const auto& item : answer.answers) {
    if (const auto* e = std::get_if<EntityId>(&item)) {
      out.insert(*e);
    } else if (const auto* l = std::get_if<Literal>(&item)) {
      out.insert(*l);
    } else {
      int idx = std::get<SlotRef>(item).index;
      if (idx < 1 || idx > static_cast<int>(env.slots.size())) continue;
      auto r = evaluate(kb, env.slot(idx));
      out.insert(r.values.begin(), r.values.end());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gold execution

class GoldExecutionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Gold anchors u_0..u_M; u_0 holds the topic entities.
inline std::vector<AnchorState> execute_gold(const KbStore& kb, const std::vector<Action>& gold,
                                             const ValueSet& topic) {
  std::vector<AnchorState> out;
  out.push_back(AnchorState{AnchorState::Source::Gold, 0, topic, nullptr});
  ExpressionEnv env;
  for (std::size_t m = 0; m < gold.size(); ++m) {
    try {
      env = apply_action(env, gold[m]);
    } catch (const ActionError& err) {
      throw GoldExecutionError("gold action " + std::to_string(m + 1) + " rejected: " + err.what());
    }
    auto r = evaluate(kb, env.active_expression());
    if (r.status == Status::Error)
      throw GoldExecutionError("gold action " + std::to_string(m + 1) + " failed: " + r.message);
    out.push_back(AnchorState{AnchorState::Source::Gold, static_cast<int>(m + 1), r.anchor, env.active_expression()});
  }
  return out;
}

// Gold anchors are executed once per task and reused across steps.
class GoldCache {
 public:
  const std::vector<AnchorState>& get(const std::string& task_id, const KbStore& kb, const std::vector<Action>& gold,
                                      const ValueSet& topic) {
    auto it = cache_.find(task_id);
    if (it != cache_.end()) return it->second;
    return cache_.emplace(task_id, execute_gold(kb, gold, topic)).first->second;
  }
  std::size_t size() const { return cache_.size(); }

 private:
  std::map<std::string, std::vector<AnchorState>> cache_;
};

}  // namespace gapd
