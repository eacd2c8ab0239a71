#pragma once

// Multi-turn interaction between the token policy and the KB executor.

#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "gapd/action_lang.hpp"
#include "gapd/executor.hpp"
#include "gapd/featurizer.hpp"
#include "gapd/kb_generator.hpp"
#include "gapd/policy.hpp"
#include "gapd/rng.hpp"

namespace gapd {

struct PreparedTask {
  TaskSpec spec;
  Expression gold;
  std::vector<Action> gold_actions;
  std::vector<std::vector<int>> gold_tokens;  // student-surface tokens of each gold action
  ValueSet topic;
  QuestionFeatures question;
};

// A KB, its task suite with derived gold actions, and the policy featurizer.
class World {
 public:
  World(SyntheticWorld sw, int max_turns = 8, int max_slots = 4)
      : kb_(std::make_shared<KbStore>(std::move(sw.kb))), featurizer_(*kb_, sw.tasks, max_turns, max_slots) {
    for (auto& spec : sw.tasks) {
      PreparedTask t;
      try {
        t.gold = parse_logical_form(spec.gold_logical_form);
        t.gold_actions = derive_gold_actions(t.gold);
        for (const auto& a : t.gold_actions) t.gold_tokens.push_back(featurizer_.action_tokens(a));
        for (const auto& e : spec.topic_entities) t.topic.insert(e);
        t.question = featurizer_.question(spec);
        gold_.get(spec.id, *kb_, t.gold_actions, t.topic);
      } catch (const std::exception& err) {
        excluded_.push_back(spec.id + ": " + err.what());
        continue;
      }
      t.spec = std::move(spec);
      tasks_.push_back(std::move(t));
    }
    if (tasks_.empty()) throw GoldExecutionError("no task survived gold preparation");
  }

  const KbStore& kb() const { return *kb_; }
  const Featurizer& featurizer() const { return featurizer_; }
  const std::vector<PreparedTask>& tasks() const { return tasks_; }
  const std::vector<std::string>& excluded() const { return excluded_; }

  const std::vector<AnchorState>& gold_anchors(const PreparedTask& t) const {
    return gold_.get(t.spec.id, *kb_, t.gold_actions, t.topic);
  }

 private:
  std::shared_ptr<KbStore> kb_;
  Featurizer featurizer_;
  std::vector<PreparedTask> tasks_;
  std::vector<std::string> excluded_;
  mutable GoldCache gold_;
};

struct RolloutConfig {
  double temperature = 1.0;
  double top_p = 0.99;
  int max_tokens = 64;
  int max_turns = 8;
  bool greedy = false;
};

struct TurnRecord {
  int turn = 0;  // 1-based
  std::vector<int> tokens;
  std::vector<ContextState> contexts;
  std::vector<double> logp_old;
  std::size_t first_token = 0;  // offset of tokens[0] in the rollout sequence
  std::string text;
  std::optional<Action> action;  // parsed action as emitted
  std::string parse_error;
  Observation observation;
  ValueSet pre_entities;   // E(s_t)
  ValueSet post_entities;  // next entity set
  bool is_answer = false;
};

struct Rollout {
  std::string task_id;
  int response_index = 0;
  std::vector<TurnRecord> turns;
  std::vector<int> sequence;
  std::vector<std::uint8_t> mask;  // 1 on generated tokens
  bool answered = false;
  ValueSet answer;
  ValueSet gold;
};

inline int status_code(Status s) { return 1 + static_cast<int>(s); }

inline Rollout run_rollout(const World& world, const PreparedTask& task, const PolicyParams& params,
                           const RolloutConfig& cfg, Rng& rng, int response_index = 0) {
  const auto& f = world.featurizer();
  const auto& kb = world.kb();
  Rollout r;
  r.task_id = task.spec.id;
  r.response_index = response_index;
  r.gold = task.spec.gold_answers;
  ExpressionEnv env;
  std::set<EntityId> visible;
  for (const auto& e : task.spec.topic_entities) visible.insert(e);
  std::vector<Value> observed;
  int last_status = 0, last_kind = 0;
  for (int turn = 1; turn <= cfg.max_turns; ++turn) {
    TurnRecord rec;
    rec.turn = turn;
    rec.pre_entities = state_entities(kb, env, task.topic);
    auto data = f.turn_data(kb, task.question, task.topic, turn, last_status, last_kind, env, visible, observed);
    auto sampled = sample_turn(params, f.start_turn(data), cfg.temperature, cfg.top_p, rng, f.eot(), cfg.max_tokens,
                               cfg.greedy);
    rec.first_token = r.sequence.size();
    rec.tokens = std::move(sampled.tokens);
    rec.contexts = std::move(sampled.contexts);
    rec.logp_old = std::move(sampled.logp);
    r.sequence.insert(r.sequence.end(), rec.tokens.begin(), rec.tokens.end());
    r.mask.insert(r.mask.end(), rec.tokens.size(), 1);
    rec.text = f.detokenize(rec.tokens);
    if (!sampled.ended) {
      rec.parse_error = "turn exceeded " + std::to_string(cfg.max_tokens) + " tokens";
    } else {
      try {
        rec.action = parse_action(rec.text);
      } catch (const ParseError& err) {
        rec.parse_error = err.what();
      }
    }
    if (rec.action && rec.action->kind == ActionKind::Answer) {
      rec.is_answer = true;
      rec.observation.terminal = true;
      r.answer = answer_values(kb, env, *rec.action);
      r.answered = true;
      rec.post_entities = rec.pre_entities;
      r.turns.push_back(std::move(rec));
      break;
    }
    if (rec.action) {
      auto res = step(kb, env, *rec.action, task.topic, turn);
      env = std::move(res.env);
      rec.observation = std::move(res.observation);
      rec.post_entities = res.anchor ? res.anchor->entities : rec.pre_entities;
      last_kind = 1 + static_cast<int>(rec.action->kind);
    } else {
      rec.observation.status = Status::Error;
      rec.observation.message = rec.parse_error;
      rec.post_entities = rec.pre_entities;
      last_kind = 0;
    }
    last_status = status_code(rec.observation.status);
    observed = rec.observation.results;
    for (const auto& v : observed)
      if (const auto* e = std::get_if<EntityId>(&v)) visible.insert(*e);
    for (int tok : {f.info_open(), f.status_token(rec.observation.status), f.info_close()}) {
      r.sequence.push_back(tok);
      r.mask.push_back(0);
    }
    r.turns.push_back(std::move(rec));
  }
  return r;
}

// Entity-level F1 of predicted against gold answers; 0 for an empty prediction.
inline double answer_f1(const ValueSet& pred, const ValueSet& gold) {
  if (pred.empty() || gold.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& v : pred) hit += gold.count(v);
  if (hit == 0) return 0.0;
  double p = static_cast<double>(hit) / static_cast<double>(pred.size());
  double rc = static_cast<double>(hit) / static_cast<double>(gold.size());
  return 2 * p * rc / (p + rc);
}

inline nlohmann::json rollout_to_json(const Rollout& r) {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : r.turns) {
    nlohmann::json j = {{"turn", t.turn}, {"text", t.text}, {"observation", t.observation.to_json()}};
    if (!t.parse_error.empty()) j["parse_error"] = t.parse_error;
    turns.push_back(j);
  }
  nlohmann::json answer = nlohmann::json::array();
  for (const auto& v : r.answer) answer.push_back(value_to_json(v));
  return {{"task_id", r.task_id}, {"response_index", r.response_index}, {"turns", turns},
          {"answered", r.answered}, {"answer", answer}};
}

// Human-readable dump in the "functions:" echo style.
inline std::string render_trace(const Rollout& r) {
  std::string out;
  for (const auto& t : r.turns) {
    out += "turn " + std::to_string(t.turn) + ": " + t.text + "\n";
    out += t.observation.render();
  }
  return out;
}

}  // namespace gapd
