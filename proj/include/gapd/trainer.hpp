#pragma once

// Group-relative policy optimization with gold-action-conditioned token guidance.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gapd/anchor_match.hpp"
#include "gapd/featurizer.hpp"
#include "gapd/policy.hpp"
#include "gapd/rng.hpp"
#include "gapd/rollout.hpp"

namespace gapd {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RewardConfig {
  double lambda_out = 1.0;
  double lambda_fmt = 0.1;
  double lambda_gapd = 0.5;
  double clip_c = 2.0;
  double eps_low = 0.2;
  double eps_high = 0.28;
  double beta = 0.001;
  int group_size = 5;
  double tau_state = 0.95;
  double learning_rate = 0.5;
  double temperature = 1.0;
  double top_p = 0.99;

  void validate() const {
    if (lambda_out < 0 || lambda_fmt < 0 || lambda_gapd < 0 || beta < 0)
      throw ConfigError("reward weights must be non-negative");
    if (!(clip_c > 0) || !(eps_low > 0) || !(eps_high > 0) || eps_low > eps_high)
      throw ConfigError("clip bounds must be positive with eps_low <= eps_high");
    if (group_size < 2) throw ConfigError("group size must be at least 2");
    if (!(tau_state > 0 && tau_state <= 1)) throw ConfigError("tau_state must lie in (0, 1]");
    if (!(learning_rate > 0) || !(temperature > 0) || !(top_p > 0 && top_p <= 1))
      throw ConfigError("learning rate, temperature and top_p must be positive (top_p <= 1)");
  }
};

inline void to_json(nlohmann::json& j, const RewardConfig& c) {
  j = {{"lambda_out", c.lambda_out}, {"lambda_fmt", c.lambda_fmt},   {"lambda_gapd", c.lambda_gapd},
       {"clip_c", c.clip_c},         {"eps_low", c.eps_low},         {"eps_high", c.eps_high},
       {"beta", c.beta},             {"group_size", c.group_size},   {"tau_state", c.tau_state},
       {"learning_rate", c.learning_rate}, {"temperature", c.temperature}, {"top_p", c.top_p}};
}

inline void from_json(const nlohmann::json& j, RewardConfig& c) {
  RewardConfig d;
  c.lambda_out = j.value("lambda_out", d.lambda_out);
  c.lambda_fmt = j.value("lambda_fmt", d.lambda_fmt);
  c.lambda_gapd = j.value("lambda_gapd", d.lambda_gapd);
  c.clip_c = j.value("clip_c", d.clip_c);
  c.eps_low = j.value("eps_low", d.eps_low);
  c.eps_high = j.value("eps_high", d.eps_high);
  c.beta = j.value("beta", d.beta);
  c.group_size = j.value("group_size", d.group_size);
  c.tau_state = j.value("tau_state", d.tau_state);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.temperature = j.value("temperature", d.temperature);
  c.top_p = j.value("top_p", d.top_p);
}

enum class TrainMode { Gapd, OutcomeOnly, TurnIndex, FirstTurnOnly };

inline std::string_view mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::Gapd: return "gapd";
    case TrainMode::OutcomeOnly: return "outcome_only";
    case TrainMode::TurnIndex: return "turn_index";
    case TrainMode::FirstTurnOnly: return "first_turn_only";
  }
  return "";
}

inline TrainMode parse_train_mode(std::string_view s) {
  for (auto m : {TrainMode::Gapd, TrainMode::OutcomeOnly, TrainMode::TurnIndex, TrainMode::FirstTurnOnly})
    if (mode_name(m) == s) return m;
  throw ConfigError("unknown mode '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Rewards and advantages

inline double outcome_reward(const ValueSet& pred, const ValueSet& gold) { return answer_f1(pred, gold); }

// 1 when every turn parsed and the rollout ended with an answer.
inline double format_reward(const Rollout& r) {
  if (!r.answered) return 0.0;
  for (const auto& t : r.turns)
    if (!t.action) return 0.0;
  return 1.0;
}

inline double trajectory_reward(double r_out, double r_fmt, const RewardConfig& cfg) {
  return cfg.lambda_out * r_out + cfg.lambda_fmt * r_fmt;
}

inline std::vector<double> group_advantages(const std::vector<double>& rewards) {
  if (rewards.size() < 2) throw ConfigError("group advantages need at least two rollouts");
  double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(rewards.size());
  std::vector<double> out(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = rewards[i] - mean;
  return out;
}

// ---------------------------------------------------------------------------
// Matching per turn

inline std::vector<MatchDecision> match_rollout(const World& world, const PreparedTask& task, const Rollout& r,
                                                MatchMode mode, double tau, MatchStats* stats = nullptr) {
  const auto& gold = world.gold_anchors(task);
  std::vector<MatchDecision> out;
  for (const auto& t : r.turns) {
    MatchDecision d;
    if (mode == MatchMode::TurnIndex) {
      d = match_turn_index(t.turn, task.gold_actions);
    } else if (mode == MatchMode::FirstTurnOnly && t.turn > 1) {
      d.student_turn = t.turn;
      d.drop_reason = DropReason::NotEligible;
    } else {
      AnchorState s{AnchorState::Source::Student, t.turn, t.pre_entities, nullptr};
      d = match_state(s, gold, task.gold_actions, tau, stats);
    }
    std::optional<ValueSet> gold_next;
    if (d.accepted) gold_next = gold[static_cast<std::size_t>(d.m_star + 1)].entities;
    out.push_back(apply_filters(d, t.is_answer, t.post_entities, gold_next));
  }
  return out;
}

inline std::vector<SupervisedSpan> select_spans(const Rollout& r, const std::vector<MatchDecision>& decisions) {
  std::vector<SupervisedSpan> out;
  for (std::size_t i = 0; i < r.turns.size() && i < decisions.size(); ++i) {
    if (!decisions[i].accepted) continue;
    const auto& t = r.turns[i];
    out.push_back({r.response_index, t.turn, t.first_token, t.first_token + t.tokens.size()});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Token guides

struct TokenGuide {
  int response_index = 0;
  int turn = 0;
  std::size_t position = 0;  // in the rollout sequence
  int token = 0;
  double logp_teach = 0;
  double logp_stud = 0;
  double d = 0;
  double a_gapd = 0;
  double fused = 0;
  bool supervised = false;
  std::optional<bool> diverged;
};

class GuideInvariantError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Scores every token of each turn matched before the same-next-state filter. Only
// tokens of accepted turns are supervised; the others are kept for analysis with a_gapd = 0.
inline std::vector<TokenGuide> token_guides(const PolicyParams& params, const World& world, const PreparedTask& task,
                                            const Rollout& r, const std::vector<MatchDecision>& decisions,
                                            const RewardConfig& cfg, bool include_filtered = true) {
  const auto& f = world.featurizer();
  std::vector<TokenGuide> out;
  for (std::size_t i = 0; i < r.turns.size() && i < decisions.size(); ++i) {
    const auto& d = decisions[i];
    bool filtered = d.drop_reason == DropReason::SameNextState;
    if (!d.accepted && !(include_filtered && filtered)) continue;
    if (d.accepted && !d.conditioning_action) throw GuideInvariantError("accepted decision without a conditioning action");
    const auto& g = task.gold_actions.at(static_cast<std::size_t>(d.m_star));
    const auto& gold_tokens = task.gold_tokens.at(static_cast<std::size_t>(d.m_star));
    const auto& t = r.turns[i];
    for (std::size_t k = 0; k < t.tokens.size(); ++k) {
      TokenGuide tg;
      tg.response_index = r.response_index;
      tg.turn = t.turn;
      tg.position = t.first_token + k;
      tg.token = t.tokens[k];
      auto teacher = f.teacher_context(t.contexts[k], gold_tokens, k, g.kind);
      tg.logp_stud = log_prob(params, t.contexts[k], tg.token);
      tg.logp_teach = log_prob(params, teacher, tg.token);
      tg.d = tg.logp_teach - tg.logp_stud;
      tg.supervised = d.accepted;
      tg.a_gapd = tg.supervised ? std::clamp(tg.d, -cfg.clip_c, cfg.clip_c) : 0.0;
      tg.diverged = d.diverged;
      out.push_back(tg);
    }
  }
  return out;
}

inline void fuse_advantages(double grpo_adv, std::vector<TokenGuide>& guides, const RewardConfig& cfg) {
  for (auto& g : guides) g.fused = grpo_adv + cfg.lambda_gapd * g.a_gapd;
}

// ---------------------------------------------------------------------------
// Clipped surrogate

struct TrainingToken {
  ContextState ctx;
  int token = 0;
  double logp_old = 0;
  double advantage = 0;
};

struct LossResult {
  double loss = 0;
  double kl = 0;  // mean per-token KL to the reference
  double clipped_fraction = 0;
  std::size_t tokens = 0;
  std::vector<double> grad;
};

// loss = -(1/Z) sum_k min(r_k A_k, clip(r_k, 1 - eps_low, 1 + eps_high) A_k) + beta (1/Z) sum_k KL_k.
// Advantages and logp_old are constants.
inline LossResult surrogate_loss_and_grad(const PolicyParams& params, const PolicyParams* ref,
                                          const std::vector<TrainingToken>& batch, const RewardConfig& cfg) {
  if (batch.empty()) throw ConfigError("batch has no masked tokens");
  LossResult out;
  out.tokens = batch.size();
  out.grad.assign(params.size(), 0.0);
  const double inv_z = 1.0 / static_cast<double>(batch.size());
  const bool use_kl = ref && cfg.beta > 0;
  std::vector<double> dscore;
  std::size_t clipped = 0;
  for (const auto& tk : batch) {
    auto p = next_token_distribution(params, tk.ctx);
    const std::size_t y = static_cast<std::size_t>(tk.token);
    const double ratio = std::exp(p.logp[y] - tk.logp_old);
    const double A = tk.advantage;
    const double clipped_ratio = std::clamp(ratio, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
    const double unclipped_obj = ratio * A, clipped_obj = clipped_ratio * A;
    const bool use_unclipped = unclipped_obj <= clipped_obj;
    out.loss -= inv_z * std::min(unclipped_obj, clipped_obj);
    dscore.assign(p.probs.size(), 0.0);
    if (use_unclipped) {
      // d(-r A)/ds = -A r (e_y - p)
      const double c = -A * ratio;
      for (std::size_t v = 0; v < dscore.size(); ++v) dscore[v] = -c * p.probs[v];
      dscore[y] += c;
    } else {
      ++clipped;
    }
    if (use_kl) {
      auto q = next_token_distribution(*ref, tk.ctx);
      double kl = kl_divergence(p, q);
      out.kl += inv_z * kl;
      out.loss += cfg.beta * inv_z * kl;
      for (std::size_t v = 0; v < dscore.size(); ++v)
        dscore[v] += cfg.beta * p.probs[v] * (p.logp[v] - q.logp[v] - kl);
    }
    accumulate_score_grad(params, tk.ctx, dscore, inv_z, out.grad);
  }
  out.clipped_fraction = static_cast<double>(clipped) / static_cast<double>(batch.size());
  return out;
}

// ---------------------------------------------------------------------------
// Training step

struct TrainConfig {
  RewardConfig reward;
  TrainMode mode = TrainMode::Gapd;
  int batch_prompts = 8;
  int max_tokens = 64;
  int max_turns = 8;
  bool log_guides = true;
  bool record_sequences = false;

  RolloutConfig rollout() const {
    RolloutConfig r;
    r.temperature = reward.temperature;
    r.top_p = reward.top_p;
    r.max_tokens = max_tokens;
    r.max_turns = max_turns;
    return r;
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"reward", c.reward},          {"mode", std::string(mode_name(c.mode))}, {"batch_prompts", c.batch_prompts},
       {"max_tokens", c.max_tokens},  {"max_turns", c.max_turns},               {"log_guides", c.log_guides}};
}

struct GuideLogEntry {
  int step = 0;
  std::string task_id;
  int response_index = 0;
  int turn = 0;
  std::size_t position = 0;
  double d = 0;
  double a_gapd = 0;
  double fused = 0;
  double grpo = 0;
  bool supervised = false;
  bool diverged = false;
};

struct StepReport {
  int step = 0;
  double mean_reward = 0;
  double mean_outcome = 0;
  double mean_format = 0;
  double accepted_rate = 0;
  std::array<std::size_t, kNumDropReasons> drop_counts{};
  std::size_t accepted = 0;
  std::size_t turns = 0;
  double mean_abs_gapd = 0;
  double loss = 0;
  double kl = 0;
  std::size_t jaccard_calls = 0;
  std::size_t failed_tasks = 0;
  std::size_t tokens = 0;
  std::size_t supervised_tokens = 0;
  std::vector<double> rewards;  // per rollout, in batch order
  std::vector<std::vector<int>> sequences;  // sampled token streams when recording is on
  std::vector<GuideLogEntry> guides;
  std::vector<nlohmann::json> decisions;

  nlohmann::json to_json() const {
    nlohmann::json drops;
    for (int i = 0; i < kNumDropReasons; ++i)
      drops[std::string(drop_reason_name(static_cast<DropReason>(i)))] = drop_counts[static_cast<std::size_t>(i)];
    return {{"step", step},
            {"mean_reward", mean_reward},
            {"mean_outcome", mean_outcome},
            {"mean_format", mean_format},
            {"accepted_rate", accepted_rate},
            {"drop_reason_counts", drops},
            {"mean_abs_gapd", mean_abs_gapd},
            {"loss", loss},
            {"kl", kl},
            {"jaccard_calls", jaccard_calls},
            {"failed_tasks", failed_tasks},
            {"tokens", tokens},
            {"supervised_tokens", supervised_tokens}};
  }
};

inline MatchMode match_mode(TrainMode m) {
  switch (m) {
    case TrainMode::TurnIndex: return MatchMode::TurnIndex;
    case TrainMode::FirstTurnOnly: return MatchMode::FirstTurnOnly;
    default: return MatchMode::EntityAnchor;
  }
}

class Trainer {
 public:
  Trainer(const World& world, PolicyParams initial, TrainConfig cfg, std::vector<std::size_t> train_tasks,
          std::uint64_t seed)
      : world_(world), params_(std::move(initial)), ref_(snapshot(params_)), cfg_(std::move(cfg)),
        train_(std::move(train_tasks)), rng_(seed) {
    cfg_.reward.validate();
    if (cfg_.batch_prompts < 1) throw ConfigError("batch_prompts must be >= 1");
    if (train_.empty()) throw ConfigError("no training tasks");
    for (auto i : train_)
      if (i >= world_.tasks().size()) throw ConfigError("training task index out of range");
  }

  const PolicyParams& params() const { return params_; }
  const PolicyParams& reference() const { return *ref_; }
  const TrainConfig& config() const { return cfg_; }
  int steps_done() const { return step_; }

  StepReport train_step() {
    StepReport rep;
    rep.step = step_;
    const auto rcfg = cfg_.rollout();
    const auto& rw = cfg_.reward;
    const bool guided = cfg_.mode != TrainMode::OutcomeOnly;
    MatchStats stats;
    std::vector<TrainingToken> batch;
    double abs_gapd = 0;
    std::size_t n_rollouts = 0;
    // pi_old is the parameter state at the start of the step.
    for (int b = 0; b < cfg_.batch_prompts; ++b) {
      const auto& task = world_.tasks()[train_[rng_.below(train_.size())]];
      std::vector<Rollout> group;
      std::vector<double> rewards;
      double outcome_sum = 0, format_sum = 0;
      try {
        for (int i = 0; i < rw.group_size; ++i) {
          group.push_back(run_rollout(world_, task, params_, rcfg, rng_, i));
          const auto& r = group.back();
          double ro = outcome_reward(r.answer, r.gold), rf = format_reward(r);
          rewards.push_back(trajectory_reward(ro, rf, rw));
          outcome_sum += ro;
          format_sum += rf;
        }
      } catch (const std::exception&) {
        ++rep.failed_tasks;
        continue;
      }
      rep.mean_outcome += outcome_sum;
      rep.mean_format += format_sum;
      auto adv = group_advantages(rewards);
      for (std::size_t i = 0; i < group.size(); ++i) {
        const auto& r = group[i];
        if (cfg_.record_sequences) rep.sequences.push_back(r.sequence);
        rep.rewards.push_back(rewards[i]);
        rep.mean_reward += rewards[i];
        ++n_rollouts;
        std::vector<TokenGuide> guides;
        if (guided) {
          auto decisions = match_rollout(world_, task, r, match_mode(cfg_.mode), rw.tau_state, &stats);
          for (const auto& d : decisions) {
            ++rep.turns;
            if (d.accepted) ++rep.accepted;
            if (d.drop_reason) ++rep.drop_counts[static_cast<std::size_t>(*d.drop_reason)];
            if (cfg_.log_guides) rep.decisions.push_back(decision_to_json(task.spec.id, r.response_index, d));
          }
          guides = token_guides(params_, world_, task, r, decisions, rw, cfg_.log_guides);
          fuse_advantages(adv[i], guides, rw);
        }
        std::map<std::size_t, const TokenGuide*> by_pos;
        for (const auto& g : guides) {
          if (g.supervised) {
            by_pos[g.position] = &g;
            abs_gapd += std::abs(g.a_gapd);
            ++rep.supervised_tokens;
          }
          if (cfg_.log_guides)
            rep.guides.push_back({step_, task.spec.id, r.response_index, g.turn, g.position, g.d, g.a_gapd, g.fused,
                                  adv[i], g.supervised, g.diverged.value_or(false)});
        }
        for (const auto& t : r.turns) {
          for (std::size_t k = 0; k < t.tokens.size(); ++k) {
            auto it = by_pos.find(t.first_token + k);
            double a = it == by_pos.end() ? adv[i] : it->second->fused;
            batch.push_back({t.contexts[k], t.tokens[k], t.logp_old[k], a});
          }
        }
      }
    }
    rep.tokens = batch.size();
    if (n_rollouts > 0) {
      rep.mean_reward /= static_cast<double>(n_rollouts);
      rep.mean_outcome /= static_cast<double>(n_rollouts);
      rep.mean_format /= static_cast<double>(n_rollouts);
    }
    rep.accepted_rate = rep.turns ? static_cast<double>(rep.accepted) / static_cast<double>(rep.turns) : 0.0;
    rep.mean_abs_gapd = rep.supervised_tokens ? abs_gapd / static_cast<double>(rep.supervised_tokens) : 0.0;
    rep.jaccard_calls = stats.jaccard_calls;
    if (!batch.empty()) {
      auto lr = surrogate_loss_and_grad(params_, ref_.get(), batch, rw);
      rep.loss = lr.loss;
      rep.kl = lr.kl;
      for (std::size_t j = 0; j < params_.theta.size(); ++j) params_.theta[j] -= rw.learning_rate * lr.grad[j];
    }
    ++step_;
    return rep;
  }

 private:
  const World& world_;
  PolicyParams params_;
  FrozenParams ref_;
  TrainConfig cfg_;
  std::vector<std::size_t> train_;
  Rng rng_;
  int step_ = 0;
};

}  // namespace gapd
