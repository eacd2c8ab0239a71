#pragma once

// Entity-anchor matching: aligns each student turn's pre-action state with a gold
// execution state and decides whether that turn receives gold-conditioned guidance.

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gapd/action_lang.hpp"
#include "gapd/executor.hpp"

namespace gapd {

enum class DropReason { AnswerTurn, BelowThreshold, SameNextState, GoldExhausted, NotEligible };
inline constexpr int kNumDropReasons = 5;

inline std::string_view drop_reason_name(DropReason r) {
  switch (r) {
    case DropReason::AnswerTurn: return "answer_turn";
    case DropReason::BelowThreshold: return "below_threshold";
    case DropReason::SameNextState: return "same_next_state";
    case DropReason::GoldExhausted: return "gold_exhausted";
    case DropReason::NotEligible: return "not_eligible";
  }
  return "";
}

enum class MatchMode { EntityAnchor, TurnIndex, FirstTurnOnly };

struct MatchStats {
  std::size_t jaccard_calls = 0;
};

// |a & b| / |a | b|, with 0 for two empty sets.
inline double jaccard(const ValueSet& a, const ValueSet& b, MatchStats* stats = nullptr) {
  if (stats) ++stats->jaccard_calls;
  std::size_t inter = 0;
  auto ia = a.begin(), ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib) {
      ++ia;
    } else if (*ib < *ia) {
      ++ib;
    } else {
      ++inter;
      ++ia;
      ++ib;
    }
  }
  std::size_t uni = a.size() + b.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct MatchDecision {
  int student_turn = 0;
  int m_star = -1;                  // index into u_0..u_M
  std::optional<double> similarity;  // absent in turn-index mode
  bool accepted = false;
  std::optional<Action> conditioning_action;  // g_{m*+1}
  std::optional<DropReason> drop_reason;
  std::optional<bool> diverged;  // next entity sets differ; known once filters ran on an accepted match
};

// gold[m] is u_m for m = 0..M; gold_actions[m] is g_{m+1}.
inline MatchDecision match_state(const AnchorState& student, const std::vector<AnchorState>& gold,
                                 const std::vector<Action>& gold_actions, double tau, MatchStats* stats = nullptr) {
  MatchDecision d;
  d.student_turn = student.index;
  double best = -1;
  for (std::size_t m = 0; m < gold.size(); ++m) {
    double s = jaccard(student.entities, gold[m].entities, stats);
    if (s > best) {
      best = s;
      d.m_star = static_cast<int>(m);
    }
  }
  d.similarity = best < 0 ? 0.0 : best;
  const int M = static_cast<int>(gold_actions.size());
  if (*d.similarity < tau) {
    d.drop_reason = DropReason::BelowThreshold;
  } else if (d.m_star + 1 > M) {
    d.drop_reason = DropReason::GoldExhausted;
  } else {
    d.accepted = true;
    d.conditioning_action = gold_actions[static_cast<std::size_t>(d.m_star)];
  }
  return d;
}

// Turn t (1-based) is aligned with u_{t-1}; no similarity is computed.
inline MatchDecision match_turn_index(int turn, const std::vector<Action>& gold_actions) {
  MatchDecision d;
  d.student_turn = turn;
  d.m_star = turn - 1;
  if (d.m_star + 1 > static_cast<int>(gold_actions.size())) {
    d.drop_reason = DropReason::GoldExhausted;
  } else {
    d.accepted = true;
    d.conditioning_action = gold_actions[static_cast<std::size_t>(d.m_star)];
  }
  return d;
}

// Answer turns are always dropped; an accepted match whose student action reaches the
// same non-empty next entity set as the aligned gold action is dropped as redundant.
inline MatchDecision apply_filters(MatchDecision d, bool answer_turn, const ValueSet& student_next,
                                   const std::optional<ValueSet>& gold_next) {
  if (answer_turn) {
    d.accepted = false;
    d.conditioning_action.reset();
    d.drop_reason = DropReason::AnswerTurn;
    d.diverged.reset();
    return d;
  }
  if (!d.accepted || !gold_next) return d;
  d.diverged = student_next != *gold_next;
  if (!*d.diverged && !student_next.empty()) {
    d.accepted = false;
    d.conditioning_action.reset();
    d.drop_reason = DropReason::SameNextState;
  }
  return d;
}

struct SupervisedSpan {
  int response_index = 0;
  int turn = 0;
  std::size_t begin = 0;  // positions in the rollout token sequence
  std::size_t end = 0;
};

inline nlohmann::json decision_to_json(const std::string& task_id, int response_index, const MatchDecision& d) {
  nlohmann::json j = {{"task_id", task_id},
                      {"response_index", response_index},
                      {"turn", d.student_turn},
                      {"m_star", d.m_star},
                      {"accepted", d.accepted}};
  j["sim"] = d.similarity ? nlohmann::json(*d.similarity) : nlohmann::json(nullptr);
  j["drop_reason"] = d.drop_reason ? nlohmann::json(std::string(drop_reason_name(*d.drop_reason))) : nlohmann::json(nullptr);
  if (d.diverged) j["diverged"] = *d.diverged;
  return j;
}

}  // namespace gapd
