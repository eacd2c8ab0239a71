#include <gtest/gtest.h>

#include "gapd/anchor_match.hpp"
#include "gapd/rng.hpp"
#include "oracles.hpp"

using namespace gapd;

namespace {

ValueSet ents(std::initializer_list<const char*> ids) {
  ValueSet s;
  for (const char* id : ids) s.insert(EntityId{id});
  return s;
}

std::vector<AnchorState> anchors(const std::vector<ValueSet>& sets) {
  std::vector<AnchorState> out;
  for (std::size_t m = 0; m < sets.size(); ++m)
    out.push_back({AnchorState::Source::Gold, static_cast<int>(m), sets[m], nullptr});
  return out;
}

AnchorState student(const ValueSet& s, int turn = 1) { return {AnchorState::Source::Student, turn, s, nullptr}; }

std::vector<Action> actions(std::size_t n) {
  std::vector<Action> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(Action::count(SlotRef{static_cast<int>(i) + 1}));
  return out;
}

}  // namespace

TEST(Jaccard, Basics) {
  EXPECT_DOUBLE_EQ(jaccard(ents({"a", "b"}), ents({"b", "c"})), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(jaccard(ents({"a"}), ents({"a"})), 1.0);
  EXPECT_DOUBLE_EQ(jaccard({}, {}), 0.0);
  EXPECT_DOUBLE_EQ(jaccard(ents({"a"}), {}), 0.0);
  MatchStats stats;
  jaccard(ents({"a"}), ents({"a"}), &stats);
  EXPECT_EQ(stats.jaccard_calls, 1u);
}

TEST(MatchState, PicksBestAnchorAndNextGoldAction) {
  auto gold = anchors({ents({"t"}), ents({"a", "b", "c"}), ents({"a"})});
  auto acts = actions(2);
  auto d = match_state(student(ents({"a", "b", "c"})), gold, acts, 0.95);
  EXPECT_TRUE(d.accepted);
  EXPECT_EQ(d.m_star, 1);
  EXPECT_EQ(*d.conditioning_action, acts[1]);
}

TEST(MatchState, TiesGoToEarliestAnchor) {
  auto gold = anchors({ents({"a"}), ents({"a"}), ents({"b"})});
  auto d = match_state(student(ents({"a"})), gold, actions(2), 0.95);
  EXPECT_EQ(d.m_star, 0);
}

TEST(MatchState, BelowThresholdAndExhausted) {
  auto gold = anchors({ents({"t"}), ents({"a", "b"})});
  auto low = match_state(student(ents({"a"})), gold, actions(1), 0.95);
  EXPECT_FALSE(low.accepted);
  EXPECT_EQ(low.drop_reason, DropReason::BelowThreshold);
  EXPECT_DOUBLE_EQ(*low.similarity, 0.5);
  auto done = match_state(student(ents({"a", "b"})), gold, actions(1), 0.95);
  EXPECT_FALSE(done.accepted);
  EXPECT_EQ(done.drop_reason, DropReason::GoldExhausted);
}

TEST(MatchState, EmptyStudentStateNeverMatches) {
  auto gold = anchors({ents({"t"}), {}});
  auto d = match_state(student({}), gold, actions(1), 0.5);
  EXPECT_EQ(d.drop_reason, DropReason::BelowThreshold);
}

TEST(MatchTurnIndex, AlignsByPosition) {
  auto acts = actions(2);
  auto d = match_turn_index(2, acts);
  EXPECT_TRUE(d.accepted);
  EXPECT_EQ(d.m_star, 1);
  EXPECT_FALSE(d.similarity);
  EXPECT_EQ(match_turn_index(3, acts).drop_reason, DropReason::GoldExhausted);
}

TEST(Filters, AnswerTurnTakesPrecedence) {
  MatchDecision d;
  d.accepted = true;
  d.m_star = 0;
  d.conditioning_action = Action::count(SlotRef{1});
  auto r = apply_filters(d, true, ents({"a"}), ents({"a"}));
  EXPECT_EQ(r.drop_reason, DropReason::AnswerTurn);
  EXPECT_FALSE(r.conditioning_action);
}

TEST(Filters, SameNonEmptyNextStateIsDropped) {
  MatchDecision d;
  d.accepted = true;
  d.conditioning_action = Action::count(SlotRef{1});
  EXPECT_EQ(apply_filters(d, false, ents({"a"}), ents({"a"})).drop_reason, DropReason::SameNextState);
  auto empty = apply_filters(d, false, {}, ValueSet{});
  EXPECT_TRUE(empty.accepted);
  EXPECT_FALSE(*empty.diverged);
  auto div = apply_filters(d, false, ents({"a"}), ents({"b"}));
  EXPECT_TRUE(div.accepted);
  EXPECT_TRUE(*div.diverged);
}

TEST(Filters, RejectedDecisionPassesThrough) {
  MatchDecision d;
  d.drop_reason = DropReason::BelowThreshold;
  auto r = apply_filters(d, false, ents({"a"}), std::nullopt);
  EXPECT_EQ(r.drop_reason, DropReason::BelowThreshold);
  EXPECT_FALSE(r.diverged);
}

TEST(DecisionJson, CarriesAllFields) {
  auto gold = anchors({ents({"t"}), ents({"a"})});
  auto d = match_state(student(ents({"a"}), 2), gold, actions(1), 0.95);
  auto j = decision_to_json("q1", 3, d);
  EXPECT_EQ(j["task_id"], "q1");
  EXPECT_EQ(j["response_index"], 3);
  EXPECT_EQ(j["turn"], 2);
  EXPECT_EQ(j["drop_reason"], "gold_exhausted");
  EXPECT_DOUBLE_EQ(j["sim"].get<double>(), 1.0);
}

TEST(MatchProperty, AgreesWithExhaustiveScan) {
  Rng rng(123);
  std::vector<Value> universe;
  for (int i = 0; i < 6; ++i) universe.push_back(EntityId{"m." + std::to_string(i)});
  auto random_set = [&] {
    ValueSet s;
    for (const auto& v : universe)
      if (rng.chance(0.4)) s.insert(v);
    return s;
  };
  for (int i = 0; i < 2000; ++i) {
    std::size_t m = static_cast<std::size_t>(rng.between(1, 5));
    std::vector<ValueSet> sets;
    for (std::size_t k = 0; k < m; ++k) sets.push_back(random_set());
    ValueSet s = rng.chance(0.3) ? sets[rng.below(m)] : random_set();
    double tau = rng.chance(0.5) ? 0.95 : 0.5;
    MatchStats stats;
    auto got = match_state(student(s), anchors(sets), actions(m - 1), tau, &stats);
    auto want = oracle::match_scan(s, sets, m - 1, tau);
    EXPECT_EQ(got.m_star, want.m_star);
    EXPECT_EQ(*got.similarity, want.sim);
    EXPECT_EQ(got.accepted, want.accepted);
    EXPECT_EQ(got.drop_reason, want.drop);
    EXPECT_EQ(stats.jaccard_calls, m);
  }
}

TEST(MatchProperty, SimilarityBoundedAndSymmetric) {
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    ValueSet a, b;
    for (int k = 0; k < 8; ++k) {
      if (rng.chance(0.5)) a.insert(EntityId{"m." + std::to_string(k)});
      if (rng.chance(0.5)) b.insert(EntityId{"m." + std::to_string(k)});
    }
    double j = jaccard(a, b);
    EXPECT_GE(j, 0.0);
    EXPECT_LE(j, 1.0);
    EXPECT_EQ(j, jaccard(b, a));
    EXPECT_EQ(j, oracle::jaccard_scan(a, b));
  }
}
