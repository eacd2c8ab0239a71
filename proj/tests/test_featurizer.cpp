#include <gtest/gtest.h>

#include "gapd/rollout.hpp"

using namespace gapd;

namespace {

const World& shared_world() {
  static const World w = [] {
    GenConfig c;
    c.num_tasks = 64;
    return World(generate_synthetic_kb(c, 21));
  }();
  return w;
}

Action without_direction(Action a) {
  if (a.kind == ActionKind::FindRelation) a.inverse.reset();
  return a;
}

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

}  // namespace

TEST(Featurizer, GoldActionsSurviveTokenization) {
  const auto& w = shared_world();
  const auto& f = w.featurizer();
  for (const auto& t : w.tasks()) {
    ASSERT_EQ(t.gold_tokens.size(), t.gold_actions.size());
    for (std::size_t k = 0; k < t.gold_actions.size(); ++k) {
      EXPECT_EQ(t.gold_tokens[k].back(), f.eot());
      auto parsed = parse_action(f.detokenize(t.gold_tokens[k]));
      EXPECT_EQ(parsed, without_direction(t.gold_actions[k])) << f.detokenize(t.gold_tokens[k]);
    }
  }
}

// Replaying gold turns through the constrained grammar: every gold token must be offered.
TEST(Featurizer, GoldTokensAreAlwaysValid) {
  const auto& w = shared_world();
  const auto& f = w.featurizer();
  int tokens = 0;
  for (const auto& t : w.tasks()) {
    ExpressionEnv env;
    std::set<EntityId> visible(t.spec.topic_entities.begin(), t.spec.topic_entities.end());
    std::vector<Value> observed;
    int last_status = 0, last_kind = 0;
    for (std::size_t k = 0; k < t.gold_actions.size(); ++k) {
      auto data = f.turn_data(w.kb(), t.question, t.topic, static_cast<int>(k) + 1, last_status, last_kind, env,
                              visible, observed);
      auto turn = f.start_turn(data);
      for (int tok : t.gold_tokens[k]) {
        ASSERT_TRUE(contains(turn.valid_tokens(), tok))
            << t.spec.id << " turn " << k + 1 << ": " << f.vocab().token(tok) << " in "
            << f.detokenize(t.gold_tokens[k]);
        turn.push(tok);
        ++tokens;
      }
      auto res = step(w.kb(), env, t.gold_actions[k], t.topic, static_cast<int>(k) + 1);
      env = res.env;
      last_status = status_code(res.observation.status);
      last_kind = 1 + static_cast<int>(t.gold_actions[k].kind);
      observed = res.observation.results;
      for (const auto& v : observed)
        if (const auto* e = std::get_if<EntityId>(&v)) visible.insert(*e);
    }
  }
  EXPECT_GT(tokens, 500);
}

TEST(FeaturizerProperty, RandomValidWalksParse) {
  const auto& w = shared_world();
  const auto& f = w.featurizer();
  Rng rng(31);
  int parsed = 0;
  for (int i = 0; i < 400; ++i) {
    const auto& t = w.tasks()[rng.below(w.tasks().size())];
    ExpressionEnv env;
    if (rng.chance(0.5)) env = apply_action(env, t.gold_actions[0]);
    std::set<EntityId> visible(t.spec.topic_entities.begin(), t.spec.topic_entities.end());
    auto data = f.turn_data(w.kb(), t.question, t.topic, env.empty() ? 1 : 2, env.empty() ? 0 : 1,
                            env.empty() ? 0 : 1, env, visible, {});
    auto turn = f.start_turn(data);
    std::vector<int> toks;
    for (int k = 0; k < 64; ++k) {
      auto valid = turn.valid_tokens();
      ASSERT_FALSE(valid.empty());
      int tok = rng.pick(valid);
      toks.push_back(tok);
      turn.push(tok);
      if (tok == f.eot()) break;
    }
    ASSERT_EQ(toks.back(), f.eot());
    EXPECT_NO_THROW(parse_action(f.detokenize(toks))) << f.detokenize(toks);
    ++parsed;
  }
  EXPECT_EQ(parsed, 400);
}

TEST(Featurizer, InvalidTokenEndsTurn) {
  const auto& w = shared_world();
  const auto& f = w.featurizer();
  const auto& t = w.tasks()[0];
  auto data = f.turn_data(w.kb(), t.question, t.topic, 1, 0, 0, {}, {}, {});
  auto turn = f.start_turn(data);
  turn.push(f.eot());
  EXPECT_EQ(turn.phase(), Featurizer::Turn::Phase::Invalid);
  EXPECT_EQ(turn.valid_tokens(), std::vector<int>{f.eot()});
}

TEST(Featurizer, EmptyEnvironmentOnlyOpensWithFindOrAnswer) {
  const auto& w = shared_world();
  const auto& f = w.featurizer();
  const auto& t = w.tasks()[0];
  auto turn = f.start_turn(f.turn_data(w.kb(), t.question, t.topic, 1, 0, 0, {}, {}, {}));
  auto valid = turn.valid_tokens();
  ASSERT_EQ(valid.size(), 2u);
  EXPECT_EQ(f.vocab().token(valid[0]), "Find_relation");
  EXPECT_EQ(f.vocab().token(valid[1]), "Answer");
}

TEST(Featurizer, TeacherContextAddsGoldBlockOnly) {
  const auto& w = shared_world();
  const auto& f = w.featurizer();
  const auto& t = w.tasks()[0];
  auto turn = f.start_turn(f.turn_data(w.kb(), t.question, t.topic, 1, 0, 0, {}, {}, {}));
  auto student = turn.context();
  auto teacher = f.teacher_context(student, t.gold_tokens[0], 0, t.gold_actions[0].kind);
  EXPECT_TRUE(teacher.teacher);
  ASSERT_EQ(teacher.rows.size(), student.rows.size() + 1);
  EXPECT_TRUE(f.is_gold_row(teacher.rows.back()));
  for (int r : student.rows) EXPECT_FALSE(f.is_gold_row(r));
  ASSERT_EQ(teacher.cands.size(), student.cands.size() + 1);
  EXPECT_EQ(teacher.cands.back().token, t.gold_tokens[0][0]);
  EXPECT_EQ(teacher.cands.back().feature, kGoldCopy);
  auto past_end = f.teacher_context(student, t.gold_tokens[0], t.gold_tokens[0].size(), t.gold_actions[0].kind);
  EXPECT_EQ(past_end.cands.size(), student.cands.size());
}

TEST(Featurizer, TeacherPrefersGoldToken) {
  const auto& w = shared_world();
  const auto& f = w.featurizer();
  auto params = f.initial_params();
  int better = 0, total = 0;
  for (const auto& t : w.tasks()) {
    auto turn = f.start_turn(f.turn_data(w.kb(), t.question, t.topic, 1, 0, 0, {}, {}, {}));
    for (std::size_t pos = 0; pos < t.gold_tokens[0].size(); ++pos) {
      auto s = turn.context();
      int tok = t.gold_tokens[0][pos];
      auto tc = f.teacher_context(s, t.gold_tokens[0], pos, t.gold_actions[0].kind);
      better += log_prob(params, tc, tok) > log_prob(params, s, tok);
      ++total;
      turn.push(tok);
    }
  }
  EXPECT_EQ(better, total);
}

TEST(Featurizer, InitialParamsHaveLayoutDimensions) {
  const auto& f = shared_world().featurizer();
  auto p = f.initial_params();
  EXPECT_EQ(p.rows, f.rows());
  EXPECT_EQ(p.vocab, static_cast<int>(f.vocab().size()));
  EXPECT_DOUBLE_EQ(p.w(kValid), PriorConfig{}.valid);
  nlohmann::json j = PriorConfig{};
  EXPECT_DOUBLE_EQ(j.get<PriorConfig>().gold_copy, PriorConfig{}.gold_copy);
  EXPECT_TRUE(f.layout_json().contains("lexemes"));
}

TEST(Rollout, GreedyIsDeterministicAndWellFormed) {
  const auto& w = shared_world();
  auto params = w.featurizer().initial_params();
  RolloutConfig cfg;
  cfg.greedy = true;
  for (std::size_t i = 0; i < 10; ++i) {
    Rng a(1), b(2);
    auto r1 = run_rollout(w, w.tasks()[i], params, cfg, a);
    auto r2 = run_rollout(w, w.tasks()[i], params, cfg, b);
    EXPECT_EQ(r1.sequence, r2.sequence);
    EXPECT_EQ(r1.sequence.size(), r1.mask.size());
    std::size_t generated = 0;
    for (const auto& t : r1.turns) {
      generated += t.tokens.size();
      EXPECT_EQ(t.contexts.size(), t.tokens.size());
      for (std::size_t k = 0; k < t.tokens.size(); ++k) EXPECT_EQ(r1.sequence[t.first_token + k], t.tokens[k]);
    }
    std::size_t masked = 0;
    for (auto m : r1.mask) masked += m;
    EXPECT_EQ(masked, generated);
    EXPECT_LE(r1.turns.size(), 8u);
  }
}

TEST(Rollout, AnswerF1) {
  ValueSet gold{EntityId{"a"}, EntityId{"b"}};
  EXPECT_DOUBLE_EQ(answer_f1(gold, gold), 1.0);
  EXPECT_DOUBLE_EQ(answer_f1({EntityId{"a"}}, gold), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(answer_f1({}, gold), 0.0);
  EXPECT_DOUBLE_EQ(answer_f1({EntityId{"c"}}, gold), 0.0);
}
