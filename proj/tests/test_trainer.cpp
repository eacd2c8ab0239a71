#include <gtest/gtest.h>

#include <numeric>

#include "gapd/trainer.hpp"
#include "oracles.hpp"

using namespace gapd;

namespace {

const World& shared_world() {
  static const World w = [] {
    GenConfig c;
    c.num_tasks = 48;
    return World(generate_synthetic_kb(c, 33));
  }();
  return w;
}

std::vector<std::size_t> all_tasks() {
  std::vector<std::size_t> v(shared_world().tasks().size());
  std::iota(v.begin(), v.end(), 0);
  return v;
}

TrainConfig small_config(TrainMode mode, double lambda = 0.5) {
  TrainConfig c;
  c.mode = mode;
  c.reward.lambda_gapd = lambda;
  c.reward.learning_rate = 20;
  c.batch_prompts = 3;
  return c;
}

TrainingToken make_token(const PolicyParams& p, const ContextState& ctx, int tok, double advantage,
                         double logp_shift = 0) {
  return {ctx, tok, log_prob(p, ctx, tok) + logp_shift, advantage};
}

}  // namespace

TEST(Rewards, TrajectoryRewardWeights) {
  RewardConfig cfg;
  EXPECT_DOUBLE_EQ(trajectory_reward(0.5, 1.0, cfg), 0.5 + 0.1);
  Rollout r;
  EXPECT_EQ(format_reward(r), 0.0);
  r.answered = true;
  EXPECT_EQ(format_reward(r), 1.0);
  r.turns.emplace_back();
  EXPECT_EQ(format_reward(r), 0.0);
}

TEST(Rewards, GroupAdvantagesAreCentered) {
  auto a = group_advantages({1.0, 0.0, 0.5, 0.5, 0.0});
  EXPECT_NEAR(std::accumulate(a.begin(), a.end(), 0.0), 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(a[0], 0.6);
  auto same = group_advantages({0.3, 0.3});
  EXPECT_EQ(same, (std::vector<double>{0.0, 0.0}));
  EXPECT_THROW(group_advantages({1.0}), ConfigError);
}

TEST(Config, ValidationAndJson) {
  RewardConfig c;
  EXPECT_NO_THROW(c.validate());
  c.eps_low = 0.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RewardConfig{};
  c.tau_state = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = RewardConfig{};
  c.lambda_gapd = 0.25;
  nlohmann::json j = c;
  EXPECT_DOUBLE_EQ(j.get<RewardConfig>().lambda_gapd, 0.25);
  EXPECT_EQ(parse_train_mode("turn_index"), TrainMode::TurnIndex);
  EXPECT_EQ(mode_name(TrainMode::FirstTurnOnly), "first_turn_only");
  EXPECT_THROW(parse_train_mode("nope"), ConfigError);
}

TEST(Surrogate, OnPolicyLossIsMinusMeanAdvantage) {
  Rng rng(1);
  auto p = oracle::random_params(rng, 4, 5, 2);
  RewardConfig cfg;
  cfg.beta = 0;
  std::vector<TrainingToken> batch;
  double mean = 0;
  for (int i = 0; i < 10; ++i) {
    double a = rng.uniform() * 2 - 1;
    batch.push_back(make_token(p, oracle::random_context(rng, 4, 5, 2), static_cast<int>(rng.below(5)), a));
    mean += a / 10;
  }
  auto res = surrogate_loss_and_grad(p, nullptr, batch, cfg);
  EXPECT_NEAR(res.loss, -mean, 1e-12);
  EXPECT_EQ(res.clipped_fraction, 0.0);
  EXPECT_EQ(res.tokens, 10u);
}

TEST(Surrogate, OnPolicyGradientIsAdvantageWeightedScore) {
  Rng rng(2);
  auto p = oracle::random_params(rng, 4, 5, 2);
  RewardConfig cfg;
  cfg.beta = 0;
  std::vector<TrainingToken> batch;
  std::vector<double> want(p.size(), 0.0);
  for (int i = 0; i < 6; ++i) {
    auto ctx = oracle::random_context(rng, 4, 5, 2);
    int tok = static_cast<int>(rng.below(5));
    double a = rng.uniform() * 2 - 1;
    batch.push_back(make_token(p, ctx, tok, a));
    auto g = grad_log_prob(p, ctx, tok);
    for (std::size_t j = 0; j < g.size(); ++j) want[j] -= a * g[j] / 6.0;
  }
  auto res = surrogate_loss_and_grad(p, nullptr, batch, cfg);
  EXPECT_LT(oracle::rel_error(res.grad, want), 1e-12);
}

TEST(Surrogate, ClippedTokensContributeNoPolicyGradient) {
  PolicyParams p(1, 3, 0);
  ContextState ctx{{0}, {}, false};
  RewardConfig cfg;
  cfg.beta = 0;
  // ratio = e^{0.5} > 1 + eps_high with a positive advantage: clipped branch, constant objective.
  auto res = surrogate_loss_and_grad(p, nullptr, {make_token(p, ctx, 1, 1.0, -0.5)}, cfg);
  EXPECT_EQ(res.clipped_fraction, 1.0);
  for (double g : res.grad) EXPECT_EQ(g, 0.0);
  EXPECT_NEAR(res.loss, -(1 + cfg.eps_high), 1e-12);
  // Same ratio with a negative advantage keeps the unclipped (pessimistic) branch.
  auto neg = surrogate_loss_and_grad(p, nullptr, {make_token(p, ctx, 1, -1.0, -0.5)}, cfg);
  EXPECT_EQ(neg.clipped_fraction, 0.0);
}

TEST(Surrogate, KlTermMatchesFiniteDifferences) {
  Rng rng(3);
  auto p = oracle::random_params(rng, 3, 4, 2), ref = oracle::random_params(rng, 3, 4, 2);
  RewardConfig cfg;
  cfg.beta = 0.5;
  std::vector<TrainingToken> batch;
  for (int i = 0; i < 5; ++i)
    batch.push_back(make_token(p, oracle::random_context(rng, 3, 4, 2), static_cast<int>(rng.below(4)), 0.0));
  auto res = surrogate_loss_and_grad(p, &ref, batch, cfg);
  EXPECT_GT(res.kl, 0.0);
  std::vector<double> fd(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) {
    auto a = p, b = p;
    a.theta[j] += 1e-6;
    b.theta[j] -= 1e-6;
    fd[j] = (surrogate_loss_and_grad(a, &ref, batch, cfg).loss - surrogate_loss_and_grad(b, &ref, batch, cfg).loss) /
            2e-6;
  }
  EXPECT_LT(oracle::rel_error(res.grad, fd), 1e-6);
  EXPECT_THROW(surrogate_loss_and_grad(p, &ref, {}, cfg), ConfigError);
}

TEST(Guides, ClampedAndOnlyOnAcceptedTurns) {
  const auto& w = shared_world();
  auto params = w.featurizer().initial_params();
  RewardConfig cfg;
  Rng rng(4);
  std::size_t supervised = 0, unsupervised = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    const auto& task = w.tasks()[i];
    auto r = run_rollout(w, task, params, RolloutConfig{}, rng);
    auto decisions = match_rollout(w, task, r, MatchMode::EntityAnchor, cfg.tau_state);
    ASSERT_EQ(decisions.size(), r.turns.size());
    auto guides = token_guides(params, w, task, r, decisions, cfg);
    fuse_advantages(0.25, guides, cfg);
    for (const auto& g : guides) {
      EXPECT_LE(std::abs(g.a_gapd), cfg.clip_c);
      EXPECT_DOUBLE_EQ(g.fused, 0.25 + 0.5 * g.a_gapd);
      EXPECT_EQ(r.sequence[g.position], g.token);
      const auto& d = decisions[static_cast<std::size_t>(g.turn - 1)];
      EXPECT_EQ(g.supervised, d.accepted);
      if (g.supervised) {
        EXPECT_DOUBLE_EQ(g.a_gapd, std::clamp(g.d, -cfg.clip_c, cfg.clip_c));
        ++supervised;
      } else {
        EXPECT_EQ(d.drop_reason, DropReason::SameNextState);
        EXPECT_EQ(g.a_gapd, 0.0);
        ++unsupervised;
      }
    }
    for (const auto& d : decisions)
      if (d.accepted) {
        EXPECT_FALSE(r.turns[static_cast<std::size_t>(d.student_turn - 1)].is_answer);
      }
    auto spans = select_spans(r, decisions);
    for (const auto& s : spans) EXPECT_TRUE(decisions[static_cast<std::size_t>(s.turn - 1)].accepted);
  }
  EXPECT_GT(supervised + unsupervised, 0u);
}

TEST(Matching, ModesDifferOnlyInAlignment) {
  const auto& w = shared_world();
  auto params = w.featurizer().initial_params();
  Rng rng(5);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& task = w.tasks()[i];
    auto r = run_rollout(w, task, params, RolloutConfig{}, rng);
    MatchStats ti_stats, ea_stats;
    auto ti = match_rollout(w, task, r, MatchMode::TurnIndex, 0.95, &ti_stats);
    auto ft = match_rollout(w, task, r, MatchMode::FirstTurnOnly, 0.95);
    auto ea = match_rollout(w, task, r, MatchMode::EntityAnchor, 0.95, &ea_stats);
    EXPECT_EQ(ti_stats.jaccard_calls, 0u);
    EXPECT_GT(ea_stats.jaccard_calls, 0u);
    for (std::size_t k = 0; k < r.turns.size(); ++k) {
      if (!r.turns[k].is_answer && ti[k].drop_reason != DropReason::GoldExhausted) {
        EXPECT_EQ(ti[k].m_star, static_cast<int>(k));
      }
      if (k > 0) {
        EXPECT_FALSE(ft[k].accepted);
      } else {
        EXPECT_EQ(ft[k].accepted, ea[k].accepted);
      }
    }
  }
}

TEST(Trainer, LambdaZeroMatchesOutcomeOnly) {
  const auto& w = shared_world();
  auto p0 = w.featurizer().initial_params();
  auto run = [&](TrainMode m, double lambda) {
    auto cfg = small_config(m, lambda);
    cfg.record_sequences = true;
    Trainer t(w, p0, cfg, all_tasks(), 77);
    std::vector<std::vector<int>> seqs;
    for (int s = 0; s < 4; ++s) {
      auto rep = t.train_step();
      seqs.insert(seqs.end(), rep.sequences.begin(), rep.sequences.end());
    }
    return std::make_pair(seqs, t.params().theta);
  };
  auto a = run(TrainMode::OutcomeOnly, 0.5), b = run(TrainMode::Gapd, 0.0);
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_FALSE(a.first.empty());
}

TEST(Trainer, GoldBlockAndReferenceStayFixed) {
  const auto& w = shared_world();
  const auto& f = w.featurizer();
  auto p0 = f.initial_params();
  Trainer t(w, p0, small_config(TrainMode::Gapd), all_tasks(), 8);
  for (int s = 0; s < 5; ++s) t.train_step();
  EXPECT_EQ(t.reference().theta, p0.theta);
  EXPECT_NE(t.params().theta, p0.theta);
  EXPECT_TRUE(t.params().finite());
  EXPECT_EQ(t.steps_done(), 5);
  for (int r = 0; r < f.rows(); ++r) {
    if (!f.is_gold_row(r)) continue;
    for (int v = 0; v < p0.vocab; ++v) ASSERT_EQ(t.params().W(r, v), p0.W(r, v));
  }
  EXPECT_EQ(t.params().w(kGoldCopy), p0.w(kGoldCopy));
}

TEST(Trainer, ReportAccountsForEveryTurn) {
  const auto& w = shared_world();
  Trainer t(w, w.featurizer().initial_params(), small_config(TrainMode::Gapd), all_tasks(), 9);
  auto rep = t.train_step();
  EXPECT_EQ(rep.rewards.size(), 3u * 5u);
  std::size_t dropped = 0;
  for (auto c : rep.drop_counts) dropped += c;
  EXPECT_EQ(rep.accepted + dropped, rep.turns);
  EXPECT_EQ(rep.decisions.size(), rep.turns);
  std::size_t supervised = 0;
  for (const auto& g : rep.guides) supervised += g.supervised;
  EXPECT_EQ(supervised, rep.supervised_tokens);
  EXPECT_GT(rep.tokens, 0u);
  auto j = rep.to_json();
  EXPECT_TRUE(j.contains("drop_reason_counts"));
  EXPECT_EQ(j["drop_reason_counts"].size(), static_cast<std::size_t>(kNumDropReasons));
}

TEST(Trainer, RejectsBadSetup) {
  const auto& w = shared_world();
  auto p0 = w.featurizer().initial_params();
  EXPECT_THROW(Trainer(w, p0, small_config(TrainMode::Gapd), {}, 1), ConfigError);
  EXPECT_THROW(Trainer(w, p0, small_config(TrainMode::Gapd), {9999}, 1), ConfigError);
  auto cfg = small_config(TrainMode::Gapd);
  cfg.reward.group_size = 1;
  EXPECT_THROW(Trainer(w, p0, cfg, all_tasks(), 1), ConfigError);
}

TEST(Trainer, OutcomeOnlyDoesNoMatching) {
  const auto& w = shared_world();
  Trainer t(w, w.featurizer().initial_params(), small_config(TrainMode::OutcomeOnly), all_tasks(), 10);
  auto rep = t.train_step();
  EXPECT_EQ(rep.jaccard_calls, 0u);
  EXPECT_EQ(rep.turns, 0u);
  EXPECT_TRUE(rep.guides.empty());
}
