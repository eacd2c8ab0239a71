#include <gtest/gtest.h>

#include <cmath>

#include "gapd/policy.hpp"
#include "oracles.hpp"

using namespace gapd;

namespace {

// Scores computed term by term from the definition.
std::vector<double> naive_logp(const PolicyParams& p, const ContextState& ctx) {
  std::vector<double> s(static_cast<std::size_t>(p.vocab), 0.0);
  for (int v = 0; v < p.vocab; ++v) {
    for (int r : ctx.rows) s[static_cast<std::size_t>(v)] += p.W(r, v);
    for (const auto& c : ctx.cands)
      if (c.token == v) s[static_cast<std::size_t>(v)] += p.w(c.feature) * c.value;
  }
  double z = 0;
  for (double x : s) z += std::exp(x);
  for (double& x : s) x -= std::log(z);
  return s;
}

struct CountingProvider {
  int pushed = 0;
  int vocab = 4;
  ContextState context() const {
    ContextState c;
    c.rows = {pushed % 2};
    return c;
  }
  void push(int) { ++pushed; }
};

}  // namespace

TEST(Policy, LogProbMatchesNaiveSoftmax) {
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    auto p = oracle::random_params(rng, 4, 6, 3, 3.0);
    auto ctx = oracle::random_context(rng, 4, 6, 3);
    auto want = naive_logp(p, ctx);
    auto d = next_token_distribution(p, ctx);
    double total = 0;
    for (int v = 0; v < 6; ++v) {
      EXPECT_NEAR(d.logp[static_cast<std::size_t>(v)], want[static_cast<std::size_t>(v)], 1e-12);
      total += d.probs[static_cast<std::size_t>(v)];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Policy, TemperatureSharpens) {
  Rng rng(2);
  auto p = oracle::random_params(rng, 2, 5, 1, 2.0);
  ContextState ctx{{0, 1}, {}, false};
  auto hot = next_token_distribution(p, ctx, 2.0), cold = next_token_distribution(p, ctx, 0.5);
  int top = argmax_token(cold.probs);
  EXPECT_EQ(top, argmax_token(hot.probs));
  EXPECT_GT(cold.probs[static_cast<std::size_t>(top)], hot.probs[static_cast<std::size_t>(top)]);
  EXPECT_THROW(next_token_distribution(p, ctx, 0.0), PolicyError);
}

TEST(Policy, ExtremeScoresStayFinite) {
  PolicyParams p(1, 3, 0);
  p.W(0, 0) = 800;
  p.W(0, 1) = -800;
  auto d = next_token_distribution(p, ContextState{{0}, {}, false});
  for (double x : d.logp) EXPECT_TRUE(std::isfinite(x));
  EXPECT_NEAR(d.probs[0], 1.0, 1e-12);
}

TEST(Policy, RejectsOutOfRangeContext) {
  PolicyParams p(2, 3, 1);
  EXPECT_THROW(check_context(p, ContextState{{2}, {}, false}), PolicyError);
  EXPECT_THROW(check_context(p, ContextState{{0}, {{3, 0, 1.0}}, false}), PolicyError);
  EXPECT_THROW(log_prob(p, ContextState{{0}, {}, false}, 5), PolicyError);
  EXPECT_THROW(PolicyParams(0, 3, 1), PolicyError);
}

TEST(Policy, GradLogProbMatchesFiniteDifferences) {
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    auto p = oracle::random_params(rng, 4, 5, 2);
    auto ctx = oracle::random_context(rng, 4, 5, 2);
    int tok = static_cast<int>(rng.below(5));
    auto g = grad_log_prob(p, ctx, tok);
    std::vector<double> fd(p.size());
    for (std::size_t j = 0; j < p.size(); ++j) {
      auto a = p, b = p;
      a.theta[j] += 1e-5;
      b.theta[j] -= 1e-5;
      fd[j] = (log_prob(a, ctx, tok) - log_prob(b, ctx, tok)) / 2e-5;
    }
    EXPECT_LT(oracle::rel_error(g, fd), 1e-6);
  }
}

TEST(Policy, KlIsZeroOnlyForEqualDistributions) {
  Rng rng(4);
  auto p = oracle::random_params(rng, 2, 4, 1), q = oracle::random_params(rng, 2, 4, 1);
  ContextState ctx{{0, 1}, {}, false};
  auto dp = next_token_distribution(p, ctx), dq = next_token_distribution(q, ctx);
  EXPECT_NEAR(kl_divergence(dp, dp), 0.0, 1e-15);
  EXPECT_GT(kl_divergence(dp, dq), 0.0);
}

TEST(Sampling, NucleusExcludesTail) {
  Rng rng(5);
  std::vector<double> probs = {0.6, 0.3, 0.095, 0.005};
  std::vector<int> hits(4, 0);
  for (int i = 0; i < 20000; ++i) ++hits[static_cast<std::size_t>(sample_nucleus(probs, 0.99, rng))];
  EXPECT_EQ(hits[3], 0);
  EXPECT_NEAR(hits[0] / 20000.0, 0.6 / 0.995, 0.02);
  EXPECT_NEAR(hits[2] / 20000.0, 0.095 / 0.995, 0.01);
  EXPECT_THROW(sample_nucleus(probs, 0.0, rng), PolicyError);
}

TEST(Sampling, FullNucleusMatchesProbabilities) {
  Rng rng(6);
  std::vector<double> probs = {0.5, 0.25, 0.25};
  std::vector<int> hits(3, 0);
  for (int i = 0; i < 20000; ++i) ++hits[static_cast<std::size_t>(sample_nucleus(probs, 1.0, rng))];
  for (std::size_t v = 0; v < 3; ++v) EXPECT_NEAR(hits[v] / 20000.0, probs[v], 0.02);
}

TEST(Sampling, TurnStopsAtEndToken) {
  PolicyParams p(2, 4, 0);
  p.W(0, 2) = 50;  // even positions emit 2
  p.W(1, 3) = 50;  // odd positions emit the end token
  Rng rng(7);
  auto turn = sample_turn(p, CountingProvider{}, 1.0, 0.99, rng, 3, 10);
  EXPECT_TRUE(turn.ended);
  EXPECT_EQ(turn.tokens, (std::vector<int>{2, 3}));
  ASSERT_EQ(turn.logp.size(), 2u);
  EXPECT_NEAR(turn.logp[0], 0.0, 1e-12);
  auto greedy = sample_turn(p, CountingProvider{}, 1.0, 0.99, rng, 1, 3, true);
  EXPECT_FALSE(greedy.ended);
  EXPECT_EQ(greedy.tokens.size(), 3u);
}

TEST(Checkpoint, JsonRoundTrip) {
  Rng rng(8);
  auto p = oracle::random_params(rng, 3, 4, 2);
  auto back = params_from_json(params_to_json(p));
  EXPECT_EQ(back.theta, p.theta);
  EXPECT_EQ(back.rows, 3);
  auto j = params_to_json(p);
  j["theta"].erase(0);
  EXPECT_THROW(params_from_json(j), PolicyError);
  j = params_to_json(p);
  j["format"] = "other";
  EXPECT_THROW(params_from_json(j), PolicyError);
}

TEST(Checkpoint, SnapshotIsFrozenCopy) {
  PolicyParams p(1, 2, 0);
  auto snap = snapshot(p);
  p.W(0, 0) = 5;
  EXPECT_EQ(snap->W(0, 0), 0.0);
}
