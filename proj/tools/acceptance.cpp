// Acceptance runner: one PASS/FAIL line per criterion; exit status 0 only when all pass.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gapd/gapd.hpp"
#include "../tests/oracles.hpp"

using namespace gapd;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double x, int prec = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << x;
  return os.str();
}

// 1. Each of the six actions renders its documented logical-form template.
Outcome action_templates() {
  auto t0 = Clock::now();
  const std::string e1 = "m.0e1", e2 = "m.0e2", r1 = "film.film.director", r2 = "film.film.genre",
                    rn = "film.film.runtime", rd = "film.film.release_date";
  auto fr = [&](ExpressionEnv env, const std::string& e, const std::string& r) {
    return apply_action(env, Action::find_relation(EntityId{e}, r));
  };
  ExpressionEnv one = fr({}, e1, r1);
  ExpressionEnv two = fr(one, e2, r2);
  struct Row {
    std::string name;
    ExpressionEnv env;
    std::string instantiated;  // template with the arguments substituted, nested parens kept
    std::string canonical;
  };
  std::vector<Row> rows = {
      {"Find_relation", one, "(JOIN " + r1 + " " + e1 + ")", "(JOIN " + r1 + " " + e1 + ")"},
      {"Merge", apply_action(two, Action::merge(SlotRef{1}, SlotRef{2})),
       "(AND ((JOIN " + r1 + " " + e1 + ")) ((JOIN " + r2 + " " + e2 + ")))",
       "(AND (JOIN " + r1 + " " + e1 + ") (JOIN " + r2 + " " + e2 + "))"},
      {"Order", apply_action(one, Action::order(OrderMode::Max, SlotRef{1}, rn)),
       "(MAX ((JOIN " + r1 + " " + e1 + ")) " + rn + ")", "(MAX (JOIN " + r1 + " " + e1 + ") " + rn + ")"},
      {"Compare", apply_action(one, Action::compare(CompareMode::Ge, rn, Literal::of_float(0.25))),
       "(ge " + rn + " 0.25 ((JOIN " + r1 + " " + e1 + ")))", "(ge " + rn + " 0.25 (JOIN " + r1 + " " + e1 + "))"},
      {"Time_constraint", apply_action(one, Action::time_constraint(rd, Literal::of_date("2010-06-01"))),
       "(TC ((JOIN " + r1 + " " + e1 + ")) " + rd + " 2010-06-01)",
       "(TC (JOIN " + r1 + " " + e1 + ") " + rd + " 2010-06-01)"},
      {"Count", apply_action(one, Action::count(SlotRef{1})), "(COUNT ((JOIN " + r1 + " " + e1 + ")))",
       "(COUNT (JOIN " + r1 + " " + e1 + "))"},
  };
  std::vector<std::string> bad;
  for (const auto& row : rows) {
    std::string got = render_logical_form(row.env.active_expression());
    std::string from_template = render_logical_form(parse_logical_form(row.instantiated));
    if (got != row.canonical || from_template != row.canonical) bad.push_back(row.name + " -> " + got);
  }
  double s = seconds_since(t0);
  Outcome o;
  o.pass = bad.empty() && s < 1.0;
  o.detail = std::to_string(rows.size() - bad.size()) + "/6 rows match, " + fmt(s, 4) + " s";
  for (const auto& b : bad) o.detail += "; mismatch " + b;
  return o;
}

// 2. evaluate() against the brute-force evaluator.
Outcome executor_oracle() {
  auto t0 = Clock::now();
  Rng rng(20240611);
  int mismatches = 0, errors = 0, nonempty = 0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    auto store = oracle::random_store(rng, 500);
    auto e = oracle::random_root(rng, store, 3);
    auto got = evaluate(store.kb, e);
    auto want = oracle::BruteForce(store.kb).run(e);
    bool same = (got.status == Status::Error) == want.error;
    if (same && !want.error) same = got.values == want.values && got.count == want.count;
    if (!same) ++mismatches;
    if (want.error) ++errors;
    else if (!want.values.empty()) ++nonempty;
  }
  double s = seconds_since(t0);
  return {mismatches == 0 && s < 30.0, std::to_string(n) + " instances, " + std::to_string(mismatches) +
                                            " mismatches (" + std::to_string(nonempty) + " non-empty, " +
                                            std::to_string(errors) + " type errors), " + fmt(s, 2) + " s"};
}

// 3. derive_gold_actions followed by apply_action reproduces every generated gold form.
Outcome gold_replay(const SyntheticWorld& world, const std::vector<SyntheticWorld>& extra) {
  std::size_t total = 0, exact = 0;
  auto check = [&](const SyntheticWorld& w) {
    for (const auto& t : w.tasks) {
      ++total;
      try {
        auto gold = parse_logical_form(t.gold_logical_form);
        ExpressionEnv env;
        for (const auto& a : derive_gold_actions(gold)) env = apply_action(env, a);
        if (env.slots.size() == 1 && structurally_equal(env.active_expression(), gold) &&
            evaluate(w.kb, env.active_expression()).values == t.gold_answers)
          ++exact;
      } catch (const std::exception&) {
      }
    }
  };
  check(world);
  for (const auto& w : extra) check(w);
  return {total > 0 && exact == total, std::to_string(exact) + "/" + std::to_string(total) + " tasks replay exactly"};
}

// 4. match_state against an exhaustive scan, plus targeted filter cases.
Outcome matching() {
  Rng rng(77);
  std::vector<Value> universe;
  for (int i = 0; i < 8; ++i) universe.push_back(EntityId{"m.u" + std::to_string(i)});
  universe.push_back(Literal::of_int(3));
  auto random_set = [&] {
    ValueSet s;
    for (const auto& v : universe)
      if (rng.chance(0.35)) s.insert(v);
    return s;
  };
  const std::vector<double> taus = {0.3, 0.5, 0.8, 0.95, 1.0};
  int disagreements = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    std::size_t m_count = static_cast<std::size_t>(rng.between(1, 6));
    std::vector<AnchorState> gold;
    std::vector<ValueSet> gold_sets;
    for (std::size_t m = 0; m < m_count; ++m) {
      ValueSet s = rng.chance(0.3) && m > 0 ? gold_sets[rng.below(m)] : random_set();
      gold_sets.push_back(s);
      gold.push_back({AnchorState::Source::Gold, static_cast<int>(m), s, nullptr});
    }
    std::vector<Action> actions;
    std::size_t n_actions = rng.chance(0.2) ? m_count - 1 - std::min<std::size_t>(m_count - 1, 1) : m_count - 1;
    for (std::size_t k = 0; k < n_actions; ++k) actions.push_back(Action::count(SlotRef{1}));
    ValueSet student = rng.chance(0.4) ? gold_sets[rng.below(m_count)] : random_set();
    double tau = taus[rng.below(taus.size())];
    auto got = match_state({AnchorState::Source::Student, 1, student, nullptr}, gold, actions, tau);
    auto want = oracle::match_scan(student, gold_sets, actions.size(), tau);
    bool same = got.m_star == want.m_star && got.similarity && *got.similarity == want.sim &&
                got.accepted == want.accepted && got.drop_reason == want.drop &&
                (got.accepted == got.conditioning_action.has_value());
    if (!same) ++disagreements;
  }
  // Filter precedence.
  int filter_failures = 0;
  ValueSet ab{EntityId{"m.a"}, EntityId{"m.b"}}, empty;
  MatchDecision acc;
  acc.accepted = true;
  acc.m_star = 0;
  acc.similarity = 1.0;
  acc.conditioning_action = Action::count(SlotRef{1});
  auto answer = apply_filters(acc, true, ab, ab);
  if (answer.accepted || answer.drop_reason != DropReason::AnswerTurn) ++filter_failures;
  auto same_next = apply_filters(acc, false, ab, ab);
  if (same_next.accepted || same_next.drop_reason != DropReason::SameNextState) ++filter_failures;
  auto both_empty = apply_filters(acc, false, empty, empty);
  if (!both_empty.accepted || both_empty.drop_reason) ++filter_failures;
  auto diverged = apply_filters(acc, false, ab, ValueSet{EntityId{"m.a"}});
  if (!diverged.accepted || !diverged.diverged || !*diverged.diverged) ++filter_failures;
  return {disagreements == 0 && filter_failures == 0,
          std::to_string(n) + " configurations, " + std::to_string(disagreements) + " disagreements; " +
              std::to_string(4 - filter_failures) + "/4 filter cases"};
}

// 5. Analytic gradients against central finite differences.
Outcome gradients() {
  Rng rng(5);
  const int rows = 5, vocab = 7, scalars = 3;
  RewardConfig cfg;
  double worst_loss = 0, worst_lp = 0;
  for (int b = 0; b < 20; ++b) {
    auto params = oracle::random_params(rng, rows, vocab, scalars);
    auto old = params;
    for (auto& x : old.theta) x += (rng.uniform() * 2 - 1) * 0.3;
    auto ref = oracle::random_params(rng, rows, vocab, scalars);
    std::vector<TrainingToken> batch;
    while (batch.size() < 12) {
      auto ctx = oracle::random_context(rng, rows, vocab, scalars);
      int tok = static_cast<int>(rng.below(vocab));
      double lp_old = log_prob(old, ctx, tok);
      double ratio = std::exp(log_prob(params, ctx, tok) - lp_old);
      // Keep away from the clip kinks, where finite differences are not meaningful.
      if (std::abs(ratio - (1 - cfg.eps_low)) < 1e-3 || std::abs(ratio - (1 + cfg.eps_high)) < 1e-3) continue;
      batch.push_back({ctx, tok, lp_old, rng.uniform() * 4 - 2});
    }
    auto res = surrogate_loss_and_grad(params, &ref, batch, cfg);
    std::vector<double> fd(params.size());
    const double h = 1e-6;
    for (std::size_t j = 0; j < params.size(); ++j) {
      auto plus = params, minus = params;
      plus.theta[j] += h;
      minus.theta[j] -= h;
      fd[j] = (surrogate_loss_and_grad(plus, &ref, batch, cfg).loss -
               surrogate_loss_and_grad(minus, &ref, batch, cfg).loss) / (2 * h);
    }
    worst_loss = std::max(worst_loss, oracle::rel_error(res.grad, fd));
  }
  for (int i = 0; i < 50; ++i) {
    auto params = oracle::random_params(rng, rows, vocab, scalars);
    auto ctx = oracle::random_context(rng, rows, vocab, scalars);
    int tok = static_cast<int>(rng.below(vocab));
    auto g = grad_log_prob(params, ctx, tok);
    std::vector<double> fd(params.size());
    const double h = 1e-5;
    for (std::size_t j = 0; j < params.size(); ++j) {
      auto plus = params, minus = params;
      plus.theta[j] += h;
      minus.theta[j] -= h;
      fd[j] = (log_prob(plus, ctx, tok) - log_prob(minus, ctx, tok)) / (2 * h);
    }
    worst_lp = std::max(worst_lp, oracle::rel_error(g, fd));
  }
  return {worst_loss < 1e-4 && worst_lp < 1e-6,
          "surrogate max rel err " + fmt(worst_loss * 1e6, 3) + "e-6 over 20 batches; log-prob max rel err " +
              fmt(worst_lp * 1e9, 3) + "e-9 over 50 instances"};
}

// 6. Advantage algebra on logged training steps.
Outcome advantage_algebra(const World& world, const ExperimentConfig& base) {
  auto tc = base.train_config(TrainMode::Gapd, 0.5);
  tc.log_guides = true;
  auto split = split_tasks(world.tasks().size(), base.eval_fraction);
  Trainer trainer(world, world.featurizer().initial_params(base.prior), tc, split.train, 99);
  double worst_sum = 0, worst_fuse = 0, min_a = 0, max_a = 0;
  std::size_t tokens = 0;
  for (int s = 0; s < 10; ++s) {
    auto rep = trainer.train_step();
    const std::size_t n = static_cast<std::size_t>(tc.reward.group_size);
    for (std::size_t g = 0; g + n <= rep.rewards.size(); g += n) {
      std::vector<double> group(rep.rewards.begin() + static_cast<std::ptrdiff_t>(g),
                                rep.rewards.begin() + static_cast<std::ptrdiff_t>(g + n));
      auto adv = group_advantages(group);
      double sum = 0;
      for (double a : adv) sum += a;
      worst_sum = std::max(worst_sum, std::abs(sum));
    }
    for (const auto& gl : rep.guides) {
      ++tokens;
      min_a = std::min(min_a, gl.a_gapd);
      max_a = std::max(max_a, gl.a_gapd);
      // fused is computed as grpo + 0.5 * a; compare up to the rounding of that single addition.
      double diff = std::abs((gl.fused - gl.grpo) - 0.5 * gl.a_gapd);
      double ulp = std::numeric_limits<double>::epsilon() * std::max({std::abs(gl.fused), std::abs(gl.grpo), 1e-300});
      worst_fuse = std::max(worst_fuse, diff / ulp);
    }
  }
  bool pass = worst_sum < 1e-10 && min_a >= -2.0 && max_a <= 2.0 && worst_fuse <= 1.0 && tokens > 0;
  return {pass, "max |sum A| " + fmt(worst_sum * 1e15, 3) + "e-15; A_gapd in [" + fmt(min_a) + ", " + fmt(max_a) +
                    "] over " + std::to_string(tokens) + " logged tokens; fusion residual <= " + fmt(worst_fuse, 2) +
                    " ulp"};
}

// 7. lambda = 0 reproduces outcome-only token for token; turn-index never calls Jaccard.
Outcome degeneration(const World& world, const ExperimentConfig& base) {
  auto split = split_tasks(world.tasks().size(), base.eval_fraction);
  auto p0 = world.featurizer().initial_params(base.prior);
  auto run = [&](TrainMode m, double lambda, std::size_t& jaccard) {
    auto tc = base.train_config(m, lambda);
    tc.record_sequences = true;
    tc.log_guides = false;
    Trainer t(world, p0, tc, split.train, 4242);
    std::vector<std::vector<int>> seqs;
    jaccard = 0;
    for (int s = 0; s < 25; ++s) {
      auto rep = t.train_step();
      jaccard += rep.jaccard_calls;
      seqs.insert(seqs.end(), rep.sequences.begin(), rep.sequences.end());
    }
    return std::make_pair(seqs, t.params().theta);
  };
  std::size_t j_out = 0, j_zero = 0, j_ti = 0, j_gapd = 0;
  auto [seq_out, th_out] = run(TrainMode::OutcomeOnly, 0.5, j_out);
  auto [seq_zero, th_zero] = run(TrainMode::Gapd, 0.0, j_zero);
  run(TrainMode::TurnIndex, 0.5, j_ti);
  run(TrainMode::Gapd, 0.5, j_gapd);
  std::size_t tokens = 0;
  for (const auto& s : seq_out) tokens += s.size();
  bool identical = seq_out == seq_zero && th_out == th_zero;
  return {identical && j_ti == 0 && j_gapd > 0,
          std::string(identical ? "identical" : "DIFFERENT") + " token streams (" + std::to_string(tokens) +
              " tokens, 25 steps) and parameters; turn_index Jaccard calls " + std::to_string(j_ti) +
              " (entity-anchor: " + std::to_string(j_gapd) + ")"};
}

struct Suite {
  std::map<std::string, std::vector<RunResult>> runs;  // key: label
  double seconds_main = 0;                              // gapd + outcome_only
};

std::string key(TrainMode m, double lambda) {
  return std::string(mode_name(m)) + (m == TrainMode::OutcomeOnly ? "" : "@" + fmt(lambda, 2));
}

Suite run_suite(const World& world, const ExperimentConfig& cfg, bool verbose) {
  Suite s;
  auto group = [&](TrainMode m, double lambda, bool guides) {
    auto c = cfg;
    c.log_guides = guides;
    auto t0 = Clock::now();
    for (auto seed : cfg.seeds) {
      auto r = run_training(world, c, m, lambda, seed);
      r.params.reset();
      if (verbose)
        std::cerr << "  " << key(m, lambda) << " seed " << seed << ": F1 " << fmt(r.initial.f1) << " -> "
                  << fmt(r.final_eval.f1) << " (" << fmt(r.seconds, 1) << " s)\n";
      s.runs[key(m, lambda)].push_back(std::move(r));
    }
    return seconds_since(t0);
  };
  s.seconds_main += group(TrainMode::OutcomeOnly, 0.0, false);
  s.seconds_main += group(TrainMode::Gapd, 0.5, true);
  group(TrainMode::TurnIndex, 0.5, false);
  group(TrainMode::FirstTurnOnly, 0.5, false);
  group(TrainMode::Gapd, 0.1, false);
  group(TrainMode::Gapd, 1.0, false);
  return s;
}

std::string describe(const Aggregate& a) {
  std::string s = fmt(a.mean) + " +- " + fmt(a.std) + " [";
  for (std::size_t i = 0; i < a.values.size(); ++i) s += (i ? " " : "") + fmt(a.values[i], 3);
  return s + "]";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  bool verbose = false, skip_training = false;
  int steps = 300;
  app.add_flag("-v,--verbose", verbose, "Per-run progress on stderr");
  app.add_flag("--skip-training", skip_training, "Only run criteria 1-7");
  app.add_option("--steps", steps, "Training steps for criteria 8-11 (minimum 300 for a valid run)");
  CLI11_PARSE(app, argc, argv);

  ExperimentConfig cfg;
  cfg.gen.num_tasks = 450;
  cfg.steps = steps;
  auto world = build_world(cfg);

  std::vector<SyntheticWorld> extra;
  for (std::uint64_t seed : {11u, 12u, 13u}) extra.push_back(generate_synthetic_kb(cfg.gen, seed));
  auto suite_world = generate_synthetic_kb(cfg.gen, cfg.world_seed);

  int failed = 0;
  auto report = [&](int id, const std::string& name, const Outcome& o) {
    std::printf("[%s] %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  };
  auto guarded = [&](const std::function<Outcome()>& f) {
    try {
      return f();
    } catch (const std::exception& e) {
      return Outcome{false, std::string("exception: ") + e.what()};
    }
  };

  report(1, "action template conformance", guarded(action_templates));
  report(2, "executor oracle equivalence", guarded(executor_oracle));
  report(3, "gold replay", guarded([&] { return gold_replay(suite_world, extra); }));
  report(4, "match correctness", guarded(matching));
  report(5, "gradient check", guarded(gradients));
  report(6, "advantage algebra", guarded([&] { return advantage_algebra(*world, cfg); }));
  report(7, "degeneration equivalences", guarded([&] { return degeneration(*world, cfg); }));

  if (skip_training) {
    std::printf("criteria 8-11 skipped\n");
    return failed ? 1 : 0;
  }

  Suite suite;
  std::string suite_error;
  try {
    suite = run_suite(*world, cfg, verbose);
  } catch (const std::exception& e) {
    suite_error = e.what();
  }
  auto agg = [&](const std::string& k) { return final_f1(suite.runs[k]); };
  const bool valid_scale = steps >= 300 && cfg.seeds.size() >= 5 && world->tasks().size() >= 200;
  const std::string scale = std::to_string(world->tasks().size()) + " tasks, " + std::to_string(cfg.seeds.size()) +
                            " seeds, " + std::to_string(steps) + " steps";

  report(8, "gapd beats outcome-only", guarded([&]() -> Outcome {
           if (!suite_error.empty()) throw std::runtime_error(suite_error);
           auto g = agg(key(TrainMode::Gapd, 0.5)), o = agg(key(TrainMode::OutcomeOnly, 0));
           double margin = g.mean - o.mean, sd = std::max(g.std, o.std);
           return {valid_scale && margin > sd && suite.seconds_main < 600,
                   "gapd " + describe(g) + " vs outcome_only " + describe(o) + "; margin " + fmt(margin) +
                       " vs max std " + fmt(sd) + "; " + scale + "; " + fmt(suite.seconds_main, 1) + " s"};
         }));
  report(9, "ablation order", guarded([&]() -> Outcome {
           if (!suite_error.empty()) throw std::runtime_error(suite_error);
           auto ti = agg(key(TrainMode::TurnIndex, 0.5)), ft = agg(key(TrainMode::FirstTurnOnly, 0.5)),
                g = agg(key(TrainMode::Gapd, 0.5));
           return {valid_scale && ti.mean <= ft.mean && ft.mean <= g.mean,
                   "turn_index " + describe(ti) + " <= first_turn_only " + describe(ft) + " <= gapd " + describe(g)};
         }));
  report(10, "negative tail mass", guarded([&]() -> Outcome {
           if (!suite_error.empty()) throw std::runtime_error(suite_error);
           std::vector<GuideLogEntry> log;
           for (const auto& r : suite.runs[key(TrainMode::Gapd, 0.5)])
             log.insert(log.end(), r.guides.begin(), r.guides.end());
           auto tm = tail_mass(log, {0.5});
           const auto& row = tm.rows.front();
           return {valid_scale && tm.divergent_tokens > 0 && tm.nondivergent_tokens > 0 &&
                       row.divergent_share > row.nondivergent_share,
                   "share of d < -0.5: divergent " + fmt(row.divergent_share) + " (" +
                       std::to_string(tm.divergent_tokens) + " tokens) vs non-divergent " +
                       fmt(row.nondivergent_share) + " (" + std::to_string(tm.nondivergent_tokens) + " tokens)"};
         }));
  report(11, "lambda sweep stability", guarded([&]() -> Outcome {
           if (!suite_error.empty()) throw std::runtime_error(suite_error);
           auto o = agg(key(TrainMode::OutcomeOnly, 0));
           double lo = 1e9, hi = -1e9;
           bool all_above = true;
           std::string detail;
           for (double l : {0.1, 0.5, 1.0}) {
             auto a = agg(key(TrainMode::Gapd, l));
             lo = std::min(lo, a.mean);
             hi = std::max(hi, a.mean);
             all_above = all_above && a.mean >= o.mean;
             detail += "lambda " + fmt(l, 1) + ": " + fmt(a.mean) + "; ";
           }
           double gap = agg(key(TrainMode::Gapd, 0.5)).mean - o.mean;
           return {valid_scale && (hi - lo) < gap && all_above,
                   detail + "range " + fmt(hi - lo) + " vs gap " + fmt(gap) + "; outcome_only " + fmt(o.mean)};
         }));

  std::printf("%d/11 criteria passed\n", 11 - failed);
  return failed ? 1 : 0;
}
