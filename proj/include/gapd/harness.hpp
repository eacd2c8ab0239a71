#pragma once

// Experiment runner: world construction, training runs per mode, greedy evaluation,
// artifact output and the negative-tail analysis of token guides.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gapd/featurizer.hpp"
#include "gapd/kb_generator.hpp"
#include "gapd/rollout.hpp"
#include "gapd/trainer.hpp"

#ifndef GAPD_CODE_VERSION
#define GAPD_CODE_VERSION "unknown"
#endif

namespace gapd {

struct ExperimentConfig {
  GenConfig gen;
  std::uint64_t world_seed = 7;
  RewardConfig reward;
  PriorConfig prior;
  TrainMode mode = TrainMode::Gapd;
  std::vector<double> lambdas = {0.1, 0.5, 1.0};
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  int steps = 300;
  int batch_prompts = 8;
  double eval_fraction = 1.0 / 3.0;
  int eval_every = 0;  // 0: evaluate only at the end
  int max_turns = 8;
  int max_tokens = 64;
  bool log_guides = true;

  ExperimentConfig() { reward.learning_rate = 50.0; }

  void validate() const {
    gen.validate();
    reward.validate();
    if (seeds.empty()) throw ConfigError("seed list must be non-empty");
    if (steps < 0 || batch_prompts < 1 || max_turns < 1 || max_tokens < 1 || eval_every < 0)
      throw ConfigError("steps, batch size, turn and token limits must be positive");
    if (!(eval_fraction > 0 && eval_fraction < 1)) throw ConfigError("eval_fraction must lie in (0, 1)");
    for (double l : lambdas)
      if (l < 0) throw ConfigError("lambda values must be non-negative");
  }

  TrainConfig train_config(TrainMode m, double lambda) const {
    TrainConfig tc;
    tc.reward = reward;
    tc.reward.lambda_gapd = lambda;
    tc.mode = m;
    tc.batch_prompts = batch_prompts;
    tc.max_tokens = max_tokens;
    tc.max_turns = max_turns;
    tc.log_guides = log_guides;
    return tc;
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"gen", c.gen},
       {"world_seed", c.world_seed},
       {"reward", c.reward},
       {"prior", c.prior},
       {"mode", std::string(mode_name(c.mode))},
       {"lambdas", c.lambdas},
       {"seeds", c.seeds},
       {"steps", c.steps},
       {"batch_prompts", c.batch_prompts},
       {"eval_fraction", c.eval_fraction},
       {"eval_every", c.eval_every},
       {"max_turns", c.max_turns},
       {"max_tokens", c.max_tokens},
       {"log_guides", c.log_guides}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  ExperimentConfig d;
  if (j.contains("gen")) c.gen = j.at("gen").get<GenConfig>();
  c.world_seed = j.value("world_seed", d.world_seed);
  if (j.contains("reward")) c.reward = j.at("reward").get<RewardConfig>();
  if (j.contains("prior")) c.prior = j.at("prior").get<PriorConfig>();
  c.mode = parse_train_mode(j.value("mode", std::string(mode_name(d.mode))));
  c.lambdas = j.value("lambdas", d.lambdas);
  c.seeds = j.value("seeds", d.seeds);
  c.steps = j.value("steps", d.steps);
  c.batch_prompts = j.value("batch_prompts", d.batch_prompts);
  c.eval_fraction = j.value("eval_fraction", d.eval_fraction);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.max_turns = j.value("max_turns", d.max_turns);
  c.max_tokens = j.value("max_tokens", d.max_tokens);
  c.log_guides = j.value("log_guides", d.log_guides);
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalMetrics {
  double em = 0;
  double f1 = 0;
  double interactions = 0;  // mean executed turns per task, answer turn included
  std::size_t tasks = 0;
};

inline void to_json(nlohmann::json& j, const EvalMetrics& m) {
  j = {{"em", m.em}, {"f1", m.f1}, {"interactions", m.interactions}, {"tasks", m.tasks}};
}

inline EvalMetrics eval_metrics(const World& world, const PolicyParams& params, const std::vector<std::size_t>& tasks,
                                int max_turns = 8, int max_tokens = 64) {
  EvalMetrics m;
  if (tasks.empty()) return m;
  RolloutConfig rc;
  rc.greedy = true;
  rc.max_turns = max_turns;
  rc.max_tokens = max_tokens;
  Rng unused(0);
  for (auto i : tasks) {
    const auto& t = world.tasks().at(i);
    auto r = run_rollout(world, t, params, rc, unused);
    m.f1 += answer_f1(r.answer, r.gold);
    m.em += (!r.answer.empty() && r.answer == r.gold) ? 1.0 : 0.0;
    m.interactions += static_cast<double>(r.turns.size());
  }
  const double n = static_cast<double>(tasks.size());
  m.em /= n;
  m.f1 /= n;
  m.interactions /= n;
  m.tasks = tasks.size();
  return m;
}

struct TaskSplit {
  std::vector<std::size_t> train, eval;
};

// Tasks cycle through operators, so a contiguous tail keeps every operator in both halves.
inline TaskSplit split_tasks(std::size_t n, double eval_fraction) {
  if (n < 2) throw ConfigError("need at least two tasks to split");
  auto n_eval = static_cast<std::size_t>(std::llround(static_cast<double>(n) * eval_fraction));
  n_eval = std::clamp<std::size_t>(n_eval, 1, n - 1);
  TaskSplit s;
  for (std::size_t i = 0; i < n; ++i) (i < n - n_eval ? s.train : s.eval).push_back(i);
  return s;
}

// ---------------------------------------------------------------------------
// Tail mass

struct TailMassRow {
  double threshold = 0;
  double divergent_share = 0;
  double nondivergent_share = 0;
};

struct TailMassReport {
  std::size_t divergent_tokens = 0;
  std::size_t nondivergent_tokens = 0;
  std::vector<TailMassRow> rows;
};

inline void to_json(nlohmann::json& j, const TailMassReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"threshold", row.threshold},
                    {"divergent_share", row.divergent_share},
                    {"nondivergent_share", row.nondivergent_share}});
  j = {{"divergent_tokens", r.divergent_tokens}, {"nondivergent_tokens", r.nondivergent_tokens}, {"rows", rows}};
}

// Share of logged tokens with d < -t, split by whether the matched turn's next entity set
// diverged from the gold one.
inline TailMassReport tail_mass(const std::vector<GuideLogEntry>& log, const std::vector<double>& thresholds) {
  if (log.empty()) throw ConfigError("guide log is empty");
  TailMassReport rep;
  for (const auto& g : log) (g.diverged ? rep.divergent_tokens : rep.nondivergent_tokens)++;
  for (double t : thresholds) {
    std::size_t div = 0, nondiv = 0;
    for (const auto& g : log)
      if (g.d < -t) (g.diverged ? div : nondiv)++;
    TailMassRow row{t, 0, 0};
    if (rep.divergent_tokens) row.divergent_share = static_cast<double>(div) / static_cast<double>(rep.divergent_tokens);
    if (rep.nondivergent_tokens)
      row.nondivergent_share = static_cast<double>(nondiv) / static_cast<double>(rep.nondivergent_tokens);
    rep.rows.push_back(row);
  }
  return rep;
}

inline nlohmann::json guide_to_json(const GuideLogEntry& g) {
  return {{"step", g.step},         {"task_id", g.task_id}, {"response_index", g.response_index},
          {"turn", g.turn},         {"position", g.position}, {"d", g.d},
          {"a_gapd", g.a_gapd},     {"fused", g.fused},     {"grpo", g.grpo},
          {"supervised", g.supervised}, {"diverged", g.diverged}};
}

inline GuideLogEntry guide_from_json(const nlohmann::json& j) {
  GuideLogEntry g;
  g.step = j.value("step", 0);
  g.task_id = j.value("task_id", std::string());
  g.response_index = j.value("response_index", 0);
  g.turn = j.value("turn", 0);
  g.position = j.value("position", std::size_t{0});
  g.d = j.at("d").get<double>();
  g.a_gapd = j.value("a_gapd", 0.0);
  g.fused = j.value("fused", 0.0);
  g.grpo = j.value("grpo", 0.0);
  g.supervised = j.value("supervised", false);
  g.diverged = j.at("diverged").get<bool>();
  return g;
}

// ---------------------------------------------------------------------------
// Runs

struct CurvePoint {
  int step = 0;
  double reward = 0;
  double reward_ema = 0;
  double outcome = 0;
  double accepted_rate = 0;
  double mean_abs_gapd = 0;
  std::optional<EvalMetrics> eval;
};

struct RunResult {
  TrainMode mode = TrainMode::Gapd;
  double lambda = 0;
  std::uint64_t seed = 0;
  EvalMetrics initial;
  EvalMetrics final_eval;
  std::vector<CurvePoint> curve;
  std::vector<StepReport> reports;  // without guide payloads
  std::vector<GuideLogEntry> guides;
  double seconds = 0;
  std::optional<PolicyParams> params;
};

inline std::shared_ptr<World> build_world(const ExperimentConfig& cfg) {
  return std::make_shared<World>(generate_synthetic_kb(cfg.gen, cfg.world_seed), cfg.max_turns);
}

inline RunResult run_training(const World& world, const ExperimentConfig& cfg, TrainMode mode, double lambda,
                              std::uint64_t seed, const std::function<void(const StepReport&)>& on_step = {}) {
  cfg.validate();
  auto split = split_tasks(world.tasks().size(), cfg.eval_fraction);
  auto p0 = world.featurizer().initial_params(cfg.prior);
  RunResult res;
  res.mode = mode;
  res.lambda = lambda;
  res.seed = seed;
  auto t0 = std::chrono::steady_clock::now();
  res.initial = eval_metrics(world, p0, split.eval, cfg.max_turns, cfg.max_tokens);
  Trainer trainer(world, std::move(p0), cfg.train_config(mode, lambda), split.train, seed);
  constexpr double kAlpha = 0.2;
  double ema = 0;
  for (int s = 0; s < cfg.steps; ++s) {
    auto rep = trainer.train_step();
    ema = s == 0 ? rep.mean_reward : kAlpha * rep.mean_reward + (1 - kAlpha) * ema;
    CurvePoint cp{rep.step, rep.mean_reward, ema, rep.mean_outcome, rep.accepted_rate, rep.mean_abs_gapd, std::nullopt};
    if (cfg.eval_every > 0 && (s + 1) % cfg.eval_every == 0)
      cp.eval = eval_metrics(world, trainer.params(), split.eval, cfg.max_turns, cfg.max_tokens);
    res.curve.push_back(cp);
    if (on_step) on_step(rep);
    if (cfg.log_guides) res.guides.insert(res.guides.end(), rep.guides.begin(), rep.guides.end());
    rep.guides.clear();
    rep.decisions.clear();
    res.reports.push_back(std::move(rep));
  }
  res.final_eval = eval_metrics(world, trainer.params(), split.eval, cfg.max_turns, cfg.max_tokens);
  res.params = trainer.params();
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

struct Aggregate {
  double mean = 0;
  double std = 0;  // sample standard deviation
  std::vector<double> values;
};

inline Aggregate aggregate(std::vector<double> v) {
  Aggregate a;
  a.values = std::move(v);
  if (a.values.empty()) return a;
  a.mean = std::accumulate(a.values.begin(), a.values.end(), 0.0) / static_cast<double>(a.values.size());
  if (a.values.size() > 1) {
    double ss = 0;
    for (double x : a.values) ss += (x - a.mean) * (x - a.mean);
    a.std = std::sqrt(ss / static_cast<double>(a.values.size() - 1));
  }
  return a;
}

inline void to_json(nlohmann::json& j, const Aggregate& a) {
  j = {{"mean", a.mean}, {"std", a.std}, {"values", a.values}};
}

inline Aggregate final_f1(const std::vector<RunResult>& runs) {
  std::vector<double> v;
  for (const auto& r : runs) v.push_back(r.final_eval.f1);
  return aggregate(std::move(v));
}

// ---------------------------------------------------------------------------
// Artifacts

inline nlohmann::json run_summary(const RunResult& r) {
  return {{"mode", std::string(mode_name(r.mode))},
          {"lambda", r.lambda},
          {"seed", r.seed},
          {"initial_eval", r.initial},
          {"final_eval", r.final_eval},
          {"steps", r.reports.size()},
          {"seconds", r.seconds}};
}

inline std::string curve_csv(const RunResult& r) {
  std::ostringstream os;
  os << "step,reward,reward_ema,outcome,accepted_rate,mean_abs_gapd,eval_f1,eval_em\n";
  for (const auto& c : r.curve) {
    os << c.step << ',' << c.reward << ',' << c.reward_ema << ',' << c.outcome << ',' << c.accepted_rate << ','
       << c.mean_abs_gapd << ',';
    if (c.eval) os << c.eval->f1 << ',' << c.eval->em;
    else os << ',';
    os << '\n';
  }
  return os.str();
}

inline nlohmann::json manifest(const ExperimentConfig& cfg, const std::string& command) {
  return {{"command", command}, {"code_version", GAPD_CODE_VERSION}, {"config", cfg}};
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << s;
}

inline std::string run_label(const RunResult& r) {
  std::ostringstream os;
  os << mode_name(r.mode) << "_lambda" << r.lambda << "_seed" << r.seed;
  return os.str();
}

// One directory per run: curve.csv, steps.jsonl, guides.jsonl, summary.json, policy.json.
inline void write_run(const std::filesystem::path& dir, const RunResult& r, bool save_policy = true) {
  std::filesystem::create_directories(dir);
  write_text(dir / "curve.csv", curve_csv(r));
  std::ostringstream steps;
  for (const auto& rep : r.reports) steps << rep.to_json().dump() << '\n';
  write_text(dir / "steps.jsonl", steps.str());
  if (!r.guides.empty()) {
    std::ostringstream g;
    for (const auto& e : r.guides) g << guide_to_json(e).dump() << '\n';
    write_text(dir / "guides.jsonl", g.str());
  }
  write_text(dir / "summary.json", run_summary(r).dump(2) + "\n");
  if (save_policy && r.params) write_text(dir / "policy.json", params_to_json(*r.params).dump() + "\n");
}

inline std::vector<GuideLogEntry> read_guides(const std::filesystem::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  std::vector<GuideLogEntry> out;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) out.push_back(guide_from_json(nlohmann::json::parse(line)));
  return out;
}

}  // namespace gapd
