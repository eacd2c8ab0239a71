#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gapd/gapd.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config_path;
  std::string world_dir;
  std::string out_dir = "runs";
  int num_tasks = -1;
  std::int64_t world_seed = -1;
  int steps = -1;
  int batch = -1;
  double lr = -1;
  double eval_fraction = -1;
  int eval_every = -1;
  std::vector<std::uint64_t> seeds;
  bool no_guides = false;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "Experiment config JSON (fields override defaults)");
  app->add_option("--world", c.world_dir, "Directory written by `gen` (kb.tsv, tasks.json) instead of generating");
  app->add_option("--out", c.out_dir, "Output directory");
  app->add_option("--num-tasks", c.num_tasks, "Number of generated tasks");
  app->add_option("--world-seed", c.world_seed, "Generator seed");
  app->add_option("--steps", c.steps, "Training steps per run");
  app->add_option("--batch", c.batch, "Prompts per step");
  app->add_option("--lr", c.lr, "Learning rate");
  app->add_option("--eval-fraction", c.eval_fraction, "Held-out share of tasks");
  app->add_option("--eval-every", c.eval_every, "Evaluate every N steps (0 = final only)");
  app->add_option("--seeds", c.seeds, "Training seeds");
  app->add_flag("--no-guides", c.no_guides, "Do not keep token-guide logs");
  app->add_flag("-q,--quiet", c.quiet, "Suppress per-run progress");
}

json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  return json::parse(f);
}

gapd::ExperimentConfig resolve(const Common& c) {
  gapd::ExperimentConfig cfg;
  if (!c.config_path.empty()) cfg = read_json(c.config_path).get<gapd::ExperimentConfig>();
  if (c.num_tasks > 0) cfg.gen.num_tasks = c.num_tasks;
  if (c.world_seed >= 0) cfg.world_seed = static_cast<std::uint64_t>(c.world_seed);
  if (c.steps >= 0) cfg.steps = c.steps;
  if (c.batch > 0) cfg.batch_prompts = c.batch;
  if (c.lr > 0) cfg.reward.learning_rate = c.lr;
  if (c.eval_fraction > 0) cfg.eval_fraction = c.eval_fraction;
  if (c.eval_every >= 0) cfg.eval_every = c.eval_every;
  if (!c.seeds.empty()) cfg.seeds = c.seeds;
  if (c.no_guides) cfg.log_guides = false;
  cfg.validate();
  return cfg;
}

std::shared_ptr<gapd::World> load_world(const Common& c, const gapd::ExperimentConfig& cfg) {
  if (c.world_dir.empty()) return gapd::build_world(cfg);
  gapd::SyntheticWorld sw;
  std::ifstream kb(fs::path(c.world_dir) / "kb.tsv");
  if (!kb) throw std::runtime_error("missing kb.tsv in " + c.world_dir);
  sw.kb = gapd::read_kb(kb);
  sw.tasks = gapd::tasks_from_json(read_json(fs::path(c.world_dir) / "tasks.json"));
  return std::make_shared<gapd::World>(std::move(sw), cfg.max_turns);
}

void write_manifest(const fs::path& dir, const gapd::ExperimentConfig& cfg, const std::string& command) {
  fs::create_directories(dir);
  gapd::write_text(dir / "manifest.json", gapd::manifest(cfg, command).dump(2) + "\n");
}

std::string join_args(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

void progress(const Common& c, const gapd::RunResult& r) {
  if (c.quiet) return;
  std::cerr << gapd::run_label(r) << ": F1 " << r.initial.f1 << " -> " << r.final_eval.f1 << " (EM "
            << r.final_eval.em << ", " << r.seconds << " s)\n";
}

json run_group(const gapd::World& world, const gapd::ExperimentConfig& cfg, const Common& c, gapd::TrainMode mode,
               double lambda, const fs::path& out) {
  std::vector<gapd::RunResult> runs;
  json per_seed = json::array();
  for (auto seed : cfg.seeds) {
    auto r = gapd::run_training(world, cfg, mode, lambda, seed);
    progress(c, r);
    gapd::write_run(out / gapd::run_label(r), r);
    per_seed.push_back(gapd::run_summary(r));
    r.guides.clear();
    runs.push_back(std::move(r));
  }
  return {{"mode", std::string(gapd::mode_name(mode))}, {"lambda", lambda}, {"final_f1", gapd::final_f1(runs)},
          {"runs", per_seed}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gold-action policy distillation on synthetic knowledge-base QA"};
  app.require_subcommand(1);
  const std::string command = join_args(argc, argv);

  Common gen_c, train_c, sweep_c, ablate_c, eval_c;

  auto* gen = app.add_subcommand("gen", "Generate a KB and task suite");
  add_common(gen, gen_c);

  auto* train = app.add_subcommand("train", "Train one configuration over the seed list");
  add_common(train, train_c);
  std::string mode = "gapd";
  double lambda = -1;
  train->add_option("--mode", mode, "gapd | outcome_only | turn_index | first_turn_only");
  train->add_option("--lambda", lambda, "Guide weight (default from config)");

  auto* sweep = app.add_subcommand("sweep", "Grid over guide weights plus the outcome-only baseline");
  add_common(sweep, sweep_c);
  std::vector<double> lambdas;
  sweep->add_option("--lambdas", lambdas, "Guide weights");

  auto* ablate = app.add_subcommand("ablate", "Alignment ablation: all four modes");
  add_common(ablate, ablate_c);

  auto* eval = app.add_subcommand("eval", "Greedy evaluation of a saved policy");
  add_common(eval, eval_c);
  std::string policy_path;
  bool eval_all = false;
  eval->add_option("--policy", policy_path, "policy.json written by train (omit for the initial prior)");
  eval->add_flag("--all", eval_all, "Evaluate on every task instead of the held-out split");

  auto* tail = app.add_subcommand("analyze-tail", "Negative-tail mass of token guides");
  std::string guides_path;
  std::vector<double> thresholds = {0.25, 0.5, 1.0, 1.5};
  tail->add_option("guides", guides_path, "guides.jsonl written by train")->required();
  tail->add_option("--thresholds", thresholds, "Tail thresholds t (share of d < -t)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto cfg = resolve(gen_c);
      auto sw = gapd::generate_synthetic_kb(cfg.gen, cfg.world_seed);
      fs::path out = gen_c.out_dir;
      fs::create_directories(out);
      gapd::write_text(out / "kb.tsv", gapd::serialize_kb(sw.kb));
      gapd::write_text(out / "tasks.json", gapd::tasks_to_json(sw.tasks).dump(2) + "\n");
      gapd::write_text(out / "lexicon.json", json(sw.lexicon).dump(2) + "\n");
      write_manifest(out, cfg, command);
      std::cout << json{{"triples", sw.kb.size()}, {"tasks", sw.tasks.size()}, {"out", out.string()}}.dump() << "\n";
    } else if (*train) {
      auto cfg = resolve(train_c);
      cfg.mode = gapd::parse_train_mode(mode);
      if (lambda >= 0) cfg.reward.lambda_gapd = lambda;
      cfg.validate();
      auto world = load_world(train_c, cfg);
      fs::path out = train_c.out_dir;
      write_manifest(out, cfg, command);
      auto summary = run_group(*world, cfg, train_c, cfg.mode, cfg.reward.lambda_gapd, out);
      gapd::write_text(out / "summary.json", summary.dump(2) + "\n");
      std::cout << summary["final_f1"].dump() << "\n";
    } else if (*sweep) {
      auto cfg = resolve(sweep_c);
      if (!lambdas.empty()) cfg.lambdas = lambdas;
      cfg.validate();
      auto world = load_world(sweep_c, cfg);
      fs::path out = sweep_c.out_dir;
      write_manifest(out, cfg, command);
      json groups = json::array();
      groups.push_back(run_group(*world, cfg, sweep_c, gapd::TrainMode::OutcomeOnly, 0.0, out));
      for (double l : cfg.lambdas) groups.push_back(run_group(*world, cfg, sweep_c, gapd::TrainMode::Gapd, l, out));
      gapd::write_text(out / "summary.json", groups.dump(2) + "\n");
      for (const auto& g : groups)
        std::cout << g["mode"].get<std::string>() << " lambda=" << g["lambda"] << " F1 "
                  << g["final_f1"]["mean"] << " +- " << g["final_f1"]["std"] << "\n";
    } else if (*ablate) {
      auto cfg = resolve(ablate_c);
      auto world = load_world(ablate_c, cfg);
      fs::path out = ablate_c.out_dir;
      write_manifest(out, cfg, command);
      json groups = json::array();
      for (auto m : {gapd::TrainMode::OutcomeOnly, gapd::TrainMode::TurnIndex, gapd::TrainMode::FirstTurnOnly,
                     gapd::TrainMode::Gapd})
        groups.push_back(run_group(*world, cfg, ablate_c, m, m == gapd::TrainMode::OutcomeOnly ? 0.0 : cfg.reward.lambda_gapd, out));
      gapd::write_text(out / "summary.json", groups.dump(2) + "\n");
      for (const auto& g : groups)
        std::cout << g["mode"].get<std::string>() << " F1 " << g["final_f1"]["mean"] << " +- "
                  << g["final_f1"]["std"] << "\n";
    } else if (*eval) {
      auto cfg = resolve(eval_c);
      auto world = load_world(eval_c, cfg);
      auto params = policy_path.empty() ? world->featurizer().initial_params(cfg.prior)
                                        : gapd::params_from_json(read_json(policy_path));
      std::vector<std::size_t> idx;
      if (eval_all) {
        for (std::size_t i = 0; i < world->tasks().size(); ++i) idx.push_back(i);
      } else {
        idx = gapd::split_tasks(world->tasks().size(), cfg.eval_fraction).eval;
      }
      std::cout << json(gapd::eval_metrics(*world, params, idx, cfg.max_turns, cfg.max_tokens)).dump() << "\n";
    } else if (*tail) {
      auto log = gapd::read_guides(guides_path);
      std::cout << json(gapd::tail_mass(log, thresholds)).dump(2) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
