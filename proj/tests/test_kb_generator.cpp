#include <gtest/gtest.h>

#include <map>

#include "gapd/executor.hpp"
#include "gapd/kb_generator.hpp"

using namespace gapd;

namespace {

GenConfig small_config(int tasks = 80) {
  GenConfig c;
  c.num_tasks = tasks;
  return c;
}

}  // namespace

TEST(Generator, SameSeedSameWorld) {
  auto a = generate_synthetic_kb(small_config(), 3), b = generate_synthetic_kb(small_config(), 3);
  EXPECT_EQ(serialize_kb(a.kb), serialize_kb(b.kb));
  EXPECT_EQ(tasks_to_json(a.tasks), tasks_to_json(b.tasks));
  auto c = generate_synthetic_kb(small_config(), 4);
  EXPECT_NE(serialize_kb(a.kb), serialize_kb(c.kb));
}

TEST(Generator, GoldAnswersMatchExecution) {
  auto w = generate_synthetic_kb(small_config(), 5);
  ASSERT_EQ(w.tasks.size(), 80u);
  for (const auto& t : w.tasks) {
    auto r = evaluate(w.kb, parse_logical_form(t.gold_logical_form));
    EXPECT_EQ(r.status, Status::Ok) << t.gold_logical_form;
    EXPECT_EQ(r.values, t.gold_answers) << t.id;
    EXPECT_FALSE(t.topic_entities.empty());
    EXPECT_FALSE(t.question.empty());
  }
}

TEST(Generator, OperatorsCycleRoundRobin) {
  auto cfg = small_config(16);
  auto w = generate_synthetic_kb(cfg, 6);
  for (std::size_t i = 0; i < w.tasks.size(); ++i) EXPECT_EQ(w.tasks[i].op, cfg.operators[i % cfg.operators.size()]);
}

TEST(Generator, NearMissRelationsDifferInExtension) {
  auto w = generate_synthetic_kb(small_config(8), 7);
  // Near-miss relations share a stem and subject type and differ only in the final variant word.
  std::map<std::string, std::vector<std::string>> by_stem;
  for (const auto& rel : w.kb.relation_names()) {
    auto us = rel.rfind('_');
    if (us != std::string::npos) by_stem[rel.substr(0, us)].push_back(rel);
  }
  int pairs = 0, differing = 0;
  for (const auto& [stem, rels] : by_stem) {
    if (rels.size() != 2) continue;
    ++pairs;
    EXPECT_GT(relation_similarity(rels[0], rels[1]), 0.0);
    for (const auto& e : w.kb.entities()) {
      auto a = w.kb.follow({e}, rels[0], Direction::Forward), b = w.kb.follow({e}, rels[1], Direction::Forward);
      if (!a.empty() && a != b) {
        ++differing;
        break;
      }
    }
  }
  EXPECT_GT(pairs, 0);
  EXPECT_EQ(differing, pairs);
}

TEST(Generator, FiltersShrinkTheirInput) {
  auto w = generate_synthetic_kb(small_config(), 8);
  for (const auto& t : w.tasks) {
    auto g = parse_logical_form(t.gold_logical_form);
    if (g->kind == NodeKind::Cmp || g->kind == NodeKind::Tc) {
      EXPECT_LT(t.gold_answers.size(), evaluate(w.kb, g->child).values.size()) << t.gold_logical_form;
    }
  }
}

TEST(Generator, TasksJsonRoundTrip) {
  auto w = generate_synthetic_kb(small_config(24), 9);
  auto back = tasks_from_json(tasks_to_json(w.tasks));
  ASSERT_EQ(back.size(), w.tasks.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].gold_answers, w.tasks[i].gold_answers);
    EXPECT_EQ(back[i].gold_logical_form, w.tasks[i].gold_logical_form);
    EXPECT_EQ(back[i].op, w.tasks[i].op);
  }
}

TEST(Generator, ConfigValidation) {
  auto c = small_config();
  c.operators = {"join1", "bogus"};
  EXPECT_THROW(generate_synthetic_kb(c, 1), GenerationError);
  c = small_config();
  c.domains = 100;
  EXPECT_THROW(generate_synthetic_kb(c, 1), GenerationError);
  c = small_config();
  c.num_tasks = 0;
  EXPECT_THROW(c.validate(), GenerationError);
  nlohmann::json j = small_config();
  EXPECT_EQ(j.get<GenConfig>().num_tasks, 80);
}

TEST(Generator, QuestionsUseLexiconWords) {
  auto w = generate_synthetic_kb(small_config(16), 10);
  for (const auto& t : w.tasks) {
    auto g = parse_logical_form(t.gold_logical_form);
    const ExprNode* n = g.get();
    while (n->kind != NodeKind::Join) n = n->child.get();
    EXPECT_NE(t.question.find(w.lexicon.at(n->relation)), std::string::npos) << t.question;
  }
}
