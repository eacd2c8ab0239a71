#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "gapd/action_lang.hpp"
#include "gapd/rng.hpp"
#include "oracles.hpp"

using namespace gapd;
namespace fs = std::filesystem;

TEST(Parse, ActionRoundTripsThroughRender) {
  const std::vector<std::string> texts = {
      "Find_relation [ m.0f1 | film.film.director ]",
      "Find_relation [ expression2 | (R film.film.director) ]",
      "Merge [ expression1 | expression2 ]",
      "Merge [ expression1 | film.film ]",
      "Order [ MIN | expression1 | film.film.runtime ]",
      "Compare [ lt | film.film.runtime | 90 (xsd:integer) ]",
      "Time_constraint [ film.film.release_date | 2001-05-04 (xsd:date) ]",
      "Count [ expression1 ]",
      "Answer [ m.0a m.0b expression1 ]",
  };
  for (const auto& t : texts) {
    auto a = parse_action(t);
    EXPECT_EQ(render_action(a), t);
    EXPECT_EQ(parse_action(render_action(a)), a) << t;
  }
}

TEST(Parse, ToleratesWhitespaceAndUntypedLiterals) {
  auto a = parse_action("  Compare[ge|film.film.runtime|  2.5 ]");
  EXPECT_EQ(a.kind, ActionKind::Compare);
  EXPECT_EQ(a.compare_mode, CompareMode::Ge);
  EXPECT_EQ(a.literal.type, Datatype::Float);
  auto d = parse_action("Time_constraint [ r.s.t | 1999-12-31 ]");
  EXPECT_EQ(d.literal.type, Datatype::Date);
}

TEST(Parse, ErrorsCarryOffsets) {
  auto offset_of = [](const std::string& text) -> std::size_t {
    try {
      parse_action(text);
    } catch (const ParseError& e) {
      return e.offset();
    }
    ADD_FAILURE() << "no error for " << text;
    return 0;
  };
  EXPECT_EQ(offset_of("Lookup [ x ]"), 0u);
  EXPECT_EQ(offset_of("Order [ BIG | expression1 | r.s.t ]"), 8u);
  EXPECT_EQ(offset_of("Count expression1"), 6u);
  EXPECT_THROW(parse_action("Count [ expression1"), ParseError);
  EXPECT_THROW(parse_action("Count [ expression1 | expression2 ]"), ParseError);
  EXPECT_THROW(parse_action("Compare [ ge | r.s.t | 2001-01-01 ]"), ParseError);
  EXPECT_THROW(parse_action("Time_constraint [ r.s.t | 12 ]"), ParseError);
  EXPECT_THROW(parse_action("Count [ expression1 ] extra"), ParseError);
}

TEST(LogicalForm, ParseRenderRoundTrip) {
  const std::vector<std::string> forms = {
      "(JOIN film.film.director m.0p1)",
      "(JOIN (R film.film.director) m.0p1)",
      "(AND (JOIN a.b.c m.1) (JOIN (R a.b.d) m.2))",
      "(AND (JOIN a.b.c m.1) a.b)",
      "(MAX (JOIN a.b.c m.1) a.b.n)",
      "(le a.b.n 3 (JOIN a.b.c m.1))",
      "(TC (JOIN a.b.c m.1) a.b.d 2001-01-01)",
      "(COUNT (JOIN a.b.c m.1))",
  };
  for (const auto& f : forms) EXPECT_EQ(render_logical_form(parse_logical_form(f)), f);
  EXPECT_THROW(parse_logical_form("(JOIN a.b.c"), ParseError);
  EXPECT_THROW(parse_logical_form("(FOO a m.1)"), ParseError);
}

TEST(LogicalForm, ExtraParenthesesAreCanonicalized) {
  auto a = parse_logical_form("(AND ((JOIN a.b.c m.1)) ((JOIN a.b.d m.2)))");
  EXPECT_EQ(render_logical_form(a), "(AND (JOIN a.b.c m.1) (JOIN a.b.d m.2))");
}

TEST(Apply, EchoLinesFollowActionTemplates) {
  ExpressionEnv env;
  env = apply_action(env, Action::find_relation(EntityId{"m.1"}, "a.b.c"));
  env = apply_action(env, Action::find_relation(EntityId{"m.2"}, "a.b.d", true));
  env = apply_action(env, Action::merge(SlotRef{1}, SlotRef{2}));
  env = apply_action(env, Action::compare(CompareMode::Ge, "a.b.n", Literal::of_float(0.25)));
  env = apply_action(env, Action::time_constraint("a.b.t", Literal::of_date("2001-01-01")));
  env = apply_action(env, Action::order(OrderMode::Max, SlotRef{1}, "a.b.n"));
  env = apply_action(env, Action::count(SlotRef{1}));
  const std::vector<std::string> want = {
      "expression1 = START('m.1')",
      "expression1 = JOIN('a.b.c', expression1)",
      "expression2 = START('m.2')",
      "expression2 = JOIN('(R a.b.d)', expression2)",
      "expression1 = AND(expression1, expression2)",
      "expression1 = CMP('ge', 'a.b.n', '0.25', expression1)",
      "expression1 = TC(expression1, 'a.b.t', '2001-01-01')",
      "expression1 = ARG('MAX', expression1, 'a.b.n')",
      "expression1 = COUNT(expression1)",
  };
  EXPECT_EQ(env.history, want);
  EXPECT_EQ(env.slots.size(), 1u);
  EXPECT_EQ(render_logical_form(env.active_expression()),
            "(COUNT (MAX (TC (ge a.b.n 0.25 (AND (JOIN a.b.c m.1) (JOIN (R a.b.d) m.2))) a.b.t 2001-01-01) a.b.n))");
}

TEST(Apply, RejectsInvalidReferences) {
  ExpressionEnv env;
  EXPECT_THROW(apply_action(env, Action::count(SlotRef{1})), ActionError);
  EXPECT_THROW(apply_action(env, Action::compare(CompareMode::Ge, "a.b.n", Literal::of_int(1))), ActionError);
  env = apply_action(env, Action::find_relation(EntityId{"m.1"}, "a.b.c"));
  EXPECT_THROW(apply_action(env, Action::merge(SlotRef{1}, SlotRef{1})), ActionError);
  auto counted = apply_action(env, Action::count(SlotRef{1}));
  EXPECT_THROW(apply_action(counted, Action::find_relation(SlotRef{1}, "a.b.c")), ActionError);
  EXPECT_THROW(apply_action(env, Action::time_constraint("a.b.t", Literal::of_int(3))), ActionError);
}

TEST(Apply, IsFunctional) {
  ExpressionEnv env;
  auto one = apply_action(env, Action::find_relation(EntityId{"m.1"}, "a.b.c"));
  auto two = apply_action(one, Action::count(SlotRef{1}));
  EXPECT_TRUE(env.empty());
  EXPECT_EQ(one.active_expression()->kind, NodeKind::Join);
  EXPECT_EQ(two.active_expression()->kind, NodeKind::Count);
}

TEST(GoldDerivation, RejectsUnreachableForms) {
  EXPECT_THROW(derive_gold_actions(parse_logical_form("m.1")), UnsupportedForm);
  EXPECT_THROW(derive_gold_actions(parse_logical_form("(JOIN a.b.c (COUNT (JOIN a.b.d m.1)))")), UnsupportedForm);
}

TEST(GoldDerivationProperty, ReplayRebuildsRandomForms) {
  Rng rng(17);
  int checked = 0;
  for (int i = 0; i < 2500; ++i) {
    auto s = oracle::random_store(rng, 50);
    auto e = oracle::random_root(rng, s, 4);
    std::vector<Action> actions;
    try {
      actions = derive_gold_actions(e);
    } catch (const UnsupportedForm&) {
      continue;
    }
    ExpressionEnv env;
    for (const auto& a : actions) env = apply_action(env, a);
    ASSERT_EQ(env.slots.size(), 1u) << render_logical_form(e);
    EXPECT_TRUE(structurally_equal(env.active_expression(), e)) << render_logical_form(e);
    ++checked;
  }
  EXPECT_GT(checked, 200);
}

TEST(LogicalFormProperty, RenderParseIsIdentity) {
  Rng rng(18);
  for (int i = 0; i < 500; ++i) {
    auto s = oracle::random_store(rng, 50);
    auto e = oracle::random_root(rng, s, 4);
    auto text = render_logical_form(e);
    EXPECT_TRUE(structurally_equal(parse_logical_form(text), e)) << text;
  }
}

TEST(Sparql, MatchesGoldenFiles) {
  fs::path dir = fs::path(GAPD_SOURCE_DIR) / "golden" / "sparql";
  int n = 0;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() != ".lf") continue;
    std::ifstream lf(entry.path());
    std::string form;
    std::getline(lf, form);
    auto expected_path = entry.path();
    expected_path.replace_extension(".sparql");
    std::ifstream sp(expected_path);
    ASSERT_TRUE(sp) << expected_path;
    std::stringstream want;
    want << sp.rdbuf();
    EXPECT_EQ(render_sparql(parse_logical_form(form)), want.str()) << entry.path().filename();
    ++n;
  }
  EXPECT_GE(n, 8);
}
