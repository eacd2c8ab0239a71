#pragma once

// Deterministic synthetic knowledge graphs with question/gold-form task suites.
// Each subject type gets pairs of string-similar ("near-miss") relations that lead
// to different entity sets, so a policy has to tell them apart from the question.

#include <algorithm>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "gapd/action_lang.hpp"
#include "gapd/executor.hpp"
#include "gapd/kb_store.hpp"
#include "gapd/rng.hpp"

namespace gapd {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline const std::vector<std::string>& all_task_operators() {
  static const std::vector<std::string> ops = {"join1", "join2", "and_type", "and_join", "cmp", "arg", "tc", "count"};
  return ops;
}

struct GenConfig {
  int domains = 3;
  int types_per_domain = 3;
  int entities_per_type = 12;
  int near_miss_pairs = 2;  // per subject type
  int numeric_props = 1;    // per subject type
  int date_props = 1;       // per subject type
  int max_objects = 3;
  double mixed_object_rate = 0.5;  // share of entity relations whose objects span two types
  int num_tasks = 300;
  std::vector<std::string> operators = all_task_operators();
  int max_attempts = 400;

  void validate() const {
    if (domains < 1 || types_per_domain < 1 || entities_per_type < 1 || near_miss_pairs < 1 || max_objects < 1 ||
        num_tasks < 1 || max_attempts < 1)
      throw GenerationError("generator sizes must be >= 1");
    if (numeric_props < 0 || date_props < 0) throw GenerationError("property counts must be >= 0");
    if (operators.empty()) throw GenerationError("no task operators enabled");
    for (const auto& op : operators)
      if (std::find(all_task_operators().begin(), all_task_operators().end(), op) == all_task_operators().end())
        throw GenerationError("unknown task operator '" + op + "'");
  }
};

inline void to_json(nlohmann::json& j, const GenConfig& c) {
  j = {{"domains", c.domains},
       {"types_per_domain", c.types_per_domain},
       {"entities_per_type", c.entities_per_type},
       {"near_miss_pairs", c.near_miss_pairs},
       {"numeric_props", c.numeric_props},
       {"date_props", c.date_props},
       {"max_objects", c.max_objects},
       {"mixed_object_rate", c.mixed_object_rate},
       {"num_tasks", c.num_tasks},
       {"operators", c.operators},
       {"max_attempts", c.max_attempts}};
}

inline void from_json(const nlohmann::json& j, GenConfig& c) {
  GenConfig d;
  c.domains = j.value("domains", d.domains);
  c.types_per_domain = j.value("types_per_domain", d.types_per_domain);
  c.entities_per_type = j.value("entities_per_type", d.entities_per_type);
  c.near_miss_pairs = j.value("near_miss_pairs", d.near_miss_pairs);
  c.numeric_props = j.value("numeric_props", d.numeric_props);
  c.date_props = j.value("date_props", d.date_props);
  c.max_objects = j.value("max_objects", d.max_objects);
  c.mixed_object_rate = j.value("mixed_object_rate", d.mixed_object_rate);
  c.num_tasks = j.value("num_tasks", d.num_tasks);
  c.operators = j.value("operators", d.operators);
  c.max_attempts = j.value("max_attempts", d.max_attempts);
}

struct TaskSpec {
  std::string id;
  std::string question;
  std::vector<EntityId> topic_entities;
  std::string gold_logical_form;
  ValueSet gold_answers;
  std::string op;  // generating template
};

inline nlohmann::json value_to_json(const Value& v) {
  if (const auto* e = std::get_if<EntityId>(&v)) return e->id;
  const auto& l = std::get<Literal>(v);
  return {{"literal", l.lexical}, {"datatype", std::string(datatype_tag(l.type))}};
}

inline Value value_from_json(const nlohmann::json& j) {
  if (j.is_string()) return EntityId{j.get<std::string>()};
  return Literal::parse(j.at("literal").get<std::string>(), parse_datatype_tag(j.at("datatype").get<std::string>()));
}

inline void to_json(nlohmann::json& j, const TaskSpec& t) {
  nlohmann::json topics = nlohmann::json::array(), answers = nlohmann::json::array();
  for (const auto& e : t.topic_entities) topics.push_back(e.id);
  for (const auto& v : t.gold_answers) answers.push_back(value_to_json(v));
  j = {{"id", t.id},
       {"question", t.question},
       {"topic_entities", topics},
       {"gold_logical_form", t.gold_logical_form},
       {"gold_answers", answers},
       {"template", t.op}};
}

inline void from_json(const nlohmann::json& j, TaskSpec& t) {
  t.id = j.at("id").get<std::string>();
  t.question = j.at("question").get<std::string>();
  t.topic_entities.clear();
  for (const auto& e : j.at("topic_entities")) t.topic_entities.push_back(EntityId{e.get<std::string>()});
  t.gold_logical_form = j.at("gold_logical_form").get<std::string>();
  t.gold_answers.clear();
  for (const auto& v : j.at("gold_answers")) t.gold_answers.insert(value_from_json(v));
  t.op = j.value("template", std::string());
}

struct SyntheticWorld {
  KbStore kb;
  std::vector<TaskSpec> tasks;
  std::map<std::string, std::string> lexicon;  // schema symbol or operator -> question word
};

namespace detail {

inline const std::vector<std::string>& domain_words() {
  static const std::vector<std::string> w = {"film", "music", "people", "geography", "sports",
                                             "book", "business", "medicine", "education", "aviation"};
  return w;
}
inline const std::vector<std::string>& type_words() {
  static const std::vector<std::string> w = {"person", "work", "place", "group", "event", "award",
                                             "product", "venue", "series", "region", "company", "record"};
  return w;
}
inline const std::vector<std::string>& stem_words() {
  static const std::vector<std::string> w = {"origin", "member", "location", "partner", "source", "leader",
                                             "affiliate", "parent", "owner", "sponsor", "author", "host"};
  return w;
}
inline const std::vector<std::pair<std::string, std::string>>& variant_words() {
  static const std::vector<std::pair<std::string, std::string>> w = {
      {"former", "current"}, {"primary", "secondary"}, {"first", "last"}, {"official", "informal"}};
  return w;
}
inline const std::vector<std::string>& numeric_words() {
  static const std::vector<std::string> w = {"height", "length", "population", "rating", "weight", "capacity"};
  return w;
}
inline const std::vector<std::string>& date_words() {
  static const std::vector<std::string> w = {"founded_date", "release_date", "opening_date", "start_date"};
  return w;
}

inline std::string base36(std::size_t n) {
  static const char* digits = "0123456789abcdefghijklmnopqrstuvwxyz";
  std::string s;
  do {
    s.insert(s.begin(), digits[n % 36]);
    n /= 36;
  } while (n);
  return s;
}

enum class RelKind { Entity, Numeric, Date };

struct RelInfo {
  std::string name;
  int subject_type = 0;
  std::vector<int> object_types;
  RelKind kind = RelKind::Entity;
  Datatype datatype = Datatype::Int;
};

struct TypeInfo {
  std::string name;
  std::vector<EntityId> members;
};

class WorldBuilder {
 public:
  WorldBuilder(const GenConfig& cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed) {}

  SyntheticWorld build() {
    cfg_.validate();
    if (cfg_.domains > static_cast<int>(domain_words().size()) ||
        cfg_.types_per_domain > static_cast<int>(type_words().size()) ||
        cfg_.near_miss_pairs > static_cast<int>(stem_words().size()) ||
        cfg_.numeric_props > static_cast<int>(numeric_words().size()) ||
        cfg_.date_props > static_cast<int>(date_words().size()))
      throw GenerationError("generator config exceeds the built-in vocabulary");
    make_schema();
    make_facts();
    make_lexicon();
    make_tasks();
    return std::move(world_);
  }

 private:
  void make_schema() {
    std::size_t counter = 1000;
    for (int d = 0; d < cfg_.domains; ++d) {
      std::vector<std::string> words = type_words();
      rng_.shuffle(words);
      for (int k = 0; k < cfg_.types_per_domain; ++k) {
        TypeInfo t;
        t.name = domain_words()[static_cast<std::size_t>(d)] + "." + words[static_cast<std::size_t>(k)];
        for (int i = 0; i < cfg_.entities_per_type; ++i) {
          EntityId e{"m.0" + base36(counter++)};
          t.members.push_back(e);
          world_.kb.add_type_member(t.name, e);
          type_of_[e] = static_cast<int>(types_.size());
        }
        types_.push_back(std::move(t));
      }
    }
    const int nt = static_cast<int>(types_.size());
    for (int s = 0; s < nt; ++s) {
      std::vector<std::string> stems = stem_words();
      rng_.shuffle(stems);
      for (int p = 0; p < cfg_.near_miss_pairs; ++p) {
        const auto& [v1, v2] = variant_words()[rng_.below(variant_words().size())];
        std::vector<int> objects{other_type(s)};
        if (nt > 2 && rng_.chance(cfg_.mixed_object_rate)) {
          int second = other_type(s);
          while (second == objects[0]) second = other_type(s);
          objects.push_back(second);
        }
        for (const auto& v : {v1, v2}) {
          RelInfo r;
          r.name = types_[static_cast<std::size_t>(s)].name + "." + stems[static_cast<std::size_t>(p)] + "_" + v;
          r.subject_type = s;
          r.object_types = objects;
          relations_.push_back(r);
        }
      }
      std::vector<std::string> nums = numeric_words();
      rng_.shuffle(nums);
      for (int p = 0; p < cfg_.numeric_props; ++p) {
        RelInfo r;
        r.name = types_[static_cast<std::size_t>(s)].name + "." + nums[static_cast<std::size_t>(p)];
        r.subject_type = s;
        r.kind = RelKind::Numeric;
        r.datatype = rng_.chance(0.5) ? Datatype::Int : Datatype::Float;
        relations_.push_back(r);
      }
      std::vector<std::string> dates = date_words();
      rng_.shuffle(dates);
      for (int p = 0; p < cfg_.date_props; ++p) {
        RelInfo r;
        r.name = types_[static_cast<std::size_t>(s)].name + "." + dates[static_cast<std::size_t>(p)];
        r.subject_type = s;
        r.kind = RelKind::Date;
        r.datatype = Datatype::Date;
        relations_.push_back(r);
      }
    }
  }

  int other_type(int s) {
    const int nt = static_cast<int>(types_.size());
    if (nt == 1) return s;
    int o = static_cast<int>(rng_.below(static_cast<std::size_t>(nt - 1)));
    return o >= s ? o + 1 : o;
  }

  static Literal numeric_value(Rng& rng, Datatype t) {
    if (t == Datatype::Int) return Literal::of_int(rng.between(1, 30));
    return Literal::of_float(static_cast<double>(rng.between(1, 40)) * 0.25);
  }

  void make_facts() {
    static const std::vector<std::string> date_pool = {"1998-04-12", "2001-09-30", "2005-01-15",
                                                       "2010-06-01", "2014-11-20"};
    for (std::size_t ri = 0; ri < relations_.size(); ++ri) {
      const auto& r = relations_[ri];
      for (const auto& s : types_[static_cast<std::size_t>(r.subject_type)].members) {
        switch (r.kind) {
          case RelKind::Entity: {
            int n = static_cast<int>(rng_.between(1, cfg_.max_objects));
            for (int i = 0; i < n; ++i) {
              const auto& ot = types_[static_cast<std::size_t>(rng_.pick(r.object_types))];
              world_.kb.add_triple({s, r.name, rng_.pick(ot.members)});
            }
            break;
          }
          case RelKind::Numeric:
            world_.kb.add_triple({s, r.name, numeric_value(rng_, r.datatype)});
            break;
          case RelKind::Date:
            world_.kb.add_triple({s, r.name, Literal::of_date(rng_.pick(date_pool))});
            break;
        }
      }
    }
  }

  void make_lexicon() {
    std::vector<std::string> symbols;
    for (const auto& r : relations_) symbols.push_back(r.name);
    for (const auto& t : types_) symbols.push_back(t.name);
    for (const auto& op : all_task_operators()) symbols.push_back("op:" + op);
    for (const char* m : {"MAX", "MIN", "le", "lt", "ge", "gt"}) symbols.push_back(std::string("mode:") + m);
    std::vector<std::size_t> ids(symbols.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    rng_.shuffle(ids);
    for (std::size_t i = 0; i < symbols.size(); ++i) world_.lexicon[symbols[i]] = "w" + std::to_string(ids[i]);
  }

  const std::string& lex(const std::string& symbol) const { return world_.lexicon.at(symbol); }

  std::vector<const RelInfo*> relations_of(int subject_type, RelKind kind) const {
    std::vector<const RelInfo*> out;
    for (const auto& r : relations_)
      if (r.subject_type == subject_type && r.kind == kind) out.push_back(&r);
    return out;
  }

  std::vector<const RelInfo*> relations_of_kind(RelKind kind) const {
    std::vector<const RelInfo*> out;
    for (const auto& r : relations_)
      if (r.kind == kind) out.push_back(&r);
    return out;
  }

  ValueSet objects(const EntityId& s, const std::string& rel) const { return world_.kb.follow({s}, rel, Direction::Forward); }

  struct Draft {
    std::string question;
    std::vector<EntityId> topics;
    Expression gold;
  };

  // A random subject with the relation and its object set.
  std::pair<EntityId, ValueSet> draw_join(const RelInfo& r) {
    const auto& s = rng_.pick(types_[static_cast<std::size_t>(r.subject_type)].members);
    return {s, objects(s, r.name)};
  }

  std::optional<Draft> try_template(const std::string& op) {
    auto entity_rels = relations_of_kind(RelKind::Entity);
    const RelInfo& r = *rng_.pick(entity_rels);
    auto [s, xs] = draw_join(r);
    auto join = expr::join(r.name, expr::start_entity(s.id), true);
    const std::string q = lex("op:" + op);
    if (op == "join1") return Draft{q + " " + lex(r.name), {s}, join};
    if (op == "count") return Draft{q + " " + lex(r.name), {s}, expr::count(join)};
    if (op == "join2") {
      std::vector<EntityId> ents;
      for (const auto& v : xs)
        if (const auto* e = std::get_if<EntityId>(&v)) ents.push_back(*e);
      if (ents.empty()) return std::nullopt;
      auto next = relations_of(type_of_.at(rng_.pick(ents)), RelKind::Entity);
      if (next.empty()) return std::nullopt;
      const RelInfo& r2 = *rng_.pick(next);
      return Draft{q + " " + lex(r.name) + " " + lex(r2.name), {s}, expr::join(r2.name, join, true)};
    }
    if (op == "and_type") {
      if (r.object_types.size() < 2) return std::nullopt;
      const auto& t = types_[static_cast<std::size_t>(rng_.pick(r.object_types))];
      return Draft{q + " " + lex(r.name) + " " + lex(t.name), {s}, expr::and_(join, expr::start_type(t.name))};
    }
    if (op == "and_join") {
      std::vector<EntityId> ents;
      for (const auto& v : xs)
        if (const auto* e = std::get_if<EntityId>(&v)) ents.push_back(*e);
      if (ents.empty()) return std::nullopt;
      const auto& x = rng_.pick(ents);
      std::vector<std::pair<EntityId, std::string>> partners;
      for (const auto* r2 : entity_rels) {
        if (r2->name == r.name) continue;
        for (const auto& v : world_.kb.follow({x}, r2->name, Direction::Reverse)) {
          const auto& e2 = std::get<EntityId>(v);
          if (e2 != s) partners.emplace_back(e2, r2->name);
        }
      }
      if (partners.empty()) return std::nullopt;
      const auto& [s2, rel2] = rng_.pick(partners);
      auto join2 = expr::join(rel2, expr::start_entity(s2.id), true);
      return Draft{q + " " + lex(r.name) + " " + lex(rel2), {s, s2}, expr::and_(join, join2)};
    }
    if (xs.size() < 2) return std::nullopt;
    int object_type = rng_.pick(r.object_types);
    if (op == "cmp" || op == "arg") {
      auto props = relations_of(object_type, RelKind::Numeric);
      if (props.empty()) return std::nullopt;
      const RelInfo& p = *rng_.pick(props);
      if (op == "arg") {
        auto mode = rng_.chance(0.5) ? OrderMode::Max : OrderMode::Min;
        return Draft{q + " " + lex(r.name) + " " + lex(p.name) + " " + lex("mode:" + std::string(mode_name(mode))),
                     {s},
                     expr::arg(mode, join, p.name)};
      }
      std::vector<Literal> values;
      for (const auto& v : xs)
        if (const auto* e = std::get_if<EntityId>(&v))
          for (const auto& lit : world_.kb.values_of(*e, p.name)) values.push_back(std::get<Literal>(lit));
      if (values.empty()) return std::nullopt;
      auto mode = static_cast<CompareMode>(rng_.below(4));
      const Literal& n = rng_.pick(values);
      return Draft{q + " " + lex(r.name) + " " + lex(p.name) + " " + lex("mode:" + std::string(mode_name(mode))) +
                       " " + n.lexical,
                   {s},
                   expr::cmp(mode, p.name, n, join)};
    }
    if (op == "tc") {
      auto props = relations_of(object_type, RelKind::Date);
      if (props.empty()) return std::nullopt;
      const RelInfo& p = *rng_.pick(props);
      std::vector<Literal> values;
      for (const auto& v : xs)
        if (const auto* e = std::get_if<EntityId>(&v))
          for (const auto& lit : world_.kb.values_of(*e, p.name)) values.push_back(std::get<Literal>(lit));
      if (values.empty()) return std::nullopt;
      const Literal& t = rng_.pick(values);
      return Draft{q + " " + lex(r.name) + " " + lex(p.name) + " " + t.lexical, {s}, expr::tc(join, p.name, t)};
    }
    return std::nullopt;
  }

  // Filters (AND with a type, CMP, TC) must strictly shrink the set they constrain.
  static bool informative(const Draft& d, const EvalResult& r, const KbStore& kb) {
    if (r.status != Status::Ok || r.values.empty()) return false;
    const auto& g = d.gold;
    if (g->kind == NodeKind::Cmp || g->kind == NodeKind::Tc || (g->kind == NodeKind::And && g->right->kind == NodeKind::Start))
      return r.values.size() < evaluate(kb, g->child).values.size();
    return true;
  }

  void make_tasks() {
    std::set<std::string> seen;
    for (int i = 0; i < cfg_.num_tasks; ++i) {
      const std::string& op = cfg_.operators[static_cast<std::size_t>(i) % cfg_.operators.size()];
      std::optional<TaskSpec> fallback;
      std::optional<TaskSpec> chosen;
      for (int attempt = 0; attempt < cfg_.max_attempts && !chosen; ++attempt) {
        auto draft = try_template(op);
        if (!draft) continue;
        auto r = evaluate(world_.kb, draft->gold);
        if (!informative(*draft, r, world_.kb)) continue;
        TaskSpec t;
        t.id = "t" + std::to_string(i);
        t.question = draft->question;
        t.topic_entities = draft->topics;
        t.gold_logical_form = render_logical_form(draft->gold);
        t.gold_answers = r.values;
        t.op = op;
        if (seen.count(t.gold_logical_form)) {
          if (!fallback) fallback = t;
          continue;
        }
        chosen = t;
      }
      if (!chosen) chosen = fallback;
      if (!chosen) throw GenerationError("no satisfiable instantiation for operator '" + op + "'");
      seen.insert(chosen->gold_logical_form);
      world_.tasks.push_back(std::move(*chosen));
    }
  }

  GenConfig cfg_;
  Rng rng_;
  SyntheticWorld world_;
  std::vector<TypeInfo> types_;
  std::vector<RelInfo> relations_;
  std::map<EntityId, int> type_of_;
};

}  // namespace detail

inline SyntheticWorld generate_synthetic_kb(const GenConfig& cfg, std::uint64_t seed) {
  return detail::WorldBuilder(cfg, seed).build();
}

inline nlohmann::json tasks_to_json(const std::vector<TaskSpec>& tasks) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& t : tasks) j.push_back(t);
  return j;
}

inline std::vector<TaskSpec> tasks_from_json(const nlohmann::json& j) {
  std::vector<TaskSpec> out;
  for (const auto& t : j) out.push_back(t.get<TaskSpec>());
  return out;
}

}  // namespace gapd
