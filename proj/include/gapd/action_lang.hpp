#pragma once

// The KBQA action language: surface actions, the incremental S-expression state
// they update, logical-form text, and SPARQL rendering.

#include <cctype>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "gapd/kb_store.hpp"

namespace gapd {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class ActionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ActionKind { FindRelation, Merge, Order, Compare, TimeConstraint, Count, Answer };
inline constexpr int kNumActionKinds = 7;

enum class OrderMode { Max, Min };
enum class CompareMode { Le, Lt, Ge, Gt };

inline std::string_view action_name(ActionKind k) {
  switch (k) {
    case ActionKind::FindRelation: return "Find_relation";
    case ActionKind::Merge: return "Merge";
    case ActionKind::Order: return "Order";
    case ActionKind::Compare: return "Compare";
    case ActionKind::TimeConstraint: return "Time_constraint";
    case ActionKind::Count: return "Count";
    case ActionKind::Answer: return "Answer";
  }
  return "";
}

inline std::string_view mode_name(OrderMode m) { return m == OrderMode::Max ? "MAX" : "MIN"; }

inline std::string_view mode_name(CompareMode m) {
  switch (m) {
    case CompareMode::Le: return "le";
    case CompareMode::Lt: return "lt";
    case CompareMode::Ge: return "ge";
    case CompareMode::Gt: return "gt";
  }
  return "";
}

inline std::optional<OrderMode> parse_order_mode(std::string_view s) {
  if (s == "MAX" || s == "ARGMAX") return OrderMode::Max;
  if (s == "MIN" || s == "ARGMIN") return OrderMode::Min;
  return std::nullopt;
}

inline std::optional<CompareMode> parse_compare_mode(std::string_view s) {
  if (s == "le") return CompareMode::Le;
  if (s == "lt") return CompareMode::Lt;
  if (s == "ge") return CompareMode::Ge;
  if (s == "gt") return CompareMode::Gt;
  return std::nullopt;
}

// 1-based reference to a live expression slot ("expression1", ...).
struct SlotRef {
  int index = 1;
  auto operator<=>(const SlotRef&) const = default;
};

inline std::string slot_name(int index) { return "expression" + std::to_string(index); }

struct TypeName {
  std::string name;
  auto operator<=>(const TypeName&) const = default;
};

using Source = std::variant<EntityId, SlotRef>;
using MergeOperand = std::variant<SlotRef, TypeName, EntityId>;
using AnswerItem = std::variant<EntityId, Literal, SlotRef>;

struct Action {
  ActionKind kind = ActionKind::Answer;
  Source source;                      // FindRelation
  std::string relation;               // FindRelation, Order, Compare, TimeConstraint
  std::optional<bool> inverse;        // FindRelation: true is (R relation); unset lets the executor decide
  SlotRef slot;                       // Merge (left), Order, Count
  MergeOperand operand;               // Merge (right)
  OrderMode order_mode = OrderMode::Max;
  CompareMode compare_mode = CompareMode::Ge;
  Literal literal;                    // Compare number, TimeConstraint time
  std::vector<AnswerItem> answers;    // Answer

  bool operator==(const Action&) const = default;

  static Action find_relation(Source src, std::string rel, std::optional<bool> inverse = std::nullopt) {
    Action a;
    a.kind = ActionKind::FindRelation;
    a.source = std::move(src);
    a.relation = std::move(rel);
    a.inverse = inverse;
    return a;
  }
  static Action merge(SlotRef left, MergeOperand right) {
    Action a;
    a.kind = ActionKind::Merge;
    a.slot = left;
    a.operand = std::move(right);
    return a;
  }
  static Action order(OrderMode mode, SlotRef slot, std::string rel) {
    Action a;
    a.kind = ActionKind::Order;
    a.order_mode = mode;
    a.slot = slot;
    a.relation = std::move(rel);
    return a;
  }
  static Action compare(CompareMode mode, std::string rel, Literal number) {
    Action a;
    a.kind = ActionKind::Compare;
    a.compare_mode = mode;
    a.relation = std::move(rel);
    a.literal = std::move(number);
    return a;
  }
  static Action time_constraint(std::string rel, Literal time) {
    Action a;
    a.kind = ActionKind::TimeConstraint;
    a.relation = std::move(rel);
    a.literal = std::move(time);
    return a;
  }
  static Action count(SlotRef slot) {
    Action a;
    a.kind = ActionKind::Count;
    a.slot = slot;
    return a;
  }
  static Action answer(std::vector<AnswerItem> items) {
    Action a;
    a.kind = ActionKind::Answer;
    a.answers = std::move(items);
    return a;
  }
};

// ---------------------------------------------------------------------------
// Expressions

enum class NodeKind { Start, Join, And, Arg, Cmp, Tc, Count };
enum class StartKind { Entity, Type, Literal };

struct ExprNode;
using Expression = std::shared_ptr<const ExprNode>;

struct ExprNode {
  NodeKind kind = NodeKind::Start;
  StartKind start_kind = StartKind::Entity;
  std::string symbol;  // entity id or type name for Start
  Literal literal;     // Start literal, Cmp number, Tc time
  std::string relation;
  bool inverse = false;  // Join only: (R relation)
  OrderMode order_mode = OrderMode::Max;
  CompareMode compare_mode = CompareMode::Ge;
  Expression child;  // Join/Arg/Cmp/Tc/Count child, And left
  Expression right;  // And right
};

inline bool structurally_equal(const Expression& a, const Expression& b) {
  if (a == b) return true;
  if (!a || !b) return false;
  if (a->kind != b->kind) return false;
  switch (a->kind) {
    case NodeKind::Start:
      return a->start_kind == b->start_kind &&
             (a->start_kind == StartKind::Literal ? a->literal == b->literal : a->symbol == b->symbol);
    case NodeKind::Join:
      return a->relation == b->relation && a->inverse == b->inverse && structurally_equal(a->child, b->child);
    case NodeKind::And:
      return structurally_equal(a->child, b->child) && structurally_equal(a->right, b->right);
    case NodeKind::Arg:
      return a->order_mode == b->order_mode && a->relation == b->relation &&
             structurally_equal(a->child, b->child);
    case NodeKind::Cmp:
      return a->compare_mode == b->compare_mode && a->relation == b->relation && a->literal == b->literal &&
             structurally_equal(a->child, b->child);
    case NodeKind::Tc:
      return a->relation == b->relation && a->literal == b->literal && structurally_equal(a->child, b->child);
    case NodeKind::Count:
      return structurally_equal(a->child, b->child);
  }
  return false;
}

namespace expr {

inline Expression start_entity(std::string id) {
  auto n = std::make_shared<ExprNode>();
  n->kind = NodeKind::Start;
  n->start_kind = StartKind::Entity;
  n->symbol = std::move(id);
  return n;
}
inline Expression start_type(std::string name) {
  auto n = std::make_shared<ExprNode>();
  n->kind = NodeKind::Start;
  n->start_kind = StartKind::Type;
  n->symbol = std::move(name);
  return n;
}
inline Expression start_literal(Literal lit) {
  auto n = std::make_shared<ExprNode>();
  n->kind = NodeKind::Start;
  n->start_kind = StartKind::Literal;
  n->literal = std::move(lit);
  return n;
}
inline Expression join(std::string rel, Expression child, bool inverse = false) {
  auto n = std::make_shared<ExprNode>();
  n->kind = NodeKind::Join;
  n->relation = std::move(rel);
  n->inverse = inverse;
  n->child = std::move(child);
  return n;
}
inline Expression and_(Expression left, Expression right) {
  auto n = std::make_shared<ExprNode>();
  n->kind = NodeKind::And;
  n->child = std::move(left);
  n->right = std::move(right);
  return n;
}
inline Expression arg(OrderMode mode, Expression child, std::string rel) {
  auto n = std::make_shared<ExprNode>();
  n->kind = NodeKind::Arg;
  n->order_mode = mode;
  n->child = std::move(child);
  n->relation = std::move(rel);
  return n;
}
inline Expression cmp(CompareMode mode, std::string rel, Literal number, Expression child) {
  auto n = std::make_shared<ExprNode>();
  n->kind = NodeKind::Cmp;
  n->compare_mode = mode;
  n->relation = std::move(rel);
  n->literal = std::move(number);
  n->child = std::move(child);
  return n;
}
inline Expression tc(Expression child, std::string rel, Literal time) {
  auto n = std::make_shared<ExprNode>();
  n->kind = NodeKind::Tc;
  n->child = std::move(child);
  n->relation = std::move(rel);
  n->literal = std::move(time);
  return n;
}
inline Expression count(Expression child) {
  auto n = std::make_shared<ExprNode>();
  n->kind = NodeKind::Count;
  n->child = std::move(child);
  return n;
}

}  // namespace expr

inline std::size_t expression_depth(const Expression& e) {
  if (!e) return 0;
  std::size_t d = 0;
  if (e->child) d = std::max(d, expression_depth(e->child));
  if (e->right) d = std::max(d, expression_depth(e->right));
  return e->kind == NodeKind::Start ? 0 : d + 1;
}

// Freebase-style ids: "m.xxx" / "g.xxx".
inline bool looks_like_entity_id(std::string_view s) {
  return s.size() > 2 && (s[0] == 'm' || s[0] == 'g') && s[1] == '.';
}

inline std::optional<int> parse_slot_ref(std::string_view s) {
  constexpr std::string_view kPrefix = "expression";
  if (s.size() <= kPrefix.size() || s.substr(0, kPrefix.size()) != kPrefix) return std::nullopt;
  int v = 0;
  for (char c : s.substr(kPrefix.size())) {
    if (c < '0' || c > '9') return std::nullopt;
    v = v * 10 + (c - '0');
    if (v > 1000000) return std::nullopt;
  }
  if (v < 1) return std::nullopt;
  return v;
}

// Number or date text without a datatype tag.
inline std::optional<Literal> infer_literal(std::string_view s) {
  if (s.empty()) return std::nullopt;
  if (detail::is_iso_date(s)) return Literal::of_date(s);
  bool has_digit = false, floaty = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    char c = s[i];
    if (c >= '0' && c <= '9') {
      has_digit = true;
    } else if (c == '.' || c == 'e' || c == 'E') {
      floaty = true;
    } else if ((c == '-' || c == '+') && (i == 0 || s[i - 1] == 'e' || s[i - 1] == 'E')) {
    } else {
      return std::nullopt;
    }
  }
  if (!has_digit) return std::nullopt;
  try {
    return Literal::parse(s, floaty ? Datatype::Float : Datatype::Int);
  } catch (const KbError&) {
    return std::nullopt;
  }
}

// ---------------------------------------------------------------------------
// Logical-form rendering and parsing

inline std::string render_relation(const std::string& rel, bool inverse) {
  return inverse ? "(R " + rel + ")" : rel;
}

inline void render_into(std::string& out, const Expression& e) {
  switch (e->kind) {
    case NodeKind::Start:
      out += e->start_kind == StartKind::Literal ? e->literal.lexical : e->symbol;
      return;
    case NodeKind::Join:
      out += "(JOIN " + render_relation(e->relation, e->inverse) + " ";
      render_into(out, e->child);
      out += ")";
      return;
    case NodeKind::And:
      out += "(AND ";
      render_into(out, e->child);
      out += " ";
      render_into(out, e->right);
      out += ")";
      return;
    case NodeKind::Arg:
      out += "(" + std::string(mode_name(e->order_mode)) + " ";
      render_into(out, e->child);
      out += " " + e->relation + ")";
      return;
    case NodeKind::Cmp:
      out += "(" + std::string(mode_name(e->compare_mode)) + " " + e->relation + " " + e->literal.lexical + " ";
      render_into(out, e->child);
      out += ")";
      return;
    case NodeKind::Tc:
      out += "(TC ";
      render_into(out, e->child);
      out += " " + e->relation + " " + e->literal.lexical + ")";
      return;
    case NodeKind::Count:
      out += "(COUNT ";
      render_into(out, e->child);
      out += ")";
      return;
  }
}

// Canonical form: exactly one paren layer per operator node.
inline std::string render_logical_form(const Expression& e) {
  std::string out;
  render_into(out, e);
  return out;
}

namespace detail {

struct SExpr {
  bool is_list = false;
  std::string atom;
  std::size_t offset = 0;
  std::vector<SExpr> items;
};

class SExprReader {
 public:
  explicit SExprReader(std::string_view text) : text_(text) {}

  SExpr read_all() {
    skip_ws();
    if (pos_ >= text_.size()) throw ParseError("empty logical form", pos_);
    SExpr e = read();
    skip_ws();
    if (pos_ < text_.size()) throw ParseError("trailing input after logical form", pos_);
    return e;
  }

 private:
  void skip_ws() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
  }

  SExpr read() {
    skip_ws();
    if (pos_ >= text_.size()) throw ParseError("unexpected end of input", pos_);
    SExpr e;
    e.offset = pos_;
    if (text_[pos_] == '(') {
      e.is_list = true;
      ++pos_;
      while (true) {
        skip_ws();
        if (pos_ >= text_.size()) throw ParseError("unbalanced parenthesis opened", e.offset);
        if (text_[pos_] == ')') {
          ++pos_;
          break;
        }
        e.items.push_back(read());
      }
      return e;
    }
    if (text_[pos_] == ')') throw ParseError("unexpected ')'", pos_);
    std::size_t start = pos_;
    while (pos_ < text_.size() && !std::isspace(static_cast<unsigned char>(text_[pos_])) && text_[pos_] != '(' &&
           text_[pos_] != ')')
      ++pos_;
    e.atom = std::string(text_.substr(start, pos_ - start));
    return e;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

inline const SExpr& unwrap(const SExpr& e) {
  const SExpr* cur = &e;
  while (cur->is_list && cur->items.size() == 1 && cur->items[0].is_list) cur = &cur->items[0];
  return *cur;
}

inline std::string expect_atom(const SExpr& e, const char* what) {
  if (e.is_list) throw ParseError(std::string("expected ") + what, e.offset);
  return e.atom;
}

inline Literal expect_literal(const SExpr& e, const char* what) {
  auto lit = infer_literal(expect_atom(e, what));
  if (!lit) throw ParseError(std::string("malformed ") + what + " '" + e.atom + "'", e.offset);
  return *lit;
}

inline Expression build(const SExpr& raw);

inline Expression build_operand(const SExpr& raw) {
  const SExpr& e = unwrap(raw);
  if (!e.is_list) {
    if (looks_like_entity_id(e.atom)) return expr::start_entity(e.atom);
    if (auto lit = infer_literal(e.atom)) return expr::start_literal(*lit);
    validate_relation_name(e.atom);
    return expr::start_type(e.atom);
  }
  return build(e);
}

inline void check_arity(const SExpr& e, std::size_t n, const std::string& op) {
  if (e.items.size() != n)
    throw ParseError("operator " + op + " expects " + std::to_string(n - 1) + " arguments, got " +
                         std::to_string(e.items.size() - 1),
                     e.offset);
}

inline Expression build(const SExpr& raw) {
  const SExpr& e = unwrap(raw);
  if (!e.is_list) return build_operand(e);
  if (e.items.empty()) throw ParseError("empty list", e.offset);
  if (e.items[0].is_list) throw ParseError("operator position holds a list", e.items[0].offset);
  const std::string& op = e.items[0].atom;
  if (op == "JOIN") {
    check_arity(e, 3, op);
    const SExpr& rel = e.items[1];
    if (rel.is_list) {
      if (rel.items.size() != 2 || rel.items[0].is_list || rel.items[0].atom != "R" || rel.items[1].is_list)
        throw ParseError("malformed inverse relation", rel.offset);
      return expr::join(rel.items[1].atom, build_operand(e.items[2]), true);
    }
    return expr::join(rel.atom, build_operand(e.items[2]), false);
  }
  if (op == "AND") {
    check_arity(e, 3, op);
    return expr::and_(build_operand(e.items[1]), build_operand(e.items[2]));
  }
  if (auto m = parse_order_mode(op)) {
    check_arity(e, 3, op);
    return expr::arg(*m, build_operand(e.items[1]), expect_atom(e.items[2], "relation"));
  }
  if (auto m = parse_compare_mode(op)) {
    check_arity(e, 4, op);
    auto lit = expect_literal(e.items[2], "number");
    if (!lit.numeric()) throw ParseError("comparison needs a number", e.items[2].offset);
    return expr::cmp(*m, expect_atom(e.items[1], "relation"), lit, build_operand(e.items[3]));
  }
  if (op == "TC") {
    check_arity(e, 4, op);
    auto lit = expect_literal(e.items[3], "time");
    if (lit.type != Datatype::Date) throw ParseError("time constraint needs a date", e.items[3].offset);
    return expr::tc(build_operand(e.items[1]), expect_atom(e.items[2], "relation"), lit);
  }
  if (op == "COUNT") {
    check_arity(e, 2, op);
    return expr::count(build_operand(e.items[1]));
  }
  throw ParseError("unknown operator '" + op + "'", e.items[0].offset);
}

}  // namespace detail

// Accepts single- and double-parenthesised sub-expressions.
inline Expression parse_logical_form(std::string_view text) {
  detail::SExprReader reader(text);
  auto tree = reader.read_all();
  try {
    return detail::build(tree);
  } catch (const KbError& err) {
    throw ParseError(err.what(), tree.offset);
  }
}

// ---------------------------------------------------------------------------
// Surface action syntax

inline std::string render_literal_arg(const Literal& lit) {
  return lit.lexical + " (" + std::string(datatype_tag(lit.type)) + ")";
}

inline std::string render_answer_item(const AnswerItem& item) {
  if (const auto* e = std::get_if<EntityId>(&item)) return e->id;
  if (const auto* s = std::get_if<SlotRef>(&item)) return slot_name(s->index);
  return std::get<Literal>(item).lexical;
}

// `with_direction` keeps an explicit (R r) marker; the student-facing surface omits it.
inline std::string render_action(const Action& a, bool with_direction = true) {
  std::string out(action_name(a.kind));
  out += " [ ";
  switch (a.kind) {
    case ActionKind::FindRelation: {
      if (const auto* e = std::get_if<EntityId>(&a.source))
        out += e->id;
      else
        out += slot_name(std::get<SlotRef>(a.source).index);
      out += " | ";
      out += with_direction && a.inverse.value_or(false) ? render_relation(a.relation, true) : a.relation;
      break;
    }
    case ActionKind::Merge:
      out += slot_name(a.slot.index) + " | ";
      if (const auto* s = std::get_if<SlotRef>(&a.operand))
        out += slot_name(s->index);
      else if (const auto* t = std::get_if<TypeName>(&a.operand))
        out += t->name;
      else
        out += std::get<EntityId>(a.operand).id;
      break;
    case ActionKind::Order:
      out += std::string(mode_name(a.order_mode)) + " | " + slot_name(a.slot.index) + " | " + a.relation;
      break;
    case ActionKind::Compare:
      out += std::string(mode_name(a.compare_mode)) + " | " + a.relation + " | " + render_literal_arg(a.literal);
      break;
    case ActionKind::TimeConstraint:
      out += a.relation + " | " + render_literal_arg(a.literal);
      break;
    case ActionKind::Count:
      out += slot_name(a.slot.index);
      break;
    case ActionKind::Answer:
      for (std::size_t i = 0; i < a.answers.size(); ++i) {
        if (i) out += " ";
        out += render_answer_item(a.answers[i]);
      }
      break;
  }
  out += a.kind == ActionKind::Answer && a.answers.empty() ? "]" : " ]";
  return out;
}

namespace detail {

struct ArgSpan {
  std::string text;
  std::size_t offset;
};

inline ArgSpan trim_span(std::string_view s, std::size_t offset) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return {std::string(s.substr(b, e - b)), offset + b};
}

inline int expect_slot(const ArgSpan& a) {
  auto s = parse_slot_ref(a.text);
  if (!s) throw ParseError("expected expression slot, got '" + a.text + "'", a.offset);
  return *s;
}

inline std::pair<std::string, std::optional<bool>> expect_relation(const ArgSpan& a) {
  std::string text = a.text;
  std::optional<bool> inverse;
  if (text.size() > 4 && text.rfind("(R", 0) == 0 && text.back() == ')') {
    auto inner = trim_span(std::string_view(text).substr(2, text.size() - 3), a.offset + 2);
    text = inner.text;
    inverse = true;
  }
  try {
    validate_relation_name(text);
  } catch (const KbError& err) {
    throw ParseError(err.what(), a.offset);
  }
  return {text, inverse};
}

inline Literal expect_typed_literal(const ArgSpan& a, bool want_date) {
  std::string value = a.text;
  std::optional<Datatype> tag;
  auto paren = value.find('(');
  if (paren != std::string::npos) {
    auto close = value.find(')', paren);
    if (close == std::string::npos || close + 1 != value.size())
      throw ParseError("malformed literal '" + a.text + "'", a.offset);
    try {
      tag = parse_datatype_tag(trim_span(std::string_view(value).substr(paren + 1, close - paren - 1), 0).text);
    } catch (const KbError&) {
      throw ParseError("malformed literal '" + a.text + "'", a.offset + paren);
    }
    value = trim_span(std::string_view(value).substr(0, paren), 0).text;
  }
  std::optional<Literal> lit;
  try {
    lit = tag ? std::optional<Literal>(Literal::parse(value, *tag)) : infer_literal(value);
  } catch (const KbError&) {
    lit.reset();
  }
  if (!lit) throw ParseError("malformed literal '" + a.text + "'", a.offset);
  if (want_date != (lit->type == Datatype::Date))
    throw ParseError(std::string("malformed literal: expected ") + (want_date ? "a date" : "a number"), a.offset);
  return *lit;
}

inline void expect_token_id(const ArgSpan& a, const char* what) {
  if (a.text.empty()) throw ParseError(std::string("empty ") + what, a.offset);
  for (char c : a.text)
    if (std::isspace(static_cast<unsigned char>(c)) || c == '(' || c == ')')
      throw ParseError(std::string("malformed ") + what + " '" + a.text + "'", a.offset);
}

}  // namespace detail

inline Action parse_action(std::string_view text) {
  using detail::ArgSpan;
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
  };
  skip_ws();
  std::size_t name_start = pos;
  while (pos < text.size() && (std::isalpha(static_cast<unsigned char>(text[pos])) || text[pos] == '_')) ++pos;
  std::string_view name = text.substr(name_start, pos - name_start);
  std::optional<ActionKind> kind;
  for (int k = 0; k < kNumActionKinds; ++k)
    if (action_name(static_cast<ActionKind>(k)) == name) kind = static_cast<ActionKind>(k);
  if (!kind) throw ParseError("unknown action '" + std::string(name) + "'", name_start);
  skip_ws();
  if (pos >= text.size() || text[pos] != '[') throw ParseError("expected '['", pos);
  ++pos;
  std::vector<ArgSpan> args;
  std::size_t arg_start = pos;
  int depth = 0;
  bool closed = false;
  for (; pos < text.size(); ++pos) {
    char c = text[pos];
    if (c == '(') {
      ++depth;
    } else if (c == ')') {
      if (--depth < 0) throw ParseError("unbalanced ')'", pos);
    } else if (depth == 0 && (c == '|' || c == ']')) {
      args.push_back(detail::trim_span(text.substr(arg_start, pos - arg_start), arg_start));
      arg_start = pos + 1;
      if (c == ']') {
        closed = true;
        ++pos;
        break;
      }
    } else if (c == '[') {
      throw ParseError("nested '['", pos);
    }
  }
  if (!closed) throw ParseError("missing ']'", text.size());
  skip_ws();
  if (pos != text.size()) throw ParseError("trailing input after action", pos);

  auto arity = [&](std::size_t n) {
    if (args.size() != n)
      throw ParseError("wrong arity for " + std::string(name) + ": expected " + std::to_string(n) + " arguments, got " +
                           std::to_string(args.size()),
                       name_start);
  };

  switch (*kind) {
    case ActionKind::FindRelation: {
      arity(2);
      Source src;
      if (auto s = parse_slot_ref(args[0].text)) {
        src = SlotRef{*s};
      } else {
        detail::expect_token_id(args[0], "entity");
        src = EntityId{args[0].text};
      }
      auto [rel, inverse] = detail::expect_relation(args[1]);
      return Action::find_relation(src, rel, inverse);
    }
    case ActionKind::Merge: {
      arity(2);
      SlotRef left{detail::expect_slot(args[0])};
      detail::expect_token_id(args[1], "merge operand");
      MergeOperand right;
      if (auto s = parse_slot_ref(args[1].text))
        right = SlotRef{*s};
      else if (looks_like_entity_id(args[1].text))
        right = EntityId{args[1].text};
      else
        right = TypeName{detail::expect_relation(args[1]).first};
      return Action::merge(left, right);
    }
    case ActionKind::Order: {
      arity(3);
      auto mode = parse_order_mode(args[0].text);
      if (!mode) throw ParseError("invalid mode '" + args[0].text + "' (expected MAX or MIN)", args[0].offset);
      SlotRef slot{detail::expect_slot(args[1])};
      return Action::order(*mode, slot, detail::expect_relation(args[2]).first);
    }
    case ActionKind::Compare: {
      arity(3);
      auto mode = parse_compare_mode(args[0].text);
      if (!mode) throw ParseError("invalid mode '" + args[0].text + "' (expected le/lt/ge/gt)", args[0].offset);
      auto rel = detail::expect_relation(args[1]).first;
      return Action::compare(*mode, rel, detail::expect_typed_literal(args[2], false));
    }
    case ActionKind::TimeConstraint: {
      arity(2);
      auto rel = detail::expect_relation(args[0]).first;
      return Action::time_constraint(rel, detail::expect_typed_literal(args[1], true));
    }
    case ActionKind::Count:
      arity(1);
      return Action::count(SlotRef{detail::expect_slot(args[0])});
    case ActionKind::Answer: {
      arity(1);
      std::vector<AnswerItem> items;
      std::string_view body = args[0].text;
      std::size_t i = 0;
      while (i < body.size()) {
        while (i < body.size() && (std::isspace(static_cast<unsigned char>(body[i])) || body[i] == ',')) ++i;
        std::size_t b = i;
        while (i < body.size() && !std::isspace(static_cast<unsigned char>(body[i])) && body[i] != ',') ++i;
        if (b == i) break;
        std::string tok(body.substr(b, i - b));
        if (auto s = parse_slot_ref(tok))
          items.emplace_back(SlotRef{*s});
        else if (auto lit = infer_literal(tok))
          items.emplace_back(*lit);
        else
          items.emplace_back(EntityId{tok});
      }
      return Action::answer(std::move(items));
    }
  }
  throw ParseError("unreachable", 0);
}

// ---------------------------------------------------------------------------
// Incremental expression state

struct ExpressionEnv {
  std::vector<Expression> slots;  // slots[k] is expression{k+1}
  int active = 0;                 // 1-based; 0 when empty
  std::vector<std::string> history;

  bool empty() const { return slots.empty(); }
  const Expression& slot(int index) const {
    if (index < 1 || index > static_cast<int>(slots.size()))
      throw ActionError("reference to missing slot " + slot_name(index));
    return slots[static_cast<std::size_t>(index - 1)];
  }
  const Expression& active_expression() const { return slot(active); }
};

namespace detail {

inline void require_not_count(const ExpressionEnv& env, int index) {
  if (env.slot(index)->kind == NodeKind::Count)
    throw ActionError(slot_name(index) + " is already counted; COUNT may only appear as root");
}

inline std::string quote(std::string_view s) { return "'" + std::string(s) + "'"; }

}  // namespace detail

// Functional update; the returned env carries the "functions:" echo lines.
inline ExpressionEnv apply_action(const ExpressionEnv& env, const Action& a) {
  using detail::quote;
  ExpressionEnv out = env;
  switch (a.kind) {
    case ActionKind::FindRelation: {
      bool inverse = a.inverse.value_or(false);
      std::string rel_text = render_relation(a.relation, inverse);
      if (const auto* e = std::get_if<EntityId>(&a.source)) {
        int index = static_cast<int>(out.slots.size()) + 1;
        out.slots.push_back(expr::join(a.relation, expr::start_entity(e->id), inverse));
        out.active = index;
        out.history.push_back(slot_name(index) + " = START(" + quote(e->id) + ")");
        out.history.push_back(slot_name(index) + " = JOIN(" + quote(rel_text) + ", " + slot_name(index) + ")");
      } else {
        int index = std::get<SlotRef>(a.source).index;
        detail::require_not_count(env, index);
        out.slots[static_cast<std::size_t>(index - 1)] = expr::join(a.relation, env.slot(index), inverse);
        out.active = index;
        out.history.push_back(slot_name(index) + " = JOIN(" + quote(rel_text) + ", " + slot_name(index) + ")");
      }
      return out;
    }
    case ActionKind::Merge: {
      int left = a.slot.index;
      detail::require_not_count(env, left);
      if (const auto* s = std::get_if<SlotRef>(&a.operand)) {
        int right = s->index;
        if (right == left) throw ActionError("cannot merge " + slot_name(left) + " with itself");
        detail::require_not_count(env, right);
        out.slots[static_cast<std::size_t>(left - 1)] = expr::and_(env.slot(left), env.slot(right));
        out.slots.erase(out.slots.begin() + (right - 1));
        int merged = right < left ? left - 1 : left;
        out.active = merged;
        out.history.push_back(slot_name(left) + " = AND(" + slot_name(left) + ", " + slot_name(right) + ")");
      } else {
        Expression rhs;
        std::string sym;
        if (const auto* t = std::get_if<TypeName>(&a.operand)) {
          rhs = expr::start_type(t->name);
          sym = t->name;
        } else {
          sym = std::get<EntityId>(a.operand).id;
          rhs = expr::start_entity(sym);
        }
        int temp = static_cast<int>(env.slots.size()) + 1;
        out.slots[static_cast<std::size_t>(left - 1)] = expr::and_(env.slot(left), rhs);
        out.active = left;
        out.history.push_back(slot_name(temp) + " = START(" + quote(sym) + ")");
        out.history.push_back(slot_name(left) + " = AND(" + slot_name(left) + ", " + slot_name(temp) + ")");
      }
      return out;
    }
    case ActionKind::Order: {
      int index = a.slot.index;
      detail::require_not_count(env, index);
      out.slots[static_cast<std::size_t>(index - 1)] = expr::arg(a.order_mode, env.slot(index), a.relation);
      out.active = index;
      out.history.push_back(slot_name(index) + " = ARG(" + quote(mode_name(a.order_mode)) + ", " + slot_name(index) +
                            ", " + quote(a.relation) + ")");
      return out;
    }
    case ActionKind::Compare:
    case ActionKind::TimeConstraint: {
      if (env.empty()) throw ActionError("no active expression to constrain");
      int index = env.active;
      detail::require_not_count(env, index);
      if (a.kind == ActionKind::Compare) {
        if (!a.literal.numeric()) throw ActionError("comparison needs a numeric literal");
        out.slots[static_cast<std::size_t>(index - 1)] =
            expr::cmp(a.compare_mode, a.relation, a.literal, env.slot(index));
        out.history.push_back(slot_name(index) + " = CMP(" + quote(mode_name(a.compare_mode)) + ", " +
                              quote(a.relation) + ", " + quote(a.literal.lexical) + ", " + slot_name(index) + ")");
      } else {
        if (a.literal.type != Datatype::Date) throw ActionError("time constraint needs a date literal");
        out.slots[static_cast<std::size_t>(index - 1)] = expr::tc(env.slot(index), a.relation, a.literal);
        out.history.push_back(slot_name(index) + " = TC(" + slot_name(index) + ", " + quote(a.relation) + ", " +
                              quote(a.literal.lexical) + ")");
      }
      return out;
    }
    case ActionKind::Count: {
      int index = a.slot.index;
      detail::require_not_count(env, index);
      out.slots[static_cast<std::size_t>(index - 1)] = expr::count(env.slot(index));
      out.active = index;
      out.history.push_back(slot_name(index) + " = COUNT(" + slot_name(index) + ")");
      return out;
    }
    case ActionKind::Answer:
      return out;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gold action derivation

class UnsupportedForm : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Left-subtree-first, innermost-first linearization of a gold logical form.
inline std::vector<Action> derive_gold_actions(const Expression& gold) {
  if (!gold) throw UnsupportedForm("empty gold form");
  // Replay keeps the active slot exact for Compare/TimeConstraint, which act on it.
  struct Walker {
    std::vector<Action> actions;
    ExpressionEnv env;

    int emit(const Expression& e) {
      switch (e->kind) {
        case NodeKind::Start:
          throw UnsupportedForm("bare START node '" + render_logical_form(e) + "' is not reachable by an action");
        case NodeKind::Join: {
          Action a;
          if (e->child->kind == NodeKind::Start) {
            if (e->child->start_kind != StartKind::Entity)
              throw UnsupportedForm("JOIN over non-entity START in '" + render_logical_form(e) + "'");
            a = Action::find_relation(EntityId{e->child->symbol}, e->relation, e->inverse);
          } else {
            int s = emit(e->child);
            a = Action::find_relation(SlotRef{s}, e->relation, e->inverse);
          }
          return push(a);
        }
        case NodeKind::And: {
          if (e->child->kind == NodeKind::Start)
            throw UnsupportedForm("AND with START on the left in '" + render_logical_form(e) + "'");
          int left = emit(e->child);
          if (e->right->kind == NodeKind::Start) {
            if (e->right->start_kind == StartKind::Type) return push(Action::merge(SlotRef{left}, TypeName{e->right->symbol}));
            if (e->right->start_kind == StartKind::Entity) return push(Action::merge(SlotRef{left}, EntityId{e->right->symbol}));
            throw UnsupportedForm("AND with literal operand in '" + render_logical_form(e) + "'");
          }
          int right = emit(e->right);
          return push(Action::merge(SlotRef{left}, SlotRef{right}));
        }
        case NodeKind::Arg: {
          int s = emit(e->child);
          return push(Action::order(e->order_mode, SlotRef{s}, e->relation));
        }
        case NodeKind::Cmp:
          emit(e->child);
          return push(Action::compare(e->compare_mode, e->relation, e->literal));
        case NodeKind::Tc:
          emit(e->child);
          return push(Action::time_constraint(e->relation, e->literal));
        case NodeKind::Count: {
          if (e.get() != root) throw UnsupportedForm("COUNT below the root in '" + render_logical_form(e) + "'");
          int s = emit(e->child);
          return push(Action::count(SlotRef{s}));
        }
      }
      throw UnsupportedForm("unknown node");
    }

    int push(const Action& a) {
      try {
        env = apply_action(env, a);
      } catch (const ActionError& err) {
        throw UnsupportedForm(std::string("gold action rejected: ") + err.what());
      }
      actions.push_back(a);
      return env.active;
    }

    const ExprNode* root = nullptr;
  };
  Walker w;
  w.root = gold.get();
  w.emit(gold);
  return w.actions;
}

// ---------------------------------------------------------------------------
// SPARQL

namespace detail {

class SparqlWriter {
 public:
  std::string compile_root(const Expression& root) {
    std::string body;
    std::string tail;
    bool count = false;
    Expression e = root;
    if (e->kind == NodeKind::Count) {
      count = true;
      e = e->child;
    }
    if (e->kind == NodeKind::Arg) {
      compile(e->child, "?x", body, 1);
      std::string v = fresh("?v");
      body += "  ?x ns:" + e->relation + " " + v + " .\n";
      tail = std::string("ORDER BY ") + (e->order_mode == OrderMode::Max ? "DESC(" : "ASC(") + v + ")\nLIMIT 1\n";
    } else {
      compile(e, "?x", body, 1);
    }
    std::string out =
        "PREFIX ns: <http://rdf.freebase.com/ns/>\n"
        "PREFIX xsd: <http://www.w3.org/2001/XMLSchema#>\n";
    out += count ? "SELECT (COUNT(DISTINCT ?x) AS ?c) WHERE {\n" : "SELECT DISTINCT ?x WHERE {\n";
    out += body;
    out += "}\n";
    if (count && !tail.empty()) {
      // COUNT over ARG counts the single extremal entity.
      std::string inner = "PREFIX ns: <http://rdf.freebase.com/ns/>\nPREFIX xsd: <http://www.w3.org/2001/XMLSchema#>\n";
      inner += "SELECT (COUNT(DISTINCT ?x) AS ?c) WHERE {\n  {\n    SELECT ?x WHERE {\n" + indent(body, 4) +
               "    }\n" + indent(tail, 4) + "  }\n}\n";
      return inner;
    }
    return out + tail;
  }

 private:
  static std::string constant(const Expression& start) {
    if (start->start_kind == StartKind::Entity) return "ns:" + start->symbol;
    const Literal& lit = start->literal;
    return "\"" + lit.lexical + "\"^^" + std::string(datatype_tag(lit.type));
  }

  static std::string indent(const std::string& text, int n) {
    std::string pad(static_cast<std::size_t>(n), ' ');
    std::string out;
    std::size_t start = 0;
    while (start < text.size()) {
      auto nl = text.find('\n', start);
      out += pad + text.substr(start, nl - start + 1);
      if (nl == std::string::npos) break;
      start = nl + 1;
    }
    return out;
  }

  std::string fresh(const std::string& stem) { return stem + std::to_string(counter_++); }

  void compile(const Expression& e, const std::string& var, std::string& out, int depth) {
    std::string pad(static_cast<std::size_t>(2 * depth), ' ');
    switch (e->kind) {
      case NodeKind::Start:
        if (e->start_kind == StartKind::Type)
          out += pad + var + " ns:type.object.type ns:" + e->symbol + " .\n";
        else
          out += pad + "VALUES " + var + " { " + constant(e) + " }\n";
        return;
      case NodeKind::Join: {
        std::string other;
        bool is_const = e->child->kind == NodeKind::Start && e->child->start_kind != StartKind::Type;
        other = is_const ? constant(e->child) : fresh("?y");
        if (e->inverse)
          out += pad + other + " ns:" + e->relation + " " + var + " .\n";
        else
          out += pad + var + " ns:" + e->relation + " " + other + " .\n";
        if (!is_const) compile(e->child, other, out, depth);
        return;
      }
      case NodeKind::And:
        compile(e->child, var, out, depth);
        compile(e->right, var, out, depth);
        return;
      case NodeKind::Cmp: {
        static constexpr const char* kOps[] = {"<=", "<", ">=", ">"};
        compile(e->child, var, out, depth);
        std::string v = fresh("?v");
        out += pad + var + " ns:" + e->relation + " " + v + " .\n";
        out += pad + "FILTER(" + v + " " + kOps[static_cast<int>(e->compare_mode)] + " " + e->literal.lexical + ")\n";
        return;
      }
      case NodeKind::Tc: {
        compile(e->child, var, out, depth);
        std::string v = fresh("?v");
        out += pad + var + " ns:" + e->relation + " " + v + " .\n";
        out += pad + "FILTER(" + v + " = \"" + e->literal.lexical + "\"^^xsd:date)\n";
        return;
      }
      case NodeKind::Arg: {
        std::string inner;
        compile(e->child, var, inner, depth + 2);
        std::string v = fresh("?v");
        inner += pad + "    " + var + " ns:" + e->relation + " " + v + " .\n";
        out += pad + "{\n" + pad + "  SELECT " + var + " WHERE {\n" + inner + pad + "  }\n";
        out += pad + "  ORDER BY " + (e->order_mode == OrderMode::Max ? "DESC(" : "ASC(") + v + ")\n";
        out += pad + "  LIMIT 1\n" + pad + "}\n";
        return;
      }
      case NodeKind::Count:
        throw ActionError("COUNT may only appear as root");
    }
  }

  int counter_ = 0;
};

}  // namespace detail

inline std::string render_sparql(const Expression& e) {
  detail::SparqlWriter w;
  return w.compile_root(e);
}

}  // namespace gapd
