#pragma once

// In-memory typed triple store: the world the action executor queries.

#include <atomic>
#include <charconv>
#include <cmath>
#include <compare>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace gapd {

class KbError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EntityId {
  std::string id;

  auto operator<=>(const EntityId&) const = default;
};

enum class Datatype { Float, Int, Date };

inline std::string_view datatype_tag(Datatype t) {
  switch (t) {
    case Datatype::Float: return "xsd:float";
    case Datatype::Int: return "xsd:integer";
    case Datatype::Date: return "xsd:date";
  }
  return "";
}

inline Datatype parse_datatype_tag(std::string_view tag) {
  if (tag == "xsd:float" || tag == "xsd:double") return Datatype::Float;
  if (tag == "xsd:integer" || tag == "xsd:int") return Datatype::Int;
  if (tag == "xsd:date") return Datatype::Date;
  throw KbError("unknown datatype tag '" + std::string(tag) + "'");
}

namespace detail {

inline bool is_iso_date(std::string_view s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return false;
  for (std::size_t i : {0u, 1u, 2u, 3u, 5u, 6u, 8u, 9u})
    if (s[i] < '0' || s[i] > '9') return false;
  int year = std::stoi(std::string(s.substr(0, 4)));
  int month = std::stoi(std::string(s.substr(5, 2)));
  int day = std::stoi(std::string(s.substr(8, 2)));
  if (month < 1 || month > 12 || day < 1) return false;
  static constexpr int kDays[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  bool leap = (year % 4 == 0 && year % 100 != 0) || year % 400 == 0;
  int limit = kDays[month - 1] + (month == 2 && leap ? 1 : 0);
  return day <= limit;
}

inline std::string format_float(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  std::string out(buf, res.ptr);
  if (out.find_first_of(".eEn") == std::string::npos) out += ".0";
  return out;
}

}  // namespace detail

// Typed literal. The lexical form is canonical, so equal values compare equal.
struct Literal {
  Datatype type = Datatype::Float;
  std::string lexical;

  static Literal of_float(double v) {
    if (!std::isfinite(v)) throw KbError("float literal must be finite");
    return {Datatype::Float, detail::format_float(v)};
  }
  static Literal of_int(std::int64_t v) { return {Datatype::Int, std::to_string(v)}; }
  static Literal of_date(std::string_view iso) {
    if (!detail::is_iso_date(iso)) throw KbError("malformed date literal '" + std::string(iso) + "'");
    return {Datatype::Date, std::string(iso)};
  }

  static Literal parse(std::string_view text, Datatype type) {
    switch (type) {
      case Datatype::Float: {
        double v = 0;
        auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
        if (ec != std::errc() || p != text.data() + text.size())
          throw KbError("malformed float literal '" + std::string(text) + "'");
        return of_float(v);
      }
      case Datatype::Int: {
        std::int64_t v = 0;
        auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
        if (ec != std::errc() || p != text.data() + text.size())
          throw KbError("malformed integer literal '" + std::string(text) + "'");
        return of_int(v);
      }
      case Datatype::Date: return of_date(text);
    }
    throw KbError("bad datatype");
  }

  bool numeric() const { return type != Datatype::Date; }

  double number() const {
    if (!numeric()) throw KbError("date literal has no numeric value");
    return std::stod(lexical);
  }

  auto operator<=>(const Literal&) const = default;
};

using Value = std::variant<EntityId, Literal>;
using ValueSet = std::set<Value>;

inline bool is_entity(const Value& v) { return std::holds_alternative<EntityId>(v); }

inline std::string to_string(const Value& v) {
  if (const auto* e = std::get_if<EntityId>(&v)) return e->id;
  return std::get<Literal>(v).lexical;
}

inline Value entity(std::string id) { return EntityId{std::move(id)}; }

enum class Direction { Forward, Reverse };

struct Triple {
  EntityId subject;
  std::string relation;
  Value object;

  auto operator<=>(const Triple&) const = default;
};

inline void validate_relation_name(std::string_view rel) {
  if (rel.empty()) throw KbError("relation name is empty");
  for (char c : rel) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '(' || c == ')' || c == '[' ||
        c == ']' || c == '|')
      throw KbError("relation name '" + std::string(rel) + "' contains reserved character");
  }
  if (rel.front() == '.' || rel.back() == '.' || rel.find("..") != std::string_view::npos)
    throw KbError("relation name '" + std::string(rel) + "' has an empty dotted segment");
}

inline void validate_entity_id(std::string_view id) {
  if (id.empty()) throw KbError("entity id is empty");
  for (char c : id)
    if (c == ' ' || c == '\t' || c == '\n' || c == '(' || c == ')' || c == '[' || c == ']' || c == '|')
      throw KbError("entity id '" + std::string(id) + "' contains reserved character");
}

class KbStore {
 public:
  KbStore() = default;
  KbStore(const KbStore& o)
      : triples_(o.triples_), forward_(o.forward_), reverse_(o.reverse_), types_(o.types_),
        accesses_(o.accesses_.load()) {}
  KbStore& operator=(const KbStore& o) {
    triples_ = o.triples_;
    forward_ = o.forward_;
    reverse_ = o.reverse_;
    types_ = o.types_;
    accesses_ = o.accesses_.load();
    return *this;
  }
  KbStore(KbStore&& o) noexcept
      : triples_(std::move(o.triples_)), forward_(std::move(o.forward_)),
        reverse_(std::move(o.reverse_)), types_(std::move(o.types_)),
        accesses_(o.accesses_.load()) {}
  KbStore& operator=(KbStore&& o) noexcept {
    triples_ = std::move(o.triples_);
    forward_ = std::move(o.forward_);
    reverse_ = std::move(o.reverse_);
    types_ = std::move(o.types_);
    accesses_ = o.accesses_.load();
    return *this;
  }

  // Returns false when the triple was already present.
  bool add_triple(const Triple& t) {
    validate_entity_id(t.subject.id);
    validate_relation_name(t.relation);
    if (const auto* e = std::get_if<EntityId>(&t.object)) validate_entity_id(e->id);
    if (!triples_.insert(t).second) return false;
    forward_[t.subject][t.relation].insert(t.object);
    reverse_[t.relation][t.object].insert(t.subject);
    return true;
  }

  void add_type_member(const std::string& type_name, const EntityId& e) {
    validate_relation_name(type_name);
    validate_entity_id(e.id);
    types_[type_name].insert(e);
  }

  // Objects (Forward) or subjects (Reverse) reachable from any source via `relation`.
  ValueSet follow(const ValueSet& sources, std::string_view relation, Direction dir) const {
    ++accesses_;
    ValueSet out;
    if (dir == Direction::Forward) {
      for (const auto& s : sources) {
        const auto* e = std::get_if<EntityId>(&s);
        if (!e) continue;
        auto it = forward_.find(*e);
        if (it == forward_.end()) continue;
        auto jt = it->second.find(std::string(relation));
        if (jt == it->second.end()) continue;
        out.insert(jt->second.begin(), jt->second.end());
      }
    } else {
      auto it = reverse_.find(std::string(relation));
      if (it == reverse_.end()) return out;
      for (const auto& s : sources) {
        auto jt = it->second.find(s);
        if (jt == it->second.end()) continue;
        for (const auto& subj : jt->second) out.insert(subj);
      }
    }
    return out;
  }

  ValueSet members_of_type(std::string_view type_name) const {
    ++accesses_;
    ValueSet out;
    auto it = types_.find(std::string(type_name));
    if (it == types_.end()) return out;
    for (const auto& e : it->second) out.insert(e);
    return out;
  }

  bool has_type(std::string_view type_name) const { return types_.count(std::string(type_name)) > 0; }

  // Forward values of a single entity.
  const ValueSet& values_of(const EntityId& e, std::string_view relation) const {
    static const ValueSet kEmpty;
    ++accesses_;
    auto it = forward_.find(e);
    if (it == forward_.end()) return kEmpty;
    auto jt = it->second.find(std::string(relation));
    return jt == it->second.end() ? kEmpty : jt->second;
  }

  // Relations touching any source, tagged with the direction that leaves the source.
  std::set<std::pair<std::string, Direction>> incident_relations(const ValueSet& sources) const {
    ++accesses_;
    std::set<std::pair<std::string, Direction>> out;
    for (const auto& s : sources) {
      if (const auto* e = std::get_if<EntityId>(&s)) {
        auto it = forward_.find(*e);
        if (it != forward_.end())
          for (const auto& [rel, _] : it->second) out.emplace(rel, Direction::Forward);
      }
    }
    for (const auto& [rel, objects] : reverse_) {
      for (const auto& s : sources) {
        if (objects.count(s)) {
          out.emplace(rel, Direction::Reverse);
          break;
        }
      }
    }
    return out;
  }

  bool incident(const ValueSet& sources, std::string_view relation, Direction dir) const {
    return !follow(sources, relation, dir).empty();
  }

  const std::set<Triple>& triples() const { return triples_; }
  const std::map<std::string, std::set<EntityId>>& types() const { return types_; }
  std::size_t size() const { return triples_.size(); }

  std::set<std::string> relation_names() const {
    std::set<std::string> out;
    for (const auto& [rel, _] : reverse_) out.insert(rel);
    return out;
  }

  std::set<EntityId> entities() const {
    std::set<EntityId> out;
    for (const auto& t : triples_) {
      out.insert(t.subject);
      if (const auto* e = std::get_if<EntityId>(&t.object)) out.insert(*e);
    }
    for (const auto& [_, members] : types_) out.insert(members.begin(), members.end());
    return out;
  }

  // Index reads since construction; used to verify caching.
  std::size_t access_count() const { return accesses_.load(); }

 private:
  std::set<Triple> triples_;
  std::map<EntityId, std::map<std::string, ValueSet>> forward_;
  std::map<std::string, std::map<Value, std::set<EntityId>>> reverse_;
  std::map<std::string, std::set<EntityId>> types_;
  mutable std::atomic<std::size_t> accesses_{0};
};

// Line format: subject \t relation \t object [\t datatype]; "#type \t type \t entity".
inline void write_kb(std::ostream& os, const KbStore& kb) {
  for (const auto& [type, members] : kb.types())
    for (const auto& e : members) os << "#type\t" << type << '\t' << e.id << '\n';
  for (const auto& t : kb.triples()) {
    os << t.subject.id << '\t' << t.relation << '\t';
    if (const auto* e = std::get_if<EntityId>(&t.object)) {
      os << e->id << '\n';
    } else {
      const auto& lit = std::get<Literal>(t.object);
      os << lit.lexical << '\t' << datatype_tag(lit.type) << '\n';
    }
  }
}

inline std::string serialize_kb(const KbStore& kb) {
  std::ostringstream os;
  write_kb(os, kb);
  return os.str();
}

inline KbStore read_kb(std::istream& is) {
  KbStore kb;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    while (true) {
      auto tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    try {
      if (cols[0] == "#type") {
        if (cols.size() != 3) throw KbError("type line needs 3 columns");
        kb.add_type_member(cols[1], EntityId{cols[2]});
      } else if (cols.size() == 3) {
        kb.add_triple({EntityId{cols[0]}, cols[1], EntityId{cols[2]}});
      } else if (cols.size() == 4) {
        kb.add_triple({EntityId{cols[0]}, cols[1], Literal::parse(cols[2], parse_datatype_tag(cols[3]))});
      } else {
        throw KbError("expected 3 or 4 tab-separated columns");
      }
    } catch (const KbError& err) {
      throw KbError("line " + std::to_string(lineno) + ": " + err.what());
    }
  }
  return kb;
}

}  // namespace gapd
