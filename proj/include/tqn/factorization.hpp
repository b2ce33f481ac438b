#pragma once

// Query-attribute factorization of category labels.
//
// Each query owns an attribute set that always contains the null attribute
// (serialized id 0, shared across queries but modeled per query at local
// index 0). A category is a tuple with one attribute id per query; the set
// of categories is a subset of the cartesian product of the attribute sets.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tqn/csv.hpp"
#include "tqn/tensor.hpp"

namespace tqn {

inline constexpr int kNullAttribute = 0;

class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AttributeSpec {
  int attribute_id = 0;
  std::string name;
};

struct QuerySpec {
  std::size_t query_id = 0;
  std::string name;
  std::vector<AttributeSpec> attributes;  // local index 0 is the null attribute

  std::size_t size() const { return attributes.size(); }

  std::optional<std::size_t> local_index(int attribute_id) const {
    for (std::size_t i = 0; i < attributes.size(); ++i) {
      if (attributes[i].attribute_id == attribute_id) return i;
    }
    return std::nullopt;
  }
};

using AttributeTuple = std::vector<int>;

struct CategoryRow {
  std::size_t class_index = 0;
  std::string class_name;
  AttributeTuple attributes;
};

struct SchemaIssue {
  enum class Severity { error, warning };
  Severity severity = Severity::error;
  std::string message;
};

struct SchemaReport {
  std::vector<SchemaIssue> issues;

  std::size_t error_count() const {
    return static_cast<std::size_t>(std::count_if(issues.begin(), issues.end(), [](const SchemaIssue& i) {
      return i.severity == SchemaIssue::Severity::error;
    }));
  }
  std::size_t warning_count() const { return issues.size() - error_count(); }
  bool valid() const { return error_count() == 0; }
};

class FactorizationSchema {
 public:
  FactorizationSchema() = default;
  FactorizationSchema(std::vector<QuerySpec> queries, std::vector<CategoryRow> categories)
      : queries_(std::move(queries)), categories_(std::move(categories)) {
    for (std::size_t c = 0; c < categories_.size(); ++c) index_.emplace(categories_[c].attributes, c);
  }

  std::size_t query_count() const { return queries_.size(); }
  std::size_t category_count() const { return categories_.size(); }
  const std::vector<QuerySpec>& queries() const { return queries_; }
  const std::vector<CategoryRow>& categories() const { return categories_; }

  std::vector<std::size_t> attribute_counts() const {
    std::vector<std::size_t> n;
    for (const auto& q : queries_) n.push_back(q.size());
    return n;
  }

  const AttributeTuple& category_to_attributes(std::size_t class_index) const {
    if (class_index >= categories_.size()) {
      throw IndexError("class index " + std::to_string(class_index) + " out of range [0, " +
                       std::to_string(categories_.size()) + ")");
    }
    return categories_[class_index].attributes;
  }

  // The class whose tuple equals `tuple`, or nullopt when the tuple is a valid
  // member of the product but not a category.
  std::optional<std::size_t> attributes_to_category(const AttributeTuple& tuple) const {
    if (tuple.size() != queries_.size()) {
      throw ShapeError("attribute tuple has " + std::to_string(tuple.size()) + " entries, expected " +
                       std::to_string(queries_.size()));
    }
    for (std::size_t q = 0; q < tuple.size(); ++q) {
      if (!queries_[q].local_index(tuple[q])) {
        throw ShapeError("attribute id " + std::to_string(tuple[q]) + " is not in the attribute set of query '" +
                         queries_[q].name + "'");
      }
    }
    auto it = index_.find(tuple);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  // Per-query local attribute indices for a class (classifier targets).
  std::vector<std::size_t> local_targets(std::size_t class_index) const {
    const auto& tuple = category_to_attributes(class_index);
    std::vector<std::size_t> out;
    for (std::size_t q = 0; q < queries_.size(); ++q) {
      auto local = queries_[q].local_index(tuple[q]);
      if (!local) throw SchemaError("class " + std::to_string(class_index) + " has unknown attribute id");
      out.push_back(*local);
    }
    return out;
  }

  int attribute_id(std::size_t query, std::size_t local) const { return queries_.at(query).attributes.at(local).attribute_id; }

 private:
  std::vector<QuerySpec> queries_;
  std::vector<CategoryRow> categories_;
  std::map<AttributeTuple, std::size_t> index_;  // first occurrence wins
};

namespace detail {

inline std::string normalize_label(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) continue;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

inline std::optional<long> parse_int(const std::string& s) {
  long v = 0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  while (first < last && std::isspace(static_cast<unsigned char>(*first))) ++first;
  while (last > first && std::isspace(static_cast<unsigned char>(*(last - 1)))) --last;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) return std::nullopt;
  return v;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

// Positional class-name tokens (comma separated) that are an unambiguous
// prefix of exactly one attribute name of the same query, after lowercasing
// and dropping spaces. Such tokens must agree with the stored tuple.
inline std::vector<std::string> name_conflicts(const FactorizationSchema& schema) {
  std::vector<std::string> out;
  for (const auto& row : schema.categories()) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char c : row.class_name) {
      if (c == ',') {
        tokens.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    tokens.push_back(cur);
    if (tokens.size() != schema.query_count()) continue;
    for (std::size_t q = 0; q < tokens.size() && q < row.attributes.size(); ++q) {
      const std::string tok = normalize_label(tokens[q]);
      if (tok.size() < 2) continue;
      std::optional<int> match;
      int hits = 0;
      for (const auto& a : schema.queries()[q].attributes) {
        const std::string name = normalize_label(a.name);
        if (name.compare(0, tok.size(), tok) == 0) {
          match = a.attribute_id;
          ++hits;
        }
      }
      if (hits == 1 && *match != row.attributes[q]) {
        out.push_back("class " + std::to_string(row.class_index) + " '" + row.class_name + "': name token '" +
                      tokens[q] + "' suggests attribute " + std::to_string(*match) + " for query '" +
                      schema.queries()[q].name + "' but the tuple stores " + std::to_string(row.attributes[q]));
      }
    }
  }
  return out;
}

}  // namespace detail

// All structural checks. Errors make a schema unusable; warnings flag label
// text that disagrees with the stored ids (tuples stay authoritative).
inline SchemaReport validate_schema(const FactorizationSchema& schema) {
  SchemaReport report;
  auto error = [&](std::string m) { report.issues.push_back({SchemaIssue::Severity::error, std::move(m)}); };
  auto warn = [&](std::string m) { report.issues.push_back({SchemaIssue::Severity::warning, std::move(m)}); };

  if (schema.query_count() == 0) error("schema has no queries");
  for (std::size_t q = 0; q < schema.query_count(); ++q) {
    const auto& spec = schema.queries()[q];
    if (spec.query_id != q) error("query ids not dense: position " + std::to_string(q) + " has id " + std::to_string(spec.query_id));
    std::size_t nulls = 0;
    std::map<int, std::size_t> seen;
    for (const auto& a : spec.attributes) {
      if (a.attribute_id < 0) error("query '" + spec.name + "' has negative attribute id " + std::to_string(a.attribute_id));
      if (++seen[a.attribute_id] == 2) {
        error("query '" + spec.name + "' repeats attribute id " + std::to_string(a.attribute_id));
      }
      if (a.attribute_id == kNullAttribute) ++nulls;
    }
    if (nulls != 1) error("query '" + spec.name + "' must contain exactly one null attribute, found " + std::to_string(nulls));
    if (spec.size() < 2) error("query '" + spec.name + "' has no non-null attributes");
  }

  if (schema.category_count() == 0) error("category table is empty");
  std::map<AttributeTuple, std::size_t> tuples;
  std::map<std::string, std::size_t> names;
  for (std::size_t c = 0; c < schema.category_count(); ++c) {
    const auto& row = schema.categories()[c];
    if (row.class_index != c) {
      error("class indices not dense: row " + std::to_string(c) + " has index " + std::to_string(row.class_index));
    }
    if (row.attributes.size() != schema.query_count()) {
      error("class " + std::to_string(row.class_index) + " has " + std::to_string(row.attributes.size()) +
            " attributes, expected " + std::to_string(schema.query_count()));
      continue;
    }
    bool members = true;
    for (std::size_t q = 0; q < row.attributes.size(); ++q) {
      if (!schema.queries()[q].local_index(row.attributes[q])) {
        error("class " + std::to_string(row.class_index) + ": attribute id " + std::to_string(row.attributes[q]) +
              " is not in query '" + schema.queries()[q].name + "'");
        members = false;
      }
    }
    if (members) {
      auto [it, inserted] = tuples.emplace(row.attributes, row.class_index);
      if (!inserted) {
        error("classes " + std::to_string(it->second) + " and " + std::to_string(row.class_index) +
              " share the same attribute tuple");
      }
    }
    auto [nit, fresh] = names.emplace(row.class_name, row.class_index);
    if (!fresh) {
      warn("classes " + std::to_string(nit->second) + " and " + std::to_string(row.class_index) + " share the name '" +
           row.class_name + "'");
    }
  }
  if (schema.query_count() > 0) {
    for (auto& m : detail::name_conflicts(schema)) warn(std::move(m));
  }
  return report;
}

// Reads the queries and classes CSV pair without validating.
inline FactorizationSchema parse_schema(const std::string& queries_path, const std::string& classes_path) {
  std::vector<csv::Row> qrows, crows;
  try {
    qrows = csv::read_file(queries_path);
  } catch (const csv::CsvError& e) {
    throw SchemaError(std::string("queries file: ") + e.what());
  }
  try {
    crows = csv::read_file(classes_path);
  } catch (const csv::CsvError& e) {
    throw SchemaError(std::string("classes file: ") + e.what());
  }
  if (qrows.empty() || qrows[0] != csv::Row{"q_id", "q_name", "att_id", "att_name"}) {
    throw SchemaError(queries_path + ": expected header q_id,q_name,att_id,att_name");
  }
  std::string null_name = "null";
  std::map<long, QuerySpec> by_id;
  for (std::size_t r = 1; r < qrows.size(); ++r) {
    const auto& row = qrows[r];
    if (row.size() != 4) throw SchemaError(queries_path + ": row " + std::to_string(r + 1) + " needs 4 fields");
    const auto att = detail::parse_int(row[2]);
    if (!att) throw SchemaError(queries_path + ": row " + std::to_string(r + 1) + " has non-integer att_id");
    if (detail::trim(row[0]) == "-") {
      if (*att != kNullAttribute) throw SchemaError(queries_path + ": shared null row must use att_id 0");
      null_name = detail::trim(row[3]);
      continue;
    }
    const auto qid = detail::parse_int(row[0]);
    if (!qid || *qid < 0) throw SchemaError(queries_path + ": row " + std::to_string(r + 1) + " has invalid q_id");
    auto& spec = by_id[*qid];
    spec.query_id = static_cast<std::size_t>(*qid);
    if (spec.name.empty()) spec.name = detail::trim(row[1]);
    spec.attributes.push_back({static_cast<int>(*att), detail::trim(row[3])});
  }
  std::vector<QuerySpec> queries;
  for (auto& [_, spec] : by_id) {
    spec.attributes.insert(spec.attributes.begin(), AttributeSpec{kNullAttribute, null_name});
    queries.push_back(std::move(spec));
  }

  if (crows.empty()) throw SchemaError(classes_path + ": missing header");
  const auto& header = crows[0];
  if (header.size() < 3 || header[0] != "class_index" || header[1] != "class_name") {
    throw SchemaError(classes_path + ": expected header class_index,class_name,att_q0,...");
  }
  const std::size_t k = header.size() - 2;
  for (std::size_t q = 0; q < k; ++q) {
    if (header[q + 2] != "att_q" + std::to_string(q)) {
      throw SchemaError(classes_path + ": column " + std::to_string(q + 2) + " should be att_q" + std::to_string(q));
    }
  }
  if (k != queries.size()) {
    throw SchemaError(classes_path + ": " + std::to_string(k) + " attribute columns but " +
                      std::to_string(queries.size()) + " queries");
  }
  std::vector<CategoryRow> categories;
  for (std::size_t r = 1; r < crows.size(); ++r) {
    const auto& row = crows[r];
    if (row.size() != k + 2) throw SchemaError(classes_path + ": row " + std::to_string(r + 1) + " has wrong field count");
    CategoryRow cat;
    const auto idx = detail::parse_int(row[0]);
    if (!idx || *idx < 0) throw SchemaError(classes_path + ": row " + std::to_string(r + 1) + " has invalid class_index");
    cat.class_index = static_cast<std::size_t>(*idx);
    cat.class_name = row[1];
    for (std::size_t q = 0; q < k; ++q) {
      const auto v = detail::parse_int(row[q + 2]);
      if (!v) throw SchemaError(classes_path + ": row " + std::to_string(r + 1) + " has non-integer attribute id");
      cat.attributes.push_back(static_cast<int>(*v));
    }
    categories.push_back(std::move(cat));
  }
  return FactorizationSchema(std::move(queries), std::move(categories));
}

// Parses and validates; any error-level issue aborts the load.
inline FactorizationSchema load_schema(const std::string& queries_path, const std::string& classes_path) {
  auto schema = parse_schema(queries_path, classes_path);
  const auto report = validate_schema(schema);
  if (!report.valid()) {
    std::string msg = "invalid schema (" + classes_path + "):";
    for (const auto& issue : report.issues) {
      if (issue.severity == SchemaIssue::Severity::error) msg += "\n  " + issue.message;
    }
    throw SchemaError(msg);
  }
  return schema;
}

// Joint attribute probability per class: the product over queries of the
// probability assigned to that class's attribute. p_att[q][local] follows
// each query's local attribute order. Scores need not sum to one.
inline std::vector<double> class_prob_from_attributes(const FactorizationSchema& schema,
                                                      const std::vector<std::vector<double>>& p_att) {
  if (p_att.size() != schema.query_count()) throw ShapeError("class_prob_from_attributes: one vector per query expected");
  for (std::size_t q = 0; q < p_att.size(); ++q) {
    if (p_att[q].size() != schema.queries()[q].size()) {
      throw ShapeError("class_prob_from_attributes: query " + std::to_string(q) + " expects " +
                       std::to_string(schema.queries()[q].size()) + " probabilities");
    }
    for (double p : p_att[q]) {
      if (!(p >= 0.0 && p <= 1.0)) throw DomainError("class_prob_from_attributes: probability outside [0,1]");
    }
  }
  std::vector<double> scores(schema.category_count());
  for (std::size_t c = 0; c < scores.size(); ++c) {
    const auto targets = schema.local_targets(c);
    double s = 1.0;
    for (std::size_t q = 0; q < targets.size(); ++q) s *= p_att[q][targets[q]];
    scores[c] = s;
  }
  return scores;
}

// Levenshtein distance with unit insert, delete and substitute costs.
inline std::size_t edit_distance(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

struct SequenceMatch {
  std::size_t class_index = 0;
  std::size_t distance = 0;
};

// Class whose tuple is nearest in edit distance; lowest index on ties.
inline SequenceMatch class_from_sequence(const FactorizationSchema& schema, std::span<const int> decoded) {
  if (schema.category_count() == 0) throw SchemaError("class_from_sequence: empty schema");
  SequenceMatch best{0, std::numeric_limits<std::size_t>::max()};
  for (std::size_t c = 0; c < schema.category_count(); ++c) {
    const auto d = edit_distance(decoded, schema.category_to_attributes(c));
    if (d < best.distance) best = {c, d};
  }
  return best;
}

}  // namespace tqn
