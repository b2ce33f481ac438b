#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>

#include "tqn/factorization.hpp"
#include "tqn/rng.hpp"

using namespace tqn;

namespace {

std::string schema_path(const std::string& file) { return std::string(TQN_DATA_DIR) + "/schemas/" + file; }

FactorizationSchema diving() { return load_schema(schema_path("diving48_queries.csv"), schema_path("diving48_classes.csv")); }
FactorizationSchema leap_turn() {
  return load_schema(schema_path("leap_turn_queries.csv"), schema_path("leap_turn_classes.csv"));
}

class TempDir {
 public:
  TempDir() {
    path_ = std::filesystem::temp_directory_path() / ("tqn_schema_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                                                      ::testing::UnitTest::GetInstance()->current_test_info()->name());
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  std::string write(const std::string& name, const std::string& text) const {
    const auto p = (path_ / name).string();
    std::ofstream(p) << text;
    return p;
  }

 private:
  std::filesystem::path path_;
};

const char* kToyQueries =
    "q_id,q_name,att_id,att_name\n-,-,0,null\n0,shape,1,circle\n0,shape,2,square\n1,color,3,red\n1,color,4,blue\n";

// Two-query schema with n = (3, 3) and a configurable class table.
FactorizationSchema toy(const std::vector<AttributeTuple>& tuples) {
  std::vector<QuerySpec> q(2);
  q[0] = {0, "shape", {{0, "null"}, {1, "circle"}, {2, "square"}}};
  q[1] = {1, "color", {{0, "null"}, {3, "red"}, {4, "blue"}}};
  std::vector<CategoryRow> rows;
  for (std::size_t i = 0; i < tuples.size(); ++i) rows.push_back({i, "class " + std::to_string(i), tuples[i]});
  return FactorizationSchema(q, rows);
}

}  // namespace

TEST(Csv, QuotedFieldsRoundTrip) {
  const csv::Row row{"a,b", "say \"hi\"", "", "plain"};
  const auto parsed = csv::parse(csv::format_row(row) + "x,y\r\n");
  ASSERT_EQ(parsed.size(), 2u);
  EXPECT_EQ(parsed[0], row);
  EXPECT_EQ(parsed[1], (csv::Row{"x", "y"}));
  EXPECT_THROW(csv::parse("\"open"), csv::CsvError);
}

TEST(Schema, BundledDivingShape) {
  const auto s = diving();
  ASSERT_EQ(s.query_count(), 4u);
  EXPECT_EQ(s.category_count(), 48u);
  const std::vector<std::string> names{"take off", "somersault", "twist", "flight pose"};
  for (std::size_t q = 0; q < 4; ++q) EXPECT_EQ(s.queries()[q].name, names[q]);
  EXPECT_EQ(s.attribute_counts(), (std::vector<std::size_t>{5, 9, 9, 5}));
  for (const auto& q : s.queries()) {
    EXPECT_EQ(q.attributes[0].attribute_id, kNullAttribute);
    EXPECT_EQ(q.attributes[0].name, "null");
  }
  EXPECT_TRUE(validate_schema(s).issues.empty());
}

TEST(Schema, DivingTuples) {
  const auto s = diving();
  EXPECT_EQ(s.categories()[0].class_name, "Back,1.5som,05Twis,FREE");
  EXPECT_EQ(s.category_to_attributes(0), (AttributeTuple{1, 7, 14, 24}));
  EXPECT_EQ(s.categories()[30].class_name, "Forward,Dive,NoTwis,STR");
  EXPECT_EQ(s.category_to_attributes(30), (AttributeTuple{2, 5, 13, 23}));
  EXPECT_EQ(s.attributes_to_category({1, 7, 14, 24}), std::optional<std::size_t>(0));
  EXPECT_THROW(s.category_to_attributes(48), IndexError);
}

TEST(Schema, PublishedTableIsFlagged) {
  const auto raw = parse_schema(schema_path("diving48_queries.csv"), schema_path("diving48_classes_published.csv"));
  const auto report = validate_schema(raw);
  // Classes 15 and 31..36 (excluding 32) duplicate the tuples of 29 and 41..46.
  EXPECT_EQ(report.error_count(), 6u);
  // Classes 15, 16 and 31..36 carry take-off ids that contradict their names.
  EXPECT_EQ(report.warning_count(), 8u);
  std::size_t take_off_warnings = 0;
  for (const auto& i : report.issues) {
    if (i.severity == SchemaIssue::Severity::warning && i.message.find("take off") != std::string::npos) ++take_off_warnings;
  }
  EXPECT_EQ(take_off_warnings, 8u);
  EXPECT_THROW(load_schema(schema_path("diving48_queries.csv"), schema_path("diving48_classes_published.csv")),
               SchemaError);

  // Apart from the take-off column of those eight rows the two files agree.
  const auto fixed = diving();
  for (std::size_t c = 0; c < 48; ++c) {
    auto a = raw.category_to_attributes(c);
    auto b = fixed.category_to_attributes(c);
    EXPECT_EQ(raw.categories()[c].class_name, fixed.categories()[c].class_name);
    const bool edited = c == 15 || c == 16 || (c >= 31 && c <= 36);
    EXPECT_EQ(a[0] != b[0], edited) << c;
    a[0] = b[0];
    EXPECT_EQ(a, b) << c;
  }
}

TEST(Schema, LeapTurnToy) {
  const auto s = leap_turn();
  ASSERT_EQ(s.query_count(), 2u);
  EXPECT_EQ(s.categories()[3].class_name, "split jump");
  const auto& t = s.category_to_attributes(3);
  EXPECT_EQ(s.queries()[0].attributes[*s.queries()[0].local_index(t[0])].name, "split jump");
  EXPECT_EQ(t[1], kNullAttribute);
  EXPECT_EQ(s.local_targets(3), (std::vector<std::size_t>{2, 0}));
}

TEST(Schema, LoadErrors) {
  TempDir dir;
  const auto q = dir.write("q.csv", kToyQueries);
  const auto empty = dir.write("empty.csv", "class_index,class_name,att_q0,att_q1\n");
  EXPECT_THROW(load_schema(q, empty), SchemaError);
  const auto dup = dir.write("dup.csv", "class_index,class_name,att_q0,att_q1\n0,a,1,3\n1,b,1,3\n");
  EXPECT_THROW(load_schema(q, dup), SchemaError);
  const auto unknown = dir.write("unknown.csv", "class_index,class_name,att_q0,att_q1\n0,a,1,9\n");
  EXPECT_THROW(load_schema(q, unknown), SchemaError);
  const auto sparse = dir.write("sparse.csv", "class_index,class_name,att_q0,att_q1\n0,a,1,3\n2,b,2,3\n");
  EXPECT_THROW(load_schema(q, sparse), SchemaError);
  const auto cols = dir.write("cols.csv", "class_index,class_name,att_q0\n0,a,1\n");
  EXPECT_THROW(load_schema(q, cols), SchemaError);
  const auto good = dir.write("good.csv", "class_index,class_name,att_q0,att_q1\n0,a,1,3\n1,b,2,0\n");
  EXPECT_EQ(load_schema(q, good).category_count(), 2u);
  EXPECT_THROW(load_schema(dir.write("missing_header.csv", "0,a,1,3\n"), good), SchemaError);
}

TEST(Schema, ValidateReportsUnknownIdOnce) {
  const auto s = toy({{1, 3}, {2, 9}});
  const auto report = validate_schema(s);
  ASSERT_EQ(report.issues.size(), 1u);
  EXPECT_EQ(report.issues[0].severity, SchemaIssue::Severity::error);
  EXPECT_NE(report.issues[0].message.find("color"), std::string::npos);
  EXPECT_NE(report.issues[0].message.find('9'), std::string::npos);
}

TEST(Schema, DuplicateNamesWarnOnly) {
  std::vector<QuerySpec> q(1);
  q[0] = {0, "shape", {{0, "null"}, {1, "circle"}, {2, "square"}}};
  const FactorizationSchema s(q, {{0, "same", {1}}, {1, "same", {2}}});
  const auto report = validate_schema(s);
  EXPECT_TRUE(report.valid());
  EXPECT_EQ(report.warning_count(), 1u);
}

TEST(Schema, ValidateCatchesStructuralFaults) {
  std::vector<QuerySpec> q(1);
  q[0] = {0, "shape", {{1, "circle"}, {1, "square"}}};
  const FactorizationSchema s(q, {{0, "a", {1}}});
  const auto report = validate_schema(s);
  EXPECT_FALSE(report.valid());
  EXPECT_GE(report.error_count(), 2u);  // repeated id and missing null
}

TEST(Schema, InverseMappingExhaustive) {
  for (const auto* file : {"synth", "leap_turn", "diving48"}) {
    const auto s = load_schema(schema_path(std::string(file) + "_queries.csv"), schema_path(std::string(file) + "_classes.csv"));
    std::map<AttributeTuple, std::size_t> oracle;
    for (std::size_t c = 0; c < s.category_count(); ++c) {
      oracle[s.category_to_attributes(c)] = c;
      EXPECT_EQ(s.attributes_to_category(s.category_to_attributes(c)), std::optional<std::size_t>(c));
    }
    // Enumerate the full cartesian product (at most 5*9*9*5 tuples).
    const auto n = s.attribute_counts();
    std::vector<std::size_t> idx(n.size(), 0);
    std::size_t visited = 0;
    for (;;) {
      AttributeTuple t;
      for (std::size_t q = 0; q < n.size(); ++q) t.push_back(s.attribute_id(q, idx[q]));
      const auto got = s.attributes_to_category(t);
      const auto it = oracle.find(t);
      if (it == oracle.end()) {
        EXPECT_FALSE(got.has_value());
      } else {
        EXPECT_EQ(got, std::optional<std::size_t>(it->second));
      }
      ++visited;
      std::size_t q = 0;
      while (q < n.size() && ++idx[q] == n[q]) idx[q++] = 0;
      if (q == n.size()) break;
    }
    std::size_t product = 1;
    for (auto v : n) product *= v;
    EXPECT_EQ(visited, product);
    EXPECT_FALSE(s.attributes_to_category(AttributeTuple(n.size(), kNullAttribute)).has_value());
  }
}

TEST(Schema, MalformedTupleRaises) {
  const auto s = diving();
  EXPECT_THROW(s.attributes_to_category({1, 7, 14}), ShapeError);
  EXPECT_THROW(s.attributes_to_category({1, 7, 14, 99}), ShapeError);
  EXPECT_THROW(s.attributes_to_category({7, 1, 14, 24}), ShapeError);
}

TEST(ClassProb, ProductsAndDomain) {
  const auto s = toy({{1, 3}, {2, 4}});
  // p_att per query in local order (null, a, b).
  const std::vector<std::vector<double>> p{{0.3, 0.9, 0.1}, {0.2, 0.6, 0.4}};
  const auto scores = class_prob_from_attributes(s, p);

  // Oracle: enumerate the full product, keep tuples that are categories.
  std::vector<double> oracle(2, -1.0);
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = 0; b < 3; ++b) {
      const auto c = s.attributes_to_category({s.attribute_id(0, a), s.attribute_id(1, b)});
      if (c) oracle[*c] = p[0][a] * p[1][b];
    }
  }
  EXPECT_DOUBLE_EQ(scores[0], oracle[0]);
  EXPECT_DOUBLE_EQ(scores[1], oracle[1]);
  EXPECT_DOUBLE_EQ(scores[0], 0.9 * 0.6);
  EXPECT_DOUBLE_EQ(scores[1], 0.1 * 0.4);

  EXPECT_THROW(class_prob_from_attributes(s, {{0.3, 1.2, 0.1}, {0.2, 0.6, 0.4}}), DomainError);
  EXPECT_THROW(class_prob_from_attributes(s, {{0.3, -0.1, 0.1}, {0.2, 0.6, 0.4}}), DomainError);
  EXPECT_THROW(class_prob_from_attributes(s, {{0.3, 0.9}, {0.2, 0.6, 0.4}}), ShapeError);
}

TEST(ClassProb, OnesAndZeros) {
  const auto s = diving();
  Rng rng(5);
  for (std::size_t c = 0; c < s.category_count(); c += 7) {
    std::vector<std::vector<double>> p;
    for (auto n : s.attribute_counts()) {
      std::vector<double> v(n);
      for (auto& x : v) x = rng.uniform();
      p.push_back(v);
    }
    const auto t = s.local_targets(c);
    for (std::size_t q = 0; q < t.size(); ++q) p[q][t[q]] = 1.0;
    EXPECT_DOUBLE_EQ(class_prob_from_attributes(s, p)[c], 1.0);
    p[c % t.size()][t[c % t.size()]] = 0.0;
    EXPECT_DOUBLE_EQ(class_prob_from_attributes(s, p)[c], 0.0);
  }
}

TEST(ClassProb, Monotone) {
  const auto s = diving();
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<double>> p;
    for (auto n : s.attribute_counts()) {
      std::vector<double> v(n);
      for (auto& x : v) x = rng.uniform();
      p.push_back(v);
    }
    const std::size_t c = rng.index(s.category_count());
    const std::size_t q = rng.index(s.query_count());
    const auto before = class_prob_from_attributes(s, p)[c];
    auto& slot = p[q][s.local_targets(c)[q]];
    slot = rng.uniform(slot, 1.0);
    EXPECT_GE(class_prob_from_attributes(s, p)[c], before);
  }
}

namespace {

std::size_t recursive_edit(const std::vector<int>& a, const std::vector<int>& b, std::size_t i, std::size_t j,
                           std::map<std::pair<std::size_t, std::size_t>, std::size_t>& memo) {
  if (i == a.size()) return b.size() - j;
  if (j == b.size()) return a.size() - i;
  const auto key = std::make_pair(i, j);
  if (auto it = memo.find(key); it != memo.end()) return it->second;
  std::size_t best = recursive_edit(a, b, i + 1, j + 1, memo) + (a[i] == b[j] ? 0 : 1);
  best = std::min(best, recursive_edit(a, b, i + 1, j, memo) + 1);
  best = std::min(best, recursive_edit(a, b, i, j + 1, memo) + 1);
  memo[key] = best;
  return best;
}

std::vector<int> random_tokens(Rng& rng, std::size_t max_len) {
  std::vector<int> v(rng.index(max_len + 1));
  for (auto& x : v) x = static_cast<int>(rng.index(4));
  return v;
}

}  // namespace

TEST(EditDistance, Basics) {
  const std::vector<int> a{1, 7, 14, 24};
  EXPECT_EQ(edit_distance(a, a), 0u);
  EXPECT_EQ(edit_distance({}, a), 4u);
  EXPECT_EQ(edit_distance(a, {}), 4u);
  EXPECT_EQ(edit_distance(std::vector<int>{1, 2, 3}, std::vector<int>{2, 3, 4}), 2u);
}

TEST(EditDistance, MatchesRecursiveOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto a = random_tokens(rng, 6);
    const auto b = random_tokens(rng, 6);
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
    ASSERT_EQ(edit_distance(a, b), recursive_edit(a, b, 0, 0, memo));
  }
}

TEST(EditDistance, MetricProperties) {
  Rng rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto a = random_tokens(rng, 6);
    const auto b = random_tokens(rng, 6);
    const auto c = random_tokens(rng, 6);
    EXPECT_EQ(edit_distance(a, b), edit_distance(b, a));
    EXPECT_LE(edit_distance(a, c), edit_distance(a, b) + edit_distance(b, c));
    EXPECT_EQ(edit_distance(a, b) == 0, a == b);
  }
}

TEST(SequenceClass, ExactAndNearMatches) {
  const auto s = diving();
  for (std::size_t c = 0; c < s.category_count(); ++c) {
    const auto m = class_from_sequence(s, s.category_to_attributes(c));
    EXPECT_EQ(m.class_index, c);
    EXPECT_EQ(m.distance, 0u);
  }
  // Class 0 with its somersault token corrupted.
  const std::vector<int> decoded{1, 12, 14, 24};
  for (std::size_t c = 1; c < s.category_count(); ++c) {
    ASSERT_GE(edit_distance(decoded, s.category_to_attributes(c)), 2u) << c;
  }
  const auto m = class_from_sequence(s, decoded);
  EXPECT_EQ(m.class_index, 0u);
  EXPECT_EQ(m.distance, 1u);
}

TEST(SequenceClass, TiesGoToLowestIndex) {
  const auto s = toy({{2, 4}, {1, 3}, {1, 4}});
  // (1, 0) is one substitution from both class 1 and class 2.
  const std::vector<int> decoded{1, 0};
  EXPECT_EQ(edit_distance(decoded, s.category_to_attributes(1)), 1u);
  EXPECT_EQ(edit_distance(decoded, s.category_to_attributes(2)), 1u);
  EXPECT_EQ(edit_distance(decoded, s.category_to_attributes(0)), 2u);
  EXPECT_EQ(class_from_sequence(s, decoded).class_index, 1u);
  EXPECT_THROW(class_from_sequence(FactorizationSchema(), decoded), SchemaError);
}
