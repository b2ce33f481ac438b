#pragma once

// Synthetic untrimmed sequences. Each sequence draws a category uniformly,
// plants one short event per non-null attribute of its tuple at a random
// non-overlapping clip span, and fills everything else with noise. Events
// are fixed random frame templates per (query, attribute).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tqn/factorization.hpp"
#include "tqn/io.hpp"
#include "tqn/nn.hpp"
#include "tqn/rng.hpp"

namespace tqn {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GeneratorConfig {
  std::size_t train_count = 2000;
  std::size_t test_count = 500;
  std::size_t min_clips = 10;
  std::size_t max_clips = 40;
  std::size_t min_span = 1;
  std::size_t max_span = 3;
  std::size_t clip_len = 4;
  std::size_t input_dim = 16;
  double snr = 0.5;  // template RMS relative to unit noise
  std::uint64_t seed = 0;

  void validate(const FactorizationSchema& schema) const {
    if (min_clips < 1 || max_clips < min_clips) throw ConfigError("generator: need 1 <= min_clips <= max_clips");
    if (min_span < 1 || max_span < min_span) throw ConfigError("generator: need 1 <= min_span <= max_span");
    if (clip_len < 1 || input_dim < 1) throw ConfigError("generator: clip_len and input_dim must be positive");
    if (!(snr >= 0.0) || !std::isfinite(snr)) throw ConfigError("generator: snr must be finite and >= 0");
    if (min_clips < max_span * schema.query_count()) {
      throw ConfigError("generator: min_clips " + std::to_string(min_clips) + " cannot hold " +
                        std::to_string(schema.query_count()) + " events of up to " + std::to_string(max_span) + " clips");
    }
  }
};

inline json to_json(const GeneratorConfig& c) {
  return {{"train_count", c.train_count}, {"test_count", c.test_count}, {"min_clips", c.min_clips},
          {"max_clips", c.max_clips},     {"min_span", c.min_span},     {"max_span", c.max_span},
          {"clip_len", c.clip_len},       {"input_dim", c.input_dim},   {"snr", c.snr},
          {"seed", c.seed}};
}

inline GeneratorConfig generator_from_json(const json& j) {
  GeneratorConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    if (k == "train_count") c.train_count = it->get<std::size_t>();
    else if (k == "test_count") c.test_count = it->get<std::size_t>();
    else if (k == "min_clips") c.min_clips = it->get<std::size_t>();
    else if (k == "max_clips") c.max_clips = it->get<std::size_t>();
    else if (k == "min_span") c.min_span = it->get<std::size_t>();
    else if (k == "max_span") c.max_span = it->get<std::size_t>();
    else if (k == "clip_len") c.clip_len = it->get<std::size_t>();
    else if (k == "input_dim") c.input_dim = it->get<std::size_t>();
    else if (k == "snr") c.snr = it->get<double>();
    else if (k == "seed") c.seed = it->get<std::uint64_t>();
    else throw ConfigError("generator: unknown key '" + k + "'");
  }
  return c;
}

struct PlantedEvent {
  std::size_t query = 0;
  int attribute_id = 0;
  std::size_t start = 0;  // clip index, inclusive
  std::size_t end = 0;    // clip index, exclusive
};

enum class Split { train, test };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }

struct SyntheticSequence {
  std::size_t id = 0;
  Split split = Split::train;
  std::size_t class_index = 0;
  std::size_t clips = 0;
  std::vector<double> frames;  // (clips * clip_len) x input_dim, row-major
  std::vector<PlantedEvent> events;

  const PlantedEvent* event_for(std::size_t query) const {
    for (const auto& e : events) {
      if (e.query == query) return &e;
    }
    return nullptr;
  }
};

struct SyntheticDataset {
  GeneratorConfig config;
  std::string schema_name;
  std::vector<SyntheticSequence> train;
  std::vector<SyntheticSequence> test;

  const std::vector<SyntheticSequence>& split(Split s) const { return s == Split::train ? train : test; }

  Tensor frames(const SyntheticSequence& s) const {
    return Tensor({s.clips * config.clip_len, config.input_dim}, s.frames);
  }
};

// Template for (query, local attribute index): clip_len x input_dim, unit
// RMS before scaling by snr.
inline std::vector<double> event_template(const GeneratorConfig& c, std::size_t query, std::size_t local) {
  Rng rng = Rng::stream(c.seed, StreamTag::templates, {query, local});
  std::vector<double> t(c.clip_len * c.input_dim);
  double ss = 0.0;
  for (auto& v : t) {
    v = rng.normal(0.0, 1.0);
    ss += v * v;
  }
  const double scale = c.snr / std::sqrt(ss / static_cast<double>(t.size()));
  for (auto& v : t) v *= scale;
  return t;
}

// Uniform placement of spans without overlap: choose the slot positions of
// the events among (free clips + events) slots, in a random event order.
inline std::vector<std::pair<std::size_t, std::size_t>> place_spans(const std::vector<std::size_t>& spans,
                                                                    std::size_t clips, Rng& rng) {
  std::size_t used = 0;
  for (auto s : spans) used += s;
  if (used > clips) throw ConfigError("generator: events do not fit the sequence");
  const std::size_t free = clips - used;
  const std::size_t n = spans.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  // n distinct slots out of free + n, sorted.
  std::vector<std::size_t> pool(free + n);
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  for (std::size_t i = 0; i < n; ++i) std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
  std::vector<std::size_t> slots(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n));
  std::sort(slots.begin(), slots.end());
  std::vector<std::pair<std::size_t, std::size_t>> out(n);
  std::size_t consumed = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t e = order[k];
    const std::size_t start = slots[k] - k + consumed;
    out[e] = {start, start + spans[e]};
    consumed += spans[e];
  }
  return out;
}

inline SyntheticSequence generate_sequence(const GeneratorConfig& c, const FactorizationSchema& schema,
                                           const std::vector<std::vector<std::vector<double>>>& templates, Split split,
                                           std::size_t index, std::size_t id) {
  Rng rng = Rng::stream(c.seed, StreamTag::data, {split == Split::train ? 0u : 1u, index});
  SyntheticSequence s;
  s.id = id;
  s.split = split;
  s.class_index = rng.index(schema.category_count());
  s.clips = rng.between(c.min_clips, c.max_clips);
  const auto targets = schema.local_targets(s.class_index);
  std::vector<std::size_t> queries, spans;
  for (std::size_t q = 0; q < targets.size(); ++q) {
    if (targets[q] == 0) continue;
    queries.push_back(q);
    spans.push_back(rng.between(c.min_span, c.max_span));
  }
  const auto placed = place_spans(spans, s.clips, rng);
  const std::size_t width = c.clip_len * c.input_dim;
  s.frames.resize(s.clips * width);
  for (auto& v : s.frames) v = rng.normal(0.0, 1.0);
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const std::size_t q = queries[i];
    const auto& tpl = templates[q][targets[q]];
    for (std::size_t clip = placed[i].first; clip < placed[i].second; ++clip) {
      for (std::size_t j = 0; j < width; ++j) s.frames[clip * width + j] += tpl[j];
    }
    s.events.push_back({q, schema.attribute_id(q, targets[q]), placed[i].first, placed[i].second});
  }
  return s;
}

inline std::vector<std::vector<std::vector<double>>> all_templates(const GeneratorConfig& c,
                                                                   const FactorizationSchema& schema) {
  std::vector<std::vector<std::vector<double>>> t(schema.query_count());
  for (std::size_t q = 0; q < schema.query_count(); ++q) {
    t[q].resize(schema.queries()[q].size());
    for (std::size_t a = 1; a < schema.queries()[q].size(); ++a) t[q][a] = event_template(c, q, a);
  }
  return t;
}

inline SyntheticDataset gen_dataset(const GeneratorConfig& config, const FactorizationSchema& schema,
                                    const std::string& schema_name = "") {
  config.validate(schema);
  SyntheticDataset d;
  d.config = config;
  d.schema_name = schema_name;
  const auto templates = all_templates(config, schema);
  for (std::size_t i = 0; i < config.train_count; ++i) {
    d.train.push_back(generate_sequence(config, schema, templates, Split::train, i, i));
  }
  for (std::size_t i = 0; i < config.test_count; ++i) {
    d.test.push_back(generate_sequence(config, schema, templates, Split::test, i, config.train_count + i));
  }
  return d;
}

inline std::string dataset_bytes(const SyntheticDataset& d) {
  ContainerWriter w;
  w.meta()["kind"] = "dataset";
  w.meta()["generator"] = to_json(d.config);
  w.meta()["schema"] = d.schema_name;
  for (Split split : {Split::train, Split::test}) {
    json rows = json::array();
    std::vector<double> frames;
    for (const auto& s : d.split(split)) {
      json events = json::array();
      for (const auto& e : s.events) events.push_back({e.query, e.attribute_id, e.start, e.end});
      rows.push_back({{"id", s.id}, {"class", s.class_index}, {"clips", s.clips}, {"events", events}});
      frames.insert(frames.end(), s.frames.begin(), s.frames.end());
    }
    w.meta()[split_name(split)] = rows;
    w.add(std::string(split_name(split)) + ".frames", {frames.size()}, frames);
  }
  return w.bytes();
}

inline void save_dataset(const SyntheticDataset& d, const std::filesystem::path& path) {
  write_file_atomic(path, dataset_bytes(d));
}

inline SyntheticDataset load_dataset(const std::filesystem::path& path) {
  SyntheticDataset d;
  try {
    const auto r = ContainerReader::load(path);
    if (r.meta().value("kind", "") != "dataset") throw DataError(path.string() + ": not a dataset file");
    d.config = generator_from_json(r.meta().at("generator"));
    d.schema_name = r.meta().value("schema", "");
    const std::size_t width = d.config.clip_len * d.config.input_dim;
    for (Split split : {Split::train, Split::test}) {
      const auto frames = r.f64(std::string(split_name(split)) + ".frames");
      std::size_t offset = 0;
      auto& out = split == Split::train ? d.train : d.test;
      for (const auto& row : r.meta().at(split_name(split))) {
        SyntheticSequence s;
        s.id = row.at("id").get<std::size_t>();
        s.split = split;
        s.class_index = row.at("class").get<std::size_t>();
        s.clips = row.at("clips").get<std::size_t>();
        const std::size_t n = s.clips * width;
        if (offset + n > frames.size()) throw DataError(path.string() + ": frame payload truncated");
        s.frames.assign(frames.begin() + static_cast<std::ptrdiff_t>(offset),
                        frames.begin() + static_cast<std::ptrdiff_t>(offset + n));
        offset += n;
        for (const auto& e : row.at("events")) {
          s.events.push_back({e.at(0).get<std::size_t>(), e.at(1).get<int>(), e.at(2).get<std::size_t>(),
                              e.at(3).get<std::size_t>()});
        }
        out.push_back(std::move(s));
      }
      if (offset != frames.size()) throw DataError(path.string() + ": frame payload has trailing data");
    }
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": malformed dataset header: " + e.what());
  } catch (const IoError& e) {
    throw DataError(e.what());
  }
  return d;
}

// Checks dataset annotations against the schema: event count and ids match
// the class tuple, spans are disjoint and inside the sequence.
inline void check_dataset(const SyntheticDataset& d, const FactorizationSchema& schema) {
  for (Split split : {Split::train, Split::test}) {
    for (const auto& s : d.split(split)) {
      if (s.class_index >= schema.category_count()) throw DataError("sequence " + std::to_string(s.id) + ": class out of range");
      AttributeTuple tuple(schema.query_count(), kNullAttribute);
      std::vector<bool> covered(s.clips, false);
      for (const auto& e : s.events) {
        if (e.query >= schema.query_count() || e.start >= e.end || e.end > s.clips) {
          throw DataError("sequence " + std::to_string(s.id) + ": malformed event");
        }
        if (tuple[e.query] != kNullAttribute) throw DataError("sequence " + std::to_string(s.id) + ": repeated query event");
        tuple[e.query] = e.attribute_id;
        for (std::size_t c = e.start; c < e.end; ++c) {
          if (covered[c]) throw DataError("sequence " + std::to_string(s.id) + ": overlapping events");
          covered[c] = true;
        }
      }
      if (schema.attributes_to_category(tuple) != std::optional<std::size_t>(s.class_index)) {
        throw DataError("sequence " + std::to_string(s.id) + ": events disagree with class");
      }
      if (s.frames.size() != s.clips * d.config.clip_len * d.config.input_dim) {
        throw DataError("sequence " + std::to_string(s.id) + ": frame count mismatch");
      }
    }
  }
}

// Accuracy of a softmax-regression probe that names the attribute of a
// single event clip (all non-null attributes of all queries as classes).
// Used to calibrate snr.
inline double single_clip_probe_accuracy(const GeneratorConfig& c, const FactorizationSchema& schema,
                                         std::size_t per_class_train, std::size_t per_class_test, std::size_t epochs = 200) {
  const auto templates = all_templates(c, schema);
  std::vector<std::vector<double>> protos;
  for (std::size_t q = 0; q < schema.query_count(); ++q) {
    for (std::size_t a = 1; a < templates[q].size(); ++a) protos.push_back(templates[q][a]);
  }
  const std::size_t classes = protos.size();
  const std::size_t width = c.clip_len * c.input_dim;
  auto draw = [&](std::size_t per_class, std::uint64_t split) {
    Rng rng = Rng::stream(c.seed, StreamTag::probe, {split});
    std::vector<double> x;
    std::vector<std::size_t> y;
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t k = 0; k < classes; ++k) {
        for (std::size_t j = 0; j < width; ++j) x.push_back(protos[k][j] + rng.normal(0.0, 1.0));
        y.push_back(k);
      }
    }
    return std::make_pair(Tensor({y.size(), width}, x), y);
  };
  const auto [xtr, ytr] = draw(per_class_train, 0);
  const auto [xte, yte] = draw(per_class_test, 1);
  Tensor w = Tensor::zeros({width, classes}, true);
  Tensor b = Tensor::zeros({classes}, true);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    w.zero_grad();
    b.zero_grad();
    {
      ComputationRecord record;
      Recording guard(&record);
      const Tensor logits = add_bias(matmul(xtr, w), b);
      std::vector<Tensor> terms;
      for (std::size_t i = 0; i < ytr.size(); ++i) terms.push_back(cross_entropy(slice_rows(logits, i, 1), ytr[i]));
      record.backward(scale(add_all(terms), 1.0 / static_cast<double>(ytr.size())));
    }
    for (auto* p : {&w, &b}) {
      auto v = p->mutable_values();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.5 * p->grad()[i];
    }
  }
  const Tensor logits = add_bias(matmul(xte, w), b);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < yte.size(); ++i) {
    correct += argmax(logits.values().subspan(i * classes, classes)) == yte[i];
  }
  return static_cast<double>(correct) / static_cast<double>(yte.size());
}

}  // namespace tqn
