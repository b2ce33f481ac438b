#pragma once

// Accuracy, per-query confusion, prediction export and attention-based
// localization.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tqn/csv.hpp"
#include "tqn/synth.hpp"
#include "tqn/variants.hpp"

namespace tqn {

struct SamplePrediction {
  std::size_t sequence_id = 0;
  std::size_t true_class = 0;
  std::size_t pred_class = 0;
  std::vector<int> true_attributes;
  std::vector<int> pred_attributes;
  std::size_t clips = 0;
};

struct EvalResult {
  std::size_t count = 0;
  double per_video = 0.0;  // fraction of sequences classified correctly
  double per_class = 0.0;  // unweighted mean of per-class recall over classes present
  // Per query: rows are true local attribute indices, columns predicted
  // ones, plus a final column for predictions outside the attribute set.
  std::vector<std::vector<std::vector<std::size_t>>> confusion;
  std::vector<SamplePrediction> predictions;
};

inline EvalResult metrics_from_predictions(const std::vector<SamplePrediction>& preds, const FactorizationSchema& schema) {
  if (preds.empty()) throw DataError("evaluate: empty split");
  EvalResult r;
  r.count = preds.size();
  r.predictions = preds;
  std::vector<std::size_t> seen(schema.category_count(), 0), hit(schema.category_count(), 0);
  std::size_t correct = 0;
  const auto counts = schema.attribute_counts();
  r.confusion.resize(counts.size());
  for (std::size_t q = 0; q < counts.size(); ++q) r.confusion[q].assign(counts[q], std::vector<std::size_t>(counts[q] + 1, 0));
  for (const auto& p : preds) {
    if (p.true_class >= schema.category_count()) throw DataError("evaluate: class out of range");
    ++seen[p.true_class];
    if (p.pred_class == p.true_class) {
      ++correct;
      ++hit[p.true_class];
    }
    for (std::size_t q = 0; q < counts.size(); ++q) {
      const auto t = schema.queries()[q].local_index(p.true_attributes.at(q));
      if (!t) throw DataError("evaluate: true attribute outside its query");
      const int pred = q < p.pred_attributes.size() ? p.pred_attributes[q] : -1;
      const auto pl = schema.queries()[q].local_index(pred);
      ++r.confusion[q][*t][pl ? *pl : counts[q]];
    }
  }
  r.per_video = static_cast<double>(correct) / static_cast<double>(preds.size());
  double sum = 0.0;
  std::size_t classes = 0;
  for (std::size_t c = 0; c < seen.size(); ++c) {
    if (seen[c] == 0) continue;
    sum += static_cast<double>(hit[c]) / static_cast<double>(seen[c]);
    ++classes;
  }
  r.per_class = sum / static_cast<double>(classes);
  return r;
}

inline SamplePrediction predict_sequence(const SequenceModel& model, const SyntheticDataset& data,
                                         const SyntheticSequence& s, const FactorizationSchema& schema) {
  NoRecording guard;
  const Tensor features = model.encoder(data.frames(s));
  const auto p = model.head->predict(features);
  const auto& t = schema.category_to_attributes(s.class_index);
  return {s.id, s.class_index, p.class_index, {t.begin(), t.end()}, p.attributes, s.clips};
}

// Features are computed fully online; no bank is involved at evaluation.
inline EvalResult evaluate(const SequenceModel& model, const SyntheticDataset& data, Split split,
                           const FactorizationSchema& schema) {
  std::vector<SamplePrediction> preds;
  for (const auto& s : data.split(split)) preds.push_back(predict_sequence(model, data, s, schema));
  return metrics_from_predictions(preds, schema);
}

namespace detail {

inline std::string join_ids(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ';';
    out += std::to_string(v[i]);
  }
  return out;
}

inline std::vector<int> split_ids(const std::string& s) {
  std::vector<int> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ';')) out.push_back(std::stoi(tok));
  return out;
}

}  // namespace detail

inline const csv::Row kPredictionHeader{"sequence_id", "true_class", "pred_class", "per_query_true", "per_query_pred"};

inline void write_predictions_csv(const std::filesystem::path& path, const std::vector<SamplePrediction>& preds) {
  std::string text = csv::format_row(kPredictionHeader);
  for (const auto& p : preds) {
    text += csv::format_row({std::to_string(p.sequence_id), std::to_string(p.true_class), std::to_string(p.pred_class),
                             detail::join_ids(p.true_attributes), detail::join_ids(p.pred_attributes)});
  }
  write_file_atomic(path, text);
}

inline std::vector<SamplePrediction> read_predictions_csv(const std::filesystem::path& path) {
  const auto rows = csv::read_file(path.string());
  if (rows.empty() || rows[0] != kPredictionHeader) throw DataError(path.string() + ": unexpected prediction header");
  std::vector<SamplePrediction> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() != 5) throw DataError(path.string() + ": malformed row " + std::to_string(i + 1));
    SamplePrediction p;
    p.sequence_id = std::stoul(r[0]);
    p.true_class = std::stoul(r[1]);
    p.pred_class = std::stoul(r[2]);
    p.true_attributes = detail::split_ids(r[3]);
    p.pred_attributes = detail::split_ids(r[4]);
    out.push_back(std::move(p));
  }
  return out;
}

struct LocalizationResult {
  double score = 0.0;   // fraction of events whose peak clip lies in the planted span
  double chance = 0.0;  // mean of span / t_v over the same events
  std::size_t events = 0;
  std::vector<double> per_query_score;
  std::vector<std::size_t> per_query_events;
};

// rows[i][q] is the attention distribution of query q over the clips of
// sequence i. Peak clip is the lowest index among ties.
inline LocalizationResult localization_from_attention(const std::vector<SyntheticSequence>& sequences,
                                                      const std::vector<std::vector<std::vector<double>>>& rows,
                                                      std::size_t queries) {
  LocalizationResult r;
  r.per_query_score.assign(queries, 0.0);
  r.per_query_events.assign(queries, 0);
  double hits = 0.0, chance = 0.0;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    for (const auto& e : sequences[i].events) {
      if (e.query >= queries) continue;
      const std::size_t peak = argmax(rows[i][e.query]);
      const bool hit = peak >= e.start && peak < e.end;
      hits += hit;
      chance += static_cast<double>(e.end - e.start) / static_cast<double>(sequences[i].clips);
      r.per_query_score[e.query] += hit;
      ++r.per_query_events[e.query];
      ++r.events;
    }
  }
  if (r.events == 0) throw DataError("localization: no planted events");
  r.score = hits / static_cast<double>(r.events);
  r.chance = chance / static_cast<double>(r.events);
  for (std::size_t q = 0; q < queries; ++q) {
    if (r.per_query_events[q] > 0) r.per_query_score[q] /= static_cast<double>(r.per_query_events[q]);
  }
  return r;
}

inline AttentionMap sequence_attention(const SequenceModel& model, const SyntheticDataset& data,
                                       const SyntheticSequence& s) {
  const auto* head = dynamic_cast<const TqnHead*>(model.head.get());
  if (head == nullptr) throw ConfigError("attention export needs a tqn model");
  NoRecording guard;
  return head->attention(model.encoder(data.frames(s)));
}

inline LocalizationResult localization_score(const SequenceModel& model, const SyntheticDataset& data, Split split,
                                             const FactorizationSchema& schema) {
  const auto& seqs = data.split(split);
  std::vector<std::vector<std::vector<double>>> rows;
  for (const auto& s : seqs) {
    const auto map = sequence_attention(model, data, s);
    auto& per = rows.emplace_back();
    for (std::size_t q = 0; q < schema.query_count(); ++q) per.emplace_back(map.row(q).begin(), map.row(q).end());
  }
  return localization_from_attention(seqs, rows, schema.query_count());
}

// Accuracy over the shortest, middle and longest thirds of a prediction
// list ranked by clip count (ties broken by sequence id).
inline std::vector<double> tercile_accuracy(std::vector<SamplePrediction> preds) {
  if (preds.size() < 3) throw DataError("tercile_accuracy: need at least three predictions");
  std::sort(preds.begin(), preds.end(), [](const SamplePrediction& a, const SamplePrediction& b) {
    return a.clips != b.clips ? a.clips < b.clips : a.sequence_id < b.sequence_id;
  });
  std::vector<double> out;
  for (std::size_t k = 0; k < 3; ++k) {
    const std::size_t lo = preds.size() * k / 3, hi = preds.size() * (k + 1) / 3;
    std::size_t correct = 0;
    for (std::size_t i = lo; i < hi; ++i) correct += preds[i].pred_class == preds[i].true_class;
    out.push_back(static_cast<double>(correct) / static_cast<double>(hi - lo));
  }
  return out;
}

}  // namespace tqn
