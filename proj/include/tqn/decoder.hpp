#pragma once

// Temporal query network: learnt query embeddings refined by a stack of
// non-autoregressive decoder layers that attend over clip features, then
// one linear classifier per query.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "tqn/factorization.hpp"
#include "tqn/nn.hpp"
#include "tqn/ops.hpp"
#include "tqn/rng.hpp"

namespace tqn {

struct TqnConfig {
  std::size_t feature_dim = 32;  // d, clip feature width
  std::size_t model_dim = 32;    // d_q, query and response width
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ff_dim = 64;
  double dropout_decoder = 0.1;
  double dropout_output = 0.5;
  std::vector<std::size_t> attribute_counts;  // n_i, one per query
  std::vector<std::string> query_names;
  bool global_query = false;  // the last query classifies whole categories

  std::size_t query_count() const { return attribute_counts.size(); }

  void validate() const {
    if (attribute_counts.empty()) throw ConfigError("tqn: at least one query required");
    if (!query_names.empty() && query_names.size() != attribute_counts.size()) {
      throw ConfigError("tqn: query_names must match attribute_counts");
    }
    for (auto n : attribute_counts) {
      if (n < 1) throw ConfigError("tqn: every query needs at least one output");
    }
    if (layers < 1) throw ConfigError("tqn: layers must be >= 1");
    if (heads < 1) throw ConfigError("tqn: heads must be >= 1");
    if (feature_dim < 1 || model_dim < 1 || ff_dim < 1) throw ConfigError("tqn: dimensions must be positive");
    if (model_dim % heads != 0) {
      throw ConfigError("tqn: model_dim " + std::to_string(model_dim) + " not divisible by heads " + std::to_string(heads));
    }
    for (double r : {dropout_decoder, dropout_output}) {
      if (!(r >= 0.0 && r < 1.0)) throw ConfigError("tqn: dropout rates must lie in [0,1)");
    }
  }

  // Factorized queries of the schema, plus a global query over all
  // categories appended last when requested.
  static TqnConfig for_schema(const FactorizationSchema& schema, bool with_global) {
    TqnConfig c;
    for (const auto& q : schema.queries()) {
      c.attribute_counts.push_back(q.size());
      c.query_names.push_back(q.name);
    }
    if (with_global) {
      c.attribute_counts.push_back(schema.category_count());
      c.query_names.push_back("global");
      c.global_query = true;
    }
    return c;
  }
};

struct TqnModel {
  TqnConfig config;
  ParameterSet params;
  Tensor queries;  // K x d_q
  std::vector<DecoderLayer> layers;
  std::vector<Linear> heads;
};

inline TqnModel init_model(const TqnConfig& config, Rng& rng) {
  config.validate();
  TqnModel m;
  m.config = config;
  const std::size_t k = config.query_count();
  std::vector<double> q(k * config.model_dim);
  for (auto& v : q) v = rng.normal(0.0, 0.02);
  m.queries = m.params.add("tqn.queries", Tensor({k, config.model_dim}, std::move(q)));
  for (std::size_t l = 0; l < config.layers; ++l) {
    m.layers.push_back(DecoderLayer::create(m.params, "tqn.layer" + std::to_string(l), config.model_dim,
                                            config.feature_dim, config.heads, config.ff_dim, config.dropout_decoder,
                                            rng));
  }
  for (std::size_t i = 0; i < k; ++i) {
    m.heads.push_back(Linear::create(m.params, "tqn.head" + std::to_string(i), config.model_dim,
                                     config.attribute_counts[i], rng));
  }
  return m;
}

inline void require_sequence(const Tensor& features, std::size_t feature_dim, const char* where) {
  if (!features.defined() || features.rank() != 2) throw ShapeError(std::string(where) + ": features must be t x d");
  if (features.cols() != feature_dim) {
    throw ShapeError(std::string(where) + ": feature width " + std::to_string(features.cols()) + ", expected " +
                     std::to_string(feature_dim));
  }
}

// One decoder layer. The returned cross-attention weights are per head,
// each K x t.
inline DecoderLayerOutput decoder_layer_forward(const DecoderLayer& layer, const Tensor& previous,
                                                const Tensor& features, const ForwardMode& mode) {
  if (!features.defined() || features.rank() != 2) throw ShapeError("decoder layer: empty or non-matrix sequence");
  return layer(previous, features, mode);
}

struct AttentionMap {
  std::size_t queries = 0;
  std::size_t clips = 0;
  std::vector<std::vector<std::vector<double>>> weights;  // [layer][head] -> K x t row-major
  std::vector<double> aggregate;                          // K x t, mean over layers and heads
  std::vector<double> profile;                            // t, mean of aggregate rows

  double at(std::size_t query, std::size_t clip) const { return aggregate[query * clips + clip]; }
  std::span<const double> row(std::size_t query) const {
    return std::span<const double>(aggregate).subspan(query * clips, clips);
  }
};

inline AttentionMap make_attention_map(const std::vector<std::vector<Tensor>>& per_layer) {
  AttentionMap map;
  if (per_layer.empty() || per_layer.front().empty()) return map;
  map.queries = per_layer.front().front().rows();
  map.clips = per_layer.front().front().cols();
  map.aggregate.assign(map.queries * map.clips, 0.0);
  std::size_t count = 0;
  for (const auto& heads : per_layer) {
    auto& layer_out = map.weights.emplace_back();
    for (const auto& w : heads) {
      layer_out.emplace_back(w.values().begin(), w.values().end());
      for (std::size_t i = 0; i < map.aggregate.size(); ++i) map.aggregate[i] += w[i];
      ++count;
    }
  }
  for (auto& v : map.aggregate) v /= static_cast<double>(count);
  map.profile.assign(map.clips, 0.0);
  for (std::size_t q = 0; q < map.queries; ++q) {
    for (std::size_t c = 0; c < map.clips; ++c) map.profile[c] += map.at(q, c);
  }
  for (auto& v : map.profile) v /= static_cast<double>(map.queries);
  return map;
}

struct TqnOutput {
  Tensor responses;  // K x d_q
  std::vector<std::vector<Tensor>> cross_weights;
};

inline TqnOutput tqn_forward(const TqnModel& model, const Tensor& features, const ForwardMode& mode) {
  require_sequence(features, model.config.feature_dim, "tqn_forward");
  TqnOutput out;
  Tensor r = model.queries;
  for (const auto& layer : model.layers) {
    auto step = decoder_layer_forward(layer, r, features, mode);
    r = step.output;
    out.cross_weights.push_back(std::move(step.cross_weights));
  }
  out.responses = dropout(r, model.config.dropout_output, mode.train, mode.rng);
  return out;
}

// Linear logits per query, each 1 x n_i. No softmax.
inline std::vector<Tensor> classify_responses(const TqnModel& model, const Tensor& responses) {
  if (responses.rank() != 2 || responses.rows() != model.config.query_count() ||
      responses.cols() != model.config.model_dim) {
    throw ShapeError("classify_responses: responses must be K x d_q");
  }
  std::vector<Tensor> logits;
  logits.reserve(model.heads.size());
  for (std::size_t i = 0; i < model.heads.size(); ++i) logits.push_back(model.heads[i](slice_rows(responses, i, 1)));
  return logits;
}

// Unweighted sum of the per-query cross-entropies.
inline Tensor multi_task_loss(const std::vector<Tensor>& logits, const std::vector<std::size_t>& targets) {
  if (logits.size() != targets.size()) throw ShapeError("multi_task_loss: one target per query required");
  if (logits.empty()) throw ShapeError("multi_task_loss: no queries");
  std::vector<Tensor> terms;
  terms.reserve(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) terms.push_back(cross_entropy(logits[i], targets[i]));
  return terms.size() == 1 ? terms.front() : add_all(terms);
}

// Per-query targets for a class: local attribute indices, plus the class
// itself for the global query.
inline std::vector<std::size_t> query_targets(const TqnConfig& config, const FactorizationSchema& schema,
                                              std::size_t class_index) {
  auto targets = schema.local_targets(class_index);
  if (config.global_query) targets.push_back(class_index);
  if (targets.size() != config.query_count()) throw ConfigError("query_targets: model and schema disagree on K");
  return targets;
}

inline std::size_t predict_from_logits(const TqnModel& model, const std::vector<Tensor>& logits) {
  if (!model.config.global_query) throw ConfigError("predict_category: model has no global query");
  return argmax(logits.back().values());
}

inline std::size_t predict_category(const TqnModel& model, const Tensor& features, const FactorizationSchema& schema) {
  if (!model.config.global_query) throw ConfigError("predict_category: model has no global query");
  if (model.config.attribute_counts.back() != schema.category_count()) {
    throw ConfigError("predict_category: global head size does not match the category count");
  }
  NoRecording guard;
  const auto out = tqn_forward(model, features, ForwardMode{});
  return predict_from_logits(model, classify_responses(model, out.responses));
}

inline AttentionMap extract_attention(const TqnModel& model, const Tensor& features) {
  NoRecording guard;
  return make_attention_map(tqn_forward(model, features, ForwardMode{}).cross_weights);
}

}  // namespace tqn
