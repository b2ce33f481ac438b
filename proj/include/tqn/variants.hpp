#pragma once

// The query decoder and four baseline supervision strategies, each a head
// over the shared toy encoder's clip features.

#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "tqn/decoder.hpp"
#include "tqn/encoder.hpp"
#include "tqn/factorization.hpp"
#include "tqn/nn.hpp"

namespace tqn {

enum class Variant { tqn, avgpool, selfattn_cls, multilabel_bce, seq2seq };

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::tqn, Variant::avgpool, Variant::selfattn_cls, Variant::multilabel_bce,
                                      Variant::seq2seq};
  return v;
}

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::tqn: return "tqn";
    case Variant::avgpool: return "avgpool";
    case Variant::selfattn_cls: return "selfattn_cls";
    case Variant::multilabel_bce: return "multilabel_bce";
    case Variant::seq2seq: return "seq2seq";
  }
  return "?";
}

inline Variant parse_variant(const std::string& name) {
  for (auto v : all_variants()) {
    if (variant_name(v) == name) return v;
  }
  throw ConfigError("unknown variant '" + name + "' (expected tqn, avgpool, selfattn_cls, multilabel_bce or seq2seq)");
}

struct HeadConfig {
  std::size_t model_dim = 32;  // query width for tqn, token width for seq2seq
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ff_dim = 64;
  double dropout_decoder = 0.1;
  double dropout_output = 0.5;
};

struct Prediction {
  std::size_t class_index = 0;
  std::vector<int> attributes;  // per query; -1 where the variant emits nothing
};

class Head {
 public:
  virtual ~Head() = default;
  virtual Tensor loss(const Tensor& features, std::size_t class_index, const ForwardMode& mode) const = 0;
  virtual Prediction predict(const Tensor& features) const = 0;
};

namespace detail {

inline std::vector<int> tuple_of(const FactorizationSchema& schema, std::size_t c) {
  const auto& t = schema.category_to_attributes(c);
  return {t.begin(), t.end()};
}

}  // namespace detail

class TqnHead : public Head {
 public:
  TqnHead(ParameterSet& params, const FactorizationSchema& schema, std::size_t feature_dim, const HeadConfig& h,
          Rng& rng)
      : schema_(schema) {
    TqnConfig c = TqnConfig::for_schema(schema, true);
    c.feature_dim = feature_dim;
    c.model_dim = h.model_dim;
    c.layers = h.layers;
    c.heads = h.heads;
    c.ff_dim = h.ff_dim;
    c.dropout_decoder = h.dropout_decoder;
    c.dropout_output = h.dropout_output;
    model_ = init_model(c, rng);
    for (const auto& [name, t] : model_.params.items()) params.add(name, t);
  }

  Tensor loss(const Tensor& features, std::size_t class_index, const ForwardMode& mode) const override {
    const auto out = tqn_forward(model_, features, mode);
    return multi_task_loss(classify_responses(model_, out.responses), query_targets(model_.config, schema_, class_index));
  }

  Prediction predict(const Tensor& features) const override {
    NoRecording guard;
    const auto logits = classify_responses(model_, tqn_forward(model_, features, ForwardMode{}).responses);
    Prediction p;
    p.class_index = predict_from_logits(model_, logits);
    for (std::size_t q = 0; q < schema_.query_count(); ++q) {
      p.attributes.push_back(schema_.attribute_id(q, argmax(logits[q].values())));
    }
    return p;
  }

  std::vector<Tensor> logits(const Tensor& features) const {
    NoRecording guard;
    return classify_responses(model_, tqn_forward(model_, features, ForwardMode{}).responses);
  }

  AttentionMap attention(const Tensor& features) const { return extract_attention(model_, features); }
  const TqnModel& model() const { return model_; }

 private:
  const FactorizationSchema& schema_;
  TqnModel model_;
};

// Mean over clips, dropout, one linear layer over all categories.
class AvgPoolHead : public Head {
 public:
  AvgPoolHead(ParameterSet& params, const FactorizationSchema& schema, std::size_t feature_dim, const HeadConfig& h,
              Rng& rng)
      : schema_(schema), dropout_(h.dropout_output) {
    classifier_ = Linear::create(params, "avgpool.classifier", feature_dim, schema.category_count(), rng);
  }

  Tensor logits(const Tensor& features, const ForwardMode& mode) const {
    return classifier_(dropout(mean_rows(features), dropout_, mode.train, mode.rng));
  }

  Tensor loss(const Tensor& features, std::size_t class_index, const ForwardMode& mode) const override {
    return cross_entropy(logits(features, mode), class_index);
  }

  Prediction predict(const Tensor& features) const override {
    NoRecording guard;
    const auto c = argmax(logits(features, ForwardMode{}).values());
    return {c, detail::tuple_of(schema_, c)};
  }

  const Linear& classifier() const { return classifier_; }

 private:
  const FactorizationSchema& schema_;
  double dropout_;
  Linear classifier_;
};

// Self-attention encoder over [cls; features]; the cls output feeds a
// linear layer with `outputs` logits.
class ClsTrunk {
 public:
  ClsTrunk() = default;
  ClsTrunk(ParameterSet& params, const std::string& name, std::size_t feature_dim, std::size_t outputs,
           const HeadConfig& h, Rng& rng)
      : dropout_(h.dropout_output) {
    std::vector<double> cls(feature_dim);
    for (auto& v : cls) v = rng.normal(0.0, 0.02);
    cls_ = params.add(name + ".cls", Tensor({1, feature_dim}, std::move(cls)));
    for (std::size_t l = 0; l < h.layers; ++l) {
      layers_.push_back(EncoderLayer::create(params, name + ".layer" + std::to_string(l), feature_dim, h.heads,
                                             h.ff_dim, h.dropout_decoder, rng));
    }
    classifier_ = Linear::create(params, name + ".classifier", feature_dim, outputs, rng);
  }

  struct Output {
    Tensor logits;
    Tensor sequence;                       // final (1 + t) x d states
    std::vector<std::vector<Tensor>> weights;  // per layer, per head
  };

  Output forward(const Tensor& features, const ForwardMode& mode) const {
    Output out;
    Tensor h = concat_rows({cls_, features});
    for (const auto& layer : layers_) {
      auto [next, w] = layer(h, mode);
      h = next;
      out.weights.push_back(std::move(w));
    }
    out.sequence = h;
    out.logits = classifier_(dropout(slice_rows(h, 0, 1), dropout_, mode.train, mode.rng));
    return out;
  }

 private:
  double dropout_ = 0.5;
  Tensor cls_;
  std::vector<EncoderLayer> layers_;
  Linear classifier_;
};

class SelfAttnClsHead : public Head {
 public:
  SelfAttnClsHead(ParameterSet& params, const FactorizationSchema& schema, std::size_t feature_dim,
                  const HeadConfig& h, Rng& rng)
      : schema_(schema), trunk_(params, "selfattn", feature_dim, schema.category_count(), h, rng) {}

  Tensor loss(const Tensor& features, std::size_t class_index, const ForwardMode& mode) const override {
    return cross_entropy(trunk_.forward(features, mode).logits, class_index);
  }

  Prediction predict(const Tensor& features) const override {
    NoRecording guard;
    const auto c = argmax(trunk_.forward(features, ForwardMode{}).logits.values());
    return {c, detail::tuple_of(schema_, c)};
  }

  const ClsTrunk& trunk() const { return trunk_; }

 private:
  const FactorizationSchema& schema_;
  ClsTrunk trunk_;
};

// One sigmoid per (query, attribute), concatenated in query order, trained
// against the class tuple as a multi-hot target.
class MultiLabelBceHead : public Head {
 public:
  MultiLabelBceHead(ParameterSet& params, const FactorizationSchema& schema, std::size_t feature_dim,
                    const HeadConfig& h, Rng& rng)
      : schema_(schema) {
    std::size_t total = 0;
    for (auto n : schema.attribute_counts()) {
      offsets_.push_back(total);
      total += n;
    }
    total_ = total;
    trunk_ = ClsTrunk(params, "multilabel", feature_dim, total, h, rng);
  }

  std::vector<double> multi_hot(std::size_t class_index) const {
    std::vector<double> y(total_, 0.0);
    const auto t = schema_.local_targets(class_index);
    for (std::size_t q = 0; q < t.size(); ++q) y[offsets_[q] + t[q]] = 1.0;
    return y;
  }

  Tensor loss(const Tensor& features, std::size_t class_index, const ForwardMode& mode) const override {
    return bce_with_logits(trunk_.forward(features, mode).logits, multi_hot(class_index));
  }

  // Per-query attribute probabilities (sigmoids) in local order.
  std::vector<std::vector<double>> attribute_probabilities(std::span<const double> logits) const {
    std::vector<std::vector<double>> p;
    const auto counts = schema_.attribute_counts();
    for (std::size_t q = 0; q < counts.size(); ++q) {
      auto& row = p.emplace_back();
      for (std::size_t a = 0; a < counts[q]; ++a) row.push_back(sigmoid_scalar(logits[offsets_[q] + a]));
    }
    return p;
  }

  Prediction predict_from_logits(std::span<const double> logits) const {
    const auto p = attribute_probabilities(logits);
    Prediction out;
    out.class_index = argmax(class_prob_from_attributes(schema_, p));
    for (std::size_t q = 0; q < p.size(); ++q) out.attributes.push_back(schema_.attribute_id(q, argmax(p[q])));
    return out;
  }

  Prediction predict(const Tensor& features) const override {
    NoRecording guard;
    return predict_from_logits(trunk_.forward(features, ForwardMode{}).logits.values());
  }

 private:
  const FactorizationSchema& schema_;
  std::vector<std::size_t> offsets_;
  std::size_t total_ = 0;
  ClsTrunk trunk_;
};

// Autoregressive decoder over attribute-id tokens with begin and end
// markers. Output positions carry learnt position embeddings; clip features
// carry none.
class Seq2SeqHead : public Head {
 public:
  Seq2SeqHead(ParameterSet& params, const FactorizationSchema& schema, std::size_t feature_dim, const HeadConfig& h,
              Rng& rng)
      : schema_(schema) {
    int max_id = 0;
    for (const auto& q : schema.queries()) {
      for (const auto& a : q.attributes) max_id = std::max(max_id, a.attribute_id);
    }
    begin_token_ = static_cast<std::size_t>(max_id) + 1;
    end_token_ = begin_token_ + 1;
    vocab_ = end_token_ + 1;
    max_len_ = schema.query_count() + 2;
    auto embed = [&](std::size_t rows) {
      std::vector<double> v(rows * h.model_dim);
      for (auto& x : v) x = rng.normal(0.0, 0.02);
      return Tensor({rows, h.model_dim}, std::move(v));
    };
    tokens_ = params.add("seq2seq.tokens", embed(vocab_));
    positions_ = params.add("seq2seq.positions", embed(max_len_));
    for (std::size_t l = 0; l < h.layers; ++l) {
      layers_.push_back(DecoderLayer::create(params, "seq2seq.layer" + std::to_string(l), h.model_dim, feature_dim,
                                             h.heads, h.ff_dim, h.dropout_decoder, rng));
    }
    classifier_ = Linear::create(params, "seq2seq.classifier", h.model_dim, vocab_, rng);
  }

  std::size_t begin_token() const { return begin_token_; }
  std::size_t end_token() const { return end_token_; }
  std::size_t max_length() const { return max_len_; }

  // Begin marker, the class tuple in query order, end marker.
  std::vector<std::size_t> target_sequence(std::size_t class_index) const {
    std::vector<std::size_t> seq{begin_token_};
    for (int id : schema_.category_to_attributes(class_index)) seq.push_back(static_cast<std::size_t>(id));
    seq.push_back(end_token_);
    return seq;
  }

  // Logits for the next token after each input position: [len x vocab].
  Tensor step_logits(const Tensor& features, const std::vector<std::size_t>& input, const ForwardMode& mode) const {
    if (input.empty() || input.size() > max_len_) throw ShapeError("seq2seq: input length out of range");
    std::vector<std::size_t> pos(input.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
    Tensor h = add(gather_rows(tokens_, input), gather_rows(positions_, pos));
    for (const auto& layer : layers_) h = layer(h, features, mode, true).output;
    return classifier_(h);
  }

  Tensor loss(const Tensor& features, std::size_t class_index, const ForwardMode& mode) const override {
    const auto seq = target_sequence(class_index);
    const std::vector<std::size_t> input(seq.begin(), seq.end() - 1);
    const Tensor logits = step_logits(features, input, mode);
    std::vector<Tensor> terms;
    for (std::size_t i = 0; i < input.size(); ++i) terms.push_back(cross_entropy(slice_rows(logits, i, 1), seq[i + 1]));
    return add_all(terms);
  }

  // Greedy decoding; stops at the end marker or after max_length tokens.
  std::vector<std::size_t> decode(const Tensor& features, bool* truncated = nullptr) const {
    NoRecording guard;
    std::vector<std::size_t> seq{begin_token_};
    std::vector<std::size_t> out;
    if (truncated) *truncated = false;
    while (true) {
      const Tensor logits = step_logits(features, seq, ForwardMode{});
      const std::size_t next = argmax(logits.values().subspan((seq.size() - 1) * vocab_, vocab_));
      if (next == end_token_) break;
      out.push_back(next);
      if (seq.size() == max_len_) {
        if (truncated) *truncated = true;
        break;
      }
      seq.push_back(next);
    }
    return out;
  }

  Prediction predict(const Tensor& features) const override {
    bool truncated = false;
    const auto tokens = decode(features, &truncated);
    if (truncated) std::cerr << "warning: seq2seq decode reached " << max_len_ << " tokens without an end marker\n";
    std::vector<int> ids;
    for (auto t : tokens) ids.push_back(static_cast<int>(t));
    Prediction p;
    p.class_index = class_from_sequence(schema_, ids).class_index;
    for (std::size_t q = 0; q < schema_.query_count(); ++q) p.attributes.push_back(q < ids.size() ? ids[q] : -1);
    return p;
  }

 private:
  const FactorizationSchema& schema_;
  std::size_t begin_token_ = 0, end_token_ = 0, vocab_ = 0, max_len_ = 0;
  Tensor tokens_, positions_;
  std::vector<DecoderLayer> layers_;
  Linear classifier_;
};

struct ModelConfig {
  Variant variant = Variant::tqn;
  EncoderConfig encoder;
  HeadConfig head;
};

// Encoder plus variant head, sharing one parameter set. Encoder parameter
// names start with "encoder.".
struct SequenceModel {
  ModelConfig config;
  ParameterSet params;
  ToyEncoder encoder;
  std::unique_ptr<Head> head;

  std::vector<Tensor> encoder_parameters() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : params.items()) {
      if (name.rfind("encoder.", 0) == 0) out.push_back(t);
    }
    return out;
  }
  std::vector<Tensor> head_parameters() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : params.items()) {
      if (name.rfind("encoder.", 0) != 0) out.push_back(t);
    }
    return out;
  }
};

inline std::unique_ptr<SequenceModel> build_model(const ModelConfig& config, const FactorizationSchema& schema, Rng& rng) {
  auto m = std::make_unique<SequenceModel>();
  m->config = config;
  m->encoder = ToyEncoder::create(m->params, config.encoder, rng);
  const std::size_t d = config.encoder.feature_dim;
  switch (config.variant) {
    case Variant::tqn: m->head = std::make_unique<TqnHead>(m->params, schema, d, config.head, rng); break;
    case Variant::avgpool: m->head = std::make_unique<AvgPoolHead>(m->params, schema, d, config.head, rng); break;
    case Variant::selfattn_cls: m->head = std::make_unique<SelfAttnClsHead>(m->params, schema, d, config.head, rng); break;
    case Variant::multilabel_bce: m->head = std::make_unique<MultiLabelBceHead>(m->params, schema, d, config.head, rng); break;
    case Variant::seq2seq: m->head = std::make_unique<Seq2SeqHead>(m->params, schema, d, config.head, rng); break;
  }
  return m;
}

}  // namespace tqn
