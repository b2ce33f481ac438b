#pragma once

// Parameter containers and the transformer building blocks shared by the
// query decoder and the baseline heads. No positional encodings anywhere.

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tqn/ops.hpp"
#include "tqn/rng.hpp"
#include "tqn/tensor.hpp"

namespace tqn {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Named parameter tensors in registration order. Names are canonical and
// used verbatim by checkpoints.
class ParameterSet {
 public:
  Tensor add(const std::string& name, Tensor t) {
    for (const auto& [n, _] : items_) {
      if (n == name) throw std::logic_error("duplicate parameter name: " + name);
    }
    t.set_requires_grad(true);
    items_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

  Tensor find(const std::string& name) const {
    for (const auto& [n, t] : items_) {
      if (n == name) return t;
    }
    throw std::out_of_range("unknown parameter: " + name);
  }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    out.reserve(items_.size());
    for (const auto& [_, t] : items_) out.push_back(t);
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : items_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : items_) t.zero_grad();
  }

  bool all_finite() const {
    for (const auto& [_, t] : items_) {
      for (double v : t.values()) {
        if (!std::isfinite(v)) return false;
      }
    }
    return true;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

struct ForwardMode {
  bool train = false;
  Rng* rng = nullptr;  // required when train is set and any dropout rate is non-zero
};

inline Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(fan_in * fan_out);
  for (auto& x : v) x = rng.uniform(-limit, limit);
  return Tensor({fan_in, fan_out}, std::move(v));
}

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // out

  static Linear create(ParameterSet& params, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    Linear l;
    l.weight = params.add(name + ".weight", glorot_uniform(in, out, rng));
    l.bias = params.add(name + ".bias", Tensor::zeros({out}));
    return l;
  }

  Tensor operator()(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;
  double eps = 1e-5;

  static LayerNorm create(ParameterSet& params, const std::string& name, std::size_t dim) {
    LayerNorm ln;
    ln.gain = params.add(name + ".gain", Tensor({dim}, std::vector<double>(dim, 1.0)));
    ln.bias = params.add(name + ".bias", Tensor::zeros({dim}));
    return ln;
  }

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, eps); }
};

struct AttentionResult {
  Tensor output;
  std::vector<Tensor> weights;  // one [queries x keys] matrix per head
};

struct MultiHeadAttention {
  Linear query;
  Linear key;    // linear key head over the attended sequence
  Linear value;  // linear value head over the attended sequence
  Linear output;
  std::size_t heads = 1;

  static MultiHeadAttention create(ParameterSet& params, const std::string& name, std::size_t query_dim,
                                   std::size_t kv_dim, std::size_t model_dim, std::size_t heads, Rng& rng) {
    if (heads == 0 || model_dim % heads != 0) {
      throw ConfigError(name + ": model dim " + std::to_string(model_dim) + " not divisible by " +
                        std::to_string(heads) + " heads");
    }
    MultiHeadAttention a;
    a.query = Linear::create(params, name + ".query", query_dim, model_dim, rng);
    a.key = Linear::create(params, name + ".key", kv_dim, model_dim, rng);
    a.value = Linear::create(params, name + ".value", kv_dim, model_dim, rng);
    a.output = Linear::create(params, name + ".output", model_dim, model_dim, rng);
    a.heads = heads;
    return a;
  }

  AttentionResult operator()(const Tensor& queries, const Tensor& sequence, bool causal = false) const {
    const Tensor q = query(queries);
    const Tensor k = key(sequence);
    const Tensor v = value(sequence);
    const std::size_t head_dim = q.cols() / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    AttentionResult result;
    std::vector<Tensor> head_out;
    head_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const Tensor qh = slice_cols(q, h * head_dim, head_dim);
      const Tensor kh = slice_cols(k, h * head_dim, head_dim);
      const Tensor vh = slice_cols(v, h * head_dim, head_dim);
      const Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
      Tensor w = causal ? causal_softmax(scores) : softmax(scores);
      head_out.push_back(matmul(w, vh));
      result.weights.push_back(std::move(w));
    }
    const Tensor merged = heads == 1 ? head_out.front() : concat_cols(head_out);
    result.output = output(merged);
    return result;
  }
};

struct FeedForward {
  Linear inner;
  Linear outer;

  static FeedForward create(ParameterSet& params, const std::string& name, std::size_t dim, std::size_t hidden,
                            Rng& rng) {
    FeedForward f;
    f.inner = Linear::create(params, name + ".inner", dim, hidden, rng);
    f.outer = Linear::create(params, name + ".outer", hidden, dim, rng);
    return f;
  }

  Tensor operator()(const Tensor& x) const { return outer(gelu(inner(x))); }
};

// Post-normalization block: LN(x + dropout(sublayer(x))).
inline Tensor residual_norm(const Tensor& x, const Tensor& sub, const LayerNorm& ln, double rate,
                            const ForwardMode& mode) {
  return ln(add(x, dropout(sub, rate, mode.train, mode.rng)));
}

// Self-attention + feed-forward encoder layer over a token sequence.
struct EncoderLayer {
  MultiHeadAttention self_attention;
  FeedForward feed_forward;
  LayerNorm norm1, norm2;
  double dropout_rate = 0.1;

  static EncoderLayer create(ParameterSet& params, const std::string& name, std::size_t dim, std::size_t heads,
                             std::size_t hidden, double dropout_rate, Rng& rng) {
    EncoderLayer l;
    l.self_attention = MultiHeadAttention::create(params, name + ".self_attn", dim, dim, dim, heads, rng);
    l.feed_forward = FeedForward::create(params, name + ".ffn", dim, hidden, rng);
    l.norm1 = LayerNorm::create(params, name + ".norm1", dim);
    l.norm2 = LayerNorm::create(params, name + ".norm2", dim);
    l.dropout_rate = dropout_rate;
    return l;
  }

  std::pair<Tensor, std::vector<Tensor>> operator()(const Tensor& x, const ForwardMode& mode) const {
    auto sa = self_attention(x, x);
    Tensor h = residual_norm(x, sa.output, norm1, dropout_rate, mode);
    h = residual_norm(h, feed_forward(h), norm2, dropout_rate, mode);
    return {h, std::move(sa.weights)};
  }
};

struct DecoderLayerOutput {
  Tensor output;
  std::vector<Tensor> self_weights;
  std::vector<Tensor> cross_weights;  // per head, [targets x sequence]
};

// Self-attention among targets, cross-attention into a feature sequence,
// then feed-forward; residual + post-normalization after each sublayer.
struct DecoderLayer {
  MultiHeadAttention self_attention;
  MultiHeadAttention cross_attention;
  FeedForward feed_forward;
  LayerNorm norm1, norm2, norm3;
  double dropout_rate = 0.1;

  static DecoderLayer create(ParameterSet& params, const std::string& name, std::size_t dim,
                             std::size_t feature_dim, std::size_t heads, std::size_t hidden, double dropout_rate,
                             Rng& rng) {
    DecoderLayer l;
    l.self_attention = MultiHeadAttention::create(params, name + ".self_attn", dim, dim, dim, heads, rng);
    l.cross_attention = MultiHeadAttention::create(params, name + ".cross_attn", dim, feature_dim, dim, heads, rng);
    l.feed_forward = FeedForward::create(params, name + ".ffn", dim, hidden, rng);
    l.norm1 = LayerNorm::create(params, name + ".norm1", dim);
    l.norm2 = LayerNorm::create(params, name + ".norm2", dim);
    l.norm3 = LayerNorm::create(params, name + ".norm3", dim);
    l.dropout_rate = dropout_rate;
    return l;
  }

  DecoderLayerOutput operator()(const Tensor& targets, const Tensor& features, const ForwardMode& mode,
                                bool causal = false) const {
    auto sa = self_attention(targets, targets, causal);
    Tensor h = residual_norm(targets, sa.output, norm1, dropout_rate, mode);
    auto ca = cross_attention(h, features);
    h = residual_norm(h, ca.output, norm2, dropout_rate, mode);
    h = residual_norm(h, feed_forward(h), norm3, dropout_rate, mode);
    return {h, std::move(sa.weights), std::move(ca.weights)};
  }
};

}  // namespace tqn
