#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "test_support.hpp"
#include "tqn/grad_check.hpp"
#include "tqn/optim.hpp"
#include "tqn/variants.hpp"

using namespace tqn;
using tqn::testing::max_abs_diff;
using tqn::testing::random_tensor;
using tqn::testing::schema_file;

namespace {

const FactorizationSchema& synth_schema() {
  static const auto s = load_schema(schema_file("synth_queries.csv"), schema_file("synth_classes.csv"));
  return s;
}

const FactorizationSchema& leap_schema() {
  static const auto s = load_schema(schema_file("leap_turn_queries.csv"), schema_file("leap_turn_classes.csv"));
  return s;
}

HeadConfig tiny_head(std::size_t layers = 1) {
  HeadConfig h;
  h.model_dim = 6;
  h.layers = layers;
  h.heads = 2;
  h.ff_dim = 8;
  return h;
}

Tensor permute_rows(const Tensor& x, const std::vector<std::size_t>& perm) {
  std::vector<double> v;
  for (auto r : perm) {
    for (std::size_t c = 0; c < x.cols(); ++c) v.push_back(x.at(r, c));
  }
  return Tensor({perm.size(), x.cols()}, v);
}

std::vector<double> logit_of(const std::vector<double>& p) {
  std::vector<double> out;
  for (double v : p) out.push_back(std::log(v / (1.0 - v)));
  return out;
}

}  // namespace

TEST(VariantNames, RoundTrip) {
  for (auto v : all_variants()) EXPECT_EQ(parse_variant(variant_name(v)), v);
  EXPECT_THROW(parse_variant("lstm"), ConfigError);
}

TEST(AvgPool, SingleClipIsIdentityPooling) {
  ParameterSet params;
  Rng rng(1);
  AvgPoolHead head(params, synth_schema(), 4, HeadConfig{}, rng);
  const Tensor x = random_tensor({1, 4}, rng);
  const Tensor direct = head.classifier()(x);
  const Tensor pooled = head.logits(x, ForwardMode{});
  EXPECT_EQ(max_abs_diff(direct.values(), pooled.values()), 0.0);
}

TEST(AvgPool, HandComputedTwoClipLogits) {
  ParameterSet params;
  Rng rng(2);
  AvgPoolHead head(params, leap_schema(), 3, HeadConfig{}, rng);
  auto bias = params.find("avgpool.classifier.bias");
  for (std::size_t i = 0; i < 4; ++i) bias.mutable_values()[i] = 0.1 * static_cast<double>(i + 1);
  const Tensor x({2, 3}, {1.0, -2.0, 0.5, 3.0, 0.0, -1.5});
  const Tensor w = params.find("avgpool.classifier.weight");
  const double mean[3] = {2.0, -1.0, -0.5};
  const Tensor logits = head.logits(x, ForwardMode{});
  for (std::size_t c = 0; c < 4; ++c) {
    double want = bias[c];
    for (std::size_t j = 0; j < 3; ++j) want += mean[j] * w.at(j, c);
    EXPECT_NEAR(logits[c], want, 1e-14);
  }
}

TEST(AvgPool, ClipOrderDoesNotMatter) {
  ParameterSet params;
  Rng rng(3);
  AvgPoolHead head(params, synth_schema(), 5, HeadConfig{}, rng);
  const Tensor x = random_tensor({2, 5}, rng);
  const auto a = head.logits(x, ForwardMode{});
  const auto b = head.logits(permute_rows(x, {1, 0}), ForwardMode{});
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  const Tensor y = random_tensor({7, 5}, rng);
  const auto c = head.logits(y, ForwardMode{});
  const auto d = head.logits(permute_rows(y, {4, 2, 6, 0, 1, 5, 3}), ForwardMode{});
  EXPECT_LT(max_abs_diff(c.values(), d.values()), 1e-14);
}

TEST(SelfAttnCls, AttentionRowsSumToOne) {
  ParameterSet params;
  Rng rng(4);
  const ClsTrunk trunk(params, "t", 4, 5, tiny_head(2), rng);
  const auto out = trunk.forward(random_tensor({6, 4}, rng), ForwardMode{});
  ASSERT_EQ(out.weights.size(), 2u);
  for (const auto& layer : out.weights) {
    for (const auto& w : layer) {
      ASSERT_EQ(w.rows(), 7u);
      for (std::size_t r = 0; r < w.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < w.cols(); ++c) s += w.at(r, c);
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
    }
  }
}

TEST(SelfAttnCls, ClipPermutationPermutesOutputs) {
  ParameterSet params;
  Rng rng(5);
  const ClsTrunk trunk(params, "t", 4, 5, tiny_head(2), rng);
  const Tensor x = random_tensor({5, 4}, rng);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  const auto a = trunk.forward(x, ForwardMode{});
  const auto b = trunk.forward(permute_rows(x, perm), ForwardMode{});
  EXPECT_LT(max_abs_diff(a.logits.values(), b.logits.values()), 1e-12);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(b.sequence.at(1 + i, c), a.sequence.at(1 + perm[i], c), 1e-12);
  }
}

TEST(SelfAttnCls, GradientMatchesFiniteDifferences) {
  ParameterSet params;
  Rng rng(6);
  const SelfAttnClsHead head(params, leap_schema(), 4, tiny_head(2), rng);
  const Tensor x = random_tensor({5, 4}, rng, -1.0, 1.0, true);
  auto tensors = params.tensors();
  tensors.push_back(x);
  const auto r = finite_diff_grad_check([&] { return head.loss(x, 2, ForwardMode{}); }, tensors, 1e-6);
  EXPECT_LT(r.max_error, 1e-4) << r.worst_tensor;
}

TEST(MultiLabelBce, SaturatedOutputsPickTheClass) {
  ParameterSet params;
  Rng rng(7);
  const MultiLabelBceHead head(params, synth_schema(), 4, tiny_head(), rng);
  for (std::size_t c = 0; c < 16; ++c) {
    std::vector<double> logits;
    for (double y : head.multi_hot(c)) logits.push_back(y > 0.5 ? 40.0 : -40.0);
    const auto p = head.predict_from_logits(logits);
    EXPECT_EQ(p.class_index, c);
    const auto& t = synth_schema().category_to_attributes(c);
    EXPECT_EQ(p.attributes, std::vector<int>(t.begin(), t.end()));
    EXPECT_LT(bce_with_logits(Tensor({logits.size()}, logits), head.multi_hot(c)).item(), 1e-12);
  }
}

TEST(MultiLabelBce, ClassScoresMatchProductOracle) {
  ParameterSet params;
  Rng rng(8);
  const MultiLabelBceHead head(params, synth_schema(), 4, tiny_head(), rng);
  const auto counts = synth_schema().attribute_counts();
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<double>> p(counts.size());
    std::vector<double> flat;
    for (std::size_t q = 0; q < counts.size(); ++q) {
      for (std::size_t a = 0; a < counts[q]; ++a) p[q].push_back(rng.uniform(0.01, 0.99));
      const auto l = logit_of(p[q]);
      flat.insert(flat.end(), l.begin(), l.end());
    }
    const auto recovered = head.attribute_probabilities(flat);
    std::vector<double> score;
    for (std::size_t c = 0; c < 16; ++c) {
      double s = 1.0;
      const auto t = synth_schema().local_targets(c);
      for (std::size_t q = 0; q < t.size(); ++q) s *= p[q][t[q]];
      score.push_back(s);
      for (std::size_t q = 0; q < t.size(); ++q) EXPECT_NEAR(recovered[q][t[q]], p[q][t[q]], 1e-12);
    }
    const auto ours = class_prob_from_attributes(synth_schema(), recovered);
    for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(ours[c], score[c], 1e-12);
    EXPECT_EQ(head.predict_from_logits(flat).class_index, argmax(score));
  }
}

TEST(Seq2Seq, TargetSequenceWrapsTuple) {
  ParameterSet params;
  Rng rng(9);
  const Seq2SeqHead head(params, synth_schema(), 4, tiny_head(), rng);
  EXPECT_EQ(head.begin_token(), 9u);
  EXPECT_EQ(head.end_token(), 10u);
  EXPECT_EQ(head.max_length(), 5u);
  EXPECT_EQ(head.target_sequence(5), (std::vector<std::size_t>{9, 2, 5, 0, 10}));
}

TEST(Seq2Seq, CausalMaskHidesFutureTokens) {
  ParameterSet params;
  Rng rng(10);
  const Seq2SeqHead head(params, synth_schema(), 4, tiny_head(2), rng);
  const Tensor x = random_tensor({6, 4}, rng);
  const auto a = head.step_logits(x, {9, 1, 4, 7}, ForwardMode{});
  const auto b = head.step_logits(x, {9, 1, 6, 0}, ForwardMode{});
  const std::size_t v = a.cols();
  for (std::size_t j = 0; j < 2 * v; ++j) ASSERT_EQ(a[j], b[j]);
  EXPECT_GT(max_abs_diff(a.values().subspan(2 * v), b.values().subspan(2 * v)), 0.0);
}

TEST(Seq2Seq, GreedyDecodeMatchesStepwiseArgmax) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ParameterSet params;
    Rng rng(20 + seed);
    const Seq2SeqHead head(params, leap_schema(), 4, tiny_head(2), rng);
    const Tensor x = random_tensor({5, 4}, rng);
    std::vector<std::size_t> prefix{head.begin_token()};
    std::vector<std::size_t> oracle;
    while (oracle.size() < head.max_length()) {
      const auto logits = head.step_logits(x, prefix, ForwardMode{});
      const std::size_t last = prefix.size() - 1;
      std::size_t best = 0;
      for (std::size_t t = 1; t < logits.cols(); ++t) {
        if (logits.at(last, t) > logits.at(last, best)) best = t;
      }
      if (best == head.end_token()) break;
      oracle.push_back(best);
      if (prefix.size() == head.max_length()) break;
      prefix.push_back(best);
    }
    bool truncated = false;
    EXPECT_EQ(head.decode(x, &truncated), oracle) << "seed " << seed;
  }
}

TEST(Seq2Seq, DecodeTruncatesWithoutEndMarker) {
  ParameterSet params;
  Rng rng(11);
  const Seq2SeqHead head(params, leap_schema(), 4, tiny_head(), rng);
  auto bias = params.find("seq2seq.classifier.bias");
  bias.mutable_values()[head.end_token()] = -1e3;
  bias.mutable_values()[1] = 1e3;
  bool truncated = false;
  const auto out = head.decode(random_tensor({3, 4}, rng), &truncated);
  EXPECT_TRUE(truncated);
  EXPECT_EQ(out.size(), head.max_length());
}

TEST(Seq2Seq, MemorizesOneSequence) {
  ParameterSet params;
  Rng rng(12);
  auto h = tiny_head(1);
  h.dropout_decoder = 0.0;
  const Seq2SeqHead head(params, synth_schema(), 4, h, rng);
  const Tensor x = random_tensor({5, 4}, rng);
  Adam adam;
  adam.add_group(params.tensors(), 1e-2);
  double loss = 0.0;
  for (int step = 0; step < 20000; ++step) {
    ComputationRecord rec;
    Recording guard(&rec);
    const Tensor l = head.loss(x, 6, ForwardMode{});
    loss = l.item();
    if (loss < 1e-6) break;
    rec.backward(l);
    adam.step();
    adam.zero_grad();
  }
  EXPECT_LT(loss, 1e-6);
  EXPECT_EQ(head.predict(x).class_index, 6u);
}

TEST(Seq2Seq, GradientMatchesFiniteDifferences) {
  ParameterSet params;
  Rng rng(13);
  const Seq2SeqHead head(params, leap_schema(), 4, tiny_head(2), rng);
  const Tensor x = random_tensor({4, 4}, rng, -1.0, 1.0, true);
  auto tensors = params.tensors();
  tensors.push_back(x);
  const auto r = finite_diff_grad_check([&] { return head.loss(x, 1, ForwardMode{}); }, tensors, 1e-6);
  EXPECT_LT(r.max_error, 1e-4) << r.worst_tensor;
}

TEST(SequenceModel, EncoderAndHeadParametersPartition) {
  for (auto v : all_variants()) {
    ModelConfig mc;
    mc.variant = v;
    Rng rng(14);
    const auto m = build_model(mc, synth_schema(), rng);
    const auto enc = m->encoder_parameters();
    const auto head = m->head_parameters();
    EXPECT_EQ(enc.size(), 4u);
    EXPECT_EQ(enc.size() + head.size(), m->params.items().size());
    EXPECT_GT(head.size(), 0u) << variant_name(v);
  }
}

TEST(SequenceModel, EveryVariantPredictsAValidClass) {
  Rng data_rng(15);
  const Tensor frames = random_tensor({12 * 4, 16}, data_rng);
  for (auto v : all_variants()) {
    ModelConfig mc;
    mc.variant = v;
    Rng rng(16);
    const auto m = build_model(mc, synth_schema(), rng);
    const auto p = m->head->predict(m->encoder(frames));
    EXPECT_LT(p.class_index, 16u) << variant_name(v);
    EXPECT_EQ(p.attributes.size(), 3u);
  }
}
