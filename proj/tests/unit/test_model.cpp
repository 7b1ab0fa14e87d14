#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "msuf/model.hpp"
#include "support/gradcheck.hpp"

using namespace msuf;
using tensor::Tensor;

namespace {

BackboneConfig tiny_backbone() {
  return {.vocab_size = 97, .d_llm = 8, .n_layers = 2, .n_heads = 2, .max_seq = 128, .init_seed = 5, .weight_std = 0.3};
}

ModelConfig tiny_model(std::size_t classes = 3) {
  return {.intervals = 5, .d_dual = 4, .num_classes = classes, .mhsa_heads = 2, .init_seed = 11};
}

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  Matrix m(r, c);
  for (double& v : m.data) v = rng.normal(0.0, sd);
  return m;
}

Example example(const FrozenBackbone& b, std::uint64_t seed, std::size_t intervals = 5, std::size_t d_dual = 4) {
  Example ex;
  ex.id = "x" + std::to_string(seed);
  ex.e_dual = random_matrix(intervals, d_dual, seed);
  ex.source_ids = b.tokenize("officials confirm the bridge closure tonight");
  ex.e_word = b.embed_ids(ex.source_ids);
  ex.label = seed % 3;
  ex.si_target = 0.3;
  return ex;
}

Tensor param(const MsufModel& m, const std::string& name) {
  for (const auto& [n, t] : m.named_parameters())
    if (n == name) return t;
  throw std::runtime_error("no parameter " + name);
}

void set_values(Tensor t, const std::vector<double>& v) {
  ASSERT_EQ(t.size(), v.size());
  std::copy(v.begin(), v.end(), t.mutable_data().begin());
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

}  // namespace

TEST(Prompts, TemplatesAndThreeClassVariant) {
  EXPECT_NE(kMainPromptTemplate.find("This is a rumor detection task"), std::string::npos);
  EXPECT_NE(kAuxPromptTemplate.find("Calculate the sentiment intensity or valence score"), std::string::npos);
  const auto three = main_prompt(3);
  EXPECT_EQ(three.find("non-rumours"), std::string::npos);
  EXPECT_NE(three.find("2. unverified rumour.)"), std::string::npos);
  EXPECT_EQ(main_prompt(4), kMainPromptTemplate);
  EXPECT_THROW(main_prompt(2), ShapeError);
}

TEST(ProjectTime, ShapeAndErrors) {
  FrozenBackbone b(tiny_backbone());
  MsufModel m(b, tiny_model());
  const auto e = m.project_time(Tensor::constant(random_matrix(5, 4, 1)));
  EXPECT_EQ(e.rows(), 4u);
  EXPECT_EQ(e.cols(), 8u);
  EXPECT_THROW(m.project_time(Tensor::constant(random_matrix(4, 5, 1))), ShapeError);
}

TEST(ProjectTime, ZeroInputGivesValueBiasPattern) {
  FrozenBackbone b(tiny_backbone());
  MsufModel m(b, tiny_model());
  const auto bv = random_matrix(1, 8, 2);
  const auto bo = random_matrix(1, 8, 3);
  set_values(param(m, "msuf.mhsa.bv"), bv.data);
  set_values(param(m, "msuf.mhsa.bo"), bo.data);
  set_values(param(m, "msuf.mhsa.bq"), random_matrix(1, 8, 4).data);
  const auto wo = param(m, "msuf.mhsa.wo").value();
  const auto e = m.project_time(Tensor::constant(Matrix(5, 4)));
  // Every attention row averages identical value rows bv.
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      double expect = bo(0, c);
      for (std::size_t k = 0; k < 8; ++k) expect += bv(0, k) * wo(k, c);
      EXPECT_NEAR(e.at(r, c), expect, 1e-12);
    }
}

TEST(ProjectTime, ScalingInputChangesOutput) {
  FrozenBackbone b(tiny_backbone());
  MsufModel m(b, tiny_model());
  Matrix x = random_matrix(5, 4, 9);
  const auto e1 = m.project_time(Tensor::constant(x));
  for (double& v : x.data) v *= 2.0;
  const auto e2 = m.project_time(Tensor::constant(x));
  EXPECT_GT(max_abs_diff(e1.data(), e2.data()), 1e-6);
}

TEST(Align, SingleWordTakesAllWeight) {
  FrozenBackbone b(tiny_backbone());
  MsufModel m(b, tiny_model());
  const auto e_word = b.embed("word");
  Tensor w;
  const auto out = m.align(Tensor::constant(random_matrix(4, 8, 1)), e_word, &w);
  const auto v = tensor::matmul(e_word, param(m, "msuf.cross.wv"));
  for (std::size_t r = 0; r < 4; ++r) {
    EXPECT_EQ(w.at(r, 0), 1.0);
    for (std::size_t c = 0; c < 8; ++c) EXPECT_DOUBLE_EQ(out.at(r, c), v.at(0, c));
  }
}

TEST(Align, RowsAreStochastic) {
  FrozenBackbone b(tiny_backbone());
  MsufModel m(b, tiny_model());
  for (std::uint64_t s = 0; s < 20; ++s) {
    Tensor w;
    m.align(Tensor::constant(random_matrix(4, 8, s, 3.0)), b.embed("a b c d e f g h i"), &w);
    for (std::size_t r = 0; r < w.rows(); ++r) {
      double sum = 0;
      for (std::size_t c = 0; c < w.cols(); ++c) sum += w.at(r, c);
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Align, HandComputedConvexCombination) {
  BackboneConfig bc = tiny_backbone();
  bc.d_llm = 2;
  bc.n_heads = 1;
  FrozenBackbone b(bc);
  ModelConfig mc = tiny_model();
  mc.d_dual = 1;
  mc.mhsa_heads = 1;
  MsufModel m(b, mc);
  for (const char* n : {"msuf.cross.wq", "msuf.cross.wk", "msuf.cross.wv"}) set_values(param(m, n), {1, 0, 0, 1});
  const Tensor q = Tensor::constant(1, 2, {1.0, 2.0});
  const Tensor words = Tensor::constant(2, 2, {0.5, -1.0, 2.0, 1.0});
  const auto out = m.align(q, words);
  // scores 1*0.5 + 2*(-1) = -1.5 and 1*2 + 2*1 = 4, divided by sqrt(2)
  const double s1 = -1.5 / std::sqrt(2.0), s2 = 4.0 / std::sqrt(2.0);
  const double w1 = std::exp(s1) / (std::exp(s1) + std::exp(s2)), w2 = 1.0 - w1;
  EXPECT_NEAR(out.at(0, 0), w1 * 0.5 + w2 * 2.0, 1e-12);
  EXPECT_NEAR(out.at(0, 1), w1 * -1.0 + w2 * 1.0, 1e-12);
}

TEST(ForwardTask, OutputShapes) {
  FrozenBackbone b(tiny_backbone());
  for (std::size_t classes : {3u, 4u}) {
    MsufModel m(b, tiny_model(classes));
    const auto out = m.forward(example(b, 1));
    EXPECT_EQ(out.logits.cols(), classes);
    EXPECT_EQ(out.score_aux.size(), 1u);
    EXPECT_EQ(out.e_align.rows(), 4u);
    EXPECT_EQ(out.e_time.rows(), 4u);
    EXPECT_EQ(out.sequence_length, m.main_prompt_embedding().rows() + 4);
  }
}

TEST(ForwardTask, ZeroBackboneLeavesResidualOnly) {
  FrozenBackbone b(tiny_backbone());
  MsufModel m(b, tiny_model());
  m.set_backbone_override([](const Tensor& e) { return Tensor::constant(Matrix(e.rows(), e.cols())); });
  EXPECT_FALSE(m.uses_prefix_cache());
  const auto block = Tensor::constant(random_matrix(4, 8, 3));
  const auto pooled = m.pooled(MsufModel::Task::Main, block);
  const auto expect = tensor::mean_rows(tensor::concat_rows({m.main_prompt_embedding(), block}));
  EXPECT_EQ(pooled.value(), expect.value());
}

TEST(ForwardTask, AlignFirstChangesLogits) {
  FrozenBackbone b(tiny_backbone());
  MsufModel a(b, tiny_model());
  auto cfg = tiny_model();
  cfg.variant.align_first = true;
  MsufModel f(b, cfg);
  const auto ex = example(b, 2);
  EXPECT_GT(max_abs_diff(a.forward(ex).logits.data(), f.forward(ex).logits.data()), 1e-9);
}

TEST(ForwardTask, PrefixCacheMatchesFullBackbone) {
  FrozenBackbone b(tiny_backbone());
  MsufModel cached(b, tiny_model());
  MsufModel full(b, tiny_model());
  ASSERT_TRUE(cached.uses_prefix_cache());
  full.set_backbone_override([&](const Tensor& e) { return full.backbone().forward(e); });
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto ex = example(b, s);
    const auto o1 = cached.forward(ex);
    const auto o2 = full.forward(ex);
    EXPECT_LT(max_abs_diff(o1.logits.data(), o2.logits.data()), 1e-12);
    EXPECT_LT(max_abs_diff(o1.score_aux.data(), o2.score_aux.data()), 1e-12);
  }
}

TEST(ForwardTask, NoAlignUsesPromptAndSourceOnly) {
  FrozenBackbone b(tiny_backbone());
  auto cfg = tiny_model();
  cfg.variant.no_align = true;
  MsufModel m(b, cfg);
  const auto ex = example(b, 1);
  const auto out = m.forward(ex);
  EXPECT_EQ(out.sequence_length, m.main_prompt_embedding().rows() + ex.e_word.rows());
  EXPECT_FALSE(out.e_align.defined());
  for (const auto& t : m.trainable_parameters()) EXPECT_EQ(t.name().rfind("msuf.head_", 0), 0u) << t.name();
}

TEST(ForwardTask, SequenceOverflow) {
  BackboneConfig bc = tiny_backbone();
  FrozenBackbone probe(bc);
  bc.max_seq = probe.tokenize(main_prompt(3)).size() + 2;
  FrozenBackbone b(bc);
  MsufModel m(b, tiny_model());
  EXPECT_THROW(m.forward(example(b, 1)), ShapeError);
}

TEST(LossTotal, Examples) {
  const auto logits = Tensor::constant(1, 3, {0.2, -1.0, 0.7});
  const auto aux = Tensor::scalar(0.5);
  const double ce = tensor::cross_entropy(logits, 2).item();
  EXPECT_EQ(loss_total(logits, 2, aux, 0.9, 0.0).item(), ce);
  EXPECT_NEAR(loss_total(Tensor::constant(1, 4, {3, 3, 3, 3}), 1, aux, 0.5, 0.0).item(), std::log(4.0), 1e-15);
  EXPECT_NEAR(loss_total(logits, 2, Tensor::scalar(0.7), 0.5, 0.5).item(), ce + 0.5 * 0.04, 1e-15);
  EXPECT_THROW(loss_total(logits, 3, aux, 0.5, 0.5), ShapeError);
  EXPECT_THROW(loss_total(logits, 0, aux, 0.5, -1.0), std::invalid_argument);
}

TEST(Parameters, BackboneExcludedFromOptimizerList) {
  FrozenBackbone b(tiny_backbone());
  MsufModel m(b, tiny_model());
  std::set<std::string> backbone_names;
  for (const auto& [n, t] : m.backbone().named_parameters()) backbone_names.insert(n);
  for (const auto& t : m.trainable_parameters()) {
    EXPECT_EQ(backbone_names.count(t.name()), 0u) << t.name();
    EXPECT_EQ(t.name().rfind("msuf.", 0), 0u);
    EXPECT_TRUE(t.requires_grad());
  }
  EXPECT_EQ(m.trainable_parameters().size(), 17u);
}

TEST(Parameters, UnfrozenVariantOwnsItsBackboneCopy) {
  FrozenBackbone b(tiny_backbone());
  const auto hash = b.weights_hash();
  auto cfg = tiny_model();
  cfg.variant.full_unfrozen = true;
  MsufModel m(b, cfg);
  EXPECT_FALSE(m.uses_prefix_cache());
  EXPECT_GT(m.trainable_parameters().size(), 17u);
  for (auto t : m.trainable_parameters()) t.mutable_data()[0] += 1.0;
  EXPECT_EQ(b.weights_hash(), hash);
  for (const auto& [n, t] : b.named_parameters()) EXPECT_FALSE(t.requires_grad());
}

TEST(Determinism, SameSeedsBitwiseEqual) {
  FrozenBackbone b1(tiny_backbone()), b2(tiny_backbone());
  MsufModel m1(b1, tiny_model()), m2(b2, tiny_model());
  const auto o1 = m1.forward(example(b1, 4));
  const auto o2 = m2.forward(example(b2, 4));
  EXPECT_EQ(o1.logits.value(), o2.logits.value());
  EXPECT_EQ(o1.score_aux.value(), o2.score_aux.value());
  EXPECT_EQ(o1.e_align.value(), o2.e_align.value());
  EXPECT_EQ(o1.e_time.value(), o2.e_time.value());
}

TEST(Checkpoint, RoundTripReproducesOutputs) {
  FrozenBackbone b(tiny_backbone());
  MsufModel m(b, tiny_model());
  for (auto t : m.trainable_parameters()) t.mutable_data()[0] += 0.25;
  const auto ckpt = tensor::deserialize_checkpoint(tensor::serialize_checkpoint(m.to_checkpoint()));
  EXPECT_EQ(ckpt.meta.at("main_prompt"), main_prompt(3));
  FrozenBackbone b2(backbone_config_from_json(ckpt.meta.at("backbone_config")));
  b2.load_arrays(ckpt);
  MsufModel back(b2, model_config_from_json(ckpt.meta.at("model_config")));
  back.load_parameters(ckpt);
  const auto ex = example(b, 6);
  EXPECT_EQ(back.forward(ex).logits.value(), m.forward(ex).logits.value());
}

// Analytic gradients of the full objective against central differences for
// every trainable parameter.
class EndToEndGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(EndToEndGradient, MatchesFiniteDifferences) {
  FrozenBackbone b(tiny_backbone());
  auto cfg = tiny_model();
  const auto v = GetParam();
  cfg.variant.no_align = v == "no_align";
  cfg.variant.align_first = v == "align_first";
  cfg.variant.align_only = v == "align_only";
  cfg.variant.no_residual = v == "no_residual";
  cfg.variant.full_unfrozen = v == "full_unfrozen";
  cfg.pooling = v == "last" ? Pooling::Last : Pooling::Mean;
  cfg.align_scale = v == "sqrt_dim" ? AlignScale::SqrtDim : AlignScale::SqrtWords;
  MsufModel m(b, cfg);
  const auto ex = example(b, 7);
  const auto loss = [&] {
    const auto out = m.forward(ex);
    return loss_total(out.logits, ex.label, out.score_aux, ex.si_target, 0.5);
  };
  const std::size_t cap = v == "full_unfrozen" ? 6 : SIZE_MAX;
  const auto res = msuf::testing::grad_check(loss, m.trainable_parameters(), 1e-5, cap);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
  EXPECT_GT(res.checked, 0u);
}

INSTANTIATE_TEST_SUITE_P(Variants, EndToEndGradient,
                         ::testing::Values("full", "no_align", "align_first", "align_only", "no_residual", "full_unfrozen",
                                           "last", "sqrt_dim"));
