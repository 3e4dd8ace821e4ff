#include <gtest/gtest.h>

#include <cmath>

#include "freefuse/fixtures.hpp"
#include "freefuse/toydit.hpp"
#include "test_support.hpp"

using namespace freefuse;
using namespace freefuse::toydit;

namespace {

attn::AttentionMap map_of(std::size_t n, std::vector<float> v) {
  return attn::AttentionMap(DenseTensor(Shape{n, n}, std::move(v)));
}

void expect_row_stochastic(const attn::AttentionMap& a) {
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double sum = 0.0;
    for (float v : a.row(i)) {
      ASSERT_GE(v, 0.0f);
      sum += v;
    }
    ASSERT_NEAR(sum, 1.0, 1e-5);
  }
}

}  // namespace

TEST(BuildModel, SeedDeterminism) {
  const ToyModelConfig cfg;
  EXPECT_EQ(build_toy_model(cfg, 1), build_toy_model(cfg, 1));
  EXPECT_FALSE(build_toy_model(cfg, 1) == build_toy_model(cfg, 2));
  const auto m = build_toy_model(cfg, 1);
  const float bound = 1.0f / std::sqrt(32.0f);
  for (float v : m.blocks[0].image.wq.data()) ASSERT_LE(std::abs(v), bound);
}

TEST(BuildModel, RejectsInvalidConfig) {
  ToyModelConfig cfg;
  cfg.n_blocks = 0;
  EXPECT_THROW(build_toy_model(cfg, 1), Error);
  cfg = {};
  cfg.d_model = 30;
  cfg.n_heads = 4;
  EXPECT_THROW(build_toy_model(cfg, 1), Error);
  cfg = {};
  cfg.mask_step = cfg.n_steps;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.mask_block = cfg.n_blocks;
  EXPECT_THROW(cfg.validate(), Error);
}

class Forward : public ::testing::Test {
 protected:
  ToyModelConfig cfg;
  ToyModel model = build_toy_model(cfg, 5);
  DenseTensor text = prompt_embedding(cfg, 5);
  DenseTensor latent = noise_latent(cfg, 5);
};

TEST_F(Forward, InertAdaptersEqualBase) {
  const auto base = forward_step(model, text, latent, {});
  const lora::LoraSet zero =
      lora::random_lora_set("z", cfg.n_blocks, cfg.d_model, 4, 4.0, lora::kAllAttachments, 1, 0.0);
  const ActiveLora active[] = {{&zero, lora::all_ones_mask(cfg.n_img()), std::nullopt}};
  const auto with = forward_step(model, text, latent, active);
  EXPECT_EQ(with.output, base.output);
  EXPECT_EQ(with.next_latent, base.next_latent);
}

TEST_F(Forward, SchedulerUpdate) {
  const auto out = forward_step(model, text, latent, {});
  for (std::size_t i = 0; i < latent.size(); ++i) {
    ASSERT_NEAR(out.next_latent[i], latent[i] - out.output[i] / 12.0, 1e-6);
  }
}

TEST_F(Forward, TracesAreRowStochastic) {
  const lora::LoraSet set =
      lora::random_lora_set("s", cfg.n_blocks, cfg.d_model, 4, 4.0, lora::kAllAttachments, 3, 0.3);
  const ActiveLora active[] = {{&set, lora::all_ones_mask(cfg.n_img()), std::nullopt}};
  const auto out = forward_step(model, text, latent, active, {0, 1, 2, 3});
  ASSERT_EQ(out.traces.size(), 4u);
  for (const auto& [b, tr] : out.traces) {
    EXPECT_EQ(tr.a_cross.rows(), cfg.n_text);
    EXPECT_EQ(tr.a_cross.cols(), cfg.n_img());
    EXPECT_EQ(tr.a_self.rows(), cfg.n_img());
    expect_row_stochastic(tr.a_cross);
    expect_row_stochastic(tr.a_self);
  }
  EXPECT_THROW(forward_step(model, text, latent, {}, {4}), Error);
  EXPECT_THROW(forward_step(model, text, DenseTensor(Shape{63, 32}), {}), Error);
}

TEST_F(Forward, FullyGatedAdapterEqualsBase) {
  ToyModelConfig one = cfg;
  one.n_blocks = 1;
  one.mask_block = 0;
  const ToyModel m1 = build_toy_model(one, 5);
  const lora::LoraSet set =
      lora::random_lora_set("s", 1, cfg.d_model, 4, 4.0, lora::kAllAttachments, 3, 0.3);
  const ActiveLora off[] = {{&set, lora::SubjectMask(cfg.n_img(), 0), lora::SubjectMask(cfg.n_text, 0)}};
  EXPECT_EQ(forward_step(m1, text, latent, off).output, forward_step(m1, text, latent, {}).output);
}

TEST(Diagnostics, ConflictCosineCases) {
  SeededRng rng(1);
  const DenseTensor a = rng.normal_tensor({5, 4});
  DenseTensor neg = a;
  for (float& v : neg.data()) v = -v;
  const auto same = conflict_cosine_map(a, a), opposite = conflict_cosine_map(a, neg);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_NEAR(same[i], 1.0, 1e-6);
    EXPECT_NEAR(opposite[i], -1.0, 1e-6);
  }
  const DenseTensor e1(Shape{2, 2}, {1, 0, 0, 1}), e2(Shape{2, 2}, {0, 1, 1, 0});
  const auto ortho = conflict_cosine_map(e1, e2);
  EXPECT_EQ(ortho.values(), (std::vector<float>{0, 0}));
  const auto zero = conflict_cosine_map(a, DenseTensor(Shape{5, 4}));
  for (float v : zero.data()) EXPECT_EQ(v, 0.0f);
  EXPECT_THROW(conflict_cosine_map(a, DenseTensor(Shape{5, 3})), Error);
}

TEST(Diagnostics, ConflictCosineSymmetricAndBounded) {
  SeededRng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const DenseTensor a = rng.normal_tensor({6, 3}), b = rng.normal_tensor({6, 3});
    const auto ab = conflict_cosine_map(a, b), ba = conflict_cosine_map(b, a);
    for (std::size_t i = 0; i < 6; ++i) {
      ASSERT_EQ(ab[i], ba[i]);
      ASSERT_LE(std::abs(ab[i]), 1.0f);
    }
  }
}

TEST(Diagnostics, LocalityRatioCases) {
  std::vector<float> eye(16, 0.0f);
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0f;
  EXPECT_DOUBLE_EQ(locality_ratio(map_of(4, eye), {1, 0, 1, 0}), 1.0);
  EXPECT_NEAR(locality_ratio(map_of(4, std::vector<float>(16, 0.25f)), {1, 1, 0, 0}), 0.5, 1e-12);
  const auto blocks =
      map_of(4, {0.5f, 0.5f, 0, 0, 0.5f, 0.5f, 0, 0, 0, 0, 0.5f, 0.5f, 0, 0, 0.5f, 0.5f});
  EXPECT_DOUBLE_EQ(locality_ratio(blocks, {1, 1, 0, 0}), 1.0);
  EXPECT_THROW(locality_ratio(blocks, {0, 0, 0, 0}), Error);
  EXPECT_THROW(locality_ratio(blocks, {1, 1, 0}), Error);
}

TEST(Diagnostics, PerturbationNormCases) {
  SeededRng rng(3);
  const DenseTensor q = rng.normal_tensor({4, 8}), k = rng.normal_tensor({6, 8});
  const DenseTensor dq = rng.normal_tensor({4, 8}), dk = rng.normal_tensor({6, 8});
  EXPECT_EQ(attention_perturbation_norm(q, k, dq, dk, 0.0), 0.0);
  EXPECT_EQ(attention_perturbation_norm(q, k, DenseTensor(Shape{4, 8}), DenseTensor(Shape{6, 8}), 1.0),
            0.0);
  const double ratio = attention_perturbation_norm(q, k, dq, dk, 1e-3) /
                       attention_perturbation_norm(q, k, dq, dk, 5e-4);
  EXPECT_GE(ratio, 1.6);
  EXPECT_LE(ratio, 2.4);
  EXPECT_THROW(attention_perturbation_norm(q, k, dk, dq, 1.0), Error);
}

TEST_F(Forward, EquivalenceErrorTrivialCases) {
  const lora::LoraSet set =
      lora::random_lora_set("s", cfg.n_blocks, cfg.d_model, 4, 4.0, lora::kAllAttachments, 3, 0.3);
  EXPECT_EQ(masked_equivalence_error(model, text, latent, set, lora::all_ones_mask(cfg.n_img())), 0.0);
  const lora::LoraSet zero =
      lora::random_lora_set("z", cfg.n_blocks, cfg.d_model, 4, 4.0, lora::kAllAttachments, 3, 0.0);
  EXPECT_EQ(masked_equivalence_error(model, text, latent, zero, fixtures::left_half_mask(cfg)), 0.0);
  EXPECT_GT(masked_equivalence_error(model, text, latent, set, fixtures::left_half_mask(cfg)), 0.0);
}

TEST(LocalityFixture, HitsTargetRatio) {
  const ToyModelConfig cfg;
  for (double target : {0.5, 0.9, 0.99}) {
    auto fx = fixtures::make_locality_fixture(cfg, 4, target);
    const auto out = forward_step(fx.model, fx.text, fx.latent, {}, {0, 3});
    for (const auto& [b, tr] : out.traces) {
      EXPECT_NEAR(locality_ratio(tr.a_self, fx.mask), target, 1e-5) << "block " << b;
    }
  }
}

TEST(LocalityFixture, SweepGoldens) {
  // Regression values from the first recorded run (seed 0, default config).
  const ToyModelConfig cfg;
  const double golden[] = {0.024858293877197655, 0.0068811094628846454, 0.00083594588731635369};
  const double targets[] = {0.5, 0.9, 0.99};
  for (int i = 0; i < 3; ++i) {
    const auto fx = fixtures::make_locality_fixture(cfg, 0, targets[i]);
    const double err = masked_equivalence_error(fx.model, fx.text, fx.latent, fx.lora, fx.mask);
    EXPECT_NEAR(err, golden[i], 1e-6 * golden[i]) << "locality " << targets[i];
  }
}

TEST(LocalityFixture, ErrorFallsAsLocalityRises) {
  const ToyModelConfig cfg;
  std::vector<double> loc, err;
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    double prev = INFINITY;
    for (double target : {0.5, 0.9, 0.99}) {
      const auto fx = fixtures::make_locality_fixture(cfg, seed, target);
      const double e = masked_equivalence_error(fx.model, fx.text, fx.latent, fx.lora, fx.mask);
      EXPECT_LT(e, prev) << "seed " << seed << " locality " << target;
      prev = e;
      loc.push_back(target);
      err.push_back(e);
    }
  }
  EXPECT_LE(freefuse::testing::spearman(loc, err), -0.8);
}

class Pipeline : public ::testing::Test {
 protected:
  ToyModelConfig cfg;
  ToyModel model = build_toy_model(cfg, 9);
  DenseTensor prompt = prompt_embedding(cfg, 9);
  DenseTensor latent = noise_latent(cfg, 9);
};

TEST_F(Pipeline, ZeroSubjectsIsBaseTrace) {
  const auto trace = run_pipeline(model, prompt, latent, {}, {});
  ASSERT_EQ(trace.steps.size(), cfg.n_steps);
  EXPECT_FALSE(trace.extraction.has_value());
  DenseTensor x = latent;
  for (const auto& step : trace.steps) {
    EXPECT_FALSE(step.masks.has_value());
    EXPECT_EQ(step.latent, x);
    x = forward_step(model, prompt, x, {}).next_latent;
  }
  EXPECT_EQ(trace.final_latent, x);
}

TEST_F(Pipeline, SingleSubjectMatchesUnmaskedRun) {
  const Subject subjects[] = {
      {{"solo", {1, 2}},
       lora::random_lora_set("solo", cfg.n_blocks, cfg.d_model, 4, 4.0, lora::kAllAttachments, 2, 0.2)}};
  const auto trace = run_pipeline(model, prompt, latent, subjects, {});
  ASSERT_TRUE(trace.extraction.has_value());
  EXPECT_EQ(trace.extraction->token_masks[0], lora::all_ones_mask(cfg.n_img()));
  EXPECT_TRUE(trace.warnings.empty());
  DenseTensor x = latent;
  const ActiveLora active[] = {{&subjects[0].lora, lora::all_ones_mask(cfg.n_img()), std::nullopt}};
  for (std::size_t t = 0; t < cfg.n_steps; ++t) x = forward_step(model, prompt, x, active).next_latent;
  EXPECT_EQ(trace.final_latent, x);
}

TEST_F(Pipeline, MaskTimingAndDeterminism) {
  const Subject subjects[] = {
      {{"a", {1}}, lora::random_lora_set("a", cfg.n_blocks, cfg.d_model, 4, 4.0, lora::kAllAttachments, 2, 0.2)},
      {{"b", {3, 4}}, lora::random_lora_set("b", cfg.n_blocks, cfg.d_model, 4, 4.0, lora::kAllAttachments, 3, 0.2)}};
  const auto trace = run_pipeline(model, prompt, latent, subjects, {});
  for (std::size_t t = 0; t < cfg.n_steps; ++t) {
    EXPECT_EQ(trace.steps[t].masks.has_value(), t >= cfg.mask_step) << "step " << t;
    if (trace.steps[t].masks) {
      EXPECT_EQ(*trace.steps[t].masks, trace.extraction->pixel_masks);
    }
  }
  EXPECT_EQ(trace.extraction->step, cfg.mask_step);
  EXPECT_EQ(trace.extraction->block, cfg.mask_block);
  // partition at pixel level
  for (std::size_t p = 0; p < cfg.n_img(); ++p) {
    EXPECT_EQ(trace.extraction->pixel_masks.masks[0][p] + trace.extraction->pixel_masks.masks[1][p], 1);
  }
  const auto again = run_pipeline(model, prompt, latent, subjects, {});
  EXPECT_EQ(again.final_latent, trace.final_latent);
  for (std::size_t t = 0; t < cfg.n_steps; ++t) EXPECT_EQ(again.steps[t].x0, trace.steps[t].x0);
}

TEST_F(Pipeline, StepsBeforeMaskStepAreUnmasked) {
  const Subject subjects[] = {
      {{"a", {1}}, lora::random_lora_set("a", cfg.n_blocks, cfg.d_model, 4, 4.0, lora::kAllAttachments, 2, 0.2)},
      {{"b", {3}}, lora::random_lora_set("b", cfg.n_blocks, cfg.d_model, 4, 4.0, lora::kAllAttachments, 3, 0.2)}};
  const auto trace = run_pipeline(model, prompt, latent, subjects, {});
  const lora::SubjectMask ones = lora::all_ones_mask(cfg.n_img());
  const ActiveLora both[] = {{&subjects[0].lora, ones, std::nullopt}, {&subjects[1].lora, ones, std::nullopt}};
  DenseTensor x = latent;
  for (std::size_t t = 0; t <= cfg.mask_step; ++t) {
    EXPECT_EQ(trace.steps[t].latent, x) << "step " << t;
    x = forward_step(model, prompt, x, both).next_latent;
  }
}

TEST(TwoSubjects, MasksSplitIntoHalves) {
  const ToyModelConfig cfg;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto fx = fixtures::make_two_subject_fixture(cfg, seed);
    const auto trace = run_pipeline(fx.model, fx.prompt, fx.latent, fx.subjects, {});
    ASSERT_TRUE(trace.extraction.has_value());
    const auto left = fixtures::left_half_mask(cfg);
    lora::SubjectMask right(left.size());
    for (std::size_t i = 0; i < left.size(); ++i) right[i] = 1 - left[i];
    EXPECT_EQ(trace.extraction->token_masks[0], left) << "seed " << seed;
    EXPECT_EQ(trace.extraction->token_masks[1], right) << "seed " << seed;
  }
}

TEST(TwoSubjects, ComplementaryMasksMatchSingleAdapterRuns) {
  const ToyModelConfig cfg;
  const auto fx = fixtures::make_two_subject_fixture(cfg, 4);
  const auto left = fixtures::left_half_mask(cfg);
  lora::SubjectMask right(left.size());
  for (std::size_t i = 0; i < left.size(); ++i) right[i] = 1 - left[i];
  const lora::SubjectMask ones = lora::all_ones_mask(cfg.n_img());
  const ActiveLora joint[] = {{&fx.subjects[0].lora, left, std::nullopt},
                              {&fx.subjects[1].lora, right, std::nullopt}};
  const ActiveLora solo_a[] = {{&fx.subjects[0].lora, ones, std::nullopt}};
  const ActiveLora solo_b[] = {{&fx.subjects[1].lora, ones, std::nullopt}};
  const ActiveLora unmasked[] = {{&fx.subjects[0].lora, ones, std::nullopt},
                                 {&fx.subjects[1].lora, ones, std::nullopt}};
  const auto a = forward_step(fx.model, fx.prompt, fx.latent, solo_a).output;
  const auto b = forward_step(fx.model, fx.prompt, fx.latent, solo_b).output;
  auto region_error = [&](std::span<const ActiveLora> loras) {
    const auto out = forward_step(fx.model, fx.prompt, fx.latent, loras).output;
    double diff = 0.0, ref = 0.0;
    for (std::size_t i = 0; i < cfg.n_img(); ++i) {
      const auto& single = left[i] ? a : b;
      for (std::size_t c = 0; c < cfg.d_model; ++c) {
        diff += std::pow(double(out(i, c)) - single(i, c), 2);
        ref += std::pow(double(single(i, c)), 2);
      }
    }
    return std::sqrt(diff / ref);
  };
  const double masked = region_error(joint), plain = region_error(unmasked);
  EXPECT_LT(masked, 0.05);
  EXPECT_LT(masked, 0.25 * plain) << "masked " << masked << " unmasked " << plain;
}

TEST(TwoSubjects, EmptyWinnerWarns) {
  // Tokens 1 and 2 carry the same indicator, so both subjects get bit-identical maps
  // and every region ties, going to A.
  ToyModelConfig cfg;
  auto fx = fixtures::make_two_subject_fixture(cfg, 1);
  fx.subjects[0].span.token_indices = {1};
  fx.subjects[1].span.token_indices = {2};
  const auto trace = run_pipeline(fx.model, fx.prompt, fx.latent, fx.subjects, {});
  EXPECT_EQ(trace.extraction->token_masks[0], lora::all_ones_mask(cfg.n_img()));
  EXPECT_EQ(trace.extraction->token_masks[1], lora::SubjectMask(cfg.n_img(), 0));
  ASSERT_EQ(trace.warnings.size(), 1u);
  EXPECT_EQ(trace.warnings[0].subject, "B");
  EXPECT_EQ(trace.steps.size(), cfg.n_steps);
}

TEST(PredictedSample, ExtrapolatesToEnd) {
  ToyModelConfig cfg;
  const DenseTensor latent(Shape{64, 32}, std::vector<float>(64 * 32, 1.0f));
  const DenseTensor out(Shape{64, 32}, std::vector<float>(64 * 32, 2.0f));
  const auto x0 = predicted_sample(cfg, latent, out, 0);
  for (float v : x0.data()) EXPECT_FLOAT_EQ(v, -1.0f);
  const auto late = predicted_sample(cfg, latent, out, 6);
  for (float v : late.data()) EXPECT_FLOAT_EQ(v, 0.0f);
}
