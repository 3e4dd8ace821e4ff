#include <gtest/gtest.h>

#include "freefuse/ablation.hpp"
#include "freefuse/lora.hpp"
#include "test_support.hpp"

using namespace freefuse;
using namespace freefuse::lora;
using freefuse::testing::TempDir;

namespace {

LoraLayer random_layer(SeededRng& rng, std::size_t r, std::size_t d_in, std::size_t d_out) {
  return {rng.normal_tensor({r, d_in}), rng.normal_tensor({d_out, r}), 2.0};
}

// Plain triple loop in double precision.
std::vector<double> reference_delta(const DenseTensor& x, const LoraLayer& l) {
  const std::size_t n = x.rows(), r = l.rank(), d_in = l.d_in(), d_out = l.d_out();
  std::vector<double> out(n * d_out, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < d_out; ++o) {
      for (std::size_t k = 0; k < r; ++k) {
        double dx = 0.0;
        for (std::size_t c = 0; c < d_in; ++c) dx += double(l.down(k, c)) * x(i, c);
        out[i * d_out + o] += l.alpha / double(r) * l.up(o, k) * dx;
      }
    }
  }
  return out;
}

}  // namespace

TEST(LoraDelta, ZeroUpGivesZero) {
  SeededRng rng(1);
  LoraLayer layer{rng.normal_tensor({2, 5}), DenseTensor(Shape{3, 2}), 1.0};
  const auto d = lora_delta(rng.normal_tensor({4, 5}), layer);
  EXPECT_EQ(d.shape(), (Shape{4, 3}));
  for (float v : d.data()) EXPECT_EQ(v, 0.0f);
}

TEST(LoraDelta, RankOneCopiesFirstColumn) {
  LoraLayer layer{DenseTensor(Shape{1, 3}, {1, 0, 0}), DenseTensor(Shape{3, 1}, {1, 0, 0}), 1.0};
  const DenseTensor x(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(lora_delta(x, layer).values(), (std::vector<float>{1, 0, 0, 4, 0, 0}));
}

TEST(LoraDelta, AlphaScalesLinearlyAndMatchesReference) {
  SeededRng rng(2);
  LoraLayer layer = random_layer(rng, 3, 6, 4);
  const DenseTensor x = rng.normal_tensor({5, 6});
  const auto d1 = lora_delta(x, layer);
  const auto ref = reference_delta(x, layer);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(d1[i], ref[i], 1e-5 * (1 + std::abs(ref[i])));
  layer.alpha *= 2.0;
  const auto d2 = lora_delta(x, layer);
  for (std::size_t i = 0; i < d1.size(); ++i) EXPECT_EQ(d2[i], 2.0f * d1[i]);
}

TEST(LoraDelta, RejectsDimensionMismatch) {
  SeededRng rng(3);
  const LoraLayer layer = random_layer(rng, 2, 4, 4);
  EXPECT_THROW(lora_delta(rng.normal_tensor({3, 5}), layer), Error);
  const LoraLayer bad{rng.normal_tensor({2, 4}), rng.normal_tensor({4, 3}), 1.0};
  EXPECT_THROW(lora_delta(rng.normal_tensor({3, 4}), bad), Error);
}

TEST(SubjectMaskApply, HandCases) {
  SeededRng rng(4);
  const DenseTensor d = rng.normal_tensor({4, 3});
  EXPECT_EQ(apply_subject_mask(d, all_ones_mask(4)), d);
  const auto zeroed = apply_subject_mask(d, SubjectMask(4, 0));
  for (float v : zeroed.data()) EXPECT_EQ(v, 0.0f);
  const auto alt = apply_subject_mask(d, {1, 0, 1, 0});
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(alt(0, c), d(0, c));
    EXPECT_EQ(alt(1, c), 0.0f);
    EXPECT_EQ(alt(2, c), d(2, c));
    EXPECT_EQ(alt(3, c), 0.0f);
  }
  EXPECT_THROW(apply_subject_mask(d, SubjectMask(3, 1)), Error);
}

TEST(SubjectMaskApply, ProjectionAndLinearity) {
  SeededRng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(20), c = 1 + rng.below(6);
    const DenseTensor d1 = rng.normal_tensor({n, c}), d2 = rng.normal_tensor({n, c});
    SubjectMask m(n);
    for (auto& v : m) v = static_cast<std::uint8_t>(rng.below(2));
    const auto once = apply_subject_mask(d1, m);
    ASSERT_EQ(apply_subject_mask(once, m), once);

    // a, b are powers of two so the float combination is exact
    DenseTensor combo(Shape{n, c});
    for (std::size_t i = 0; i < combo.size(); ++i) combo[i] = 0.5f * d1[i] - 4.0f * d2[i];
    const auto lhs = apply_subject_mask(combo, m);
    const auto m1 = apply_subject_mask(d1, m), m2 = apply_subject_mask(d2, m);
    for (std::size_t i = 0; i < combo.size(); ++i) ASSERT_EQ(lhs[i], 0.5f * m1[i] - 4.0f * m2[i]);
  }
}

TEST(Fuse, ComplementaryMasksSelectOneDeltaPerRow) {
  SeededRng rng(6);
  const DenseTensor a = rng.normal_tensor({6, 3}), b = rng.normal_tensor({6, 3});
  const SubjectMask ma{1, 0, 1, 1, 0, 0}, mb{0, 1, 0, 0, 1, 1};
  const MaskedDelta parts[] = {{a, ma}, {b, mb}};
  const auto fused = fuse_masked_deltas(parts);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto& winner = ma[i] ? a : b;
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(fused(i, c), winner(i, c));
  }
}

TEST(Fuse, AllOnesIsPlainSumAndZeroMaskIsZero) {
  SeededRng rng(7);
  const DenseTensor a = rng.normal_tensor({4, 2}), b = rng.normal_tensor({4, 2});
  const MaskedDelta both[] = {{a, all_ones_mask(4)}, {b, all_ones_mask(4)}};
  const auto sum = fuse_masked_deltas(both);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(sum[i], static_cast<float>(double(a[i]) + b[i]));
  const MaskedDelta none[] = {{a, SubjectMask(4, 0)}};
  const auto fused_none = fuse_masked_deltas(none);
  for (float v : fused_none.data()) EXPECT_EQ(v, 0.0f);
  const MaskedDelta mismatch[] = {{a, all_ones_mask(4)}, {rng.normal_tensor({4, 3}), all_ones_mask(4)}};
  EXPECT_THROW(fuse_masked_deltas(mismatch), Error);
}

TEST(DownsampleMask, MajorityWithTiesToOne) {
  // 4x4 pixels onto a 2x2 grid; token footprints are 2x2 blocks
  const std::uint8_t px[] = {1, 1, 0, 0,  //
                             1, 0, 0, 1,  //
                             0, 0, 1, 1,  //
                             0, 0, 1, 0};
  EXPECT_EQ(downsample_mask(px, 4, 4, {2, 2}), (SubjectMask{1, 0, 0, 1}));
  const std::uint8_t half[] = {1, 0, 1, 0};
  EXPECT_EQ(downsample_mask(half, 2, 2, {1, 1}), (SubjectMask{1}));
  EXPECT_THROW(downsample_mask(half, 2, 3, {1, 1}), Error);
}

TEST(LoraSetFiles, SaveLoadRoundTrip) {
  TempDir dir("lora");
  const Attachment points[] = {Attachment::V, Attachment::FF};
  const LoraSet set = random_lora_set("hero", 3, 8, 2, 4.0, points, 99, 0.5);
  save_lora_set(set, dir / "hero");
  EXPECT_EQ(load_lora_set(dir / "hero"), set);
  EXPECT_THROW(load_lora_set(dir / "missing"), Error);
}

TEST(LoraSetFiles, RandomSetIsDeterministic) {
  EXPECT_EQ(random_lora_set("a", 2, 8, 2, 1.0, kAllAttachments, 5),
            random_lora_set("a", 2, 8, 2, 1.0, kAllAttachments, 5));
  EXPECT_NE(random_lora_set("a", 2, 8, 2, 1.0, kAllAttachments, 5),
            random_lora_set("a", 2, 8, 2, 1.0, kAllAttachments, 6));
}

TEST(Attachments, ParseNames) {
  EXPECT_EQ(parse_attachment_list("Q, FF,V"),
            (std::vector<Attachment>{Attachment::Q, Attachment::FF, Attachment::V}));
  EXPECT_TRUE(parse_attachment_list("").empty());
  try {
    parse_attachment("ff");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.exit_code(), 2);
  }
}

class Ablation : public ::testing::Test {
 protected:
  toydit::ToyModelConfig cfg;
  toydit::ToyModel model = toydit::build_toy_model(cfg, 17);
};

TEST_F(Ablation, EmptyToggleIsExactlyZero) {
  const LoraSet set = random_lora_set("s", cfg.n_blocks, cfg.d_model, 4, 4.0, kAllAttachments, 1);
  EXPECT_EQ(layer_ablation_l2(model, set, {}, 3), 0.0);
}

TEST_F(Ablation, ZeroUpMatricesGiveZero) {
  const LoraSet set =
      random_lora_set("s", cfg.n_blocks, cfg.d_model, 4, 4.0, kAllAttachments, 1, 0.0);
  EXPECT_EQ(layer_ablation_l2(model, set, kAllAttachments, 3), 0.0);
}

TEST_F(Ablation, OnlyCarryingPointMatters) {
  const Attachment v[] = {Attachment::V};
  LoraSet set = random_lora_set("s", 1, cfg.d_model, 4, 4.0, v, 2, 0.5);  // block 0 only
  for (Attachment a : {Attachment::Q, Attachment::K, Attachment::FF}) {
    const Attachment one[] = {a};
    EXPECT_EQ(layer_ablation_l2(model, set, one, 3), 0.0) << to_string(a);
  }
  EXPECT_GT(layer_ablation_l2(model, set, v, 3), 0.0);
  EXPECT_EQ(layer_ablation_l2(model, set, v, 3), layer_ablation_l2(model, set, v, 3));
}
