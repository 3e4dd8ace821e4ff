#pragma once

// Engineered toy-model instances with controllable attention structure.
//
// Channel 0 of every token acts as a region indicator: image tokens carry +1 inside
// the target region and -1 outside, text tokens carry the sign of the region their
// subject should attend to (0 for filler tokens). Q and K projections read only
// that channel into the first dimension of each head, so every head's logit between
// tokens i and j is exactly beta * s_i * s_j. Value, FF and adapter outputs never
// write channel 0, so the indicator survives every block.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "freefuse/lora.hpp"
#include "freefuse/tensor.hpp"
#include "freefuse/toydit.hpp"

namespace freefuse::fixtures {

/// Left half of the grid (columns < grid_w / 2, at least one column).
inline lora::SubjectMask left_half_mask(const toydit::ToyModelConfig& cfg) {
  const std::size_t cut = std::max<std::size_t>(1, cfg.grid_w / 2);
  lora::SubjectMask mask(cfg.n_img(), 0);
  for (std::size_t r = 0; r < cfg.grid_h; ++r) {
    for (std::size_t c = 0; c < cut; ++c) mask[r * cfg.grid_w + c] = 1;
  }
  return mask;
}

/// Rewrites Q/K to read only the indicator channel with per-head logit beta * s_i * s_j,
/// and clears channel 0 of the value and FF outputs.
inline void engineer_indicator_attention(toydit::ToyModel& model, double beta) {
  const auto& cfg = model.cfg;
  const std::size_t dh = cfg.head_dim();
  const double gain = std::sqrt(std::max(beta, 0.0) * std::sqrt(static_cast<double>(dh)));
  for (auto& block : model.blocks) {
    for (auto* stream : {&block.text, &block.image}) {
      stream->wq = DenseTensor(Shape{cfg.d_model, cfg.d_model});
      stream->wk = DenseTensor(Shape{cfg.d_model, cfg.d_model});
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        stream->wq(h * dh, 0) = static_cast<float>(gain);
        stream->wk(h * dh, 0) = static_cast<float>(gain);
      }
      for (std::size_t c = 0; c < cfg.d_model; ++c) {
        stream->wv(0, c) = 0.0f;
        stream->wff(0, c) = 0.0f;
      }
    }
  }
}

/// Random V/FF adapters whose up matrices leave channel 0 untouched.
inline lora::LoraSet indicator_safe_lora(const toydit::ToyModelConfig& cfg, const std::string& id,
                                         std::uint64_t seed, double up_scale) {
  const lora::Attachment points[] = {lora::Attachment::V, lora::Attachment::FF};
  lora::LoraSet set = lora::random_lora_set(id, cfg.n_blocks, cfg.d_model, 4, 4.0, points, seed,
                                            up_scale);
  for (auto& [key, layer] : set.layers) {
    for (std::size_t k = 0; k < layer.rank(); ++k) layer.up(0, k) = 0.0f;
  }
  return set;
}

/// beta giving an in-region row the target locality ratio, for n_in in-region and
/// n_out out-of-region tokens: n_in e^b / (n_in e^b + n_out e^-b) = ratio.
inline double beta_for_locality(double ratio, std::size_t n_in, std::size_t n_out) {
  return 0.5 * std::log(ratio * static_cast<double>(n_out) /
                        ((1.0 - ratio) * static_cast<double>(n_in)));
}

struct LocalityFixture {
  toydit::ToyModel model;
  DenseTensor text;
  DenseTensor latent;
  lora::LoraSet lora;
  lora::SubjectMask mask;
  double target_ratio = 0.5;
};

/// A seeded model whose self-attention gives the left-half mask the requested
/// locality ratio.
inline LocalityFixture make_locality_fixture(const toydit::ToyModelConfig& cfg, std::uint64_t seed,
                                             double target_ratio, double lora_scale = 0.3) {
  LocalityFixture fx{toydit::build_toy_model(cfg, seed), toydit::prompt_embedding(cfg, seed),
                     toydit::noise_latent(cfg, seed), {}, left_half_mask(cfg), target_ratio};
  std::size_t n_in = 0;
  for (auto m : fx.mask) n_in += m;
  engineer_indicator_attention(fx.model,
                               beta_for_locality(target_ratio, n_in, cfg.n_img() - n_in));
  for (std::size_t i = 0; i < cfg.n_img(); ++i) fx.latent(i, 0) = fx.mask[i] ? 1.0f : -1.0f;
  for (std::size_t i = 0; i < cfg.n_text; ++i) fx.text(i, 0) = 0.0f;
  fx.lora = indicator_safe_lora(cfg, "subject", derive_seed(seed, 7), lora_scale);
  return fx;
}

struct TwoSubjectFixture {
  toydit::ToyModel model;
  DenseTensor prompt;
  DenseTensor latent;
  std::vector<toydit::Subject> subjects;  // "A" attends to the left half, "B" to the right
};

/// Subject A's activation tokens {1, 2} attend to the left half-grid and subject B's
/// {4, 5} to the right half; self-attention is local to each half.
inline TwoSubjectFixture make_two_subject_fixture(const toydit::ToyModelConfig& cfg,
                                                  std::uint64_t seed, double locality = 0.99) {
  require(cfg.n_text >= 6, ErrorCode::invalid_argument, "two-subject fixture needs n_text >= 6");
  TwoSubjectFixture fx{toydit::build_toy_model(cfg, seed), toydit::prompt_embedding(cfg, seed),
                       toydit::noise_latent(cfg, seed), {}};
  const lora::SubjectMask left = left_half_mask(cfg);
  std::size_t n_in = 0;
  for (auto m : left) n_in += m;
  engineer_indicator_attention(fx.model, beta_for_locality(locality, n_in, cfg.n_img() - n_in));
  for (std::size_t i = 0; i < cfg.n_img(); ++i) fx.latent(i, 0) = left[i] ? 1.0f : -1.0f;
  for (std::size_t i = 0; i < cfg.n_text; ++i) fx.prompt(i, 0) = 0.0f;
  fx.prompt(1, 0) = fx.prompt(2, 0) = 1.0f;
  fx.prompt(4, 0) = fx.prompt(5, 0) = -1.0f;
  fx.subjects.push_back({{"A", {1, 2}}, indicator_safe_lora(cfg, "A", derive_seed(seed, 11), 0.3)});
  fx.subjects.push_back({{"B", {4, 5}}, indicator_safe_lora(cfg, "B", derive_seed(seed, 12), 0.3)});
  return fx;
}

}  // namespace freefuse::fixtures
