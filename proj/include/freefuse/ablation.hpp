#pragma once

#include <cmath>
#include <cstdint>
#include <span>

#include "freefuse/lora.hpp"
#include "freefuse/toydit.hpp"

namespace freefuse::lora {

/// L2 distance between the toy model's image output with every adapter of `set`
/// enabled and with the `toggle_off` attachment points disabled at all blocks.
inline double layer_ablation_l2(const toydit::ToyModel& model, const LoraSet& set,
                                std::span<const Attachment> toggle_off, const DenseTensor& text,
                                const DenseTensor& latent) {
  if (toggle_off.empty()) return 0.0;
  LoraSet enabled = set;
  enabled.disabled.clear();
  LoraSet ablated = enabled;
  ablated.disabled.insert(toggle_off.begin(), toggle_off.end());

  const lora::SubjectMask ones = all_ones_mask(model.cfg.n_img());
  const toydit::ActiveLora full[] = {{&enabled, ones, std::nullopt}};
  const toydit::ActiveLora cut[] = {{&ablated, ones, std::nullopt}};
  const DenseTensor a = toydit::forward_step(model, text, latent, full).output;
  const DenseTensor b = toydit::forward_step(model, text, latent, cut).output;
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    sq += d * d;
  }
  return std::sqrt(sq);
}

/// Same probe on a prompt embedding and latent drawn from `seed`.
inline double layer_ablation_l2(const toydit::ToyModel& model, const LoraSet& set,
                                std::span<const Attachment> toggle_off, std::uint64_t seed) {
  return layer_ablation_l2(model, set, toggle_off, toydit::prompt_embedding(model.cfg, seed),
                           toydit::noise_latent(model.cfg, seed));
}

}  // namespace freefuse::lora
