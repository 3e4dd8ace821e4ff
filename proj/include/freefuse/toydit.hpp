#pragma once

// Deterministic toy double-stream transformer, the two-stage mask pipeline that
// runs on it, and the diagnostics that measure how well masked adapter outputs
// approximate individual adapter inference.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "freefuse/attnmap.hpp"
#include "freefuse/error.hpp"
#include "freefuse/lora.hpp"
#include "freefuse/superpixel.hpp"
#include "freefuse/tensor.hpp"

namespace freefuse::toydit {

struct ToyModelConfig {
  std::size_t n_blocks = 4;
  std::size_t d_model = 32;
  std::size_t n_heads = 2;
  std::size_t n_text = 8;
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t n_steps = 12;
  std::size_t mask_step = 3;   // no intervention before this step
  std::size_t mask_block = 2;  // block whose attention yields the masks

  attn::GridShape grid() const { return {grid_h, grid_w}; }
  std::size_t n_img() const { return grid_h * grid_w; }
  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    require(n_blocks >= 1, ErrorCode::invalid_argument, "n_blocks must be >= 1");
    require(d_model >= 3, ErrorCode::invalid_argument, "d_model must be >= 3");
    require(n_heads >= 1 && d_model % n_heads == 0, ErrorCode::invalid_argument,
            "d_model must be divisible by n_heads");
    require(n_text >= 1, ErrorCode::invalid_argument, "n_text must be >= 1");
    require(grid_h >= 1 && grid_w >= 1, ErrorCode::invalid_argument, "grid must be non-empty");
    require(n_steps >= 1, ErrorCode::invalid_argument, "n_steps must be >= 1");
    require(mask_step < n_steps, ErrorCode::invalid_argument,
            "mask_step " + std::to_string(mask_step) + " must be below n_steps " +
                std::to_string(n_steps));
    require(mask_block < n_blocks, ErrorCode::invalid_argument,
            "mask_block " + std::to_string(mask_block) + " must be below n_blocks " +
                std::to_string(n_blocks));
  }
  friend bool operator==(const ToyModelConfig&, const ToyModelConfig&) = default;
};

// Projections are stored as d_out x d_in and applied as x W^T.
struct StreamWeights {
  DenseTensor wq, wk, wv, wff;
};

struct Block {
  StreamWeights text;
  StreamWeights image;
};

struct ToyModel {
  ToyModelConfig cfg;
  std::vector<Block> blocks;

  bool operator==(const ToyModel& other) const {
    if (!(cfg == other.cfg) || blocks.size() != other.blocks.size()) return false;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      for (auto pick : {&Block::text, &Block::image}) {
        const auto& x = blocks[b].*pick;
        const auto& y = other.blocks[b].*pick;
        if (!(x.wq == y.wq && x.wk == y.wk && x.wv == y.wv && x.wff == y.wff)) return false;
      }
    }
    return true;
  }
};

inline ToyModel build_toy_model(const ToyModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SeededRng rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  const Shape square{cfg.d_model, cfg.d_model};
  auto stream = [&] {
    StreamWeights w;
    w.wq = rng.uniform_tensor(square, scale);
    w.wk = rng.uniform_tensor(square, scale);
    w.wv = rng.uniform_tensor(square, scale);
    w.wff = rng.uniform_tensor(square, scale);
    return w;
  };
  ToyModel model{cfg, {}};
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    Block block;
    block.text = stream();
    block.image = stream();
    model.blocks.push_back(std::move(block));
  }
  return model;
}

/// Gaussian latent (N_img x d_model) and prompt embedding (N_text x d_model).
inline DenseTensor noise_latent(const ToyModelConfig& cfg, std::uint64_t seed) {
  SeededRng rng(derive_seed(seed, 1));
  return rng.normal_tensor({cfg.n_img(), cfg.d_model});
}

inline DenseTensor prompt_embedding(const ToyModelConfig& cfg, std::uint64_t seed) {
  SeededRng rng(derive_seed(seed, 2));
  return rng.normal_tensor({cfg.n_text, cfg.d_model});
}

/// One adapter participating in a forward pass. The image gate has N_img entries;
/// text rows pass unmasked unless `text_mask` is given.
struct ActiveLora {
  const lora::LoraSet* set = nullptr;
  lora::SubjectMask image_mask;
  std::optional<lora::SubjectMask> text_mask;
};

struct BlockTrace {
  DenseTensor q, k, v;  // joint [text; image] rows, all heads concatenated
  attn::AttentionMap a_cross;
  attn::AttentionMap a_self;
  DenseTensor hidden;  // block output, joint rows
};

struct StepOutput {
  DenseTensor output;       // image rows after the last block
  DenseTensor next_latent;  // latent - output / n_steps
  std::map<std::size_t, BlockTrace> traces;
};

namespace detail {

// rows [begin, end) of x times w^T, written into out rows at the same positions.
inline void linear_rows(const DenseTensor& x, const DenseTensor& w, std::size_t begin,
                        std::size_t end, DenseTensor& out) {
  const std::size_t d_in = x.cols(), d_out = w.rows();
  for (std::size_t i = begin; i < end; ++i) {
    const auto xi = x.row(i);
    for (std::size_t o = 0; o < d_out; ++o) {
      const auto wo = w.row(o);
      double acc = 0.0;
      for (std::size_t c = 0; c < d_in; ++c) acc += static_cast<double>(xi[c]) * wo[c];
      out(i, o) = static_cast<float>(acc);
    }
  }
}

inline DenseTensor two_stream_linear(const DenseTensor& x, std::size_t n_text,
                                     const DenseTensor& w_text, const DenseTensor& w_image) {
  DenseTensor out(Shape{x.rows(), w_text.rows()});
  linear_rows(x, w_text, 0, n_text, out);
  linear_rows(x, w_image, n_text, x.rows(), out);
  return out;
}

inline void add_lora_deltas(DenseTensor& target, const DenseTensor& input, std::size_t block,
                            lora::Attachment point, std::span<const ActiveLora> loras,
                            std::size_t n_text) {
  std::vector<lora::MaskedDelta> parts;
  for (const auto& active : loras) {
    const lora::LoraLayer* layer = active.set->active(block, point);
    if (!layer) continue;
    lora::SubjectMask gate = active.text_mask.value_or(lora::all_ones_mask(n_text));
    gate.insert(gate.end(), active.image_mask.begin(), active.image_mask.end());
    parts.push_back({lora::lora_delta(input, *layer), std::move(gate)});
  }
  if (parts.empty()) return;
  const DenseTensor fused = lora::fuse_masked_deltas(parts);
  require(fused.shape() == target.shape(), ErrorCode::shape,
          "adapter output shape " + shape_string(fused.shape()) + " does not match " +
              shape_string(target.shape()));
  for (std::size_t i = 0; i < target.size(); ++i) target[i] += fused[i];
}

// rows [begin, end) regrouped as heads x rows x head_dim.
inline DenseTensor split_heads(const DenseTensor& m, std::size_t begin, std::size_t end,
                               std::size_t heads) {
  const std::size_t dh = m.cols() / heads, n = end - begin;
  DenseTensor out(Shape{heads, n, dh});
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t c = 0; c < dh; ++c) out[(h * n + i) * dh + c] = m(begin + i, h * dh + c);
    }
  }
  return out;
}

inline DenseTensor joint_attention(const DenseTensor& q, const DenseTensor& k,
                                   const DenseTensor& v, std::size_t heads) {
  const std::size_t n = q.rows(), dh = q.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  DenseTensor out(Shape{n, q.cols()});
  std::vector<double> w(n), acc(dh);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < n; ++i) {
      double max_logit = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += static_cast<double>(q(i, off + c)) * k(j, off + c);
        w[j] = dot * scale;
        max_logit = std::max(max_logit, w[j]);
      }
      double sum = 0.0;
      for (double& x : w) {
        x = std::exp(x - max_logit);
        sum += x;
      }
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        const double wj = w[j] / sum;
        for (std::size_t c = 0; c < dh; ++c) acc[c] += wj * v(j, off + c);
      }
      for (std::size_t c = 0; c < dh; ++c) out(i, off + c) = static_cast<float>(acc[c]);
    }
  }
  return out;
}

}  // namespace detail

/// One denoising step. Each block runs joint attention over [text; image] with
/// stream-specific Q/K/V and FF weights plus the fused masked adapter deltas at every
/// attachment point; then latent <- latent - output / n_steps.
inline StepOutput forward_step(const ToyModel& model, const DenseTensor& text,
                               const DenseTensor& latent, std::span<const ActiveLora> loras,
                               const std::set<std::size_t>& capture = {}) {
  const auto& cfg = model.cfg;
  require(text.rank() == 2 && text.rows() == cfg.n_text && text.cols() == cfg.d_model,
          ErrorCode::shape, "prompt embedding must be " + std::to_string(cfg.n_text) + "x" +
                                std::to_string(cfg.d_model) + ", got " + shape_string(text.shape()));
  require(latent.rank() == 2 && latent.rows() == cfg.n_img() && latent.cols() == cfg.d_model,
          ErrorCode::shape, "latent must be " + std::to_string(cfg.n_img()) + "x" +
                                std::to_string(cfg.d_model) + ", got " + shape_string(latent.shape()));
  for (std::size_t b : capture) {
    require(b < cfg.n_blocks, ErrorCode::invalid_argument,
            "capture block " + std::to_string(b) + " does not exist");
  }
  for (const auto& active : loras) {
    require(active.set != nullptr, ErrorCode::invalid_argument, "null adapter set");
    require(active.image_mask.size() == cfg.n_img(), ErrorCode::shape,
            "mask for '" + active.set->id + "' has " + std::to_string(active.image_mask.size()) +
                " entries, expected " + std::to_string(cfg.n_img()));
    require(!active.text_mask || active.text_mask->size() == cfg.n_text, ErrorCode::shape,
            "text mask for '" + active.set->id + "' has the wrong length");
    require(active.set->layers.empty() || active.set->max_block() < cfg.n_blocks,
            ErrorCode::invalid_argument,
            "adapter '" + active.set->id + "' references a block the model does not have");
  }

  const std::size_t n_text = cfg.n_text, n_all = n_text + cfg.n_img();
  DenseTensor x(Shape{n_all, cfg.d_model});
  std::copy(text.data().begin(), text.data().end(), x.data().begin());
  std::copy(latent.data().begin(), latent.data().end(), x.data().begin() + static_cast<std::ptrdiff_t>(text.size()));

  StepOutput result;
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    const Block& block = model.blocks[b];
    DenseTensor q = detail::two_stream_linear(x, n_text, block.text.wq, block.image.wq);
    DenseTensor k = detail::two_stream_linear(x, n_text, block.text.wk, block.image.wk);
    DenseTensor v = detail::two_stream_linear(x, n_text, block.text.wv, block.image.wv);
    detail::add_lora_deltas(q, x, b, lora::Attachment::Q, loras, n_text);
    detail::add_lora_deltas(k, x, b, lora::Attachment::K, loras, n_text);
    detail::add_lora_deltas(v, x, b, lora::Attachment::V, loras, n_text);

    const DenseTensor attended = detail::joint_attention(q, k, v, cfg.n_heads);
    DenseTensor h1 = x;
    for (std::size_t i = 0; i < h1.size(); ++i) h1[i] += attended[i];

    DenseTensor ff = detail::two_stream_linear(h1, n_text, block.text.wff, block.image.wff);
    for (float& val : ff.data()) val = std::tanh(val);
    detail::add_lora_deltas(ff, h1, b, lora::Attachment::FF, loras, n_text);
    for (std::size_t i = 0; i < h1.size(); ++i) h1[i] += ff[i];

    if (capture.contains(b)) {
      const DenseTensor q_text = detail::split_heads(q, 0, n_text, cfg.n_heads);
      const DenseTensor q_img = detail::split_heads(q, n_text, n_all, cfg.n_heads);
      const DenseTensor k_img = detail::split_heads(k, n_text, n_all, cfg.n_heads);
      result.traces.emplace(b, BlockTrace{q, k, v, attn::compute_cross_attention(q_text, k_img),
                                          attn::compute_cross_attention(q_img, k_img), h1});
    }
    x = std::move(h1);
  }

  result.output = DenseTensor(Shape{cfg.n_img(), cfg.d_model},
                              std::vector<float>(x.data().begin() + static_cast<std::ptrdiff_t>(n_text * cfg.d_model),
                                                 x.data().end()));
  const double gamma = 1.0 / static_cast<double>(cfg.n_steps);
  result.next_latent = latent;
  for (std::size_t i = 0; i < latent.size(); ++i) {
    result.next_latent[i] = static_cast<float>(latent[i] - gamma * result.output[i]);
  }
  return result;
}

/// Predicted clean sample at step t: the contraction extrapolated over the remaining steps.
inline DenseTensor predicted_sample(const ToyModelConfig& cfg, const DenseTensor& latent,
                                    const DenseTensor& output, std::size_t step) {
  const double factor = static_cast<double>(cfg.n_steps - step) / static_cast<double>(cfg.n_steps);
  DenseTensor x0 = latent;
  for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = static_cast<float>(latent[i] - factor * output[i]);
  return x0;
}

struct Subject {
  attn::SubjectTokenSpan span;
  lora::LoraSet lora;
};

struct PipelineConfig {
  attn::SinkFilterConfig sink;
  superpixel::SlicParams slic;
  double top_fraction = 0.01;
  bool mask_text_tokens = false;
};

struct PipelineWarning {
  std::string subject;
  std::string message;
};

struct MaskExtraction {
  std::size_t step = 0;
  std::size_t block = 0;
  BlockTrace trace;
  std::vector<DenseTensor> subject_maps;  // per subject, N_img
  PixelGrid x0;
  superpixel::SuperpixelLabeling labeling;
  superpixel::SubjectMaskSet pixel_masks;
  std::vector<lora::SubjectMask> token_masks;
};

struct StepRecord {
  DenseTensor latent;  // input latent of this step
  PixelGrid x0;
  std::optional<superpixel::SubjectMaskSet> masks;
};

struct GenerationTrace {
  std::vector<StepRecord> steps;
  DenseTensor final_latent;
  std::optional<MaskExtraction> extraction;
  std::vector<PipelineWarning> warnings;
};

/// Stage-1 mask derivation from a captured block: attention maps per subject,
/// SLIC over the decoded sample, voting, and token-grid downsampling.
inline MaskExtraction extract_masks(const ToyModelConfig& cfg, const BlockTrace& trace,
                                    const PixelGrid& x0, std::span<const Subject> subjects,
                                    const PipelineConfig& pcfg,
                                    std::vector<PipelineWarning>* warnings = nullptr) {
  std::vector<attn::SubjectTokenSpan> spans;
  for (const auto& s : subjects) spans.push_back(s.span);
  MaskExtraction ex{0, 0, trace, {}, x0, {}, {}, {}};
  ex.subject_maps = attn::subject_attention_maps(trace.a_cross, &trace.a_self, cfg.grid(), spans,
                                                 pcfg.sink, pcfg.top_fraction);
  ex.labeling = superpixel::slic_segment(x0, pcfg.slic);
  std::vector<superpixel::SubjectMap> maps;
  for (std::size_t l = 0; l < subjects.size(); ++l) {
    maps.push_back({subjects[l].span.lora_id,
                    superpixel::upsample_map(ex.subject_maps[l], cfg.grid(), x0.height(), x0.width())});
  }
  ex.pixel_masks = superpixel::vote_superpixels(maps, ex.labeling);
  for (std::size_t l = 0; l < subjects.size(); ++l) {
    const auto& mask = ex.pixel_masks.masks[l];
    if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; })) {
      if (warnings) warnings->push_back({subjects[l].span.lora_id, "won no superpixels; mask is empty"});
      ex.token_masks.emplace_back(cfg.n_img(), std::uint8_t{0});
    } else {
      ex.token_masks.push_back(lora::downsample_mask(mask, x0.height(), x0.width(), cfg.grid()));
    }
  }
  return ex;
}

inline lora::SubjectMask text_gate(const ToyModelConfig& cfg, const attn::SubjectTokenSpan& span) {
  lora::SubjectMask gate(cfg.n_text, 0);
  for (std::size_t idx : span.token_indices) gate.at(idx) = 1;
  return gate;
}

/// Two-stage run: steps before mask_step use all-ones masks; at mask_step one capture
/// pass derives the masks, and every step from mask_step on gates each adapter with its mask.
inline GenerationTrace run_pipeline(const ToyModel& model, const DenseTensor& prompt,
                                    const DenseTensor& initial_latent,
                                    std::span<const Subject> subjects,
                                    const PipelineConfig& pcfg) {
  const auto& cfg = model.cfg;
  cfg.validate();
  {
    std::vector<attn::SubjectTokenSpan> spans;
    for (const auto& s : subjects) spans.push_back(s.span);
    attn::validate_spans(spans, cfg.n_text);
  }

  GenerationTrace trace;
  std::vector<ActiveLora> active;
  for (const auto& s : subjects) {
    active.push_back({&s.lora, lora::all_ones_mask(cfg.n_img()), std::nullopt});
    if (pcfg.mask_text_tokens) active.back().text_mask = text_gate(cfg, s.span);
  }

  DenseTensor latent = initial_latent;
  for (std::size_t t = 0; t < cfg.n_steps; ++t) {
    if (t == cfg.mask_step && !subjects.empty()) {
      const StepOutput probe = forward_step(model, prompt, latent, active, {cfg.mask_block});
      const PixelGrid x0 = superpixel::decode_predicted_sample(
          predicted_sample(cfg, latent, probe.output, t), cfg.grid());
      MaskExtraction ex = extract_masks(cfg, probe.traces.at(cfg.mask_block), x0, subjects, pcfg,
                                        &trace.warnings);
      ex.step = t;
      ex.block = cfg.mask_block;
      for (std::size_t l = 0; l < active.size(); ++l) active[l].image_mask = ex.token_masks[l];
      trace.extraction = std::move(ex);
    }
    StepOutput out = forward_step(model, prompt, latent, active);
    StepRecord record{latent,
                      superpixel::decode_predicted_sample(predicted_sample(cfg, latent, out.output, t),
                                                          cfg.grid()),
                      std::nullopt};
    if (trace.extraction && t >= cfg.mask_step) record.masks = trace.extraction->pixel_masks;
    trace.steps.push_back(std::move(record));
    latent = std::move(out.next_latent);
  }
  trace.final_latent = std::move(latent);
  return trace;
}

// ---------------------------------------------------------------------------
// Diagnostics

/// Per-token cosine similarity of two adapters' output changes; 0 where either row
/// has norm below 1e-12.
inline DenseTensor conflict_cosine_map(const DenseTensor& delta_a, const DenseTensor& delta_b) {
  require_matrix(delta_a, "delta_a");
  require(delta_a.shape() == delta_b.shape(), ErrorCode::shape,
          "cosine map inputs differ in shape: " + shape_string(delta_a.shape()) + " vs " +
              shape_string(delta_b.shape()));
  DenseTensor out(Shape{delta_a.rows()});
  for (std::size_t i = 0; i < delta_a.rows(); ++i) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    const auto a = delta_a.row(i), b = delta_b.row(i);
    for (std::size_t c = 0; c < a.size(); ++c) {
      dot += static_cast<double>(a[c]) * b[c];
      na += static_cast<double>(a[c]) * a[c];
      nb += static_cast<double>(b[c]) * b[c];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    out[i] = (na < 1e-12 || nb < 1e-12)
                 ? 0.0f
                 : static_cast<float>(std::clamp(dot / (na * nb), -1.0, 1.0));
  }
  return out;
}

/// Attention mass that in-mask tokens keep inside the mask, over all mass they emit.
/// Above 0.5 exactly when in-mask attention dominates out-of-mask attention.
inline double locality_ratio(const attn::AttentionMap& a_self, const lora::SubjectMask& mask) {
  require(mask.size() == a_self.rows() && a_self.rows() == a_self.cols(), ErrorCode::shape,
          "mask length " + std::to_string(mask.size()) + " does not match self-attention map");
  double inside = 0.0, total = 0.0;
  bool any = false;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    any = true;
    const auto row = a_self.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) {
      total += row[j];
      if (mask[j]) inside += row[j];
    }
  }
  require(any, ErrorCode::invalid_argument, "locality ratio needs a non-empty mask");
  return inside / total;
}

/// ||softmax((Q + eps dQ)(K + eps dK)^T / sqrt(D)) - softmax(Q K^T / sqrt(D))||_F,
/// computed in double precision.
inline double attention_perturbation_norm(const DenseTensor& q, const DenseTensor& k,
                                          const DenseTensor& dq, const DenseTensor& dk,
                                          double eps) {
  require_matrix(q, "Q");
  require_matrix(k, "K");
  require(q.shape() == dq.shape() && k.shape() == dk.shape() && q.cols() == k.cols(),
          ErrorCode::shape, "perturbation inputs disagree in shape");
  const std::size_t n = q.rows(), m = k.rows(), d = q.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  auto softmax_rows = [&](double e) {
    std::vector<double> out(n * m);
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j < m; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          dot += (q(i, c) + e * dq(i, c)) * (k(j, c) + e * dk(j, c));
        }
        out[i * m + j] = dot * scale;
        mx = std::max(mx, out[i * m + j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < m; ++j) sum += (out[i * m + j] = std::exp(out[i * m + j] - mx));
      for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= sum;
    }
    return out;
  };
  const auto base = softmax_rows(0.0);
  const auto pert = softmax_rows(eps);
  double sq = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) sq += (pert[i] - base[i]) * (pert[i] - base[i]);
  return std::sqrt(sq);
}

/// ||M (.) (f(h + dh) - f(h + M (.) dh))||_F / max(||M (.) f(h + dh)||_F, 1e-12) for one
/// forward step, where f is the image output of the block stack.
inline double masked_equivalence_error(const ToyModel& model, const DenseTensor& text,
                                       const DenseTensor& latent, const lora::LoraSet& set,
                                       const lora::SubjectMask& mask) {
  require(mask.size() == model.cfg.n_img(), ErrorCode::shape, "mask length does not match grid");
  const ActiveLora full[] = {{&set, lora::all_ones_mask(model.cfg.n_img()), std::nullopt}};
  const ActiveLora masked[] = {{&set, mask, std::nullopt}};
  const DenseTensor f_full = forward_step(model, text, latent, full).output;
  const DenseTensor f_masked = forward_step(model, text, latent, masked).output;
  double diff = 0.0, ref = 0.0;
  const std::size_t d = f_full.cols();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    for (std::size_t c = 0; c < d; ++c) {
      const double a = f_full(i, c), b = f_masked(i, c);
      diff += (a - b) * (a - b);
      ref += a * a;
    }
  }
  return std::sqrt(diff) / std::max(std::sqrt(ref), 1e-12);
}

/// Image hidden state of `block` with the given adapters minus the same without any.
inline DenseTensor block_output_delta(const ToyModel& model, const DenseTensor& text,
                                      const DenseTensor& latent, std::span<const ActiveLora> loras,
                                      std::size_t block) {
  const auto with = forward_step(model, text, latent, loras, {block});
  const auto without = forward_step(model, text, latent, {}, {block});
  const DenseTensor& a = with.traces.at(block).hidden;
  const DenseTensor& b = without.traces.at(block).hidden;
  const std::size_t n_text = model.cfg.n_text, d = model.cfg.d_model;
  DenseTensor out(Shape{model.cfg.n_img(), d});
  for (std::size_t i = 0; i < out.rows(); ++i) {
    for (std::size_t c = 0; c < d; ++c) out(i, c) = a(n_text + i, c) - b(n_text + i, c);
  }
  return out;
}

}  // namespace freefuse::toydit
