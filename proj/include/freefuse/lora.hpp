#pragma once

// Low-rank adapters: delta computation, spatial masking of deltas, multi-adapter
// fusion, and the directory format for adapter sets.

#include <algorithm>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "freefuse/attnmap.hpp"
#include "freefuse/error.hpp"
#include "freefuse/tensor.hpp"
#include "freefuse/tensor_io.hpp"
#include "freefuse/text.hpp"

namespace freefuse::lora {

enum class Attachment { Q, K, V, FF };

inline constexpr Attachment kAllAttachments[] = {Attachment::Q, Attachment::K, Attachment::V,
                                                 Attachment::FF};

inline const char* to_string(Attachment a) {
  switch (a) {
    case Attachment::Q: return "Q";
    case Attachment::K: return "K";
    case Attachment::V: return "V";
    case Attachment::FF: return "FF";
  }
  return "?";
}

inline Attachment parse_attachment(std::string_view name) {
  for (Attachment a : kAllAttachments) {
    if (name == to_string(a)) return a;
  }
  fail(ErrorCode::parse, "unknown attachment point '" + std::string(name) + "' (use Q, K, V or FF)");
}

inline std::vector<Attachment> parse_attachment_list(std::string_view list) {
  std::vector<Attachment> out;
  for (const auto& item : text::split(list, ',')) out.push_back(parse_attachment(item));
  return out;
}

/// delta(x) = (alpha / r) * (x down^T) up^T, applied to each token row.
struct LoraLayer {
  DenseTensor down;  // r x d_in
  DenseTensor up;    // d_out x r
  double alpha = 1.0;

  std::size_t rank() const { return down.rows(); }
  std::size_t d_in() const { return down.cols(); }
  std::size_t d_out() const { return up.rows(); }

  void validate() const {
    require_matrix(down, "LoRA down");
    require_matrix(up, "LoRA up");
    require(up.cols() == down.rows(), ErrorCode::shape,
            "LoRA up " + shape_string(up.shape()) + " and down " + shape_string(down.shape()) +
                " disagree on rank");
  }
  friend bool operator==(const LoraLayer&, const LoraLayer&) = default;
};

struct LayerKey {
  std::size_t block = 0;
  Attachment point = Attachment::Q;
  friend auto operator<=>(const LayerKey&, const LayerKey&) = default;
};

/// One subject's adapters, keyed by (block, attachment point), with per-attachment
/// toggles used by the ablation probe.
struct LoraSet {
  std::string id;
  std::size_t rank = 1;
  double alpha = 1.0;
  std::map<LayerKey, LoraLayer> layers;
  std::set<Attachment> disabled;

  const LoraLayer* active(std::size_t block, Attachment point) const {
    if (disabled.contains(point)) return nullptr;
    const auto it = layers.find({block, point});
    return it == layers.end() ? nullptr : &it->second;
  }

  std::size_t max_block() const {
    std::size_t m = 0;
    for (const auto& [key, layer] : layers) m = std::max(m, key.block);
    return m;
  }

  bool operator==(const LoraSet&) const = default;
};

/// Binary gate over token rows ({0,1}).
using SubjectMask = std::vector<std::uint8_t>;

inline SubjectMask all_ones_mask(std::size_t n) { return SubjectMask(n, 1); }

inline DenseTensor lora_delta(const DenseTensor& x, const LoraLayer& layer) {
  layer.validate();
  require_matrix(x, "LoRA input");
  require(x.cols() == layer.d_in(), ErrorCode::shape,
          "LoRA input has " + std::to_string(x.cols()) + " features, adapter expects " +
              std::to_string(layer.d_in()));
  const std::size_t n = x.rows(), r = layer.rank(), d_out = layer.d_out();
  const double scale = layer.alpha / static_cast<double>(r);
  std::vector<double> mid(r);
  DenseTensor out(Shape{n, d_out});
  for (std::size_t i = 0; i < n; ++i) {
    const auto xi = x.row(i);
    for (std::size_t k = 0; k < r; ++k) {
      const auto dk = layer.down.row(k);
      double acc = 0.0;
      for (std::size_t c = 0; c < xi.size(); ++c) acc += static_cast<double>(xi[c]) * dk[c];
      mid[k] = acc;
    }
    for (std::size_t o = 0; o < d_out; ++o) {
      const auto uo = layer.up.row(o);
      double acc = 0.0;
      for (std::size_t k = 0; k < r; ++k) acc += mid[k] * uo[k];
      out(i, o) = static_cast<float>(scale * acc);
    }
  }
  return out;
}

/// Rows whose mask entry is 0 become zero; other rows are copied.
inline DenseTensor apply_subject_mask(const DenseTensor& delta, const SubjectMask& mask) {
  require_matrix(delta, "LoRA delta");
  require(mask.size() == delta.rows(), ErrorCode::shape,
          "mask has " + std::to_string(mask.size()) + " entries, delta has " +
              std::to_string(delta.rows()) + " rows");
  DenseTensor out = delta;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] == 0) std::fill(out.row(i).begin(), out.row(i).end(), 0.0f);
  }
  return out;
}

struct MaskedDelta {
  DenseTensor delta;
  SubjectMask mask;
};

/// Sum over subjects of mask_l (.) delta_l.
inline DenseTensor fuse_masked_deltas(std::span<const MaskedDelta> parts) {
  require(!parts.empty(), ErrorCode::invalid_argument, "nothing to fuse");
  const Shape& shape = parts.front().delta.shape();
  std::vector<double> acc(shape_volume(shape), 0.0);
  for (const auto& part : parts) {
    require(part.delta.shape() == shape, ErrorCode::shape,
            "delta shapes differ: " + shape_string(part.delta.shape()) + " vs " +
                shape_string(shape));
    require(part.mask.size() == part.delta.rows(), ErrorCode::shape,
            "mask length does not match delta rows");
    const std::size_t cols = part.delta.cols();
    for (std::size_t i = 0; i < part.mask.size(); ++i) {
      if (part.mask[i] == 0) continue;
      const auto row = part.delta.row(i);
      for (std::size_t c = 0; c < cols; ++c) acc[i * cols + c] += row[c];
    }
  }
  return DenseTensor(shape, std::vector<float>(acc.begin(), acc.end()));
}

/// Pixel-resolution mask to token-grid mask: majority vote over each token's pixel
/// footprint (pixel (u,v) belongs to token (floor(u*gh/H), floor(v*gw/W))), ties to 1.
inline SubjectMask downsample_mask(std::span<const std::uint8_t> pixels, std::size_t height,
                                   std::size_t width, attn::GridShape grid) {
  require(pixels.size() == height * width && height >= 1 && width >= 1, ErrorCode::shape,
          "pixel mask size mismatch");
  require(grid.grid_h >= 1 && grid.grid_w >= 1, ErrorCode::shape, "degenerate token grid");
  std::vector<std::size_t> ones(grid.tokens(), 0), total(grid.tokens(), 0);
  for (std::size_t u = 0; u < height; ++u) {
    for (std::size_t v = 0; v < width; ++v) {
      const std::size_t t = (u * grid.grid_h / height) * grid.grid_w + v * grid.grid_w / width;
      ++total[t];
      if (pixels[u * width + v]) ++ones[t];
    }
  }
  SubjectMask out(grid.tokens(), 0);
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = (2 * ones[t] >= total[t]) ? 1 : 0;
  return out;
}

/// Random adapter set. `up_scale` multiplies the up matrices (0 gives an inert set).
inline LoraSet random_lora_set(const std::string& id, std::size_t n_blocks, std::size_t d_model,
                               std::size_t rank, double alpha,
                               std::span<const Attachment> attachments, std::uint64_t seed,
                               double up_scale = 1.0) {
  require(rank >= 1, ErrorCode::invalid_argument, "LoRA rank must be >= 1");
  SeededRng rng(seed);
  LoraSet set{id, rank, alpha, {}, {}};
  const double down_scale = 1.0 / std::sqrt(static_cast<double>(d_model));
  const double up_init = up_scale / std::sqrt(static_cast<double>(rank));
  for (std::size_t b = 0; b < n_blocks; ++b) {
    for (Attachment a : attachments) {
      LoraLayer layer{rng.uniform_tensor({rank, d_model}, down_scale),
                      rng.uniform_tensor({d_model, rank}, up_init), alpha};
      set.layers.emplace(LayerKey{b, a}, std::move(layer));
    }
  }
  return set;
}

inline std::string layer_file_stem(const LayerKey& key) {
  return "b" + std::to_string(key.block) + "_" + to_string(key.point);
}

/// Directory layout: manifest.txt (id, rank, alpha, attach = block:point,...) plus
/// b<block>_<point>_down.fft / _up.fft tensors.
inline void save_lora_set(const LoraSet& set, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  manifest << "id = " << set.id << "\n";
  manifest << "rank = " << set.rank << "\n";
  manifest << "alpha = " << text::format_number(set.alpha) << "\n";
  manifest << "attach = ";
  bool first = true;
  for (const auto& [key, layer] : set.layers) {
    manifest << (first ? "" : ",") << key.block << ":" << to_string(key.point);
    first = false;
    io::save_tensor(layer.down, dir / (layer_file_stem(key) + "_down.fft"));
    io::save_tensor(layer.up, dir / (layer_file_stem(key) + "_up.fft"));
  }
  manifest << "\n";
  std::ofstream out(dir / "manifest.txt", std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + (dir / "manifest.txt").string());
  out << manifest.str();
}

inline LoraSet load_lora_set(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.txt";
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open " + manifest_path.string());
  std::stringstream body;
  body << in.rdbuf();
  LoraSet set;
  std::optional<std::string> attach;
  for (const auto& [key, value] : text::parse_key_values(body.str(), manifest_path.string())) {
    if (key == "id") set.id = value;
    else if (key == "rank") set.rank = text::parse_size(value, "rank");
    else if (key == "alpha") set.alpha = text::parse_double(value, "alpha");
    else if (key == "attach") attach = value;
    else fail(ErrorCode::parse, manifest_path.string() + ": unknown key '" + key + "'");
  }
  require(!set.id.empty() && attach.has_value(), ErrorCode::parse,
          manifest_path.string() + ": needs id and attach");
  for (const auto& item : text::split(*attach, ',')) {
    const auto colon = item.find(':');
    require(colon != std::string::npos, ErrorCode::parse,
            manifest_path.string() + ": attachment '" + item + "' must be block:point");
    LayerKey key{text::parse_size(item.substr(0, colon), "block"),
                 parse_attachment(item.substr(colon + 1))};
    LoraLayer layer{io::load_tensor(dir / (layer_file_stem(key) + "_down.fft")),
                    io::load_tensor(dir / (layer_file_stem(key) + "_up.fft")), set.alpha};
    layer.validate();
    require(layer.rank() == set.rank, ErrorCode::shape,
            manifest_path.string() + ": layer " + item + " has rank " +
                std::to_string(layer.rank()) + ", manifest says " + std::to_string(set.rank));
    set.layers.emplace(key, std::move(layer));
  }
  return set;
}

}  // namespace freefuse::lora
