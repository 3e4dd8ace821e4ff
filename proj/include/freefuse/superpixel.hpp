#pragma once

// SLIC superpixels over the predicted sample and superpixel-level voting of
// per-subject attention maps into a mask partition.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "freefuse/attnmap.hpp"
#include "freefuse/error.hpp"
#include "freefuse/tensor.hpp"

namespace freefuse::superpixel {

struct SlicParams {
  std::optional<std::size_t> n_segments;  // unset: floor(sqrt(H*W))
  double compactness = 10.0;
  double sigma = 1.0;
  std::size_t iterations = 10;
  // Channel values are multiplied by this before the color distance, which puts
  // [0,1] inputs on the 0..100 lightness scale the compactness default assumes.
  double color_scale = 100.0;

  std::size_t segments_for(std::size_t pixels) const {
    return n_segments.value_or(
        std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(std::sqrt(
                                     static_cast<double>(pixels))))));
  }

  void validate() const {
    require(!n_segments || *n_segments >= 1, ErrorCode::invalid_argument,
            "n_segments must be >= 1");
    require(compactness > 0.0, ErrorCode::invalid_argument, "compactness must be > 0");
    require(sigma >= 0.0, ErrorCode::invalid_argument, "sigma must be >= 0");
    require(iterations >= 1, ErrorCode::invalid_argument, "iterations must be >= 1");
    require(color_scale > 0.0, ErrorCode::invalid_argument, "color_scale must be > 0");
  }
  friend bool operator==(const SlicParams&, const SlicParams&) = default;
};

struct SuperpixelLabeling {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t n_regions = 0;
  std::vector<std::uint32_t> labels;  // row-major, each in [0, n_regions)

  std::uint32_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  friend bool operator==(const SuperpixelLabeling&, const SuperpixelLabeling&) = default;
};

struct SubjectMaskSet {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::string> lora_ids;
  std::vector<std::vector<std::uint8_t>> masks;  // one H*W grid of {0,1} per id

  friend bool operator==(const SubjectMaskSet&, const SubjectMaskSet&) = default;
};

namespace detail {

inline std::vector<float> gaussian_blur(const PixelGrid& image, double sigma) {
  const std::size_t h = image.height(), w = image.width(), ch = image.channels();
  std::vector<float> src(image.values().begin(), image.values().end());
  if (sigma <= 0.0) return src;
  const int radius = std::max(1, static_cast<int>(std::ceil(4.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += kernel[i + radius];
  }
  for (double& k : kernel) k /= total;

  auto clamp_index = [](long i, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<long>(i, 0, static_cast<long>(n) - 1));
  };
  std::vector<float> tmp(src.size());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          acc += kernel[i + radius] * src[(y * w + clamp_index(static_cast<long>(x) + i, w)) * ch + c];
        }
        tmp[(y * w + x) * ch + c] = static_cast<float>(acc);
      }
    }
  }
  std::vector<float> out(src.size());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          acc += kernel[i + radius] * tmp[(clamp_index(static_cast<long>(y) + i, h) * w + x) * ch + c];
        }
        out[(y * w + x) * ch + c] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

struct Center {
  double y = 0.0;
  double x = 0.0;
  std::vector<double> color;
};

// 4-connected components of `labels`, numbered in row-major first-appearance order.
inline std::vector<std::uint32_t> connected_components(const std::vector<std::uint32_t>& labels,
                                                       std::size_t h, std::size_t w,
                                                       std::size_t& count) {
  constexpr auto kUnset = std::numeric_limits<std::uint32_t>::max();
  std::vector<std::uint32_t> comp(labels.size(), kUnset);
  std::vector<std::size_t> stack;
  count = 0;
  for (std::size_t start = 0; start < labels.size(); ++start) {
    if (comp[start] != kUnset) continue;
    const auto id = static_cast<std::uint32_t>(count++);
    comp[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t y = p / w, x = p % w;
      auto visit = [&](std::size_t q) {
        if (comp[q] == kUnset && labels[q] == labels[start]) {
          comp[q] = id;
          stack.push_back(q);
        }
      };
      if (y > 0) visit(p - w);
      if (y + 1 < h) visit(p + w);
      if (x > 0) visit(p - 1);
      if (x + 1 < w) visit(p + 1);
    }
  }
  return comp;
}

// Repeatedly folds the smallest component into its largest 4-adjacent component
// (ties to the lower id) while any component is under `min_size` or more than
// `max_regions` remain, then relabels contiguously.
inline SuperpixelLabeling enforce_connectivity(const std::vector<std::uint32_t>& labels,
                                               std::size_t h, std::size_t w, std::size_t min_size,
                                               std::size_t max_regions) {
  std::size_t count = 0;
  std::vector<std::uint32_t> comp = connected_components(labels, h, w, count);

  std::vector<std::size_t> size(count, 0);
  for (auto c : comp) ++size[c];
  std::vector<std::set<std::uint32_t>> adj(count);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto a = comp[y * w + x];
      if (x + 1 < w && comp[y * w + x + 1] != a) {
        adj[a].insert(comp[y * w + x + 1]);
        adj[comp[y * w + x + 1]].insert(a);
      }
      if (y + 1 < h && comp[(y + 1) * w + x] != a) {
        adj[a].insert(comp[(y + 1) * w + x]);
        adj[comp[(y + 1) * w + x]].insert(a);
      }
    }
  }

  std::vector<std::uint32_t> parent(count);
  for (std::size_t i = 0; i < count; ++i) parent[i] = static_cast<std::uint32_t>(i);
  std::vector<bool> alive(count, true);
  std::size_t n_alive = count;
  while (n_alive > 1) {
    const std::size_t limit = n_alive > max_regions ? SIZE_MAX : min_size;
    std::optional<std::uint32_t> orphan;
    for (std::uint32_t c = 0; c < count; ++c) {
      if (alive[c] && size[c] < limit && (!orphan || size[c] < size[*orphan])) orphan = c;
    }
    if (!orphan) break;
    std::optional<std::uint32_t> target;
    for (auto n : adj[*orphan]) {
      if (!target || size[n] > size[*target]) target = n;
    }
    if (!target) break;  // single component left in its area
    const auto o = *orphan, t = *target;
    size[t] += size[o];
    alive[o] = false;
    parent[o] = t;
    --n_alive;
    for (auto n : adj[o]) {
      adj[n].erase(o);
      if (n != t) {
        adj[n].insert(t);
        adj[t].insert(n);
      }
    }
    adj[o].clear();
  }

  auto root = [&](std::uint32_t c) {
    while (parent[c] != c) c = parent[c];
    return c;
  };
  SuperpixelLabeling out{h, w, 0, std::vector<std::uint32_t>(labels.size())};
  std::map<std::uint32_t, std::uint32_t> relabel;
  for (std::size_t p = 0; p < comp.size(); ++p) {
    const auto r = root(comp[p]);
    auto [it, inserted] = relabel.emplace(r, static_cast<std::uint32_t>(relabel.size()));
    out.labels[p] = it->second;
  }
  out.n_regions = relabel.size();
  return out;
}

}  // namespace detail

/// SLIC: grid-seeded local k-means over (color, position) with
/// d = sqrt(d_color^2 + (d_xy / S)^2 * m^2), then connectivity enforcement.
/// Pixels are scanned row-major and distance ties go to the lower center id.
inline SuperpixelLabeling slic_segment(const PixelGrid& image, const SlicParams& params) {
  params.validate();
  const std::size_t h = image.height(), w = image.width(), ch = image.channels();
  const std::size_t n_pixels = h * w;
  const std::size_t n_seg = params.segments_for(n_pixels);
  require(n_seg <= n_pixels, ErrorCode::invalid_argument,
          "n_segments " + std::to_string(n_seg) + " exceeds pixel count " +
              std::to_string(n_pixels));

  const double step = std::sqrt(static_cast<double>(n_pixels) / static_cast<double>(n_seg));
  const std::size_t ny = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(static_cast<double>(h) / step)), 1, std::min(h, n_seg));
  const std::size_t nx = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(static_cast<double>(n_seg) / static_cast<double>(ny))),
      1, w);
  const double step_y = static_cast<double>(h) / static_cast<double>(ny);
  const double step_x = static_cast<double>(w) / static_cast<double>(nx);

  std::vector<float> pixels = detail::gaussian_blur(image, params.sigma);
  for (float& v : pixels) v = static_cast<float>(v * params.color_scale);

  std::vector<detail::Center> centers;
  centers.reserve(ny * nx);
  for (std::size_t i = 0; i < ny; ++i) {
    for (std::size_t j = 0; j < nx; ++j) {
      detail::Center c;
      c.y = (static_cast<double>(i) + 0.5) * step_y - 0.5;
      c.x = (static_cast<double>(j) + 0.5) * step_x - 0.5;
      const auto py = std::min(h - 1, static_cast<std::size_t>(std::llround(std::max(0.0, c.y))));
      const auto px = std::min(w - 1, static_cast<std::size_t>(std::llround(std::max(0.0, c.x))));
      c.color.assign(pixels.begin() + static_cast<std::ptrdiff_t>((py * w + px) * ch),
                     pixels.begin() + static_cast<std::ptrdiff_t>((py * w + px + 1) * ch));
      centers.push_back(std::move(c));
    }
  }

  // Pixels outside every search window keep their grid cell.
  std::vector<std::uint32_t> labels(n_pixels);
  for (std::size_t y = 0; y < h; ++y) {
    const auto cy = std::min(ny - 1, static_cast<std::size_t>(static_cast<double>(y) / step_y));
    for (std::size_t x = 0; x < w; ++x) {
      const auto cx = std::min(nx - 1, static_cast<std::size_t>(static_cast<double>(x) / step_x));
      labels[y * w + x] = static_cast<std::uint32_t>(cy * nx + cx);
    }
  }

  const double spatial_weight = (params.compactness / step) * (params.compactness / step);
  const double reach_y = std::max(step, step_y), reach_x = std::max(step, step_x);
  std::vector<double> best(n_pixels);
  for (std::size_t it = 0; it < params.iterations; ++it) {
    std::fill(best.begin(), best.end(), std::numeric_limits<double>::infinity());
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const auto& c = centers[k];
      const long y0 = std::max(0L, static_cast<long>(std::ceil(c.y - reach_y)));
      const long y1 = std::min(static_cast<long>(h) - 1, static_cast<long>(std::floor(c.y + reach_y)));
      const long x0 = std::max(0L, static_cast<long>(std::ceil(c.x - reach_x)));
      const long x1 = std::min(static_cast<long>(w) - 1, static_cast<long>(std::floor(c.x + reach_x)));
      for (long y = y0; y <= y1; ++y) {
        for (long x = x0; x <= x1; ++x) {
          const std::size_t p = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
          double d_color = 0.0;
          for (std::size_t q = 0; q < ch; ++q) {
            const double diff = pixels[p * ch + q] - c.color[q];
            d_color += diff * diff;
          }
          const double dy = static_cast<double>(y) - c.y, dx = static_cast<double>(x) - c.x;
          const double dist = d_color + (dy * dy + dx * dx) * spatial_weight;
          if (dist < best[p]) {
            best[p] = dist;
            labels[p] = static_cast<std::uint32_t>(k);
          }
        }
      }
    }

    std::vector<detail::Center> sums(centers.size(), detail::Center{0.0, 0.0, std::vector<double>(ch, 0.0)});
    std::vector<std::size_t> counts(centers.size(), 0);
    for (std::size_t p = 0; p < n_pixels; ++p) {
      auto& s = sums[labels[p]];
      s.y += static_cast<double>(p / w);
      s.x += static_cast<double>(p % w);
      for (std::size_t q = 0; q < ch; ++q) s.color[q] += pixels[p * ch + q];
      ++counts[labels[p]];
    }
    for (std::size_t k = 0; k < centers.size(); ++k) {
      if (counts[k] == 0) continue;
      const double inv = 1.0 / static_cast<double>(counts[k]);
      centers[k].y = sums[k].y * inv;
      centers[k].x = sums[k].x * inv;
      for (std::size_t q = 0; q < ch; ++q) centers[k].color[q] = sums[k].color[q] * inv;
    }
  }

  const auto min_size = static_cast<std::size_t>(step * step / 4.0);
  return detail::enforce_connectivity(labels, h, w, std::max<std::size_t>(min_size, 1), 2 * n_seg);
}

/// Nearest-neighbour resize of an H_src x W_src map: src = floor(dst * src_dim / dst_dim).
inline DenseTensor upsample_map(const DenseTensor& map, attn::GridShape source,
                                std::size_t height, std::size_t width) {
  require(source.grid_h >= 1 && source.grid_w >= 1 && height >= 1 && width >= 1,
          ErrorCode::shape, "upsample_map needs non-empty source and target");
  require(map.size() == source.tokens(), ErrorCode::shape,
          "map has " + std::to_string(map.size()) + " values, grid has " +
              std::to_string(source.tokens()));
  DenseTensor out(Shape{height, width});
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = y * source.grid_h / height;
    for (std::size_t x = 0; x < width; ++x) {
      out(y, x) = map[sy * source.grid_w + x * source.grid_w / width];
    }
  }
  return out;
}

struct SubjectMap {
  std::string lora_id;
  DenseTensor map;  // H x W (or H*W values), non-negative
};

/// Per region, the subject with the largest summed map wins it (ties to the
/// earlier subject). The result is a partition of the pixel grid.
inline SubjectMaskSet vote_superpixels(std::span<const SubjectMap> maps,
                                       const SuperpixelLabeling& labeling) {
  require(!maps.empty(), ErrorCode::invalid_argument, "voting needs at least one subject map");
  const std::size_t n_pixels = labeling.height * labeling.width;
  require(labeling.labels.size() == n_pixels, ErrorCode::shape, "labeling size mismatch");
  for (const auto& m : maps) {
    require(m.map.size() == n_pixels, ErrorCode::shape,
            "map for '" + m.lora_id + "' has " + std::to_string(m.map.size()) +
                " values, labeling has " + std::to_string(n_pixels) + " pixels");
    for (float v : m.map.data()) {
      require(v >= 0.0f && std::isfinite(v), ErrorCode::invalid_argument,
              "map for '" + m.lora_id + "' must be finite and non-negative");
    }
  }

  std::vector<std::vector<double>> scores(maps.size(), std::vector<double>(labeling.n_regions, 0.0));
  for (std::size_t l = 0; l < maps.size(); ++l) {
    for (std::size_t p = 0; p < n_pixels; ++p) {
      require(labeling.labels[p] < labeling.n_regions, ErrorCode::shape, "label out of range");
      scores[l][labeling.labels[p]] += maps[l].map[p];
    }
  }
  std::vector<std::size_t> winner(labeling.n_regions, 0);
  for (std::size_t r = 0; r < labeling.n_regions; ++r) {
    for (std::size_t l = 1; l < maps.size(); ++l) {
      if (scores[l][r] > scores[winner[r]][r]) winner[r] = l;
    }
  }

  SubjectMaskSet out;
  out.height = labeling.height;
  out.width = labeling.width;
  for (const auto& m : maps) {
    out.lora_ids.push_back(m.lora_id);
    out.masks.emplace_back(n_pixels, std::uint8_t{0});
  }
  for (std::size_t p = 0; p < n_pixels; ++p) out.masks[winner[labeling.labels[p]]][p] = 1;
  return out;
}

/// Channels 0..2 of each image token, min-max rescaled per channel
/// (a constant channel becomes 0.5).
inline PixelGrid decode_predicted_sample(const DenseTensor& image_tokens, attn::GridShape grid) {
  require_matrix(image_tokens, "image tokens");
  require(image_tokens.cols() >= 3, ErrorCode::shape,
          "decoding needs at least 3 token channels, got " + std::to_string(image_tokens.cols()));
  require(image_tokens.rows() == grid.tokens() && grid.tokens() >= 1, ErrorCode::shape,
          "image token count " + std::to_string(image_tokens.rows()) + " does not match grid");
  std::vector<float> values(grid.tokens() * 3);
  for (std::size_t c = 0; c < 3; ++c) {
    float lo = image_tokens(0, c), hi = lo;
    for (std::size_t i = 0; i < grid.tokens(); ++i) {
      lo = std::min(lo, image_tokens(i, c));
      hi = std::max(hi, image_tokens(i, c));
    }
    const double range = static_cast<double>(hi) - lo;
    for (std::size_t i = 0; i < grid.tokens(); ++i) {
      values[i * 3 + c] = range > 0.0
                              ? static_cast<float>((static_cast<double>(image_tokens(i, c)) - lo) / range)
                              : 0.5f;
    }
  }
  return PixelGrid(grid.grid_h, grid.grid_w, 3, std::move(values));
}

/// Labels as an H x W f32 tensor, for debugging dumps.
inline DenseTensor labeling_tensor(const SuperpixelLabeling& labeling) {
  std::vector<float> values(labeling.labels.begin(), labeling.labels.end());
  return DenseTensor(Shape{labeling.height, labeling.width}, std::move(values));
}

inline PixelGrid mask_image(const SubjectMaskSet& set, std::size_t index) {
  std::vector<float> values(set.masks.at(index).begin(), set.masks.at(index).end());
  return PixelGrid(set.height, set.width, 1, std::move(values));
}

}  // namespace freefuse::superpixel
