#pragma once

// Cross-attention maps, attention-sink suppression, per-subject word maps and
// self-attention enhancement. Batch size is fixed to 1; callers loop.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "freefuse/error.hpp"
#include "freefuse/tensor.hpp"

namespace freefuse::attn {

/// Row-stochastic query x key matrix: entries >= 0, rows sum to 1 within `tolerance`.
class AttentionMap {
 public:
  static constexpr double kRowTolerance = 1e-5;

  explicit AttentionMap(DenseTensor weights, double tolerance = kRowTolerance)
      : weights_(std::move(weights)) {
    require_matrix(weights_, "attention map");
    require_finite(weights_, "attention map");
    for (std::size_t r = 0; r < rows(); ++r) {
      double sum = 0.0;
      for (float v : weights_.row(r)) {
        require(v >= 0.0f, ErrorCode::invalid_argument,
                "attention map row " + std::to_string(r) + " has a negative entry");
        sum += v;
      }
      require(std::abs(sum - 1.0) <= tolerance, ErrorCode::invalid_argument,
              "attention map row " + std::to_string(r) + " sums to " + std::to_string(sum));
    }
  }

  std::size_t rows() const { return weights_.rows(); }
  std::size_t cols() const { return weights_.cols(); }
  std::span<const float> row(std::size_t r) const { return weights_.row(r); }
  float operator()(std::size_t r, std::size_t c) const { return weights_(r, c); }
  const DenseTensor& weights() const noexcept { return weights_; }

 private:
  DenseTensor weights_;
};

struct GridShape {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;

  std::size_t tokens() const noexcept { return grid_h * grid_w; }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

struct SinkFilterConfig {
  double p = 0.01;
  std::size_t border_width = 1;

  void validate() const {
    require(p > 0.0 && p <= 1.0, ErrorCode::invalid_argument,
            "sink filter p must lie in (0, 1]");
    require(border_width >= 1, ErrorCode::invalid_argument, "sink border width must be >= 1");
  }
  friend bool operator==(const SinkFilterConfig&, const SinkFilterConfig&) = default;
};

struct SubjectTokenSpan {
  std::string lora_id;
  std::vector<std::size_t> token_indices;

  friend bool operator==(const SubjectTokenSpan&, const SubjectTokenSpan&) = default;
};

/// floor(n * fraction), robust to products that land a hair below an integer.
inline std::size_t floor_count(std::size_t n, double fraction) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(n) * fraction + 1e-9));
}

/// Indices of the k largest values, ordered by (value desc, index asc).
inline std::vector<std::size_t> top_k_indices(std::span<const float> values, std::size_t k) {
  k = std::min(k, values.size());
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return values[a] != values[b] ? values[a] > values[b] : a < b;
                    });
  order.resize(k);
  return order;
}

namespace detail {

// Softmax of q . k / sqrt(d) over all key rows, accumulated into `out` (double).
inline void accumulate_softmax(const float* q, std::size_t q_rows, std::size_t q_stride,
                               const float* k, std::size_t k_rows, std::size_t k_stride,
                               std::size_t d, double weight, std::vector<double>& out) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> logits(k_rows);
  for (std::size_t i = 0; i < q_rows; ++i) {
    const float* qi = q + i * q_stride;
    double max_logit = -INFINITY;
    for (std::size_t j = 0; j < k_rows; ++j) {
      const float* kj = k + j * k_stride;
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += static_cast<double>(qi[c]) * kj[c];
      logits[j] = dot * scale;
      max_logit = std::max(max_logit, logits[j]);
    }
    double sum = 0.0;
    for (double& l : logits) {
      l = std::exp(l - max_logit);
      sum += l;
    }
    for (std::size_t j = 0; j < k_rows; ++j) out[i * k_rows + j] += weight * logits[j] / sum;
  }
}

inline DenseTensor to_float(const std::vector<double>& values, Shape shape) {
  std::vector<float> out(values.begin(), values.end());
  return DenseTensor(std::move(shape), std::move(out));
}

}  // namespace detail

/// softmax(Q_text K_img^T / sqrt(D)) over image keys.
/// Accepts N x D matrices (one head) or H x N x D_h stacks; per-head maps are averaged.
inline AttentionMap compute_cross_attention(const DenseTensor& q_text, const DenseTensor& k_img) {
  require(q_text.rank() == k_img.rank() && (q_text.rank() == 2 || q_text.rank() == 3),
          ErrorCode::shape,
          "cross attention expects two matrices or two head stacks, got " +
              shape_string(q_text.shape()) + " and " + shape_string(k_img.shape()));
  require_finite(q_text, "Q_text");
  require_finite(k_img, "K_img");
  const bool multi = q_text.rank() == 3;
  const std::size_t heads = multi ? q_text.dim(0) : 1;
  const std::size_t n_text = q_text.dim(multi ? 1 : 0);
  const std::size_t n_img = k_img.dim(multi ? 1 : 0);
  const std::size_t d = q_text.dim(multi ? 2 : 1);
  require(k_img.dim(multi ? 2 : 1) == d && (!multi || k_img.dim(0) == heads), ErrorCode::shape,
          "Q_text " + shape_string(q_text.shape()) + " and K_img " +
              shape_string(k_img.shape()) + " disagree on heads or token dimension");

  std::vector<double> acc(n_text * n_img, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    detail::accumulate_softmax(q_text.data().data() + h * n_text * d, n_text, d,
                               k_img.data().data() + h * n_img * d, n_img, d, d,
                               1.0 / static_cast<double>(heads), acc);
  }
  return AttentionMap(detail::to_float(acc, {n_text, n_img}));
}

/// Image-token indices whose row or column distance to the grid boundary is below
/// `border_width`. Sorted ascending.
inline std::vector<std::size_t> edge_pixel_set(GridShape grid, std::size_t border_width) {
  require(grid.grid_h >= 1 && grid.grid_w >= 1, ErrorCode::shape, "degenerate token grid");
  const std::size_t limit = (std::min(grid.grid_h, grid.grid_w) + 1) / 2;
  require(border_width >= 1 && border_width <= limit, ErrorCode::invalid_argument,
          "border width " + std::to_string(border_width) + " exceeds " + std::to_string(limit));
  std::vector<std::size_t> edges;
  for (std::size_t r = 0; r < grid.grid_h; ++r) {
    for (std::size_t c = 0; c < grid.grid_w; ++c) {
      const std::size_t dist = std::min({r, c, grid.grid_h - 1 - r, grid.grid_w - 1 - c});
      if (dist < border_width) edges.push_back(r * grid.grid_w + c);
    }
  }
  return edges;
}

/// Zeroes entries that are both among the row's top-k (k = floor(N_img * p), ties to the
/// lower index) and on the grid border, then renormalizes the row. Rows where nothing is
/// zeroed are returned bit-for-bit unchanged.
inline AttentionMap suppress_attention_sink(const AttentionMap& a, GridShape grid,
                                            const SinkFilterConfig& cfg) {
  cfg.validate();
  require(a.cols() == grid.tokens(), ErrorCode::shape,
          "attention map has " + std::to_string(a.cols()) + " columns but grid has " +
              std::to_string(grid.tokens()) + " tokens");
  std::vector<bool> on_edge(a.cols(), false);
  for (std::size_t idx : edge_pixel_set(grid, cfg.border_width)) on_edge[idx] = true;
  const std::size_t k = floor_count(a.cols(), cfg.p);

  DenseTensor out = a.weights();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    std::span<float> row = out.row(r);
    bool touched = false;
    for (std::size_t idx : top_k_indices(row, k)) {
      if (on_edge[idx] && row[idx] != 0.0f) {
        row[idx] = 0.0f;
        touched = true;
      }
    }
    if (!touched) continue;
    double sum = 0.0;
    for (float v : row) sum += v;
    if (!(sum > 0.0)) {
      fail(ErrorCode::degenerate_row,
           "attention row " + std::to_string(r) + " has no mass left after sink suppression");
    }
    for (float& v : row) v = static_cast<float>(static_cast<double>(v) / sum);
  }
  return AttentionMap(std::move(out));
}

/// Mean of the rows listed in the span (length N_img).
inline DenseTensor word_attention_map(const AttentionMap& a, const SubjectTokenSpan& span) {
  require(!span.token_indices.empty(), ErrorCode::invalid_argument,
          "subject '" + span.lora_id + "' has no activation tokens");
  std::vector<double> acc(a.cols(), 0.0);
  for (std::size_t idx : span.token_indices) {
    require(idx < a.rows(), ErrorCode::shape,
            "token index " + std::to_string(idx) + " of subject '" + span.lora_id +
                "' is outside " + std::to_string(a.rows()) + " text tokens");
    const auto row = a.row(idx);
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += row[j];
  }
  const double inv = 1.0 / static_cast<double>(span.token_indices.size());
  for (double& v : acc) v *= inv;
  return detail::to_float(acc, {a.cols()});
}

/// The K = max(1, floor(N * fraction)) largest entries, ties to the lower index.
/// Returned ascending.
inline std::vector<std::size_t> top_fraction_indices(const DenseTensor& m, double fraction = 0.01) {
  require(!m.empty(), ErrorCode::invalid_argument, "top-fraction selection on an empty map");
  require(fraction > 0.0 && fraction <= 1.0, ErrorCode::invalid_argument,
          "fraction must lie in (0, 1]");
  const std::size_t k = std::max<std::size_t>(1, floor_count(m.size(), fraction));
  auto idx = top_k_indices(m.data(), k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Mean of the self-attention rows at the salient indices.
inline DenseTensor self_attention_enhance(const AttentionMap& a_self,
                                          std::span<const std::size_t> salient) {
  require(a_self.rows() == a_self.cols(), ErrorCode::shape, "self-attention map must be square");
  require(!salient.empty(), ErrorCode::invalid_argument, "empty salient index set");
  std::vector<double> acc(a_self.cols(), 0.0);
  for (std::size_t i : salient) {
    require(i < a_self.rows(), ErrorCode::shape,
            "salient index " + std::to_string(i) + " outside self-attention map");
    const auto row = a_self.row(i);
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += row[j];
  }
  const double inv = 1.0 / static_cast<double>(salient.size());
  for (double& v : acc) v *= inv;
  return detail::to_float(acc, {a_self.cols()});
}

/// Parses "id:i1,i2,...".
inline SubjectTokenSpan parse_span(std::string_view text) {
  const auto colon = text.find(':');
  require(colon != std::string_view::npos && colon > 0, ErrorCode::parse,
          "subject span '" + std::string(text) + "' must look like id:i1,i2,...");
  SubjectTokenSpan span{std::string(text.substr(0, colon)), {}};
  std::string_view rest = text.substr(colon + 1);
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    std::string_view item = rest.substr(0, comma);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    std::size_t value = 0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), value);
    require(ec == std::errc{} && ptr == item.data() + item.size() && !item.empty(),
            ErrorCode::parse, "bad token index '" + std::string(item) + "' in subject span");
    span.token_indices.push_back(value);
    if (comma == std::string_view::npos) break;
    rest.remove_prefix(comma + 1);
  }
  require(!span.token_indices.empty(), ErrorCode::parse,
          "subject '" + span.lora_id + "' lists no token indices");
  return span;
}

/// Non-empty, in range, unique ids, pairwise disjoint.
inline void validate_spans(std::span<const SubjectTokenSpan> spans, std::size_t n_text) {
  std::set<std::size_t> used;
  std::set<std::string> ids;
  for (const auto& span : spans) {
    require(ids.insert(span.lora_id).second, ErrorCode::invalid_argument,
            "duplicate subject id '" + span.lora_id + "'");
    require(!span.token_indices.empty(), ErrorCode::invalid_argument,
            "subject '" + span.lora_id + "' has no activation tokens");
    std::set<std::size_t> own(span.token_indices.begin(), span.token_indices.end());
    for (std::size_t idx : own) {
      require(idx < n_text, ErrorCode::shape,
              "token index " + std::to_string(idx) + " of subject '" + span.lora_id +
                  "' is outside " + std::to_string(n_text) + " text tokens");
      require(used.insert(idx).second, ErrorCode::invalid_argument,
              "token index " + std::to_string(idx) + " is claimed by two subjects");
    }
  }
}

/// Stage-1 attention half: sink suppression on the cross map, per-subject word maps,
/// top-fraction salient tokens, and (when given) self-attention enhancement.
/// One length-N_img map per span.
inline std::vector<DenseTensor> subject_attention_maps(
    const AttentionMap& a_cross, const AttentionMap* a_self, GridShape grid,
    std::span<const SubjectTokenSpan> spans, const SinkFilterConfig& sink,
    double top_fraction = 0.01) {
  validate_spans(spans, a_cross.rows());
  if (a_self) {
    require(a_self->rows() == grid.tokens() && a_self->cols() == grid.tokens(), ErrorCode::shape,
            "self-attention map does not match the " + std::to_string(grid.tokens()) +
                "-token grid");
  }
  const AttentionMap filtered = suppress_attention_sink(a_cross, grid, sink);
  std::vector<DenseTensor> maps;
  maps.reserve(spans.size());
  for (const auto& span : spans) {
    DenseTensor word = word_attention_map(filtered, span);
    if (a_self) {
      const auto salient = top_fraction_indices(word, top_fraction);
      maps.push_back(self_attention_enhance(*a_self, salient));
    } else {
      maps.push_back(std::move(word));
    }
  }
  return maps;
}

}  // namespace freefuse::attn
