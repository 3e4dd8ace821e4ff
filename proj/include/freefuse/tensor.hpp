#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "freefuse/error.hpp"

namespace freefuse {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

/// Row-major f32 array. Every dimension is >= 1 and data().size() equals the
/// product of the shape.
class DenseTensor {
 public:
  DenseTensor() = default;

  explicit DenseTensor(Shape shape) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_volume(shape_), 0.0f);
  }

  DenseTensor(Shape shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    require(data_.size() == shape_volume(shape_), ErrorCode::shape,
            "tensor data length " + std::to_string(data_.size()) +
                " does not match shape " + shape_string(shape_));
  }

  static DenseTensor matrix(std::size_t rows, std::size_t cols) {
    return DenseTensor(Shape{rows, cols});
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // Rank-2 access.
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }
  float& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  float operator()(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }
  std::span<float> row(std::size_t r) {
    return std::span<float>(data_).subspan(r * shape_[1], shape_[1]);
  }
  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(data_).subspan(r * shape_[1], shape_[1]);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const DenseTensor&, const DenseTensor&) = default;

 private:
  void check_shape() const {
    require(!shape_.empty(), ErrorCode::shape, "tensor shape must have at least one dimension");
    for (std::size_t d : shape_) {
      require(d >= 1, ErrorCode::shape,
              "tensor dimensions must be positive, got " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<float> data_;
};

inline void require_matrix(const DenseTensor& t, const std::string& name) {
  require(t.rank() == 2, ErrorCode::shape,
          name + " must be a matrix, got shape " + shape_string(t.shape()));
}

inline void require_finite(const DenseTensor& t, const std::string& name) {
  require(t.all_finite(), ErrorCode::non_finite, name + " contains non-finite values");
}

/// Image with interleaved channels (HWC), values clamped to [0,1].
class PixelGrid {
 public:
  PixelGrid(std::size_t height, std::size_t width, std::size_t channels,
            std::vector<float> values)
      : height_(height), width_(width), channels_(channels), values_(std::move(values)) {
    require(height * width >= 1, ErrorCode::shape, "pixel grid must have at least one pixel");
    require(channels == 1 || channels == 3, ErrorCode::shape,
            "pixel grid channels must be 1 or 3, got " + std::to_string(channels));
    require(values_.size() == height * width * channels, ErrorCode::shape,
            "pixel grid value count does not match " + std::to_string(height) + "x" +
                std::to_string(width) + "x" + std::to_string(channels));
    for (float& v : values_) v = std::isnan(v) ? 0.0f : std::clamp(v, 0.0f, 1.0f);
  }

  PixelGrid(std::size_t height, std::size_t width, std::size_t channels)
      : PixelGrid(height, width, channels, std::vector<float>(height * width * channels, 0.0f)) {}

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t pixels() const noexcept { return height_ * width_; }

  float at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return values_[(y * width_ + x) * channels_ + c];
  }
  std::span<const float> values() const noexcept { return values_; }

  friend bool operator==(const PixelGrid&, const PixelGrid&) = default;

 private:
  std::size_t height_;
  std::size_t width_;
  std::size_t channels_;
  std::vector<float> values_;
};

/// SplitMix64. Integer-only state update, so sequences match on every
/// platform; floating draws only use exact conversions.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), state_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // [-1, 1)
  double symmetric() { return 2.0 * uniform() - 1.0; }

  double normal() {
    // Box-Muller; u1 is kept away from zero.
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  std::size_t below(std::size_t n) { return static_cast<std::size_t>(next_u64() % n); }

  DenseTensor uniform_tensor(Shape shape, double scale) {
    DenseTensor t(std::move(shape));
    for (float& v : t.data()) v = static_cast<float>(scale * symmetric());
    return t;
  }

  DenseTensor normal_tensor(Shape shape, double scale = 1.0) {
    DenseTensor t(std::move(shape));
    for (float& v : t.data()) v = static_cast<float>(scale * normal());
    return t;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
};

// Stable per-purpose sub-seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  SeededRng rng(seed ^ (stream * 0xD1B54A32D192ED03ULL));
  return rng.next_u64();
}

}  // namespace freefuse
