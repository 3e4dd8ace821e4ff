#pragma once

// Tensor file format (little-endian throughout):
//   "FFT1" | u32 version = 1 | u32 ndim | ndim x u64 shape | prod(shape) x f32, row-major

#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "freefuse/error.hpp"
#include "freefuse/tensor.hpp"

namespace freefuse::io {

inline constexpr std::array<char, 4> kTensorMagic{'F', 'F', 'T', '1'};
inline constexpr std::uint32_t kTensorVersion = 1;

namespace detail {

template <typename U>
void put_le(std::vector<unsigned char>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<unsigned char>((value >> (8 * i)) & 0xFF));
  }
}

template <typename U>
U get_le(const unsigned char* p) {
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(p[i]) << (8 * i);
  return value;
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path,
                       const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::io, "write failed for " + path.string());
}

}  // namespace detail

inline std::vector<unsigned char> encode_tensor(const DenseTensor& t) {
  std::vector<unsigned char> bytes(kTensorMagic.begin(), kTensorMagic.end());
  detail::put_le<std::uint32_t>(bytes, kTensorVersion);
  detail::put_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(bytes, d);
  bytes.reserve(bytes.size() + 4 * t.size());
  for (float v : t.data()) detail::put_le<std::uint32_t>(bytes, std::bit_cast<std::uint32_t>(v));
  return bytes;
}

inline DenseTensor decode_tensor(const std::vector<unsigned char>& bytes,
                                 const std::string& source = "<memory>") {
  const std::size_t header = 12;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kTensorMagic.data(), 4) != 0) {
    fail(ErrorCode::bad_magic, source + ": bad magic (expected \"FFT1\")");
  }
  if (bytes.size() < header) fail(ErrorCode::truncated, source + ": truncated header");
  const auto version = detail::get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kTensorVersion) {
    fail(ErrorCode::version_mismatch,
         source + ": unsupported version " + std::to_string(version));
  }
  const auto ndim = detail::get_le<std::uint32_t>(bytes.data() + 8);
  if (ndim == 0) fail(ErrorCode::shape, source + ": tensor has zero dimensions");
  if (bytes.size() < header + 8ULL * ndim) {
    fail(ErrorCode::truncated, source + ": truncated shape");
  }
  Shape shape(ndim);
  std::uint64_t volume = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    const auto d = detail::get_le<std::uint64_t>(bytes.data() + header + 8 * i);
    if (d == 0) fail(ErrorCode::shape, source + ": zero-sized dimension");
    if (volume > (UINT64_MAX / 4) / d) fail(ErrorCode::truncated, source + ": shape too large");
    volume *= d;
    shape[i] = static_cast<std::size_t>(d);
  }
  const std::size_t offset = header + 8ULL * ndim;
  if (bytes.size() - offset != 4 * volume) {
    fail(ErrorCode::truncated, source + ": payload has " + std::to_string(bytes.size() - offset) +
                                   " bytes, expected " + std::to_string(4 * volume));
  }
  std::vector<float> data(static_cast<std::size_t>(volume));
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes.data() + offset + 4 * i));
    if (!std::isfinite(data[i])) {
      fail(ErrorCode::non_finite, source + ": non-finite value at flat index " + std::to_string(i));
    }
  }
  return DenseTensor(std::move(shape), std::move(data));
}

inline DenseTensor load_tensor(const std::filesystem::path& path) {
  return decode_tensor(detail::read_file(path), path.string());
}

inline void save_tensor(const DenseTensor& t, const std::filesystem::path& path) {
  detail::write_file(path, encode_tensor(t));
}

/// Binary P5 graymap. Each value v in [0,1] becomes round(v * max_val), half away from zero.
inline void write_pgm(const PixelGrid& grid, const std::filesystem::path& path,
                      unsigned max_val = 255) {
  require(grid.channels() == 1, ErrorCode::invalid_argument,
          "write_pgm needs a single-channel grid, got " + std::to_string(grid.channels()));
  require(max_val >= 1 && max_val <= 255, ErrorCode::invalid_argument,
          "write_pgm supports max_val in [1,255]");
  const std::string head = "P5\n" + std::to_string(grid.width()) + " " +
                           std::to_string(grid.height()) + "\n" + std::to_string(max_val) + "\n";
  std::vector<unsigned char> bytes(head.begin(), head.end());
  for (float v : grid.values()) {
    bytes.push_back(static_cast<unsigned char>(std::round(static_cast<double>(v) * max_val)));
  }
  detail::write_file(path, bytes);
}

struct Pgm {
  std::size_t width = 0;
  std::size_t height = 0;
  unsigned max_val = 0;
  std::vector<unsigned char> pixels;
};

// Reader for the files write_pgm produces (no comment lines).
inline Pgm read_pgm(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    std::string s;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) s += static_cast<char>(bytes[pos++]);
    return s;
  };
  Pgm pgm;
  if (token() != "P5") fail(ErrorCode::bad_magic, path.string() + ": not a P5 graymap");
  try {
    pgm.width = std::stoul(token());
    pgm.height = std::stoul(token());
    pgm.max_val = static_cast<unsigned>(std::stoul(token()));
  } catch (const std::exception&) {
    fail(ErrorCode::parse, path.string() + ": malformed PGM header");
  }
  ++pos;
  if (bytes.size() - pos != pgm.width * pgm.height) {
    fail(ErrorCode::truncated, path.string() + ": PGM payload size mismatch");
  }
  pgm.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return pgm;
}

}  // namespace freefuse::io
