#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "vmrfa/errors.hpp"
#include "vmrfa/tensor.hpp"

namespace vmrfa {

// Portable binary tensor file:
//   magic "VTNS", format version (u32 LE), rank (u32 LE),
//   each dimension (u32 LE), then row-major float32 LE payload.
inline constexpr std::uint32_t kTensorFormatVersion = 1;

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in, std::int64_t offset, const char* what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) {
    fail<FormatError>("truncated while reading ", what, " at offset ", offset);
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

}  // namespace detail

inline void write_tensor(std::ostream& out, const Tensor& t) {
  out.write("VTNS", 4);
  detail::put_u32(out, kTensorFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) {
    detail::put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
  }
  for (std::int64_t i = 0; i < t.numel(); ++i) detail::put_f32(out, t[i]);
}

inline Tensor read_tensor(std::istream& in, std::int64_t base_offset = 0) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "VTNS", 4) != 0) {
    fail<FormatError>("bad tensor magic at offset ", base_offset);
  }
  std::int64_t off = base_offset + 4;
  const std::uint32_t version = detail::get_u32(in, off, "format version");
  off += 4;
  if (version != kTensorFormatVersion) {
    fail<FormatError>("unsupported tensor format version ", version, " at offset ",
                      base_offset + 4);
  }
  const std::uint32_t rank = detail::get_u32(in, off, "rank");
  off += 4;
  if (rank == 0 || rank > 8) {
    fail<FormatError>("implausible tensor rank ", rank, " at offset ", off - 4);
  }
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<int>(detail::get_u32(in, off, "dimension"));
    off += 4;
    if (shape[i] <= 0) {
      fail<FormatError>("non-positive dimension at offset ", off - 4);
    }
  }
  const std::int64_t n = shape_numel(shape);
  std::vector<float> data(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const std::uint32_t bits = detail::get_u32(in, off, "payload");
    off += 4;
    std::memcpy(&data[static_cast<std::size_t>(i)], &bits, 4);
  }
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail<IoError>("cannot open ", path, " for writing");
  write_tensor(out, t);
  if (!out) fail<IoError>("write failed for ", path);
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail<IoError>("cannot open ", path, " for reading");
  return read_tensor(in);
}

}  // namespace vmrfa
