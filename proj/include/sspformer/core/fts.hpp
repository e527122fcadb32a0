#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "sspformer/core/errors.hpp"
#include "sspformer/core/tensor.hpp"

namespace sspf {

// FTS1 tensor container: magic "FTS1", u8 dtype (0=f64 real, 1=f64 complex),
// u8 rank, rank x u32 little-endian extents, then the raw little-endian
// payload (complex stored as re,im pairs).
namespace fts {

inline void put_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF), static_cast<unsigned char>((v >> 8) & 0xFF),
                        static_cast<unsigned char>((v >> 16) & 0xFF), static_cast<unsigned char>((v >> 24) & 0xFF)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("FTS1: truncated extent field");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64_le(std::ostream& os, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw IoError("FTS1: truncated payload");
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

inline void write(std::ostream& os, const RealTensor& t) {
  os.write("FTS1", 4);
  os.put(static_cast<char>(0));
  os.put(static_cast<char>(t.rank()));
  for (std::size_t i = 0; i < t.rank(); ++i) put_u32_le(os, static_cast<std::uint32_t>(t.shape[i]));
  for (double v : t.data) put_f64_le(os, v);
  if (!os) throw IoError("FTS1: write failed");
}

inline void write(std::ostream& os, const ComplexTensor& t) {
  os.write("FTS1", 4);
  os.put(static_cast<char>(1));
  os.put(static_cast<char>(t.rank()));
  for (std::size_t i = 0; i < t.rank(); ++i) put_u32_le(os, static_cast<std::uint32_t>(t.shape[i]));
  for (const auto& v : t.data) {
    put_f64_le(os, v.real());
    put_f64_le(os, v.imag());
  }
  if (!os) throw IoError("FTS1: write failed");
}

inline void write_file(const std::string& path, const RealTensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw PathError("FTS1: cannot open for write: " + path);
  write(os, t);
}

inline void write_file(const std::string& path, const ComplexTensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw PathError("FTS1: cannot open for write: " + path);
  write(os, t);
}

struct Header {
  int dtype = 0;  // 0 real, 1 complex
  Shape shape;
};

inline Header read_header(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "FTS1", 4) != 0) throw IoError("FTS1: bad magic");
  const int dtype = is.get();
  const int rank = is.get();
  if (dtype != 0 && dtype != 1) throw IoError("FTS1: unknown dtype tag " + std::to_string(dtype));
  if (rank < 0 || !is) throw IoError("FTS1: truncated header");
  Header h;
  h.dtype = dtype;
  std::vector<std::size_t> dims;
  for (int i = 0; i < rank; ++i) dims.push_back(get_u32_le(is));
  h.shape = Shape(std::move(dims));
  return h;
}

inline RealTensor read_real(std::istream& is) {
  const Header h = read_header(is);
  if (h.dtype != 0) throw IoError("FTS1: expected real tensor, found complex");
  RealTensor t(h.shape);
  for (auto& v : t.data) v = get_f64_le(is);
  return t;
}

inline ComplexTensor read_complex(std::istream& is) {
  const Header h = read_header(is);
  if (h.dtype != 1) throw IoError("FTS1: expected complex tensor, found real");
  ComplexTensor t(h.shape);
  for (auto& v : t.data) {
    const double re = get_f64_le(is);
    const double im = get_f64_le(is);
    v = Cplx(re, im);
  }
  return t;
}

inline RealTensor read_real_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw PathError("FTS1: cannot open for read: " + path);
  return read_real(is);
}

inline ComplexTensor read_complex_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw PathError("FTS1: cannot open for read: " + path);
  return read_complex(is);
}

}  // namespace fts
}  // namespace sspf
