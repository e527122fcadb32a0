#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "sspformer/core/errors.hpp"
#include "sspformer/core/tensor.hpp"

namespace sspf {

// Distinct failure modes demanded of the ingestion path.
struct NiftiMagicError : IoError {
  explicit NiftiMagicError(const std::string& m) : IoError("nifti magic: " + m) {}
};
struct NiftiDtypeError : IoError {
  explicit NiftiDtypeError(const std::string& m) : IoError("nifti dtype: " + m) {}
};
struct NiftiTruncatedError : IoError {
  explicit NiftiTruncatedError(const std::string& m) : IoError("nifti truncated: " + m) {}
};
struct NiftiHeaderError : IoError {
  explicit NiftiHeaderError(const std::string& m) : IoError("nifti header: " + m) {}
};

struct NiftiImage {
  RealTensor data;               // axes reversed vs. on-disk order, x fastest
  std::vector<double> voxel_mm;  // pixdim per returned axis
  double slope = 1.0, inter = 0.0;
};

namespace detail {
// All header access is bounds-checked so fuzzed inputs fail with typed errors.
struct ByteView {
  const unsigned char* p;
  std::size_t n;

  void need(std::size_t off, std::size_t len) const {
    if (off + len > n) throw NiftiTruncatedError("need " + std::to_string(off + len) + " bytes, have " + std::to_string(n));
  }
  std::int32_t i32(std::size_t off) const {
    need(off, 4);
    std::int32_t v;
    std::memcpy(&v, p + off, 4);
    return v;
  }
  std::int16_t i16(std::size_t off) const {
    need(off, 2);
    std::int16_t v;
    std::memcpy(&v, p + off, 2);
    return v;
  }
  std::uint16_t u16(std::size_t off) const {
    need(off, 2);
    std::uint16_t v;
    std::memcpy(&v, p + off, 2);
    return v;
  }
  float f32(std::size_t off) const {
    need(off, 4);
    float v;
    std::memcpy(&v, p + off, 4);
    return v;
  }
};
}  // namespace detail

// Minimal single-file NIfTI-1 reader: little-endian, dtype int16/uint16/
// float32, scl_slope/scl_inter applied, optional min-max scaling to [0,1].
inline NiftiImage read_nifti1_bytes(const std::vector<unsigned char>& bytes, bool normalize = true) {
  detail::ByteView v{bytes.data(), bytes.size()};
  if (bytes.size() < 348) throw NiftiTruncatedError("header needs 348 bytes, have " + std::to_string(bytes.size()));
  if (v.i32(0) != 348) throw NiftiMagicError("sizeof_hdr != 348");
  char magic[4];
  v.need(344, 4);
  std::memcpy(magic, bytes.data() + 344, 4);
  if (!(magic[0] == 'n' && magic[1] == '+' && magic[2] == '1' && magic[3] == '\0'))
    throw NiftiMagicError("expected single-file magic n+1");

  const std::int16_t ndim = v.i16(40);
  if (ndim < 1 || ndim > 7) throw NiftiHeaderError("dim[0]=" + std::to_string(ndim) + " outside 1..7");
  std::vector<std::size_t> dims(static_cast<std::size_t>(ndim));
  std::size_t elems = 1;
  for (std::size_t k = 0; k < dims.size(); ++k) {
    const std::int16_t d = v.i16(40 + 2 * (k + 1));
    if (d < 1) throw NiftiHeaderError("dim[" + std::to_string(k + 1) + "]=" + std::to_string(d));
    dims[k] = static_cast<std::size_t>(d);
    if (elems > (std::size_t{1} << 40) / dims[k]) throw NiftiHeaderError("volume too large");
    elems *= dims[k];
  }

  const std::int16_t dtype = v.i16(70);
  std::size_t bpe = 0;
  if (dtype == 4 || dtype == 512)
    bpe = 2;
  else if (dtype == 16)
    bpe = 4;
  else
    throw NiftiDtypeError("unsupported datatype code " + std::to_string(dtype));

  double slope = static_cast<double>(v.f32(112));
  const double inter = static_cast<double>(v.f32(116));
  if (slope == 0.0) slope = 1.0;  // NIfTI convention: zero slope means unscaled

  const float vox_off_f = v.f32(108);
  if (!(vox_off_f >= 348.0f) || !(vox_off_f < 1e12f))
    throw NiftiHeaderError("vox_offset " + std::to_string(vox_off_f));
  const auto vox_off = static_cast<std::size_t>(vox_off_f);
  v.need(vox_off, elems * bpe);

  NiftiImage img;
  Shape shape;
  shape.dims.assign(dims.rbegin(), dims.rend());  // x fastest on disk -> last axis here
  img.data = RealTensor(shape);
  for (std::size_t i = 0; i < elems; ++i) {
    double raw;
    if (dtype == 4)
      raw = static_cast<double>(v.i16(vox_off + 2 * i));
    else if (dtype == 512)
      raw = static_cast<double>(v.u16(vox_off + 2 * i));
    else
      raw = static_cast<double>(v.f32(vox_off + 4 * i));
    img.data.data[i] = slope * raw + inter;
  }
  img.slope = slope;
  img.inter = inter;
  for (std::size_t k = dims.size(); k > 0; --k) img.voxel_mm.push_back(static_cast<double>(v.f32(76 + 4 * k)));

  if (normalize) {
    double lo = img.data.data[0], hi = img.data.data[0];
    for (double x : img.data.data) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    if (hi > lo)
      for (auto& x : img.data.data) x = (x - lo) / (hi - lo);
    else
      for (auto& x : img.data.data) x = 0.0;
  }
  return img;
}

inline NiftiImage read_nifti1(const std::string& path, bool normalize = true) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw PathError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return read_nifti1_bytes(bytes, normalize);
}

// Minimal float32 writer, the exact round-trip partner of the reader.
inline void write_nifti1(const std::string& path, const RealTensor& t) {
  if (t.rank() < 1 || t.rank() > 7) throw ShapeError("nifti writer supports rank 1..7, got " + t.shape.str());
  std::vector<unsigned char> hdr(352, 0);
  auto put_i32 = [&](std::size_t off, std::int32_t x) { std::memcpy(hdr.data() + off, &x, 4); };
  auto put_i16 = [&](std::size_t off, std::int16_t x) { std::memcpy(hdr.data() + off, &x, 2); };
  auto put_f32 = [&](std::size_t off, float x) { std::memcpy(hdr.data() + off, &x, 4); };
  put_i32(0, 348);
  put_i16(40, static_cast<std::int16_t>(t.rank()));
  for (std::size_t k = 0; k < t.rank(); ++k)
    put_i16(40 + 2 * (k + 1), static_cast<std::int16_t>(t.shape[t.rank() - 1 - k]));
  for (std::size_t k = t.rank() + 1; k <= 7; ++k) put_i16(40 + 2 * k, 1);
  put_i16(70, 16);  // float32
  put_i16(72, 32);
  for (std::size_t k = 0; k <= 7; ++k) put_f32(76 + 4 * k, 1.0f);
  put_f32(108, 352.0f);
  put_f32(112, 1.0f);
  put_f32(116, 0.0f);
  hdr[344] = 'n';
  hdr[345] = '+';
  hdr[346] = '1';
  hdr[347] = '\0';

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw PathError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(hdr.data()), static_cast<std::streamsize>(hdr.size()));
  for (double x : t.data) {
    const float fx = static_cast<float>(x);
    char b[4];
    std::memcpy(b, &fx, 4);
    f.write(b, 4);
  }
  if (!f) throw IoError("short write to " + path);
}

}  // namespace sspf
