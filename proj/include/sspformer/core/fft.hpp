#pragma once

#include <cmath>
#include <vector>

#include "sspformer/core/errors.hpp"
#include "sspformer/core/tensor.hpp"

namespace sspf {

namespace detail {

// In-place radix-2 Cooley-Tukey on a stride-1 line of length n (power of two).
// sign = -1 forward, +1 inverse; no normalization here.
inline void fft_line(Cplx* a, std::size_t n, int sign) {
  // bit-reversal permutation
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = sign * 2.0 * M_PI / static_cast<double>(len);
    const Cplx wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      Cplx w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const Cplx u = a[i + k];
        const Cplx v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

inline void check_pow2_axes(const Shape& s) {
  if (s.rank() < 2) throw ShapeError("fft2 requires rank >= 2, got " + s.str());
  const std::size_t h = s[s.rank() - 2];
  const std::size_t w = s[s.rank() - 1];
  if (!is_power_of_two(h))
    throw SizingError("fft2 axis -2 extent " + std::to_string(h) + " is not a power of two");
  if (!is_power_of_two(w))
    throw SizingError("fft2 axis -1 extent " + std::to_string(w) + " is not a power of two");
}

inline void fft2_inplace(ComplexTensor& x, int sign) {
  check_pow2_axes(x.shape);
  const std::size_t rank = x.rank();
  const std::size_t h = x.shape[rank - 2];
  const std::size_t w = x.shape[rank - 1];
  const std::size_t plane = h * w;
  const std::size_t batches = x.size() / plane;
  std::vector<Cplx> col(h);
  for (std::size_t b = 0; b < batches; ++b) {
    Cplx* p = x.data.data() + b * plane;
    for (std::size_t r = 0; r < h; ++r) fft_line(p + r * w, w, sign);
    for (std::size_t c = 0; c < w; ++c) {
      for (std::size_t r = 0; r < h; ++r) col[r] = p[r * w + c];
      fft_line(col.data(), h, sign);
      for (std::size_t r = 0; r < h; ++r) p[r * w + c] = col[r];
    }
  }
}

}  // namespace detail

// Unnormalized forward 2-D DFT over the last two axes; earlier axes are batch.
inline ComplexTensor fft2(const ComplexTensor& x) {
  ComplexTensor y = x;
  detail::fft2_inplace(y, -1);
  return y;
}

// Inverse 2-D DFT with 1/(H*W) normalization, so ifft2(fft2(x)) == x.
inline ComplexTensor ifft2(const ComplexTensor& x) {
  ComplexTensor y = x;
  detail::fft2_inplace(y, +1);
  const std::size_t rank = y.rank();
  const double scale = 1.0 / static_cast<double>(y.shape[rank - 2] * y.shape[rank - 1]);
  for (auto& v : y.data) v *= scale;
  return y;
}

}  // namespace sspf
