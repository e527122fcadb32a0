#pragma once

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>
#include <vector>

#include "sspformer/core/errors.hpp"
#include "sspformer/core/tensor.hpp"

namespace sspf {

namespace detail {
// Gradient accumulation and reproducibility contracts assume a deterministic
// BLAS; pin OpenBLAS to one internal thread before its lazy init runs.
// Batch-level parallelism is handled above the kernels.
struct BlasInit {
  BlasInit() { setenv("OPENBLAS_NUM_THREADS", "1", 0); }
};
inline const BlasInit blas_init_once{};
}  // namespace detail

// Dense [m,k]x[k,n] product.
inline RealTensor matmul(const RealTensor& a, const RealTensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul expects rank-2 operands, got " + a.shape.str() + " and " + b.shape.str());
  if (a.shape[1] != b.shape[0])
    throw ShapeError("matmul inner extents differ: " + a.shape.str() + " vs " + b.shape.str());
  const int m = static_cast<int>(a.shape[0]);
  const int k = static_cast<int>(a.shape[1]);
  const int n = static_cast<int>(b.shape[1]);
  RealTensor out(Shape{a.shape[0], b.shape[1]});
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0, a.data.data(), k, b.data.data(), n, 0.0,
              out.data.data(), n);
  return out;
}

// a^T * b for a:[k,m], b:[k,n] -> [m,n]
inline RealTensor matmul_tn(const RealTensor& a, const RealTensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[0] != b.shape[0])
    throw ShapeError("matmul_tn shapes " + a.shape.str() + " vs " + b.shape.str());
  const int k = static_cast<int>(a.shape[0]);
  const int m = static_cast<int>(a.shape[1]);
  const int n = static_cast<int>(b.shape[1]);
  RealTensor out(Shape{a.shape[1], b.shape[1]});
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, m, n, k, 1.0, a.data.data(), m, b.data.data(), n, 0.0,
              out.data.data(), n);
  return out;
}

// a * b^T for a:[m,k], b:[n,k] -> [m,n]
inline RealTensor matmul_nt(const RealTensor& a, const RealTensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1])
    throw ShapeError("matmul_nt shapes " + a.shape.str() + " vs " + b.shape.str());
  const int m = static_cast<int>(a.shape[0]);
  const int k = static_cast<int>(a.shape[1]);
  const int n = static_cast<int>(b.shape[0]);
  RealTensor out(Shape{a.shape[0], b.shape[0]});
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, n, k, 1.0, a.data.data(), k, b.data.data(), k, 0.0,
              out.data.data(), n);
  return out;
}

inline RealTensor transpose(const RealTensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank 2, got " + a.shape.str());
  RealTensor out(Shape{a.shape[1], a.shape[0]});
  for (std::size_t i = 0; i < a.shape[0]; ++i)
    for (std::size_t j = 0; j < a.shape[1]; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

// Numerically stable softmax along `axis`; each line sums to 1.
inline RealTensor softmax(const RealTensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax axis " + std::to_string(axis) + " out of range for " + x.shape.str());
  const std::size_t len = x.shape[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape[i];
  RealTensor y(x.shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = x.data[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, x.data[base + l * inner]);
      double sum = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double e = std::exp(x.data[base + l * inner] - mx);
        y.data[base + l * inner] = e;
        sum += e;
      }
      for (std::size_t l = 0; l < len; ++l) y.data[base + l * inner] /= sum;
    }
  }
  return y;
}

enum class Pad { same, valid };

namespace detail {
inline void conv2d_check(const Shape& xs, const Shape& ks, Pad pad) {
  if (xs.rank() != 3) throw ShapeError("conv2d input must be [C,H,W], got " + xs.str());
  if (ks.rank() != 4) throw ShapeError("conv2d kernel must be [Cout,Cin,kh,kw], got " + ks.str());
  if (xs[0] != ks[1])
    throw ShapeError("conv2d channel mismatch: input C=" + std::to_string(xs[0]) + " kernel Cin=" + std::to_string(ks[1]));
  if (pad == Pad::same && (ks[2] % 2 == 0 || ks[3] % 2 == 0))
    throw ShapeError("conv2d same-padding requires odd kernel extents, got " + ks.str());
  if (pad == Pad::valid && (ks[2] > xs[1] || ks[3] > xs[2]))
    throw ShapeError("conv2d valid kernel larger than input: " + ks.str() + " on " + xs.str());
}
}  // namespace detail

// Cross-correlation; same-padding zero-fills the border and preserves H,W.
inline RealTensor conv2d(const RealTensor& x, const RealTensor& k, Pad pad = Pad::same) {
  detail::conv2d_check(x.shape, k.shape, pad);
  const std::size_t cin = x.shape[0], h = x.shape[1], w = x.shape[2];
  const std::size_t cout = k.shape[0], kh = k.shape[2], kw = k.shape[3];
  const std::size_t ph = (pad == Pad::same) ? kh / 2 : 0;
  const std::size_t pw = (pad == Pad::same) ? kw / 2 : 0;
  const std::size_t oh = (pad == Pad::same) ? h : h - kh + 1;
  const std::size_t ow = (pad == Pad::same) ? w : w - kw + 1;
  RealTensor y(Shape{cout, oh, ow});
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* kp = &k.data[(co * cin + ci) * kh * kw];
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t u = 0; u < kh; ++u) {
          const std::ptrdiff_t xi = static_cast<std::ptrdiff_t>(i + u) - static_cast<std::ptrdiff_t>(ph);
          if (xi < 0 || xi >= static_cast<std::ptrdiff_t>(h)) continue;
          const double* xrow = &x.data[(ci * h + xi) * w];
          double* yrow = &y.data[(co * oh + i) * ow];
          for (std::size_t v = 0; v < kw; ++v) {
            const double kv = kp[u * kw + v];
            if (kv == 0.0) continue;
            const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(v) - static_cast<std::ptrdiff_t>(pw);
            const std::size_t j0 = off < 0 ? static_cast<std::size_t>(-off) : 0;
            const std::size_t j1 = std::min(ow, off < 0 ? ow : w - static_cast<std::size_t>(off));
            for (std::size_t j = j0; j < j1; ++j) yrow[j] += xrow[j + off] * kv;
          }
        }
      }
    }
  }
  return y;
}

// Gradient of conv2d w.r.t. its input.
inline RealTensor conv2d_grad_input(const Shape& x_shape, const RealTensor& k, const RealTensor& gy, Pad pad) {
  detail::conv2d_check(x_shape, k.shape, pad);
  const std::size_t cin = x_shape[0], h = x_shape[1], w = x_shape[2];
  const std::size_t cout = k.shape[0], kh = k.shape[2], kw = k.shape[3];
  const std::size_t ph = (pad == Pad::same) ? kh / 2 : 0;
  const std::size_t pw = (pad == Pad::same) ? kw / 2 : 0;
  const std::size_t oh = gy.shape[1], ow = gy.shape[2];
  RealTensor gx(Shape{cin, h, w});
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* kp = &k.data[(co * cin + ci) * kh * kw];
      for (std::size_t i = 0; i < oh; ++i) {
        const double* gyrow = &gy.data[(co * oh + i) * ow];
        for (std::size_t u = 0; u < kh; ++u) {
          const std::ptrdiff_t xi = static_cast<std::ptrdiff_t>(i + u) - static_cast<std::ptrdiff_t>(ph);
          if (xi < 0 || xi >= static_cast<std::ptrdiff_t>(h)) continue;
          double* gxrow = &gx.data[(ci * h + xi) * w];
          for (std::size_t v = 0; v < kw; ++v) {
            const double kv = kp[u * kw + v];
            if (kv == 0.0) continue;
            const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(v) - static_cast<std::ptrdiff_t>(pw);
            const std::size_t j0 = off < 0 ? static_cast<std::size_t>(-off) : 0;
            const std::size_t j1 = std::min(ow, off < 0 ? ow : w - static_cast<std::size_t>(off));
            for (std::size_t j = j0; j < j1; ++j) gxrow[j + off] += gyrow[j] * kv;
          }
        }
      }
    }
  }
  return gx;
}

// Gradient of conv2d w.r.t. its kernel.
inline RealTensor conv2d_grad_kernel(const RealTensor& x, const Shape& k_shape, const RealTensor& gy, Pad pad) {
  detail::conv2d_check(x.shape, k_shape, pad);
  const std::size_t cin = x.shape[0], h = x.shape[1], w = x.shape[2];
  const std::size_t cout = k_shape[0], kh = k_shape[2], kw = k_shape[3];
  const std::size_t ph = (pad == Pad::same) ? kh / 2 : 0;
  const std::size_t pw = (pad == Pad::same) ? kw / 2 : 0;
  const std::size_t oh = gy.shape[1], ow = gy.shape[2];
  RealTensor gk(k_shape);
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      double* gkp = &gk.data[(co * cin + ci) * kh * kw];
      for (std::size_t i = 0; i < oh; ++i) {
        const double* gyrow = &gy.data[(co * oh + i) * ow];
        for (std::size_t u = 0; u < kh; ++u) {
          const std::ptrdiff_t xi = static_cast<std::ptrdiff_t>(i + u) - static_cast<std::ptrdiff_t>(ph);
          if (xi < 0 || xi >= static_cast<std::ptrdiff_t>(h)) continue;
          const double* xrow = &x.data[(ci * h + xi) * w];
          for (std::size_t v = 0; v < kw; ++v) {
            const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(v) - static_cast<std::ptrdiff_t>(pw);
            const std::size_t j0 = off < 0 ? static_cast<std::size_t>(-off) : 0;
            const std::size_t j1 = std::min(ow, off < 0 ? ow : w - static_cast<std::size_t>(off));
            double acc = 0.0;
            for (std::size_t j = j0; j < j1; ++j) acc += gyrow[j] * xrow[j + off];
            gkp[u * kw + v] += acc;
          }
        }
      }
    }
  }
  return gk;
}

// Sub-pixel rearrangement: [C*r^2, H, W] -> [C, r*H, r*W] with
// out(c, r*i+di, r*j+dj) = in(c*r^2 + di*r + dj, i, j).
inline RealTensor pixel_shuffle(const RealTensor& x, std::size_t r) {
  if (x.rank() != 3) throw ShapeError("pixel_shuffle input must be [C,H,W], got " + x.shape.str());
  if (r == 0) throw ShapeError("pixel_shuffle factor must be >= 1");
  if (x.shape[0] % (r * r) != 0)
    throw ShapeError("pixel_shuffle channels " + std::to_string(x.shape[0]) + " not divisible by r^2=" +
                     std::to_string(r * r));
  const std::size_t c = x.shape[0] / (r * r), h = x.shape[1], w = x.shape[2];
  RealTensor y(Shape{c, r * h, r * w});
  for (std::size_t cc = 0; cc < c; ++cc)
    for (std::size_t di = 0; di < r; ++di)
      for (std::size_t dj = 0; dj < r; ++dj)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j)
            y.at(cc, r * i + di, r * j + dj) = x.at(cc * r * r + di * r + dj, i, j);
  return y;
}

// Exact inverse of pixel_shuffle.
inline RealTensor pixel_unshuffle(const RealTensor& x, std::size_t r) {
  if (x.rank() != 3) throw ShapeError("pixel_unshuffle input must be [C,H,W], got " + x.shape.str());
  if (r == 0) throw ShapeError("pixel_unshuffle factor must be >= 1");
  if (x.shape[1] % r != 0 || x.shape[2] % r != 0)
    throw ShapeError("pixel_unshuffle spatial extents not divisible by r in " + x.shape.str());
  const std::size_t c = x.shape[0], h = x.shape[1] / r, w = x.shape[2] / r;
  RealTensor y(Shape{c * r * r, h, w});
  for (std::size_t cc = 0; cc < c; ++cc)
    for (std::size_t di = 0; di < r; ++di)
      for (std::size_t dj = 0; dj < r; ++dj)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j)
            y.at(cc * r * r + di * r + dj, i, j) = x.at(cc, r * i + di, r * j + dj);
  return y;
}

inline double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad_scalar(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779399461;
  return cdf + x * pdf;
}

inline double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// q-quantile with linear interpolation at rank q*(n-1); input must be sorted.
inline double quantile_sorted(const std::vector<double>& v, double q) {
  if (v.empty()) throw ContractError("quantile of empty sample");
  if (q < 0.0 || q > 1.0) throw ContractError("quantile level outside [0,1]");
  if (v.size() == 1) return v[0];
  const double rank = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(rank);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  return quantile_sorted(v, q);
}

}  // namespace sspf
