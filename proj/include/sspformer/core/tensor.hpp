#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <vector>

#include "sspformer/core/errors.hpp"
#include "sspformer/core/rng.hpp"
#include "sspformer/core/shape.hpp"

namespace sspf {

using Cplx = std::complex<double>;

// Dense row-major 64-bit real tensor. Value semantics; immutable from the
// caller's perspective once handed to another module.
struct RealTensor {
  Shape shape;
  std::vector<double> data;

  RealTensor() = default;
  explicit RealTensor(Shape s) : shape(std::move(s)), data(shape.elements(), 0.0) {}
  RealTensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape.elements())
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape.str());
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.rank(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  // 2-D / 3-D accessors for the common [H,W] and [C,H,W] layouts.
  double& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }
  double& at(std::size_t c, std::size_t i, std::size_t j) { return data[(c * shape[1] + i) * shape[2] + j]; }
  double at(std::size_t c, std::size_t i, std::size_t j) const { return data[(c * shape[1] + i) * shape[2] + j]; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  static RealTensor zeros(Shape s) { return RealTensor(std::move(s)); }

  static RealTensor full(Shape s, double v) {
    RealTensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static RealTensor random_normal(Shape s, Rng& rng, double mean = 0.0, double stddev = 1.0) {
    RealTensor t(std::move(s));
    for (auto& v : t.data) v = rng.normal(mean, stddev);
    return t;
  }

  static RealTensor random_uniform(Shape s, Rng& rng, double lo = 0.0, double hi = 1.0) {
    RealTensor t(std::move(s));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
  }
};

struct ComplexTensor {
  Shape shape;
  std::vector<Cplx> data;

  ComplexTensor() = default;
  explicit ComplexTensor(Shape s) : shape(std::move(s)), data(shape.elements(), Cplx(0.0, 0.0)) {}
  ComplexTensor(Shape s, std::vector<Cplx> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape.elements())
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape.str());
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.rank(); }

  Cplx& operator[](std::size_t i) { return data[i]; }
  const Cplx& operator[](std::size_t i) const { return data[i]; }

  Cplx& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  const Cplx& at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

  bool all_finite() const {
    for (const auto& v : data)
      if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) return false;
    return true;
  }
};

inline ComplexTensor to_complex(const RealTensor& x) {
  ComplexTensor c(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) c.data[i] = Cplx(x.data[i], 0.0);
  return c;
}

inline RealTensor real_part(const ComplexTensor& x) {
  RealTensor r(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) r.data[i] = x.data[i].real();
  return r;
}

inline RealTensor imag_part(const ComplexTensor& x) {
  RealTensor r(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) r.data[i] = x.data[i].imag();
  return r;
}

inline double norm2(const RealTensor& x) {
  double s = 0.0;
  for (double v : x.data) s += v * v;
  return std::sqrt(s);
}

inline double norm2(const ComplexTensor& x) {
  double s = 0.0;
  for (const auto& v : x.data) s += std::norm(v);
  return std::sqrt(s);
}

inline double max_abs_diff(const RealTensor& a, const RealTensor& b) {
  if (a.shape != b.shape) throw ShapeError("max_abs_diff shapes " + a.shape.str() + " vs " + b.shape.str());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace sspf
