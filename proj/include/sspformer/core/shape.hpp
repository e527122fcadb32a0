#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sspformer/core/errors.hpp"

namespace sspf {

// Ordered list of positive extents. Row-major layout everywhere.
struct Shape {
  std::vector<std::size_t> dims;

  Shape() = default;
  Shape(std::initializer_list<std::size_t> d) : dims(d) { validate(); }
  explicit Shape(std::vector<std::size_t> d) : dims(std::move(d)) { validate(); }

  void validate() const {
    for (auto e : dims) {
      if (e == 0) throw ShapeError("extent must be >= 1, got 0 in " + str());
    }
  }

  std::size_t rank() const { return dims.size(); }

  std::size_t operator[](std::size_t i) const { return dims[i]; }

  std::size_t elements() const {
    std::size_t n = 1;
    for (auto e : dims) {
      if (e != 0 && n > SIZE_MAX / e) throw ShapeError("element count overflows addressing in " + str());
      n *= e;
    }
    return n;
  }

  bool operator==(const Shape& o) const { return dims == o.dims; }
  bool operator!=(const Shape& o) const { return dims != o.dims; }

  std::string str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
    os << "]";
    return os.str();
  }
};

inline bool is_power_of_two(std::size_t n) { return n > 0 && (n & (n - 1)) == 0; }

}  // namespace sspf
