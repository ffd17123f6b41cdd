#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "scl_lle/common.hpp"

namespace scl_lle {

// Dense row-major double tensor. Rank is dynamic but in practice everything
// here is 1-4D (bias vectors, C×H×W feature maps, OC×IC×KH×KW kernels,
// M×3×H×W curve stacks).
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
    v.assign(count(shape), 0.0);
  }
  Tensor(std::initializer_list<std::size_t> s) : Tensor(std::vector<std::size_t>(s)) {}

  static std::size_t count(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
  }

  std::size_t size() const { return v.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  double* data() { return v.data(); }
  const double* data() const { return v.data(); }

  double& operator[](std::size_t i) { return v[i]; }
  double operator[](std::size_t i) const { return v[i]; }

  // 3D (c,y,x) and 4D (a,b,y,x) accessors for the common cases
  double& at3(std::size_t c, std::size_t y, std::size_t x) {
    return v[(c * shape[1] + y) * shape[2] + x];
  }
  double at3(std::size_t c, std::size_t y, std::size_t x) const {
    return v[(c * shape[1] + y) * shape[2] + x];
  }
  double& at4(std::size_t a, std::size_t b, std::size_t y, std::size_t x) {
    return v[((a * shape[1] + b) * shape[2] + y) * shape[3] + x];
  }
  double at4(std::size_t a, std::size_t b, std::size_t y, std::size_t x) const {
    return v[((a * shape[1] + b) * shape[2] + y) * shape[3] + x];
  }

  void fill(double x) { std::fill(v.begin(), v.end(), x); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
  }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

inline void axpy(double alpha, const Tensor& x, Tensor& y) {
  require_same_shape(x, y, "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y.v[i] += alpha * x.v[i];
}

inline double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.v[i] * b.v[i];
  return s;
}

inline double mean(const Tensor& a) {
  if (a.size() == 0) return 0.0;
  double s = 0.0;
  for (double x : a.v) s += x;
  return s / double(a.size());
}

}  // namespace scl_lle
