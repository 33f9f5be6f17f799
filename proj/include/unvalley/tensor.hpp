#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "unvalley/common.hpp"
#include "unvalley/rng.hpp"

namespace unvalley {

using Shape = std::vector<std::int64_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    UNVALLEY_CHECK(d >= 0, ShapeError, "negative dimension in shape ", shape_str(s));
    n *= d;
  }
  return n;
}

// Dense row-major double tensor. All network math runs in double so the
// oracle tolerances in the test suite hold with margin; file formats convert
// at the I/O boundary.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), 0.0) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    UNVALLEY_CHECK(static_cast<std::int64_t>(data_.size()) == shape_numel(shape_), ShapeError,
                   "data size ", data_.size(), " does not match shape ", shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return full({}, v); }

  static Tensor gaussian(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = rng.gaussian() * stddev;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::int64_t ndim() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t dim(std::int64_t i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  // Scalar convenience for 0-d / 1-element tensors.
  double item() const {
    UNVALLEY_CHECK(numel() == 1, ShapeError, "item() on tensor with ", numel(), " elements");
    return data_[0];
  }

  // 4-d accessor (NCHW is the convention throughout the network code).
  double& at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(((n * dim(1) + c) * dim(2) + h) * dim(3) + w)];
  }
  double at4(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>(((n * dim(1) + c) * dim(2) + h) * dim(3) + w)];
  }
  double& at2(std::int64_t r, std::int64_t c) {
    return data_[static_cast<std::size_t>(r * dim(1) + c)];
  }
  double at2(std::int64_t r, std::int64_t c) const {
    return data_[static_cast<std::size_t>(r * dim(1) + c)];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(Shape s) const {
    UNVALLEY_CHECK(shape_numel(s) == numel(), ShapeError, "reshape ", shape_str(shape_), " -> ",
                   shape_str(s), " changes element count");
    Tensor t = *this;
    t.shape_ = std::move(s);
    return t;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  void add_(const Tensor& o, double scale = 1.0) {
    UNVALLEY_CHECK(same_shape(o), ShapeError, "add_: shape mismatch ", shape_str(shape_), " vs ",
                   shape_str(o.shape_));
    const double* src = o.data();
    double* dst = data();
    const std::int64_t n = numel();
    for (std::int64_t i = 0; i < n; ++i) dst[i] += scale * src[i];
  }

  void mul_(double s) {
    for (auto& v : data_) v *= s;
  }

  double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }
  double mean() const { return numel() ? sum() / double(numel()) : 0.0; }

  double max_abs() const {
    double m = 0.0;
    for (double v : data_) m = std::max(m, std::fabs(v));
    return m;
  }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::uint64_t checksum() const {
    std::uint64_t h = fnv1a64(shape_.data(), shape_.size() * sizeof(std::int64_t));
    return fnv1a64(data_.data(), data_.size() * sizeof(double), h);
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  UNVALLEY_CHECK(a.same_shape(b), ShapeError, "max_abs_diff: shape mismatch ",
                 shape_str(a.shape()), " vs ", shape_str(b.shape()));
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace unvalley
