#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace dsnet {

/// Raised for invalid arguments, shape mismatches and malformed inputs.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a primitive produces a non-finite value.
class EngineFault : public Error {
 public:
  using Error::Error;
};

/// (N, C, H, W) extents of a dense 4-D tensor.
struct Shape {
  std::int64_t n = 0;
  std::int64_t c = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;

  std::int64_t numel() const { return n * c * h * w; }
  std::int64_t plane() const { return h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;
  std::string str() const;
};

/// Dense row-major NCHW tensor. The element type is the template scalar;
/// float is used for training and inference, double for gradient checks.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  Tensor() = default;
  explicit Tensor(const Shape& shape) : shape_(shape), data_(Vector::Zero(checked_numel(shape))) {}
  Tensor(const Shape& shape, Scalar value)
      : shape_(shape), data_(Vector::Constant(checked_numel(shape), value)) {}
  Tensor(const Shape& shape, Vector data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) throw Error("tensor data length does not match shape " + shape_.str());
  }

  static Tensor zeros(const Shape& s) { return Tensor(s); }
  static Tensor constant(const Shape& s, Scalar v) { return Tensor(s, v); }
  /// Per-channel vector stored as a (C,1,1,1) tensor.
  static Tensor vector(std::int64_t c, Scalar v = Scalar(0)) { return Tensor(Shape{c, 1, 1, 1}, v); }

  const Shape& shape() const { return shape_; }
  std::int64_t size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Vector& values() { return data_; }
  const Vector& values() const { return data_; }
  std::span<Scalar> span() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> span() const { return {data_.data(), static_cast<std::size_t>(data_.size())}; }

  std::int64_t index(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  Scalar& operator()(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[index(n, c, h, w)];
  }
  Scalar operator()(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[index(n, c, h, w)];
  }
  Scalar& operator[](std::int64_t i) { return data_[i]; }
  Scalar operator[](std::int64_t i) const { return data_[i]; }

  /// Pointer to the (n, c) spatial plane.
  Scalar* plane(std::int64_t n, std::int64_t c) { return data_.data() + (n * shape_.c + c) * shape_.plane(); }
  const Scalar* plane(std::int64_t n, std::int64_t c) const {
    return data_.data() + (n * shape_.c + c) * shape_.plane();
  }

  /// Sample n viewed as a (C, H*W) matrix.
  MatrixMap sample(std::int64_t n) { return MatrixMap(plane(n, 0), shape_.c, shape_.plane()); }
  ConstMatrixMap sample(std::int64_t n) const { return ConstMatrixMap(plane(n, 0), shape_.c, shape_.plane()); }

  bool all_finite() const { return data_.allFinite(); }

  Tensor reshaped(const Shape& s) const { return Tensor(s, data_); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o);
    data_ += o.data_;
    return *this;
  }

  void require_same_shape(const Tensor& o) const {
    if (!(shape_ == o.shape_)) throw Error("shape mismatch: " + shape_.str() + " vs " + o.shape_.str());
  }

 private:
  static std::int64_t checked_numel(const Shape& s) {
    if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0) throw Error("negative tensor extent " + s.str());
    return s.numel();
  }

  Shape shape_{};
  Vector data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Integer class map of shape (N, H, W). Values are class ids or the ignore index.
struct LabelMap {
  std::int64_t n = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;
  std::vector<std::int32_t> data;

  LabelMap() = default;
  LabelMap(std::int64_t n_, std::int64_t h_, std::int64_t w_, std::int32_t fill = 0)
      : n(n_), h(h_), w(w_), data(static_cast<std::size_t>(n_ * h_ * w_), fill) {}

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  std::int32_t& at(std::int64_t b, std::int64_t y, std::int64_t x) { return data[(b * h + y) * w + x]; }
  std::int32_t at(std::int64_t b, std::int64_t y, std::int64_t x) const { return data[(b * h + y) * w + x]; }
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

/// Default void label (Cityscapes convention).
inline constexpr std::int32_t kIgnoreIndex = 255;

}  // namespace dsnet
