#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bdnp {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1},
                         [](Index a, Index b) { return a * b; });
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major n-dimensional array backed by an Eigen vector.
///
/// Dimensions may be zero only to represent empty batches; every other
/// dimension is expected to be positive.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowMajorMatrix =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_dims();
    data_ = Vector::Zero(shape_size(shape_));
  }

  Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Vector(Eigen::Map<const Vector>(
                                     values.begin(), static_cast<Index>(values.size())))) {}

  static Tensor constant(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  template <typename Rng>
  static Tensor uniform(Shape shape, Scalar lo, Scalar hi, Rng& rng) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (Index i = 0; i < t.size(); ++i) t.data_[i] = static_cast<Scalar>(dist(rng));
    return t;
  }

  template <typename Rng>
  static Tensor normal(Shape shape, Scalar mean, Scalar stddev, Rng& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(static_cast<double>(mean), static_cast<double>(stddev));
    for (Index i = 0; i < t.size(); ++i) t.data_[i] = static_cast<Scalar>(dist(rng));
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }
  Scalar* raw() { return data_.data(); }
  const Scalar* raw() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar& operator()(Index n, Index c, Index h, Index w) { return data_[offset4(n, c, h, w)]; }
  Scalar operator()(Index n, Index c, Index h, Index w) const {
    return data_[offset4(n, c, h, w)];
  }

  Scalar& operator()(Index r, Index c) { return data_[r * shape_[1] + c]; }
  Scalar operator()(Index r, Index c) const { return data_[r * shape_[1] + c]; }

  /// Row-major matrix view of the flat data.
  Eigen::Map<RowMajorMatrix> matrix(Index rows, Index cols) {
    check_view(rows, cols);
    return Eigen::Map<RowMajorMatrix>(data_.data(), rows, cols);
  }
  Eigen::Map<const RowMajorMatrix> matrix(Index rows, Index cols) const {
    check_view(rows, cols);
    return Eigen::Map<const RowMajorMatrix>(data_.data(), rows, cols);
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.allFinite(); }

  Tensor& operator+=(const Tensor& other) {
    require_same_shape(other, "+=");
    data_ += other.data_;
    return *this;
  }

  void require_same_shape(const Tensor& other, const char* what) const {
    if (shape_ != other.shape_) {
      throw ShapeError(std::string(what) + ": shape " + shape_string(shape_) + " vs " +
                       shape_string(other.shape_));
    }
  }

  void require_rank(Index r, const char* what) const {
    if (rank() != r) {
      throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " +
                       shape_string(shape_));
    }
  }

 private:
  void check_dims() const {
    for (Index d : shape_) {
      if (d < 0) throw ShapeError("negative dimension in shape " + shape_string(shape_));
    }
  }

  void check_view(Index rows, Index cols) const {
    if (rows * cols != size()) {
      throw ShapeError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                       " does not cover tensor " + shape_string(shape_));
    }
  }

  Index offset4(Index n, Index c, Index h, Index w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Shape shape_;
  Vector data_;
};

/// True when both tensors have the same shape and identical bit patterns.
template <typename Scalar>
bool bitwise_equal(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) return false;
  if (a.size() == 0) return true;
  return std::memcmp(a.raw(), b.raw(), sizeof(Scalar) * static_cast<std::size_t>(a.size())) == 0;
}

template <typename Scalar>
bool all_close(const Tensor<Scalar>& a, const Tensor<Scalar>& b, double rel, double abs = 0.0) {
  if (a.shape() != b.shape()) return false;
  for (Index i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a[i]);
    const double y = static_cast<double>(b[i]);
    const double tol = abs + rel * std::max(std::abs(x), std::abs(y));
    if (std::abs(x - y) > tol) return false;
  }
  return true;
}

}  // namespace bdnp
