#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace grasp {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

/// Thrown when tensor extents do not satisfy an operation's contract.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

/// Dense row-major n-d array. Feature maps use (B, C, H, W, D) with D fastest.
template <typename Scalar>
class Tensor {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Storage::Zero(shape_size(shape_))) {}
  Tensor(Shape shape, Scalar fill)
      : shape_(std::move(shape)), data_(Storage::Constant(shape_size(shape_), fill)) {}
  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw ShapeError("tensor payload size does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Storage& array() { return data_; }
  const Storage& array() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// Product of all extents after the first `axis` ones.
  Index stride(int axis) const {
    Index s = 1;
    for (int i = axis + 1; i < rank(); ++i) s *= shape_[static_cast<std::size_t>(i)];
    return s;
  }

  /// Row-major (rows x cols) view of a contiguous block starting at `offset`.
  MatrixMap<Scalar> matrix(Index rows, Index cols, Index offset = 0) {
    return MatrixMap<Scalar>(data() + offset, rows, cols);
  }
  ConstMatrixMap<Scalar> matrix(Index rows, Index cols, Index offset = 0) const {
    return ConstMatrixMap<Scalar>(data() + offset, rows, cols);
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != size()) throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  void set_zero() { data_.setZero(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && (a.data_ == b.data_).all();
  }

 private:
  Shape shape_;
  Storage data_;
};

/// Spatial element count of a (B, C, ...) tensor.
template <typename Scalar>
Index spatial_size(const Tensor<Scalar>& t) {
  return t.rank() <= 2 ? 1 : t.stride(1);
}

/// Spatial extents (everything after batch and channel).
inline Shape spatial_shape(const Shape& shape) {
  return shape.size() <= 2 ? Shape{} : Shape(shape.begin() + 2, shape.end());
}

}  // namespace grasp
