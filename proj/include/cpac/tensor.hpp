#ifndef CPAC_TENSOR_HPP
#define CPAC_TENSOR_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cpac {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<Index>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t k = 0; k < shape.size(); ++k) os << (k ? "," : "") << shape[k];
  os << ')';
  return os.str();
}

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>{});
}

/**
 * Dense N-way array stored column-major: the first index varies fastest, so
 * an order-2 tensor has exactly the column-stacking layout of vec().
 *
 * Offset of (i_1, ..., i_N) is i_1 + I_1 (i_2 + I_2 (i_3 + ...)).
 */
template <typename Scalar>
class Tensor {
 public:
  using Storage = Vector<Scalar>;

  Tensor() : shape_{1}, data_(Storage::Zero(1)) {}

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_ = Storage::Zero(shape_size(shape_));
  }

  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (shape_size(shape_) != data_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor from_matrix(const Matrix<Scalar>& m) {
    Storage data = Eigen::Map<const Storage>(m.data(), m.size());
    return Tensor({m.rows(), m.cols()}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  Index order() const { return static_cast<Index>(shape_.size()); }
  Index extent(Index mode) const { return shape_.at(static_cast<std::size_t>(mode)); }
  Index size() const { return data_.size(); }

  Storage& data() { return data_; }
  const Storage& data() const { return data_; }

  /// Column-major matrix view of the storage; rows * cols must equal size().
  Eigen::Map<Matrix<Scalar>> matrix(Index rows, Index cols) {
    if (rows * cols != size()) throw ShapeError("matrix view does not cover tensor");
    return {data_.data(), rows, cols};
  }
  Eigen::Map<const Matrix<Scalar>> matrix(Index rows, Index cols) const {
    if (rows * cols != size()) throw ShapeError("matrix view does not cover tensor");
    return {data_.data(), rows, cols};
  }

  template <typename... Idx>
  Scalar& operator()(Idx... idx) {
    return data_[offset({static_cast<Index>(idx)...})];
  }
  template <typename... Idx>
  const Scalar& operator()(Idx... idx) const {
    return data_[offset({static_cast<Index>(idx)...})];
  }

  Scalar& at(const Shape& idx) { return data_[offset(idx)]; }
  const Scalar& at(const Shape& idx) const { return data_[offset(idx)]; }

  Index offset(const Shape& idx) const {
    if (idx.size() != shape_.size())
      throw ShapeError("index arity " + std::to_string(idx.size()) + " vs order " +
                       std::to_string(shape_.size()));
    Index off = 0;
    for (std::size_t k = idx.size(); k-- > 0;) {
      if (idx[k] < 0 || idx[k] >= shape_[k]) throw ShapeError("tensor index out of range");
      off = off * shape_[k] + idx[k];
    }
    return off;
  }

  /// Inverse of offset().
  Shape unravel(Index off) const {
    Shape idx(shape_.size());
    for (std::size_t k = 0; k < shape_.size(); ++k) {
      idx[k] = off % shape_[k];
      off /= shape_[k];
    }
    return idx;
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  void set_zero() { data_.setZero(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor order must be at least 1");
    for (Index e : shape)
      if (e < 1) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
  }

  Shape shape_;
  Storage data_;
};

/**
 * Geometry of one convolution: X x Y x S input, d x d x S x N kernel,
 * stride one, no padding.
 */
struct ShapeDescriptor {
  Index x = 1;
  Index y = 1;
  Index s = 1;
  Index n = 1;
  Index d = 1;

  ShapeDescriptor() = default;
  ShapeDescriptor(Index x_, Index y_, Index s_, Index n_, Index d_)
      : x(x_), y(y_), s(s_), n(n_), d(d_) {
    validate();
  }

  void validate() const {
    if (d < 1 || s < 1 || n < 1) throw ShapeError("d, S and N must be positive");
    if (x < d || y < d)
      throw ShapeError("kernel size " + std::to_string(d) + " exceeds spatial extent " +
                       std::to_string(x) + "x" + std::to_string(y));
  }

  Index out_x() const { return x - d + 1; }
  Index out_y() const { return y - d + 1; }
  /// Number of output locations.
  Index p() const { return out_x() * out_y(); }

  friend bool operator==(const ShapeDescriptor&, const ShapeDescriptor&) = default;
};

}  // namespace cpac

#endif  // CPAC_TENSOR_HPP
