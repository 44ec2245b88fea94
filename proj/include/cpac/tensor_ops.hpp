#ifndef CPAC_TENSOR_OPS_HPP
#define CPAC_TENSOR_OPS_HPP

#include "cpac/tensor.hpp"

#include <string>
#include <vector>

namespace cpac {

// Modes are 0-based throughout: mode 0 is the first index of a tensor.

/// Column-stacking vectorization [X11..Xm1, X12..Xm2, ...].
template <typename Derived>
Vector<typename Derived::Scalar> vec(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  Matrix<Scalar> tmp = m;
  return Eigen::Map<const Vector<Scalar>>(tmp.data(), tmp.size());
}

/// Zero-copy vec of an order-2 tensor.
template <typename Scalar>
const Vector<Scalar>& vec(const Tensor<Scalar>& t) {
  if (t.order() != 2)
    throw ShapeError("vec expects an order-2 tensor, got shape " + to_string(t.shape()));
  return t.data();
}

/// Inverse of vec for an m x n matrix.
template <typename Derived>
Matrix<typename Derived::Scalar> unvec(const Eigen::MatrixBase<Derived>& v, Index rows,
                                       Index cols) {
  using Scalar = typename Derived::Scalar;
  if (v.size() != rows * cols) throw ShapeError("unvec: length does not match rows*cols");
  Vector<Scalar> tmp = v;
  return Eigen::Map<const Matrix<Scalar>>(tmp.data(), rows, cols);
}

/// Kronecker product; block (i, j) of the result is a(i, j) * b.
template <typename DerivedA, typename DerivedB>
Matrix<typename DerivedA::Scalar> kron(const Eigen::MatrixBase<DerivedA>& a,
                                       const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  const Index br = b.rows();
  const Index bc = b.cols();
  Matrix<Scalar> out(a.rows() * br, a.cols() * bc);
  for (Index j = 0; j < a.cols(); ++j)
    for (Index i = 0; i < a.rows(); ++i) out.block(i * br, j * bc, br, bc) = a(i, j) * b;
  return out;
}

template <typename DerivedU, typename DerivedV>
Matrix<typename DerivedU::Scalar> outer(const Eigen::MatrixBase<DerivedU>& u,
                                        const Eigen::MatrixBase<DerivedV>& v) {
  return u.derived() * v.derived().transpose();
}

/// Rank-one N-way tensor u_1 o u_2 o ... o u_N.
template <typename Scalar>
Tensor<Scalar> outer(const std::vector<Vector<Scalar>>& factors) {
  if (factors.empty()) throw ShapeError("outer needs at least one factor");
  Vector<Scalar> acc = factors.front();
  Shape shape{acc.size()};
  for (std::size_t k = 1; k < factors.size(); ++k) {
    const Vector<Scalar>& f = factors[k];
    Vector<Scalar> next(acc.size() * f.size());
    for (Index j = 0; j < f.size(); ++j) next.segment(j * acc.size(), acc.size()) = acc * f[j];
    acc = std::move(next);
    shape.push_back(f.size());
  }
  return Tensor<Scalar>(std::move(shape), std::move(acc));
}

/**
 * Column ordering of a mode-k unfolding.
 *
 * Kolda: remaining modes in increasing order, lowest mode fastest.
 * Cyclic: remaining modes in the order k+1, ..., N-1, 0, ..., k-1 with k+1
 * fastest. The Kronecker derivative matrices for K^Y and K^S are written
 * against this ordering.
 */
enum class UnfoldOrder { Kolda, Cyclic };

template <typename Scalar>
Matrix<Scalar> unfold(const Tensor<Scalar>& t, Index mode, UnfoldOrder order = UnfoldOrder::Kolda) {
  const Index n = t.order();
  if (mode < 0 || mode >= n)
    throw ShapeError("unfold: mode " + std::to_string(mode) + " out of range for order " +
                     std::to_string(n));
  std::vector<Index> rest;
  if (order == UnfoldOrder::Kolda) {
    for (Index k = 0; k < n; ++k)
      if (k != mode) rest.push_back(k);
  } else {
    for (Index k = 1; k < n; ++k) rest.push_back((mode + k) % n);
  }
  const Index rows = t.extent(mode);
  const Index cols = t.size() / rows;
  Matrix<Scalar> out(rows, cols);
  for (Index off = 0; off < t.size(); ++off) {
    Shape idx = t.unravel(off);
    Index col = 0;
    for (auto it = rest.rbegin(); it != rest.rend(); ++it) col = col * t.extent(*it) + idx[*it];
    out(idx[mode], col) = t.data()[off];
  }
  return out;
}

/**
 * Contraction T x_mode v: the mode is removed from the shape (an order-1
 * input yields a length-1 tensor). Sums run over the contracted index in
 * ascending order.
 *
 * With Kolda column order, vec(T x_mode v) == unfold(T, mode)^T v.
 */
template <typename Scalar, typename Derived>
Tensor<Scalar> mode_mul_vec(const Tensor<Scalar>& t, const Eigen::MatrixBase<Derived>& v,
                            Index mode) {
  if (mode < 0 || mode >= t.order())
    throw ShapeError("mode_mul_vec: mode out of range");
  const Index extent = t.extent(mode);
  if (v.size() != extent)
    throw ShapeError("mode_mul_vec: vector length " + std::to_string(v.size()) +
                     " does not match extent " + std::to_string(extent));
  Index left = 1;
  Index right = 1;
  Shape shape;
  for (Index k = 0; k < t.order(); ++k) {
    if (k < mode) left *= t.extent(k);
    if (k > mode) right *= t.extent(k);
    if (k != mode) shape.push_back(t.extent(k));
  }
  if (shape.empty()) shape.push_back(1);
  Tensor<Scalar> out(shape);
  const Scalar* src = t.data().data();
  Scalar* dst = out.data().data();
  for (Index r = 0; r < right; ++r)
    for (Index l = 0; l < left; ++l) {
      Scalar acc = 0;
      for (Index i = 0; i < extent; ++i) acc += v[i] * src[l + left * (i + extent * r)];
      dst[l + left * r] = acc;
    }
  return out;
}

/// Output location (ox, oy) maps to column ox * out_y + oy (x outer, y inner).
inline Index output_location(Index ox, Index oy, Index out_y) { return ox * out_y + oy; }

/**
 * Sliding-window reshape of an X x Y x S input into d x d x S x P, where
 * slice p holds the window whose corner is output location p.
 */
template <typename Scalar>
Tensor<Scalar> patch_expand(const Tensor<Scalar>& u, Index d) {
  if (u.order() != 3) throw ShapeError("patch_expand expects an X x Y x S tensor");
  const Index x = u.extent(0), y = u.extent(1), s = u.extent(2);
  if (d < 1 || d > x || d > y)
    throw ShapeError("patch_expand: kernel size " + std::to_string(d) +
                     " does not fit input " + to_string(u.shape()));
  const Index ox = x - d + 1, oy = y - d + 1;
  Tensor<Scalar> out({d, d, s, ox * oy});
  Scalar* dst = out.data().data();
  const Scalar* src = u.data().data();
  for (Index px = 0; px < ox; ++px)
    for (Index py = 0; py < oy; ++py) {
      Scalar* patch = dst + output_location(px, py, oy) * d * d * s;
      for (Index c = 0; c < s; ++c)
        for (Index j = 0; j < d; ++j)
          for (Index i = 0; i < d; ++i)
            patch[i + d * (j + d * c)] = src[(px + i) + x * ((py + j) + y * c)];
    }
  return out;
}

/// Adjoint of patch_expand: scatter-adds every window back onto an X x Y x S grid.
template <typename Scalar>
Tensor<Scalar> patch_accumulate(const Tensor<Scalar>& ut, Index x, Index y) {
  if (ut.order() != 4 || ut.extent(0) != ut.extent(1))
    throw ShapeError("patch_accumulate expects a d x d x S x P tensor");
  const Index d = ut.extent(0), s = ut.extent(2);
  if (x < d || y < d || (x - d + 1) * (y - d + 1) != ut.extent(3))
    throw ShapeError("patch_accumulate: P does not match the target grid");
  const Index ox = x - d + 1, oy = y - d + 1;
  Tensor<Scalar> out({x, y, s});
  Scalar* dst = out.data().data();
  const Scalar* src = ut.data().data();
  for (Index px = 0; px < ox; ++px)
    for (Index py = 0; py < oy; ++py) {
      const Scalar* patch = src + output_location(px, py, oy) * d * d * s;
      for (Index c = 0; c < s; ++c)
        for (Index j = 0; j < d; ++j)
          for (Index i = 0; i < d; ++i)
            dst[(px + i) + x * ((py + j) + y * c)] += patch[i + d * (j + d * c)];
    }
  return out;
}

/// P x N layer output to the (X-d+1) x (Y-d+1) x N spatial layout.
template <typename Derived>
Tensor<typename Derived::Scalar> fold_output(const Eigen::MatrixBase<Derived>& vt, Index x,
                                             Index y, Index d) {
  using Scalar = typename Derived::Scalar;
  if (d < 1 || x < d || y < d) throw ShapeError("fold_output: invalid geometry");
  const Index ox = x - d + 1, oy = y - d + 1;
  if (vt.rows() != ox * oy)
    throw ShapeError("fold_output: P = " + std::to_string(vt.rows()) + " but grid has " +
                     std::to_string(ox * oy) + " locations");
  Tensor<Scalar> out({ox, oy, vt.cols()});
  for (Index n = 0; n < vt.cols(); ++n)
    for (Index px = 0; px < ox; ++px)
      for (Index py = 0; py < oy; ++py) out(px, py, n) = vt(output_location(px, py, oy), n);
  return out;
}

/// Inverse of fold_output.
template <typename Scalar>
Matrix<Scalar> unfold_output(const Tensor<Scalar>& v) {
  if (v.order() != 3) throw ShapeError("unfold_output expects an order-3 tensor");
  const Index ox = v.extent(0), oy = v.extent(1), n = v.extent(2);
  Matrix<Scalar> out(ox * oy, n);
  for (Index c = 0; c < n; ++c)
    for (Index px = 0; px < ox; ++px)
      for (Index py = 0; py < oy; ++py) out(output_location(px, py, oy), c) = v(px, py, c);
  return out;
}

}  // namespace cpac

#endif  // CPAC_TENSOR_OPS_HPP
