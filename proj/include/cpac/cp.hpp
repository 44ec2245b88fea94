#ifndef CPAC_CP_HPP
#define CPAC_CP_HPP

#include "cpac/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpac {

/**
 * R groups of rank-one factor kernels for a d x d x S x N kernel. Column r of
 * each matrix is K_r^X, K_r^Y, K_r^S, K_r^N respectively; the CP weights are
 * absorbed into the columns.
 */
template <typename Scalar>
struct CpFactors {
  Matrix<Scalar> x;  // d x R
  Matrix<Scalar> y;  // d x R
  Matrix<Scalar> s;  // S x R
  Matrix<Scalar> n;  // N x R

  CpFactors() = default;
  CpFactors(Matrix<Scalar> fx, Matrix<Scalar> fy, Matrix<Scalar> fs, Matrix<Scalar> fn)
      : x(std::move(fx)), y(std::move(fy)), s(std::move(fs)), n(std::move(fn)) {
    validate();
  }

  static CpFactors zeros(Index d, Index channels_in, Index channels_out, Index rank) {
    if (rank < 1) throw std::invalid_argument("CP rank must be at least 1");
    return CpFactors(Matrix<Scalar>::Zero(d, rank), Matrix<Scalar>::Zero(d, rank),
                     Matrix<Scalar>::Zero(channels_in, rank),
                     Matrix<Scalar>::Zero(channels_out, rank));
  }

  Index rank() const { return x.cols(); }
  Index kernel_size() const { return x.rows(); }
  Index channels_in() const { return s.rows(); }
  Index channels_out() const { return n.rows(); }

  /// R (d + d + S + N).
  Index parameter_count() const { return rank() * (x.rows() + y.rows() + s.rows() + n.rows()); }

  void validate() const {
    const Index r = x.cols();
    if (r < 1) throw std::invalid_argument("CP rank must be at least 1");
    if (y.cols() != r || s.cols() != r || n.cols() != r)
      throw ShapeError("CP factor matrices disagree on rank");
    if (x.rows() != y.rows()) throw ShapeError("K^X and K^Y must both have d rows");
    if (x.rows() < 1 || s.rows() < 1 || n.rows() < 1)
      throw ShapeError("CP factor matrices must have at least one row");
  }

  /// Factor matrix for kernel mode 0..3 (X, Y, S, N).
  Matrix<Scalar>& mode(int k) { return k == 0 ? x : k == 1 ? y : k == 2 ? s : n; }
  const Matrix<Scalar>& mode(int k) const { return k == 0 ? x : k == 1 ? y : k == 2 ? s : n; }

  Shape kernel_shape() const { return {x.rows(), y.rows(), s.rows(), n.rows()}; }

  friend bool operator==(const CpFactors& a, const CpFactors& b) {
    return a.x == b.x && a.y == b.y && a.s == b.s && a.n == b.n;
  }
};

/// Sum over r of K_r^X o K_r^Y o K_r^S o K_r^N.
template <typename Scalar>
Tensor<Scalar> reconstruct(const CpFactors<Scalar>& f) {
  f.validate();
  const Index d0 = f.x.rows(), d1 = f.y.rows(), d2 = f.s.rows(), d3 = f.n.rows();
  Tensor<Scalar> k({d0, d1, d2, d3});
  Scalar* out = k.data().data();
  for (Index r = 0; r < f.rank(); ++r)
    for (Index l = 0; l < d3; ++l)
      for (Index c = 0; c < d2; ++c)
        for (Index j = 0; j < d1; ++j) {
          const Scalar w = f.n(l, r) * f.s(c, r) * f.y(j, r);
          Scalar* col = out + d0 * (j + d1 * (c + d2 * l));
          for (Index i = 0; i < d0; ++i) col[i] += f.x(i, r) * w;
        }
  return k;
}

/// ||T - reconstruct(f)||_F / ||T||_F, with 0/0 taken as 0.
template <typename Scalar>
Scalar fit_error(const Tensor<Scalar>& t, const CpFactors<Scalar>& f) {
  if (t.shape() != f.kernel_shape())
    throw ShapeError("fit_error: tensor shape " + to_string(t.shape()) +
                     " does not match factors " + to_string(f.kernel_shape()));
  const Scalar denom = t.data().norm();
  const Scalar num = (t.data() - reconstruct(f).data()).norm();
  if (denom == Scalar(0)) return num == Scalar(0) ? Scalar(0) : std::numeric_limits<Scalar>::infinity();
  return num / denom;
}

/// Rescales each rank so its four columns share the geometric-mean norm.
template <typename Scalar>
CpFactors<Scalar> normalize_factors(CpFactors<Scalar> f) {
  f.validate();
  for (Index r = 0; r < f.rank(); ++r) {
    Scalar norms[4];
    Scalar prod = 1;
    for (int k = 0; k < 4; ++k) {
      norms[k] = f.mode(k).col(r).norm();
      prod *= norms[k];
    }
    if (prod == Scalar(0)) continue;
    const Scalar target = std::sqrt(std::sqrt(prod));
    for (int k = 0; k < 4; ++k) f.mode(k).col(r) *= target / norms[k];
  }
  return f;
}

struct CpAlsOptions {
  int max_iters = 500;
  double tol = 1e-12;
  std::uint64_t seed = 0;
  /// Extra random starts tried when a run ends above `target_error`.
  int restarts = 0;
  double target_error = 0.0;
  double ridge = 1e-10;
};

template <typename Scalar>
struct CpAlsResult {
  CpFactors<Scalar> factors;
  std::vector<Scalar> error_trace;  // fit error after every sweep of the best run
  int iterations = 0;
  int starts = 0;
  Scalar error() const { return error_trace.empty() ? Scalar(0) : error_trace.back(); }
};

namespace detail {

// M(i_k, r) = sum over all entries of T(idx) * prod_{m != k} A_m(i_m, r).
template <typename Scalar>
Matrix<Scalar> mttkrp(const Tensor<Scalar>& t, const CpFactors<Scalar>& f, int k) {
  const Index rank = f.rank();
  Matrix<Scalar> m = Matrix<Scalar>::Zero(t.extent(k), rank);
  const Index e0 = t.extent(0), e1 = t.extent(1), e2 = t.extent(2), e3 = t.extent(3);
  Vector<Scalar> w(rank);
  Index off = 0;
  for (Index i3 = 0; i3 < e3; ++i3)
    for (Index i2 = 0; i2 < e2; ++i2)
      for (Index i1 = 0; i1 < e1; ++i1)
        for (Index i0 = 0; i0 < e0; ++i0, ++off) {
          const Scalar v = t.data()[off];
          if (v == Scalar(0)) continue;
          const Index idx[4] = {i0, i1, i2, i3};
          w.setConstant(v);
          for (int mode = 0; mode < 4; ++mode)
            if (mode != k) w.array() *= f.mode(mode).row(idx[mode]).transpose().array();
          m.row(idx[k]) += w.transpose();
        }
  return m;
}

template <typename Scalar, typename Rng>
CpFactors<Scalar> random_factors(const Shape& shape, Index rank, Rng& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  auto draw = [&](Index rows) {
    Matrix<Scalar> m(rows, rank);
    for (Index c = 0; c < rank; ++c)
      for (Index r = 0; r < rows; ++r) m(r, c) = static_cast<Scalar>(dist(rng));
    return m;
  };
  Matrix<Scalar> fx = draw(shape[0]);
  Matrix<Scalar> fy = draw(shape[1]);
  Matrix<Scalar> fs = draw(shape[2]);
  Matrix<Scalar> fn = draw(shape[3]);
  return CpFactors<Scalar>(std::move(fx), std::move(fy), std::move(fs), std::move(fn));
}

}  // namespace detail

/**
 * Alternating least squares for a rank-R CP model of a 4-way tensor. Each
 * sweep solves the four ridge-regularised normal equations
 * A_k (V + ridge I) = MTTKRP_k in turn, where V is the Hadamard product of
 * the other factors' Gram matrices. Stops when the fit error changes by
 * less than `tol`, reaches zero, or after `max_iters` sweeps.
 */
template <typename Scalar>
CpAlsResult<Scalar> cp_als(const Tensor<Scalar>& t, Index rank, const CpAlsOptions& opts = {}) {
  if (rank < 1) throw std::invalid_argument("cp_als: rank must be at least 1, got " + std::to_string(rank));
  if (t.order() != 4) throw ShapeError("cp_als expects a 4-way tensor, got " + to_string(t.shape()));
  if (opts.max_iters < 1) throw std::invalid_argument("cp_als: max_iters must be positive");

  std::mt19937_64 rng(opts.seed);
  CpAlsResult<Scalar> best;
  bool have_best = false;
  for (int start = 0; start <= opts.restarts; ++start) {
    CpAlsResult<Scalar> run;
    run.factors = detail::random_factors<Scalar>(t.shape(), rank, rng);
    run.starts = start + 1;
    Scalar previous = std::numeric_limits<Scalar>::infinity();
    for (int it = 0; it < opts.max_iters; ++it) {
      for (int k = 0; k < 4; ++k) {
        Matrix<Scalar> gram = Matrix<Scalar>::Ones(rank, rank);
        for (int m = 0; m < 4; ++m)
          if (m != k) gram.array() *= (run.factors.mode(m).transpose() * run.factors.mode(m)).array();
        gram.diagonal().array() += static_cast<Scalar>(opts.ridge);
        const Matrix<Scalar> rhs = detail::mttkrp(t, run.factors, k);
        run.factors.mode(k) = gram.ldlt().solve(rhs.transpose()).transpose();
      }
      const Scalar err = fit_error(t, run.factors);
      run.error_trace.push_back(err);
      run.iterations = it + 1;
      if (err == Scalar(0) || std::abs(previous - err) < opts.tol) break;
      previous = err;
    }
    if (!have_best || run.error() < best.error()) {
      best = std::move(run);
      have_best = true;
    }
    if (best.error() <= opts.target_error) break;
  }
  return best;
}

}  // namespace cpac

#endif  // CPAC_CP_HPP
