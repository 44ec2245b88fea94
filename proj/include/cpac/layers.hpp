#ifndef CPAC_LAYERS_HPP
#define CPAC_LAYERS_HPP

#include "cpac/cp.hpp"
#include "cpac/tensor.hpp"
#include "cpac/tensor_ops.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpac {

/**
 * Direct stride-one, unpadded convolution
 *   V(x, y, n) = sum_{i, j, s} K(i, j, s, n) U(x + i, y + j, s)
 * written as plain loops. Used as the reference the factorized layer is
 * checked against.
 */
template <typename Scalar>
Tensor<Scalar> conv_forward_reference(const Tensor<Scalar>& u, const Tensor<Scalar>& k) {
  if (u.order() != 3 || k.order() != 4) throw ShapeError("conv_forward_reference: expected U order 3, K order 4");
  const Index d = k.extent(0);
  if (k.extent(1) != d) throw ShapeError("conv_forward_reference: kernel must be square");
  if (k.extent(2) != u.extent(2))
    throw ShapeError("conv_forward_reference: kernel has " + std::to_string(k.extent(2)) +
                     " input channels, input has " + std::to_string(u.extent(2)));
  if (u.extent(0) < d || u.extent(1) < d) throw ShapeError("conv_forward_reference: kernel larger than input");
  const Index ox = u.extent(0) - d + 1, oy = u.extent(1) - d + 1;
  const Index channels = u.extent(2), outputs = k.extent(3);
  Tensor<Scalar> v({ox, oy, outputs});
  for (Index n = 0; n < outputs; ++n)
    for (Index x = 0; x < ox; ++x)
      for (Index y = 0; y < oy; ++y) {
        Scalar acc = 0;
        for (Index i = x; i < x + d; ++i)
          for (Index j = y; j < y + d; ++j)
            for (Index s = 0; s < channels; ++s) acc += k(i - x, j - y, s, n) * u(i, j, s);
        v(x, y, n) = acc;
      }
  return v;
}

// ---------------------------------------------------------------------------
// CPAC-Conv

/// Forward intermediates of one rank group.
template <typename Scalar>
struct CpacRankCache {
  Tensor<Scalar> a;    // d x d x P : U~ x_3 K^S
  Matrix<Scalar> a2;   // d x P     : a x_2 K^Y
  Vector<Scalar> a1;   // P         : a2 x_1 K^X
};

/// Valid between one cpac_forward and the cpac_backward that consumes it.
template <typename Scalar>
struct CpacCache {
  Tensor<Scalar> ut;
  std::vector<CpacRankCache<Scalar>> ranks;
  bool fresh = false;

  void require_fresh(const char* who) const {
    if (!fresh) throw StateError(std::string(who) + ": no forward pass cached (stale or missing)");
  }
};

template <typename Scalar>
struct CpacGradients {
  CpFactors<Scalar> factors;  // same shapes as the layer factors
  Tensor<Scalar> ut;          // d x d x S x P
};

namespace detail {

template <typename Scalar>
void check_patches(const Tensor<Scalar>& ut, const CpFactors<Scalar>& f) {
  f.validate();
  if (ut.order() != 4 || ut.extent(0) != f.x.rows() || ut.extent(1) != f.y.rows() ||
      ut.extent(2) != f.s.rows())
    throw ShapeError("CPAC layer: patches " + to_string(ut.shape()) + " do not match factors " +
                     to_string(f.kernel_shape()));
}

template <typename Scalar>
CpacRankCache<Scalar> rank_forward(const Tensor<Scalar>& ut, const CpFactors<Scalar>& f, Index r) {
  const Index d = f.kernel_size(), p = ut.extent(3);
  CpacRankCache<Scalar> c;
  c.a = mode_mul_vec(ut, f.s.col(r), 2);
  Tensor<Scalar> a2 = mode_mul_vec(c.a, f.y.col(r), 1);
  c.a1 = mode_mul_vec(a2, f.x.col(r), 0).data();
  c.a2 = a2.matrix(d, p);
  return c;
}

}  // namespace detail

/**
 * Factorized forward pass on patch-expanded input (d x d x S x P):
 *   V~ = sum_r (((U~ x_3 K_r^S) x_2 K_r^Y) x_1 K_r^X) o K_r^N,   P x N.
 * Fills `cache` with the per-rank intermediates when given.
 */
template <typename Scalar>
Matrix<Scalar> cpac_forward(const Tensor<Scalar>& ut, const CpFactors<Scalar>& f,
                            CpacCache<Scalar>* cache = nullptr) {
  detail::check_patches(ut, f);
  const Index p = ut.extent(3);
  Matrix<Scalar> vt = Matrix<Scalar>::Zero(p, f.channels_out());
  if (cache) {
    cache->ut = ut;
    cache->ranks.clear();
  }
  for (Index r = 0; r < f.rank(); ++r) {
    CpacRankCache<Scalar> c = detail::rank_forward(ut, f, r);
    vt.noalias() += c.a1 * f.n.col(r).transpose();
    if (cache) cache->ranks.push_back(std::move(c));
  }
  if (cache) cache->fresh = true;
  return vt;
}

/// The R summands of cpac_forward, one P x N map per rank group.
template <typename Scalar>
std::vector<Matrix<Scalar>> cpac_rank_maps(const Tensor<Scalar>& ut, const CpFactors<Scalar>& f) {
  detail::check_patches(ut, f);
  std::vector<Matrix<Scalar>> maps;
  for (Index r = 0; r < f.rank(); ++r) {
    Matrix<Scalar> m = Matrix<Scalar>::Zero(ut.extent(3), f.channels_out());
    m.noalias() += detail::rank_forward(ut, f, r).a1 * f.n.col(r).transpose();
    maps.push_back(std::move(m));
  }
  return maps;
}

// Derivative matrices dV~/dK in the (parameters) x (P N) convention, with
// vec(V~) P-fastest. The chain rule is vec(dL/dK) = (dV~/dK) vec(dL/dV~).

/// dV~/dK_r^N = I_N (x) A1^T.
template <typename Scalar>
Matrix<Scalar> dvt_dkn(const CpacCache<Scalar>& cache, const CpFactors<Scalar>& f, Index r) {
  cache.require_fresh("dvt_dkn");
  const Matrix<Scalar> a1t = cache.ranks.at(r).a1.transpose();
  return kron(Matrix<Scalar>::Identity(f.channels_out(), f.channels_out()), a1t);
}

/// dV~/dK_r^X = B1^T (x) A2, with B1 = K_r^N.
template <typename Scalar>
Matrix<Scalar> dvt_dkx(const CpacCache<Scalar>& cache, const CpFactors<Scalar>& f, Index r) {
  cache.require_fresh("dvt_dkx");
  const Matrix<Scalar> b1t = f.n.col(r).transpose();
  return kron(b1t, cache.ranks.at(r).a2);
}

/// dV~/dK_r^Y = A_(2) (B2 (x) I_P), with B2 = K_r^X (K_r^N)^T.
template <typename Scalar>
Matrix<Scalar> dvt_dky(const CpacCache<Scalar>& cache, const CpFactors<Scalar>& f, Index r) {
  cache.require_fresh("dvt_dky");
  const Index p = cache.ut.extent(3);
  const Matrix<Scalar> b2 = f.x.col(r) * f.n.col(r).transpose();
  const Matrix<Scalar> a_2 = unfold(cache.ranks.at(r).a, 1, UnfoldOrder::Cyclic);
  return a_2 * kron(b2, Matrix<Scalar>::Identity(p, p));
}

/// dV~/dK_r^S = U_(3) (K_r^Y (x) I_dP) (B2 (x) I_P).
template <typename Scalar>
Matrix<Scalar> dvt_dks(const CpacCache<Scalar>& cache, const CpFactors<Scalar>& f, Index r) {
  cache.require_fresh("dvt_dks");
  const Index p = cache.ut.extent(3), d = f.kernel_size();
  const Matrix<Scalar> b2 = f.x.col(r) * f.n.col(r).transpose();
  const Matrix<Scalar> u_3 = unfold(cache.ut, 2, UnfoldOrder::Cyclic);
  const Matrix<Scalar> ky = f.y.col(r);
  return u_3 * kron(ky, Matrix<Scalar>::Identity(d * p, d * p)) *
         kron(b2, Matrix<Scalar>::Identity(p, p));
}

namespace detail {

template <typename Scalar>
void check_upstream(const CpacCache<Scalar>& cache, const CpFactors<Scalar>& f,
                    const Matrix<Scalar>& grad_vt) {
  if (grad_vt.rows() != cache.ut.extent(3) || grad_vt.cols() != f.channels_out())
    throw ShapeError("CPAC backward: upstream gradient is " + std::to_string(grad_vt.rows()) + "x" +
                     std::to_string(grad_vt.cols()) + ", expected P x N");
  if (static_cast<Index>(cache.ranks.size()) != f.rank())
    throw StateError("CPAC backward: cache was built for a different rank");
}

// dL/dU~ (i, j, s, p) = sum_r K^X_r(i) K^Y_r(j) K^S_r(s) h_r(p), h_r = G K^N_r.
template <typename Scalar>
Tensor<Scalar> input_gradient(const CpacCache<Scalar>& cache, const CpFactors<Scalar>& f,
                              const Matrix<Scalar>& grad_vt) {
  const Index d = f.kernel_size(), s = f.channels_in(), p = cache.ut.extent(3);
  Tensor<Scalar> gut({d, d, s, p});
  auto gmat = gut.matrix(d * d * s, p);
  for (Index r = 0; r < f.rank(); ++r) {
    const Vector<Scalar> h = grad_vt * f.n.col(r);
    const Vector<Scalar> w = vec(outer(vec(outer(f.x.col(r), f.y.col(r))), f.s.col(r)));
    gmat.noalias() += w * h.transpose();
  }
  return gut;
}

}  // namespace detail

/**
 * Backward pass through a CPAC layer. Applies each derivative matrix to
 * vec(grad_vt) through vec(AXB) = (B^T (x) A) vec(X) instead of forming it.
 * Consumes the cache.
 */
template <typename Scalar>
CpacGradients<Scalar> cpac_backward(CpacCache<Scalar>& cache, const CpFactors<Scalar>& f,
                                    const Matrix<Scalar>& grad_vt) {
  cache.require_fresh("cpac_backward");
  detail::check_upstream(cache, f, grad_vt);
  const Index d = f.kernel_size(), s = f.channels_in(), p = cache.ut.extent(3);
  CpacGradients<Scalar> g;
  g.factors = CpFactors<Scalar>::zeros(d, s, f.channels_out(), f.rank());
  const auto umat = cache.ut.matrix(d * d * s, p);
  for (Index r = 0; r < f.rank(); ++r) {
    const CpacRankCache<Scalar>& c = cache.ranks[static_cast<std::size_t>(r)];
    const Vector<Scalar> h = grad_vt * f.n.col(r);
    // (I_N (x) A1^T) vec(G) = G^T A1
    g.factors.n.col(r).noalias() = grad_vt.transpose() * c.a1;
    // (B1^T (x) A2) vec(G) = A2 G B1
    g.factors.x.col(r).noalias() = c.a2 * h;
    // A_(2)(B2 (x) I_P) vec(G): contract A with K^X over i, then with h over p
    const Matrix<Scalar> ax = mode_mul_vec(c.a, f.x.col(r), 0).matrix(d, p);
    g.factors.y.col(r).noalias() = ax * h;
    // U_(3)(K^Y (x) I_dP)(B2 (x) I_P) vec(G): contract U~ with h over p, then K^X, K^Y
    const Vector<Scalar> uh = umat * h;
    const Vector<Scalar> w = vec(outer(f.x.col(r), f.y.col(r)));
    g.factors.s.col(r).noalias() = Eigen::Map<const Matrix<Scalar>>(uh.data(), d * d, s).transpose() * w;
  }
  g.ut = detail::input_gradient(cache, f, grad_vt);
  cache.fresh = false;
  return g;
}

/**
 * Same gradients computed by materializing every derivative matrix as
 * printed and multiplying by vec(grad_vt). Leaves the cache intact; meant
 * for verification on small shapes.
 */
template <typename Scalar>
CpacGradients<Scalar> cpac_backward_kronecker(const CpacCache<Scalar>& cache,
                                              const CpFactors<Scalar>& f,
                                              const Matrix<Scalar>& grad_vt) {
  cache.require_fresh("cpac_backward_kronecker");
  detail::check_upstream(cache, f, grad_vt);
  const Vector<Scalar> g = vec(grad_vt);
  CpacGradients<Scalar> out;
  out.factors = CpFactors<Scalar>::zeros(f.kernel_size(), f.channels_in(), f.channels_out(), f.rank());
  for (Index r = 0; r < f.rank(); ++r) {
    out.factors.n.col(r) = dvt_dkn(cache, f, r) * g;
    out.factors.x.col(r) = dvt_dkx(cache, f, r) * g;
    out.factors.y.col(r) = dvt_dky(cache, f, r) * g;
    out.factors.s.col(r) = dvt_dks(cache, f, r) * g;
  }
  out.ut = detail::input_gradient(cache, f, grad_vt);
  return out;
}

// ---------------------------------------------------------------------------
// Dense convolution on patch-expanded input, for the baseline CNN.

template <typename Scalar>
Matrix<Scalar> conv_forward(const Tensor<Scalar>& ut, const Tensor<Scalar>& kernel) {
  if (ut.order() != 4 || kernel.order() != 4 || ut.extent(0) != kernel.extent(0) ||
      ut.extent(1) != kernel.extent(1) || ut.extent(2) != kernel.extent(2))
    throw ShapeError("conv_forward: patches " + to_string(ut.shape()) + " vs kernel " +
                     to_string(kernel.shape()));
  const Index q = ut.extent(0) * ut.extent(1) * ut.extent(2);
  return ut.matrix(q, ut.extent(3)).transpose() * kernel.matrix(q, kernel.extent(3));
}

template <typename Scalar>
struct ConvGradients {
  Tensor<Scalar> kernel;
  Tensor<Scalar> ut;
};

template <typename Scalar>
ConvGradients<Scalar> conv_backward(const Tensor<Scalar>& ut, const Tensor<Scalar>& kernel,
                                    const Matrix<Scalar>& grad_vt) {
  const Index q = ut.extent(0) * ut.extent(1) * ut.extent(2);
  if (grad_vt.rows() != ut.extent(3) || grad_vt.cols() != kernel.extent(3))
    throw ShapeError("conv_backward: upstream gradient shape mismatch");
  ConvGradients<Scalar> g{Tensor<Scalar>(kernel.shape()), Tensor<Scalar>(ut.shape())};
  g.kernel.matrix(q, kernel.extent(3)).noalias() = ut.matrix(q, ut.extent(3)) * grad_vt;
  g.ut.matrix(q, ut.extent(3)).noalias() = kernel.matrix(q, kernel.extent(3)) * grad_vt.transpose();
  return g;
}

// ---------------------------------------------------------------------------
// Fully connected output layer: y^ = W vec(V~) + b.

template <typename Scalar>
struct FcLayer {
  Matrix<Scalar> w;  // C x (P N)
  Vector<Scalar> b;  // C

  Index classes() const { return w.rows(); }
  Index inputs() const { return w.cols(); }
};

template <typename Scalar>
struct FcCache {
  Vector<Scalar> input;
  bool fresh = false;
};

template <typename Scalar>
struct FcGradients {
  Matrix<Scalar> w;
  Vector<Scalar> b;
  Matrix<Scalar> vt;  // same shape as the forward input
};

template <typename Scalar>
Vector<Scalar> fc_forward(const FcLayer<Scalar>& fc, const Matrix<Scalar>& vt,
                          FcCache<Scalar>* cache = nullptr) {
  if (vt.size() != fc.inputs())
    throw ShapeError("fc_forward: input has " + std::to_string(vt.size()) + " entries, layer expects " +
                     std::to_string(fc.inputs()));
  const Vector<Scalar> x = vec(vt);
  Vector<Scalar> y = fc.b;
  y.noalias() += fc.w * x;
  if (cache) {
    cache->input = x;
    cache->fresh = true;
  }
  return y;
}

/// `rows` x `cols` is the shape of the forward input, used for the returned input gradient.
template <typename Scalar>
FcGradients<Scalar> fc_backward(const FcLayer<Scalar>& fc, FcCache<Scalar>& cache,
                                const Vector<Scalar>& grad_y, Index rows, Index cols) {
  if (!cache.fresh) throw StateError("fc_backward: no forward pass cached");
  if (grad_y.size() != fc.classes()) throw ShapeError("fc_backward: gradient length does not match C");
  FcGradients<Scalar> g;
  g.w.noalias() = grad_y * cache.input.transpose();
  g.b = grad_y;
  const Vector<Scalar> gx = fc.w.transpose() * grad_y;
  g.vt = unvec(gx, rows, cols);
  cache.fresh = false;
  return g;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
struct LossRecord {
  Scalar value = 0;         // nats
  Vector<Scalar> gradient;  // d loss / d y^
};

/// Softmax cross-entropy with max subtraction.
template <typename Scalar>
LossRecord<Scalar> softmax_xent(const Vector<Scalar>& logits, Index label) {
  if (label < 0 || label >= logits.size())
    throw std::invalid_argument("softmax_xent: label " + std::to_string(label) +
                                " outside [0, " + std::to_string(logits.size()) + ")");
  const Scalar top = logits.maxCoeff();
  const Vector<Scalar> shifted = logits.array() - top;
  const Vector<Scalar> e = shifted.array().exp();
  const Scalar z = e.sum();
  LossRecord<Scalar> rec;
  rec.value = std::log(z) - shifted[label];
  rec.gradient = e / z;
  rec.gradient[label] -= Scalar(1);
  return rec;
}

template <typename Scalar>
Matrix<Scalar> rectify(const Matrix<Scalar>& m) {
  return m.cwiseMax(Scalar(0));
}

/// Subgradient of max(0, .) taken as 0 at 0.
template <typename Scalar>
Matrix<Scalar> rectify_backward(const Matrix<Scalar>& pre, const Matrix<Scalar>& grad) {
  return (pre.array() > Scalar(0)).select(grad, Matrix<Scalar>::Zero(grad.rows(), grad.cols()));
}

}  // namespace cpac

#endif  // CPAC_LAYERS_HPP
