#ifndef CPAC_TESTS_SUPPORT_HPP
#define CPAC_TESTS_SUPPORT_HPP

#include "cpac/cp.hpp"
#include "cpac/tensor.hpp"

#include <random>

namespace cpac::testing {

inline Matrix<double> random_matrix(Index rows, Index cols, std::mt19937_64& rng, double lo = -1,
                                    double hi = 1) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Matrix<double> m(rows, cols);
  for (Index k = 0; k < m.size(); ++k) m.data()[k] = dist(rng);
  return m;
}

inline Vector<double> random_vector(Index n, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  return random_matrix(n, 1, rng, lo, hi);
}

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng) {
  const Index n = shape_size(shape);
  return Tensor<double>(std::move(shape), random_vector(n, rng));
}

inline CpFactors<double> random_factors(Index d, Index s, Index n, Index rank, std::mt19937_64& rng) {
  return CpFactors<double>(random_matrix(d, rank, rng), random_matrix(d, rank, rng),
                           random_matrix(s, rank, rng), random_matrix(n, rank, rng));
}

inline Index random_extent(std::mt19937_64& rng, Index lo, Index hi) {
  return std::uniform_int_distribution<Index>(lo, hi)(rng);
}

/// ||a - b|| / max(||a||, ||b||, 1e-8).
template <typename A, typename B>
double rel_err(const A& a, const B& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-8});
  return (a - b).norm() / scale;
}

/// Central difference of f along every entry of `x`, step h.
template <typename F>
Vector<double> numeric_gradient(F&& f, double* x, Index n, double h = 1e-5) {
  Vector<double> g(n);
  for (Index k = 0; k < n; ++k) {
    const double keep = x[k];
    x[k] = keep + h;
    const double fp = f();
    x[k] = keep - h;
    const double fm = f();
    x[k] = keep;
    g[k] = (fp - fm) / (2 * h);
  }
  return g;
}

}  // namespace cpac::testing

#endif  // CPAC_TESTS_SUPPORT_HPP
