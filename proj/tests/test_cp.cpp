#include "cpac/cp.hpp"
#include "cpac/tensor_ops.hpp"
#include "support.hpp"

#include <doctest.h>

using namespace cpac;
using cpac::testing::random_factors;
using cpac::testing::random_matrix;
using cpac::testing::random_tensor;

namespace {

bool non_increasing(const std::vector<double>& trace) {
  for (std::size_t k = 1; k < trace.size(); ++k)
    if (trace[k] > trace[k - 1] + 1e-12) return false;
  return true;
}

}  // namespace

TEST_CASE("reconstruct of unit factors is a single entry") {
  CpFactors<double> f = CpFactors<double>::zeros(3, 2, 4, 1);
  for (int k = 0; k < 4; ++k) f.mode(k)(0, 0) = 1;
  const Tensor<double> t = reconstruct(f);
  CHECK(t.shape() == Shape{3, 3, 2, 4});
  CHECK(t(0, 0, 0, 0) == 1);
  CHECK(t.data().sum() == 1);
}

TEST_CASE("reconstruct matches a loop over rank-one outer products") {
  std::mt19937_64 rng(20);
  const CpFactors<double> f = random_factors(3, 2, 4, 3, rng);
  Tensor<double> expect({3, 3, 2, 4});
  for (Index r = 0; r < 3; ++r)
    expect.data() += outer(std::vector<Vector<double>>{f.x.col(r), f.y.col(r), f.s.col(r), f.n.col(r)}).data();
  CHECK((reconstruct(f).data() - expect.data()).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("reconstruct is invariant to opposite column scalings") {
  std::mt19937_64 rng(21);
  CpFactors<double> f = random_factors(2, 3, 2, 2, rng);
  const Tensor<double> before = reconstruct(f);
  f.x.col(1) *= 4.0;
  f.n.col(1) /= 4.0;
  CHECK((reconstruct(f).data() - before.data()).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("reconstruct is multilinear per rank") {
  std::mt19937_64 rng(22);
  CpFactors<double> f = random_factors(3, 2, 2, 2, rng);
  CpFactors<double> only0 = f, only1 = f;
  only0.x.col(1).setZero();
  only1.x.col(0).setZero();
  const Tensor<double> t0 = reconstruct(only0), t1 = reconstruct(only1);
  f.s.col(1) *= 2.0;
  CHECK((reconstruct(f).data() - (t0.data() + 2.0 * t1.data())).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("parameter count is R (d + d + S + N)") {
  for (Index d : {1, 3, 5})
    for (Index s : {1, 8})
      for (Index n : {1, 8})
        for (Index r : {1, 4}) CHECK(CpFactors<double>::zeros(d, s, n, r).parameter_count() == r * (2 * d + s + n));
}

TEST_CASE("factor sets validate rank and row counts") {
  CHECK_THROWS_AS(CpFactors<double>::zeros(3, 1, 8, 0), std::invalid_argument);
  CHECK_THROWS_AS(CpFactors<double>(Matrix<double>::Zero(3, 2), Matrix<double>::Zero(3, 1),
                                    Matrix<double>::Zero(1, 2), Matrix<double>::Zero(8, 2)),
                  ShapeError);
  CHECK_THROWS_AS(CpFactors<double>(Matrix<double>::Zero(3, 1), Matrix<double>::Zero(2, 1),
                                    Matrix<double>::Zero(1, 1), Matrix<double>::Zero(8, 1)),
                  ShapeError);
}

TEST_CASE("fit_error examples") {
  std::mt19937_64 rng(23);
  const CpFactors<double> f = random_factors(3, 2, 4, 2, rng);
  const Tensor<double> t = reconstruct(f);
  CHECK(fit_error(t, f) < 1e-10);
  CHECK(fit_error(t, CpFactors<double>::zeros(3, 2, 4, 2)) == 1.0);
  CHECK(fit_error(Tensor<double>({3, 3, 2, 4}), CpFactors<double>::zeros(3, 2, 4, 1)) == 0.0);

  const Tensor<double> other = random_tensor({3, 3, 2, 4}, rng);
  const Tensor<double> rec = reconstruct(f);
  double num = 0, den = 0;
  for (Index k = 0; k < other.size(); ++k) {
    num += (other.data()[k] - rec.data()[k]) * (other.data()[k] - rec.data()[k]);
    den += other.data()[k] * other.data()[k];
  }
  CHECK(fit_error(other, f) == doctest::Approx(std::sqrt(num / den)).epsilon(1e-13));
  CHECK_THROWS_AS(fit_error(Tensor<double>({3, 3, 2, 5}), f), ShapeError);
}

TEST_CASE("normalize_factors balances norms without changing the kernel") {
  std::mt19937_64 rng(24);
  CpFactors<double> f = random_factors(3, 2, 4, 3, rng);
  f.s.col(0) *= 16.0;
  const Tensor<double> before = reconstruct(f);
  const CpFactors<double> g = normalize_factors(f);
  CHECK((reconstruct(g).data() - before.data()).cwiseAbs().maxCoeff() < 1e-12);
  for (Index r = 0; r < 3; ++r)
    for (int k = 1; k < 4; ++k) CHECK(g.mode(k).col(r).norm() == doctest::Approx(g.x.col(r).norm()).epsilon(1e-12));

  const CpFactors<double> again = normalize_factors(g);
  for (int k = 0; k < 4; ++k) CHECK((again.mode(k) - g.mode(k)).cwiseAbs().maxCoeff() < 1e-14);

  CpFactors<double> z = f;
  z.n.col(1).setZero();
  const CpFactors<double> zn = normalize_factors(z);
  CHECK(zn.n.col(1).isZero());
  CHECK(zn.x.col(1) == z.x.col(1));
}

TEST_CASE("cp_als recovers an exact positive rank-one tensor") {
  std::mt19937_64 rng(25);
  const CpFactors<double> f(random_matrix(3, 1, rng, 0.1, 1), random_matrix(3, 1, rng, 0.1, 1),
                            random_matrix(2, 1, rng, 0.1, 1), random_matrix(4, 1, rng, 0.1, 1));
  const CpAlsResult<double> res = cp_als(reconstruct(f), 1);
  CHECK(res.error() < 1e-8);
  CHECK(non_increasing(res.error_trace));
}

TEST_CASE("cp_als of the zero tensor reconstructs zero") {
  const CpAlsResult<double> res = cp_als(Tensor<double>({3, 3, 2, 4}), 2);
  CHECK(res.error() == 0.0);
  CHECK(reconstruct(res.factors).data().isZero());
}

TEST_CASE("cp_als recovers rank-2 factors") {
  std::mt19937_64 rng(26);
  const CpFactors<double> f = random_factors(3, 2, 4, 2, rng);
  CpAlsOptions opts;
  opts.restarts = 3;
  opts.target_error = 1e-6;
  const CpAlsResult<double> res = cp_als(reconstruct(f), 2, opts);
  CHECK(res.error() < 1e-6);
  CHECK(res.factors.rank() == 2);
}

TEST_CASE("cp_als error trace is monotone on a random tensor") {
  std::mt19937_64 rng(27);
  const Tensor<double> t = random_tensor({3, 3, 2, 4}, rng);
  CpAlsOptions opts;
  opts.max_iters = 200;
  for (Index rank : {1, 3, 6}) {
    const CpAlsResult<double> res = cp_als(t, rank, opts);
    CHECK(non_increasing(res.error_trace));
    CHECK(res.iterations == static_cast<int>(res.error_trace.size()));
  }
}

TEST_CASE("cp_als is deterministic in the seed") {
  std::mt19937_64 rng(28);
  const Tensor<double> t = random_tensor({2, 2, 3, 3}, rng);
  CpAlsOptions opts;
  opts.max_iters = 30;
  opts.seed = 9;
  CHECK(cp_als(t, 2, opts).factors == cp_als(t, 2, opts).factors);
}

TEST_CASE("cp_als argument errors") {
  CHECK_THROWS_AS(cp_als(Tensor<double>({3, 3, 2, 4}), 0), std::invalid_argument);
  CHECK_THROWS_AS(cp_als(Tensor<double>({3, 3, 2}), 1), ShapeError);
}
