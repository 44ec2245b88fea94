#include "cpac/gradcheck.hpp"
#include "cpac/layers.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace cpac;
using cpac::testing::numeric_gradient;
using cpac::testing::random_factors;
using cpac::testing::random_matrix;
using cpac::testing::random_tensor;
using cpac::testing::random_vector;
using cpac::testing::rel_err;

namespace {

// Direct loops over the scalar forward expression, summing in the same index order as the layer.
Matrix<double> scalar_forward(const Tensor<double>& ut, const CpFactors<double>& f) {
  const Index d = ut.extent(0), s = ut.extent(2), p = ut.extent(3), n = f.channels_out();
  Matrix<double> v(p, n);
  for (Index c = 0; c < n; ++c)
    for (Index q = 0; q < p; ++q) {
      double total = 0;
      for (Index r = 0; r < f.rank(); ++r) {
        double over_i = 0;
        for (Index i = 0; i < d; ++i) {
          double over_j = 0;
          for (Index j = 0; j < d; ++j) {
            double over_s = 0;
            for (Index k = 0; k < s; ++k) over_s += f.s(k, r) * ut(i, j, k, q);
            over_j += f.y(j, r) * over_s;
          }
          over_i += f.x(i, r) * over_j;
        }
        total += over_i * f.n(c, r);
      }
      v(q, c) = total;
    }
  return v;
}

struct Instance {
  Tensor<double> u;
  Tensor<double> ut;
  CpFactors<double> f;
};

Instance make_instance(Index x, Index y, Index s, Index n, Index d, Index rank, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Instance in{random_tensor({x, y, s}, rng), {}, random_factors(d, s, n, rank, rng)};
  in.ut = patch_expand(in.u, d);
  return in;
}

}  // namespace

TEST_CASE("reference convolution examples") {
  const Tensor<double> u({3, 3, 1}, Vector<double>::Ones(9));
  const Tensor<double> k({2, 2, 1, 1}, Vector<double>::Ones(4));
  const Tensor<double> v = conv_forward_reference(u, k);
  CHECK(v.shape() == Shape{2, 2, 1});
  CHECK(v.data() == Vector<double>::Constant(4, 4.0));

  std::mt19937_64 rng(30);
  const Tensor<double> u2 = random_tensor({5, 4, 2}, rng);
  Tensor<double> sel({3, 3, 2, 1});
  sel(1, 2, 1, 0) = 1;
  const Tensor<double> shifted = conv_forward_reference(u2, sel);
  for (Index x = 0; x < 3; ++x)
    for (Index y = 0; y < 2; ++y) CHECK(shifted(x, y, 0) == u2(x + 1, y + 2, 1));

  CHECK_THROWS_AS(conv_forward_reference(u2, Tensor<double>({3, 3, 1, 1})), ShapeError);
  CHECK_THROWS_AS(conv_forward_reference(u2, Tensor<double>({5, 5, 2, 1})), ShapeError);
}

TEST_CASE("cpac_forward with zero factors is zero") {
  std::mt19937_64 rng(31);
  const Tensor<double> ut = patch_expand(random_tensor({5, 5, 2}, rng), 3);
  const Matrix<double> v = cpac_forward(ut, CpFactors<double>::zeros(3, 2, 4, 1));
  CHECK(v.rows() == 9);
  CHECK(v.cols() == 4);
  CHECK(v.isZero());
}

TEST_CASE("cpac_forward matches the reference convolution of the reconstructed kernel") {
  std::mt19937_64 seeds(32);
  double worst = 0;
  for (int trial = 0; trial < 25; ++trial) {
    std::mt19937_64 rng(seeds());
    const Index d = testing::random_extent(rng, 1, 3);
    const Index x = testing::random_extent(rng, d, 7), y = testing::random_extent(rng, d, 7);
    const Instance in = make_instance(x, y, testing::random_extent(rng, 1, 3), testing::random_extent(rng, 1, 5), d,
                                      testing::random_extent(rng, 1, 4), seeds());
    const Tensor<double> lhs = fold_output(cpac_forward(in.ut, in.f), x, y, d);
    const Tensor<double> rhs = conv_forward_reference(in.u, reconstruct(in.f));
    REQUIRE(lhs.shape() == rhs.shape());
    worst = std::max(worst, (lhs.data() - rhs.data()).cwiseAbs().maxCoeff());
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("cpac_forward equals the scalar loop bit for bit") {
  const Instance in = make_instance(5, 5, 2, 3, 3, 2, 33);
  CHECK(cpac_forward(in.ut, in.f) == scalar_forward(in.ut, in.f));
}

TEST_CASE("cpac_forward rejects mismatched patches") {
  const Instance in = make_instance(5, 5, 2, 3, 3, 2, 34);
  CHECK_THROWS_AS(cpac_forward(in.ut, CpFactors<double>::zeros(3, 1, 3, 2)), ShapeError);
  CHECK_THROWS_AS(cpac_forward(in.ut, CpFactors<double>::zeros(2, 2, 3, 2)), ShapeError);
}

TEST_CASE("cpac_forward is linear in the input and in each factor") {
  Instance a = make_instance(6, 5, 2, 3, 3, 2, 35);
  const Instance b = make_instance(6, 5, 2, 3, 3, 2, 36);
  const Tensor<double> sum_ut(a.ut.shape(), Vector<double>(2.0 * a.ut.data() - 3.0 * b.ut.data()));
  const Matrix<double> expect = 2.0 * cpac_forward(a.ut, a.f) - 3.0 * cpac_forward(b.ut, a.f);
  CHECK((cpac_forward(sum_ut, a.f) - expect).cwiseAbs().maxCoeff() < 1e-12);

  for (int k = 0; k < 4; ++k) {
    CpFactors<double> f1 = a.f, f2 = a.f, f12 = a.f;
    f1.mode(k) = b.f.mode(k);
    f12.mode(k) = a.f.mode(k) + b.f.mode(k);
    const Matrix<double> lhs = cpac_forward(a.ut, f12);
    const Matrix<double> rhs = cpac_forward(a.ut, f1) + cpac_forward(a.ut, f2);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("rank groups add") {
  const Instance a = make_instance(5, 6, 2, 4, 2, 2, 37);
  const Instance b = make_instance(5, 6, 2, 4, 2, 3, 38);
  auto cat = [](const Matrix<double>& l, const Matrix<double>& r) {
    Matrix<double> m(l.rows(), l.cols() + r.cols());
    m << l, r;
    return m;
  };
  const CpFactors<double> both(cat(a.f.x, b.f.x), cat(a.f.y, b.f.y), cat(a.f.s, b.f.s), cat(a.f.n, b.f.n));
  const Matrix<double> lhs = cpac_forward(a.ut, both);
  const Matrix<double> rhs = cpac_forward(a.ut, a.f) + cpac_forward(a.ut, b.f);
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);

  const std::vector<Matrix<double>> maps = cpac_rank_maps(a.ut, both);
  REQUIRE(maps.size() == 5);
  Matrix<double> total = Matrix<double>::Zero(lhs.rows(), lhs.cols());
  for (const Matrix<double>& m : maps) total += m;
  CHECK((total - lhs).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("cache holds the contraction chain") {
  const Instance in = make_instance(5, 4, 3, 2, 2, 2, 39);
  CpacCache<double> cache;
  cpac_forward(in.ut, in.f, &cache);
  REQUIRE(cache.fresh);
  for (Index r = 0; r < 2; ++r) {
    const CpacRankCache<double>& c = cache.ranks[static_cast<std::size_t>(r)];
    CHECK(c.a == mode_mul_vec(in.ut, in.f.s.col(r), 2));
    CHECK(c.a2 == mode_mul_vec(c.a, in.f.y.col(r), 1).matrix(2, 12));
    CHECK(c.a1 == mode_mul_vec(Tensor<double>::from_matrix(c.a2), in.f.x.col(r), 0).data());
  }
}

TEST_CASE("derivative matrices have (params) x (P N) shape and vanish with their constant part") {
  for (const GradcheckCase& gc : gradcheck_grid()) {
    const Instance in = make_instance(gc.x, gc.y, gc.s, gc.n, gc.d, gc.rank, 40);
    CpacCache<double> cache;
    cpac_forward(in.ut, in.f, &cache);
    const Index pn = in.ut.extent(3) * gc.n;
    for (Index r = 0; r < gc.rank; ++r) {
      CHECK(dvt_dkn(cache, in.f, r).rows() == gc.n);
      CHECK(dvt_dkx(cache, in.f, r).rows() == gc.d);
      CHECK(dvt_dky(cache, in.f, r).rows() == gc.d);
      CHECK(dvt_dks(cache, in.f, r).rows() == gc.s);
      CHECK(dvt_dkn(cache, in.f, r).cols() == pn);
      CHECK(dvt_dkx(cache, in.f, r).cols() == pn);
      CHECK(dvt_dky(cache, in.f, r).cols() == pn);
      CHECK(dvt_dks(cache, in.f, r).cols() == pn);
    }
  }

  const Instance in = make_instance(5, 5, 2, 3, 3, 1, 41);
  const Tensor<double> zero_ut(in.ut.shape());
  CpacCache<double> cache;
  cpac_forward(zero_ut, in.f, &cache);
  CHECK(dvt_dkn(cache, in.f, 0).isZero());
  CHECK(dvt_dky(cache, in.f, 0).isZero());
  CHECK(dvt_dks(cache, in.f, 0).isZero());
  CpFactors<double> no_n = in.f;
  no_n.n.setZero();
  cpac_forward(in.ut, no_n, &cache);
  CHECK(dvt_dkx(cache, no_n, 0).isZero());
}

TEST_CASE("derivative matrices need a fresh cache") {
  const Instance in = make_instance(4, 4, 1, 2, 2, 1, 42);
  CpacCache<double> cache;
  CHECK_THROWS_AS(dvt_dkn(cache, in.f, 0), StateError);
  const Matrix<double> v = cpac_forward(in.ut, in.f, &cache);
  cpac_backward(cache, in.f, v);
  CHECK_FALSE(cache.fresh);
  CHECK_THROWS_AS(dvt_dks(cache, in.f, 0), StateError);
  CHECK_THROWS_AS(cpac_backward(cache, in.f, v), StateError);
  CHECK_THROWS_AS(cpac_backward_kronecker(cache, in.f, v), StateError);
}

TEST_CASE("backward of a zero upstream gradient is zero") {
  const Instance in = make_instance(5, 5, 2, 3, 3, 2, 43);
  CpacCache<double> cache;
  const Matrix<double> v = cpac_forward(in.ut, in.f, &cache);
  const CpacGradients<double> g = cpac_backward<double>(cache, in.f, Matrix<double>::Zero(v.rows(), v.cols()));
  for (int k = 0; k < 4; ++k) CHECK(g.factors.mode(k).isZero());
  CHECK(g.ut.data().isZero());
}

TEST_CASE("backward rejects a wrongly shaped upstream gradient") {
  const Instance in = make_instance(5, 5, 2, 3, 3, 2, 44);
  CpacCache<double> cache;
  cpac_forward(in.ut, in.f, &cache);
  CHECK_THROWS_AS(cpac_backward<double>(cache, in.f, Matrix<double>::Zero(9, 2)), ShapeError);
}

TEST_CASE("factor gradients match finite differences of <G, V>") {
  Instance in = make_instance(5, 4, 2, 3, 2, 1, 45);
  std::mt19937_64 rng(46);
  CpacCache<double> cache;
  const Matrix<double> v = cpac_forward(in.ut, in.f, &cache);
  const Matrix<double> grad = random_matrix(v.rows(), v.cols(), rng);
  const CpacGradients<double> naive = cpac_backward_kronecker(cache, in.f, grad);
  const CpacGradients<double> fast = cpac_backward(cache, in.f, grad);
  auto objective = [&] { return (cpac_forward(in.ut, in.f).array() * grad.array()).sum(); };
  for (int k = 0; k < 4; ++k) {
    const Vector<double> numeric = numeric_gradient(objective, in.f.mode(k).data(), in.f.mode(k).size());
    CHECK(rel_err(vec(naive.factors.mode(k)), numeric) < 1e-6);
    CHECK(rel_err(vec(fast.factors.mode(k)), vec(naive.factors.mode(k))) < 1e-10);
  }
}

TEST_CASE("input gradient matches finite differences") {
  Instance in = make_instance(4, 4, 2, 3, 3, 2, 47);
  std::mt19937_64 rng(48);
  CpacCache<double> cache;
  const Matrix<double> v = cpac_forward(in.ut, in.f, &cache);
  const Matrix<double> grad = random_matrix(v.rows(), v.cols(), rng);
  const CpacGradients<double> g = cpac_backward(cache, in.f, grad);
  auto objective = [&] { return (cpac_forward(in.ut, in.f).array() * grad.array()).sum(); };
  CHECK(rel_err(g.ut.data(), numeric_gradient(objective, in.ut.data().data(), in.ut.size())) < 1e-6);

  // Through the patch expansion as well.
  auto spatial = [&] { return (cpac_forward(patch_expand(in.u, 3), in.f).array() * grad.array()).sum(); };
  CHECK(rel_err(patch_accumulate(g.ut, 4, 4).data(), numeric_gradient(spatial, in.u.data().data(), in.u.size())) <
        1e-6);
}

TEST_CASE("dense convolution matches the reference and its gradients") {
  std::mt19937_64 rng(49);
  Tensor<double> u = random_tensor({6, 5, 2}, rng);
  Tensor<double> k = random_tensor({3, 3, 2, 4}, rng);
  const Tensor<double> ut = patch_expand(u, 3);
  const Matrix<double> v = conv_forward(ut, k);
  CHECK((fold_output(v, 6, 5, 3).data() - conv_forward_reference(u, k).data()).cwiseAbs().maxCoeff() < 1e-12);

  const Matrix<double> grad = random_matrix(v.rows(), v.cols(), rng);
  const ConvGradients<double> g = conv_backward(ut, k, grad);
  auto objective = [&] { return (conv_forward(patch_expand(u, 3), k).array() * grad.array()).sum(); };
  CHECK(rel_err(g.kernel.data(), numeric_gradient(objective, k.data().data(), k.size())) < 1e-6);
  CHECK(rel_err(patch_accumulate(g.ut, 6, 5).data(), numeric_gradient(objective, u.data().data(), u.size())) < 1e-6);
}

TEST_CASE("fully connected layer examples") {
  std::mt19937_64 rng(50);
  const Matrix<double> vt = random_matrix(4, 3, rng);
  FcLayer<double> fc{Matrix<double>::Zero(2, 12), random_vector(2, rng)};
  CHECK(fc_forward(fc, vt) == fc.b);

  fc.w(1, 1 + 4 * 2) = 1;  // selects vt(1, 2)
  const Vector<double> y = fc_forward(fc, vt);
  CHECK(y[1] == fc.b[1] + vt(1, 2));
  CHECK(y[0] == fc.b[0]);

  fc.w = random_matrix(2, 12, rng);
  const Vector<double> out = fc_forward(fc, vt);
  for (Index c = 0; c < 2; ++c) {
    double acc = fc.b[c];
    for (Index n = 0; n < 3; ++n)
      for (Index p = 0; p < 4; ++p) acc += fc.w(c, p + 4 * n) * vt(p, n);
    CHECK(out[c] == doctest::Approx(acc).epsilon(1e-14));
  }
  CHECK_THROWS_AS(fc_forward(fc, Matrix<double>(random_matrix(4, 2, rng))), ShapeError);
}

TEST_CASE("fully connected backward") {
  std::mt19937_64 rng(51);
  Matrix<double> vt = random_matrix(4, 3, rng);
  FcLayer<double> fc{random_matrix(3, 12, rng), random_vector(3, rng)};
  FcCache<double> cache;
  fc_forward(fc, vt, &cache);
  const FcGradients<double> zero = fc_backward<double>(fc, cache, Vector<double>::Zero(3), 4, 3);
  CHECK(zero.w.isZero());
  CHECK(zero.b.isZero());
  CHECK(zero.vt.isZero());
  CHECK_THROWS_AS(fc_backward<double>(fc, cache, Vector<double>::Zero(3), 4, 3), StateError);

  FcLayer<double> single{random_matrix(1, 12, rng), random_vector(1, rng)};
  FcCache<double> c1;
  fc_forward(single, vt, &c1);
  const FcGradients<double> g1 = fc_backward<double>(single, c1, Vector<double>::Constant(1, 2.5), 4, 3);
  CHECK((g1.w.transpose() - 2.5 * vec(vt)).cwiseAbs().maxCoeff() < 1e-15);

  const Vector<double> gy = random_vector(3, rng);
  FcCache<double> c2;
  fc_forward(fc, vt, &c2);
  const FcGradients<double> g = fc_backward(fc, c2, gy, 4, 3);
  auto objective = [&] { return fc_forward(fc, vt).dot(gy); };
  CHECK(rel_err(vec(g.w), numeric_gradient(objective, fc.w.data(), fc.w.size())) < 1e-6);
  CHECK(rel_err(g.b, numeric_gradient(objective, fc.b.data(), fc.b.size())) < 1e-6);
  CHECK(rel_err(vec(g.vt), numeric_gradient(objective, vt.data(), vt.size())) < 1e-6);
}

TEST_CASE("softmax cross-entropy") {
  const LossRecord<double> uniform = softmax_xent<double>(Vector<double>::Zero(10), 3);
  CHECK(uniform.value == doctest::Approx(std::log(10.0)).epsilon(1e-14));
  CHECK(std::abs(uniform.gradient.sum()) < 1e-15);

  Vector<double> sure = Vector<double>::Zero(5);
  sure[2] = 1000;
  const LossRecord<double> s = softmax_xent(sure, 2);
  CHECK(std::isfinite(s.value));
  CHECK(s.value < 1e-12);
  CHECK(s.gradient.cwiseAbs().maxCoeff() < 1e-12);

  std::mt19937_64 rng(52);
  for (int trial = 0; trial < 10; ++trial) {
    Vector<double> z = 3.0 * random_vector(6, rng);
    const LossRecord<double> rec = softmax_xent(z, trial % 6);
    CHECK(rec.value >= 0);
    CHECK(std::abs(rec.gradient.sum()) < 1e-14);
    auto objective = [&] { return softmax_xent(z, trial % 6).value; };
    CHECK(rel_err(rec.gradient, numeric_gradient(objective, z.data(), z.size())) < 1e-7);
  }
  CHECK_THROWS_AS(softmax_xent<double>(Vector<double>::Zero(3), 3), std::invalid_argument);
  CHECK_THROWS_AS(softmax_xent<double>(Vector<double>::Zero(3), -1), std::invalid_argument);
}

TEST_CASE("rectifier uses the zero subgradient at zero") {
  Matrix<double> pre(1, 3);
  pre << -1, 0, 2;
  CHECK(rectify(pre) == (Matrix<double>(1, 3) << 0, 0, 2).finished());
  CHECK(rectify_backward<double>(pre, Matrix<double>::Ones(1, 3)) == (Matrix<double>(1, 3) << 0, 0, 1).finished());
}

TEST_CASE("gradient check grid passes") {
  const std::vector<GradcheckCase> grid = gradcheck_grid();
  CHECK(grid.size() >= 12);
  for (const GradcheckCase& gc : grid) {
    const GradcheckResult res = run_gradcheck(gc, 7);
    INFO(gc.label());
    CHECK(res.passed());
  }
}

TEST_CASE("gradient check flags a corrupted derivative") {
  for (Fault fault : {Fault::kn, Fault::kx, Fault::ky, Fault::ks}) {
    bool caught = false;
    for (const GradcheckCase& gc : gradcheck_grid()) {
      const std::vector<std::string> bad = run_gradcheck(gc, 7, fault).failures();
      for (const std::string& name : bad) caught = caught || name == to_string(fault);
    }
    INFO(to_string(fault));
    CHECK(caught);
  }
  CHECK(parse_fault("KY") == Fault::ky);
  CHECK_FALSE(parse_fault("KZ").has_value());
}
