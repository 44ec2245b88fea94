#include "cpac/gradcheck.hpp"

#include "cpac/cp.hpp"
#include "cpac/layers.hpp"
#include "cpac/tensor_ops.hpp"

#include <algorithm>
#include <random>

namespace cpac {

std::optional<Fault> parse_fault(const std::string& name) {
  if (name == "none") return Fault::none;
  if (name == "KN" || name == "kn") return Fault::kn;
  if (name == "KX" || name == "kx") return Fault::kx;
  if (name == "KY" || name == "ky") return Fault::ky;
  if (name == "KS" || name == "ks") return Fault::ks;
  return std::nullopt;
}

std::string to_string(Fault fault) {
  switch (fault) {
    case Fault::kn: return "KN";
    case Fault::kx: return "KX";
    case Fault::ky: return "KY";
    case Fault::ks: return "KS";
    case Fault::none: break;
  }
  return "none";
}

std::string GradcheckCase::label() const {
  return std::to_string(x) + "x" + std::to_string(y) + "x" + std::to_string(s) + " d=" + std::to_string(d) +
         " N=" + std::to_string(n) + " R=" + std::to_string(rank);
}

double GradcheckResult::max_fd() const {
  double m = 0;
  for (const auto& [name, e] : fd) m = std::max(m, e);
  return m;
}

double GradcheckResult::max_fast() const {
  double m = 0;
  for (const auto& [name, e] : fast) m = std::max(m, e);
  return m;
}

std::vector<std::string> GradcheckResult::failures() const {
  std::vector<std::string> out;
  // NaN must count as a failure, hence the negated comparisons.
  for (const auto& [name, e] : fd)
    if (!(e < kGradcheckTolerance)) out.push_back(name);
  for (const auto& [name, e] : fast)
    if (!(e < kPathTolerance)) out.push_back(name + " (fast path)");
  if (!shapes_ok) out.push_back("derivative shapes");
  return out;
}

bool GradcheckResult::passed() const { return failures().empty(); }

std::vector<GradcheckCase> gradcheck_grid() {
  // x, y, s, n, d, rank
  static const Index table[][6] = {
      {4, 4, 1, 1, 1, 1}, {5, 3, 1, 4, 2, 2}, {6, 7, 1, 8, 3, 4}, {3, 5, 2, 4, 1, 4},
      {7, 4, 2, 8, 2, 1}, {5, 6, 2, 1, 3, 2}, {2, 3, 3, 8, 1, 2}, {4, 7, 3, 1, 2, 4},
      {7, 7, 3, 4, 3, 1}, {7, 7, 1, 8, 1, 2}, {6, 5, 1, 1, 2, 4}, {3, 3, 1, 4, 3, 1},
      {5, 5, 2, 1, 1, 1}, {3, 6, 2, 4, 2, 2}, {7, 5, 2, 8, 3, 4}, {6, 2, 3, 4, 1, 1},
      {2, 2, 3, 8, 2, 2}, {4, 5, 3, 1, 3, 4},
  };
  std::vector<GradcheckCase> out;
  for (const auto& row : table) {
    GradcheckCase c;
    c.x = row[0];
    c.y = row[1];
    c.s = row[2];
    c.n = row[3];
    c.d = row[4];
    c.rank = row[5];
    out.push_back(c);
  }
  return out;
}

namespace {

Matrix<double> draw(Index rows, Index cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Matrix<double> m(rows, cols);
  for (Index k = 0; k < m.size(); ++k) m.data()[k] = dist(rng);
  return m;
}

double rel_err(const Vector<double>& a, const Vector<double>& b) {
  const double scale = std::max({a.norm(), b.norm(), 1e-8});
  return (a - b).norm() / scale;
}

template <typename F>
Vector<double> central_difference(F&& f, double* x, Index n) {
  constexpr double h = 1e-5;
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

// The four derivative matrices with an optional corruption: swapped Kronecker
// operands for K^N and K^X, Kolda-ordered unfoldings for K^Y and K^S.
Matrix<double> derivative(const CpacCache<double>& cache, const CpFactors<double>& f, Index r, int which,
                          Fault fault) {
  const Index p = cache.ut.extent(3), d = f.kernel_size(), n = f.channels_out();
  const auto& rc = cache.ranks[static_cast<std::size_t>(r)];
  const Matrix<double> b2 = f.x.col(r) * f.n.col(r).transpose();
  switch (which) {
    case 0:
      if (fault == Fault::kn) return kron(Matrix<double>(rc.a1.transpose()), Matrix<double>::Identity(n, n));
      return dvt_dkn(cache, f, r);
    case 1:
      if (fault == Fault::kx) return kron(rc.a2, Matrix<double>(f.n.col(r).transpose()));
      return dvt_dkx(cache, f, r);
    case 2:
      if (fault == Fault::ky) return unfold(rc.a, 1) * kron(b2, Matrix<double>::Identity(p, p));
      return dvt_dky(cache, f, r);
    default:
      if (fault == Fault::ks)
        return unfold(cache.ut, 2) * kron(Matrix<double>(f.y.col(r)), Matrix<double>::Identity(d * p, d * p)) *
               kron(b2, Matrix<double>::Identity(p, p));
      return dvt_dks(cache, f, r);
  }
}

}  // namespace

GradcheckResult run_gradcheck(const GradcheckCase& c, std::uint64_t seed, Fault fault) {
  const ShapeDescriptor g(c.x, c.y, c.s, c.n, c.d);
  std::mt19937_64 rng(seed);
  Tensor<double> u({c.x, c.y, c.s}, Vector<double>(draw(c.x * c.y * c.s, 1, rng)));
  CpFactors<double> f(draw(c.d, c.rank, rng), draw(c.d, c.rank, rng), draw(c.s, c.rank, rng), draw(c.n, c.rank, rng));
  FcLayer<double> fc;
  fc.w = draw(c.classes, g.p() * c.n, rng);
  fc.b = draw(c.classes, 1, rng);
  const Index label = std::uniform_int_distribution<Index>(0, c.classes - 1)(rng);

  auto loss = [&] {
    const Matrix<double> vt = cpac_forward(patch_expand(u, c.d), f);
    return softmax_xent(fc_forward(fc, vt), label).value;
  };

  // Analytic pass.
  CpacCache<double> cache;
  const Tensor<double> ut = patch_expand(u, c.d);
  const Matrix<double> vt = cpac_forward(ut, f, &cache);
  FcCache<double> fcache;
  const Vector<double> logits = fc_forward(fc, vt, &fcache);
  const LossRecord<double> rec = softmax_xent(logits, label);
  const FcGradients<double> fg = fc_backward(fc, fcache, rec.gradient, g.p(), c.n);

  GradcheckResult res;
  res.config = c;
  const Vector<double> gvec = vec(fg.vt);
  CpFactors<double> naive = CpFactors<double>::zeros(c.d, c.s, c.n, c.rank);
  const Index expect_rows[4] = {c.n, c.d, c.d, c.s};
  for (Index r = 0; r < c.rank; ++r) {
    const int order[4] = {3, 0, 1, 2};  // N, X, Y, S
    for (int which = 0; which < 4; ++which) {
      const Matrix<double> dm = derivative(cache, f, r, which, fault);
      if (dm.rows() != expect_rows[which] || dm.cols() != g.p() * c.n) {
        res.shapes_ok = false;
        continue;
      }
      naive.mode(order[which]).col(r) = dm * gvec;
    }
  }
  const Tensor<double> grad_u = patch_accumulate(detail::input_gradient(cache, f, fg.vt), c.x, c.y);
  const CpacGradients<double> fast = cpac_backward(cache, f, fg.vt);

  static const char* names[4] = {"KX", "KY", "KS", "KN"};
  for (int k : {3, 0, 1, 2}) {
    Matrix<double>& param = f.mode(k);
    const Vector<double> numeric = central_difference(loss, param.data(), param.size());
    res.fd.emplace_back(names[k], rel_err(vec(naive.mode(k)), numeric));
  }
  res.fd.emplace_back("input", rel_err(grad_u.data(), central_difference(loss, u.data().data(), u.size())));
  res.fd.emplace_back("fc_w", rel_err(vec(fg.w), central_difference(loss, fc.w.data(), fc.w.size())));
  res.fd.emplace_back("fc_b", rel_err(fg.b, central_difference(loss, fc.b.data(), fc.b.size())));
  Vector<double> z = logits;
  auto loss_of_logits = [&] { return softmax_xent(z, label).value; };
  res.fd.emplace_back("logits", rel_err(rec.gradient, central_difference(loss_of_logits, z.data(), z.size())));

  for (int k : {3, 0, 1, 2}) res.fast.emplace_back(names[k], rel_err(vec(fast.factors.mode(k)), vec(naive.mode(k))));
  return res;
}

}  // namespace cpac
