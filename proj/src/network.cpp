#include "cpac/network.hpp"

#include "cpac/tensor_ops.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <thread>

namespace cpac {

void NetworkConfig::validate() const {
  if (input_x < 1 || input_y < 1 || input_s < 1)
    throw ConfigError("input extents must be positive");
  if (classes < 1) throw ConfigError("class count must be positive");
  if (layers.empty()) throw ConfigError("at least one convolution layer is required");
  Index x = input_x, y = input_y;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const ConvLayerConfig& c = layers[l];
    const std::string where = "layer " + std::to_string(l + 1) + ": ";
    if (c.kernel < 1) throw ConfigError(where + "kernel size must be positive");
    if (c.channels < 1) throw ConfigError(where + "channel count must be positive");
    if (c.rank < 1) throw ConfigError(where + "rank must be at least 1");
    x -= c.kernel - 1;
    y -= c.kernel - 1;
    if (x < 1 || y < 1)
      throw ConfigError(where + "spatial extent vanishes (" + std::to_string(x) + "x" +
                        std::to_string(y) + ")");
  }
  if (training.batch_size < 1) throw ConfigError("batch_size must be positive");
  if (training.epochs < 0) throw ConfigError("epochs must be non-negative");
  if (!std::isfinite(training.learning_rate) || training.learning_rate < 0)
    throw ConfigError("learning_rate must be finite and non-negative");
  if (!(training.momentum >= 0 && training.momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
}

std::vector<ShapeDescriptor> NetworkConfig::shapes() const {
  validate();
  std::vector<ShapeDescriptor> out;
  Index x = input_x, y = input_y, s = input_s;
  for (const ConvLayerConfig& c : layers) {
    out.emplace_back(x, y, s, c.channels, c.kernel);
    x = out.back().out_x();
    y = out.back().out_y();
    s = c.channels;
  }
  return out;
}

Index NetworkConfig::fc_inputs() const {
  const ShapeDescriptor last = shapes().back();
  return last.p() * last.n;
}

// ---------------------------------------------------------------------------

namespace {

template <typename F>
void for_each_param(ConvParams& a, const ConvParams& b, F&& f) {
  if (auto* fa = std::get_if<CpFactors<double>>(&a)) {
    const auto& fb = std::get<CpFactors<double>>(b);
    for (int k = 0; k < 4; ++k) f(fa->mode(k), fb.mode(k));
  } else {
    f(std::get<Tensor<double>>(a).data(), std::get<Tensor<double>>(b).data());
  }
}

ConvParams zeros_like(const ConvParams& p) {
  if (const auto* f = std::get_if<CpFactors<double>>(&p))
    return CpFactors<double>::zeros(f->kernel_size(), f->channels_in(), f->channels_out(), f->rank());
  return Tensor<double>(std::get<Tensor<double>>(p).shape());
}

Matrix<double> uniform(Index rows, Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix<double> m(rows, cols);
  for (Index c = 0; c < cols; ++c)
    for (Index r = 0; r < rows; ++r) m(r, c) = dist(rng);
  return m;
}

}  // namespace

void NetworkGradients::add(const NetworkGradients& other) {
  for (std::size_t l = 0; l < stages.size(); ++l)
    for_each_param(stages[l], other.stages[l], [](auto& a, const auto& b) { a += b; });
  fc_w += other.fc_w;
  fc_b += other.fc_b;
}

void NetworkGradients::scale(double factor) {
  for (ConvParams& p : stages)
    for_each_param(p, p, [factor](auto& a, const auto&) { a *= factor; });
  fc_w *= factor;
  fc_b *= factor;
}

Network assemble_network(NetworkConfig config, std::vector<ConvStage> stages, FcLayer<double> fc) {
  const std::vector<ShapeDescriptor> shapes = config.shapes();
  if (stages.size() != shapes.size()) throw ConfigError("stage count does not match configuration");
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const ShapeDescriptor& g = shapes[l];
    ConvStage& st = stages[l];
    const std::string where = "layer " + std::to_string(l + 1) + ": ";
    if (!(st.shape == g)) throw ConfigError(where + "geometry does not match configuration");
    if (config.baseline) {
      if (st.is_cpac()) throw ConfigError(where + "baseline network needs dense kernels");
      if (st.kernel().shape() != Shape{g.d, g.d, g.s, g.n}) throw ConfigError(where + "kernel shape mismatch");
    } else {
      if (!st.is_cpac()) throw ConfigError(where + "CPAC network needs factor kernels");
      const CpFactors<double>& f = st.factors();
      f.validate();
      if (f.kernel_shape() != Shape{g.d, g.d, g.s, g.n}) throw ConfigError(where + "factor shapes mismatch");
      if (f.rank() != config.layers[l].rank) throw ConfigError(where + "factor rank does not match configuration");
    }
  }
  if (fc.w.rows() != config.classes || fc.w.cols() != config.fc_inputs() || fc.b.size() != config.classes)
    throw ConfigError("FC layer shape does not match configuration");
  return Network(std::move(config), std::move(stages), std::move(fc));
}

Network Network::build(const NetworkConfig& config) {
  const std::vector<ShapeDescriptor> shapes = config.shapes();
  std::mt19937_64 rng(config.training.seed);
  std::vector<ConvStage> stages;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const ShapeDescriptor& g = shapes[l];
    const double fan_in = static_cast<double>(g.d * g.d * g.s);
    const double fan_out = static_cast<double>(g.d * g.d * g.n);
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    if (config.baseline) {
      Tensor<double> k({g.d, g.d, g.s, g.n});
      k.data() = uniform(k.size(), 1, a, rng);
      stages.push_back({g, std::move(k)});
    } else {
      // Var of a reconstructed entry is R (b^2 / 3)^4; match the dense a^2 / 3.
      const Index rank = config.layers[l].rank;
      const double var_k = a * a / 3.0;
      const double b = std::sqrt(3.0) * std::pow(var_k / static_cast<double>(rank), 0.125);
      Matrix<double> fx = uniform(g.d, rank, b, rng);
      Matrix<double> fy = uniform(g.d, rank, b, rng);
      Matrix<double> fs = uniform(g.s, rank, b, rng);
      Matrix<double> fn = uniform(g.n, rank, b, rng);
      stages.push_back({g, CpFactors<double>(std::move(fx), std::move(fy), std::move(fs), std::move(fn))});
    }
  }
  FcLayer<double> fc;
  const Index inputs = config.fc_inputs();
  fc.w = uniform(config.classes, inputs, std::sqrt(6.0 / static_cast<double>(inputs + config.classes)), rng);
  fc.b = Vector<double>::Zero(config.classes);
  return Network(config, std::move(stages), std::move(fc));
}

ForwardTrace Network::forward(const Tensor<double>& image) const {
  if (image.shape() != Shape{config_.input_x, config_.input_y, config_.input_s})
    throw ShapeError("network input " + to_string(image.shape()) + " does not match configuration");
  ForwardTrace t;
  t.stages.resize(stages_.size());
  Tensor<double> current = image;
  Matrix<double> out;
  for (std::size_t l = 0; l < stages_.size(); ++l) {
    const ConvStage& st = stages_[l];
    ForwardTrace::Stage& ts = t.stages[l];
    ts.ut = patch_expand(current, st.shape.d);
    ts.pre = st.is_cpac() ? cpac_forward(ts.ut, st.factors(), &ts.cache) : conv_forward(ts.ut, st.kernel());
    out = config_.rectifier ? rectify(ts.pre) : ts.pre;
    if (l + 1 < stages_.size()) current = fold_output(out, st.shape.x, st.shape.y, st.shape.d);
  }
  t.logits = fc_forward(fc_, out, &t.fc);
  return t;
}

Vector<double> Network::logits(const Tensor<double>& image) const { return forward(image).logits; }

NetworkGradients Network::backward(ForwardTrace& trace, const Vector<double>& grad_logits) const {
  NetworkGradients g;
  g.stages.resize(stages_.size());
  const ShapeDescriptor& last = stages_.back().shape;
  FcGradients<double> fg = fc_backward(fc_, trace.fc, grad_logits, last.p(), last.n);
  g.fc_w = std::move(fg.w);
  g.fc_b = std::move(fg.b);
  Matrix<double> grad_out = std::move(fg.vt);
  for (std::size_t l = stages_.size(); l-- > 0;) {
    const ConvStage& st = stages_[l];
    ForwardTrace::Stage& ts = trace.stages[l];
    const Matrix<double> grad_pre = config_.rectifier ? rectify_backward(ts.pre, grad_out) : grad_out;
    Tensor<double> grad_ut;
    if (st.is_cpac()) {
      CpacGradients<double> cg = cpac_backward(ts.cache, st.factors(), grad_pre);
      g.stages[l] = std::move(cg.factors);
      grad_ut = std::move(cg.ut);
    } else {
      ConvGradients<double> cg = conv_backward(ts.ut, st.kernel(), grad_pre);
      g.stages[l] = std::move(cg.kernel);
      grad_ut = std::move(cg.ut);
    }
    if (l > 0) grad_out = unfold_output(patch_accumulate(grad_ut, st.shape.x, st.shape.y));
  }
  return g;
}

std::pair<Tensor<double>, Matrix<double>> Network::layer_io(const Tensor<double>& image, Index layer) const {
  if (layer < 0 || layer >= static_cast<Index>(stages_.size()))
    throw std::invalid_argument("layer index " + std::to_string(layer) + " out of range [0, " +
                                std::to_string(stages_.size()) + ")");
  ForwardTrace t = forward(image);
  auto& s = t.stages[static_cast<std::size_t>(layer)];
  return {std::move(s.ut), std::move(s.pre)};
}

NetworkGradients Network::zeros_like() const {
  NetworkGradients g;
  for (const ConvStage& st : stages_) g.stages.push_back(cpac::zeros_like(st.params));
  g.fc_w = Matrix<double>::Zero(fc_.w.rows(), fc_.w.cols());
  g.fc_b = Vector<double>::Zero(fc_.b.size());
  return g;
}

void Network::apply(const NetworkGradients& step, double lr) {
  for (std::size_t l = 0; l < stages_.size(); ++l)
    for_each_param(stages_[l].params, step.stages[l], [lr](auto& p, const auto& s) { p -= lr * s; });
  fc_.w -= lr * step.fc_w;
  fc_.b -= lr * step.fc_b;
}

bool operator==(const Network& a, const Network& b) {
  if (!(a.config_ == b.config_) || a.stages_.size() != b.stages_.size()) return false;
  for (std::size_t l = 0; l < a.stages_.size(); ++l) {
    if (!(a.stages_[l].shape == b.stages_[l].shape)) return false;
    if (a.stages_[l].params != b.stages_[l].params) return false;
  }
  return a.fc_.w == b.fc_.w && a.fc_.b == b.fc_.b;
}

void SgdOptimizer::step(Network& net, const NetworkGradients& grad) {
  if (momentum_ == 0.0) {
    net.apply(grad, lr_);
    return;
  }
  if (!initialized_) {
    velocity_ = net.zeros_like();
    initialized_ = true;
  }
  velocity_.scale(momentum_);
  velocity_.add(grad);
  net.apply(velocity_, lr_);
}

// ---------------------------------------------------------------------------

namespace {

struct SampleOutcome {
  double loss = 0;
  bool correct = false;
  NetworkGradients grad;
};

SampleOutcome run_sample(const Network& net, const Dataset& data, Index i, bool with_grad) {
  ForwardTrace t = net.forward(data.image(i));
  Index predicted = 0;
  t.logits.maxCoeff(&predicted);
  const LossRecord<double> loss = softmax_xent(t.logits, data.labels[static_cast<std::size_t>(i)]);
  SampleOutcome out;
  out.loss = loss.value;
  out.correct = predicted == data.labels[static_cast<std::size_t>(i)];
  if (with_grad) out.grad = net.backward(t, loss.gradient);
  return out;
}

// Results land in per-sample slots so that any reduction over them happens in sample order.
std::vector<SampleOutcome> run_samples(const Network& net, const Dataset& data,
                                       std::span<const Index> idx, bool with_grad,
                                       const ExecutionOptions& exec) {
  std::vector<SampleOutcome> out(idx.size());
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(std::max(exec.threads, 1)), idx.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t k = begin; k < end; ++k) out[k] = run_sample(net, data, idx[k], with_grad);
  };
  if (workers <= 1) {
    work(0, idx.size());
    return out;
  }
  std::vector<std::thread> pool;
  const std::size_t chunk = (idx.size() + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk, end = std::min(idx.size(), begin + chunk);
    if (begin < end) pool.emplace_back(work, begin, end);
  }
  for (std::thread& t : pool) t.join();
  return out;
}

}  // namespace

std::pair<StepResult, NetworkGradients> batch_gradient(const Network& net, const Dataset& data,
                                                       std::span<const Index> batch,
                                                       const ExecutionOptions& exec) {
  if (batch.empty()) throw std::invalid_argument("batch is empty");
  std::vector<SampleOutcome> outcomes = run_samples(net, data, batch, true, exec);
  StepResult res;
  NetworkGradients total = net.zeros_like();
  for (const SampleOutcome& o : outcomes) {
    res.loss += o.loss;
    res.correct += o.correct ? 1 : 0;
    total.add(o.grad);
  }
  res.count = static_cast<Index>(batch.size());
  res.loss /= static_cast<double>(res.count);
  total.scale(1.0 / static_cast<double>(res.count));
  return {res, std::move(total)};
}

StepResult train_step(Network& net, SgdOptimizer& opt, const Dataset& data, std::span<const Index> batch,
                      Index batch_index, const ExecutionOptions& exec) {
  auto [res, grad] = batch_gradient(net, data, batch, exec);
  if (!std::isfinite(res.loss))
    throw TrainingError("non-finite loss in batch " + std::to_string(batch_index), batch_index);
  opt.step(net, grad);
  return res;
}

EvalResult evaluate(const Network& net, const Dataset& data, const ExecutionOptions& exec) {
  if (data.empty()) throw std::invalid_argument("cannot evaluate on an empty split");
  std::vector<Index> idx(static_cast<std::size_t>(data.size()));
  std::iota(idx.begin(), idx.end(), Index{0});
  const std::vector<SampleOutcome> outcomes = run_samples(net, data, idx, false, exec);
  EvalResult r;
  Index correct = 0;
  for (const SampleOutcome& o : outcomes) {
    r.loss += o.loss;
    correct += o.correct ? 1 : 0;
  }
  r.count = data.size();
  r.loss /= static_cast<double>(r.count);
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.count);
  return r;
}

// ---------------------------------------------------------------------------

ParamCounts param_counts(const NetworkConfig& config) {
  const std::vector<ShapeDescriptor> shapes = config.shapes();
  ParamCounts pc;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const ShapeDescriptor& g = shapes[l];
    const Index rank = config.layers[l].rank;
    if (rank < 1) throw ConfigError("layer " + std::to_string(l + 1) + ": rank must be at least 1");
    pc.dense.push_back(g.d * g.d * g.s * g.n);
    pc.factored.push_back(rank * (g.d + g.d + g.s + g.n));
    pc.m1 += pc.dense.back();
    pc.m2 += pc.factored.back();
  }
  return pc;
}

std::string CompressionRatio::str() const {
  // round(10^4 n / d) half-up, exactly
  const long long n = numerator, d = denominator;
  const long long q = (20000LL * n + d) / (2LL * d);
  std::string whole = std::to_string(q / 10000);
  std::string frac = std::to_string(q % 10000);
  return whole + "." + std::string(4 - frac.size(), '0') + frac;
}

CompressionRatio compression_ratio(const NetworkConfig& config) {
  const ParamCounts pc = param_counts(config);
  const Index g = std::gcd(pc.m2, pc.m1);
  return {pc.m2 / g, pc.m1 / g};
}

std::vector<Significance> significance_ranking(const CpFactors<double>& factors) {
  std::vector<Significance> out;
  for (Index r = 0; r < factors.rank(); ++r) out.push_back({r, factors.s.col(r).norm()});
  std::stable_sort(out.begin(), out.end(),
                   [](const Significance& a, const Significance& b) { return a.norm > b.norm; });
  return out;
}

FeatureMaps feature_maps(const Network& net, const Tensor<double>& image, Index layer) {
  if (layer < 0 || layer >= static_cast<Index>(net.stages().size()))
    throw std::invalid_argument("layer index " + std::to_string(layer) + " out of range");
  const ConvStage& st = net.stages()[static_cast<std::size_t>(layer)];
  if (!st.is_cpac()) throw std::invalid_argument("layer " + std::to_string(layer) + " is not a CPAC layer");
  auto [ut, pre] = net.layer_io(image, layer);
  FeatureMaps fm;
  fm.shape = st.shape;
  fm.ranks = cpac_rank_maps(ut, st.factors());
  fm.overall = std::move(pre);
  return fm;
}

double correlation(const Matrix<double>& a, const Matrix<double>& b) {
  if (a.size() != b.size()) throw ShapeError("correlation: size mismatch");
  const Eigen::ArrayXd x = Eigen::Map<const Eigen::ArrayXd>(a.data(), a.size());
  const Eigen::ArrayXd y = Eigen::Map<const Eigen::ArrayXd>(b.data(), b.size());
  const Eigen::ArrayXd dx = x - x.mean();
  const Eigen::ArrayXd dy = y - y.mean();
  const double denom = std::sqrt((dx * dx).sum() * (dy * dy).sum());
  return denom > 0 ? (dx * dy).sum() / denom : 0.0;
}

// ---------------------------------------------------------------------------

std::vector<MetricsRow> fit(Network& net, const Dataset& train, const Dataset& test, const FitOptions& options) {
  const NetworkConfig& cfg = net.config();
  const ParamCounts pc = param_counts(cfg);
  const CompressionRatio cr = compression_ratio(cfg);
  const Index m2 = cfg.baseline ? pc.m1 : pc.m2;
  const std::string cr_str = cfg.baseline ? CompressionRatio{1, 1}.str() : cr.str();
  if (train.empty()) throw std::invalid_argument("training split is empty");

  SgdOptimizer opt(cfg.training.learning_rate, cfg.training.momentum);
  std::vector<MetricsRow> rows;
  auto emit = [&](MetricsRow row) {
    row.m1 = pc.m1;
    row.m2 = m2;
    row.cr = cr_str;
    if (options.on_row) options.on_row(row);
    rows.push_back(std::move(row));
  };
  Index batch_counter = 0;
  for (int epoch = 1; epoch <= cfg.training.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const std::uint64_t epoch_seed = cfg.training.seed * 1000003ULL + static_cast<std::uint64_t>(epoch);
    double loss_sum = 0;
    Index correct = 0, seen = 0;
    for (const std::vector<Index>& b : batches(train.size(), cfg.training.batch_size, epoch_seed)) {
      const StepResult r = train_step(net, opt, train, b, batch_counter++, options.exec);
      loss_sum += r.loss * static_cast<double>(r.count);
      correct += r.correct;
      seen += r.count;
    }
    const double train_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    emit({epoch, "train", loss_sum / static_cast<double>(seen),
          static_cast<double>(correct) / static_cast<double>(seen), train_time, 0, 0, {}});
    if (!test.empty()) {
      const auto t0 = std::chrono::steady_clock::now();
      const EvalResult e = evaluate(net, test, options.exec);
      const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      emit({epoch, "test", e.loss, e.accuracy, t, 0, 0, {}});
    }
  }
  return rows;
}

}  // namespace cpac
