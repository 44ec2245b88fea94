#ifndef CPAC_NETWORK_HPP
#define CPAC_NETWORK_HPP

#include "cpac/cp.hpp"
#include "cpac/data.hpp"
#include "cpac/layers.hpp"
#include "cpac/tensor.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace cpac {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when the loss stops being finite.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, Index batch) : std::runtime_error(what), batch_(batch) {}
  Index batch() const { return batch_; }

 private:
  Index batch_;
};

struct ConvLayerConfig {
  Index kernel = 3;
  Index channels = 8;
  Index rank = 1;

  friend bool operator==(const ConvLayerConfig&, const ConvLayerConfig&) = default;
};

struct TrainingConfig {
  double learning_rate = 0.01;
  double momentum = 0.0;
  int epochs = 1;
  Index batch_size = 32;
  std::uint64_t seed = 0;

  friend bool operator==(const TrainingConfig&, const TrainingConfig&) = default;
};

/**
 * L - 1 convolution layers followed by one FC layer. With `baseline` set the
 * convolution layers hold dense d x d x S x N kernels instead of CP factors.
 */
struct NetworkConfig {
  Index input_x = 28;
  Index input_y = 28;
  Index input_s = 1;
  Index classes = 10;
  std::vector<ConvLayerConfig> layers{ConvLayerConfig{}};
  bool baseline = false;
  bool rectifier = false;
  TrainingConfig training;

  /// Throws ConfigError naming the first offending layer (1-based).
  void validate() const;
  /// Geometry of every convolution layer, in order.
  std::vector<ShapeDescriptor> shapes() const;
  /// Entries of the last convolution output, P_{L-1} N_{L-1}.
  Index fc_inputs() const;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

using ConvParams = std::variant<CpFactors<double>, Tensor<double>>;

struct ConvStage {
  ShapeDescriptor shape;
  ConvParams params;

  bool is_cpac() const { return std::holds_alternative<CpFactors<double>>(params); }
  CpFactors<double>& factors() { return std::get<CpFactors<double>>(params); }
  const CpFactors<double>& factors() const { return std::get<CpFactors<double>>(params); }
  Tensor<double>& kernel() { return std::get<Tensor<double>>(params); }
  const Tensor<double>& kernel() const { return std::get<Tensor<double>>(params); }
};

/// Parameter-shaped container, used for gradients and momentum buffers.
struct NetworkGradients {
  std::vector<ConvParams> stages;
  Matrix<double> fc_w;
  Vector<double> fc_b;

  void add(const NetworkGradients& other);
  void scale(double factor);
};

/// Everything one sample's forward pass leaves behind for backward.
struct ForwardTrace {
  struct Stage {
    Tensor<double> ut;       // patch-expanded input
    CpacCache<double> cache;  // CPAC layers only
    Matrix<double> pre;      // layer output before the rectifier
  };
  std::vector<Stage> stages;
  FcCache<double> fc;
  Vector<double> logits;
};

class Network {
 public:
  /// Seeded initialization; see README for the scheme.
  static Network build(const NetworkConfig& config);

  const NetworkConfig& config() const { return config_; }
  std::vector<ConvStage>& stages() { return stages_; }
  const std::vector<ConvStage>& stages() const { return stages_; }
  FcLayer<double>& fc() { return fc_; }
  const FcLayer<double>& fc() const { return fc_; }

  Vector<double> logits(const Tensor<double>& image) const;
  ForwardTrace forward(const Tensor<double>& image) const;
  /// Parameter gradients for one sample given dL/dy^.
  NetworkGradients backward(ForwardTrace& trace, const Vector<double>& grad_logits) const;
  /// Output of convolution layer `layer` (pre-rectifier, P x N) and its patch-expanded input.
  std::pair<Tensor<double>, Matrix<double>> layer_io(const Tensor<double>& image, Index layer) const;

  NetworkGradients zeros_like() const;
  /// params -= lr * step.
  void apply(const NetworkGradients& step, double lr);

  friend bool operator==(const Network& a, const Network& b);

 private:
  Network(NetworkConfig config, std::vector<ConvStage> stages, FcLayer<double> fc)
      : config_(std::move(config)), stages_(std::move(stages)), fc_(std::move(fc)) {}
  friend Network assemble_network(NetworkConfig, std::vector<ConvStage>, FcLayer<double>);

  NetworkConfig config_;
  std::vector<ConvStage> stages_;
  FcLayer<double> fc_;
};

/// Builds a network from explicit parameters (checkpoint loading, tests).
Network assemble_network(NetworkConfig config, std::vector<ConvStage> stages, FcLayer<double> fc);

/// SGD with optional momentum: v = mu v + g; theta -= lr v.
class SgdOptimizer {
 public:
  SgdOptimizer(double learning_rate, double momentum) : lr_(learning_rate), momentum_(momentum) {}
  void step(Network& net, const NetworkGradients& grad);

 private:
  double lr_;
  double momentum_;
  NetworkGradients velocity_;
  bool initialized_ = false;
};

struct StepResult {
  double loss = 0;   // mean over the batch
  Index correct = 0;
  Index count = 0;
};

/// Samples of a batch run on up to `threads` workers; gradients are always reduced in sample order.
struct ExecutionOptions {
  int threads = 1;
};

/**
 * One forward/backward/update over a batch: mean loss and mean gradient.
 * Throws TrainingError carrying `batch_index` if the loss is not finite.
 */
StepResult train_step(Network& net, SgdOptimizer& opt, const Dataset& data,
                      std::span<const Index> batch, Index batch_index = 0,
                      const ExecutionOptions& exec = {});

/// Mean loss and gradient of a batch without updating parameters.
std::pair<StepResult, NetworkGradients> batch_gradient(const Network& net, const Dataset& data,
                                                       std::span<const Index> batch,
                                                       const ExecutionOptions& exec = {});

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
  Index count = 0;
};

EvalResult evaluate(const Network& net, const Dataset& data, const ExecutionOptions& exec = {});

// ---------------------------------------------------------------------------
// Compression accounting

struct ParamCounts {
  std::vector<Index> dense;     // M1 per layer: d d S N
  std::vector<Index> factored;  // M2 per layer: R (d + d + S + N)
  Index m1 = 0;
  Index m2 = 0;
};

ParamCounts param_counts(const NetworkConfig& config);

/// M2 / M1 as an exact reduced fraction.
struct CompressionRatio {
  Index numerator = 0;
  Index denominator = 1;

  double value() const { return static_cast<double>(numerator) / static_cast<double>(denominator); }
  /// Rounded half-up to 4 decimals with exact integer arithmetic, e.g. "0.2083".
  std::string str() const;
};

CompressionRatio compression_ratio(const NetworkConfig& config);

// ---------------------------------------------------------------------------
// Interpretation

struct Significance {
  Index rank = 0;  // 0-based rank group index
  double norm = 0;  // ||K_r^S||_2
};

/// Rank groups by descending ||K_r^S||, ties broken by ascending index.
std::vector<Significance> significance_ranking(const CpFactors<double>& factors);

struct FeatureMaps {
  ShapeDescriptor shape;
  Matrix<double> overall;             // P x N layer output, pre-rectifier
  std::vector<Matrix<double>> ranks;  // R maps, each P x N
};

FeatureMaps feature_maps(const Network& net, const Tensor<double>& image, Index layer);

/// Pearson correlation of two equally sized maps (0 if either is constant).
double correlation(const Matrix<double>& a, const Matrix<double>& b);

// ---------------------------------------------------------------------------
// Training driver

struct MetricsRow {
  int epoch = 0;
  std::string split;
  double loss = 0;
  double accuracy = 0;
  double wall_time = 0;
  Index m1 = 0;
  Index m2 = 0;
  std::string cr;
};

struct FitOptions {
  ExecutionOptions exec;
  std::function<void(const MetricsRow&)> on_row;
};

/**
 * Runs config.training.epochs epochs of shuffled mini-batch SGD. Emits a
 * "train" row (running mean over the epoch) and, when `test` is non-empty,
 * a "test" row per epoch.
 */
std::vector<MetricsRow> fit(Network& net, const Dataset& train, const Dataset& test,
                            const FitOptions& options = {});

}  // namespace cpac

#endif  // CPAC_NETWORK_HPP
