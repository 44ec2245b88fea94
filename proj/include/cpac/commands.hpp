#ifndef CPAC_COMMANDS_HPP
#define CPAC_COMMANDS_HPP

#include "cpac/cp.hpp"
#include "cpac/gradcheck.hpp"
#include "cpac/io.hpp"
#include "cpac/network.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace cpac {

/// Process exit codes shared by every subcommand.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,  // unexpected I/O or internal error
  kExitConfig = 2,
  kExitData = 3,
  kExitDivergence = 4,
  kExitGradcheck = 5,
};

inline constexpr const char* kMetricsHeader = "epoch,split,loss,accuracy,wall_time,M1,M2,CR";

std::string metrics_csv_row(const MetricsRow& row);

/// Train and test splits as described by the run configuration.
std::pair<Dataset, Dataset> load_datasets(const RunConfig& cfg);

/// Network for a run: seeded build, or CP-ALS factors of a baseline checkpoint when init=als.
Network initial_network(const RunConfig& cfg);

struct TrainOutcome {
  Network network;
  std::vector<MetricsRow> rows;
};

/**
 * Trains per `cfg` and writes into cfg.out: metrics.csv, model.ckpt,
 * config.resolved, provenance.txt and timing.csv. Throws on failure; see
 * cmd_train for the exit-code mapping.
 */
TrainOutcome run_training(RunConfig cfg, std::ostream& log);

int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err);

struct GradcheckOptions {
  std::uint64_t seed = 7;
  Fault fault = Fault::none;
  std::string out_dir;  // gradcheck.csv is written here when non-empty
};

int cmd_gradcheck(const GradcheckOptions& opts, std::ostream& out, std::ostream& err);

struct DecomposeOptions {
  std::string kernel_file;      // CPACTENSOR1 file, or
  std::string checkpoint;       // baseline checkpoint plus `layer`
  Index layer = 1;              // 1-based
  Index rank = 1;
  std::string out = "factors.txt";
  CpAlsOptions als;
};

int cmd_decompose(const DecomposeOptions& opts, std::ostream& out, std::ostream& err);

struct InspectOptions {
  std::string checkpoint;
  RunConfig data;     // where the sample comes from (test split)
  Index sample = 0;   // 0-based index into the test split
  Index layer = 1;    // 1-based
  std::string out_dir = "inspect";
};

struct InspectReport {
  std::vector<Significance> ranking;  // descending norm
  std::vector<double> correlation;    // per ranking entry: per-rank map vs overall map
  FeatureMaps maps;
};

InspectReport run_inspect(const InspectOptions& opts, std::ostream& log);
int cmd_inspect(const InspectOptions& opts, std::ostream& out, std::ostream& err);

inline constexpr const char* kSweepHeader =
    "model,R,M1,M2,CR,epochs,train_loss,train_accuracy,test_loss,test_accuracy,exit_code";

/// Baseline plus one CPAC run per rank, each in its own subdirectory of cfg.out; writes sweep.csv.
int cmd_sweep(const RunConfig& cfg, const std::vector<Index>& ranks, std::ostream& out, std::ostream& err);

/// Runs `body`, mapping exceptions to exit codes and printing them to `err`.
int guarded(const std::function<int()>& body, std::ostream& err);

// Portable graymap (P2), values min-max scaled to 0..255.
void write_pgm(const Matrix<double>& image, const std::string& path);

}  // namespace cpac

#endif  // CPAC_COMMANDS_HPP
