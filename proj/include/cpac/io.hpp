#ifndef CPAC_IO_HPP
#define CPAC_IO_HPP

#include "cpac/cp.hpp"
#include "cpac/network.hpp"

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>

namespace cpac {

/// Locale-independent shortest round-trip rendering of a double.
std::string format_double(double v);
/// Fixed-point rendering with `digits` decimals, locale-independent.
std::string format_fixed(double v, int digits);
double parse_double(const std::string& text, const std::string& what);
std::int64_t parse_int(const std::string& text, const std::string& what);
bool parse_bool(const std::string& text, const std::string& what);

/**
 * Everything one CLI run needs. Read from a flat key=value file (`#` starts
 * a comment); unknown keys are rejected. See README for the key list.
 */
struct RunConfig {
  NetworkConfig network;

  std::string dataset = "synthetic";  // "mnist" or "synthetic"
  std::string mnist_dir;
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;
  Index train_subset = 0;  // 0 keeps the whole split
  Index test_subset = 0;
  Index synthetic_train = 500;
  Index synthetic_test = 200;

  std::string init = "cold";  // "cold" or "als"
  std::string init_checkpoint;
  int als_iters = 500;

  std::string out = "run";
  bool deterministic = true;
  int threads = 0;  // parallel mode worker count, 0 = hardware concurrency

  /// Sets one key; throws ConfigError for unknown keys or malformed values.
  void set(const std::string& key, const std::string& value);
  /// Resolved configuration in canonical key order, re-parseable by parse_run_config.
  std::string to_text() const;
  /// Resolves mnist_dir into the four file paths where those are unset.
  void resolve_paths();
};

RunConfig parse_run_config(std::istream& in, const std::string& source = "<config>");
RunConfig load_run_config(const std::string& path);

// ---------------------------------------------------------------------------
// Checkpoints: text file starting with the line "CPACNET1", holding the
// network configuration (including the seed), every factor matrix or dense
// kernel, and the FC weights. Doubles are written shortest-round-trip so a
// save/load cycle is bit-exact.

inline constexpr const char* kCheckpointMagic = "CPACNET1";

void save_checkpoint(const Network& net, const std::string& path);
Network load_checkpoint(const std::string& path);
void write_checkpoint(const Network& net, std::ostream& out);
Network read_checkpoint(std::istream& in, const std::string& source = "<checkpoint>");

// ---------------------------------------------------------------------------
// Standalone tensors ("CPACTENSOR1") and factor sets ("CPACFACTORS1").

void save_tensor(const Tensor<double>& t, const std::string& path);
Tensor<double> load_tensor(const std::string& path);
void save_factors(const CpFactors<double>& f, const std::string& path);
CpFactors<double> load_factors(const std::string& path);

}  // namespace cpac

#endif  // CPAC_IO_HPP
