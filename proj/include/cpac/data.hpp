#ifndef CPAC_DATA_HPP
#define CPAC_DATA_HPP

#include "cpac/tensor.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cpac {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/**
 * Labelled images sharing one X x Y x S shape. Column i of `pixels` is image
 * i in tensor (column-major) layout; intensities are in [0, 1].
 */
struct Dataset {
  Index x = 0;
  Index y = 0;
  Index s = 1;
  Index classes = 0;
  Matrix<double> pixels;
  std::vector<int> labels;
  std::string split;       // "train" or "test"
  std::string provenance;  // source files + hashes, or generator seed

  Index size() const { return static_cast<Index>(labels.size()); }
  bool empty() const { return labels.empty(); }
  Tensor<double> image(Index i) const;
  void validate() const;
};

/**
 * Reads an IDX image file (magic 2051) and label file (magic 2049). IDX rows
 * map to x and columns to y; bytes are scaled by 1/255. The class count is
 * max(label) + 1, and at least 10 for files that look like MNIST digits.
 */
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& split = "train");

/// Writes pixels quantized to bytes (round(255 v), clamped) and labels.
void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

/// SHA-256 of a file as lowercase hex, recorded in provenance.
std::string file_sha256(const std::string& path);

/**
 * Deterministic toy classification set: each class is a distinct shape
 * (bars, cross, blob, diagonal, frame) with positional jitter, intensity
 * variation and additive noise.
 */
Dataset synthetic_shapes(std::uint64_t seed, Index count, Index x, Index y, Index classes,
                         const std::string& split = "train");

/**
 * Seeded, class-stratified sample of `n` images (largest-remainder
 * allocation per class, then shuffled).
 */
Dataset subset(const Dataset& ds, Index n, std::uint64_t seed);

/// Seeded permutation of [0, count) cut into batches; the last one may be short.
std::vector<std::vector<Index>> batches(Index count, Index batch_size, std::uint64_t seed);

}  // namespace cpac

#endif  // CPAC_DATA_HPP
