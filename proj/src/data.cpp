#include "cpac/data.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <sstream>

namespace cpac {

Tensor<double> Dataset::image(Index i) const {
  if (i < 0 || i >= size()) throw std::out_of_range("image index " + std::to_string(i) + " out of range");
  return Tensor<double>({x, y, s}, pixels.col(i));
}

void Dataset::validate() const {
  if (pixels.cols() != size())
    throw DataError("dataset has " + std::to_string(pixels.cols()) + " images but " +
                    std::to_string(size()) + " labels");
  if (pixels.rows() != x * y * s) throw DataError("dataset pixel rows do not match image shape");
  for (int label : labels)
    if (label < 0 || label >= classes)
      throw DataError("label " + std::to_string(label) + " outside [0, " + std::to_string(classes) + ")");
}

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw DataError(path + ": truncated IDX header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

void put32(std::ofstream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                         static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(bytes, 4);
}

constexpr std::uint32_t kImageMagic = 2051;
constexpr std::uint32_t kLabelMagic = 2049;

}  // namespace

std::string file_sha256(const std::string& path) {
  const std::vector<unsigned char> bytes = read_file(path);
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw DataError("sha256 failed for " + path);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path, const std::string& split) {
  const std::vector<unsigned char> img = read_file(images_path);
  const std::vector<unsigned char> lab = read_file(labels_path);

  if (be32(img, 0, images_path) != kImageMagic)
    throw DataError(images_path + ": bad magic " + std::to_string(be32(img, 0, images_path)) +
                    " (expected 2051)");
  if (be32(lab, 0, labels_path) != kLabelMagic)
    throw DataError(labels_path + ": bad magic " + std::to_string(be32(lab, 0, labels_path)) +
                    " (expected 2049)");
  const std::size_t count = be32(img, 4, images_path);
  const std::size_t rows = be32(img, 8, images_path);
  const std::size_t cols = be32(img, 12, images_path);
  const std::size_t label_count = be32(lab, 4, labels_path);
  if (rows == 0 || cols == 0) throw DataError(images_path + ": zero image extent");
  if (img.size() < 16 + count * rows * cols)
    throw DataError(images_path + ": truncated, expected " + std::to_string(count) + " images of " +
                    std::to_string(rows) + "x" + std::to_string(cols));
  if (lab.size() < 8 + label_count) throw DataError(labels_path + ": truncated label data");
  if (count != label_count)
    throw DataError("count mismatch: " + images_path + " has " + std::to_string(count) + " images, " +
                    labels_path + " has " + std::to_string(label_count) + " labels");

  Dataset ds;
  ds.x = static_cast<Index>(rows);
  ds.y = static_cast<Index>(cols);
  ds.s = 1;
  ds.split = split;
  ds.pixels.resize(ds.x * ds.y, static_cast<Index>(count));
  ds.labels.resize(count);
  int top = 0;
  for (std::size_t k = 0; k < count; ++k) {
    const unsigned char* src = img.data() + 16 + k * rows * cols;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        ds.pixels(static_cast<Index>(r + rows * c), static_cast<Index>(k)) = src[r * cols + c] / 255.0;
    ds.labels[k] = lab[8 + k];
    top = std::max(top, ds.labels[k]);
  }
  ds.classes = top + 1;
  if (rows == 28 && cols == 28) ds.classes = std::max<Index>(ds.classes, 10);
  ds.provenance = "idx:" + images_path + "@sha256=" + file_sha256(images_path) + ";" + labels_path +
                  "@sha256=" + file_sha256(labels_path);
  return ds;
}

void write_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
  ds.validate();
  if (ds.s != 1) throw DataError("IDX export supports single-channel images only");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img) throw DataError("cannot write " + images_path);
  if (!lab) throw DataError("cannot write " + labels_path);
  put32(img, kImageMagic);
  put32(img, static_cast<std::uint32_t>(ds.size()));
  put32(img, static_cast<std::uint32_t>(ds.x));
  put32(img, static_cast<std::uint32_t>(ds.y));
  for (Index k = 0; k < ds.size(); ++k)
    for (Index r = 0; r < ds.x; ++r)
      for (Index c = 0; c < ds.y; ++c) {
        const double v = std::clamp(std::round(ds.pixels(r + ds.x * c, k) * 255.0), 0.0, 255.0);
        img.put(static_cast<char>(static_cast<unsigned char>(v)));
      }
  put32(lab, kLabelMagic);
  put32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int label : ds.labels) lab.put(static_cast<char>(static_cast<unsigned char>(label)));
}

Dataset synthetic_shapes(std::uint64_t seed, Index count, Index x, Index y, Index classes, const std::string& split) {
  if (classes < 2) throw std::invalid_argument("synthetic_shapes needs at least two classes");
  if (x < 4 || y < 4) throw std::invalid_argument("synthetic_shapes needs images of at least 4x4");
  Dataset ds;
  ds.x = x;
  ds.y = y;
  ds.s = 1;
  ds.classes = classes;
  ds.split = split;
  ds.provenance = "synthetic_shapes:seed=" + std::to_string(seed) + ",count=" + std::to_string(count) +
                  ",size=" + std::to_string(x) + "x" + std::to_string(y) + ",classes=" + std::to_string(classes);
  ds.pixels = Matrix<double>::Zero(x * y, count);
  ds.labels.resize(static_cast<std::size_t>(count));

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> jitter(-1, 1);
  constexpr int kShapes = 6;
  for (Index k = 0; k < count; ++k) {
    const int label = static_cast<int>(k % classes);
    ds.labels[static_cast<std::size_t>(k)] = label;
    const int shape = label % kShapes;
    const int variant = label / kShapes;  // shifts the shape for classes beyond the first six
    const double cx = (x - 1) / 2.0 + jitter(rng) + variant * 2.0;
    const double cy = (y - 1) / 2.0 + jitter(rng) - variant * 2.0;
    const double half = std::min(x, y) / 3.0;
    const double intensity = 0.7 + 0.3 * unit(rng);
    auto col = ds.pixels.col(k);
    for (Index j = 0; j < y; ++j)
      for (Index i = 0; i < x; ++i) {
        const double dx = i - cx, dy = j - cy;
        bool on = false;
        switch (shape) {
          case 0: on = std::abs(dx) <= 1.0 && std::abs(dy) <= half; break;                       // bar along y
          case 1: on = std::abs(dy) <= 1.0 && std::abs(dx) <= half; break;                       // bar along x
          case 2: on = (std::abs(dx) <= 0.5 || std::abs(dy) <= 0.5) && std::max(std::abs(dx), std::abs(dy)) <= half; break;
          case 3: on = dx * dx + dy * dy <= half * half * 0.5; break;                             // blob
          case 4: on = std::abs(dx - dy) <= 1.0 && std::abs(dx) <= half; break;                   // diagonal
          default: on = std::abs(std::max(std::abs(dx), std::abs(dy)) - half) <= 0.5; break;     // frame
        }
        const double noise = 0.15 * unit(rng);
        col[i + x * j] = std::clamp((on ? intensity : 0.0) + noise, 0.0, 1.0);
      }
  }
  // Interleaved labels are shuffled so that prefixes are not ordered by class.
  std::vector<Index> perm(static_cast<std::size_t>(count));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  Dataset out = ds;
  for (Index k = 0; k < count; ++k) {
    out.pixels.col(k) = ds.pixels.col(perm[static_cast<std::size_t>(k)]);
    out.labels[static_cast<std::size_t>(k)] = ds.labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])];
  }
  return out;
}

Dataset subset(const Dataset& ds, Index n, std::uint64_t seed) {
  if (n < 0 || n > ds.size())
    throw std::invalid_argument("subset of " + std::to_string(n) + " requested from " + std::to_string(ds.size()) +
                                " samples");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(std::max<Index>(ds.classes, 1)));
  for (Index k = 0; k < ds.size(); ++k) by_class[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(k)])].push_back(k);

  // Largest-remainder allocation of n across classes in proportion to their size.
  const std::size_t nc = by_class.size();
  std::vector<Index> take(nc, 0);
  std::vector<std::pair<double, std::size_t>> remainders;
  Index allocated = 0;
  for (std::size_t c = 0; c < nc; ++c) {
    const double exact = ds.size() ? static_cast<double>(n) * static_cast<double>(by_class[c].size()) / static_cast<double>(ds.size()) : 0.0;
    take[c] = static_cast<Index>(std::floor(exact));
    allocated += take[c];
    remainders.push_back({exact - std::floor(exact), c});
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; allocated < n && k < remainders.size(); ++k) {
    const std::size_t c = remainders[k].second;
    if (take[c] < static_cast<Index>(by_class[c].size())) {
      ++take[c];
      ++allocated;
    }
  }

  std::vector<Index> chosen;
  for (std::size_t c = 0; c < nc; ++c) {
    std::shuffle(by_class[c].begin(), by_class[c].end(), rng);
    chosen.insert(chosen.end(), by_class[c].begin(), by_class[c].begin() + take[c]);
  }
  std::shuffle(chosen.begin(), chosen.end(), rng);

  Dataset out;
  out.x = ds.x;
  out.y = ds.y;
  out.s = ds.s;
  out.classes = ds.classes;
  out.split = ds.split;
  out.provenance = ds.provenance + ";subset(n=" + std::to_string(n) + ",seed=" + std::to_string(seed) + ")";
  out.pixels.resize(ds.pixels.rows(), n);
  out.labels.resize(static_cast<std::size_t>(n));
  for (Index k = 0; k < n; ++k) {
    const Index src = chosen[static_cast<std::size_t>(k)];
    out.pixels.col(k) = ds.pixels.col(src);
    out.labels[static_cast<std::size_t>(k)] = ds.labels[static_cast<std::size_t>(src)];
  }
  return out;
}

std::vector<std::vector<Index>> batches(Index count, Index batch_size, std::uint64_t seed) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  std::vector<Index> perm(static_cast<std::size_t>(count));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<Index>> out;
  for (Index start = 0; start < count; start += batch_size) {
    const Index end = std::min(count, start + batch_size);
    out.emplace_back(perm.begin() + start, perm.begin() + end);
  }
  return out;
}

}  // namespace cpac
