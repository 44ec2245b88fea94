#ifndef CPAC_GRADCHECK_HPP
#define CPAC_GRADCHECK_HPP

#include "cpac/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace cpac {

/// Deliberate corruption of one Kronecker derivative matrix, for negative controls.
enum class Fault { none, kn, kx, ky, ks };

std::optional<Fault> parse_fault(const std::string& name);
std::string to_string(Fault fault);

/// One random instance: CPAC layer on an X x Y x S input, then FC to `classes`, then softmax loss.
struct GradcheckCase {
  Index x = 4;
  Index y = 4;
  Index s = 1;
  Index n = 1;
  Index d = 3;
  Index rank = 1;
  Index classes = 3;

  std::string label() const;
};

inline constexpr double kGradcheckTolerance = 1e-6;
inline constexpr double kPathTolerance = 1e-10;

/// Block names: KN, KX, KY, KS, input, fc_w, fc_b, logits.
struct GradcheckResult {
  GradcheckCase config;
  std::vector<std::pair<std::string, double>> fd;    // analytic (Kronecker path) vs central difference
  std::vector<std::pair<std::string, double>> fast;  // fast path vs Kronecker path, factor blocks only
  bool shapes_ok = true;  // derivative matrices are (params) x (P N)

  double max_fd() const;
  double max_fast() const;
  bool passed() const;
  /// Names of the blocks that exceed their tolerance.
  std::vector<std::string> failures() const;
};

/// 18 configurations covering d, S, N in {1,2,3} x {1,2,3} x {1,4,8}, R in {1,2,4}, inputs up to 7x7.
std::vector<GradcheckCase> gradcheck_grid();

/**
 * Relative errors are norm-wise per block, ||a - n|| / max(||a||, ||n||, 1e-8),
 * with central differences at step 1e-5.
 */
GradcheckResult run_gradcheck(const GradcheckCase& c, std::uint64_t seed, Fault fault = Fault::none);

}  // namespace cpac

#endif  // CPAC_GRADCHECK_HPP
