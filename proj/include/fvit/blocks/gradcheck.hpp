#pragma once

// Central finite-difference checks of the analytic gradients, in double
// precision. Each suite reports its worst relative error
//   |analytic - numeric|_inf / max(|analytic|_inf, |numeric|_inf, floor)
// measured per parameter tensor, and where it occurred.

#include <cstdint>
#include <string>

#include "fvit/gabor/gabor.hpp"

namespace fvit::blocks {

struct GradCheckReport {
  std::string suite;
  std::size_t trials = 0;
  std::size_t checked = 0;  // parameter tensors compared
  double max_rel_error = 0;
  double tolerance = 0;
  std::string worst;  // "param=<name> trial=<t> ... coord=<...>"

  bool passed() const { return max_rel_error < tolerance; }
};

struct GradCheckOptions {
  std::size_t trials = 200;
  std::uint64_t seed = 0;
  double step = 1e-6;
  gabor::LambdaGradForm form = gabor::LambdaGradForm::kCorrect;
};

inline constexpr double kKernelGradTolerance = 1e-6;
inline constexpr double kLgfGradTolerance = 1e-4;
inline constexpr double kBlockGradTolerance = 1e-3;

/// All five dK/dparam tensors against differences of build_kernel, for
/// random k in {3, 5, 7} and random parameters.
GradCheckReport check_kernel_grads(const GradCheckOptions& opt);

/// Gabor parameter gradients of a scalar loss through one LGF layer.
GradCheckReport check_lgf_grads(const GradCheckOptions& opt);

/// Every parameter of a full BFV block (drop-path 0).
GradCheckReport check_block_grads(const GradCheckOptions& opt);

}  // namespace fvit::blocks
