#pragma once

// `fvit <command> [flags]` — train, eval, gradcheck, count, ablate,
// export-kernels. Exit codes: 0 ok, 1 check failed, 2 usage/input error,
// 3 numeric abort.

#include <iosfwd>
#include <string>
#include <vector>

#include "fvit/core/tensor.hpp"
#include "fvit/model/model.hpp"

namespace fvit::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kNumeric = 3 };

/// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Reads `key = value` lines and returns the matching `--key value` flags
/// that are not already present in `args` (command-line flags win).
std::vector<std::string> config_flags(const std::string& path, const std::vector<std::string>& args);

/// Binary PGM (P5, maxval 255) of one kernel, min-max scaled; a kernel whose
/// range is below 1e-12 exports as flat 128.
std::string kernel_pgm(const Tensor<double>& kernel);

/// PlainFfn width whose parameter count is closest to a DPFFN of (C, r).
std::size_t matched_plain_hidden(std::size_t channels, double ratio);

/// Copy of `cfg` with plain feed-forwards; `equal_params` sizes their width
/// to match the DPFFN parameter count instead of its expansion.
model::ModelConfig plain_control(const model::ModelConfig& cfg, bool equal_params);

}  // namespace fvit::cli
