#pragma once

// Real-part Gabor kernels on a centered integer grid, and their analytic
// derivatives with respect to the five generating parameters.
//
//   x' =  x cos(theta) + y sin(theta)
//   y' = -x sin(theta) + y cos(theta)
//   g  = exp(-(x'^2 + gamma^2 y'^2) / (2 sigma^2)) * cos(2 pi x' / lambda + psi)
//
// Grid convention: for an odd size k, row i holds y = i - (k-1)/2 (y grows
// downward) and column j holds x = j - (k-1)/2.

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "fvit/core/tensor.hpp"

namespace fvit::gabor {

template <typename T>
struct GaborParams {
  T lambda = 4;  // wavelength, pixels, > 0
  T theta = 0;   // orientation, radians
  T psi = 0;     // phase offset, radians
  T gamma = 1;   // aspect ratio, > 0
  T sigma = 2;   // envelope std-dev, pixels, > 0

  bool valid() const;
};

/// Centered offsets of an odd k x k kernel.
class KernelGrid {
 public:
  explicit KernelGrid(int k);
  int size() const { return k_; }
  int half() const { return (k_ - 1) / 2; }
  int x_of(int col) const { return col - half(); }
  int y_of(int row) const { return row - half(); }
  /// All k^2 (x, y) pairs in row-major kernel order.
  std::vector<std::pair<int, int>> coords() const;

 private:
  int k_;
};

template <typename T>
T gabor_real(T x, T y, const GaborParams<T>& p);

/// k x k kernel; throws ParameterError for even/non-positive k or invalid params.
template <typename T>
Tensor<T> build_kernel(int k, const GaborParams<T>& p);

/// Which derivative to use for d/d(lambda). kEnvelopeUsesLambda substitutes
/// lambda^2 for gamma^2 inside the envelope; it is wrong whenever
/// gamma != lambda and exists only to demonstrate that the gradient checker
/// catches it.
enum class LambdaGradForm { kCorrect, kEnvelopeUsesLambda };

enum class GaborParam : int { kLambda = 0, kTheta, kPsi, kGamma, kSigma };
inline constexpr std::array<const char*, 5> kGaborParamNames = {"lambda", "theta", "psi", "gamma", "sigma"};

template <typename T>
struct KernelGrads {
  std::array<Tensor<T>, 5> d;  // indexed by GaborParam
  Tensor<T>& operator[](GaborParam p) { return d[static_cast<int>(p)]; }
  const Tensor<T>& operator[](GaborParam p) const { return d[static_cast<int>(p)]; }
};

template <typename T>
KernelGrads<T> kernel_param_grads(int k, const GaborParams<T>& p, LambdaGradForm form = LambdaGradForm::kCorrect);

/// Deterministic filter bank: orientations evenly spaced over [0, pi),
/// wavelengths log-uniform in [2, k], sigma = 0.56 lambda, gamma = 0.5, psi = 0.
std::vector<GaborParams<double>> init_gabor_bank(int num_kernels, int k, std::uint64_t seed);

inline constexpr double kSigmaPerLambda = 0.56;

// Positivity reparameterization for lambda, gamma and sigma.
template <typename T>
T softplus(T raw);
template <typename T>
T softplus_inverse(T value);
/// d softplus / d raw.
template <typename T>
T sigmoid(T raw);

}  // namespace fvit::gabor
