#include "fvit/gabor/gabor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "fvit/core/errors.hpp"
#include "fvit/core/rng.hpp"

namespace fvit::gabor {

template <typename T>
bool GaborParams<T>::valid() const {
  const bool finite = std::isfinite(lambda) && std::isfinite(theta) && std::isfinite(psi) && std::isfinite(gamma) &&
                      std::isfinite(sigma);
  return finite && lambda > 0 && gamma > 0 && sigma > 0;
}

KernelGrid::KernelGrid(int k) : k_(k) {
  if (k < 1 || k % 2 == 0) throw ParameterError("Gabor kernel size must be odd and >= 1, got " + std::to_string(k));
}

std::vector<std::pair<int, int>> KernelGrid::coords() const {
  std::vector<std::pair<int, int>> out;
  out.reserve(static_cast<std::size_t>(k_ * k_));
  for (int i = 0; i < k_; ++i) {
    for (int j = 0; j < k_; ++j) out.emplace_back(x_of(j), y_of(i));
  }
  return out;
}

template <typename T>
T gabor_real(T x, T y, const GaborParams<T>& p) {
  const T c = std::cos(p.theta);
  const T s = std::sin(p.theta);
  const T xr = x * c + y * s;
  const T yr = -x * s + y * c;
  const T envelope = std::exp(-(xr * xr + p.gamma * p.gamma * yr * yr) / (T(2) * p.sigma * p.sigma));
  return envelope * std::cos(T(2) * std::numbers::pi_v<T> * xr / p.lambda + p.psi);
}

namespace {

template <typename T>
void check_params(const GaborParams<T>& p) {
  if (!p.valid()) {
    throw ParameterError("Gabor parameters must be finite with lambda, gamma, sigma > 0");
  }
}

}  // namespace

template <typename T>
Tensor<T> build_kernel(int k, const GaborParams<T>& p) {
  const KernelGrid grid(k);
  check_params(p);
  const auto uk = static_cast<std::size_t>(k);
  Tensor<T> out({uk, uk});
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      out[static_cast<std::size_t>(i * k + j)] = gabor_real(T(grid.x_of(j)), T(grid.y_of(i)), p);
    }
  }
  return out;
}

template <typename T>
KernelGrads<T> kernel_param_grads(int k, const GaborParams<T>& p, LambdaGradForm form) {
  const KernelGrid grid(k);
  check_params(p);
  const auto uk = static_cast<std::size_t>(k);
  KernelGrads<T> g;
  for (auto& t : g.d) t = Tensor<T>({uk, uk});
  const T two_pi = T(2) * std::numbers::pi_v<T>;
  const T cs = std::cos(p.theta);
  const T sn = std::sin(p.theta);
  const T inv_s2 = T(1) / (p.sigma * p.sigma);
  const T g2 = p.gamma * p.gamma;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      const T x = T(grid.x_of(j));
      const T y = T(grid.y_of(i));
      const T xr = x * cs + y * sn;
      const T yr = -x * sn + y * cs;
      const T q = xr * xr + g2 * yr * yr;
      const T env = std::exp(-q * inv_s2 / T(2));
      const T phase = two_pi * xr / p.lambda + p.psi;
      const T c = std::cos(phase);
      const T s = std::sin(phase);
      const auto idx = static_cast<std::size_t>(i * k + j);

      T env_lambda = env;
      if (form == LambdaGradForm::kEnvelopeUsesLambda) {
        env_lambda = std::exp(-(xr * xr + p.lambda * p.lambda * yr * yr) * inv_s2 / T(2));
      }
      g[GaborParam::kLambda][idx] = env_lambda * s * two_pi * xr / (p.lambda * p.lambda);
      // dx'/dtheta = y', dy'/dtheta = -x'
      g[GaborParam::kTheta][idx] = -env * (c * xr * yr * (T(1) - g2) * inv_s2 + s * two_pi * yr / p.lambda);
      g[GaborParam::kPsi][idx] = -env * s;
      g[GaborParam::kGamma][idx] = -env * c * p.gamma * yr * yr * inv_s2;
      g[GaborParam::kSigma][idx] = env * c * q * inv_s2 / p.sigma;
    }
  }
  return g;
}

std::vector<GaborParams<double>> init_gabor_bank(int num_kernels, int k, std::uint64_t seed) {
  if (num_kernels < 1) throw ParameterError("init_gabor_bank: num_kernels must be >= 1");
  KernelGrid check(k);
  Rng rng(seed);
  const double lo = std::log(std::min(2.0, double(k)));
  const double hi = std::log(std::max(2.0, double(k)));
  std::vector<GaborParams<double>> bank(static_cast<std::size_t>(num_kernels));
  for (int i = 0; i < num_kernels; ++i) {
    auto& p = bank[static_cast<std::size_t>(i)];
    p.theta = std::numbers::pi * i / num_kernels;
    p.lambda = std::clamp(std::exp(rng.uniform(lo, hi)), std::exp(lo), std::exp(hi));
    p.sigma = kSigmaPerLambda * p.lambda;
    p.gamma = 0.5;
    p.psi = 0.0;
  }
  return bank;
}

template <typename T>
T softplus(T raw) {
  return raw > T(20) ? raw + std::log1p(std::exp(-raw)) : std::log1p(std::exp(raw));
}

template <typename T>
T softplus_inverse(T value) {
  if (!(value > T(0))) throw ParameterError("softplus_inverse: value must be > 0");
  return value > T(20) ? value + std::log(-std::expm1(-value)) : std::log(std::expm1(value));
}

template <typename T>
T sigmoid(T raw) {
  if (raw >= T(0)) return T(1) / (T(1) + std::exp(-raw));
  const T e = std::exp(raw);
  return e / (T(1) + e);
}

#define FVIT_INSTANTIATE_GABOR(T)                                                              \
  template struct GaborParams<T>;                                                              \
  template T gabor_real(T, T, const GaborParams<T>&);                                          \
  template Tensor<T> build_kernel(int, const GaborParams<T>&);                                 \
  template KernelGrads<T> kernel_param_grads(int, const GaborParams<T>&, LambdaGradForm);      \
  template T softplus(T);                                                                      \
  template T softplus_inverse(T);                                                              \
  template T sigmoid(T);

FVIT_INSTANTIATE_GABOR(float)
FVIT_INSTANTIATE_GABOR(double)

}  // namespace fvit::gabor
