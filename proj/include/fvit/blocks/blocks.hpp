#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <vector>

#include "fvit/core/autograd.hpp"
#include "fvit/core/parameters.hpp"
#include "fvit/core/rng.hpp"
#include "fvit/gabor/gabor.hpp"

namespace fvit::blocks {

inline constexpr double kNormEps = 1e-5;

/// Per-sample stochastic depth. Training: each sample's branch is zeroed
/// with probability `rate` and otherwise scaled by 1/(1-rate); rate == 1
/// zeroes everything. Eval: identity.
template <typename T>
Tensor<T> drop_path(const Tensor<T>& branch, double rate, bool training, Rng& rng);

template <typename T>
Var<T> drop_path(GradTape<T>& tape, const Var<T>& branch, double rate, bool training, Rng& rng);

/// Conv weight initializers shared by the blocks and the model.
template <typename T>
Tensor<T> init_spatial_conv(Shape shape, std::size_t groups, Rng& rng);
template <typename T>
Tensor<T> init_pointwise(Shape shape, Rng& rng);

/// Residual 3x3 depthwise positional embedding: x + DW3x3(x).
template <typename T>
class Cpe {
 public:
  Cpe(ParameterRegistry<T>& reg, const Scope& scope, std::size_t channels, Rng& rng);
  Var<T> forward(GradTape<T>& tape, const Var<T>& x) const;
  static std::uint64_t macs(std::size_t channels, std::size_t hw);

  Var<T> weight;  // C x 1 x 3 x 3
  Var<T> bias;
};

/// Builds the C x 1 x k x k depthwise kernel bank from per-channel raw
/// Gabor parameters (lambda, gamma, sigma pass through softplus).
template <typename T>
Var<T> gabor_kernel_bank(GradTape<T>& tape, const Var<T>& lambda_raw, const Var<T>& theta, const Var<T>& psi,
                         const Var<T>& gamma_raw, const Var<T>& sigma_raw, int k,
                         gabor::LambdaGradForm form = gabor::LambdaGradForm::kCorrect);

/// Learnable Gabor filter token mixer: per-channel Gabor depthwise conv
/// (padding (k-1)/2) followed by a learned 1x1 channel mix.
template <typename T>
class LgfLayer {
 public:
  LgfLayer(ParameterRegistry<T>& reg, const Scope& scope, std::size_t channels, int kernel_size, Rng& rng);

  Var<T> forward(GradTape<T>& tape, const Var<T>& x) const;

  std::size_t channels() const { return channels_; }
  int kernel_size() const { return kernel_size_; }
  int padding() const { return (kernel_size_ - 1) / 2; }

  /// Constrained parameters of channel c.
  gabor::GaborParams<T> params(std::size_t c) const;
  void set_params(std::size_t c, const gabor::GaborParams<T>& p);
  /// Current C x 1 x k x k kernel bank.
  Tensor<T> kernels() const;

  static std::uint64_t macs(std::size_t channels, int k, std::size_t hw);
  /// Scalar ops spent regenerating the bank once (per forward pass).
  static std::uint64_t generation_ops(std::size_t channels, int k);

  Var<T> lambda_raw, theta, psi, gamma_raw, sigma_raw;  // each shape {C}
  Var<T> mix_weight;                                    // C x C x 1 x 1
  Var<T> mix_bias;
  gabor::LambdaGradForm grad_form = gabor::LambdaGradForm::kCorrect;

 private:
  std::size_t channels_;
  int kernel_size_;
};

template <typename T>
class FeedForward {
 public:
  virtual ~FeedForward() = default;
  virtual Var<T> forward(GradTape<T>& tape, const Var<T>& x) const = 0;
  virtual std::uint64_t macs(std::size_t hw) const = 0;
};

/// Per-path hidden width of the dual-path FFN.
std::size_t dpffn_hidden(std::size_t channels, double ratio);

/// Dual-path feed-forward network. Channels split into halves (x1, x2):
///   u1 = gelu(DW3x3(gelu(Expand1 x1)))
///   u2 = gelu(DW3x3(gelu(Expand2 x2 + Cross u1)))
///   out = Project(concat(u1, u2))
template <typename T>
class Dpffn final : public FeedForward<T> {
 public:
  Dpffn(ParameterRegistry<T>& reg, const Scope& scope, std::size_t channels, double ratio, Rng& rng);
  Var<T> forward(GradTape<T>& tape, const Var<T>& x) const override;
  std::uint64_t macs(std::size_t hw) const override;

  /// Closed-form scalar count of the six weight tensors plus biases.
  static std::size_t param_count(std::size_t channels, double ratio);

  std::size_t channels() const { return channels_; }
  std::size_t hidden() const { return hidden_; }

  Var<T> expand1_w, expand1_b, expand2_w, expand2_b;
  Var<T> dw1_w, dw1_b, dw2_w, dw2_b;
  Var<T> cross_w, cross_b;
  Var<T> project_w, project_b;

 private:
  std::size_t channels_;
  std::size_t hidden_;
};

/// Plain two-layer FFN (1x1 expand, GELU, 1x1 project); ablation control.
template <typename T>
class PlainFfn final : public FeedForward<T> {
 public:
  PlainFfn(ParameterRegistry<T>& reg, const Scope& scope, std::size_t channels, std::size_t hidden, Rng& rng);
  Var<T> forward(GradTape<T>& tape, const Var<T>& x) const override;
  std::uint64_t macs(std::size_t hw) const override;
  static std::size_t param_count(std::size_t channels, std::size_t hidden);

  Var<T> expand_w, expand_b, project_w, project_b;

 private:
  std::size_t channels_;
  std::size_t hidden_;
};

enum class FfnKind { kDualPath, kPlain };

struct BfvConfig {
  std::size_t channels = 0;
  int kernel_size = 7;
  double ratio = 3.0;
  double drop_path = 0.0;
  FfnKind ffn = FfnKind::kDualPath;
  std::size_t plain_hidden = 0;  // PlainFfn width; 0 = matched to the DPFFN total hidden width
};

/// Bionic focal vision block:
///   X = CPE(Xin) + Xin
///   Y = LGF(LN(X)) + X
///   Z = FFN(LN(Y)) + Y
/// with drop-path on the LGF and FFN branches.
template <typename T>
class BfvBlock {
 public:
  BfvBlock(ParameterRegistry<T>& reg, const Scope& scope, const BfvConfig& cfg, Rng& rng);
  Var<T> forward(GradTape<T>& tape, const Var<T>& x, bool training, Rng& rng) const;

  const BfvConfig& config() const { return cfg_; }
  static std::uint64_t macs(const BfvConfig& cfg, std::size_t hw);
  static std::uint64_t generation_ops(const BfvConfig& cfg);

  Cpe<T> cpe;
  Var<T> norm1_gamma, norm1_beta;
  LgfLayer<T> lgf;
  Var<T> norm2_gamma, norm2_beta;
  std::unique_ptr<FeedForward<T>> ffn;

 private:
  BfvConfig cfg_;
};

std::size_t plain_hidden_for(const BfvConfig& cfg);

}  // namespace fvit::blocks
