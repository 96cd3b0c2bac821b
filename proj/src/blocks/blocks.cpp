#include "fvit/blocks/blocks.hpp"

#include <cmath>
#include <string>

namespace fvit::blocks {

using gabor::GaborParam;

template <typename T>
Tensor<T> drop_path(const Tensor<T>& branch, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ParameterError("drop_path: rate must lie in [0, 1]");
  if (!training || rate == 0.0) return branch;
  const std::size_t n = branch.dim(0);
  const std::size_t per = branch.numel() / n;
  Tensor<T> out = branch;
  for (std::size_t b = 0; b < n; ++b) {
    const bool keep = rate < 1.0 && !rng.bernoulli(rate);
    const T m = keep ? static_cast<T>(1.0 / (1.0 - rate)) : T(0);
    T* p = out.ptr() + b * per;
    for (std::size_t i = 0; i < per; ++i) p[i] *= m;
  }
  return out;
}

template <typename T>
Var<T> drop_path(GradTape<T>& tape, const Var<T>& branch, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ParameterError("drop_path: rate must lie in [0, 1]");
  if (!training || rate == 0.0) return branch;
  const std::size_t n = branch.shape()[0];
  std::vector<T> mask(n);
  for (auto& m : mask) {
    const bool keep = rate < 1.0 && !rng.bernoulli(rate);
    m = keep ? static_cast<T>(1.0 / (1.0 - rate)) : T(0);
  }
  return ad::scale_samples(tape, branch, std::move(mask));
}

template <typename T>
Tensor<T> init_spatial_conv(Shape shape, std::size_t groups, Rng& rng) {
  // normal(0, sqrt(2 / fan_out)), fan_out = k_h * k_w * out / groups
  const double fan_out = static_cast<double>(shape[2] * shape[3] * shape[0]) / static_cast<double>(groups);
  const double std = std::sqrt(2.0 / fan_out);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal() * std);
  return t;
}

template <typename T>
Tensor<T> init_pointwise(Shape shape, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(0.02));
  return t;
}

// ---------------------------------------------------------------- CPE

template <typename T>
Cpe<T>::Cpe(ParameterRegistry<T>& reg, const Scope& scope, std::size_t channels, Rng& rng) {
  weight = reg.add(scope("weight"), init_spatial_conv<T>({channels, 1, 3, 3}, channels, rng), true);
  bias = reg.add(scope("bias"), Tensor<T>({channels}), false);
}

template <typename T>
Var<T> Cpe<T>::forward(GradTape<T>& tape, const Var<T>& x) const {
  const std::size_t c = weight.shape()[0];
  Var<T> pos = ad::conv2d(tape, x, weight, bias, ConvGeometry{1, 1, c});
  return ad::add(tape, x, pos);
}

template <typename T>
std::uint64_t Cpe<T>::macs(std::size_t channels, std::size_t hw) {
  return static_cast<std::uint64_t>(channels) * 9 * hw;
}

// ---------------------------------------------------------------- LGF

template <typename T>
Var<T> gabor_kernel_bank(GradTape<T>& tape, const Var<T>& lambda_raw, const Var<T>& theta, const Var<T>& psi,
                         const Var<T>& gamma_raw, const Var<T>& sigma_raw, int k, gabor::LambdaGradForm form) {
  const std::size_t c = lambda_raw.value().numel();
  for (const Var<T>* v : {&theta, &psi, &gamma_raw, &sigma_raw}) {
    if (v->value().numel() != c) throw DimensionError("gabor_kernel_bank: parameter vectors differ in length");
  }
  const auto kk = static_cast<std::size_t>(k) * static_cast<std::size_t>(k);
  auto params_of = [=](std::size_t ch) {
    gabor::GaborParams<T> p;
    p.lambda = gabor::softplus(lambda_raw.value()[ch]);
    p.theta = theta.value()[ch];
    p.psi = psi.value()[ch];
    p.gamma = gabor::softplus(gamma_raw.value()[ch]);
    p.sigma = gabor::softplus(sigma_raw.value()[ch]);
    return p;
  };
  Tensor<T> bank({c, 1, static_cast<std::size_t>(k), static_cast<std::size_t>(k)});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const auto p = params_of(ch);
    // Trained parameters that blew up are a numeric failure, not a caller error.
    if (!(std::isfinite(p.lambda) && std::isfinite(p.theta) && std::isfinite(p.psi) && std::isfinite(p.gamma) &&
          std::isfinite(p.sigma) && p.lambda > 0 && p.gamma > 0 && p.sigma > 0)) {
      throw NumericError("Gabor parameters of channel " + std::to_string(ch) + " are no longer finite and positive");
    }
    const Tensor<T> kernel = gabor::build_kernel(k, p);
    std::copy_n(kernel.ptr(), kk, bank.ptr() + ch * kk);
  }
  return tape.record(
      {lambda_raw, theta, psi, gamma_raw, sigma_raw}, std::move(bank),
      [=](const Tensor<T>& g) mutable {
        std::array<Tensor<T>, 5> out;
        for (auto& t : out) t = Tensor<T>({c});
        for (std::size_t ch = 0; ch < c; ++ch) {
          const auto p = params_of(ch);
          const auto grads = gabor::kernel_param_grads(k, p, form);
          const T* gk = g.ptr() + ch * kk;
          for (int which = 0; which < 5; ++which) {
            const Tensor<T>& dk = grads.d[static_cast<std::size_t>(which)];
            T acc = 0;
            for (std::size_t i = 0; i < kk; ++i) acc += gk[i] * dk[i];
            out[static_cast<std::size_t>(which)][ch] = acc;
          }
          // chain through softplus for the positive parameters
          out[static_cast<int>(GaborParam::kLambda)][ch] *= gabor::sigmoid(lambda_raw.value()[ch]);
          out[static_cast<int>(GaborParam::kGamma)][ch] *= gabor::sigmoid(gamma_raw.value()[ch]);
          out[static_cast<int>(GaborParam::kSigma)][ch] *= gabor::sigmoid(sigma_raw.value()[ch]);
        }
        const Var<T>* targets[5] = {&lambda_raw, &theta, &psi, &gamma_raw, &sigma_raw};
        for (int which = 0; which < 5; ++which) {
          if (targets[which]->requires_grad()) targets[which]->accumulate_grad(out[static_cast<std::size_t>(which)]);
        }
      });
}

template <typename T>
LgfLayer<T>::LgfLayer(ParameterRegistry<T>& reg, const Scope& scope, std::size_t channels, int kernel_size, Rng& rng)
    : channels_(channels), kernel_size_(kernel_size) {
  gabor::KernelGrid check(kernel_size);
  const auto bank = gabor::init_gabor_bank(static_cast<int>(channels), kernel_size, rng.next_u64());
  Tensor<T> lam({channels}), th({channels}), ps({channels}), ga({channels}), si({channels});
  for (std::size_t c = 0; c < channels; ++c) {
    lam[c] = static_cast<T>(gabor::softplus_inverse(bank[c].lambda));
    th[c] = static_cast<T>(bank[c].theta);
    ps[c] = static_cast<T>(bank[c].psi);
    ga[c] = static_cast<T>(gabor::softplus_inverse(bank[c].gamma));
    si[c] = static_cast<T>(gabor::softplus_inverse(bank[c].sigma));
  }
  lambda_raw = reg.add(scope("lambda"), std::move(lam), false);
  theta = reg.add(scope("theta"), std::move(th), false);
  psi = reg.add(scope("psi"), std::move(ps), false);
  gamma_raw = reg.add(scope("gamma"), std::move(ga), false);
  sigma_raw = reg.add(scope("sigma"), std::move(si), false);
  mix_weight = reg.add(scope("mix.weight"), init_pointwise<T>({channels, channels, 1, 1}, rng), true);
  mix_bias = reg.add(scope("mix.bias"), Tensor<T>({channels}), false);
}

template <typename T>
Var<T> LgfLayer<T>::forward(GradTape<T>& tape, const Var<T>& x) const {
  if (x.shape().size() != 4 || x.shape()[1] != channels_) {
    throw DimensionError("lgf_forward: input channels (axis C) " +
                         (x.shape().size() > 1 ? std::to_string(x.shape()[1]) : std::string("?")) +
                         " do not match layer width " + std::to_string(channels_));
  }
  Var<T> bank = gabor_kernel_bank(tape, lambda_raw, theta, psi, gamma_raw, sigma_raw, kernel_size_, grad_form);
  const auto pad = static_cast<std::size_t>(padding());
  Var<T> filtered = ad::conv2d(tape, x, bank, Var<T>{}, ConvGeometry{1, pad, channels_});
  return ad::conv2d(tape, filtered, mix_weight, mix_bias, ConvGeometry{});
}

template <typename T>
gabor::GaborParams<T> LgfLayer<T>::params(std::size_t c) const {
  gabor::GaborParams<T> p;
  p.lambda = gabor::softplus(lambda_raw.value()[c]);
  p.theta = theta.value()[c];
  p.psi = psi.value()[c];
  p.gamma = gabor::softplus(gamma_raw.value()[c]);
  p.sigma = gabor::softplus(sigma_raw.value()[c]);
  return p;
}

template <typename T>
void LgfLayer<T>::set_params(std::size_t c, const gabor::GaborParams<T>& p) {
  if (!p.valid()) throw ParameterError("LgfLayer::set_params: invalid Gabor parameters");
  Var<T> lr = lambda_raw, th = theta, ps = psi, gr = gamma_raw, sr = sigma_raw;
  lr.mutable_value()[c] = gabor::softplus_inverse(p.lambda);
  th.mutable_value()[c] = p.theta;
  ps.mutable_value()[c] = p.psi;
  gr.mutable_value()[c] = gabor::softplus_inverse(p.gamma);
  sr.mutable_value()[c] = gabor::softplus_inverse(p.sigma);
}

template <typename T>
Tensor<T> LgfLayer<T>::kernels() const {
  GradTape<T> off(false);
  return gabor_kernel_bank(off, lambda_raw, theta, psi, gamma_raw, sigma_raw, kernel_size_).value();
}

template <typename T>
std::uint64_t LgfLayer<T>::macs(std::size_t channels, int k, std::size_t hw) {
  const auto c = static_cast<std::uint64_t>(channels);
  return c * static_cast<std::uint64_t>(k * k) * hw + c * c * hw;
}

template <typename T>
std::uint64_t LgfLayer<T>::generation_ops(std::size_t channels, int k) {
  constexpr std::uint64_t kOpsPerEvaluation = 20;
  return kOpsPerEvaluation * static_cast<std::uint64_t>(k * k) * channels;
}

// ---------------------------------------------------------------- DPFFN

std::size_t dpffn_hidden(std::size_t channels, double ratio) {
  const auto h = static_cast<std::size_t>(std::llround(static_cast<double>(channels) * ratio / 4.0));
  return h < 1 ? 1 : h;
}

template <typename T>
Dpffn<T>::Dpffn(ParameterRegistry<T>& reg, const Scope& scope, std::size_t channels, double ratio, Rng& rng)
    : channels_(channels), hidden_(dpffn_hidden(channels, ratio)) {
  if (channels % 2 != 0) {
    throw ConfigError("DPFFN requires an even channel count, got " + std::to_string(channels));
  }
  if (!(ratio > 0.0)) throw ConfigError("DPFFN expansion ratio must be > 0");
  const std::size_t half = channels / 2;
  const std::size_t h = hidden_;
  expand1_w = reg.add(scope("expand1.weight"), init_pointwise<T>({h, half, 1, 1}, rng), true);
  expand1_b = reg.add(scope("expand1.bias"), Tensor<T>({h}), false);
  expand2_w = reg.add(scope("expand2.weight"), init_pointwise<T>({h, half, 1, 1}, rng), true);
  expand2_b = reg.add(scope("expand2.bias"), Tensor<T>({h}), false);
  dw1_w = reg.add(scope("dw1.weight"), init_spatial_conv<T>({h, 1, 3, 3}, h, rng), true);
  dw1_b = reg.add(scope("dw1.bias"), Tensor<T>({h}), false);
  dw2_w = reg.add(scope("dw2.weight"), init_spatial_conv<T>({h, 1, 3, 3}, h, rng), true);
  dw2_b = reg.add(scope("dw2.bias"), Tensor<T>({h}), false);
  cross_w = reg.add(scope("cross.weight"), init_pointwise<T>({h, h, 1, 1}, rng), true);
  cross_b = reg.add(scope("cross.bias"), Tensor<T>({h}), false);
  project_w = reg.add(scope("project.weight"), init_pointwise<T>({channels, 2 * h, 1, 1}, rng), true);
  project_b = reg.add(scope("project.bias"), Tensor<T>({channels}), false);
}

template <typename T>
Var<T> Dpffn<T>::forward(GradTape<T>& tape, const Var<T>& x) const {
  if (x.shape().size() != 4 || x.shape()[1] != channels_) {
    throw DimensionError("dpffn_forward: input channels do not match width " + std::to_string(channels_));
  }
  const std::size_t half = channels_ / 2;
  const ConvGeometry pw{};
  const ConvGeometry dw{1, 1, hidden_};
  Var<T> x1 = ad::slice_channels(tape, x, 0, half);
  Var<T> x2 = ad::slice_channels(tape, x, half, half);
  Var<T> u1 = ad::gelu(tape, ad::conv2d(tape, x1, expand1_w, expand1_b, pw));
  u1 = ad::gelu(tape, ad::conv2d(tape, u1, dw1_w, dw1_b, dw));
  Var<T> a2 = ad::add(tape, ad::conv2d(tape, x2, expand2_w, expand2_b, pw), ad::conv2d(tape, u1, cross_w, cross_b, pw));
  Var<T> u2 = ad::gelu(tape, a2);
  u2 = ad::gelu(tape, ad::conv2d(tape, u2, dw2_w, dw2_b, dw));
  return ad::conv2d(tape, ad::concat_channels(tape, u1, u2), project_w, project_b, pw);
}

template <typename T>
std::uint64_t Dpffn<T>::macs(std::size_t hw) const {
  const std::uint64_t c = channels_, h = hidden_;
  return (2 * (c / 2) * h + 2 * 9 * h + h * h + 2 * h * c) * hw;
}

template <typename T>
std::size_t Dpffn<T>::param_count(std::size_t channels, double ratio) {
  const std::size_t h = dpffn_hidden(channels, ratio);
  const std::size_t half = channels / 2;
  const std::size_t expand = 2 * (half * h + h);
  const std::size_t depthwise = 2 * (9 * h + h);
  const std::size_t cross = h * h + h;
  const std::size_t project = 2 * h * channels + channels;
  return expand + depthwise + cross + project;
}

// ---------------------------------------------------------------- plain FFN

template <typename T>
PlainFfn<T>::PlainFfn(ParameterRegistry<T>& reg, const Scope& scope, std::size_t channels, std::size_t hidden,
                      Rng& rng)
    : channels_(channels), hidden_(hidden) {
  if (hidden < 1) throw ConfigError("plain FFN hidden width must be >= 1");
  expand_w = reg.add(scope("expand.weight"), init_pointwise<T>({hidden, channels, 1, 1}, rng), true);
  expand_b = reg.add(scope("expand.bias"), Tensor<T>({hidden}), false);
  project_w = reg.add(scope("project.weight"), init_pointwise<T>({channels, hidden, 1, 1}, rng), true);
  project_b = reg.add(scope("project.bias"), Tensor<T>({channels}), false);
}

template <typename T>
Var<T> PlainFfn<T>::forward(GradTape<T>& tape, const Var<T>& x) const {
  Var<T> h = ad::gelu(tape, ad::conv2d(tape, x, expand_w, expand_b, ConvGeometry{}));
  return ad::conv2d(tape, h, project_w, project_b, ConvGeometry{});
}

template <typename T>
std::uint64_t PlainFfn<T>::macs(std::size_t hw) const {
  return 2 * static_cast<std::uint64_t>(channels_) * hidden_ * hw;
}

template <typename T>
std::size_t PlainFfn<T>::param_count(std::size_t channels, std::size_t hidden) {
  return 2 * channels * hidden + hidden + channels;
}

// ---------------------------------------------------------------- BFV

std::size_t plain_hidden_for(const BfvConfig& cfg) {
  return cfg.plain_hidden > 0 ? cfg.plain_hidden : 2 * dpffn_hidden(cfg.channels, cfg.ratio);
}

namespace {

template <typename T>
std::unique_ptr<FeedForward<T>> make_ffn(ParameterRegistry<T>& reg, const Scope& scope, const BfvConfig& cfg,
                                         Rng& rng) {
  if (cfg.ffn == FfnKind::kDualPath) return std::make_unique<Dpffn<T>>(reg, scope, cfg.channels, cfg.ratio, rng);
  return std::make_unique<PlainFfn<T>>(reg, scope, cfg.channels, plain_hidden_for(cfg), rng);
}

template <typename T>
void check_bfv(const BfvConfig& cfg) {
  // d = 1 (branches always dropped) is a test limit; model configs require d < 1.
  if (!(cfg.drop_path >= 0.0 && cfg.drop_path <= 1.0)) throw ConfigError("BFV drop-path rate must lie in [0, 1]");
  if (cfg.channels < 1) throw ConfigError("BFV block needs at least one channel");
}

}  // namespace

template <typename T>
BfvBlock<T>::BfvBlock(ParameterRegistry<T>& reg, const Scope& scope, const BfvConfig& cfg, Rng& rng)
    : cpe((check_bfv<T>(cfg), reg), scope.sub("cpe"), cfg.channels, rng),
      norm1_gamma(reg.add(scope("norm1.gamma"), Tensor<T>::ones({cfg.channels}), false)),
      norm1_beta(reg.add(scope("norm1.beta"), Tensor<T>({cfg.channels}), false)),
      lgf(reg, scope.sub("lgf"), cfg.channels, cfg.kernel_size, rng),
      norm2_gamma(reg.add(scope("norm2.gamma"), Tensor<T>::ones({cfg.channels}), false)),
      norm2_beta(reg.add(scope("norm2.beta"), Tensor<T>({cfg.channels}), false)),
      ffn(make_ffn<T>(reg, scope.sub("ffn"), cfg, rng)),
      cfg_(cfg) {}

template <typename T>
Var<T> BfvBlock<T>::forward(GradTape<T>& tape, const Var<T>& x, bool training, Rng& rng) const {
  const T eps = static_cast<T>(kNormEps);
  Var<T> xs = cpe.forward(tape, x);
  Var<T> mixed = lgf.forward(tape, ad::layer_norm(tape, xs, norm1_gamma, norm1_beta, eps));
  Var<T> y = ad::add(tape, xs, drop_path(tape, mixed, cfg_.drop_path, training, rng));
  Var<T> fed = ffn->forward(tape, ad::layer_norm(tape, y, norm2_gamma, norm2_beta, eps));
  return ad::add(tape, y, drop_path(tape, fed, cfg_.drop_path, training, rng));
}

template <typename T>
std::uint64_t BfvBlock<T>::macs(const BfvConfig& cfg, std::size_t hw) {
  std::uint64_t total = Cpe<T>::macs(cfg.channels, hw) + LgfLayer<T>::macs(cfg.channels, cfg.kernel_size, hw);
  const std::uint64_t c = cfg.channels;
  if (cfg.ffn == FfnKind::kDualPath) {
    const std::uint64_t h = dpffn_hidden(cfg.channels, cfg.ratio);
    total += (2 * (c / 2) * h + 2 * 9 * h + h * h + 2 * h * c) * hw;
  } else {
    total += 2 * c * plain_hidden_for(cfg) * hw;
  }
  return total;
}

template <typename T>
std::uint64_t BfvBlock<T>::generation_ops(const BfvConfig& cfg) {
  return LgfLayer<T>::generation_ops(cfg.channels, cfg.kernel_size);
}

#define FVIT_INSTANTIATE_BLOCKS(T)                                                                      \
  template Tensor<T> drop_path(const Tensor<T>&, double, bool, Rng&);                                   \
  template Var<T> drop_path(GradTape<T>&, const Var<T>&, double, bool, Rng&);                           \
  template Tensor<T> init_spatial_conv(Shape, std::size_t, Rng&);                                       \
  template Tensor<T> init_pointwise(Shape, Rng&);                                                       \
  template Var<T> gabor_kernel_bank(GradTape<T>&, const Var<T>&, const Var<T>&, const Var<T>&,          \
                                    const Var<T>&, const Var<T>&, int, gabor::LambdaGradForm);          \
  template class Cpe<T>;                                                                                \
  template class LgfLayer<T>;                                                                           \
  template class Dpffn<T>;                                                                              \
  template class PlainFfn<T>;                                                                           \
  template class BfvBlock<T>;

FVIT_INSTANTIATE_BLOCKS(float)
FVIT_INSTANTIATE_BLOCKS(double)

}  // namespace fvit::blocks
