#include "fvit/blocks/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>

#include "fvit/blocks/blocks.hpp"
#include "fvit/core/errors.hpp"

namespace fvit::blocks {
namespace {

using gabor::GaborParams;
constexpr double kFloor = 1e-8;

GaborParams<double> random_params(Rng& rng, int k) {
  GaborParams<double> p;
  p.lambda = rng.uniform(2.0, 2.0 * k);
  p.theta = rng.uniform(-std::numbers::pi, std::numbers::pi);
  p.psi = rng.uniform(-std::numbers::pi, std::numbers::pi);
  p.gamma = rng.uniform(0.3, 1.5);
  p.sigma = rng.uniform(0.8, 4.0);
  return p;
}

int random_k(Rng& rng) { return 3 + 2 * static_cast<int>(rng.below(3)); }

Tensor<double> random_tensor(Shape shape, Rng& rng) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1.0, 1.0);
  return t;
}

// Relative error of one tensor and the index of its largest deviation.
std::pair<double, std::size_t> tensor_error(const Tensor<double>& analytic, const Tensor<double>& numeric) {
  double diff = 0, scale = kFloor;
  std::size_t at = 0;
  for (std::size_t i = 0; i < analytic.numel(); ++i) {
    const double d = std::abs(analytic[i] - numeric[i]);
    if (d > diff) {
      diff = d;
      at = i;
    }
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return {diff / scale, at};
}

void record(GradCheckReport& r, double err, std::string where) {
  ++r.checked;
  if (std::isnan(err)) err = INFINITY;  // NaN must surface as a failure
  if (r.worst.empty() || err > r.max_rel_error) {
    r.max_rel_error = err;
    r.worst = std::move(where);
  }
}

std::string coord_str(const Shape& shape, std::size_t flat) {
  std::vector<std::size_t> idx(shape.size());
  for (std::size_t d = shape.size(); d-- > 0;) {
    idx[d] = flat % shape[d];
    flat /= shape[d];
  }
  std::string s = "(";
  for (std::size_t d = 0; d < idx.size(); ++d) s += (d ? "," : "") + std::to_string(idx[d]);
  return s + ")";
}

// Checks every registry parameter of a scalar loss against central differences.
void check_registry(GradCheckReport& r, ParameterRegistry<double>& reg, const std::function<Var<double>(GradTape<double>&)>& loss,
                    double h, const std::string& prefix) {
  reg.zero_grad();
  GradTape<double> tape;
  tape.backward(loss(tape));
  for (auto& p : reg.params()) {
    Tensor<double>& w = p.var.mutable_value();
    Tensor<double> numeric(w.shape());
    for (std::size_t i = 0; i < w.numel(); ++i) {
      const double w0 = w[i];
      GradTape<double> off(false);
      w[i] = w0 + h;
      const double up = loss(off).value()[0];
      w[i] = w0 - h;
      const double down = loss(off).value()[0];
      w[i] = w0;
      numeric[i] = (up - down) / (2 * h);
    }
    const Tensor<double> analytic = p.var.grad().defined() ? p.var.grad() : Tensor<double>(w.shape());
    const auto [err, at] = tensor_error(analytic, numeric);
    record(r, err, "param=" + p.name + " " + prefix + " coord=" + coord_str(w.shape(), at));
  }
}

Var<double> probe_loss(GradTape<double>& tape, const Var<double>& out, const Tensor<double>& weights) {
  return ad::sum(tape, ad::mul(tape, out, Var<double>(weights)));
}

}  // namespace

GradCheckReport check_kernel_grads(const GradCheckOptions& opt) {
  if (opt.trials == 0) throw UsageError("gradcheck: trials must be >= 1");
  GradCheckReport r{"gabor-kernel", opt.trials, 0, 0, kKernelGradTolerance, {}};
  Rng rng(opt.seed);
  const double h = opt.step;
  for (std::size_t t = 0; t < opt.trials; ++t) {
    const int k = random_k(rng);
    const GaborParams<double> p = random_params(rng, k);
    const auto grads = gabor::kernel_param_grads(k, p, opt.form);
    for (int q = 0; q < 5; ++q) {
      GaborParams<double> up = p, down = p;
      double* fields_up[5] = {&up.lambda, &up.theta, &up.psi, &up.gamma, &up.sigma};
      double* fields_down[5] = {&down.lambda, &down.theta, &down.psi, &down.gamma, &down.sigma};
      *fields_up[q] += h;
      *fields_down[q] -= h;
      const Tensor<double> ku = gabor::build_kernel(k, up);
      const Tensor<double> kd = gabor::build_kernel(k, down);
      Tensor<double> numeric(ku.shape());
      for (std::size_t i = 0; i < numeric.numel(); ++i) numeric[i] = (ku[i] - kd[i]) / (2 * h);
      const auto [err, at] = tensor_error(grads.d[q], numeric);
      char buf[200];
      std::snprintf(buf, sizeof buf, "param=%s trial=%zu k=%d coord=%s lambda=%.4f gamma=%.4f",
                    gabor::kGaborParamNames[q], t, k, coord_str(ku.shape(), at).c_str(), p.lambda, p.gamma);
      record(r, err, buf);
    }
  }
  return r;
}

GradCheckReport check_lgf_grads(const GradCheckOptions& opt) {
  if (opt.trials == 0) throw UsageError("gradcheck: trials must be >= 1");
  const std::size_t trials = std::max<std::size_t>(1, opt.trials / 20);
  GradCheckReport r{"lgf-layer", trials, 0, 0, kLgfGradTolerance, {}};
  constexpr std::size_t C = 3;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng = Rng::derive(opt.seed, 1000 + t);
    const int k = random_k(rng);
    ParameterRegistry<double> reg;
    LgfLayer<double> lgf(reg, Scope("lgf"), C, k, rng);
    lgf.grad_form = opt.form;
    for (std::size_t c = 0; c < C; ++c) lgf.set_params(c, random_params(rng, k));
    const Var<double> x(random_tensor({2, C, 6, 6}, rng));
    const Tensor<double> weights = random_tensor({2, C, 6, 6}, rng);
    check_registry(
        r, reg, [&](GradTape<double>& tape) { return probe_loss(tape, lgf.forward(tape, x), weights); }, opt.step,
        "trial=" + std::to_string(t) + " k=" + std::to_string(k));
  }
  return r;
}

GradCheckReport check_block_grads(const GradCheckOptions& opt) {
  if (opt.trials == 0) throw UsageError("gradcheck: trials must be >= 1");
  const std::size_t trials = std::max<std::size_t>(1, opt.trials / 20);
  GradCheckReport r{"bfv-block", trials, 0, 0, kBlockGradTolerance, {}};
  constexpr std::size_t C = 4;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng = Rng::derive(opt.seed, 2000 + t);
    BfvConfig cfg;
    cfg.channels = C;
    cfg.kernel_size = random_k(rng);
    cfg.ratio = 3.0;
    cfg.drop_path = 0.0;
    ParameterRegistry<double> reg;
    BfvBlock<double> block(reg, Scope("block"), cfg, rng);
    block.lgf.grad_form = opt.form;
    for (std::size_t c = 0; c < C; ++c) block.lgf.set_params(c, random_params(rng, cfg.kernel_size));
    const Var<double> x(random_tensor({2, C, 5, 5}, rng));
    const Tensor<double> weights = random_tensor({2, C, 5, 5}, rng);
    Rng unused(0);
    check_registry(
        r, reg,
        [&](GradTape<double>& tape) { return probe_loss(tape, block.forward(tape, x, false, unused), weights); },
        opt.step, "trial=" + std::to_string(t) + " k=" + std::to_string(cfg.kernel_size));
  }
  return r;
}

}  // namespace fvit::blocks
