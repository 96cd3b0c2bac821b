#include "fvit/core/autograd.hpp"

#include <memory>

namespace fvit::ad {

namespace {

template <typename T>
const Tensor<T>& value_or_empty(const Var<T>& v) {
  static const Tensor<T> empty;
  return v.defined() ? v.value() : empty;
}

}  // namespace

template <typename T>
Var<T> conv2d(GradTape<T>& tape, const Var<T>& input, const Var<T>& weight, const Var<T>& bias, ConvGeometry geom) {
  Tensor<T> out = fvit::conv2d(input.value(), weight.value(), value_or_empty(bias), geom);
  return tape.record({input, weight, bias}, std::move(out), [=](const Tensor<T>& g) mutable {
    auto grads = conv2d_backward(g, input.value(), weight.value(), bias.defined(), geom, input.requires_grad());
    if (input.requires_grad()) input.accumulate_grad(grads.input);
    if (weight.requires_grad()) weight.accumulate_grad(grads.weight);
    if (bias.requires_grad()) bias.accumulate_grad(grads.bias);
  });
}

template <typename T>
Var<T> layer_norm(GradTape<T>& tape, const Var<T>& input, const Var<T>& gamma, const Var<T>& beta, T eps) {
  auto cache = std::make_shared<LayerNormCache<T>>();
  Tensor<T> out = fvit::layer_norm(input.value(), gamma.value(), beta.value(), eps, cache.get());
  return tape.record({input, gamma, beta}, std::move(out), [=](const Tensor<T>& g) mutable {
    auto grads = layer_norm_backward(g, input.value(), gamma.value(), *cache);
    if (input.requires_grad()) input.accumulate_grad(grads.input);
    if (gamma.requires_grad()) gamma.accumulate_grad(grads.gamma);
    if (beta.requires_grad()) beta.accumulate_grad(grads.beta);
  });
}

template <typename T>
Var<T> linear(GradTape<T>& tape, const Var<T>& input, const Var<T>& weight, const Var<T>& bias) {
  Tensor<T> out = fvit::linear(input.value(), weight.value(), value_or_empty(bias));
  return tape.record({input, weight, bias}, std::move(out), [=](const Tensor<T>& g) mutable {
    auto grads = linear_backward(g, input.value(), weight.value(), bias.defined());
    if (input.requires_grad()) input.accumulate_grad(grads.input);
    if (weight.requires_grad()) weight.accumulate_grad(grads.weight);
    if (bias.requires_grad()) bias.accumulate_grad(grads.bias);
  });
}

template <typename T>
Var<T> gelu(GradTape<T>& tape, const Var<T>& input) {
  Tensor<T> out = fvit::gelu(input.value());
  return tape.record({input}, std::move(out), [=](const Tensor<T>& g) mutable {
    input.accumulate_grad(gelu_backward(g, input.value()));
  });
}

template <typename T>
Var<T> global_avg_pool(GradTape<T>& tape, const Var<T>& input) {
  Tensor<T> out = fvit::global_avg_pool(input.value());
  return tape.record({input}, std::move(out), [=](const Tensor<T>& g) mutable {
    input.accumulate_grad(global_avg_pool_backward(g, input.shape()));
  });
}

template <typename T>
Var<T> softmax_cross_entropy(GradTape<T>& tape, const Var<T>& logits, std::span<const std::int32_t> labels,
                             T label_smoothing) {
  auto res = fvit::softmax_cross_entropy(logits.value(), labels, label_smoothing);
  auto grad_logits = std::make_shared<Tensor<T>>(std::move(res.grad_logits));
  return tape.record({logits}, Tensor<T>::scalar(res.loss), [=](const Tensor<T>& g) mutable {
    Tensor<T> scaled = *grad_logits;
    const T s = g[0];
    for (std::size_t i = 0; i < scaled.numel(); ++i) scaled[i] *= s;
    logits.accumulate_grad(scaled);
  });
}

template <typename T>
Var<T> add(GradTape<T>& tape, const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = fvit::add(a.value(), b.value());
  return tape.record({a, b}, std::move(out), [=](const Tensor<T>& g) mutable {
    if (a.requires_grad()) a.accumulate_grad(g);
    if (b.requires_grad()) b.accumulate_grad(g);
  });
}

template <typename T>
Var<T> mul(GradTape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return tape.record({a, b}, std::move(out), [=](const Tensor<T>& g) mutable {
    if (a.requires_grad()) {
      Tensor<T> ga(g.shape());
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] = g[i] * b.value()[i];
      a.accumulate_grad(ga);
    }
    if (b.requires_grad()) {
      Tensor<T> gb(g.shape());
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] = g[i] * a.value()[i];
      b.accumulate_grad(gb);
    }
  });
}

template <typename T>
Var<T> scale(GradTape<T>& tape, const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= factor;
  return tape.record({a}, std::move(out), [=](const Tensor<T>& g) mutable {
    Tensor<T> ga = g;
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= factor;
    a.accumulate_grad(ga);
  });
}

template <typename T>
Var<T> sum(GradTape<T>& tape, const Var<T>& a) {
  T acc = 0;
  for (T v : a.value().data()) acc += v;
  return tape.record({a}, Tensor<T>::scalar(acc), [=](const Tensor<T>& g) mutable {
    a.accumulate_grad(Tensor<T>(a.shape(), g[0]));
  });
}

template <typename T>
Var<T> slice_channels(GradTape<T>& tape, const Var<T>& input, std::size_t begin, std::size_t count) {
  Tensor<T> out = fvit::slice_channels(input.value(), begin, count);
  return tape.record({input}, std::move(out), [=](const Tensor<T>& g) mutable {
    const Shape& shp = input.shape();
    const std::size_t n = shp[0], c = shp[1];
    const std::size_t s = input.value().numel() / (n * c);
    Tensor<T> gi(shp);
    for (std::size_t b = 0; b < n; ++b) {
      std::copy_n(g.ptr() + b * count * s, count * s, gi.ptr() + (b * c + begin) * s);
    }
    input.accumulate_grad(gi);
  });
}

template <typename T>
Var<T> concat_channels(GradTape<T>& tape, const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = fvit::concat_channels(a.value(), b.value());
  return tape.record({a, b}, std::move(out), [=](const Tensor<T>& g) mutable {
    const std::size_t ca = a.shape()[1];
    const std::size_t cb = b.shape()[1];
    if (a.requires_grad()) a.accumulate_grad(fvit::slice_channels(g, 0, ca));
    if (b.requires_grad()) b.accumulate_grad(fvit::slice_channels(g, ca, cb));
  });
}

template <typename T>
Var<T> scale_samples(GradTape<T>& tape, const Var<T>& input, std::vector<T> mask) {
  const std::size_t n = input.shape()[0];
  if (mask.size() != n) throw DimensionError("scale_samples: mask length does not match batch axis");
  const std::size_t per = input.value().numel() / n;
  Tensor<T> out = input.value();
  for (std::size_t b = 0; b < n; ++b) {
    T* p = out.ptr() + b * per;
    for (std::size_t i = 0; i < per; ++i) p[i] *= mask[b];
  }
  return tape.record({input}, std::move(out), [=](const Tensor<T>& g) mutable {
    Tensor<T> gi = g;
    for (std::size_t b = 0; b < n; ++b) {
      T* p = gi.ptr() + b * per;
      for (std::size_t i = 0; i < per; ++i) p[i] *= mask[b];
    }
    input.accumulate_grad(gi);
  });
}

#define FVIT_INSTANTIATE_AD(T)                                                                                       \
  template Var<T> conv2d(GradTape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, ConvGeometry);                  \
  template Var<T> layer_norm(GradTape<T>&, const Var<T>&, const Var<T>&, const Var<T>&, T);                         \
  template Var<T> linear(GradTape<T>&, const Var<T>&, const Var<T>&, const Var<T>&);                                \
  template Var<T> gelu(GradTape<T>&, const Var<T>&);                                                                \
  template Var<T> global_avg_pool(GradTape<T>&, const Var<T>&);                                                     \
  template Var<T> softmax_cross_entropy(GradTape<T>&, const Var<T>&, std::span<const std::int32_t>, T);             \
  template Var<T> add(GradTape<T>&, const Var<T>&, const Var<T>&);                                                  \
  template Var<T> mul(GradTape<T>&, const Var<T>&, const Var<T>&);                                                  \
  template Var<T> scale(GradTape<T>&, const Var<T>&, T);                                                            \
  template Var<T> sum(GradTape<T>&, const Var<T>&);                                                                 \
  template Var<T> slice_channels(GradTape<T>&, const Var<T>&, std::size_t, std::size_t);                            \
  template Var<T> concat_channels(GradTape<T>&, const Var<T>&, const Var<T>&);                                      \
  template Var<T> scale_samples(GradTape<T>&, const Var<T>&, std::vector<T>);

FVIT_INSTANTIATE_AD(float)
FVIT_INSTANTIATE_AD(double)

}  // namespace fvit::ad
