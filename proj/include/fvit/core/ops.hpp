#pragma once

// Forward and backward kernels on plain tensors. The autodiff wrappers in
// autograd.hpp call these; tests call them directly against naive oracles.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fvit/core/tensor.hpp"

namespace fvit {

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t groups = 1;
};

/// Output spatial extent of a convolution; throws DimensionError if the
/// kernel does not fit the padded input.
std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding);

/// Cross-correlation of an NCHW input with an O x (C/groups) x KH x KW weight.
/// `bias` may be undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, ConvGeometry geom);

template <typename T>
struct Conv2dGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weight,
                               bool has_bias, ConvGeometry geom, bool need_input_grad = true);

/// Saved statistics of a layer_norm forward, one entry per (sample, position).
template <typename T>
struct LayerNormCache {
  std::vector<T> mean;
  std::vector<T> rstd;
};

/// Normalizes over axis 1 (channels) independently at every (sample, position)
/// of an N x C x ... tensor, then applies per-channel gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                     LayerNormCache<T>* cache = nullptr);

template <typename T>
struct LayerNormGrads {
  Tensor<T> input;
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
LayerNormGrads<T> layer_norm_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& gamma,
                                      const LayerNormCache<T>& cache);

/// Affine map over the last axis: y = x W^T + b. `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
struct LinearGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weight,
                               bool has_bias);

/// Exact GELU, x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& input);

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& grad_out, const Tensor<T>& input);

/// N x C x H x W -> N x C mean over the spatial axes.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input);

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& grad_out, const Shape& input_shape);

template <typename T>
struct CrossEntropyResult {
  T loss = 0;
  Tensor<T> grad_logits;  // d(mean loss)/d(logits)
};

/// Mean softmax cross-entropy over the batch with label smoothing: the target
/// distribution is (1 - s) * onehot + s / K.
template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels,
                                            T label_smoothing);

/// Index of the largest logit in each row of an N x K tensor.
template <typename T>
std::vector<std::int32_t> argmax_rows(const Tensor<T>& logits);

// Channel-axis plumbing for NCHW (or N x C) tensors.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, std::size_t begin, std::size_t count);

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace fvit
