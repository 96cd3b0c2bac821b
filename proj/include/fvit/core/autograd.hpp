#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fvit/core/ops.hpp"
#include "fvit/core/tensor.hpp"

namespace fvit {

template <typename T>
struct VarState {
  Tensor<T> value;
  Tensor<T> grad;  // undefined until something flows into it
  bool requires_grad = false;
};

/// Shared handle to a value participating in a tape. Copies alias the same
/// state, so a parameter Var held by a layer and the one captured by a tape
/// node see the same gradient buffer.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : state_(std::make_shared<VarState<T>>()) {
    state_->value = std::move(value);
    state_->requires_grad = requires_grad;
  }

  bool defined() const { return state_ != nullptr; }
  const Tensor<T>& value() const { return state_->value; }
  Tensor<T>& mutable_value() { return state_->value; }
  const Tensor<T>& grad() const { return state_->grad; }
  const Shape& shape() const { return state_->value.shape(); }
  bool requires_grad() const { return state_ && state_->requires_grad; }

  // Const: mutates the shared state, not the handle.
  void accumulate_grad(const Tensor<T>& g) const {
    if (!state_->grad.defined()) {
      state_->grad = g;
    } else {
      add_inplace(state_->grad, g);
    }
  }
  void zero_grad() const { state_->grad = Tensor<T>(); }

  bool same(const Var& other) const { return state_ == other.state_; }

 private:
  std::shared_ptr<VarState<T>> state_;
};

/// Ordered record of differentiable operations. Nodes are appended in
/// execution order, so reverse iteration is a valid topological order for
/// gradient propagation.
template <typename T>
class GradTape {
 public:
  explicit GradTape(bool enabled = true) : enabled_(enabled) {}

  bool enabled() const { return enabled_; }
  std::size_t size() const { return nodes_.size(); }

  /// Creates the output Var of an op. It requires grad iff the tape is
  /// enabled and any input does; only then is `backward` recorded.
  Var<T> record(std::initializer_list<Var<T>> inputs, Tensor<T> output,
                std::function<void(const Tensor<T>& grad_out)> backward) {
    bool needs = false;
    if (enabled_) {
      for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    Var<T> out(std::move(output), needs);
    if (needs) nodes_.push_back(Node{out, std::move(backward)});
    return out;
  }

  /// Seeds d(loss)/d(loss) = 1 and replays every node once, newest first.
  /// Returns the number of nodes visited.
  std::size_t backward(const Var<T>& loss) {
    if (nodes_.empty()) throw UsageError("backward called on a tape with no recorded operations");
    if (loss.value().numel() != 1) {
      throw UsageError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    Var<T> seed = loss;
    seed.accumulate_grad(Tensor<T>::ones(loss.shape()));
    std::size_t visited = 0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      ++visited;
      const Tensor<T>& g = it->output.grad();
      if (g.defined()) it->backward(g);
    }
    return visited;
  }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Var<T> output;
    std::function<void(const Tensor<T>&)> backward;
  };
  bool enabled_;
  std::vector<Node> nodes_;
};

// Differentiable wrappers over the kernels in ops.hpp. Optional operands are
// passed as undefined Vars.
namespace ad {

template <typename T>
Var<T> conv2d(GradTape<T>& tape, const Var<T>& input, const Var<T>& weight, const Var<T>& bias, ConvGeometry geom);

template <typename T>
Var<T> layer_norm(GradTape<T>& tape, const Var<T>& input, const Var<T>& gamma, const Var<T>& beta, T eps);

template <typename T>
Var<T> linear(GradTape<T>& tape, const Var<T>& input, const Var<T>& weight, const Var<T>& bias);

template <typename T>
Var<T> gelu(GradTape<T>& tape, const Var<T>& input);

template <typename T>
Var<T> global_avg_pool(GradTape<T>& tape, const Var<T>& input);

/// Scalar mean loss; the logits gradient is computed in the forward pass.
template <typename T>
Var<T> softmax_cross_entropy(GradTape<T>& tape, const Var<T>& logits, std::span<const std::int32_t> labels,
                             T label_smoothing);

template <typename T>
Var<T> add(GradTape<T>& tape, const Var<T>& a, const Var<T>& b);

/// Elementwise product.
template <typename T>
Var<T> mul(GradTape<T>& tape, const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(GradTape<T>& tape, const Var<T>& a, T factor);

/// Sum of all elements, shape {1}.
template <typename T>
Var<T> sum(GradTape<T>& tape, const Var<T>& a);

template <typename T>
Var<T> slice_channels(GradTape<T>& tape, const Var<T>& input, std::size_t begin, std::size_t count);

template <typename T>
Var<T> concat_channels(GradTape<T>& tape, const Var<T>& a, const Var<T>& b);

/// Multiplies sample n of `input` by mask[n] (per-sample broadcast).
template <typename T>
Var<T> scale_samples(GradTape<T>& tape, const Var<T>& input, std::vector<T> mask);

}  // namespace ad

}  // namespace fvit
