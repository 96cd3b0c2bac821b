#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "fvit/core/autograd.hpp"

namespace fvit {

template <typename T>
struct Parameter {
  std::string name;
  Var<T> var;
  bool decay = true;  // subject to decoupled weight decay
};

/// Ordered set of trainable leaves. Registration order is the canonical
/// order for checkpoints and optimizer state.
template <typename T>
class ParameterRegistry {
 public:
  Var<T> add(const std::string& name, Tensor<T> init, bool decay) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    index_[name] = params_.size();
    params_.push_back(Parameter<T>{name, Var<T>(std::move(init), true), decay});
    return params_.back().var;
  }

  const std::vector<Parameter<T>>& params() const { return params_; }
  std::vector<Parameter<T>>& params() { return params_; }
  std::size_t size() const { return params_.size(); }

  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }

  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.value().numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

 private:
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Scoped name builder: Scope("stages.0").sub("blocks.1")("lgf.theta").
class Scope {
 public:
  Scope() = default;
  explicit Scope(std::string prefix) : prefix_(std::move(prefix)) {}
  Scope sub(const std::string& name) const { return Scope(prefix_.empty() ? name : prefix_ + "." + name); }
  std::string operator()(const std::string& leaf) const { return prefix_.empty() ? leaf : prefix_ + "." + leaf; }
  const std::string& prefix() const { return prefix_; }

 private:
  std::string prefix_;
};

}  // namespace fvit
