#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "fvit/blocks/blocks.hpp"
#include "fvit/core/parameters.hpp"

namespace fvit::model {

using blocks::FfnKind;

struct StageConfig {
  std::size_t depth = 1;
  std::size_t channels = 0;
  int kernel_size = 7;
  int padding = 3;
  double ratio = 3.0;
  double drop_path = 0.05;
  std::size_t plain_hidden = 0;  // only for FfnKind::kPlain; 0 = matched expansion
};

struct ModelConfig {
  std::string name;
  std::size_t stem_channels = 0;
  std::array<StageConfig, 4> stages{};
  std::size_t projection = 1280;
  std::size_t num_classes = 1000;
  std::size_t resolution = 224;
  FfnKind ffn = FfnKind::kDualPath;

  /// Throws ConfigError on any violated invariant.
  void validate() const;
  blocks::BfvConfig block_config(std::size_t stage) const;
};

/// tiny, small, base, large (the four published variants) and micro (desk scale).
ModelConfig preset(const std::string& variant);
std::vector<std::string> preset_names();

enum class FlopConvention { kMacAsOne, kMacAsTwo };

struct CostRow {
  std::string name;
  std::size_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t generation_ops = 0;
  std::size_t out_size = 0;  // spatial side length of the row's output
  std::size_t out_channels = 0;
};

/// Analytic per-part accounting: stem, stage1..stage4 (each including its
/// merge conv), head.
/// MACs of one k x k convolution producing out_hw output positions.
std::uint64_t conv_macs(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t groups, std::uint64_t out_hw);
std::uint64_t to_flops(std::uint64_t macs, std::uint64_t generation_ops, FlopConvention conv);

std::vector<CostRow> account(const ModelConfig& cfg, std::size_t resolution);
std::size_t count_params(const ModelConfig& cfg);
std::uint64_t count_flops(const ModelConfig& cfg, std::size_t resolution,
                          FlopConvention conv = FlopConvention::kMacAsOne);

// ---------------------------------------------------------------- checkpoint

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

struct Checkpoint {
  std::vector<std::pair<std::string, AnyTensor>> entries;

  void put(std::string name, AnyTensor t) { entries.emplace_back(std::move(name), std::move(t)); }
  const AnyTensor* find(const std::string& name) const;
  /// Typed lookup; missing name or wrong dtype -> ConsistencyError.
  template <typename T>
  const Tensor<T>& get(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// Fully parsed before returning; any structural problem -> FormatError.
Checkpoint read_checkpoint(const std::string& path);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

// ---------------------------------------------------------------- model

template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  /// batch: N x {1,3} x H x W with H, W divisible by 32. Single-channel
  /// input is replicated to three channels. Returns N x K logits.
  Var<T> forward(GradTape<T>& tape, const Tensor<T>& batch, bool training, Rng& rng,
                 std::vector<Shape>* stage_shapes = nullptr) const;
  /// Eval-mode forward without a tape.
  Tensor<T> predict(const Tensor<T>& batch) const;

  const ModelConfig& config() const { return cfg_; }
  ParameterRegistry<T>& registry() { return reg_; }
  const ParameterRegistry<T>& registry() const { return reg_; }
  std::size_t count_params() const { return reg_.total_scalars(); }

  std::size_t num_blocks(std::size_t stage) const { return stages_.at(stage).size(); }
  blocks::BfvBlock<T>& block(std::size_t stage, std::size_t index) { return *stages_.at(stage).at(index); }
  const blocks::BfvBlock<T>& block(std::size_t stage, std::size_t index) const {
    return *stages_.at(stage).at(index);
  }
  /// Switches every LGF layer's lambda derivative (gradcheck fault injection).
  void set_lambda_grad_form(gabor::LambdaGradForm form);

  /// Named copies of every parameter, prefixed "model/".
  void save_state(Checkpoint& ckpt) const;
  /// Throws ConsistencyError unless every parameter is present with the right dtype and shape.
  void check_state(const Checkpoint& ckpt) const;
  /// check_state, then assigns.
  void load_state(const Checkpoint& ckpt);

 private:
  struct ConvNorm {
    Var<T> weight, bias, gamma, beta;
  };

  ModelConfig cfg_;
  ParameterRegistry<T> reg_;
  std::array<ConvNorm, 3> stem_;
  std::array<Var<T>, 4> merge_w_, merge_b_;
  std::array<std::vector<std::unique_ptr<blocks::BfvBlock<T>>>, 4> stages_;
  Var<T> proj_w_, proj_b_, head_gamma_, head_beta_, fc_w_, fc_b_;
};

}  // namespace fvit::model
