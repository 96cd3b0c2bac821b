#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fvit/data/data.hpp"
#include "fvit/model/model.hpp"

namespace fvit::train {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// AdamW with decoupled weight decay over a parameter registry. Parameters
/// registered with decay = false (norms, biases, Gabor scalars) skip the decay
/// term. A parameter without a gradient is treated as having a zero gradient.
template <typename T>
class AdamW {
 public:
  explicit AdamW(ParameterRegistry<T>& reg, AdamWConfig cfg = {});

  void step(double lr);
  std::uint64_t step_count() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  const Tensor<T>& first_moment(std::size_t i) const { return m_.at(i); }
  const Tensor<T>& second_moment(std::size_t i) const { return v_.at(i); }

  void save_state(model::Checkpoint& ckpt) const;
  /// Missing or misshapen moments -> ConsistencyError.
  void check_state(const model::Checkpoint& ckpt) const;
  void load_state(const model::Checkpoint& ckpt);

 private:
  ParameterRegistry<T>& reg_;
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::uint64_t t_ = 0;
};

/// Linear warmup 0 -> base over warmup_steps, then half-cosine to 0 at total_steps.
double cosine_lr(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr);

struct TrainRecipe {
  std::size_t epochs = 20;
  double base_lr = 1e-3;
  std::size_t warmup_epochs = 1;
  double weight_decay = 0.05;
  double label_smoothing = 0.1;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  data::AugmentFlags augment{};

  /// Throws ConfigError.
  void validate() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  std::size_t step = 0;   // optimizer steps taken so far
  double lr = 0;          // last learning rate applied
  double loss = 0;        // mean over samples
  double acc = 0;         // training-mode accuracy
  std::vector<double> step_losses;  // per optimizer step, in order

  /// `epoch=<n> step=<n> lr=<f> loss=<f> acc=<f>`
  std::string line() const;
};

struct EvalResult {
  double accuracy = 0;
  double loss = 0;
};

/// Eval-mode pass; loss is plain (unsmoothed) cross-entropy.
template <typename T>
EvalResult evaluate(const model::Model<T>& model, const data::LabeledDataset& ds, std::size_t batch_size);

/// Pads to the model resolution and standardizes with the given statistics.
data::LabeledDataset prepare(const data::LabeledDataset& ds, const data::Stats& stats, std::size_t resolution);

template <typename T>
class Trainer {
 public:
  Trainer(model::Model<T>& model, const data::LabeledDataset& train_set, TrainRecipe recipe);

  /// One shuffled pass. Shuffling, augmentation and drop-path draw from a
  /// stream derived from (seed, epoch), so a resumed run replays exactly.
  EpochMetrics train_epoch();

  std::size_t epoch() const { return epoch_; }
  std::size_t steps_per_epoch() const;
  std::size_t total_steps() const { return steps_per_epoch() * recipe_.epochs; }
  AdamW<T>& optimizer() { return opt_; }
  const TrainRecipe& recipe() const { return recipe_; }

  void save(const std::string& path) const;
  /// Restores model, optimizer and epoch counter; nothing changes on failure.
  void load(const std::string& path);

 private:
  model::Model<T>& model_;
  const data::LabeledDataset& train_;
  TrainRecipe recipe_;
  AdamW<T> opt_;
  std::size_t epoch_ = 0;
};

}  // namespace fvit::train
