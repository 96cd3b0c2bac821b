#include "fvit/train/train.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include "fvit/core/errors.hpp"

namespace fvit::train {

using model::Checkpoint;

// ---------------------------------------------------------------- AdamW

template <typename T>
AdamW<T>::AdamW(ParameterRegistry<T>& reg, AdamWConfig cfg) : reg_(reg), cfg_(cfg) {
  for (const auto& p : reg_.params()) {
    m_.emplace_back(p.var.shape());
    v_.emplace_back(p.var.shape());
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  if (!(lr >= 0.0)) throw ParameterError("adamw: learning rate must be >= 0");
  auto& params = reg_.params();
  if (params.size() != m_.size()) throw UsageError("adamw: registry changed after the optimizer was created");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var<T>& var = params[i].var;
    Tensor<T>& w = var.mutable_value();
    const Tensor<T>& g = var.grad();
    if (g.defined() && g.shape() != w.shape()) {
      throw DimensionError("adamw: gradient of '" + params[i].name + "' has shape " + shape_str(g.shape()));
    }
    Tensor<T>& m = m_[i];
    Tensor<T>& v = v_[i];
    const T decay = params[i].decay ? static_cast<T>(lr * cfg_.weight_decay) : T(0);
    for (std::size_t j = 0; j < w.numel(); ++j) {
      const T gj = g.defined() ? g[j] : T(0);
      m[j] = b1 * m[j] + (T(1) - b1) * gj;
      v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
      const double mhat = static_cast<double>(m[j]) / bc1;
      const double vhat = static_cast<double>(v[j]) / bc2;
      w[j] -= decay * w[j];
      w[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }
}

template <typename T>
void AdamW<T>::save_state(Checkpoint& ckpt) const {
  const auto& params = reg_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    ckpt.put("optim/m/" + params[i].name, m_[i]);
    ckpt.put("optim/v/" + params[i].name, v_[i]);
  }
  ckpt.put("optim/step", Tensor<double>::scalar(static_cast<double>(t_)));
}

template <typename T>
void AdamW<T>::check_state(const Checkpoint& ckpt) const {
  for (const auto& p : reg_.params()) {
    for (const char* which : {"optim/m/", "optim/v/"}) {
      const Tensor<T>& t = ckpt.get<T>(which + p.name);
      if (t.shape() != p.var.shape()) {
        throw ConsistencyError("checkpoint tensor '" + std::string(which) + p.name + "' has shape " +
                               shape_str(t.shape()));
      }
    }
  }
  const Tensor<double>& step = ckpt.get<double>("optim/step");
  if (step.numel() != 1 || step[0] < 0 || step[0] != std::floor(step[0])) {
    throw ConsistencyError("checkpoint 'optim/step' is not a step count");
  }
}

template <typename T>
void AdamW<T>::load_state(const Checkpoint& ckpt) {
  check_state(ckpt);
  const auto& params = reg_.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = ckpt.get<T>("optim/m/" + params[i].name);
    v_[i] = ckpt.get<T>("optim/v/" + params[i].name);
  }
  t_ = static_cast<std::uint64_t>(ckpt.get<double>("optim/step")[0]);
}

// ---------------------------------------------------------------- schedule

double cosine_lr(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr) {
  if (warmup_steps >= total_steps) throw ParameterError("cosine_lr: warmup must be shorter than the schedule");
  if (step > total_steps) throw ParameterError("cosine_lr: step beyond the schedule");
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return base_lr * (1.0 + std::cos(std::numbers::pi * progress)) / 2.0;
}

void TrainRecipe::validate() const {
  if (epochs < 1) throw ConfigError("recipe: epochs must be >= 1");
  if (warmup_epochs >= epochs) throw ConfigError("recipe: warmup epochs must be fewer than epochs");
  if (!(base_lr > 0.0)) throw ConfigError("recipe: learning rate must be > 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("recipe: weight decay must be >= 0");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("recipe: label smoothing must be in [0, 1)");
  if (batch_size < 1) throw ConfigError("recipe: batch size must be >= 1");
}

std::string EpochMetrics::line() const {
  char buf[160];
  std::snprintf(buf, sizeof buf, "epoch=%zu step=%zu lr=%.6g loss=%.6f acc=%.6f", epoch, step, lr, loss, acc);
  return buf;
}

// ---------------------------------------------------------------- evaluation

template <typename T>
EvalResult evaluate(const model::Model<T>& model, const data::LabeledDataset& ds, std::size_t batch_size) {
  if (ds.size() == 0) throw UsageError("evaluate: dataset is empty");
  if (batch_size < 1) throw UsageError("evaluate: batch size must be >= 1");
  std::size_t correct = 0;
  double loss_sum = 0;
  for (std::size_t b = 0; b < ds.size(); b += batch_size) {
    const std::size_t nb = std::min(batch_size, ds.size() - b);
    const auto batch = data::subset(ds, b, nb);
    const Tensor<T> logits = model.predict(batch.images.template cast<T>());
    const auto res = softmax_cross_entropy(logits, std::span<const std::int32_t>(batch.labels), T(0));
    loss_sum += static_cast<double>(res.loss) * static_cast<double>(nb);
    const auto pred = argmax_rows(logits);
    for (std::size_t i = 0; i < nb; ++i) correct += pred[i] == batch.labels[i];
  }
  return {static_cast<double>(correct) / static_cast<double>(ds.size()), loss_sum / static_cast<double>(ds.size())};
}

data::LabeledDataset prepare(const data::LabeledDataset& ds, const data::Stats& stats, std::size_t resolution) {
  data::LabeledDataset out = ds;
  if (ds.size() == 0) return out;
  if (ds.images.dim(2) != resolution || ds.images.dim(3) != resolution) {
    out.images = data::pad_to(ds.images, resolution);
  }
  out.images = data::normalize(out.images, stats.mean, stats.std);
  return out;
}

// ---------------------------------------------------------------- trainer

template <typename T>
Trainer<T>::Trainer(model::Model<T>& model, const data::LabeledDataset& train_set, TrainRecipe recipe)
    : model_(model),
      train_(train_set),
      recipe_(recipe),
      opt_(model.registry(), AdamWConfig{0.9, 0.999, 1e-8, recipe.weight_decay}) {
  recipe_.validate();
  train_.validate();
  if (train_.size() == 0) throw UsageError("training set is empty");
}

template <typename T>
std::size_t Trainer<T>::steps_per_epoch() const {
  return (train_.size() + recipe_.batch_size - 1) / recipe_.batch_size;
}

template <typename T>
EpochMetrics Trainer<T>::train_epoch() {
  Rng rng = Rng::derive(recipe_.seed, epoch_ + 1);
  const auto order = data::permutation(train_.size(), rng);
  const std::size_t total = total_steps();
  const std::size_t warmup = steps_per_epoch() * recipe_.warmup_epochs;
  EpochMetrics metrics;
  metrics.epoch = epoch_ + 1;
  double loss_sum = 0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < order.size(); b += recipe_.batch_size) {
    const std::size_t nb = std::min(recipe_.batch_size, order.size() - b);
    const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(b),
                                       order.begin() + static_cast<std::ptrdiff_t>(b + nb));
    const auto batch = data::gather(train_, idx);
    const Tensor<T> x = data::augment(batch.images, rng, recipe_.augment).template cast<T>();

    GradTape<T> tape;
    Var<T> logits = model_.forward(tape, x, true, rng);
    Var<T> loss = ad::softmax_cross_entropy(tape, logits, std::span<const std::int32_t>(batch.labels),
                                            static_cast<T>(recipe_.label_smoothing));
    const double lv = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(lv)) {
      throw NumericError("non-finite loss " + std::to_string(lv) + " at epoch " + std::to_string(epoch_ + 1) +
                         ", step " + std::to_string(opt_.step_count() + 1));
    }
    model_.registry().zero_grad();
    tape.backward(loss);
    const std::size_t step = std::min<std::size_t>(opt_.step_count() + 1, total);
    metrics.lr = cosine_lr(step, total, warmup, recipe_.base_lr);
    opt_.step(metrics.lr);

    loss_sum += lv * static_cast<double>(nb);
    metrics.step_losses.push_back(lv);
    const auto pred = argmax_rows(logits.value());
    for (std::size_t i = 0; i < nb; ++i) correct += pred[i] == batch.labels[i];
  }
  ++epoch_;
  metrics.step = opt_.step_count();
  metrics.loss = loss_sum / static_cast<double>(train_.size());
  metrics.acc = static_cast<double>(correct) / static_cast<double>(train_.size());
  return metrics;
}

template <typename T>
void Trainer<T>::save(const std::string& path) const {
  Checkpoint ckpt;
  model_.save_state(ckpt);
  opt_.save_state(ckpt);
  ckpt.put("train/epoch", Tensor<double>::scalar(static_cast<double>(epoch_)));
  model::write_checkpoint(path, ckpt);
}

template <typename T>
void Trainer<T>::load(const std::string& path) {
  const Checkpoint ckpt = model::read_checkpoint(path);
  model_.check_state(ckpt);
  opt_.check_state(ckpt);
  const Tensor<double>& ep = ckpt.get<double>("train/epoch");
  if (ep.numel() != 1 || ep[0] < 0 || ep[0] != std::floor(ep[0])) {
    throw ConsistencyError("checkpoint 'train/epoch' is not an epoch count");
  }
  model_.load_state(ckpt);
  opt_.load_state(ckpt);
  epoch_ = static_cast<std::size_t>(ep[0]);
}

template class AdamW<float>;
template class AdamW<double>;
template class Trainer<float>;
template class Trainer<double>;
template EvalResult evaluate(const model::Model<float>&, const data::LabeledDataset&, std::size_t);
template EvalResult evaluate(const model::Model<double>&, const data::LabeledDataset&, std::size_t);

}  // namespace fvit::train
