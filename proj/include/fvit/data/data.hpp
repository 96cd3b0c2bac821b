#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fvit/core/rng.hpp"
#include "fvit/core/tensor.hpp"

namespace fvit::data {

struct LabeledDataset {
  Tensor<float> images;  // N x C x H x W, [0, 1] as loaded
  std::vector<std::int32_t> labels;
  std::size_t num_classes = 10;

  std::size_t size() const { return labels.size(); }
  /// Throws ConsistencyError if labels/images disagree or a label is out of range.
  void validate() const;
};

/// MNIST IDX pair (big-endian, magic 0x803 images / 0x801 labels).
LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path);
/// Writes an N x 1 x H x W dataset (pixels rounded from [0,1] to bytes) as an IDX pair.
void write_idx(const LabeledDataset& ds, const std::string& images_path, const std::string& labels_path);

/// CIFAR-10 binary batches: 3073-byte records (label, 1024 R, 1024 G, 1024 B).
LabeledDataset load_cifar10(const std::vector<std::string>& batch_paths);
void write_cifar10(const LabeledDataset& ds, const std::string& path);

/// Rows [begin, begin + count) of a dataset.
LabeledDataset subset(const LabeledDataset& ds, std::size_t begin, std::size_t count);
/// Gathers the given sample indices into a batch.
LabeledDataset gather(const LabeledDataset& ds, const std::vector<std::size_t>& indices);

struct AugmentFlags {
  bool hflip = false;
  bool pad_crop = false;
};

inline constexpr std::size_t kCropPad = 4;

/// Mirrors every sample left-right.
Tensor<float> hflip(const Tensor<float>& batch);
/// hflip: each sample mirrored with probability 0.5. pad_crop: reflect-pad
/// by 4 then crop a random window of the original size.
Tensor<float> augment(const Tensor<float>& batch, Rng& rng, AugmentFlags flags);

/// (x - mean[c]) / std[c]; std <= 0 -> ParameterError.
Tensor<float> normalize(const Tensor<float>& batch, const std::vector<float>& mean, const std::vector<float>& std);
Tensor<float> denormalize(const Tensor<float>& batch, const std::vector<float>& mean, const std::vector<float>& std);

/// Zero-pads H and W symmetrically up to `size`.
Tensor<float> pad_to(const Tensor<float>& batch, std::size_t size);

/// Uniformly shuffled 0..n-1 (Fisher-Yates).
std::vector<std::size_t> permutation(std::size_t n, Rng& rng);

/// Channel statistics used to standardize each dataset.
struct Stats {
  std::vector<float> mean, std;
};
inline const Stats kMnistStats{{0.1307f}, {0.3081f}};
inline const Stats kCifarStats{{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}};

}  // namespace fvit::data
