#include "fvit/data/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "fvit/core/errors.hpp"

namespace fvit::data {

namespace {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

std::uint8_t to_byte(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

}  // namespace

void LabeledDataset::validate() const {
  if (labels.empty()) {
    if (images.defined()) throw ConsistencyError("dataset has images but no labels");
    return;
  }
  if (!images.defined() || images.rank() != 4 || images.dim(0) != labels.size()) {
    throw ConsistencyError("dataset image count does not match its " + std::to_string(labels.size()) + " labels");
  }
  for (auto l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
      throw ConsistencyError("label " + std::to_string(l) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

// ---------------------------------------------------------------- IDX

LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (img.size() < 16 || be32(img, 0) != 0x00000803) throw FormatError("'" + images_path + "': bad IDX image magic");
  if (lab.size() < 8 || be32(lab, 0) != 0x00000801) throw FormatError("'" + labels_path + "': bad IDX label magic");
  const std::size_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
  const std::size_t nl = be32(lab, 4);
  if (n != nl) {
    throw ConsistencyError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
  }
  if (img.size() != 16 + n * rows * cols) {
    throw ConsistencyError("'" + images_path + "' holds " + std::to_string(img.size() - 16) + " pixel bytes, header promises " +
                           std::to_string(n * rows * cols));
  }
  if (lab.size() != 8 + n) {
    throw ConsistencyError("'" + labels_path + "' holds " + std::to_string(lab.size() - 8) + " labels, header promises " +
                           std::to_string(n));
  }
  LabeledDataset ds;
  ds.num_classes = 10;
  if (n == 0) return ds;
  ds.images = Tensor<float>({n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i) ds.images[i] = static_cast<float>(img[16 + i]) / 255.0f;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (lab[8 + i] > 9) throw FormatError("IDX label " + std::to_string(lab[8 + i]) + " > 9");
    ds.labels[i] = lab[8 + i];
  }
  return ds;
}

void write_idx(const LabeledDataset& ds, const std::string& images_path, const std::string& labels_path) {
  ds.validate();
  const std::size_t n = ds.size();
  const std::size_t h = n ? ds.images.dim(2) : 28, w = n ? ds.images.dim(3) : 28;
  if (n && ds.images.dim(1) != 1) throw DimensionError("IDX export needs single-channel images");
  std::vector<std::uint8_t> img, lab;
  put_be32(img, 0x00000803);
  put_be32(img, static_cast<std::uint32_t>(n));
  put_be32(img, static_cast<std::uint32_t>(h));
  put_be32(img, static_cast<std::uint32_t>(w));
  for (std::size_t i = 0; i < n * h * w; ++i) img.push_back(to_byte(ds.images[i]));
  put_be32(lab, 0x00000801);
  put_be32(lab, static_cast<std::uint32_t>(n));
  for (auto l : ds.labels) lab.push_back(static_cast<std::uint8_t>(l));
  write_file(images_path, img);
  write_file(labels_path, lab);
}

// ---------------------------------------------------------------- CIFAR-10

namespace {
constexpr std::size_t kCifarPixels = 3 * 32 * 32;
constexpr std::size_t kCifarRecord = 1 + kCifarPixels;
}  // namespace

LabeledDataset load_cifar10(const std::vector<std::string>& batch_paths) {
  std::vector<std::vector<std::uint8_t>> files;
  std::size_t total = 0;
  for (const auto& p : batch_paths) {
    files.push_back(read_file(p));
    if (files.back().size() % kCifarRecord != 0) {
      throw FormatError("'" + p + "' is " + std::to_string(files.back().size()) + " bytes, not a multiple of 3073");
    }
    total += files.back().size() / kCifarRecord;
  }
  LabeledDataset ds;
  ds.num_classes = 10;
  if (total == 0) return ds;
  ds.images = Tensor<float>({total, 3, 32, 32});
  ds.labels.resize(total);
  std::size_t r = 0;
  for (std::size_t f = 0; f < files.size(); ++f) {
    const auto& bytes = files[f];
    for (std::size_t off = 0; off < bytes.size(); off += kCifarRecord, ++r) {
      if (bytes[off] > 9) {
        throw FormatError("'" + batch_paths[f] + "' record " + std::to_string(off / kCifarRecord) + " has label " +
                          std::to_string(bytes[off]));
      }
      ds.labels[r] = bytes[off];
      float* dst = ds.images.ptr() + r * kCifarPixels;
      for (std::size_t i = 0; i < kCifarPixels; ++i) dst[i] = static_cast<float>(bytes[off + 1 + i]) / 255.0f;
    }
  }
  return ds;
}

void write_cifar10(const LabeledDataset& ds, const std::string& path) {
  ds.validate();
  if (ds.size() && ds.images.shape() != Shape{ds.size(), 3, 32, 32}) {
    throw DimensionError("CIFAR export needs N x 3 x 32 x 32 images, got " + shape_str(ds.images.shape()));
  }
  std::vector<std::uint8_t> out;
  out.reserve(ds.size() * kCifarRecord);
  for (std::size_t r = 0; r < ds.size(); ++r) {
    out.push_back(static_cast<std::uint8_t>(ds.labels[r]));
    const float* src = ds.images.ptr() + r * kCifarPixels;
    for (std::size_t i = 0; i < kCifarPixels; ++i) out.push_back(to_byte(src[i]));
  }
  write_file(path, out);
}

// ---------------------------------------------------------------- batching

LabeledDataset subset(const LabeledDataset& ds, std::size_t begin, std::size_t count) {
  if (begin + count > ds.size()) throw UsageError("subset range exceeds dataset size");
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
  return gather(ds, idx);
}

LabeledDataset gather(const LabeledDataset& ds, const std::vector<std::size_t>& indices) {
  LabeledDataset out;
  out.num_classes = ds.num_classes;
  if (indices.empty()) return out;
  Shape shape = ds.images.shape();
  const std::size_t per = ds.images.numel() / shape[0];
  shape[0] = indices.size();
  out.images = Tensor<float>(shape);
  out.labels.resize(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t j = indices[i];
    if (j >= ds.size()) throw UsageError("gather index " + std::to_string(j) + " out of range");
    std::copy_n(ds.images.ptr() + j * per, per, out.images.ptr() + i * per);
    out.labels[i] = ds.labels[j];
  }
  return out;
}

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

// ---------------------------------------------------------------- augmentation

namespace {

void mirror_sample(const float* src, float* dst, std::size_t c, std::size_t h, std::size_t w) {
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      const float* s = src + (ch * h + y) * w;
      float* d = dst + (ch * h + y) * w;
      for (std::size_t x = 0; x < w; ++x) d[x] = s[w - 1 - x];
    }
  }
}

std::size_t reflect(long i, std::size_t n) {
  const long m = static_cast<long>(n);
  if (i < 0) i = -i;
  if (i >= m) i = 2 * m - 2 - i;
  return static_cast<std::size_t>(i);
}

}  // namespace

Tensor<float> hflip(const Tensor<float>& batch) {
  if (batch.rank() != 4) throw DimensionError("hflip: batch must be NCHW");
  Tensor<float> out(batch.shape());
  const std::size_t c = batch.dim(1), h = batch.dim(2), w = batch.dim(3), per = c * h * w;
  for (std::size_t n = 0; n < batch.dim(0); ++n) mirror_sample(batch.ptr() + n * per, out.ptr() + n * per, c, h, w);
  return out;
}

Tensor<float> augment(const Tensor<float>& batch, Rng& rng, AugmentFlags flags) {
  if (!flags.hflip && !flags.pad_crop) return batch;
  if (batch.rank() != 4) throw DimensionError("augment: batch must be NCHW");
  const std::size_t c = batch.dim(1), h = batch.dim(2), w = batch.dim(3), per = c * h * w;
  if (flags.pad_crop && (h <= kCropPad || w <= kCropPad)) {
    throw DimensionError("augment: images must be larger than the crop padding");
  }
  Tensor<float> out(batch.shape());
  std::vector<float> flipped(per);
  for (std::size_t n = 0; n < batch.dim(0); ++n) {
    const float* src = batch.ptr() + n * per;
    if (flags.hflip && rng.bernoulli(0.5)) {
      mirror_sample(src, flipped.data(), c, h, w);
      src = flipped.data();
    }
    float* dst = out.ptr() + n * per;
    if (!flags.pad_crop) {
      std::copy_n(src, per, dst);
      continue;
    }
    // window origin in padded coordinates, shifted back by the pad
    const long oy = static_cast<long>(rng.below(2 * kCropPad + 1)) - static_cast<long>(kCropPad);
    const long ox = static_cast<long>(rng.below(2 * kCropPad + 1)) - static_cast<long>(kCropPad);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* plane = src + ch * h * w;
      for (std::size_t y = 0; y < h; ++y) {
        const float* row = plane + reflect(static_cast<long>(y) + oy, h) * w;
        float* drow = dst + (ch * h + y) * w;
        for (std::size_t x = 0; x < w; ++x) drow[x] = row[reflect(static_cast<long>(x) + ox, w)];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- normalization

namespace {

void check_stats(const Tensor<float>& batch, const std::vector<float>& mean, const std::vector<float>& std) {
  if (batch.rank() != 4) throw DimensionError("normalize: batch must be NCHW");
  if (mean.size() != batch.dim(1) || std.size() != batch.dim(1)) {
    throw DimensionError("normalize: need one mean/std per channel (axis C = " + std::to_string(batch.dim(1)) + ")");
  }
  for (float s : std) {
    if (!(s > 0.0f)) throw ParameterError("normalize: std must be > 0 per channel");
  }
}

template <typename F>
Tensor<float> per_channel(const Tensor<float>& batch, F f) {
  Tensor<float> out(batch.shape());
  const std::size_t c = batch.dim(1), plane = batch.dim(2) * batch.dim(3);
  for (std::size_t n = 0; n < batch.dim(0); ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (n * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) out[base + p] = f(batch[base + p], ch);
    }
  }
  return out;
}

}  // namespace

Tensor<float> normalize(const Tensor<float>& batch, const std::vector<float>& mean, const std::vector<float>& std) {
  check_stats(batch, mean, std);
  return per_channel(batch, [&](float x, std::size_t c) { return (x - mean[c]) / std[c]; });
}

Tensor<float> denormalize(const Tensor<float>& batch, const std::vector<float>& mean, const std::vector<float>& std) {
  check_stats(batch, mean, std);
  return per_channel(batch, [&](float x, std::size_t c) { return x * std[c] + mean[c]; });
}

Tensor<float> pad_to(const Tensor<float>& batch, std::size_t size) {
  if (batch.rank() != 4) throw DimensionError("pad_to: batch must be NCHW");
  const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  if (h > size || w > size) throw DimensionError("pad_to: image larger than target size");
  const std::size_t top = (size - h) / 2, left = (size - w) / 2;
  Tensor<float> out({n, c, size, size});
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t y = 0; y < h; ++y) {
      std::copy_n(batch.ptr() + (p * h + y) * w, w, out.ptr() + (p * size + top + y) * size + left);
    }
  }
  return out;
}

}  // namespace fvit::data
