#include "fvit/model/model.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace fvit::model {

namespace {

StageConfig stage(std::size_t depth, std::size_t channels, int k, double r) {
  StageConfig s;
  s.depth = depth;
  s.channels = channels;
  s.kernel_size = k;
  s.padding = (k - 1) / 2;
  s.ratio = r;
  s.drop_path = 0.05;
  return s;
}

ModelConfig variant(std::string name, std::size_t stem, std::array<std::size_t, 4> depths,
                    std::array<std::size_t, 4> widths) {
  constexpr std::array<int, 4> kKernels = {7, 5, 3, 3};
  constexpr std::array<double, 4> kRatios = {3.0, 3.5, 4.0, 4.0};
  ModelConfig cfg;
  cfg.name = std::move(name);
  cfg.stem_channels = stem;
  for (std::size_t i = 0; i < 4; ++i) cfg.stages[i] = stage(depths[i], widths[i], kKernels[i], kRatios[i]);
  return cfg;
}

}  // namespace

ModelConfig preset(const std::string& v) {
  if (v == "tiny") return variant(v, 40, {3, 3, 12, 3}, {80, 160, 320, 640});
  if (v == "small") return variant(v, 44, {4, 4, 20, 4}, {88, 176, 352, 704});
  if (v == "base") return variant(v, 48, {5, 5, 28, 5}, {96, 192, 384, 768});
  if (v == "large") return variant(v, 52, {5, 5, 36, 5}, {104, 208, 416, 832});
  if (v == "micro") {
    ModelConfig cfg = variant(v, 16, {1, 1, 2, 1}, {32, 64, 128, 256});
    cfg.num_classes = 10;
    cfg.resolution = 32;
    return cfg;
  }
  throw UsageError("unknown variant '" + v + "' (expected tiny, small, base, large or micro)");
}

std::vector<std::string> preset_names() { return {"tiny", "small", "base", "large", "micro"}; }

void ModelConfig::validate() const {
  auto fail = [&](const std::string& what) { throw ConfigError("model config '" + name + "': " + what); };
  if (stem_channels < 1) fail("stem channels must be >= 1");
  std::size_t prev = stem_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    const StageConfig& s = stages[i];
    const std::string tag = "stage " + std::to_string(i + 1) + ": ";
    if (s.depth < 1) fail(tag + "depth must be >= 1");
    if (s.channels < 2 || s.channels % 2 != 0) fail(tag + "channels must be even and >= 2");
    if (s.channels != 2 * prev) fail(tag + "channels must double the previous width");
    if (s.kernel_size < 1 || s.kernel_size % 2 == 0) fail(tag + "kernel size must be odd");
    if (s.padding != (s.kernel_size - 1) / 2) fail(tag + "padding must equal (k-1)/2");
    if (!(s.ratio > 0.0)) fail(tag + "expansion ratio must be > 0");
    if (!(s.drop_path >= 0.0 && s.drop_path < 1.0)) fail(tag + "drop-path rate must lie in [0, 1)");
    prev = s.channels;
  }
  if (projection < 1) fail("projection width must be >= 1");
  if (num_classes < 1) fail("class count must be >= 1");
  if (resolution == 0 || resolution % 32 != 0) {
    fail("resolution " + std::to_string(resolution) + " is not a positive multiple of 32");
  }
}

blocks::BfvConfig ModelConfig::block_config(std::size_t i) const {
  const StageConfig& s = stages.at(i);
  blocks::BfvConfig b;
  b.channels = s.channels;
  b.kernel_size = s.kernel_size;
  b.ratio = s.ratio;
  b.drop_path = s.drop_path;
  b.ffn = ffn;
  b.plain_hidden = s.plain_hidden;
  return b;
}

// ---------------------------------------------------------------- accounting

namespace {

std::size_t block_params(const blocks::BfvConfig& b) {
  const std::size_t c = b.channels;
  const std::size_t cpe = 9 * c + c;
  const std::size_t norms = 4 * c;
  const std::size_t lgf = 5 * c + c * c + c;
  const std::size_t ffn = b.ffn == FfnKind::kDualPath
                              ? blocks::Dpffn<float>::param_count(c, b.ratio)
                              : blocks::PlainFfn<float>::param_count(c, blocks::plain_hidden_for(b));
  return cpe + norms + lgf + ffn;
}

}  // namespace

std::uint64_t conv_macs(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t groups, std::uint64_t out_hw) {
  if (groups == 0 || c_in % groups != 0 || c_out % groups != 0) throw ConfigError("conv groups must divide both widths");
  return static_cast<std::uint64_t>(c_in / groups) * c_out * k * k * out_hw;
}

std::uint64_t to_flops(std::uint64_t macs, std::uint64_t generation_ops, FlopConvention conv) {
  return (conv == FlopConvention::kMacAsTwo ? 2 * macs : macs) + generation_ops;
}

std::vector<CostRow> account(const ModelConfig& cfg, std::size_t resolution) {
  cfg.validate();
  if (resolution == 0 || resolution % 32 != 0) {
    throw ConfigError("resolution " + std::to_string(resolution) + " is not a positive multiple of 32");
  }
  std::vector<CostRow> rows;
  const std::size_t s = cfg.stem_channels;
  std::size_t side = resolution / 2;
  std::uint64_t hw = side * side;

  CostRow stem{"stem", 0, 0, 0, side, s};
  stem.params = (3 * s * 9 + s) + 2 * (s * s * 9 + s) + 3 * 2 * s;
  stem.macs = (3 * s * 9 + 2 * s * s * 9) * hw;
  rows.push_back(stem);

  std::size_t prev = s;
  for (std::size_t i = 0; i < 4; ++i) {
    side /= 2;
    hw = side * side;
    const StageConfig& st = cfg.stages[i];
    const blocks::BfvConfig b = cfg.block_config(i);
    CostRow row{"stage" + std::to_string(i + 1), 0, 0, 0, side, st.channels};
    row.params = 4 * prev * st.channels + st.channels;
    row.macs = conv_macs(prev, st.channels, 2, 1, hw);
    row.params += st.depth * block_params(b);
    row.macs += st.depth * blocks::BfvBlock<float>::macs(b, hw);
    row.generation_ops = st.depth * blocks::BfvBlock<float>::generation_ops(b);
    rows.push_back(row);
    prev = st.channels;
  }

  CostRow head{"head", 0, 0, 0, 1, cfg.num_classes};
  head.params = (prev * cfg.projection + cfg.projection) + 2 * cfg.projection +
                (cfg.projection * cfg.num_classes + cfg.num_classes);
  head.macs = static_cast<std::uint64_t>(prev) * cfg.projection * hw +
              static_cast<std::uint64_t>(cfg.projection) * cfg.num_classes;
  rows.push_back(head);
  return rows;
}

std::size_t count_params(const ModelConfig& cfg) {
  std::size_t total = 0;
  for (const auto& r : account(cfg, cfg.resolution)) total += r.params;
  return total;
}

std::uint64_t count_flops(const ModelConfig& cfg, std::size_t resolution, FlopConvention conv) {
  std::uint64_t macs = 0, gen = 0;
  for (const auto& r : account(cfg, resolution)) {
    macs += r.macs;
    gen += r.generation_ops;
  }
  return to_flops(macs, gen, conv);
}

// ---------------------------------------------------------------- checkpoint

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

const AnyTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : entries) {
    if (n == name) return &t;
  }
  return nullptr;
}

template <typename T>
const Tensor<T>& Checkpoint::get(const std::string& name) const {
  const AnyTensor* t = find(name);
  if (!t) throw ConsistencyError("checkpoint has no tensor named '" + name + "'");
  const auto* typed = std::get_if<Tensor<T>>(t);
  if (!typed) throw ConsistencyError("checkpoint tensor '" + name + "' has the wrong dtype");
  return *typed;
}

template const Tensor<float>& Checkpoint::get<float>(const std::string&) const;
template const Tensor<double>& Checkpoint::get<double>(const std::string&) const;

namespace {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}

  template <typename U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const std::uint8_t* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

template <typename T>
Tensor<T> read_tensor(Reader& r, const Shape& shape) {
  const std::size_t n = shape_numel(shape);
  if (n > r.remaining() / sizeof(T)) throw FormatError("checkpoint truncated inside tensor data");
  std::vector<T> data(n);
  std::memcpy(data.data(), r.take(n * sizeof(T)), n * sizeof(T));
  return Tensor<T>(shape, std::move(data));
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out = {'F', 'V', 'I', 'T'};
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& [name, any] : ckpt.entries) {
    if (name.size() > UINT16_MAX) throw FormatError("tensor name too long: " + name.substr(0, 64));
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    std::visit(
        [&](const auto& t) {
          using T = typename std::decay_t<decltype(t)>::value_type;
          out.push_back(std::is_same_v<T, float> ? 0 : 1);
          out.push_back(static_cast<std::uint8_t>(t.rank()));
          for (std::size_t d : t.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
          const auto* raw = reinterpret_cast<const std::uint8_t*>(t.ptr());
          out.insert(out.end(), raw, raw + t.numel() * sizeof(T));
        },
        any);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const std::uint8_t* magic = r.take(4);
  if (std::memcmp(magic, "FVIT", 4) != 0) throw FormatError("not a checkpoint: bad magic");
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.le<std::uint32_t>();
  Checkpoint ckpt;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.le<std::uint16_t>();
    const auto* p = r.take(len);
    std::string name(reinterpret_cast<const char*>(p), len);
    if (!seen.insert(name).second) throw FormatError("duplicate tensor name '" + name + "'");
    const auto dtype = r.le<std::uint8_t>();
    const auto ndim = r.le<std::uint8_t>();
    if (ndim == 0) throw FormatError("tensor '" + name + "' has rank 0");
    Shape shape(ndim);
    for (auto& d : shape) {
      d = r.le<std::uint32_t>();
      if (d == 0) throw FormatError("tensor '" + name + "' has a zero dimension");
    }
    if (dtype == 0) {
      ckpt.put(std::move(name), read_tensor<float>(r, shape));
    } else if (dtype == 1) {
      ckpt.put(std::move(name), read_tensor<double>(r, shape));
    } else {
      throw FormatError("tensor '" + name + "' has unknown dtype tag " + std::to_string(dtype));
    }
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after the last tensor");
  return ckpt;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError("cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("write to '" + path + "' failed");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

// ---------------------------------------------------------------- model

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  using blocks::init_pointwise;
  using blocks::init_spatial_conv;
  const Scope root;
  const std::size_t s = cfg_.stem_channels;
  for (std::size_t i = 0; i < 3; ++i) {
    const Scope sc = root.sub("stem." + std::to_string(i));
    const std::size_t cin = i == 0 ? 3 : s;
    stem_[i].weight = reg_.add(sc("weight"), init_spatial_conv<T>({s, cin, 3, 3}, 1, rng), true);
    stem_[i].bias = reg_.add(sc("bias"), Tensor<T>({s}), false);
    stem_[i].gamma = reg_.add(sc("norm.gamma"), Tensor<T>::ones({s}), false);
    stem_[i].beta = reg_.add(sc("norm.beta"), Tensor<T>({s}), false);
  }
  std::size_t prev = s;
  for (std::size_t i = 0; i < 4; ++i) {
    const Scope st = root.sub("stages." + std::to_string(i));
    const std::size_t c = cfg_.stages[i].channels;
    merge_w_[i] = reg_.add(st("merge.weight"), init_spatial_conv<T>({c, prev, 2, 2}, 1, rng), true);
    merge_b_[i] = reg_.add(st("merge.bias"), Tensor<T>({c}), false);
    const blocks::BfvConfig bc = cfg_.block_config(i);
    for (std::size_t b = 0; b < cfg_.stages[i].depth; ++b) {
      stages_[i].push_back(
          std::make_unique<blocks::BfvBlock<T>>(reg_, st.sub("blocks." + std::to_string(b)), bc, rng));
    }
    prev = c;
  }
  const Scope head = root.sub("head");
  const std::size_t p = cfg_.projection;
  proj_w_ = reg_.add(head("proj.weight"), init_pointwise<T>({p, prev, 1, 1}, rng), true);
  proj_b_ = reg_.add(head("proj.bias"), Tensor<T>({p}), false);
  head_gamma_ = reg_.add(head("norm.gamma"), Tensor<T>::ones({p}), false);
  head_beta_ = reg_.add(head("norm.beta"), Tensor<T>({p}), false);
  fc_w_ = reg_.add(head("fc.weight"), init_pointwise<T>({cfg_.num_classes, p}, rng), true);
  fc_b_ = reg_.add(head("fc.bias"), Tensor<T>({cfg_.num_classes}), false);
}

template <typename T>
Var<T> Model<T>::forward(GradTape<T>& tape, const Tensor<T>& batch, bool training, Rng& rng,
                         std::vector<Shape>* stage_shapes) const {
  if (batch.rank() != 4) throw DimensionError("model input must be N x C x H x W, got " + shape_str(batch.shape()));
  const std::size_t h = batch.dim(2), w = batch.dim(3);
  if (h % 32 != 0 || w % 32 != 0) {
    throw DimensionError("input spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                         " is not divisible by 32");
  }
  Tensor<T> input;
  if (batch.dim(1) == 3) {
    input = batch;
  } else if (batch.dim(1) == 1) {
    input = fvit::concat_channels(fvit::concat_channels(batch, batch), batch);
  } else {
    throw DimensionError("model input needs 1 or 3 channels (axis C), got " + std::to_string(batch.dim(1)));
  }
  const T eps = static_cast<T>(blocks::kNormEps);
  Var<T> x(std::move(input));
  for (std::size_t i = 0; i < 3; ++i) {
    const ConvGeometry g{i == 0 ? std::size_t{2} : std::size_t{1}, 1, 1};
    x = ad::conv2d(tape, x, stem_[i].weight, stem_[i].bias, g);
    x = ad::gelu(tape, ad::layer_norm(tape, x, stem_[i].gamma, stem_[i].beta, eps));
  }
  if (stage_shapes) stage_shapes->clear();
  for (std::size_t i = 0; i < 4; ++i) {
    x = ad::conv2d(tape, x, merge_w_[i], merge_b_[i], ConvGeometry{2, 0, 1});
    for (const auto& block : stages_[i]) x = block->forward(tape, x, training, rng);
    if (stage_shapes) stage_shapes->push_back(x.shape());
  }
  x = ad::conv2d(tape, x, proj_w_, proj_b_, ConvGeometry{});
  x = ad::global_avg_pool(tape, x);
  x = ad::layer_norm(tape, x, head_gamma_, head_beta_, eps);
  return ad::linear(tape, x, fc_w_, fc_b_);
}

template <typename T>
Tensor<T> Model<T>::predict(const Tensor<T>& batch) const {
  GradTape<T> off(false);
  Rng unused(0);
  return forward(off, batch, false, unused).value();
}

template <typename T>
void Model<T>::set_lambda_grad_form(gabor::LambdaGradForm form) {
  for (auto& stage : stages_) {
    for (auto& b : stage) b->lgf.grad_form = form;
  }
}

template <typename T>
void Model<T>::save_state(Checkpoint& ckpt) const {
  for (const auto& p : reg_.params()) ckpt.put("model/" + p.name, p.var.value());
}

template <typename T>
void Model<T>::check_state(const Checkpoint& ckpt) const {
  for (const auto& p : reg_.params()) {
    const Tensor<T>& t = ckpt.get<T>("model/" + p.name);
    if (t.shape() != p.var.shape()) {
      throw ConsistencyError("checkpoint tensor 'model/" + p.name + "' has shape " + shape_str(t.shape()) +
                             ", model expects " + shape_str(p.var.shape()));
    }
  }
}

template <typename T>
void Model<T>::load_state(const Checkpoint& ckpt) {
  check_state(ckpt);
  for (auto& p : reg_.params()) p.var.mutable_value() = ckpt.get<T>("model/" + p.name);
}

template class Model<float>;
template class Model<double>;

}  // namespace fvit::model
