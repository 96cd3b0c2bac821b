#include "fvit/core/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include <unsupported/Eigen/SpecialFunctions>

#include "gemm.hpp"

namespace fvit {

namespace {

std::string axis_error(const char* op, const char* axis, std::size_t got, std::size_t want) {
  return std::string(op) + ": axis '" + axis + "' has size " + std::to_string(got) + ", expected " +
         std::to_string(want);
}

struct ConvDims {
  std::size_t n, c, h, w;
  std::size_t o, cg, kh, kw;
  std::size_t og, ho, wo;
  std::size_t groups, stride, padding;
};

template <typename T>
ConvDims check_conv(const Tensor<T>& input, const Tensor<T>& weight, ConvGeometry geom) {
  if (input.rank() != 4) throw DimensionError("conv2d: input must be NCHW, got " + shape_str(input.shape()));
  if (weight.rank() != 4) throw DimensionError("conv2d: weight must be OIKK, got " + shape_str(weight.shape()));
  if (geom.stride < 1) throw ParameterError("conv2d: stride must be >= 1");
  if (geom.groups < 1) throw ParameterError("conv2d: groups must be >= 1");
  ConvDims d{};
  d.n = input.dim(0);
  d.c = input.dim(1);
  d.h = input.dim(2);
  d.w = input.dim(3);
  d.o = weight.dim(0);
  d.cg = weight.dim(1);
  d.kh = weight.dim(2);
  d.kw = weight.dim(3);
  d.groups = geom.groups;
  d.stride = geom.stride;
  d.padding = geom.padding;
  if (d.c % d.groups != 0) {
    throw DimensionError("conv2d: input channels (axis C) " + std::to_string(d.c) + " not divisible by groups " +
                         std::to_string(d.groups));
  }
  if (d.cg != d.c / d.groups) throw DimensionError(axis_error("conv2d", "weight I", d.cg, d.c / d.groups));
  if (d.o % d.groups != 0) {
    throw DimensionError("conv2d: output channels (axis O) " + std::to_string(d.o) + " not divisible by groups " +
                         std::to_string(d.groups));
  }
  d.og = d.o / d.groups;
  d.ho = conv_out_size(d.h, d.kh, d.stride, d.padding);
  d.wo = conv_out_size(d.w, d.kw, d.stride, d.padding);
  return d;
}

// Dot product with a fixed 8-lane summation order. Eigen's dot peels to the
// first aligned address, which makes the rounding depend on where malloc put
// the buffers; this keeps seeded runs bit-reproducible.
template <typename T>
T lane_dot(const T* a, const T* b, std::size_t n) {
  T lanes[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) lanes[l] += a[i + l] * b[i + l];
  for (std::size_t l = 0; i < n; ++i, ++l) lanes[l] += a[i] * b[i];
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
}


bool is_depthwise(const ConvDims& d) { return d.groups == d.c && d.cg == 1 && d.o == d.c; }

// Valid output range [lo, hi) for kernel offset k along one axis.
inline void valid_range(std::size_t k, const ConvDims& d, std::size_t in, std::size_t out, std::size_t& lo,
                        std::size_t& hi) {
  // input index = o * stride + k - padding must lie in [0, in)
  const long pad = static_cast<long>(d.padding);
  const long kk = static_cast<long>(k);
  const long s = static_cast<long>(d.stride);
  long first = pad - kk;
  first = first <= 0 ? 0 : (first + s - 1) / s;
  long last = static_cast<long>(in) - 1 + pad - kk;  // largest o*s allowed
  long end = last < 0 ? 0 : last / s + 1;
  end = std::min<long>(end, static_cast<long>(out));
  lo = static_cast<std::size_t>(std::min<long>(first, end));
  hi = static_cast<std::size_t>(end);
}

// Column buffer rows: (ci, kh, kw) of one group; columns: (n, oh, ow) for the
// samples [n0, n0 + nb).
template <typename T>
void im2col(const Tensor<T>& input, const ConvDims& d, std::size_t group, std::size_t n0, std::size_t nb,
            std::vector<T>& col) {
  const std::size_t rows = d.cg * d.kh * d.kw;
  const std::size_t plane = d.ho * d.wo;
  const std::size_t cols = nb * plane;
  col.resize(rows * cols);
  const T* in = input.ptr();
  for (std::size_t ci = 0; ci < d.cg; ++ci) {
    const std::size_t c = group * d.cg + ci;
    for (std::size_t ky = 0; ky < d.kh; ++ky) {
      std::size_t ylo, yhi;
      valid_range(ky, d, d.h, d.ho, ylo, yhi);
      for (std::size_t kx = 0; kx < d.kw; ++kx) {
        std::size_t xlo, xhi;
        valid_range(kx, d, d.w, d.wo, xlo, xhi);
        T* row = col.data() + ((ci * d.kh + ky) * d.kw + kx) * cols;
        for (std::size_t n = 0; n < nb; ++n) {
          const T* src = in + ((n0 + n) * d.c + c) * d.h * d.w;
          T* dst = row + n * plane;
          std::fill(dst, dst + ylo * d.wo, T(0));
          std::fill(dst + yhi * d.wo, dst + plane, T(0));
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const std::size_t iy = oy * d.stride + ky - d.padding;
            const T* srow = src + (static_cast<std::ptrdiff_t>(iy * d.w + kx) - static_cast<std::ptrdiff_t>(d.padding));
            T* drow = dst + oy * d.wo;
            std::fill(drow, drow + xlo, T(0));
            std::fill(drow + xhi, drow + d.wo, T(0));
            if (d.stride == 1) {
              std::copy(srow + xlo, srow + xhi, drow + xlo);
            } else {
              for (std::size_t ox = xlo; ox < xhi; ++ox) drow[ox] = srow[ox * d.stride];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const std::vector<T>& col, const ConvDims& d, std::size_t group, std::size_t n0, std::size_t nb,
                Tensor<T>& grad_input) {
  const std::size_t plane = d.ho * d.wo;
  const std::size_t cols = nb * plane;
  T* gin = grad_input.ptr();
  for (std::size_t ci = 0; ci < d.cg; ++ci) {
    const std::size_t c = group * d.cg + ci;
    for (std::size_t ky = 0; ky < d.kh; ++ky) {
      std::size_t ylo, yhi;
      valid_range(ky, d, d.h, d.ho, ylo, yhi);
      for (std::size_t kx = 0; kx < d.kw; ++kx) {
        std::size_t xlo, xhi;
        valid_range(kx, d, d.w, d.wo, xlo, xhi);
        const T* row = col.data() + ((ci * d.kh + ky) * d.kw + kx) * cols;
        for (std::size_t n = 0; n < nb; ++n) {
          T* dst = gin + ((n0 + n) * d.c + c) * d.h * d.w;
          const T* src = row + n * plane;
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const std::size_t iy = oy * d.stride + ky - d.padding;
            T* drow = dst + (static_cast<std::ptrdiff_t>(iy * d.w + kx) - static_cast<std::ptrdiff_t>(d.padding));
            const T* srow = src + oy * d.wo;
            if (d.stride == 1) {
              for (std::size_t ox = xlo; ox < xhi; ++ox) drow[ox] += srow[ox];
            } else {
              for (std::size_t ox = xlo; ox < xhi; ++ox) drow[ox * d.stride] += srow[ox];
            }
          }
        }
      }
    }
  }
}

// Output planes at least this large are written by per-sample GEMMs.
constexpr std::size_t kDirectPlane = 64;

// Samples per im2col chunk, keeping the column buffer near L2 size.
std::size_t chunk_samples(const ConvDims& d) {
  constexpr std::size_t kColBudget = 1 << 16;  // elements
  const std::size_t per = d.cg * d.kh * d.kw * d.ho * d.wo;
  return std::clamp<std::size_t>(kColBudget / std::max<std::size_t>(per, 1), 1, d.n);
}

template <typename T>
void depthwise_forward_strided(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, const ConvDims& d,
                       Tensor<T>& out) {
  const T* in = input.ptr();
  const T* w = weight.ptr();
  T* o = out.ptr();
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const T* src = in + (n * d.c + c) * d.h * d.w;
      T* dst = o + (n * d.c + c) * d.ho * d.wo;
      const T b = bias.defined() ? bias[c] : T(0);
      std::fill(dst, dst + d.ho * d.wo, b);
      const T* wc = w + c * d.kh * d.kw;
      for (std::size_t ky = 0; ky < d.kh; ++ky) {
        std::size_t ylo, yhi;
        valid_range(ky, d, d.h, d.ho, ylo, yhi);
        for (std::size_t kx = 0; kx < d.kw; ++kx) {
          std::size_t xlo, xhi;
          valid_range(kx, d, d.w, d.wo, xlo, xhi);
          const T wv = wc[ky * d.kw + kx];
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const std::size_t iy = oy * d.stride + ky - d.padding;
            const T* srow = src + (static_cast<std::ptrdiff_t>(iy * d.w + kx) - static_cast<std::ptrdiff_t>(d.padding));
            T* drow = dst + oy * d.wo;
            if (d.stride == 1) {
              for (std::size_t ox = xlo; ox < xhi; ++ox) drow[ox] += wv * srow[ox];
            } else {
              for (std::size_t ox = xlo; ox < xhi; ++ox) drow[ox] += wv * srow[ox * d.stride];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void depthwise_backward_strided(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weight, const ConvDims& d,
                        Conv2dGrads<T>& g, bool need_input_grad) {
  const T* in = input.ptr();
  const T* w = weight.ptr();
  const T* go = grad_out.ptr();
  T* gw = g.weight.ptr();
  T* gi = need_input_grad ? g.input.ptr() : nullptr;
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const T* src = in + (n * d.c + c) * d.h * d.w;
      const T* gsrc = go + (n * d.c + c) * d.ho * d.wo;
      T* gdst = gi ? gi + (n * d.c + c) * d.h * d.w : nullptr;
      const T* wc = w + c * d.kh * d.kw;
      T* gwc = gw + c * d.kh * d.kw;
      for (std::size_t ky = 0; ky < d.kh; ++ky) {
        std::size_t ylo, yhi;
        valid_range(ky, d, d.h, d.ho, ylo, yhi);
        for (std::size_t kx = 0; kx < d.kw; ++kx) {
          std::size_t xlo, xhi;
          valid_range(kx, d, d.w, d.wo, xlo, xhi);
          const T wv = wc[ky * d.kw + kx];
          T acc = 0;
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const std::size_t iy = oy * d.stride + ky - d.padding;
            const std::ptrdiff_t off =
                static_cast<std::ptrdiff_t>(iy * d.w + kx) - static_cast<std::ptrdiff_t>(d.padding);
            const T* srow = src + off;
            const T* grow = gsrc + oy * d.wo;
            if (d.stride == 1) {
              for (std::size_t ox = xlo; ox < xhi; ++ox) acc += grow[ox] * srow[ox];
              if (gdst) {
                T* irow = gdst + off;
                for (std::size_t ox = xlo; ox < xhi; ++ox) irow[ox] += wv * grow[ox];
              }
            } else {
              for (std::size_t ox = xlo; ox < xhi; ++ox) acc += grow[ox] * srow[ox * d.stride];
              if (gdst) {
                T* irow = gdst + off;
                for (std::size_t ox = xlo; ox < xhi; ++ox) irow[ox * d.stride] += wv * grow[ox];
              }
            }
          }
          gwc[ky * d.kw + kx] += acc;
        }
      }
    }
  }
}

// Stride-1 depthwise path. Each plane is copied into a zero-padded buffer and
// outputs are computed at the padded row width, so every kernel tap is one
// long contiguous axpy; the wrap-around columns are discarded afterwards.
template <typename T>
void depthwise_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, const ConvDims& d,
                       Tensor<T>& out) {
  if (d.stride != 1) return depthwise_forward_strided(input, weight, bias, d, out);
  const std::size_t hp = d.h + 2 * d.padding, wp = d.w + 2 * d.padding;
  const std::size_t span = (d.ho - 1) * wp + d.wo;
  std::vector<T> pad(hp * wp, T(0));
  std::vector<T> acc(span);
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const T* src = input.ptr() + (n * d.c + c) * d.h * d.w;
      for (std::size_t y = 0; y < d.h; ++y) {
        std::copy_n(src + y * d.w, d.w, pad.data() + (y + d.padding) * wp + d.padding);
      }
      std::fill(acc.begin(), acc.end(), T(0));
      const T* wc = weight.ptr() + c * d.kh * d.kw;
      for (std::size_t ky = 0; ky < d.kh; ++ky) {
        for (std::size_t kx = 0; kx < d.kw; ++kx) {
          const T wv = wc[ky * d.kw + kx];
          const T* tap = pad.data() + ky * wp + kx;
          for (std::size_t i = 0; i < span; ++i) acc[i] += wv * tap[i];
        }
      }
      const T b = bias.defined() ? bias[c] : T(0);
      T* dst = out.ptr() + (n * d.c + c) * d.ho * d.wo;
      for (std::size_t oy = 0; oy < d.ho; ++oy) {
        for (std::size_t ox = 0; ox < d.wo; ++ox) dst[oy * d.wo + ox] = acc[oy * wp + ox] + b;
      }
    }
  }
}

template <typename T>
void depthwise_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weight, const ConvDims& d,
                        Conv2dGrads<T>& g, bool need_input_grad) {
  if (d.stride != 1) return depthwise_backward_strided(grad_out, input, weight, d, g, need_input_grad);
  const std::size_t hp = d.h + 2 * d.padding, wp = d.w + 2 * d.padding;
  const std::size_t span = (d.ho - 1) * wp + d.wo;
  std::vector<T> pad(hp * wp, T(0));
  std::vector<T> gpad(hp * wp);
  std::vector<T> gfull(span, T(0));
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const T* src = input.ptr() + (n * d.c + c) * d.h * d.w;
      for (std::size_t y = 0; y < d.h; ++y) {
        std::copy_n(src + y * d.w, d.w, pad.data() + (y + d.padding) * wp + d.padding);
      }
      const T* go = grad_out.ptr() + (n * d.c + c) * d.ho * d.wo;
      for (std::size_t oy = 0; oy < d.ho; ++oy) std::copy_n(go + oy * d.wo, d.wo, gfull.data() + oy * wp);
      if (need_input_grad) std::fill(gpad.begin(), gpad.end(), T(0));
      const T* wc = weight.ptr() + c * d.kh * d.kw;
      T* gwc = g.weight.ptr() + c * d.kh * d.kw;
      for (std::size_t ky = 0; ky < d.kh; ++ky) {
        for (std::size_t kx = 0; kx < d.kw; ++kx) {
          const std::size_t off = ky * wp + kx;
          const T* tap = pad.data() + off;
          gwc[ky * d.kw + kx] += lane_dot(gfull.data(), tap, span);
          if (need_input_grad) {
            const T wv = wc[ky * d.kw + kx];
            T* gtap = gpad.data() + off;
            for (std::size_t i = 0; i < span; ++i) gtap[i] += wv * gfull[i];
          }
        }
      }
      if (need_input_grad) {
        T* gi = g.input.ptr() + (n * d.c + c) * d.h * d.w;
        for (std::size_t y = 0; y < d.h; ++y) {
          const T* row = gpad.data() + (y + d.padding) * wp + d.padding;
          for (std::size_t x = 0; x < d.w; ++x) gi[y * d.w + x] += row[x];
        }
      }
    }
  }
}

}  // namespace

std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride < 1) throw ParameterError("convolution stride must be >= 1");
  const std::size_t padded = in + 2 * padding;
  if (kernel > padded) {
    throw DimensionError("kernel extent " + std::to_string(kernel) + " exceeds padded input " +
                         std::to_string(padded));
  }
  return (padded - kernel) / stride + 1;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias, ConvGeometry geom) {
  const ConvDims d = check_conv(input, weight, geom);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d.o)) {
    throw DimensionError(axis_error("conv2d", "bias O", bias.numel(), d.o));
  }
  Tensor<T> out({d.n, d.o, d.ho, d.wo});
  if (is_depthwise(d)) {
    depthwise_forward(input, weight, bias, d, out);
    return out;
  }
  const std::size_t plane = d.ho * d.wo;
  const std::size_t rows = d.cg * d.kh * d.kw;
  const std::size_t chunk = chunk_samples(d);
  // Large output planes: GEMM straight into the output, one call per sample.
  const bool direct = plane >= kDirectPlane;
  std::vector<T> col;
  std::vector<T> buf(direct ? 0 : d.og * chunk * plane);
  for (std::size_t g = 0; g < d.groups; ++g) {
    for (std::size_t n0 = 0; n0 < d.n; n0 += chunk) {
      const std::size_t nb = std::min(chunk, d.n - n0);
      const std::size_t cols = nb * plane;
      im2col(input, d, g, n0, nb, col);
      const T* w = weight.ptr() + g * d.og * rows;
      if (direct) {
        for (std::size_t n = 0; n < nb; ++n) {
          T* dst = out.ptr() + ((n0 + n) * d.o + g * d.og) * plane;
          for (std::size_t oo = 0; oo < d.og; ++oo) {
            std::fill_n(dst + oo * plane, plane, bias.defined() ? bias[g * d.og + oo] : T(0));
          }
          detail::gemm(false, false, static_cast<int>(d.og), static_cast<int>(plane), static_cast<int>(rows), T(1), w,
                       static_cast<int>(rows), col.data() + n * plane, static_cast<int>(cols), T(1), dst,
                       static_cast<int>(plane));
        }
        continue;
      }
      detail::gemm(false, false, static_cast<int>(d.og), static_cast<int>(cols), static_cast<int>(rows), T(1), w,
                   static_cast<int>(rows), col.data(), static_cast<int>(cols), T(0), buf.data(),
                   static_cast<int>(cols));
      for (std::size_t n = 0; n < nb; ++n) {
        for (std::size_t oo = 0; oo < d.og; ++oo) {
          const std::size_t o = g * d.og + oo;
          const T b = bias.defined() ? bias[o] : T(0);
          const T* src = buf.data() + oo * cols + n * plane;
          T* dst = out.ptr() + ((n0 + n) * d.o + o) * plane;
          for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + b;
        }
      }
    }
  }
  return out;
}

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weight,
                               bool has_bias, ConvGeometry geom, bool need_input_grad) {
  const ConvDims d = check_conv(input, weight, geom);
  if (grad_out.shape() != Shape{d.n, d.o, d.ho, d.wo}) {
    throw DimensionError("conv2d_backward: grad_out shape " + shape_str(grad_out.shape()) + " does not match output");
  }
  Conv2dGrads<T> g;
  g.weight = Tensor<T>(weight.shape());
  if (need_input_grad) g.input = Tensor<T>(input.shape());
  const std::size_t plane = d.ho * d.wo;
  if (has_bias) {
    g.bias = Tensor<T>({d.o});
    for (std::size_t n = 0; n < d.n; ++n) {
      for (std::size_t o = 0; o < d.o; ++o) {
        const T* src = grad_out.ptr() + (n * d.o + o) * plane;
        T acc = 0;
        for (std::size_t p = 0; p < plane; ++p) acc += src[p];
        g.bias[o] += acc;
      }
    }
  }
  if (is_depthwise(d)) {
    depthwise_backward(grad_out, input, weight, d, g, need_input_grad);
    return g;
  }
  const std::size_t rows = d.cg * d.kh * d.kw;
  const std::size_t chunk = chunk_samples(d);
  const bool direct = plane >= kDirectPlane;
  std::vector<T> col;
  std::vector<T> gbuf(direct ? 0 : d.og * chunk * plane);
  std::vector<T> gcol;
  for (std::size_t grp = 0; grp < d.groups; ++grp) {
    const T* w = weight.ptr() + grp * d.og * rows;
    T* gw = g.weight.ptr() + grp * d.og * rows;
    for (std::size_t n0 = 0; n0 < d.n; n0 += chunk) {
      const std::size_t nb = std::min(chunk, d.n - n0);
      const std::size_t cols = nb * plane;
      im2col(input, d, grp, n0, nb, col);
      if (need_input_grad) gcol.resize(rows * cols);
      if (direct) {
        for (std::size_t n = 0; n < nb; ++n) {
          const T* gy = grad_out.ptr() + ((n0 + n) * d.o + grp * d.og) * plane;
          // dW_g += dY_n * col_n^T
          detail::gemm(false, true, static_cast<int>(d.og), static_cast<int>(rows), static_cast<int>(plane), T(1), gy,
                       static_cast<int>(plane), col.data() + n * plane, static_cast<int>(cols),
                       n0 == 0 && n == 0 ? T(0) : T(1), gw, static_cast<int>(rows));
          if (need_input_grad) {
            // dcol_n = W_g^T * dY_n
            detail::gemm(true, false, static_cast<int>(rows), static_cast<int>(plane), static_cast<int>(d.og), T(1), w,
                         static_cast<int>(rows), gy, static_cast<int>(plane), T(0), gcol.data() + n * plane,
                         static_cast<int>(cols));
          }
        }
      } else {
        for (std::size_t n = 0; n < nb; ++n) {
          for (std::size_t oo = 0; oo < d.og; ++oo) {
            const std::size_t o = grp * d.og + oo;
            std::copy_n(grad_out.ptr() + ((n0 + n) * d.o + o) * plane, plane, gbuf.data() + oo * cols + n * plane);
          }
        }
        detail::gemm(false, true, static_cast<int>(d.og), static_cast<int>(rows), static_cast<int>(cols), T(1),
                     gbuf.data(), static_cast<int>(cols), col.data(), static_cast<int>(cols), n0 == 0 ? T(0) : T(1),
                     gw, static_cast<int>(rows));
        if (need_input_grad) {
          detail::gemm(true, false, static_cast<int>(rows), static_cast<int>(cols), static_cast<int>(d.og), T(1), w,
                       static_cast<int>(rows), gbuf.data(), static_cast<int>(cols), T(0), gcol.data(),
                       static_cast<int>(cols));
        }
      }
      if (need_input_grad) col2im_add(gcol, d, grp, n0, nb, g.input);
    }
  }
  return g;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, T eps,
                     LayerNormCache<T>* cache) {
  if (!(eps > T(0))) throw ParameterError("layer_norm: eps must be > 0");
  if (input.rank() < 2) throw DimensionError("layer_norm: input needs a channel axis, got " + shape_str(input.shape()));
  const std::size_t n = input.dim(0);
  const std::size_t c = input.dim(1);
  const std::size_t s = input.numel() / (n * c);
  if (gamma.numel() != c) throw DimensionError(axis_error("layer_norm", "gamma C", gamma.numel(), c));
  if (beta.numel() != c) throw DimensionError(axis_error("layer_norm", "beta C", beta.numel(), c));
  Tensor<T> out(input.shape());
  std::vector<T> mean(n * s, T(0));
  std::vector<T> rstd(n * s, T(0));
  const T inv_c = T(1) / static_cast<T>(c);
  for (std::size_t b = 0; b < n; ++b) {
    const T* x = input.ptr() + b * c * s;
    T* m = mean.data() + b * s;
    T* r = rstd.data() + b * s;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* row = x + ch * s;
      for (std::size_t p = 0; p < s; ++p) m[p] += row[p];
    }
    for (std::size_t p = 0; p < s; ++p) m[p] *= inv_c;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* row = x + ch * s;
      for (std::size_t p = 0; p < s; ++p) {
        const T dv = row[p] - m[p];
        r[p] += dv * dv;
      }
    }
    for (std::size_t p = 0; p < s; ++p) r[p] = T(1) / std::sqrt(r[p] * inv_c + eps);
    T* y = out.ptr() + b * c * s;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* row = x + ch * s;
      T* yrow = y + ch * s;
      const T gv = gamma[ch];
      const T bv = beta[ch];
      for (std::size_t p = 0; p < s; ++p) yrow[p] = (row[p] - m[p]) * r[p] * gv + bv;
    }
  }
  if (cache) {
    cache->mean = std::move(mean);
    cache->rstd = std::move(rstd);
  }
  return out;
}

template <typename T>
LayerNormGrads<T> layer_norm_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& gamma,
                                      const LayerNormCache<T>& cache) {
  const std::size_t n = input.dim(0);
  const std::size_t c = input.dim(1);
  const std::size_t s = input.numel() / (n * c);
  LayerNormGrads<T> g{Tensor<T>(input.shape()), Tensor<T>({c}), Tensor<T>({c})};
  const T inv_c = T(1) / static_cast<T>(c);
  std::vector<T> sum_dxh(s), sum_dxh_xh(s);
  for (std::size_t b = 0; b < n; ++b) {
    const T* x = input.ptr() + b * c * s;
    const T* dy = grad_out.ptr() + b * c * s;
    const T* m = cache.mean.data() + b * s;
    const T* r = cache.rstd.data() + b * s;
    std::fill(sum_dxh.begin(), sum_dxh.end(), T(0));
    std::fill(sum_dxh_xh.begin(), sum_dxh_xh.end(), T(0));
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* xr = x + ch * s;
      const T* dyr = dy + ch * s;
      const T gv = gamma[ch];
      T gacc = 0, bacc = 0;
      for (std::size_t p = 0; p < s; ++p) {
        const T xh = (xr[p] - m[p]) * r[p];
        const T dxh = dyr[p] * gv;
        sum_dxh[p] += dxh;
        sum_dxh_xh[p] += dxh * xh;
        gacc += dyr[p] * xh;
        bacc += dyr[p];
      }
      g.gamma[ch] += gacc;
      g.beta[ch] += bacc;
    }
    T* dx = g.input.ptr() + b * c * s;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* xr = x + ch * s;
      const T* dyr = dy + ch * s;
      T* dxr = dx + ch * s;
      const T gv = gamma[ch];
      for (std::size_t p = 0; p < s; ++p) {
        const T xh = (xr[p] - m[p]) * r[p];
        dxr[p] = r[p] * (dyr[p] * gv - inv_c * sum_dxh[p] - xh * inv_c * sum_dxh_xh[p]);
      }
    }
  }
  return g;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2) throw DimensionError("linear: weight must be F_out x F_in, got " + shape_str(weight.shape()));
  const std::size_t fin = weight.dim(1);
  const std::size_t fout = weight.dim(0);
  if (input.shape().back() != fin) {
    throw DimensionError(axis_error("linear", "input last", input.shape().back(), fin));
  }
  if (bias.defined() && bias.numel() != fout) throw DimensionError(axis_error("linear", "bias", bias.numel(), fout));
  const std::size_t rows = input.numel() / fin;
  Shape out_shape = input.shape();
  out_shape.back() = fout;
  Tensor<T> out(out_shape);
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(bias.ptr(), fout, out.ptr() + r * fout);
  }
  detail::gemm(false, true, static_cast<int>(rows), static_cast<int>(fout), static_cast<int>(fin), T(1), input.ptr(),
               static_cast<int>(fin), weight.ptr(), static_cast<int>(fin), T(bias.defined() ? 1 : 0), out.ptr(),
               static_cast<int>(fout));
  return out;
}

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& grad_out, const Tensor<T>& input, const Tensor<T>& weight,
                               bool has_bias) {
  const std::size_t fin = weight.dim(1);
  const std::size_t fout = weight.dim(0);
  const std::size_t rows = input.numel() / fin;
  LinearGrads<T> g{Tensor<T>(input.shape()), Tensor<T>(weight.shape()), Tensor<T>()};
  detail::gemm(false, false, static_cast<int>(rows), static_cast<int>(fin), static_cast<int>(fout), T(1),
               grad_out.ptr(), static_cast<int>(fout), weight.ptr(), static_cast<int>(fin), T(0), g.input.ptr(),
               static_cast<int>(fin));
  detail::gemm(true, false, static_cast<int>(fout), static_cast<int>(fin), static_cast<int>(rows), T(1),
               grad_out.ptr(), static_cast<int>(fout), input.ptr(), static_cast<int>(fin), T(0), g.weight.ptr(),
               static_cast<int>(fin));
  if (has_bias) {
    g.bias = Tensor<T>({fout});
    for (std::size_t r = 0; r < rows; ++r) {
      const T* src = grad_out.ptr() + r * fout;
      for (std::size_t f = 0; f < fout; ++f) g.bias[f] += src[f];
    }
  }
  return g;
}

// Eigen's vectorized erf/exp differ from their scalar fallbacks in the last
// bit, and Eigen picks the scalar path for the unaligned head of a buffer.
// Staging through aligned blocks makes the choice depend on the index only.
constexpr std::size_t kGeluBlock = 512;

template <typename T>
using AlignedArray = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>, Eigen::Aligned64>;

template <typename T>
Tensor<T> gelu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  alignas(64) T xb[kGeluBlock];
  alignas(64) T yb[kGeluBlock];
  for (std::size_t i = 0; i < input.numel(); i += kGeluBlock) {
    const std::size_t len = std::min(kGeluBlock, input.numel() - i);
    std::copy_n(input.ptr() + i, len, xb);
    const AlignedArray<T> x(xb, static_cast<Eigen::Index>(len));
    AlignedArray<T> y(yb, static_cast<Eigen::Index>(len));
    y = T(0.5) * x * (T(1) + (x * inv_sqrt2).erf());
    std::copy_n(yb, len, out.ptr() + i);
  }
  return out;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& grad_out, const Tensor<T>& input) {
  Tensor<T> g(input.shape());
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  const T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  alignas(64) T xb[kGeluBlock];
  alignas(64) T gb[kGeluBlock];
  for (std::size_t i = 0; i < input.numel(); i += kGeluBlock) {
    const std::size_t len = std::min(kGeluBlock, input.numel() - i);
    std::copy_n(input.ptr() + i, len, xb);
    std::copy_n(grad_out.ptr() + i, len, gb);
    const AlignedArray<T> x(xb, static_cast<Eigen::Index>(len));
    AlignedArray<T> gy(gb, static_cast<Eigen::Index>(len));
    gy = gy * (T(0.5) * (T(1) + (x * inv_sqrt2).erf()) + x * (inv_sqrt2pi * (T(-0.5) * x.square()).exp()));
    std::copy_n(gb, len, g.ptr() + i);
  }
  return g;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  if (input.rank() != 4) throw DimensionError("global_avg_pool: input must be NCHW, got " + shape_str(input.shape()));
  const std::size_t n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  Tensor<T> out({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    const T* src = input.ptr() + i * plane;
    T acc = 0;
    for (std::size_t p = 0; p < plane; ++p) acc += src[p];
    out[i] = acc / static_cast<T>(plane);
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& grad_out, const Shape& input_shape) {
  Tensor<T> g(input_shape);
  const std::size_t plane = input_shape[2] * input_shape[3];
  const T scale = T(1) / static_cast<T>(plane);
  for (std::size_t i = 0; i < grad_out.numel(); ++i) {
    std::fill_n(g.ptr() + i * plane, plane, grad_out[i] * scale);
  }
  return g;
}

template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels,
                                            T label_smoothing) {
  if (logits.rank() != 2) throw DimensionError("softmax_cross_entropy: logits must be N x K");
  if (!(label_smoothing >= T(0) && label_smoothing < T(1))) {
    throw ParameterError("softmax_cross_entropy: label_smoothing must lie in [0, 1)");
  }
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) throw DimensionError(axis_error("softmax_cross_entropy", "labels N", labels.size(), n));
  CrossEntropyResult<T> res;
  res.grad_logits = Tensor<T>(logits.shape());
  const T off = label_smoothing / static_cast<T>(k);
  const T on = T(1) - label_smoothing + off;
  const T inv_n = T(1) / static_cast<T>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::int32_t y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw UsageError("softmax_cross_entropy: label " + std::to_string(y) + " at row " + std::to_string(i) +
                       " outside [0, " + std::to_string(k) + ")");
    }
    const T* z = logits.ptr() + i * k;
    T* g = res.grad_logits.ptr() + i * k;
    const T zmax = *std::max_element(z, z + k);
    T sum = 0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - zmax);
    const T log_sum = std::log(sum);
    T loss = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const T logp = z[j] - zmax - log_sum;
      const T q = (static_cast<std::size_t>(y) == j) ? on : off;
      loss -= q * logp;
      g[j] = (std::exp(logp) - q) * inv_n;
    }
    total += static_cast<double>(loss);
  }
  res.loss = static_cast<T>(total / static_cast<double>(n));
  return res;
}

template <typename T>
std::vector<std::int32_t> argmax_rows(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<std::int32_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* z = logits.ptr() + i * k;
    out[i] = static_cast<std::int32_t>(std::max_element(z, z + k) - z);
  }
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, std::size_t begin, std::size_t count) {
  const std::size_t n = input.dim(0), c = input.dim(1);
  if (count == 0 || begin + count > c) throw DimensionError("slice_channels: range exceeds channel axis");
  const std::size_t s = input.numel() / (n * c);
  Shape shape = input.shape();
  shape[1] = count;
  Tensor<T> out(shape);
  for (std::size_t b = 0; b < n; ++b) {
    std::copy_n(input.ptr() + (b * c + begin) * s, count * s, out.ptr() + b * count * s);
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || a.dim(0) != b.dim(0)) throw DimensionError("concat_channels: batch mismatch");
  for (std::size_t i = 2; i < a.rank(); ++i) {
    if (a.dim(i) != b.dim(i)) throw DimensionError("concat_channels: spatial mismatch on axis " + std::to_string(i));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t s = a.numel() / (n * ca);
  Shape shape = a.shape();
  shape[1] = ca + cb;
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.ptr() + i * ca * s, ca * s, out.ptr() + i * (ca + cb) * s);
    std::copy_n(b.ptr() + i * cb * s, cb * s, out.ptr() + (i * (ca + cb) + ca) * s);
  }
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src) {
  if (dst.shape() != src.shape()) {
    throw DimensionError("add: shape " + shape_str(dst.shape()) + " vs " + shape_str(src.shape()));
  }
  T* d = dst.ptr();
  const T* s = src.ptr();
  for (std::size_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = a;
  add_inplace(out, b);
  return out;
}

#define FVIT_INSTANTIATE_OPS(T)                                                                                     \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, ConvGeometry);                   \
  template Conv2dGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, bool, ConvGeometry, \
                                          bool);                                                                    \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T, LayerNormCache<T>*);      \
  template LayerNormGrads<T> layer_norm_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                                 const LayerNormCache<T>&);                                         \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                                  \
  template LinearGrads<T> linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, bool);              \
  template Tensor<T> gelu(const Tensor<T>&);                                                                        \
  template Tensor<T> gelu_backward(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                             \
  template Tensor<T> global_avg_pool_backward(const Tensor<T>&, const Shape&);                                      \
  template CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>&, std::span<const std::int32_t>, T);        \
  template std::vector<std::int32_t> argmax_rows(const Tensor<T>&);                                                 \
  template Tensor<T> slice_channels(const Tensor<T>&, std::size_t, std::size_t);                                    \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                                           \
  template void add_inplace(Tensor<T>&, const Tensor<T>&);                                                          \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);

FVIT_INSTANTIATE_OPS(float)
FVIT_INSTANTIATE_OPS(double)

}  // namespace fvit
