#pragma once

// Differentiable layers over NCHW batches. Forward functions return fresh
// tensors; backward functions accumulate parameter gradients into caller
// provided spans so a model can keep every gradient in one flat buffer.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dmcl/tensor.hpp"

namespace dmcl {

struct ConvGeometry {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_extent(std::size_t in) const {
    if (in + 2 * padding < kernel) throw std::invalid_argument("conv2d: kernel larger than padded input");
    return (in + 2 * padding - kernel) / stride + 1;
  }
  std::size_t weight_count() const { return out_channels * in_channels * kernel * kernel; }
};

namespace detail {

// Output columns [lo, hi) whose input column ox*stride + k - pad lies in [0, extent).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out_extent, std::size_t in_extent,
                                                       std::size_t k, std::size_t stride,
                                                       std::size_t pad) {
  std::size_t lo = 0;
  if (k < pad) lo = (pad - k + stride - 1) / stride;
  // largest o with o*stride + k - pad <= in_extent - 1
  const std::ptrdiff_t top = static_cast<std::ptrdiff_t>(in_extent) - 1 + static_cast<std::ptrdiff_t>(pad) -
                             static_cast<std::ptrdiff_t>(k);
  if (top < 0) return {0, 0};
  std::size_t hi = static_cast<std::size_t>(top) / stride + 1;
  hi = std::min(hi, out_extent);
  if (lo > hi) lo = hi;
  return {lo, hi};
}

inline void require_rank4(const Shape& shape, const char* what) {
  if (shape.size() != 4) throw ShapeError(std::string(what) + " expects NxCxHxW input", Shape{0, 0, 0, 0}, shape);
}

}  // namespace detail

namespace detail {

// Unfolds a batch into a (Cin*k*k) x (N*OH*OW) matrix; padded taps are zero.
template <typename T>
std::vector<T> im2col(const Tensor<T>& input, const ConvGeometry& g, std::size_t oh, std::size_t ow) {
  const std::size_t n_batch = input.dim(0), h = input.dim(2), w = input.dim(3);
  const std::size_t k = g.kernel, s = g.stride, p = g.padding;
  const std::size_t plane = oh * ow, cols = n_batch * plane;
  std::vector<T> col(g.in_channels * k * k * cols, T{0});
  for (std::size_t ci = 0; ci < g.in_channels; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky) {
      const auto [ylo, yhi] = valid_range(oh, h, ky, s, p);
      for (std::size_t kx = 0; kx < k; ++kx) {
        const auto [xlo, xhi] = valid_range(ow, w, kx, s, p);
        T* row = col.data() + ((ci * k + ky) * k + kx) * cols;
        for (std::size_t n = 0; n < n_batch; ++n) {
          const T* src = input.data() + (n * g.in_channels + ci) * h * w;
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const T* in_row = src + (oy * s + ky - p) * w + (xlo * s + kx - p);
            T* dst = row + n * plane + oy * ow;
            for (std::size_t ox = xlo; ox < xhi; ++ox) dst[ox] = in_row[(ox - xlo) * s];
          }
        }
      }
    }
  return col;
}

// Dot product with eight independent partial sums so the loop vectorizes
// without reassociation flags; the summation order is fixed.
template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
  T part[8] = {};
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8)
    for (std::size_t l = 0; l < 8; ++l) part[l] += a[j + l] * b[j + l];
  T acc = ((part[0] + part[1]) + (part[2] + part[3])) + ((part[4] + part[5]) + (part[6] + part[7]));
  for (; j < n; ++j) acc += a[j] * b[j];
  return acc;
}

}  // namespace detail

// Cross-correlation through an unfolded input matrix. input: N x Cin x H x W,
// weights: Cout x Cin x k x k, bias: Cout or empty.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, std::span<const T> weights, std::span<const T> bias,
                         const ConvGeometry& g) {
  detail::require_rank4(input.shape(), "conv2d");
  if (input.dim(1) != g.in_channels)
    throw ShapeError("conv2d: input channels do not match kernel channels",
                     Shape{g.out_channels, g.in_channels, g.kernel, g.kernel}, input.shape());
  if (g.kernel % 2 == 0) throw std::invalid_argument("conv2d: kernel size must be odd");
  if (weights.size() != g.weight_count()) throw ShapeError("conv2d weights", Shape{g.weight_count()}, Shape{weights.size()});
  if (!bias.empty() && bias.size() != g.out_channels) throw ShapeError("conv2d bias", Shape{g.out_channels}, Shape{bias.size()});

  const std::size_t n_batch = input.dim(0);
  const std::size_t oh = g.out_extent(input.dim(2)), ow = g.out_extent(input.dim(3));
  const std::size_t plane = oh * ow, cols = n_batch * plane, taps = g.in_channels * g.kernel * g.kernel;
  const std::vector<T> col = detail::im2col(input, g, oh, ow);

  std::vector<T> acc(cols);
  Tensor<T> out({n_batch, g.out_channels, oh, ow});
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    std::fill(acc.begin(), acc.end(), bias.empty() ? T{0} : bias[co]);
    const T* wrow = weights.data() + co * taps;
    for (std::size_t t = 0; t < taps; ++t) {
      const T wv = wrow[t];
      const T* crow = col.data() + t * cols;
      for (std::size_t j = 0; j < cols; ++j) acc[j] += wv * crow[j];
    }
    for (std::size_t n = 0; n < n_batch; ++n)
      std::copy_n(acc.data() + n * plane, plane, out.data() + (n * g.out_channels + co) * plane);
  }
  return out;
}

// Single-image convenience form: input C x H x W, kernels Cout x Cin x k x k.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  if (input.rank() != 3) throw ShapeError("conv2d expects CxHxW input", Shape{0, 0, 0}, input.shape());
  if (kernels.rank() != 4 || kernels.dim(2) != kernels.dim(3))
    throw ShapeError("conv2d expects square CoutxCinxkxk kernels", Shape{0, 0, 0, 0}, kernels.shape());
  if (kernels.dim(1) != input.dim(0))
    throw ShapeError("conv2d: input channels " + std::to_string(input.dim(0)) + " do not match kernel channels " +
                         std::to_string(kernels.dim(1)),
                     kernels.shape(), input.shape());
  const ConvGeometry g{input.dim(0), kernels.dim(0), kernels.dim(2), stride, padding};
  Tensor<T> batched(Shape{1, input.dim(0), input.dim(1), input.dim(2)},
                    std::vector<T>(input.values().begin(), input.values().end()));
  Tensor<T> out = conv2d_forward<T>(batched, kernels.values(), bias.values(), g);
  out.reshape({out.dim(1), out.dim(2), out.dim(3)});
  return out;
}

// Accumulates dL/dweights and dL/dbias (if non-empty) and returns dL/dinput
// when want_input_grad is set (an empty tensor otherwise).
template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& input, std::span<const T> weights, const Tensor<T>& grad_out,
                          const ConvGeometry& g, std::span<T> grad_weights, std::span<T> grad_bias,
                          bool want_input_grad = true) {
  const std::size_t n_batch = input.dim(0), h = input.dim(2), w = input.dim(3);
  const std::size_t oh = grad_out.dim(2), ow = grad_out.dim(3);
  const std::size_t k = g.kernel, s = g.stride, p = g.padding;
  const std::size_t plane = oh * ow, cols = n_batch * plane, taps = g.in_channels * k * k;
  const std::vector<T> col = detail::im2col(input, g, oh, ow);

  // grad_out as Cout x (N*OH*OW)
  std::vector<T> gmat(g.out_channels * cols);
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t co = 0; co < g.out_channels; ++co)
      std::copy_n(grad_out.data() + (n * g.out_channels + co) * plane, plane, gmat.data() + co * cols + n * plane);

  for (std::size_t co = 0; co < g.out_channels; ++co) {
    const T* grow = gmat.data() + co * cols;
    if (!grad_bias.empty()) {
      T acc{0};
      for (std::size_t j = 0; j < cols; ++j) acc += grow[j];
      grad_bias[co] += acc;
    }
    T* gw = grad_weights.data() + co * taps;
    for (std::size_t t = 0; t < taps; ++t) gw[t] += detail::dot(grow, col.data() + t * cols, cols);
  }

  Tensor<T> grad_in;
  if (!want_input_grad) return grad_in;
  grad_in = Tensor<T>(input.shape());
  std::vector<T> dcol(cols);
  for (std::size_t ci = 0; ci < g.in_channels; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const std::size_t t = (ci * k + ky) * k + kx;
        std::fill(dcol.begin(), dcol.end(), T{0});
        for (std::size_t co = 0; co < g.out_channels; ++co) {
          const T wv = weights[co * taps + t];
          const T* grow = gmat.data() + co * cols;
          for (std::size_t j = 0; j < cols; ++j) dcol[j] += wv * grow[j];
        }
        const auto [ylo, yhi] = detail::valid_range(oh, h, ky, s, p);
        const auto [xlo, xhi] = detail::valid_range(ow, w, kx, s, p);
        for (std::size_t n = 0; n < n_batch; ++n) {
          T* dst = grad_in.data() + (n * g.in_channels + ci) * h * w;
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            T* in_row = dst + (oy * s + ky - p) * w + (xlo * s + kx - p);
            const T* src = dcol.data() + n * plane + oy * ow;
            for (std::size_t ox = xlo; ox < xhi; ++ox) in_row[(ox - xlo) * s] += src[ox];
          }
        }
      }
  return grad_in;
}

enum class NormMode { train, eval, frozen };

inline const char* to_string(NormMode mode) {
  switch (mode) {
    case NormMode::train: return "train";
    case NormMode::eval: return "eval";
    case NormMode::frozen: return "frozen";
  }
  return "?";
}

struct NormSettings {
  double momentum = 0.1;
  double epsilon = 1e-5;
};

// Per-channel normalization parameters living inside a model's flat buffers.
template <typename T>
struct NormView {
  std::span<const T> scale;
  std::span<const T> shift;
  std::span<T> running_mean;
  std::span<T> running_var;
};

template <typename T>
struct NormCache {
  Tensor<T> normalized;       // x-hat
  std::vector<T> inv_std;     // per channel
  NormMode mode = NormMode::eval;
};

// Batch normalization. Train mode normalizes with biased batch statistics and
// moves the running statistics by `momentum`; eval and frozen modes use the
// running statistics and never modify them.
template <typename T>
Tensor<T> norm_forward(const Tensor<T>& input, NormView<T> state, NormMode mode, const NormSettings& settings,
                       NormCache<T>* cache = nullptr) {
  detail::require_rank4(input.shape(), "norm_layer");
  const std::size_t n_batch = input.dim(0), channels = input.dim(1), plane = input.dim(2) * input.dim(3);
  if (state.scale.size() != channels) throw ShapeError("norm_layer channels", Shape{state.scale.size()}, input.shape());
  const std::size_t count = n_batch * plane;

  Tensor<T> out(input.shape());
  Tensor<T> xhat(input.shape());
  std::vector<T> inv_std(channels);
  const T eps = static_cast<T>(settings.epsilon);

  for (std::size_t c = 0; c < channels; ++c) {
    T mean, var;
    if (mode == NormMode::train) {
      double sum = 0.0;
      for (std::size_t n = 0; n < n_batch; ++n) {
        const T* x = input.data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) sum += x[i];
      }
      const double mu = sum / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t n = 0; n < n_batch; ++n) {
        const T* x = input.data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = x[i] - mu;
          sq += d * d;
        }
      }
      mean = static_cast<T>(mu);
      var = static_cast<T>(sq / static_cast<double>(count));
      const T m = static_cast<T>(settings.momentum);
      state.running_mean[c] = (T{1} - m) * state.running_mean[c] + m * mean;
      state.running_var[c] = (T{1} - m) * state.running_var[c] + m * var;
    } else {
      mean = state.running_mean[c];
      var = state.running_var[c];
    }
    const T istd = T{1} / std::sqrt(var + eps);
    inv_std[c] = istd;
    const T gamma = state.scale[c], beta = state.shift[c];
    for (std::size_t n = 0; n < n_batch; ++n) {
      const std::size_t off = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T xh = (input[off + i] - mean) * istd;
        xhat[off + i] = xh;
        out[off + i] = gamma * xh + beta;
      }
    }
  }
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->mode = mode;
  }
  return out;
}

// Returns dL/dinput; accumulates scale/shift gradients except in frozen mode.
template <typename T>
Tensor<T> norm_backward(const Tensor<T>& grad_out, const NormCache<T>& cache, std::span<const T> scale,
                        std::span<T> grad_scale, std::span<T> grad_shift) {
  const std::size_t n_batch = grad_out.dim(0), channels = grad_out.dim(1),
                    plane = grad_out.dim(2) * grad_out.dim(3);
  const std::size_t count = n_batch * plane;
  Tensor<T> grad_in(grad_out.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    T sum_dy{0}, sum_dy_xhat{0};
    for (std::size_t n = 0; n < n_batch; ++n) {
      const std::size_t off = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += grad_out[off + i];
        sum_dy_xhat += grad_out[off + i] * cache.normalized[off + i];
      }
    }
    if (cache.mode != NormMode::frozen) {
      grad_scale[c] += sum_dy_xhat;
      grad_shift[c] += sum_dy;
    }
    const T gamma = scale[c], istd = cache.inv_std[c];
    if (cache.mode == NormMode::train) {
      const T inv_count = T{1} / static_cast<T>(count);
      for (std::size_t n = 0; n < n_batch; ++n) {
        const std::size_t off = (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i)
          grad_in[off + i] = gamma * istd * inv_count *
                             (static_cast<T>(count) * grad_out[off + i] - sum_dy - cache.normalized[off + i] * sum_dy_xhat);
      }
    } else {
      for (std::size_t n = 0; n < n_batch; ++n) {
        const std::size_t off = (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) grad_in[off + i] = gamma * istd * grad_out[off + i];
      }
    }
  }
  return grad_in;
}

template <typename T>
Tensor<T> relu_forward(Tensor<T> x) {
  for (T& v : x.values()) v = v > T{0} ? v : T{0};
  return x;
}

// `output` is the ReLU output; its positive entries mark the pass-through set.
template <typename T>
Tensor<T> relu_backward(Tensor<T> grad_out, const Tensor<T>& output) {
  for (std::size_t i = 0; i < grad_out.size(); ++i)
    if (!(output[i] > T{0})) grad_out[i] = T{0};
  return grad_out;
}

// N x C x H x W -> N x C
template <typename T>
Tensor<T> global_avg_pool_forward(const Tensor<T>& x) {
  detail::require_rank4(x.shape(), "global_avg_pool");
  const std::size_t n_batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out({n_batch, channels});
  for (std::size_t nc = 0; nc < n_batch * channels; ++nc) {
    T acc{0};
    for (std::size_t i = 0; i < plane; ++i) acc += x[nc * plane + i];
    out[nc] = acc / static_cast<T>(plane);
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& grad_out, const Shape& input_shape) {
  Tensor<T> grad_in(input_shape);
  const std::size_t plane = input_shape[2] * input_shape[3];
  for (std::size_t nc = 0; nc < grad_out.size(); ++nc) {
    const T g = grad_out[nc] / static_cast<T>(plane);
    for (std::size_t i = 0; i < plane; ++i) grad_in[nc * plane + i] = g;
  }
  return grad_in;
}

// N x In -> N x Out with weights Out x In.
template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, std::span<const T> weights, std::span<const T> bias) {
  if (x.rank() != 2) throw ShapeError("dense expects NxIn input", Shape{0, 0}, x.shape());
  const std::size_t n_batch = x.dim(0), in = x.dim(1), out_dim = bias.size();
  if (weights.size() != in * out_dim) throw ShapeError("dense weights", Shape{out_dim, in}, Shape{weights.size()});
  Tensor<T> out({n_batch, out_dim});
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t o = 0; o < out_dim; ++o) {
      T acc = bias[o];
      for (std::size_t i = 0; i < in; ++i) acc += weights[o * in + i] * x[n * in + i];
      out[n * out_dim + o] = acc;
    }
  return out;
}

template <typename T>
Tensor<T> dense_backward(const Tensor<T>& x, std::span<const T> weights, const Tensor<T>& grad_out,
                         std::span<T> grad_weights, std::span<T> grad_bias) {
  const std::size_t n_batch = x.dim(0), in = x.dim(1), out_dim = grad_out.dim(1);
  Tensor<T> grad_in(x.shape());
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t o = 0; o < out_dim; ++o) {
      const T g = grad_out[n * out_dim + o];
      grad_bias[o] += g;
      for (std::size_t i = 0; i < in; ++i) {
        grad_weights[o * in + i] += g * x[n * in + i];
        grad_in[n * in + i] += g * weights[o * in + i];
      }
    }
  return grad_in;
}

struct BceResult {
  double loss;
  double grad;  // d loss / d logit
};

// Binary cross entropy on a logit, stable for large |logit|:
// loss = max(z, 0) - z*y + log(1 + exp(-|z|)).
inline BceResult bce_loss(double logit, int label) {
  const double y = label ? 1.0 : 0.0;
  const double loss = std::max(logit, 0.0) - logit * y + std::log1p(std::exp(-std::abs(logit)));
  const double sigma = logit >= 0 ? 1.0 / (1.0 + std::exp(-logit)) : std::exp(logit) / (1.0 + std::exp(logit));
  return {loss, sigma - y};
}

inline double sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

}  // namespace dmcl
