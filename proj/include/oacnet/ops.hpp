#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "oacnet/tensor.hpp"

namespace oacnet {

enum class Mode { train, eval };

namespace detail {

/// Views a rank-3 tensor as a batch of one.
inline Tensor as_batch(const Tensor& t, const char* what) {
  if (t.rank() == 4) return t;
  if (t.rank() == 3) return t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)});
  throw ShapeError(std::string(what) + ": expected rank 3 or 4, got " + shape_string(t.shape()));
}

inline Tensor like_input(Tensor batched, const Tensor& original) {
  if (original.rank() == 4) return batched;
  return batched.reshaped({batched.dim(1), batched.dim(2), batched.dim(3)});
}

/// (outer, channels, inner) factorization used by per-channel operations.
struct ChannelLayout {
  std::size_t outer;
  std::size_t channels;
  std::size_t inner;
};

inline ChannelLayout channel_layout(const Tensor& x, const char* what) {
  switch (x.rank()) {
    case 2: return {x.dim(0), x.dim(1), 1};
    case 3: return {1, x.dim(0), x.dim(1) * x.dim(2)};
    case 4: return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
    default:
      throw ShapeError(std::string(what) + ": unsupported rank " + shape_string(x.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, no kernel flip. Input D_in x H x W (or batched
// B x D_in x H x W), weights D_out x D_in x k x k, bias D_out.
// ---------------------------------------------------------------------------

inline void check_conv_shapes(const Tensor& input, const Tensor& weights, const Tensor& bias,
                              std::size_t padding) {
  require_rank(weights, 4, "conv2d weights");
  require_rank(bias, 1, "conv2d bias");
  const std::size_t in_ch = input.dim(input.rank() - 3);
  if (weights.dim(1) != in_ch) {
    throw ShapeError("conv2d: input has " + std::to_string(in_ch) + " channels, weights expect " +
                     std::to_string(weights.dim(1)));
  }
  if (weights.dim(2) != weights.dim(3) || weights.dim(2) % 2 == 0) {
    throw ShapeError("conv2d: kernel must be square with odd size, got " + shape_string(weights.shape()));
  }
  if (bias.dim(0) != weights.dim(0)) throw ShapeError("conv2d: bias length does not match output channels");
  const std::size_t k = weights.dim(2);
  const std::size_t h = input.dim(input.rank() - 2) + 2 * padding;
  const std::size_t w = input.dim(input.rank() - 1) + 2 * padding;
  if (h < k || w < k) throw ShapeError("conv2d: non-positive output size");
}

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  std::size_t batch, in_ch, h, w, out_ch, k, oh, ow;
  long pad;
  std::size_t rows() const { return in_ch * k * k; }
  std::size_t cols() const { return batch * oh * ow; }
};

inline ConvGeometry conv_geometry(const Tensor& x, const Tensor& weights, std::size_t padding) {
  const std::size_t k = weights.dim(2);
  const std::size_t h = x.dim(2), w = x.dim(3);
  return {x.dim(0), x.dim(1), h, w, weights.dim(0), k, h + 2 * padding - k + 1, w + 2 * padding - k + 1,
          static_cast<long>(padding)};
}

/// Row (ic, ky, kx), column (b, y, x); zero where the window hits padding.
inline RowMatrix im2col(const Tensor& x, const ConvGeometry& g) {
  RowMatrix col = RowMatrix::Zero(static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
  const auto in = x.data();
  for (std::size_t ic = 0; ic < g.in_ch; ++ic)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = col.data() + ((ic * g.k + ky) * g.k + kx) * g.cols();
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* src = &in[(b * g.in_ch + ic) * g.h * g.w];
          for (std::size_t y = 0; y < g.oh; ++y) {
            const long sy = static_cast<long>(y + ky) - g.pad;
            if (sy < 0 || sy >= static_cast<long>(g.h)) continue;
            for (std::size_t xx = 0; xx < g.ow; ++xx) {
              const long sx = static_cast<long>(xx + kx) - g.pad;
              if (sx < 0 || sx >= static_cast<long>(g.w)) continue;
              row[(b * g.oh + y) * g.ow + xx] = src[sy * static_cast<long>(g.w) + sx];
            }
          }
        }
      }
  return col;
}

inline void col2im_add(const RowMatrix& col, const ConvGeometry& g, Tensor& grad_input) {
  auto gi = grad_input.data();
  for (std::size_t ic = 0; ic < g.in_ch; ++ic)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = col.data() + ((ic * g.k + ky) * g.k + kx) * g.cols();
        for (std::size_t b = 0; b < g.batch; ++b) {
          double* dst = &gi[(b * g.in_ch + ic) * g.h * g.w];
          for (std::size_t y = 0; y < g.oh; ++y) {
            const long sy = static_cast<long>(y + ky) - g.pad;
            if (sy < 0 || sy >= static_cast<long>(g.h)) continue;
            for (std::size_t xx = 0; xx < g.ow; ++xx) {
              const long sx = static_cast<long>(xx + kx) - g.pad;
              if (sx < 0 || sx >= static_cast<long>(g.w)) continue;
              dst[sy * static_cast<long>(g.w) + sx] += row[(b * g.oh + y) * g.ow + xx];
            }
          }
        }
      }
}

inline Eigen::Map<const RowMatrix> weight_matrix(const Tensor& weights) {
  return {weights.data().data(), static_cast<Eigen::Index>(weights.dim(0)),
          static_cast<Eigen::Index>(weights.size() / weights.dim(0))};
}

}  // namespace detail

/// Cross-correlation (no kernel flip) with zero padding, via im2col and GEMM.
inline Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, std::size_t padding = 0) {
  const Tensor x = detail::as_batch(input, "conv2d input");
  check_conv_shapes(x, weights, bias, padding);
  const auto g = detail::conv_geometry(x, weights, padding);
  const detail::RowMatrix y = detail::weight_matrix(weights) * detail::im2col(x, g);
  const std::size_t plane = g.oh * g.ow;
  Tensor out({g.batch, g.out_ch, g.oh, g.ow});
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t oc = 0; oc < g.out_ch; ++oc) {
      const double* src = y.data() + oc * g.cols() + b * plane;
      double* dst = &out.data()[(b * g.out_ch + oc) * plane];
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bias[oc];
    }
  return detail::like_input(std::move(out), input);
}

struct Conv2dGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

inline Conv2dGrads conv2d_backward(const Tensor& input, const Tensor& weights, std::size_t padding,
                                   const Tensor& grad_output) {
  const Tensor x = detail::as_batch(input, "conv2d_backward input");
  const Tensor go = detail::as_batch(grad_output, "conv2d_backward grad");
  const auto g = detail::conv_geometry(x, weights, padding);
  if (go.shape() != Shape{g.batch, g.out_ch, g.oh, g.ow}) {
    throw ShapeError("conv2d_backward: grad shape " + shape_string(go.shape()));
  }
  const std::size_t plane = g.oh * g.ow;
  detail::RowMatrix gm(static_cast<Eigen::Index>(g.out_ch), static_cast<Eigen::Index>(g.cols()));
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t oc = 0; oc < g.out_ch; ++oc) {
      const double* src = &go.data()[(b * g.out_ch + oc) * plane];
      std::copy(src, src + plane, gm.data() + oc * g.cols() + b * plane);
    }

  Conv2dGrads grads{Tensor(x.shape()), Tensor(weights.shape()), Tensor({g.out_ch})};
  const detail::RowMatrix col = detail::im2col(x, g);
  Eigen::Map<detail::RowMatrix> gw(grads.weights.data().data(), static_cast<Eigen::Index>(g.out_ch),
                                   static_cast<Eigen::Index>(g.rows()));
  gw.noalias() = gm * col.transpose();
  for (std::size_t oc = 0; oc < g.out_ch; ++oc) grads.bias[oc] = gm.row(static_cast<Eigen::Index>(oc)).sum();
  const detail::RowMatrix gcol = detail::weight_matrix(weights).transpose() * gm;
  detail::col2im_add(gcol, g, grads.input);
  grads.input = detail::like_input(std::move(grads.input), input);
  return grads;
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.data()) v = std::max(v, 0.0);
  return y;
}

/// Gradient of relu given its input; the kink at 0 takes gradient 0.
inline Tensor relu_backward(const Tensor& x, const Tensor& grad_output) {
  x.require_same_shape(grad_output, "relu_backward");
  Tensor g = grad_output;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(x[i] > 0.0)) g[i] = 0.0;
  }
  return g;
}

// ---------------------------------------------------------------------------
// l2_normalize_channels: divides each channel vector by max(norm, eps).
// Rank 3 is D x H x W; rank 4 is B x D x H x W.
// ---------------------------------------------------------------------------

inline constexpr double kDefaultNormEpsilon = 1e-12;

inline Tensor l2_normalize_channels(const Tensor& x, double epsilon = kDefaultNormEpsilon) {
  const auto [outer, channels, inner] = detail::channel_layout(x, "l2_normalize_channels");
  Tensor y = x;
  auto d = y.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t p = 0; p < inner; ++p) {
      const std::size_t base = o * channels * inner + p;
      double sq = 0.0;
      for (std::size_t c = 0; c < channels; ++c) sq += d[base + c * inner] * d[base + c * inner];
      const double denom = std::max(std::sqrt(sq), epsilon);
      for (std::size_t c = 0; c < channels; ++c) d[base + c * inner] /= denom;
    }
  }
  return y;
}

inline Tensor l2_normalize_channels_backward(const Tensor& x, const Tensor& grad_output,
                                             double epsilon = kDefaultNormEpsilon) {
  x.require_same_shape(grad_output, "l2_normalize_channels_backward");
  const auto [outer, channels, inner] = detail::channel_layout(x, "l2_normalize_channels_backward");
  Tensor gx(x.shape());
  const auto xd = x.data();
  const auto gd = grad_output.data();
  auto out = gx.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t p = 0; p < inner; ++p) {
      const std::size_t base = o * channels * inner + p;
      double sq = 0.0, dot = 0.0;
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t i = base + c * inner;
        sq += xd[i] * xd[i];
        dot += xd[i] * gd[i];
      }
      const double norm = std::sqrt(sq);
      if (norm >= epsilon) {
        // d(x/|x|) = (g - y (y.g)) / |x|
        const double scale = dot / (norm * norm);
        for (std::size_t c = 0; c < channels; ++c) {
          const std::size_t i = base + c * inner;
          out[i] = (gd[i] - xd[i] * scale) / norm;
        }
      } else {
        for (std::size_t c = 0; c < channels; ++c) out[base + c * inner] = gd[base + c * inner] / epsilon;
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// batch_norm over all axes except the channel axis.
// ---------------------------------------------------------------------------

struct BatchNorm {
  Parameter gamma;
  Parameter beta;
  Tensor running_mean;
  Tensor running_var;
  bool has_running_stats = false;
  double momentum = 0.1;
  double epsilon = 1e-5;

  BatchNorm() = default;
  BatchNorm(const std::string& name, std::size_t channels)
      : gamma(name + ".gamma", Tensor({channels}, 1.0)),
        beta(name + ".beta", Tensor({channels}, 0.0)),
        running_mean({channels}, 0.0),
        running_var({channels}, 1.0) {}

  std::size_t channels() const { return gamma.value.size(); }
};

struct BatchNormCache {
  Tensor normalized;  // x_hat
  Tensor inv_std;     // per channel
  Mode mode = Mode::train;
};

inline Tensor batch_norm(const Tensor& x, BatchNorm& bn, Mode mode, BatchNormCache* cache = nullptr,
                         bool update_running_stats = true) {
  const auto [outer, channels, inner] = detail::channel_layout(x, "batch_norm");
  if (channels != bn.channels() || bn.running_mean.size() != channels || bn.running_var.size() != channels) {
    throw ShapeError("batch_norm: statistics sized for " + std::to_string(bn.channels()) + " channels, input has " +
                     std::to_string(channels));
  }
  if (mode == Mode::eval && !bn.has_running_stats) {
    throw std::logic_error("batch_norm: eval mode requested before any training update");
  }
  const std::size_t count = outer * inner;
  Tensor xhat(x.shape());
  Tensor inv_std({channels});
  Tensor y(x.shape());
  const auto xd = x.data();
  for (std::size_t c = 0; c < channels; ++c) {
    double mean = 0.0, var = 0.0;
    if (mode == Mode::train) {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t p = 0; p < inner; ++p) mean += xd[(o * channels + c) * inner + p];
      mean /= static_cast<double>(count);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t p = 0; p < inner; ++p) {
          const double d = xd[(o * channels + c) * inner + p] - mean;
          var += d * d;
        }
      var /= static_cast<double>(count);
      if (update_running_stats) {
        const double unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
        bn.running_mean[c] = (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * mean;
        bn.running_var[c] = (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * unbiased;
      }
    } else {
      mean = bn.running_mean[c];
      var = bn.running_var[c];
    }
    const double istd = 1.0 / std::sqrt(var + bn.epsilon);
    inv_std[c] = istd;
    const double g = bn.gamma.value[c], b = bn.beta.value[c];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t p = 0; p < inner; ++p) {
        const std::size_t i = (o * channels + c) * inner + p;
        xhat[i] = (xd[i] - mean) * istd;
        y[i] = g * xhat[i] + b;
      }
  }
  if (mode == Mode::train && update_running_stats) bn.has_running_stats = true;
  if (cache) *cache = BatchNormCache{std::move(xhat), std::move(inv_std), mode};
  return y;
}

/// Returns the input gradient and accumulates gamma/beta gradients into bn.
inline Tensor batch_norm_backward(const Tensor& grad_output, BatchNorm& bn, const BatchNormCache& cache) {
  const auto [outer, channels, inner] = detail::channel_layout(grad_output, "batch_norm_backward");
  const std::size_t count = outer * inner;
  const double m = static_cast<double>(count);
  Tensor gx(grad_output.shape());
  const auto g = grad_output.data();
  const auto xh = cache.normalized.data();
  for (std::size_t c = 0; c < channels; ++c) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t p = 0; p < inner; ++p) {
        const std::size_t i = (o * channels + c) * inner + p;
        sum_g += g[i];
        sum_gx += g[i] * xh[i];
      }
    bn.beta.grad[c] += sum_g;
    bn.gamma.grad[c] += sum_gx;
    const double gamma = bn.gamma.value[c], istd = cache.inv_std[c];
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t p = 0; p < inner; ++p) {
        const std::size_t i = (o * channels + c) * inner + p;
        if (cache.mode == Mode::train) {
          gx[i] = gamma * istd * (g[i] - sum_g / m - xh[i] * sum_gx / m);
        } else {
          gx[i] = gamma * istd * g[i];
        }
      }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// spatial_softmax over the H x W plane of 1 x H x W (or B x 1 x H x W).
// ---------------------------------------------------------------------------

inline Tensor spatial_softmax(const Tensor& scores) {
  const Tensor s = detail::as_batch(scores, "spatial_softmax");
  if (s.dim(1) != 1) throw ShapeError("spatial_softmax: expected a single channel, got " + shape_string(scores.shape()));
  const std::size_t batch = s.dim(0), plane = s.dim(2) * s.dim(3);
  Tensor out(s.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    const double* in = &s.data()[b * plane];
    double* o = &out.data()[b * plane];
    const double mx = *std::max_element(in, in + plane);
    double sum = 0.0;
    for (std::size_t p = 0; p < plane; ++p) {
      o[p] = std::exp(in[p] - mx);
      sum += o[p];
    }
    for (std::size_t p = 0; p < plane; ++p) o[p] /= sum;
  }
  return detail::like_input(std::move(out), scores);
}

inline Tensor spatial_softmax_backward(const Tensor& probabilities, const Tensor& grad_output) {
  probabilities.require_same_shape(grad_output, "spatial_softmax_backward");
  const Tensor a = detail::as_batch(probabilities, "spatial_softmax_backward");
  const std::size_t batch = a.dim(0), plane = a.dim(2) * a.dim(3);
  Tensor gs(probabilities.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    double dot = 0.0;
    for (std::size_t p = 0; p < plane; ++p) dot += a[b * plane + p] * grad_output[b * plane + p];
    for (std::size_t p = 0; p < plane; ++p) gs[b * plane + p] = a[b * plane + p] * (grad_output[b * plane + p] - dot);
  }
  return gs;
}

}  // namespace oacnet
