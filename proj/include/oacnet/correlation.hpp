#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "oacnet/io.hpp"
#include "oacnet/ops.hpp"
#include "oacnet/random.hpp"
#include "oacnet/tensor.hpp"

namespace oacnet {

// Layout conventions
//   feature map          D x H x W
//   correlation map      HW x H x W, channel k*W + l holds f_src(i,j) . f_trg(k,l)
//   reordered map        (2H-1)(2W-1) x H x W, channel (s+H-1)(2W-1) + (t+W-1)
//                        holds the correlation with offset (s, t) = (i-k, j-l)
//   kernel bank weights  N x (2H-1) x (2W-1), entry (n, s+H-1, t+W-1) = w^n_{s,t}

inline std::size_t offset_channel_count(std::size_t h, std::size_t w) { return (2 * h - 1) * (2 * w - 1); }

inline std::size_t offset_channel(long s, long t, std::size_t h, std::size_t w) {
  return static_cast<std::size_t>((s + static_cast<long>(h) - 1) * static_cast<long>(2 * w - 1) +
                                  (t + static_cast<long>(w) - 1));
}

struct MultiplyCounter {
  std::uint64_t multiplies = 0;
  /// Multiplies whose correlation operand is nonzero (sparsity-aware count).
  std::uint64_t nonzero_multiplies = 0;
};

// ---------------------------------------------------------------------------
// Dense correlation layer
// ---------------------------------------------------------------------------

inline Tensor correlation_map(const Tensor& f_src, const Tensor& f_trg) {
  require_rank(f_src, 3, "correlation_map source");
  require_rank(f_trg, 3, "correlation_map target");
  if (f_src.shape() != f_trg.shape()) {
    throw ShapeError("correlation_map: source " + shape_string(f_src.shape()) + " vs target " +
                     shape_string(f_trg.shape()));
  }
  const std::size_t d = f_src.dim(0), h = f_src.dim(1), w = f_src.dim(2), hw = h * w;
  Tensor c({hw, h, w});
  const auto s = f_src.data();
  const auto t = f_trg.data();
  auto out = c.data();
  for (std::size_t kl = 0; kl < hw; ++kl) {
    for (std::size_t ch = 0; ch < d; ++ch) {
      const double tv = t[ch * hw + kl];
      const double* srow = &s[ch * hw];
      double* orow = &out[kl * hw];
      for (std::size_t ij = 0; ij < hw; ++ij) orow[ij] += srow[ij] * tv;
    }
  }
  return c;
}

struct CorrelationGrads {
  Tensor source;
  Tensor target;
};

inline CorrelationGrads correlation_map_backward(const Tensor& f_src, const Tensor& f_trg, const Tensor& grad_c) {
  const std::size_t d = f_src.dim(0), h = f_src.dim(1), w = f_src.dim(2), hw = h * w;
  if (grad_c.shape() != Shape{hw, h, w}) throw ShapeError("correlation_map_backward: grad shape mismatch");
  CorrelationGrads g{Tensor(f_src.shape()), Tensor(f_trg.shape())};
  for (std::size_t kl = 0; kl < hw; ++kl)
    for (std::size_t ch = 0; ch < d; ++ch) {
      const double tv = f_trg[ch * hw + kl];
      double acc = 0.0;
      for (std::size_t ij = 0; ij < hw; ++ij) {
        const double gv = grad_c[kl * hw + ij];
        g.source[ch * hw + ij] += gv * tv;
        acc += gv * f_src[ch * hw + ij];
      }
      g.target[ch * hw + kl] = acc;
    }
  return g;
}

/// ReLU, then each location's HW-long correlation vector divided by max(norm, eps).
inline Tensor normalize_correlation(const Tensor& c, double epsilon = kDefaultNormEpsilon) {
  require_rank(c, 3, "normalize_correlation");
  return l2_normalize_channels(relu(c), epsilon);
}

inline Tensor normalize_correlation_backward(const Tensor& c, const Tensor& grad_output,
                                             double epsilon = kDefaultNormEpsilon) {
  const Tensor r = relu(c);
  return relu_backward(c, l2_normalize_channels_backward(r, grad_output, epsilon));
}

// ---------------------------------------------------------------------------
// Offset reordering
// ---------------------------------------------------------------------------

inline void require_correlation_shape(const Tensor& c, const char* what) {
  require_rank(c, 3, what);
  if (c.dim(0) != c.dim(1) * c.dim(2)) {
    throw ShapeError(std::string(what) + ": expected HW x H x W, got " + shape_string(c.shape()));
  }
}

inline Tensor reorder_by_offset(const Tensor& c) {
  require_correlation_shape(c, "reorder_by_offset");
  const std::size_t h = c.dim(1), w = c.dim(2), hw = h * w;
  Tensor r({offset_channel_count(h, w), h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t k = 0; k < h; ++k)
        for (std::size_t l = 0; l < w; ++l) {
          const long s = static_cast<long>(i) - static_cast<long>(k);
          const long t = static_cast<long>(j) - static_cast<long>(l);
          r[offset_channel(s, t, h, w) * hw + i * w + j] = c[(k * w + l) * hw + i * w + j];
        }
  return r;
}

/// Inverse of reorder_by_offset; entries for nonexistent targets are dropped.
inline Tensor restore_from_offsets(const Tensor& r) {
  require_rank(r, 3, "restore_from_offsets");
  const std::size_t h = r.dim(1), w = r.dim(2), hw = h * w;
  if (r.dim(0) != offset_channel_count(h, w)) throw ShapeError("restore_from_offsets: bad channel count");
  Tensor c({hw, h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t k = 0; k < h; ++k)
        for (std::size_t l = 0; l < w; ++l) {
          const long s = static_cast<long>(i) - static_cast<long>(k);
          const long t = static_cast<long>(j) - static_cast<long>(l);
          c[(k * w + l) * hw + i * w + j] = r[offset_channel(s, t, h, w) * hw + i * w + j];
        }
  return c;
}

// ---------------------------------------------------------------------------
// Offset-aware correlation kernels
// ---------------------------------------------------------------------------

struct OacKernelBank {
  Parameter weights;  // N x (2H-1) x (2W-1)
  Parameter bias;     // N
  bool use_bias = true;

  OacKernelBank() = default;
  OacKernelBank(std::size_t kernels, std::size_t h, std::size_t w, bool with_bias = true)
      : weights("oac.weight", Tensor({kernels, 2 * h - 1, 2 * w - 1})),
        bias("oac.bias", Tensor({kernels})),
        use_bias(with_bias) {}

  std::size_t kernels() const { return weights.value.dim(0); }
  std::size_t height() const { return (weights.value.dim(1) + 1) / 2; }
  std::size_t width() const { return (weights.value.dim(2) + 1) / 2; }

  /// He-uniform with fan-in H*W (terms summed per output), zero bias.
  void initialize(Rng& rng) {
    weights.value = he_uniform(weights.value.shape(), height() * width(), rng);
    bias.value.fill(0.0);
  }

  void zero_grad() {
    weights.zero_grad();
    bias.zero_grad();
  }
};

inline void check_bank(const Tensor& c, const OacKernelBank& bank) {
  require_correlation_shape(c, "oac");
  require_rank(bank.weights.value, 3, "oac weights");
  const std::size_t h = c.dim(1), w = c.dim(2);
  if (bank.weights.value.dim(1) != 2 * h - 1 || bank.weights.value.dim(2) != 2 * w - 1) {
    throw ShapeError("oac: bank sized " + shape_string(bank.weights.value.shape()) + " for a " + std::to_string(h) +
                     "x" + std::to_string(w) + " correlation map");
  }
  if (bank.bias.value.size() != bank.kernels()) throw ShapeError("oac: bias length mismatch");
}

/// h^n_{ij} = sum_{k,l} w^n_{i-k, j-l} c_{ij;kl} + b_n, before the ReLU.
inline Tensor oac_preactivation_direct(const Tensor& c, const OacKernelBank& bank, MultiplyCounter* counter = nullptr) {
  check_bank(c, bank);
  const std::size_t n_k = bank.kernels(), h = c.dim(1), w = c.dim(2), hw = h * w, ww = 2 * w - 1;
  const auto wt = bank.weights.value.data();
  const auto cd = c.data();
  // rows indexed by source location, columns by target location
  std::vector<double> ct(hw * hw);
  std::uint64_t nonzero = 0;
  for (std::size_t kl = 0; kl < hw; ++kl)
    for (std::size_t ij = 0; ij < hw; ++ij) {
      ct[ij * hw + kl] = cd[kl * hw + ij];
      nonzero += cd[kl * hw + ij] != 0.0;
    }
  Tensor out({n_k, h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t ij = i * w + j;
      const double* crow = &ct[ij * hw];
      for (std::size_t n = 0; n < n_k; ++n) {
        const double* wn = &wt[n * (2 * h - 1) * ww];
        double acc = 0.0;
        for (std::size_t k = 0; k < h; ++k) {
          // row (i - k) + H - 1 of the kernel sheet; column (j - l) + W - 1.
          const double* wrow = wn + (i + h - 1 - k) * ww + (j + w - 1);
          const double* ck = crow + k * w;
          for (std::size_t l = 0; l < w; ++l) acc += *(wrow - l) * ck[l];
        }
        out[n * hw + ij] = acc + (bank.use_bias ? bank.bias.value[n] : 0.0);
      }
    }
  if (counter) {
    counter->multiplies += n_k * hw * hw;
    counter->nonzero_multiplies += n_k * nonzero;
  }
  return out;
}

inline Tensor oac_forward_direct(const Tensor& c, const OacKernelBank& bank, MultiplyCounter* counter = nullptr) {
  return relu(oac_preactivation_direct(c, bank, counter));
}

/// Reorder, then a dense 1x1 convolution whose N x (2H-1)(2W-1) weight matrix
/// is the bank flattened over offset channels.
inline Tensor oac_preactivation_reordered(const Tensor& c, const OacKernelBank& bank,
                                          MultiplyCounter* counter = nullptr) {
  check_bank(c, bank);
  const Tensor r = reorder_by_offset(c);
  const std::size_t n_k = bank.kernels(), h = c.dim(1), w = c.dim(2), hw = h * w;
  const std::size_t channels = r.dim(0);
  const auto wt = bank.weights.value.data();
  const auto rd = r.data();
  Tensor out({n_k, h, w});
  auto od = out.data();
  for (std::size_t n = 0; n < n_k; ++n) {
    double* orow = &od[n * hw];
    std::fill(orow, orow + hw, bank.use_bias ? bank.bias.value[n] : 0.0);
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const double wv = wt[n * channels + ch];
      const double* rrow = &rd[ch * hw];
      std::uint64_t nonzero = 0;
      for (std::size_t p = 0; p < hw; ++p) {
        orow[p] += wv * rrow[p];
        nonzero += rrow[p] != 0.0;
      }
      if (counter) {
        counter->multiplies += hw;
        counter->nonzero_multiplies += nonzero;
      }
    }
  }
  return out;
}

inline Tensor oac_forward_reordered(const Tensor& c, const OacKernelBank& bank, MultiplyCounter* counter = nullptr) {
  return relu(oac_preactivation_reordered(c, bank, counter));
}

struct OacGrads {
  Tensor weights;
  Tensor bias;
  Tensor correlation;
};

/// Gradients of relu(OAC(c) + b) given the pre-activation and the upstream
/// gradient of the activated output. Weight gradients sum over every source
/// location sharing an offset, accumulated in n-then-location order.
inline OacGrads oac_backward(const Tensor& c, const OacKernelBank& bank, const Tensor& preactivation,
                             const Tensor& upstream) {
  check_bank(c, bank);
  const std::size_t n_k = bank.kernels(), h = c.dim(1), w = c.dim(2), hw = h * w, ww = 2 * w - 1;
  if (upstream.shape() != Shape{n_k, h, w} || preactivation.shape() != upstream.shape()) {
    throw ShapeError("oac_backward: upstream gradient must be " + std::to_string(n_k) + "x" + std::to_string(h) + "x" +
                     std::to_string(w));
  }
  const Tensor g = relu_backward(preactivation, upstream);
  OacGrads out{Tensor(bank.weights.value.shape()), Tensor({n_k}), Tensor(c.shape())};
  const auto wt = bank.weights.value.data();
  std::vector<double> ct(hw * hw), gct(hw * hw, 0.0);
  for (std::size_t kl = 0; kl < hw; ++kl)
    for (std::size_t ij = 0; ij < hw; ++ij) ct[ij * hw + kl] = c[kl * hw + ij];
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t ij = i * w + j;
      const double* crow = &ct[ij * hw];
      double* gcrow = &gct[ij * hw];
      for (std::size_t n = 0; n < n_k; ++n) {
        const double gv = g[n * hw + ij];
        if (bank.use_bias) out.bias[n] += gv;
        if (gv == 0.0) continue;
        const double* wn = &wt[n * (2 * h - 1) * ww];
        double* gwn = &out.weights.data()[n * (2 * h - 1) * ww];
        for (std::size_t k = 0; k < h; ++k) {
          const std::size_t row = (i + h - 1 - k) * ww + (j + w - 1);
          for (std::size_t l = 0; l < w; ++l) {
            gwn[row - l] += gv * crow[k * w + l];
            gcrow[k * w + l] += gv * wn[row - l];
          }
        }
      }
    }
  for (std::size_t kl = 0; kl < hw; ++kl)
    for (std::size_t ij = 0; ij < hw; ++ij) out.correlation[kl * hw + ij] = gct[ij * hw + kl];
  return out;
}

inline OacGrads oac_backward(const Tensor& c, const OacKernelBank& bank, const Tensor& upstream) {
  return oac_backward(c, bank, oac_preactivation_direct(c, bank), upstream);
}

/// Same gradients computed along the reordered path: 1x1-conv backward on the
/// reordered map, then the correlation gradient mapped back to absolute layout.
inline OacGrads oac_backward_reordered(const Tensor& c, const OacKernelBank& bank, const Tensor& upstream) {
  check_bank(c, bank);
  const Tensor pre = oac_preactivation_reordered(c, bank);
  const Tensor g = relu_backward(pre, upstream);
  const Tensor r = reorder_by_offset(c);
  const std::size_t n_k = bank.kernels(), h = c.dim(1), w = c.dim(2), hw = h * w, channels = r.dim(0);
  OacGrads out{Tensor(bank.weights.value.shape()), Tensor({n_k}), Tensor()};
  Tensor grad_r(r.shape());
  for (std::size_t n = 0; n < n_k; ++n) {
    if (bank.use_bias)
      for (std::size_t p = 0; p < hw; ++p) out.bias[n] += g[n * hw + p];
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const double wv = bank.weights.value[n * channels + ch];
      double acc = 0.0;
      for (std::size_t p = 0; p < hw; ++p) {
        acc += g[n * hw + p] * r[ch * hw + p];
        grad_r[ch * hw + p] += wv * g[n * hw + p];
      }
      out.weights[n * channels + ch] = acc;
    }
  }
  out.correlation = restore_from_offsets(grad_r);
  return out;
}

// ---------------------------------------------------------------------------
// Batched direct path. For a fixed source location (i,j) the N x HW slice
// w_{i-k,j-l} is the same for every sample, so the batch is one matrix product
// per location. Same multiplication count as the per-sample loop.
// ---------------------------------------------------------------------------

namespace detail {

/// Rows are kernels, columns target locations (k,l), for source location (i,j).
inline void gather_kernel_slice(const OacKernelBank& bank, std::size_t i, std::size_t j, RowMatrix& slice) {
  const std::size_t n_k = bank.kernels(), h = bank.height(), w = bank.width(), ww = 2 * w - 1;
  slice.resize(static_cast<Eigen::Index>(n_k), static_cast<Eigen::Index>(h * w));
  const auto wt = bank.weights.value.data();
  for (std::size_t n = 0; n < n_k; ++n) {
    const double* wn = &wt[n * (2 * h - 1) * ww];
    double* dst = slice.data() + n * h * w;
    for (std::size_t k = 0; k < h; ++k) {
      const double* wrow = wn + (i + h - 1 - k) * ww + (j + w - 1);
      for (std::size_t l = 0; l < w; ++l) dst[k * w + l] = *(wrow - l);
    }
  }
}

inline void check_batch(const std::vector<Tensor>& cs, const OacKernelBank& bank) {
  if (cs.empty()) throw ShapeError("oac batch: empty batch");
  for (const auto& c : cs) check_bank(c, bank);
}

}  // namespace detail

inline std::vector<Tensor> oac_preactivation_direct_batch(const std::vector<Tensor>& cs, const OacKernelBank& bank,
                                                          MultiplyCounter* counter = nullptr) {
  detail::check_batch(cs, bank);
  const std::size_t n_k = bank.kernels(), h = bank.height(), w = bank.width(), hw = h * w, batch = cs.size();
  std::vector<Tensor> out(batch, Tensor({n_k, h, w}));
  detail::RowMatrix slice, cols(static_cast<Eigen::Index>(hw), static_cast<Eigen::Index>(batch)), prod;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t ij = i * w + j;
      detail::gather_kernel_slice(bank, i, j, slice);
      for (std::size_t kl = 0; kl < hw; ++kl)
        for (std::size_t b = 0; b < batch; ++b) cols(static_cast<Eigen::Index>(kl), static_cast<Eigen::Index>(b)) = cs[b][kl * hw + ij];
      prod.noalias() = slice * cols;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t n = 0; n < n_k; ++n) {
          out[b][n * hw + ij] =
              prod(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(b)) + (bank.use_bias ? bank.bias.value[n] : 0.0);
        }
    }
  if (counter) {
    for (const auto& c : cs) {
      counter->multiplies += n_k * hw * hw;
      for (double v : c.values()) counter->nonzero_multiplies += v != 0.0 ? n_k : 0;
    }
  }
  return out;
}

struct OacBatchGrads {
  Tensor weights;
  Tensor bias;
  std::vector<Tensor> correlations;
};

/// Batched counterpart of oac_backward: relu mask from the pre-activations,
/// weight and bias gradients summed over the batch.
inline OacBatchGrads oac_backward_batch(const std::vector<Tensor>& cs, const OacKernelBank& bank,
                                        const std::vector<Tensor>& preactivations, const std::vector<Tensor>& upstream) {
  detail::check_batch(cs, bank);
  const std::size_t n_k = bank.kernels(), h = bank.height(), w = bank.width(), hw = h * w, ww = 2 * w - 1;
  const std::size_t batch = cs.size();
  if (preactivations.size() != batch || upstream.size() != batch) {
    throw ShapeError("oac_backward_batch: batch sizes differ");
  }
  for (std::size_t b = 0; b < batch; ++b) {
    if (upstream[b].shape() != Shape{n_k, h, w} || preactivations[b].shape() != upstream[b].shape()) {
      throw ShapeError("oac_backward_batch: upstream gradient must be " + std::to_string(n_k) + "x" +
                       std::to_string(h) + "x" + std::to_string(w));
    }
  }
  OacBatchGrads out{Tensor(bank.weights.value.shape()), Tensor({n_k}), std::vector<Tensor>(batch, Tensor(cs[0].shape()))};
  detail::RowMatrix slice, cols(static_cast<Eigen::Index>(hw), static_cast<Eigen::Index>(batch));
  detail::RowMatrix g(static_cast<Eigen::Index>(n_k), static_cast<Eigen::Index>(batch)), gw, gc;
  auto gwt = out.weights.data();
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t ij = i * w + j;
      for (std::size_t n = 0; n < n_k; ++n)
        for (std::size_t b = 0; b < batch; ++b) {
          const double gv = preactivations[b][n * hw + ij] > 0.0 ? upstream[b][n * hw + ij] : 0.0;
          g(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(b)) = gv;
        }
      if (bank.use_bias)
        for (std::size_t n = 0; n < n_k; ++n) out.bias[n] += g.row(static_cast<Eigen::Index>(n)).sum();
      for (std::size_t kl = 0; kl < hw; ++kl)
        for (std::size_t b = 0; b < batch; ++b) cols(static_cast<Eigen::Index>(kl), static_cast<Eigen::Index>(b)) = cs[b][kl * hw + ij];
      gw.noalias() = g * cols.transpose();
      for (std::size_t n = 0; n < n_k; ++n) {
        double* gwn = &gwt[n * (2 * h - 1) * ww];
        const double* src = gw.data() + n * hw;
        for (std::size_t k = 0; k < h; ++k) {
          double* grow = gwn + (i + h - 1 - k) * ww + (j + w - 1);
          for (std::size_t l = 0; l < w; ++l) *(grow - l) += src[k * w + l];
        }
      }
      detail::gather_kernel_slice(bank, i, j, slice);
      gc.noalias() = slice.transpose() * g;
      for (std::size_t kl = 0; kl < hw; ++kl)
        for (std::size_t b = 0; b < batch; ++b)
          out.correlations[b][kl * hw + ij] = gc(static_cast<Eigen::Index>(kl), static_cast<Eigen::Index>(b));
    }
  return out;
}

enum class OacPath { direct, reordered };

inline std::string to_string(OacPath p) { return p == OacPath::direct ? "direct" : "reordered"; }

inline OacPath parse_oac_path(const std::string& s) {
  if (s == "direct") return OacPath::direct;
  if (s == "reordered") return OacPath::reordered;
  throw std::invalid_argument("unknown OAC path `" + s + "` (expected direct or reordered)");
}

inline Tensor oac_preactivation(const Tensor& c, const OacKernelBank& bank, OacPath path,
                                MultiplyCounter* counter = nullptr) {
  return path == OacPath::direct ? oac_preactivation_direct(c, bank, counter)
                                 : oac_preactivation_reordered(c, bank, counter);
}

/// Closed-form multiply counts: direct N H^2 W^2, reordered N (2H^2-H)(2W^2-W).
inline std::uint64_t count_multiplications(std::uint64_t h, std::uint64_t w, std::uint64_t n, OacPath path) {
  if (h == 0 || w == 0 || n == 0) throw std::invalid_argument("count_multiplications: dimensions must be positive");
  if (path == OacPath::direct) return n * h * h * w * w;
  return n * (2 * h * h - h) * (2 * w * w - w);
}

/// Writes one graymap per kernel: the (2H-1) x (2W-1) weight sheet, min/max scaled.
inline void dump_kernel_bank(const OacKernelBank& bank, const std::filesystem::path& dir, std::size_t max_kernels = 0) {
  std::filesystem::create_directories(dir);
  const std::size_t rows = bank.weights.value.dim(1), cols = bank.weights.value.dim(2);
  const std::size_t count = max_kernels ? std::min(max_kernels, bank.kernels()) : bank.kernels();
  for (std::size_t n = 0; n < count; ++n) {
    Tensor sheet({rows, cols});
    for (std::size_t p = 0; p < rows * cols; ++p) sheet[p] = bank.weights.value[n * rows * cols + p];
    write_pgm_normalized(dir / ("kernel_" + std::to_string(n) + ".pgm"), sheet);
  }
}

}  // namespace oacnet
