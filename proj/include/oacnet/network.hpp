#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "oacnet/correlation.hpp"
#include "oacnet/geometry.hpp"
#include "oacnet/io.hpp"
#include "oacnet/ops.hpp"
#include "oacnet/random.hpp"
#include "oacnet/tensor.hpp"

namespace oacnet {

enum class EmbeddingMode { learned, coordinates };

inline std::string to_string(EmbeddingMode m) { return m == EmbeddingMode::learned ? "learned" : "coordinates"; }

inline EmbeddingMode parse_embedding_mode(const std::string& s) {
  if (s == "learned") return EmbeddingMode::learned;
  if (s == "coordinates") return EmbeddingMode::coordinates;
  throw std::invalid_argument("unknown embedding mode `" + s + "` (expected learned or coordinates)");
}

inline constexpr std::size_t kIndexEmbeddingDim = 5;

/// Network hyper-parameters. Defaults are the full-size configuration.
struct ModelConfig {
  TransformFamily family = TransformFamily::affine;
  std::size_t feature_dim = 512;
  std::size_t height = 15;
  std::size_t width = 15;
  std::size_t kernels = 128;
  std::size_t encoder_channels = 128;
  std::size_t encoder_kernel = 7;
  std::size_t g_hidden = 128;
  std::size_t g_out = 128;
  std::size_t s_hidden = 64;
  EmbeddingMode embedding = EmbeddingMode::learned;
  bool oac_bias = true;
  OacPath oac_path = OacPath::direct;
  std::size_t tps_grid = kDefaultTpsGrid;
  std::uint64_t seed = 0;

  std::size_t attention_height() const { return height - encoder_kernel + 1; }
  std::size_t attention_width() const { return width - encoder_kernel + 1; }
  std::size_t theta_size() const { return param_count(family, tps_grid); }

  void validate() const {
    if (feature_dim == 0 || kernels == 0 || encoder_channels == 0 || g_hidden == 0 || g_out == 0 || s_hidden == 0) {
      throw std::invalid_argument("model config: all sizes must be positive");
    }
    if (encoder_kernel % 2 == 0) throw std::invalid_argument("model config: encoder kernel must be odd");
    if (height < encoder_kernel || width < encoder_kernel) {
      throw ShapeError("model config: feature map " + std::to_string(height) + "x" + std::to_string(width) +
                       " is smaller than the " + std::to_string(encoder_kernel) + "x" +
                       std::to_string(encoder_kernel) + " encoder");
    }
    if (family == TransformFamily::tps && tps_grid < 2) throw std::invalid_argument("model config: tps grid >= 2");
  }

  std::vector<std::pair<std::string, std::string>> to_key_values() const {
    return {{"family", to_string(family)},
            {"feature_dim", std::to_string(feature_dim)},
            {"feature_height", std::to_string(height)},
            {"feature_width", std::to_string(width)},
            {"kernels", std::to_string(kernels)},
            {"encoder_channels", std::to_string(encoder_channels)},
            {"encoder_kernel", std::to_string(encoder_kernel)},
            {"g_hidden", std::to_string(g_hidden)},
            {"g_out", std::to_string(g_out)},
            {"s_hidden", std::to_string(s_hidden)},
            {"embedding", to_string(embedding)},
            {"oac_bias", oac_bias ? "true" : "false"},
            {"oac_path", to_string(oac_path)},
            {"tps_grid", std::to_string(tps_grid)},
            {"seed", std::to_string(seed)}};
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// ---------------------------------------------------------------------------
// Caches for the hand-written backward passes. Activations are batched
// B x C x H x W throughout the head.
// ---------------------------------------------------------------------------

struct EncoderCache {
  Tensor input;      // B x N x H x W
  Tensor conv_out;   // B x E x H' x W'
  BatchNormCache bn;
  Tensor bn_out;
};

/// S: 1x1 conv -> BN -> ReLU -> 1x1 conv (no bias), then spatial softmax.
struct AttentionCache {
  Tensor input;      // F
  Tensor hidden_pre;
  BatchNormCache bn;
  Tensor hidden_bn;
  Tensor hidden;
  Tensor scores;     // B x 1 x H' x W'
  Tensor alpha;
};

/// G: [F ; e] -> 1x1 conv -> BN -> ReLU -> 1x1 conv -> BN -> ReLU; tau = sum alpha G.
struct AttendedCache {
  Tensor input;      // B x (E+5) x H' x W'
  Tensor layer1_pre;
  BatchNormCache bn1;
  Tensor layer1_bn;
  Tensor layer1;
  Tensor layer2_pre;
  BatchNormCache bn2;
  Tensor layer2_bn;
  Tensor projected;  // G(t) per location, B x D' x H' x W'
  Tensor alpha;
};

struct ForwardCache {
  std::vector<Tensor> normalized_correlations;
  std::vector<Tensor> oac_preactivations;
  EncoderCache encoder;
  AttentionCache attention;
  AttendedCache attended;
  Tensor tau;  // B x D'
};

/// Per-sample outputs plus attention diagnostics.
struct ForwardResult {
  std::vector<TransformParams> theta;
  Tensor alpha;     // B x 1 x H' x W'
  Tensor features;  // F, B x E x H' x W'
};

struct AttendedGrads {
  Tensor features;
  Tensor alpha;
};

/**
 * Local transformation encoder plus attentive global transformation
 * estimator, from a pair of L2-normalized feature maps to theta.
 */
class AlignmentNetwork {
 public:
  explicit AlignmentNetwork(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
    const std::size_t e = config_.encoder_channels, k = config_.encoder_kernel;
    const std::size_t locations = config_.attention_height() * config_.attention_width();
    bank_ = OacKernelBank(config_.kernels, config_.height, config_.width, config_.oac_bias);
    enc_w_ = Parameter("encoder.weight", Tensor({e, config_.kernels, k, k}));
    enc_b_ = Parameter("encoder.bias", Tensor({e}));
    enc_bn_ = BatchNorm("encoder.bn", e);
    embedding_ = Parameter("attention.index_embedding", Tensor({locations, kIndexEmbeddingDim}));
    g1_w_ = Parameter("g.layer1.weight", Tensor({config_.g_hidden, e + kIndexEmbeddingDim, 1, 1}));
    g1_b_ = Parameter("g.layer1.bias", Tensor({config_.g_hidden}));
    g1_bn_ = BatchNorm("g.layer1.bn", config_.g_hidden);
    g2_w_ = Parameter("g.layer2.weight", Tensor({config_.g_out, config_.g_hidden, 1, 1}));
    g2_b_ = Parameter("g.layer2.bias", Tensor({config_.g_out}));
    g2_bn_ = BatchNorm("g.layer2.bn", config_.g_out);
    s1_w_ = Parameter("s.layer1.weight", Tensor({config_.s_hidden, e, 1, 1}));
    s1_b_ = Parameter("s.layer1.bias", Tensor({config_.s_hidden}));
    s1_bn_ = BatchNorm("s.layer1.bn", config_.s_hidden);
    s2_w_ = Parameter("s.layer2.weight", Tensor({1, config_.s_hidden, 1, 1}));
    head_w_ = Parameter("head.weight", Tensor({config_.theta_size(), config_.g_out}));
    initialize();
  }

  const ModelConfig& config() const { return config_; }

  // -- parameter access ----------------------------------------------------

  /// Trainable parameters in a fixed order (the coordinate embedding is fixed).
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> p{&bank_.weights};
    if (config_.oac_bias) p.push_back(&bank_.bias);
    for (Parameter* q : {&enc_w_, &enc_b_, &enc_bn_.gamma, &enc_bn_.beta}) p.push_back(q);
    if (config_.embedding == EmbeddingMode::learned) p.push_back(&embedding_);
    for (Parameter* q : {&g1_w_, &g1_b_, &g1_bn_.gamma, &g1_bn_.beta, &g2_w_, &g2_b_, &g2_bn_.gamma, &g2_bn_.beta,
                         &s1_w_, &s1_b_, &s1_bn_.gamma, &s1_bn_.beta, &s2_w_, &head_w_}) {
      p.push_back(q);
    }
    return p;
  }

  std::vector<BatchNorm*> batch_norms() { return {&enc_bn_, &g1_bn_, &s1_bn_, &g2_bn_}; }

  void zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
  }

  OacKernelBank& kernel_bank() { return bank_; }
  const OacKernelBank& kernel_bank() const { return bank_; }
  Parameter& head_weight() { return head_w_; }
  Parameter& s_output_weight() { return s2_w_; }
  Parameter& index_embedding() { return embedding_; }

  bool has_running_stats() const { return enc_bn_.has_running_stats; }

  // -- stages ----------------------------------------------------------------

  /// 7x7 valid conv -> BN -> ReLU on a B x N x H x W displacement stack.
  Tensor encode_local_transforms(const Tensor& h, Mode mode, EncoderCache* cache = nullptr,
                                 bool update_stats = true) {
    const Tensor x = detail::as_batch(h, "encode_local_transforms");
    if (x.dim(1) != config_.kernels) {
      throw ShapeError("encode_local_transforms: expected " + std::to_string(config_.kernels) + " channels, got " +
                       shape_string(h.shape()));
    }
    if (x.dim(2) < config_.encoder_kernel || x.dim(3) < config_.encoder_kernel) {
      throw ShapeError("encode_local_transforms: spatial size smaller than the encoder kernel");
    }
    EncoderCache local;
    EncoderCache& c = cache ? *cache : local;
    c.input = x;
    c.conv_out = conv2d(x, enc_w_.value, enc_b_.value, 0);
    c.bn_out = batch_norm(c.conv_out, enc_bn_, mode, &c.bn, update_stats);
    return detail::like_input(relu(c.bn_out), h);
  }

  Tensor encode_backward(const EncoderCache& c, const Tensor& grad_features) {
    const Tensor g = relu_backward(c.bn_out, detail::as_batch(grad_features, "encode_backward"));
    const Tensor g_conv = batch_norm_backward(g, enc_bn_, c.bn);
    Conv2dGrads cg = conv2d_backward(c.input, enc_w_.value, 0, g_conv);
    enc_w_.grad += cg.weights;
    enc_b_.grad += cg.bias;
    return cg.input;
  }

  /// alpha = softmax over locations of S(t_ij); S never sees the index embedding.
  Tensor attention_distribution(const Tensor& features, Mode mode, AttentionCache* cache = nullptr,
                                bool update_stats = true) {
    const Tensor f = detail::as_batch(features, "attention_distribution");
    require_feature_channels(f, "attention_distribution");
    AttentionCache local;
    AttentionCache& c = cache ? *cache : local;
    c.input = f;
    c.hidden_pre = conv2d(f, s1_w_.value, s1_b_.value, 0);
    c.hidden_bn = batch_norm(c.hidden_pre, s1_bn_, mode, &c.bn, update_stats);
    c.hidden = relu(c.hidden_bn);
    c.scores = conv2d(c.hidden, s2_w_.value, Tensor({1}), 0);
    c.alpha = spatial_softmax(c.scores);
    return detail::like_input(c.alpha, features);
  }

  Tensor attention_backward(const AttentionCache& c, const Tensor& grad_alpha) {
    const Tensor gs = spatial_softmax_backward(c.alpha, detail::as_batch(grad_alpha, "attention_backward"));
    Conv2dGrads out = conv2d_backward(c.hidden, s2_w_.value, 0, gs);
    s2_w_.grad += out.weights;
    const Tensor g_bn = relu_backward(c.hidden_bn, out.input);
    const Tensor g_pre = batch_norm_backward(g_bn, s1_bn_, c.bn);
    Conv2dGrads hid = conv2d_backward(c.input, s1_w_.value, 0, g_pre);
    s1_w_.grad += hid.weights;
    s1_b_.grad += hid.bias;
    return hid.input;
  }

  /// tau_b = sum_ij alpha_ij G([t_ij ; e_ij]); returns B x D'.
  Tensor attended_feature(const Tensor& features, const Tensor& alpha, Mode mode, AttendedCache* cache = nullptr,
                          bool update_stats = true) {
    const Tensor f = detail::as_batch(features, "attended_feature");
    const Tensor a = detail::as_batch(alpha, "attended_feature alpha");
    require_feature_channels(f, "attended_feature");
    const std::size_t batch = f.dim(0), e = f.dim(1), hh = f.dim(2), ww = f.dim(3), loc = hh * ww;
    if (a.shape() != Shape{batch, 1, hh, ww}) throw ShapeError("attended_feature: alpha shape mismatch");
    AttendedCache local;
    AttendedCache& c = cache ? *cache : local;
    c.input = Tensor({batch, e + kIndexEmbeddingDim, hh, ww});
    const Tensor emb = embedding_table();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t ch = 0; ch < e; ++ch)
        for (std::size_t p = 0; p < loc; ++p) c.input[((b * (e + kIndexEmbeddingDim)) + ch) * loc + p] = f[(b * e + ch) * loc + p];
      for (std::size_t d = 0; d < kIndexEmbeddingDim; ++d)
        for (std::size_t p = 0; p < loc; ++p)
          c.input[((b * (e + kIndexEmbeddingDim)) + e + d) * loc + p] = emb[p * kIndexEmbeddingDim + d];
    }
    c.layer1_pre = conv2d(c.input, g1_w_.value, g1_b_.value, 0);
    c.layer1_bn = batch_norm(c.layer1_pre, g1_bn_, mode, &c.bn1, update_stats);
    c.layer1 = relu(c.layer1_bn);
    c.layer2_pre = conv2d(c.layer1, g2_w_.value, g2_b_.value, 0);
    c.layer2_bn = batch_norm(c.layer2_pre, g2_bn_, mode, &c.bn2, update_stats);
    c.projected = relu(c.layer2_bn);
    c.alpha = a;
    const std::size_t dout = config_.g_out;
    Tensor tau({batch, dout});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t d = 0; d < dout; ++d) {
        double acc = 0.0;
        for (std::size_t p = 0; p < loc; ++p) acc += a[b * loc + p] * c.projected[(b * dout + d) * loc + p];
        tau(b, d) = acc;
      }
    return tau;
  }

  AttendedGrads attended_backward(const AttendedCache& c, const Tensor& grad_tau) {
    const std::size_t batch = c.projected.dim(0), dout = c.projected.dim(1);
    const std::size_t hh = c.projected.dim(2), ww = c.projected.dim(3), loc = hh * ww;
    const std::size_t e = c.input.dim(1) - kIndexEmbeddingDim;
    if (grad_tau.shape() != Shape{batch, dout}) throw ShapeError("attended_backward: grad shape mismatch");
    Tensor g_proj(c.projected.shape());
    Tensor g_alpha(c.alpha.shape());
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t d = 0; d < dout; ++d) {
        const double gt = grad_tau(b, d);
        for (std::size_t p = 0; p < loc; ++p) {
          g_proj[(b * dout + d) * loc + p] = c.alpha[b * loc + p] * gt;
          g_alpha[b * loc + p] += c.projected[(b * dout + d) * loc + p] * gt;
        }
      }
    const Tensor g2 = batch_norm_backward(relu_backward(c.layer2_bn, g_proj), g2_bn_, c.bn2);
    Conv2dGrads l2 = conv2d_backward(c.layer1, g2_w_.value, 0, g2);
    g2_w_.grad += l2.weights;
    g2_b_.grad += l2.bias;
    const Tensor g1 = batch_norm_backward(relu_backward(c.layer1_bn, l2.input), g1_bn_, c.bn1);
    Conv2dGrads l1 = conv2d_backward(c.input, g1_w_.value, 0, g1);
    g1_w_.grad += l1.weights;
    g1_b_.grad += l1.bias;
    Tensor g_feat({batch, e, hh, ww});
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t ch = 0; ch < e; ++ch)
        for (std::size_t p = 0; p < loc; ++p)
          g_feat[(b * e + ch) * loc + p] = l1.input[((b * (e + kIndexEmbeddingDim)) + ch) * loc + p];
      if (config_.embedding == EmbeddingMode::learned) {
        for (std::size_t d = 0; d < kIndexEmbeddingDim; ++d)
          for (std::size_t p = 0; p < loc; ++p)
            embedding_.grad[p * kIndexEmbeddingDim + d] += l1.input[((b * (e + kIndexEmbeddingDim)) + e + d) * loc + p];
      }
    }
    return {std::move(g_feat), std::move(g_alpha)};
  }

  /// theta = identity + W tau, one TransformParams per batch row.
  std::vector<TransformParams> predict_theta(const Tensor& tau) const {
    require_rank(tau, 2, "predict_theta");
    const std::size_t q = config_.theta_size(), dout = config_.g_out;
    if (tau.dim(1) != dout) throw ShapeError("predict_theta: tau length mismatch");
    const auto base = TransformParams::identity_offset(config_.family, config_.tps_grid);
    std::vector<TransformParams> out;
    for (std::size_t b = 0; b < tau.dim(0); ++b) {
      std::vector<double> v = base;
      for (std::size_t r = 0; r < q; ++r)
        for (std::size_t d = 0; d < dout; ++d) v[r] += head_w_.value(r, d) * tau(b, d);
      out.emplace_back(config_.family, std::move(v));
    }
    return out;
  }

  Tensor head_backward(const Tensor& tau, const Tensor& grad_theta) {
    const std::size_t batch = tau.dim(0), q = config_.theta_size(), dout = config_.g_out;
    if (grad_theta.shape() != Shape{batch, q}) throw ShapeError("head_backward: grad shape mismatch");
    Tensor g_tau({batch, dout});
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t r = 0; r < q; ++r) {
        const double g = grad_theta(b, r);
        for (std::size_t d = 0; d < dout; ++d) {
          head_w_.grad(r, d) += g * tau(b, d);
          g_tau(b, d) += g * head_w_.value(r, d);
        }
      }
    return g_tau;
  }

  /// Correlation -> normalization -> OAC for one sample; returns the pre-activation.
  Tensor displacement_preactivation(const Tensor& f_src, const Tensor& f_trg, Tensor* normalized_corr = nullptr,
                                    MultiplyCounter* counter = nullptr) const {
    require_feature_map(f_src);
    require_feature_map(f_trg);
    Tensor cn = normalize_correlation(correlation_map(f_src, f_trg));
    Tensor pre = oac_preactivation(cn, bank_, config_.oac_path, counter);
    if (normalized_corr) *normalized_corr = std::move(cn);
    return pre;
  }

  // -- full pass -------------------------------------------------------------

  ForwardResult forward(const std::vector<Tensor>& f_src, const std::vector<Tensor>& f_trg, Mode mode,
                        ForwardCache* cache = nullptr, bool update_stats = true) {
    if (f_src.size() != f_trg.size() || f_src.empty()) {
      throw ShapeError("forward: need equally many (non-zero) source and target feature maps");
    }
    const std::size_t batch = f_src.size(), n = config_.kernels, hw = config_.height * config_.width;
    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;
    c.normalized_correlations.assign(batch, Tensor());
    c.oac_preactivations.assign(batch, Tensor());
    Tensor h({batch, n, config_.height, config_.width});
    if (config_.oac_path == OacPath::direct) {
      for (std::size_t b = 0; b < batch; ++b) {
        require_feature_map(f_src[b]);
        require_feature_map(f_trg[b]);
        c.normalized_correlations[b] = normalize_correlation(correlation_map(f_src[b], f_trg[b]));
      }
      c.oac_preactivations = oac_preactivation_direct_batch(c.normalized_correlations, bank_);
    } else {
      for (std::size_t b = 0; b < batch; ++b) {
        c.oac_preactivations[b] = displacement_preactivation(f_src[b], f_trg[b], &c.normalized_correlations[b]);
      }
    }
    for (std::size_t b = 0; b < batch; ++b) {
      const Tensor act = relu(c.oac_preactivations[b]);
      std::copy(act.data().begin(), act.data().end(), h.data().begin() + static_cast<long>(b * n * hw));
    }
    Tensor features = encode_local_transforms(h, mode, &c.encoder, update_stats);
    Tensor alpha = attention_distribution(features, mode, &c.attention, update_stats);
    c.tau = attended_feature(features, alpha, mode, &c.attended, update_stats);
    ForwardResult r{predict_theta(c.tau), std::move(alpha), std::move(features)};
    for (const auto& t : r.theta)
      for (double v : t.values())
        if (!std::isfinite(v)) throw NumericError("forward: non-finite theta");
    return r;
  }

  /// Accumulates parameter gradients for d loss / d theta (B x Q).
  void backward(const ForwardCache& c, const Tensor& grad_theta) {
    const Tensor g_tau = head_backward(c.tau, grad_theta);
    AttendedGrads ga = attended_backward(c.attended, g_tau);
    Tensor g_feat = attention_backward(c.attention, ga.alpha);
    g_feat += ga.features;
    const Tensor g_h = encode_backward(c.encoder, g_feat);
    const std::size_t batch = c.oac_preactivations.size(), n = config_.kernels, hw = config_.height * config_.width;
    std::vector<Tensor> upstream(batch, Tensor({n, config_.height, config_.width}));
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy(g_h.data().begin() + static_cast<long>(b * n * hw),
                g_h.data().begin() + static_cast<long>((b + 1) * n * hw), upstream[b].data().begin());
    }
    const OacBatchGrads og = oac_backward_batch(c.normalized_correlations, bank_, c.oac_preactivations, upstream);
    bank_.weights.grad += og.weights;
    if (config_.oac_bias) bank_.bias.grad += og.bias;
  }

  // -- persistence -----------------------------------------------------------

  Checkpoint to_checkpoint() {
    Checkpoint ckpt;
    ckpt.config = config_.to_key_values();
    ckpt.config.emplace_back("running_stats", has_running_stats() ? "tracked" : "untracked");
    for (Parameter* p : all_parameter_slots()) {
      const bool fixed = (p == &embedding_ && config_.embedding == EmbeddingMode::coordinates) ||
                         (p == &bank_.bias && !config_.oac_bias);
      ckpt.entries.push_back({p->name, fixed ? "fixed" : "parameter", p->value});
    }
    for (BatchNorm* bn : batch_norms()) {
      ckpt.entries.push_back({bn->gamma.name.substr(0, bn->gamma.name.size() - 6) + ".running_mean", "buffer",
                              bn->running_mean});
      ckpt.entries.push_back({bn->gamma.name.substr(0, bn->gamma.name.size() - 6) + ".running_var", "buffer",
                              bn->running_var});
    }
    return ckpt;
  }

  /// Rebuilds a network; every tensor's shape is validated against the config.
  static AlignmentNetwork from_checkpoint(const Checkpoint& ckpt) {
    AlignmentNetwork net(model_config_from_key_values(ckpt.config));
    auto take = [&](const std::string& name, Tensor& dst) {
      const CheckpointEntry* e = ckpt.find(name);
      if (!e) throw FormatError("checkpoint is missing tensor " + name);
      if (e->tensor.shape() != dst.shape()) {
        throw ShapeError("checkpoint tensor " + name + " has shape " + shape_string(e->tensor.shape()) +
                         ", config expects " + shape_string(dst.shape()));
      }
      dst = e->tensor;
    };
    for (Parameter* p : net.all_parameter_slots()) {
      take(p->name, p->value);
      p->grad = Tensor(p->value.shape());
    }
    const bool tracked = ckpt.config_value("running_stats") == "tracked";
    for (BatchNorm* bn : net.batch_norms()) {
      const std::string prefix = bn->gamma.name.substr(0, bn->gamma.name.size() - 6);
      take(prefix + ".running_mean", bn->running_mean);
      take(prefix + ".running_var", bn->running_var);
      bn->has_running_stats = tracked;
    }
    return net;
  }

  static ModelConfig model_config_from_key_values(const std::vector<std::pair<std::string, std::string>>& kv) {
    ModelConfig cfg;
    for (const auto& [k, v] : kv) {
      try {
        if (k == "family") cfg.family = parse_family(v);
        else if (k == "feature_dim") cfg.feature_dim = std::stoul(v);
        else if (k == "feature_height") cfg.height = std::stoul(v);
        else if (k == "feature_width") cfg.width = std::stoul(v);
        else if (k == "kernels") cfg.kernels = std::stoul(v);
        else if (k == "encoder_channels") cfg.encoder_channels = std::stoul(v);
        else if (k == "encoder_kernel") cfg.encoder_kernel = std::stoul(v);
        else if (k == "g_hidden") cfg.g_hidden = std::stoul(v);
        else if (k == "g_out") cfg.g_out = std::stoul(v);
        else if (k == "s_hidden") cfg.s_hidden = std::stoul(v);
        else if (k == "embedding") cfg.embedding = parse_embedding_mode(v);
        else if (k == "oac_bias") cfg.oac_bias = v == "true";
        else if (k == "oac_path") cfg.oac_path = parse_oac_path(v);
        else if (k == "tps_grid") cfg.tps_grid = std::stoul(v);
        else if (k == "seed") cfg.seed = std::stoull(v);
      } catch (const std::logic_error& err) {
        throw ConfigError("bad model config value for `" + k + "`: " + err.what());
      }
    }
    return cfg;
  }

 private:
  void require_feature_map(const Tensor& f) const {
    if (f.shape() != Shape{config_.feature_dim, config_.height, config_.width}) {
      throw ShapeError("feature map " + shape_string(f.shape()) + " does not match model config " +
                       std::to_string(config_.feature_dim) + "x" + std::to_string(config_.height) + "x" +
                       std::to_string(config_.width));
    }
  }

  void require_feature_channels(const Tensor& f, const char* what) const {
    if (f.dim(1) != config_.encoder_channels || f.dim(2) * f.dim(3) != embedding_.value.dim(0)) {
      throw ShapeError(std::string(what) + ": local transformation map " + shape_string(f.shape()) +
                       " does not match the configuration");
    }
  }

  std::vector<Parameter*> all_parameter_slots() {
    return {&bank_.weights, &bank_.bias,   &enc_w_, &enc_b_,  &enc_bn_.gamma, &enc_bn_.beta, &embedding_,
            &g1_w_,         &g1_b_,        &g1_bn_.gamma,     &g1_bn_.beta,   &g2_w_,        &g2_b_,
            &g2_bn_.gamma,  &g2_bn_.beta,  &s1_w_,  &s1_b_,   &s1_bn_.gamma,  &s1_bn_.beta,  &s2_w_,
            &head_w_};
  }

  /// Learned table, or the fixed (x, y, xy, x^2, y^2) encoding of each location.
  Tensor embedding_table() const {
    if (config_.embedding == EmbeddingMode::learned) return embedding_.value;
    return coordinate_embedding(config_.attention_height(), config_.attention_width());
  }

 public:
  static Tensor coordinate_embedding(std::size_t hh, std::size_t ww) {
    Tensor t({hh * ww, kIndexEmbeddingDim});
    for (std::size_t i = 0; i < hh; ++i)
      for (std::size_t j = 0; j < ww; ++j) {
        const double y = hh > 1 ? -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(hh - 1) : 0.0;
        const double x = ww > 1 ? -1.0 + 2.0 * static_cast<double>(j) / static_cast<double>(ww - 1) : 0.0;
        const std::size_t p = i * ww + j;
        t(p, 0) = x;
        t(p, 1) = y;
        t(p, 2) = x * y;
        t(p, 3) = x * x;
        t(p, 4) = y * y;
      }
    return t;
  }

 private:
  /// He-uniform for ReLU-fed weights, Xavier-uniform for the linear score
  /// layer, zeros for biases, the learned embedding and the output head.
  void initialize() {
    Rng rng(config_.seed);
    bank_.initialize(rng);
    const std::size_t e = config_.encoder_channels, k = config_.encoder_kernel;
    enc_w_.value = he_uniform(enc_w_.value.shape(), config_.kernels * k * k, rng);
    g1_w_.value = he_uniform(g1_w_.value.shape(), e + kIndexEmbeddingDim, rng);
    g2_w_.value = he_uniform(g2_w_.value.shape(), config_.g_hidden, rng);
    s1_w_.value = he_uniform(s1_w_.value.shape(), e, rng);
    s2_w_.value = xavier_uniform(s2_w_.value.shape(), config_.s_hidden, 1, rng);
    if (config_.embedding == EmbeddingMode::coordinates) {
      embedding_.value = coordinate_embedding(config_.attention_height(), config_.attention_width());
    }
  }

  ModelConfig config_;
  OacKernelBank bank_;
  Parameter enc_w_, enc_b_;
  BatchNorm enc_bn_;
  Parameter embedding_;
  Parameter g1_w_, g1_b_;
  BatchNorm g1_bn_;
  Parameter g2_w_, g2_b_;
  BatchNorm g2_bn_;
  Parameter s1_w_, s1_b_;
  BatchNorm s1_bn_;
  Parameter s2_w_;
  Parameter head_w_;
};

/// Mean TGD over a batch and its gradient with respect to each theta (B x Q).
struct BatchLoss {
  double loss = 0.0;
  Tensor grad_theta;
};

inline BatchLoss mean_tgd(const std::vector<TransformParams>& theta, const std::vector<TransformParams>& theta_gt,
                          const GridPoints& grid) {
  if (theta.size() != theta_gt.size() || theta.empty()) throw ShapeError("mean_tgd: batch size mismatch");
  const std::size_t batch = theta.size(), q = theta.front().size();
  BatchLoss out{0.0, Tensor({batch, q})};
  for (std::size_t b = 0; b < batch; ++b) {
    const TgdResult r = tgd(theta[b], theta_gt[b], grid);
    out.loss += r.loss / static_cast<double>(batch);
    for (std::size_t k = 0; k < q; ++k) out.grad_theta(b, k) = r.grad[k] / static_cast<double>(batch);
  }
  return out;
}

}  // namespace oacnet
