#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "oacnet/adam.hpp"
#include "oacnet/geometry.hpp"
#include "oacnet/io.hpp"
#include "oacnet/network.hpp"
#include "oacnet/random.hpp"
#include "oacnet/tensor.hpp"

namespace oacnet {

// ---------------------------------------------------------------------------
// Feature providers
// ---------------------------------------------------------------------------

/**
 * Frozen stand-in for a pretrained extractor. The image is cut into H x W
 * cells; each cell is average-pooled into a patch_grid x patch_grid patch,
 * centered by its own mean (the mean is kept as one extra component), mapped
 * by a fixed seeded Gaussian projection to D channels, passed through ReLU and
 * L2-normalized per location.
 */
class RandomProjectionProvider {
 public:
  RandomProjectionProvider(std::size_t feature_dim, std::size_t height, std::size_t width, std::size_t image_channels,
                           std::size_t patch_grid, std::uint64_t seed)
      : feature_dim_(feature_dim), height_(height), width_(width), channels_(image_channels), patch_grid_(patch_grid) {
    if (feature_dim == 0 || height == 0 || width == 0 || image_channels == 0 || patch_grid == 0) {
      throw std::invalid_argument("random projection provider: sizes must be positive");
    }
    Rng rng(seed);
    const std::size_t in = input_size();
    projection_ = Tensor({feature_dim, in});
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : projection_.data()) v = rng.normal() * scale;
  }

  std::size_t input_size() const { return channels_ * (patch_grid_ * patch_grid_ + 1); }
  const Tensor& projection() const { return projection_; }

  Tensor operator()(const Tensor& image) const {
    require_rank(image, 3, "random projection provider");
    if (image.dim(0) != channels_) throw ShapeError("random projection provider: channel count mismatch");
    const std::size_t ih = image.dim(1), iw = image.dim(2);
    if (ih % (height_ * patch_grid_) != 0 || iw % (width_ * patch_grid_) != 0) {
      throw ShapeError("random projection provider: image " + std::to_string(ih) + "x" + std::to_string(iw) +
                       " is not divisible into " + std::to_string(height_) + "x" + std::to_string(width_) +
                       " cells of " + std::to_string(patch_grid_) + "x" + std::to_string(patch_grid_) + " pools");
    }
    const std::size_t sub_h = ih / (height_ * patch_grid_), sub_w = iw / (width_ * patch_grid_);
    const std::size_t q = patch_grid_, in = input_size();
    Tensor features({feature_dim_, height_, width_});
    std::vector<double> patch(in);
    for (std::size_t i = 0; i < height_; ++i)
      for (std::size_t j = 0; j < width_; ++j) {
        for (std::size_t c = 0; c < channels_; ++c) {
          double* block = &patch[c * (q * q + 1)];
          double mean = 0.0;
          for (std::size_t pi = 0; pi < q; ++pi)
            for (std::size_t pj = 0; pj < q; ++pj) {
              double acc = 0.0;
              for (std::size_t y = 0; y < sub_h; ++y)
                for (std::size_t x = 0; x < sub_w; ++x)
                  acc += image(c, (i * q + pi) * sub_h + y, (j * q + pj) * sub_w + x);
              block[pi * q + pj] = acc / static_cast<double>(sub_h * sub_w);
              mean += block[pi * q + pj];
            }
          mean /= static_cast<double>(q * q);
          for (std::size_t p = 0; p < q * q; ++p) block[p] -= mean;
          block[q * q] = mean - 0.5;
        }
        for (std::size_t d = 0; d < feature_dim_; ++d) {
          double acc = 0.0;
          for (std::size_t p = 0; p < in; ++p) acc += projection_[d * in + p] * patch[p];
          features(d, i, j) = std::max(acc, 0.0);
        }
      }
    return l2_normalize_channels(features);
  }

 private:
  std::size_t feature_dim_, height_, width_, channels_, patch_grid_;
  Tensor projection_;
};

/// Loads an externally computed D x H x W map and L2-normalizes its columns.
inline Tensor provider_import(const std::filesystem::path& path) {
  Tensor t = load_tensor(path);
  if (t.rank() != 3) throw ShapeError("provider_import: expected a rank-3 feature map, got " + shape_string(t.shape()));
  return l2_normalize_channels(t);
}

// ---------------------------------------------------------------------------
// Procedural corpus
// ---------------------------------------------------------------------------

/// Smooth random blobs over a textured gradient, values in [0, 1].
inline Tensor procedural_image(std::size_t channels, std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  Tensor img({channels, size, size});
  const double s = static_cast<double>(size);
  for (std::size_t c = 0; c < channels; ++c) {
    const double gx = rng.uniform(-1, 1), gy = rng.uniform(-1, 1);
    const double fx = rng.uniform(1.0, 4.0) * 2.0 * std::numbers::pi / s;
    const double fy = rng.uniform(1.0, 4.0) * 2.0 * std::numbers::pi / s;
    const double phase = rng.uniform(0, 2 * std::numbers::pi), tex = rng.uniform(0.1, 0.3);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double u = static_cast<double>(x) / s - 0.5, v = static_cast<double>(y) / s - 0.5;
        img(c, y, x) = 0.3 * (gx * u + gy * v) +
                       tex * std::sin(fx * static_cast<double>(x) + phase) * std::cos(fy * static_cast<double>(y));
      }
    const std::size_t blobs = 6 + rng.index(7);
    for (std::size_t k = 0; k < blobs; ++k) {
      const double cx = rng.uniform(0, s), cy = rng.uniform(0, s);
      const double sigma = rng.uniform(0.06, 0.18) * s, amp = rng.uniform(-1.0, 1.0);
      const double inv = 1.0 / (2.0 * sigma * sigma);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
          img(c, y, x) += amp * std::exp(-(dx * dx + dy * dy) * inv);
        }
    }
  }
  const auto [lo, hi] = std::minmax_element(img.data().begin(), img.data().end());
  const double lo_v = *lo, span = std::max(*hi - *lo, 1e-12);
  for (auto& v : img.data()) v = (v - lo_v) / span;
  return img;
}

inline std::vector<Tensor> procedural_corpus(std::size_t count, std::size_t channels, std::size_t size,
                                             std::uint64_t seed) {
  std::vector<Tensor> corpus;
  corpus.reserve(count);
  for (std::size_t i = 0; i < count; ++i) corpus.push_back(procedural_image(channels, size, derive_seed(seed, i)));
  return corpus;
}

/// Every *.pgm / *.ppm file in a directory, in lexicographic order.
inline std::vector<Tensor> load_image_directory(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto ext = entry.path().extension().string();
    if (ext == ".pgm" || ext == ".ppm") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Tensor> images;
  for (const auto& f : files) images.push_back(read_pnm(f));
  if (images.empty()) throw std::invalid_argument("no P5/P6 images in " + dir.string());
  return images;
}

// ---------------------------------------------------------------------------
// Synthetic pairs
// ---------------------------------------------------------------------------

struct TrainingPair {
  Tensor source;
  Tensor target;
  TransformParams theta_gt;
};

/// target(g) = source(theta_gt(g)), with mirror padding and center cropping.
inline TrainingPair generate_pair(const Tensor& image, const TransformParams& theta_gt, std::size_t pad) {
  CropPair crops = mirror_pad_center_crop(image, pad, theta_gt);
  return {std::move(crops.source), std::move(crops.target), theta_gt};
}

inline TrainingPair generate_pair(const Tensor& image, TransformFamily family, std::size_t pad, std::uint64_t seed,
                                  const TransformSamplingBounds& bounds = {}, std::size_t tps_grid = kDefaultTpsGrid) {
  return generate_pair(image, sample_random_transform(family, seed, bounds, tps_grid), pad);
}

/// Pair ids with id % 10 == 9 form the validation partition.
inline std::uint64_t training_pair_id(std::uint64_t n) { return (n / 9) * 10 + n % 9; }
inline std::uint64_t validation_pair_id(std::uint64_t n) { return n * 10 + 9; }

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 2e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 50;
  std::size_t steps_per_epoch = 100;
  std::uint64_t seed = 0;
  std::string provider = "random_projection";
  ModelConfig model = desk_model();
  std::size_t patch_grid = 8;
  std::size_t cell_size = 8;
  std::size_t image_channels = 1;
  std::size_t corpus_size = 64;
  std::string corpus_dir;
  std::size_t val_pairs = 200;
  std::size_t tgd_grid = kDefaultTgdGrid;
  std::size_t pad = 0;  // 0 selects default_mirror_pad(image size)
  double divergence_factor = 10.0;
  std::size_t divergence_patience = 100;

  static ModelConfig desk_model() {
    ModelConfig m;
    m.feature_dim = 16;
    m.height = 8;
    m.width = 8;
    m.kernels = 64;
    m.encoder_channels = 128;
    m.g_hidden = 256;
    m.g_out = 256;
    m.s_hidden = 64;
    return m;
  }

  std::size_t total_steps() const { return epochs * steps_per_epoch; }
  std::size_t image_height() const { return model.height * cell_size; }
  std::size_t image_width() const { return model.width * cell_size; }
  std::size_t mirror_pad() const { return pad ? pad : default_mirror_pad(std::max(image_height(), image_width())); }

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
    if (batch_size == 0 || epochs == 0 || steps_per_epoch == 0) {
      throw ConfigError("batch_size, epochs and steps_per_epoch must be positive");
    }
    if (provider != "random_projection") throw ConfigError("unknown provider `" + provider + "`");
    if (cell_size == 0 || patch_grid == 0 || cell_size % patch_grid != 0) {
      throw ConfigError("cell_size must be a positive multiple of patch_grid");
    }
    if (corpus_dir.empty() && corpus_size == 0) throw ConfigError("corpus_size must be positive");
    if (val_pairs == 0 || tgd_grid < 2) throw ConfigError("val_pairs must be positive and tgd_grid >= 2");
    model.validate();
  }

  /// Every key accepted in a config file, in snapshot order.
  std::vector<std::pair<std::string, std::string>> to_key_values() const {
    std::ostringstream lr;
    lr << std::setprecision(17) << learning_rate;
    std::ostringstream div;
    div << std::setprecision(17) << divergence_factor;
    std::vector<std::pair<std::string, std::string>> kv{
        {"learning_rate", lr.str()},
        {"batch_size", std::to_string(batch_size)},
        {"epochs", std::to_string(epochs)},
        {"steps_per_epoch", std::to_string(steps_per_epoch)},
        {"seed", std::to_string(seed)},
        {"provider", provider},
    };
    for (auto& [k, v] : model.to_key_values())
      if (k != "seed") kv.emplace_back(k, v);
    kv.insert(kv.end(), {{"patch_grid", std::to_string(patch_grid)},
                         {"cell_size", std::to_string(cell_size)},
                         {"image_channels", std::to_string(image_channels)},
                         {"corpus_size", std::to_string(corpus_size)},
                         {"corpus_dir", corpus_dir.empty() ? "-" : corpus_dir},
                         {"val_pairs", std::to_string(val_pairs)},
                         {"tgd_grid", std::to_string(tgd_grid)},
                         {"pad", std::to_string(pad)},
                         {"divergence_factor", div.str()},
                         {"divergence_patience", std::to_string(divergence_patience)}});
    return kv;
  }
};

namespace detail {

inline std::uint64_t parse_unsigned(const KeyValueEntry& e) {
  if (e.value.empty() || e.value.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError("`" + e.key + "` expects a non-negative integer, got `" + e.value + "`", e.line);
  }
  try {
    return std::stoull(e.value);
  } catch (const std::out_of_range&) {
    throw ConfigError("`" + e.key + "` is out of range", e.line);
  }
}

inline double parse_real(const KeyValueEntry& e) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(e.value, &used);
  } catch (const std::logic_error&) {
    throw ConfigError("`" + e.key + "` expects a number, got `" + e.value + "`", e.line);
  }
  if (used != e.value.size() || !std::isfinite(v)) {
    throw ConfigError("`" + e.key + "` expects a number, got `" + e.value + "`", e.line);
  }
  return v;
}

inline bool parse_bool(const KeyValueEntry& e) {
  if (e.value == "true" || e.value == "1") return true;
  if (e.value == "false" || e.value == "0") return false;
  throw ConfigError("`" + e.key + "` expects true or false", e.line);
}

}  // namespace detail

/// Builds a TrainConfig from parsed entries; unknown keys are rejected.
inline TrainConfig train_config_from_entries(const std::vector<KeyValueEntry>& entries) {
  TrainConfig cfg;
  using Setter = std::function<void(const KeyValueEntry&)>;
  const std::map<std::string, Setter> setters{
      {"learning_rate", [&](const auto& e) { cfg.learning_rate = detail::parse_real(e); }},
      {"batch_size", [&](const auto& e) { cfg.batch_size = detail::parse_unsigned(e); }},
      {"epochs", [&](const auto& e) { cfg.epochs = detail::parse_unsigned(e); }},
      {"steps_per_epoch", [&](const auto& e) { cfg.steps_per_epoch = detail::parse_unsigned(e); }},
      {"seed", [&](const auto& e) { cfg.seed = detail::parse_unsigned(e); }},
      {"provider", [&](const auto& e) { cfg.provider = e.value; }},
      {"family",
       [&](const auto& e) {
         try {
           cfg.model.family = parse_family(e.value);
         } catch (const std::invalid_argument& err) {
           throw ConfigError(err.what(), e.line);
         }
       }},
      {"feature_dim", [&](const auto& e) { cfg.model.feature_dim = detail::parse_unsigned(e); }},
      {"feature_height", [&](const auto& e) { cfg.model.height = detail::parse_unsigned(e); }},
      {"feature_width", [&](const auto& e) { cfg.model.width = detail::parse_unsigned(e); }},
      {"kernels", [&](const auto& e) { cfg.model.kernels = detail::parse_unsigned(e); }},
      {"encoder_channels", [&](const auto& e) { cfg.model.encoder_channels = detail::parse_unsigned(e); }},
      {"encoder_kernel", [&](const auto& e) { cfg.model.encoder_kernel = detail::parse_unsigned(e); }},
      {"g_hidden", [&](const auto& e) { cfg.model.g_hidden = detail::parse_unsigned(e); }},
      {"g_out", [&](const auto& e) { cfg.model.g_out = detail::parse_unsigned(e); }},
      {"s_hidden", [&](const auto& e) { cfg.model.s_hidden = detail::parse_unsigned(e); }},
      {"embedding",
       [&](const auto& e) {
         try {
           cfg.model.embedding = parse_embedding_mode(e.value);
         } catch (const std::invalid_argument& err) {
           throw ConfigError(err.what(), e.line);
         }
       }},
      {"oac_bias", [&](const auto& e) { cfg.model.oac_bias = detail::parse_bool(e); }},
      {"oac_path",
       [&](const auto& e) {
         try {
           cfg.model.oac_path = parse_oac_path(e.value);
         } catch (const std::invalid_argument& err) {
           throw ConfigError(err.what(), e.line);
         }
       }},
      {"tps_grid", [&](const auto& e) { cfg.model.tps_grid = detail::parse_unsigned(e); }},
      {"patch_grid", [&](const auto& e) { cfg.patch_grid = detail::parse_unsigned(e); }},
      {"cell_size", [&](const auto& e) { cfg.cell_size = detail::parse_unsigned(e); }},
      {"image_channels", [&](const auto& e) { cfg.image_channels = detail::parse_unsigned(e); }},
      {"corpus_size", [&](const auto& e) { cfg.corpus_size = detail::parse_unsigned(e); }},
      {"corpus_dir", [&](const auto& e) { cfg.corpus_dir = e.value == "-" ? "" : e.value; }},
      {"val_pairs", [&](const auto& e) { cfg.val_pairs = detail::parse_unsigned(e); }},
      {"tgd_grid", [&](const auto& e) { cfg.tgd_grid = detail::parse_unsigned(e); }},
      {"pad", [&](const auto& e) { cfg.pad = detail::parse_unsigned(e); }},
      {"divergence_factor", [&](const auto& e) { cfg.divergence_factor = detail::parse_real(e); }},
      {"divergence_patience", [&](const auto& e) { cfg.divergence_patience = detail::parse_unsigned(e); }},
  };
  for (const auto& e : entries) {
    auto it = setters.find(e.key);
    if (it == setters.end()) throw ConfigError("unknown key `" + e.key + "`", e.line);
    it->second(e);
  }
  cfg.model.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  return train_config_from_entries(load_key_values(path));
}

inline std::string format_key_values(const std::vector<std::pair<std::string, std::string>>& kv) {
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Data source shared by training and evaluation
// ---------------------------------------------------------------------------

/// Corpus plus frozen provider; produces feature pairs for a pair id.
class SyntheticPairSource {
 public:
  explicit SyntheticPairSource(const TrainConfig& cfg)
      : config_(cfg),
        provider_(cfg.model.feature_dim, cfg.model.height, cfg.model.width, cfg.image_channels, cfg.patch_grid,
                  derive_seed(cfg.seed, 0xFEA7)),
        corpus_(cfg.corpus_dir.empty()
                    ? procedural_corpus(cfg.corpus_size, cfg.image_channels, cfg.image_height(), derive_seed(cfg.seed, 0xC0))
                    : load_image_directory(cfg.corpus_dir)),
        grid_(make_regular_grid(cfg.tgd_grid)) {
    for (const auto& img : corpus_) {
      if (img.shape() != Shape{cfg.image_channels, cfg.image_height(), cfg.image_width()}) {
        throw ShapeError("corpus image " + shape_string(img.shape()) + " does not match the configured " +
                         std::to_string(cfg.image_channels) + "x" + std::to_string(cfg.image_height()) + "x" +
                         std::to_string(cfg.image_width()));
      }
      padded_.push_back(mirror_pad(img, cfg.mirror_pad()));
      source_features_.push_back(provider_(img));
    }
  }

  struct Sample {
    Tensor f_src;
    Tensor f_trg;
    TransformParams theta_gt;
  };

  TrainingPair pair(std::uint64_t id) const {
    const Tensor& image = corpus_[id % corpus_.size()];
    return generate_pair(image, config_.model.family, config_.mirror_pad(), derive_seed(config_.seed, 1000 + id), {},
                         config_.model.tps_grid);
  }

  /// Same content as provider()(pair(id)) with the source side cached per image.
  Sample sample(std::uint64_t id) const {
    const std::size_t k = id % corpus_.size();
    const TransformParams theta = sample_random_transform(config_.model.family, derive_seed(config_.seed, 1000 + id),
                                                          {}, config_.model.tps_grid);
    const Tensor target = warp_padded(padded_[k], config_.image_height(), config_.image_width(), config_.mirror_pad(),
                                      as_point_map(theta));
    return {source_features_[k], provider_(target), theta};
  }

  const RandomProjectionProvider& provider() const { return provider_; }
  const std::vector<Tensor>& corpus() const { return corpus_; }
  const GridPoints& grid() const { return grid_; }

 private:
  TrainConfig config_;
  RandomProjectionProvider provider_;
  std::vector<Tensor> corpus_;
  GridPoints grid_;
  std::vector<Tensor> padded_;
  std::vector<Tensor> source_features_;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Thrown by the divergence guard; carries the step at which training stopped.
class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& msg, std::size_t step) : NumericError(msg), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct TrainResult {
  AlignmentNetwork network;
  std::vector<double> loss_history;
  /// Mean TGD of the identity prediction on each step's batch.
  std::vector<double> baseline_history;
};

using StepCallback = std::function<void(std::size_t step, double loss)>;

/**
 * Mini-batch ADAM on mean TGD. Only network parameters are optimized; the
 * provider is fixed. Batches are drawn from the training partition in pair-id
 * order, so a given config and seed always yields the same run.
 */
inline TrainResult train(const TrainConfig& cfg, const SyntheticPairSource& source, const StepCallback& on_step = {}) {
  cfg.validate();
  ModelConfig model_cfg = cfg.model;
  model_cfg.seed = cfg.seed;
  AlignmentNetwork net(model_cfg);
  Adam adam(AdamOptions{cfg.learning_rate});
  std::vector<double> history, baseline;
  history.reserve(cfg.total_steps());
  baseline.reserve(cfg.total_steps());
  const std::vector<TransformParams> identity(cfg.batch_size, TransformParams::identity(model_cfg.family, model_cfg.tps_grid));
  std::uint64_t next = 0;
  std::size_t over_limit = 0;
  const auto params = net.parameters();
  for (std::size_t step = 0; step < cfg.total_steps(); ++step) {
    std::vector<Tensor> src, trg;
    std::vector<TransformParams> gt;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      auto s = source.sample(training_pair_id(next++));
      src.push_back(std::move(s.f_src));
      trg.push_back(std::move(s.f_trg));
      gt.push_back(std::move(s.theta_gt));
    }
    ForwardCache cache;
    const ForwardResult out = net.forward(src, trg, Mode::train, &cache);
    const BatchLoss loss = mean_tgd(out.theta, gt, source.grid());
    if (!std::isfinite(loss.loss)) throw DivergenceError("loss became non-finite", step);
    history.push_back(loss.loss);
    baseline.push_back(mean_tgd(identity, gt, source.grid()).loss);
    if (on_step) on_step(step, loss.loss);
    if (loss.loss > cfg.divergence_factor * history.front()) {
      if (++over_limit >= cfg.divergence_patience) {
        throw DivergenceError("loss exceeded " + std::to_string(cfg.divergence_factor) + "x its initial value for " +
                                  std::to_string(cfg.divergence_patience) + " consecutive steps",
                              step);
      }
    } else {
      over_limit = 0;
    }
    net.backward(cache, loss.grad_theta);
    adam.step(params);
  }
  return {std::move(net), std::move(history), std::move(baseline)};
}

/// Checkpoint whose config.txt holds the full training config, so synthetic
/// evaluation can rebuild the same corpus and provider.
inline Checkpoint training_checkpoint(AlignmentNetwork& net, const TrainConfig& cfg) {
  Checkpoint ckpt = net.to_checkpoint();
  std::string running = ckpt.config_value("running_stats");
  ckpt.config = cfg.to_key_values();
  ckpt.config.emplace_back("running_stats", running);
  return ckpt;
}

inline TrainConfig train_config_from_checkpoint(const Checkpoint& ckpt) {
  std::vector<KeyValueEntry> entries;
  std::size_t line = 0;
  for (const auto& [k, v] : ckpt.config) {
    ++line;
    if (k != "running_stats") entries.push_back({k, v, line});
  }
  return train_config_from_entries(entries);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct TgdReport {
  double model_tgd = 0.0;
  double identity_tgd = 0.0;
  std::size_t pairs = 0;
  std::vector<double> per_pair_model;
  std::vector<double> per_pair_identity;
};

/// Mean TGD of the network (eval-mode BN) and of the identity prediction over
/// the first `count` validation pairs.
inline TgdReport evaluate_tgd(AlignmentNetwork& net, const SyntheticPairSource& source, std::size_t count,
                              std::size_t chunk = 16) {
  TgdReport rep;
  const TransformParams identity = TransformParams::identity(net.config().family, net.config().tps_grid);
  for (std::size_t start = 0; start < count; start += chunk) {
    std::vector<Tensor> src, trg;
    std::vector<TransformParams> gt;
    for (std::size_t k = start; k < std::min(count, start + chunk); ++k) {
      auto s = source.sample(validation_pair_id(k));
      src.push_back(std::move(s.f_src));
      trg.push_back(std::move(s.f_trg));
      gt.push_back(std::move(s.theta_gt));
    }
    const ForwardResult out = net.forward(src, trg, Mode::eval);
    for (std::size_t b = 0; b < gt.size(); ++b) {
      rep.per_pair_model.push_back(tgd(out.theta[b], gt[b], source.grid()).loss);
      rep.per_pair_identity.push_back(tgd(identity, gt[b], source.grid()).loss);
    }
  }
  rep.pairs = rep.per_pair_model.size();
  for (std::size_t i = 0; i < rep.pairs; ++i) {
    rep.model_tgd += rep.per_pair_model[i] / static_cast<double>(rep.pairs);
    rep.identity_tgd += rep.per_pair_identity[i] / static_cast<double>(rep.pairs);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Keypoint CSV: pair_id,src_x,src_y,trg_x,trg_y,bbox_h,bbox_w[,img_h,img_w]
// ---------------------------------------------------------------------------

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(detail::trim(field));
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

/// Rows sharing a pair_id are grouped in first-appearance order. The optional
/// trailing image size columns default to `default_image_height/width`.
inline std::vector<KeypointPairSet> read_keypoint_csv(const std::filesystem::path& path,
                                                      double default_image_height = 0.0,
                                                      double default_image_width = 0.0) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open keypoint file " + path.string());
  std::vector<KeypointPairSet> sets;
  std::map<std::string, std::size_t> index;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty() || line[0] == '#') continue;
    const auto f = split_csv_line(line);
    if (line_no == 1 && !f.empty() && f[0] == "pair_id") continue;
    if (f.size() != 7 && f.size() != 9) {
      throw FormatError("keypoint csv line " + std::to_string(line_no) + ": expected 7 or 9 fields");
    }
    double v[8];
    try {
      for (std::size_t k = 1; k < f.size(); ++k) v[k - 1] = std::stod(f[k]);
    } catch (const std::logic_error&) {
      throw FormatError("keypoint csv line " + std::to_string(line_no) + ": non-numeric field");
    }
    auto [it, inserted] = index.emplace(f[0], sets.size());
    if (inserted) {
      KeypointPairSet s;
      s.pair_id = f[0];
      s.bbox_height = v[4];
      s.bbox_width = v[5];
      s.image_height = f.size() == 9 ? v[6] : default_image_height;
      s.image_width = f.size() == 9 ? v[7] : default_image_width;
      sets.push_back(std::move(s));
    }
    KeypointPairSet& s = sets[it->second];
    s.source.push_back({v[0], v[1]});
    s.target.push_back({v[2], v[3]});
  }
  for (const auto& s : sets) validate_keypoints(s);
  if (sets.empty()) throw FormatError("keypoint file " + path.string() + " has no rows");
  return sets;
}

inline void write_keypoint_csv(const std::filesystem::path& path, const std::vector<KeypointPairSet>& sets) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "pair_id,src_x,src_y,trg_x,trg_y,bbox_h,bbox_w,img_h,img_w\n" << std::setprecision(17);
  for (const auto& s : sets)
    for (std::size_t k = 0; k < s.source.size(); ++k) {
      out << s.pair_id << ',' << s.source[k].x << ',' << s.source[k].y << ',' << s.target[k].x << ',' << s.target[k].y
          << ',' << s.bbox_height << ',' << s.bbox_width << ',' << s.image_height << ',' << s.image_width << '\n';
    }
}

/// Theta CSV: pair_id,family,v1,...,vQ per line.
inline std::map<std::string, TransformParams> read_theta_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open theta file " + path.string());
  std::map<std::string, TransformParams> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty() || line[0] == '#') continue;
    const auto f = split_csv_line(line);
    if (f.size() < 3) throw FormatError("theta csv line " + std::to_string(line_no) + ": too few fields");
    std::vector<double> values;
    try {
      for (std::size_t k = 2; k < f.size(); ++k) values.push_back(std::stod(f[k]));
      out.insert_or_assign(f[0], TransformParams(parse_family(f[1]), std::move(values)));
    } catch (const std::logic_error& err) {
      throw FormatError("theta csv line " + std::to_string(line_no) + ": " + err.what());
    }
  }
  return out;
}

inline void write_theta_csv(const std::filesystem::path& path, const std::vector<std::pair<std::string, TransformParams>>& rows) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << std::setprecision(17);
  for (const auto& [id, theta] : rows) {
    out << id << ',' << to_string(theta.family());
    for (double v : theta.values()) out << ',' << v;
    out << '\n';
  }
}

/**
 * Keypoint sets whose target points are theta(source) exactly, for oracle
 * checks of the PCK pipeline. Keypoints stay inside the image.
 */
inline std::vector<KeypointPairSet> synthetic_keypoint_sets(std::size_t pairs, std::size_t per_pair,
                                                            std::vector<TransformParams>& theta_out,
                                                            TransformFamily family, std::uint64_t seed,
                                                            double image_size = 240.0) {
  Rng rng(seed);
  std::vector<KeypointPairSet> sets;
  theta_out.clear();
  for (std::size_t p = 0; p < pairs; ++p) {
    TransformParams theta = sample_random_transform(family, rng);
    KeypointPairSet s;
    s.pair_id = "pair" + std::to_string(p);
    s.image_height = s.image_width = image_size;
    s.bbox_height = rng.uniform(0.3, 0.9) * image_size;
    s.bbox_width = rng.uniform(0.3, 0.9) * image_size;
    for (std::size_t k = 0; k < per_pair; ++k) {
      const Point src{rng.uniform(0.2, 0.8) * (image_size - 1), rng.uniform(0.2, 0.8) * (image_size - 1)};
      const Point mapped = transform_point(theta, pixel_to_normalized(src, image_size, image_size));
      s.source.push_back(src);
      s.target.push_back(normalized_to_pixel(mapped, image_size, image_size));
    }
    sets.push_back(std::move(s));
    theta_out.push_back(std::move(theta));
  }
  return sets;
}

/// Swaps keypoint roles: the network's theta maps target-image coordinates into
/// the source image (target(g) = source(theta(g))), so annotated target points
/// are the ones to transform and compare against source points.
inline KeypointPairSet as_network_direction(const KeypointPairSet& s) {
  KeypointPairSet out = s;
  std::swap(out.source, out.target);
  return out;
}

// ---------------------------------------------------------------------------
// Logs and dumps
// ---------------------------------------------------------------------------

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& history) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "step,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < history.size(); ++i) out << i << ',' << history[i] << '\n';
}

/// CSV of the H' x W' probabilities (one row per attention row) plus a P5 graymap.
inline void dump_attention(const std::filesystem::path& stem, const Tensor& alpha_plane) {
  require_rank(alpha_plane, 2, "dump_attention");
  std::ofstream out(stem.string() + ".csv");
  if (!out) throw FormatError("cannot write attention csv " + stem.string());
  out << std::setprecision(17);
  for (std::size_t i = 0; i < alpha_plane.dim(0); ++i) {
    for (std::size_t j = 0; j < alpha_plane.dim(1); ++j) out << (j ? "," : "") << alpha_plane(i, j);
    out << '\n';
  }
  write_pgm_normalized(stem.string() + ".pgm", alpha_plane);
}

inline Tensor attention_plane(const Tensor& alpha, std::size_t sample) {
  const std::size_t hh = alpha.dim(2), ww = alpha.dim(3);
  Tensor plane({hh, ww});
  for (std::size_t p = 0; p < hh * ww; ++p) plane[p] = alpha[sample * hh * ww + p];
  return plane;
}

}  // namespace oacnet
