#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "oacnet/correlation.hpp"
#include "oacnet/geometry.hpp"
#include "oacnet/io.hpp"
#include "oacnet/network.hpp"
#include "oacnet/pipeline.hpp"

namespace fs = std::filesystem;
using namespace oacnet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;

struct Dims {
  std::size_t h = 0, w = 0, n = 0;
};

Dims parse_dims(const std::string& text) {
  const Shape s = parse_shape(text);
  if (s.size() != 3 || s[0] == 0 || s[1] == 0 || s[2] == 0) {
    throw std::invalid_argument("--dims expects HxWxN with positive entries, got `" + text + "`");
  }
  return {s[0], s[1], s[2]};
}

std::string with_commas(std::uint64_t v) {
  std::string digits = std::to_string(v), out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

// -- train -------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string out_dir = "run";
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& args) {
  TrainConfig cfg;
  try {
    if (!fs::exists(args.config)) throw ConfigError("cannot read config file " + args.config);
    cfg = load_train_config(args.config);
    if (args.seed) {
      cfg.seed = *args.seed;
      cfg.model.seed = *args.seed;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << args.config << ": " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "config error: " << args.config << ": " << e.what() << '\n';
    return kExitUsage;
  }
  std::cout << "seed = " << cfg.seed << '\n' << "resolved config:\n" << format_key_values(cfg.to_key_values());

  try {
    fs::create_directories(args.out_dir);
    detail::write_file(fs::path(args.out_dir) / "config.txt", format_key_values(cfg.to_key_values()));
    const SyntheticPairSource source(cfg);
    const auto t0 = std::chrono::steady_clock::now();
    double epoch_sum = 0.0;
    std::optional<TrainResult> result;
    std::vector<double> partial;
    try {
      result.emplace(train(cfg, source, [&](std::size_t step, double loss) {
        partial.push_back(loss);
        epoch_sum += loss;
        if ((step + 1) % cfg.steps_per_epoch == 0) {
          std::cout << "epoch " << (step + 1) / cfg.steps_per_epoch << '/' << cfg.epochs
                    << " mean loss " << std::setprecision(6) << epoch_sum / static_cast<double>(cfg.steps_per_epoch)
                    << '\n';
          epoch_sum = 0.0;
        }
      }));
    } catch (const DivergenceError& e) {
      write_loss_csv(fs::path(args.out_dir) / "loss.csv", partial);
      std::cerr << "divergence guard at step " << e.step() << ": " << e.what() << '\n';
      return kExitNumeric;
    }
    write_loss_csv(fs::path(args.out_dir) / "loss.csv", result->loss_history);
    save_checkpoint(fs::path(args.out_dir) / "checkpoint", training_checkpoint(result->network, cfg));
    const TgdReport rep = evaluate_tgd(result->network, source, cfg.val_pairs);
    std::ostringstream metrics;
    metrics << std::setprecision(17) << "validation_pairs = " << rep.pairs << "\nmodel_tgd = " << rep.model_tgd
            << "\nidentity_tgd = " << rep.identity_tgd << '\n';
    detail::write_file(fs::path(args.out_dir) / "metrics.txt", metrics.str());
    std::cout << "trained " << cfg.total_steps() << " steps in " << std::setprecision(3) << ms_since(t0) / 1000.0
              << " s\nvalidation mean TGD " << std::setprecision(6) << rep.model_tgd << " (identity "
              << rep.identity_tgd << ", " << rep.pairs << " pairs)\n"
              << "checkpoint written to " << (fs::path(args.out_dir) / "checkpoint").string() << '\n';
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitOk;
}

// -- check-equiv ---------------------------------------------------------------

struct EquivArgs {
  std::string dims;
  std::size_t trials = 100;
  std::uint64_t seed = 0;
  bool corrupt_layout = false;
};

/// Reordered path built from reorder_by_offset and a 1x1 conv; the corruption
/// hook shifts the offset channels by one before the product.
Tensor reordered_via_conv(const Tensor& c, const OacKernelBank& bank, bool corrupt) {
  Tensor r = reorder_by_offset(c);
  const std::size_t ch = r.dim(0), plane = r.dim(1) * r.dim(2);
  if (corrupt && ch > 1) {
    Tensor shifted(r.shape());
    for (std::size_t k = 0; k < ch; ++k)
      for (std::size_t p = 0; p < plane; ++p) shifted[((k + 1) % ch) * plane + p] = r[k * plane + p];
    r = std::move(shifted);
  }
  const Tensor weights = bank.weights.value.reshaped({bank.kernels(), ch, 1, 1});
  const Tensor bias = bank.use_bias ? bank.bias.value : Tensor({bank.kernels()});
  return conv2d(r, weights, bias);
}

int cmd_check_equiv(const EquivArgs& args) {
  Dims d;
  try {
    d = parse_dims(args.dims);
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return kExitUsage;
  }
  Rng rng(args.seed);
  double max_dev = 0.0;
  for (std::size_t t = 0; t < args.trials; ++t) {
    OacKernelBank bank(d.n, d.h, d.w);
    bank.weights.value = random_uniform(bank.weights.value.shape(), rng, -1.0, 1.0);
    bank.bias.value = random_uniform(bank.bias.value.shape(), rng, -1.0, 1.0);
    const Tensor c = random_uniform({d.h * d.w, d.h, d.w}, rng, 0.0, 1.0);
    const Tensor direct = oac_preactivation_direct(c, bank);
    const Tensor reordered =
        args.corrupt_layout ? reordered_via_conv(c, bank, true) : oac_preactivation_reordered(c, bank);
    max_dev = std::max(max_dev, max_abs_diff(direct, reordered));
  }
  std::cout << "dims " << d.h << 'x' << d.w << 'x' << d.n << ", trials " << args.trials << ", seed " << args.seed
            << "\nmax deviation " << std::scientific << std::setprecision(3) << max_dev << '\n';
  const bool ok = max_dev <= 1e-10;
  std::cout << (ok ? "equivalent" : "NOT equivalent") << " (tolerance 1e-10)\n";
  return ok ? kExitOk : kExitNumeric;
}

// -- bench -----------------------------------------------------------------------

struct BenchArgs {
  std::string dims;
  std::size_t repeats = 3;
  std::uint64_t seed = 0;
};

int cmd_bench(const BenchArgs& args) {
  Dims d;
  try {
    d = parse_dims(args.dims);
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return kExitUsage;
  }
  if (args.repeats == 0) {
    std::cerr << "--repeats must be positive\n";
    return kExitUsage;
  }
  Rng rng(args.seed);
  OacKernelBank bank(d.n, d.h, d.w);
  bank.initialize(rng);
  const Tensor c = random_uniform({d.h * d.w, d.h, d.w}, rng, 0.0, 1.0);
  bool ok = true;
  std::cout << "dims " << d.h << 'x' << d.w << 'x' << d.n << ", repeats " << args.repeats << '\n';
  for (OacPath path : {OacPath::direct, OacPath::reordered}) {
    MultiplyCounter counter;
    double best = 0.0;
    for (std::size_t r = 0; r < args.repeats; ++r) {
      MultiplyCounter run;
      const auto t0 = std::chrono::steady_clock::now();
      const Tensor out = oac_preactivation(c, bank, path, &run);
      const double ms = ms_since(t0);
      best = r == 0 ? ms : std::min(best, ms);
      counter = run;
    }
    const std::uint64_t formula = count_multiplications(d.h, d.w, d.n, path);
    const bool match = counter.multiplies == formula;
    ok = ok && match;
    std::cout << std::left << std::setw(10) << to_string(path) << " formula " << with_commas(formula)
              << "  instrumented " << with_commas(counter.multiplies) << "  nonzero-operand "
              << with_commas(counter.nonzero_multiplies) << "  best " << std::fixed << std::setprecision(3) << best
              << " ms" << (match ? "" : "  MISMATCH") << '\n'
              << std::defaultfloat;
  }
  const double ratio = static_cast<double>(count_multiplications(d.h, d.w, d.n, OacPath::reordered)) /
                       static_cast<double>(count_multiplications(d.h, d.w, d.n, OacPath::direct));
  std::cout << "reordered / direct = " << std::setprecision(4) << ratio << '\n';
  return ok ? kExitOk : kExitNumeric;
}

// -- eval --------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::size_t pairs = 0;
  std::string keypoints_csv;
  std::string theta_file;
  std::string features_dir;
  std::string image_size;
  double alpha = 0.1;
  std::string dump_attention;
};

/// Lattice of target pixels and their ground-truth source positions, so
/// synthetic pairs also get a PCK figure. Roles follow the network direction.
KeypointPairSet lattice_keypoints(const std::string& id, const TransformParams& theta_gt, double h, double w) {
  KeypointPairSet s;
  s.pair_id = id;
  s.image_height = s.bbox_height = h;
  s.image_width = s.bbox_width = w;
  for (int a = 0; a < 5; ++a)
    for (int b = 0; b < 5; ++b) {
      const Point p{(w - 1) * (0.1 + 0.2 * b), (h - 1) * (0.1 + 0.2 * a)};
      s.source.push_back(p);
      s.target.push_back(normalized_to_pixel(transform_point(theta_gt, pixel_to_normalized(p, w, h)), w, h));
    }
  return s;
}

int cmd_eval(const EvalArgs& args) {
  if ((args.pairs > 0) == !args.keypoints_csv.empty()) {
    std::cerr << "eval: give exactly one of --pairs or --keypoints-csv\n";
    return kExitUsage;
  }
  if (!(args.alpha > 0.0)) {
    std::cerr << "eval: --alpha must be positive\n";
    return kExitUsage;
  }
  try {
    const bool needs_checkpoint = args.pairs > 0 || args.theta_file.empty();
    if (needs_checkpoint && args.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    if (!args.dump_attention.empty()) fs::create_directories(args.dump_attention);

    if (args.pairs > 0) {
      const Checkpoint ckpt = load_checkpoint(args.checkpoint);
      AlignmentNetwork net = AlignmentNetwork::from_checkpoint(ckpt);
      const TrainConfig cfg = train_config_from_checkpoint(ckpt);
      const SyntheticPairSource source(cfg);
      const TgdReport rep = evaluate_tgd(net, source, args.pairs);
      std::vector<KeypointPairSet> sets;
      std::vector<TransformParams> predicted;
      const double ih = static_cast<double>(cfg.image_height()), iw = static_cast<double>(cfg.image_width());
      for (std::size_t k = 0; k < args.pairs; ++k) {
        const auto s = source.sample(validation_pair_id(k));
        const ForwardResult out = net.forward({s.f_src}, {s.f_trg}, Mode::eval);
        sets.push_back(lattice_keypoints("val" + std::to_string(k), s.theta_gt, ih, iw));
        predicted.push_back(out.theta[0]);
        if (!args.dump_attention.empty()) {
          dump_attention(fs::path(args.dump_attention) / ("val" + std::to_string(k) + "_attention"),
                         attention_plane(out.alpha, 0));
        }
      }
      const PckResult p = pck(sets, predicted, args.alpha);
      std::cout << std::setprecision(6) << "synthetic pairs " << rep.pairs << "\nmean TGD " << rep.model_tgd
                << "\nidentity TGD " << rep.identity_tgd << "\nPCK@" << args.alpha << ' ' << p.value() << " ("
                << p.correct << '/' << p.total << ")\n";
      return kExitOk;
    }

    double dh = 0.0, dw = 0.0;
    if (!args.image_size.empty()) {
      const Shape s = parse_shape(args.image_size);
      if (s.size() != 2) throw ConfigError("--image-size expects HxW");
      dh = static_cast<double>(s[0]);
      dw = static_cast<double>(s[1]);
    }
    const std::vector<KeypointPairSet> sets = read_keypoint_csv(args.keypoints_csv, dh, dw);
    std::vector<KeypointPairSet> scored;
    std::vector<TransformParams> predicted;
    if (!args.theta_file.empty()) {
      const auto thetas = read_theta_csv(args.theta_file);
      for (const auto& s : sets) {
        auto it = thetas.find(s.pair_id);
        if (it == thetas.end()) throw ConfigError("theta file has no row for pair " + s.pair_id);
        scored.push_back(s);
        predicted.push_back(it->second);
      }
    } else {
      if (args.features_dir.empty()) throw ConfigError("--keypoints-csv needs --theta-file or --features-dir");
      const Checkpoint ckpt = load_checkpoint(args.checkpoint);
      AlignmentNetwork net = AlignmentNetwork::from_checkpoint(ckpt);
      for (const auto& s : sets) {
        const fs::path dir(args.features_dir);
        const Tensor f_src = provider_import(dir / (s.pair_id + "_src.oact"));
        const Tensor f_trg = provider_import(dir / (s.pair_id + "_trg.oact"));
        const ForwardResult out = net.forward({f_src}, {f_trg}, Mode::eval);
        scored.push_back(as_network_direction(s));
        predicted.push_back(out.theta[0]);
        if (!args.dump_attention.empty()) {
          dump_attention(fs::path(args.dump_attention) / (s.pair_id + "_attention"), attention_plane(out.alpha, 0));
        }
      }
    }
    const PckResult p = pck(scored, predicted, args.alpha);
    std::cout << std::setprecision(6) << "keypoint pairs " << scored.size() << "\nPCK@" << args.alpha << ' '
              << p.value() << " (" << p.correct << '/' << p.total << ")\n";
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "eval error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitOk;
}

// -- warp ------------------------------------------------------------------------

struct WarpArgs {
  std::string image;
  std::string theta_file;
  std::string checkpoint;
  std::optional<std::uint64_t> pair;
  std::string out = "warped.pgm";
};

int cmd_warp(const WarpArgs& args) {
  const bool theta_mode = !args.theta_file.empty();
  if (theta_mode == (!args.checkpoint.empty() || args.pair.has_value())) {
    std::cerr << "warp: give either --theta-file or --checkpoint with --pair\n";
    return kExitUsage;
  }
  if (!theta_mode && (args.checkpoint.empty() || !args.pair)) {
    std::cerr << "warp: --checkpoint and --pair go together\n";
    return kExitUsage;
  }
  try {
    const Tensor image = read_pnm(args.image);
    const fs::path out(args.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    if (theta_mode) {
      const auto thetas = read_theta_csv(args.theta_file);
      if (thetas.empty()) throw FormatError("theta file " + args.theta_file + " is empty");
      write_pnm(out, bilinear_warp(image, thetas.begin()->second));
      std::cout << "wrote " << out.string() << '\n';
      return kExitOk;
    }
    const Checkpoint ckpt = load_checkpoint(args.checkpoint);
    AlignmentNetwork net = AlignmentNetwork::from_checkpoint(ckpt);
    const TrainConfig cfg = train_config_from_checkpoint(ckpt);
    if (image.shape() != Shape{cfg.image_channels, cfg.image_height(), cfg.image_width()}) {
      throw ShapeError("image " + shape_string(image.shape()) + " does not match the checkpoint's " +
                       std::to_string(cfg.image_channels) + "x" + std::to_string(cfg.image_height()) + "x" +
                       std::to_string(cfg.image_width()));
    }
    const RandomProjectionProvider provider(cfg.model.feature_dim, cfg.model.height, cfg.model.width,
                                            cfg.image_channels, cfg.patch_grid, derive_seed(cfg.seed, 0xFEA7));
    const TrainingPair pair = generate_pair(image, cfg.model.family, cfg.mirror_pad(),
                                            derive_seed(cfg.seed, 1000 + *args.pair), {}, cfg.model.tps_grid);
    const ForwardResult r = net.forward({provider(pair.source)}, {provider(pair.target)}, Mode::eval);
    const std::string stem = (out.parent_path() / out.stem()).string();
    write_pnm(out, bilinear_warp(pair.source, r.theta[0]));
    write_pnm(stem + "_source" + out.extension().string(), pair.source);
    write_pnm(stem + "_target" + out.extension().string(), pair.target);
    dump_attention(stem + "_attention", attention_plane(r.alpha, 0));
    write_theta_csv(stem + "_theta.csv", {{"predicted", r.theta[0]}, {"ground_truth", pair.theta_gt}});
    std::cout << "wrote " << out.string() << " plus _source, _target, _attention and _theta files\n"
              << "TGD predicted " << tgd(r.theta[0], pair.theta_gt, make_regular_grid(kDefaultTgdGrid)).loss
              << ", identity "
              << tgd(TransformParams::identity(cfg.model.family, cfg.model.tps_grid), pair.theta_gt,
                     make_regular_grid(kDefaultTgdGrid))
                     .loss
              << '\n';
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "warp error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitOk;
}

// -- dump-kernels ------------------------------------------------------------------

int cmd_dump_kernels(const std::string& checkpoint, const std::string& out_dir, std::size_t max_kernels) {
  try {
    AlignmentNetwork net = AlignmentNetwork::from_checkpoint(load_checkpoint(checkpoint));
    dump_kernel_bank(net.kernel_bank(), out_dir, max_kernels);
    std::cout << "wrote kernel sheets to " << out_dir << '\n';
  } catch (const std::exception& e) {
    std::cerr << "dump-kernels error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Offset-aware correlation alignment network: training, evaluation and diagnostics"};
  app.require_subcommand(1);
  app.footer(
      "Training defaults: learning_rate 2e-4, batch_size 32, epochs 50 (ADAM beta1 0.9, beta2 0.999).\n"
      "PCK default: alpha 0.1.\n"
      "Exit codes: 0 success, 1 usage or config error, 2 numeric guard (divergence, failed equivalence).");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train on synthetic pairs from a key = value config file");
  train_cmd->add_option("--config", train_args.config, "Config file (learning_rate 2e-4, batch_size 32, epochs 50 by default)")
      ->required();
  train_cmd->add_option("--out-dir", train_args.out_dir, "Output directory")->capture_default_str();
  train_cmd->add_option("--seed", train_args.seed, "Overrides the config seed");

  EquivArgs equiv_args;
  auto* equiv_cmd = app.add_subcommand("check-equiv", "Compare direct and reordered OAC outputs on random instances");
  equiv_cmd->add_option("--dims", equiv_args.dims, "HxWxN")->required();
  equiv_cmd->add_option("--trials", equiv_args.trials, "Random instances")->capture_default_str();
  equiv_cmd->add_option("--seed", equiv_args.seed, "RNG seed")->capture_default_str();
  equiv_cmd->add_flag("--corrupt-layout", equiv_args.corrupt_layout)->group("");

  BenchArgs bench_args;
  auto* bench_cmd = app.add_subcommand("bench", "Multiplication counts and timings of both OAC paths");
  bench_cmd->add_option("--dims", bench_args.dims, "HxWxN")->required();
  bench_cmd->add_option("--repeats", bench_args.repeats, "Timed repetitions per path")->capture_default_str();
  bench_cmd->add_option("--seed", bench_args.seed, "RNG seed")->capture_default_str();

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Mean TGD on synthetic pairs or PCK on a keypoint CSV");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint directory");
  eval_cmd->add_option("--pairs", eval_args.pairs, "Number of held-out synthetic pairs");
  eval_cmd->add_option("--keypoints-csv", eval_args.keypoints_csv,
                       "pair_id,src_x,src_y,trg_x,trg_y,bbox_h,bbox_w[,img_h,img_w] rows");
  eval_cmd->add_option("--theta-file", eval_args.theta_file, "Per-pair predictions: pair_id,family,values...");
  eval_cmd->add_option("--features-dir", eval_args.features_dir, "Holds <pair_id>_src.oact and <pair_id>_trg.oact");
  eval_cmd->add_option("--image-size", eval_args.image_size, "HxW when the CSV has no image size columns");
  eval_cmd->add_option("--alpha", eval_args.alpha, "PCK threshold factor")->capture_default_str();
  eval_cmd->add_option("--dump-attention", eval_args.dump_attention, "Directory for attention CSV and P5 dumps");

  WarpArgs warp_args;
  auto* warp_cmd = app.add_subcommand("warp", "Warp an image by a theta file or by a checkpoint's prediction");
  warp_cmd->add_option("--image", warp_args.image, "P5/P6 image")->required();
  warp_cmd->add_option("--theta-file", warp_args.theta_file, "First row is used: pair_id,family,values...");
  warp_cmd->add_option("--checkpoint", warp_args.checkpoint, "Checkpoint directory");
  warp_cmd->add_option("--pair", warp_args.pair, "Synthetic pair id drawn from the image");
  warp_cmd->add_option("--out", warp_args.out, "Output image")->capture_default_str();

  std::string dump_ckpt, dump_out = "kernels";
  std::size_t dump_max = 0;
  auto* dump_cmd = app.add_subcommand("dump-kernels", "Write OAC kernel sheets as P5 images and CSV");
  dump_cmd->add_option("--checkpoint", dump_ckpt, "Checkpoint directory")->required();
  dump_cmd->add_option("--out-dir", dump_out, "Output directory")->capture_default_str();
  dump_cmd->add_option("--max", dump_max, "Kernels to write (0 = all)")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  if (*train_cmd) return cmd_train(train_args);
  if (*equiv_cmd) return cmd_check_equiv(equiv_args);
  if (*bench_cmd) return cmd_bench(bench_args);
  if (*eval_cmd) return cmd_eval(eval_args);
  if (*warp_cmd) return cmd_warp(warp_args);
  if (*dump_cmd) return cmd_dump_kernels(dump_ckpt, dump_out, dump_max);
  return kExitUsage;
}
