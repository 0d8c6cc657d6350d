#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "oacnet/adam.hpp"
#include "oacnet/gradcheck.hpp"
#include "oacnet/io.hpp"
#include "oacnet/ops.hpp"
#include "oacnet/random.hpp"

using namespace oacnet;

namespace {

Tensor reference_conv(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t pad) {
  const long in_ch = static_cast<long>(x.dim(0)), h = static_cast<long>(x.dim(1)), wd = static_cast<long>(x.dim(2));
  const long out_ch = static_cast<long>(w.dim(0)), k = static_cast<long>(w.dim(2)), p = static_cast<long>(pad);
  const long oh = h - k + 1 + 2 * p, ow = wd - k + 1 + 2 * p;
  Tensor y({static_cast<std::size_t>(out_ch), static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
  for (long o = 0; o < out_ch; ++o)
    for (long i = 0; i < oh; ++i)
      for (long j = 0; j < ow; ++j) {
        double s = b[o];
        for (long c = 0; c < in_ch; ++c)
          for (long u = 0; u < k; ++u)
            for (long v = 0; v < k; ++v) {
              const long yi = i + u - p, xj = j + v - p;
              if (yi < 0 || yi >= h || xj < 0 || xj >= wd) continue;
              s += w(o, c, u, v) * x(c, yi, xj);
            }
        y(o, i, j) = s;
      }
  return y;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("oacnet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Conv2d, OnesTimesTwo) {
  Tensor x({1, 3, 3}, 1.0);
  Tensor w({1, 1, 1, 1}, 2.0);
  Tensor b({1}, 0.0);
  const Tensor y = conv2d(x, w, b, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3}));
  for (double v : y.data()) EXPECT_EQ(v, 2.0);
}

TEST(Conv2d, EncoderShape) {
  Rng rng(3);
  const Tensor x = random_uniform({128, 15, 15}, rng);
  const Tensor w = random_uniform({128, 128, 7, 7}, rng, -0.01, 0.01);
  const Tensor y = conv2d(x, w, Tensor({128}), 0);
  EXPECT_EQ(y.shape(), (Shape{128, 9, 9}));
}

TEST(Conv2d, PaddedMatchesNestedLoops) {
  Rng rng(11);
  const Tensor x = random_uniform({2, 4, 4}, rng);
  const Tensor w = random_uniform({3, 2, 3, 3}, rng);
  const Tensor b = random_uniform({3}, rng);
  EXPECT_LE(max_abs_diff(conv2d(x, w, b, 1), reference_conv(x, w, b, 1)), 1e-12);
}

TEST(Conv2d, RandomShapesMatchNestedLoops) {
  Rng rng(5);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t in_ch = 1 + rng.index(4), out_ch = 1 + rng.index(4);
    const std::size_t h = 1 + rng.index(8), w = 1 + rng.index(8);
    const std::size_t k = 1 + 2 * rng.index(2);
    const std::size_t pad = rng.index(2);
    if (h + 2 * pad < k || w + 2 * pad < k) continue;
    const Tensor x = random_uniform({in_ch, h, w}, rng);
    const Tensor wt = random_uniform({out_ch, in_ch, k, k}, rng);
    const Tensor b = random_uniform({out_ch}, rng);
    EXPECT_LE(max_abs_diff(conv2d(x, wt, b, pad), reference_conv(x, wt, b, pad)), 1e-12)
        << in_ch << "x" << h << "x" << w << " k" << k << " p" << pad;
  }
}

TEST(Conv2d, BatchedEqualsPerSample) {
  Rng rng(8);
  const Tensor x = random_uniform({3, 2, 5, 6}, rng);
  const Tensor w = random_uniform({4, 2, 3, 3}, rng);
  const Tensor b = random_uniform({4}, rng);
  const Tensor y = conv2d(x, w, b, 0);
  for (std::size_t n = 0; n < 3; ++n) {
    Tensor xn({2, 5, 6});
    std::copy_n(x.data().begin() + n * 60, 60, xn.data().begin());
    const Tensor ref = reference_conv(xn, w, b, 0);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[n * ref.size() + i], ref[i], 1e-12);
  }
}

TEST(Conv2d, ShapeErrors) {
  Tensor x({2, 4, 4});
  EXPECT_THROW(conv2d(x, Tensor({1, 3, 3, 3}), Tensor({1}), 0), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor({1, 2, 2, 2}), Tensor({1}), 0), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor({1, 2, 5, 5}), Tensor({1}), 0), ShapeError);
  EXPECT_THROW(conv2d(x, Tensor({1, 2, 3, 3}), Tensor({2}), 0), ShapeError);
}

TEST(Conv2d, GradientCheck) {
  Rng rng(21);
  const Tensor x = random_uniform({2, 5, 5}, rng);
  const Tensor w = random_uniform({3, 2, 3, 3}, rng);
  const Tensor b = random_uniform({3}, rng);
  const Tensor probe = random_uniform({3, 5, 5}, rng);
  const auto grads = conv2d_backward(x, w, 1, probe);
  EXPECT_TRUE(grad_check([&](const Tensor& t) { return weighted_sum(conv2d(t, w, b, 1), probe); }, x, grads.input).passed);
  EXPECT_TRUE(grad_check([&](const Tensor& t) { return weighted_sum(conv2d(x, t, b, 1), probe); }, w, grads.weights).passed);
  EXPECT_TRUE(grad_check([&](const Tensor& t) { return weighted_sum(conv2d(x, w, t, 1), probe); }, b, grads.bias).passed);
}

TEST(Relu, Examples) {
  EXPECT_EQ(relu(Tensor({3}, {-1.0, 0.0, 2.0})), Tensor({3}, {0.0, 0.0, 2.0}));
  Rng rng(1);
  const Tensor neg = random_uniform({4, 4}, rng, -5.0, -0.1);
  const Tensor zeros = relu(neg);
  for (double v : zeros.data()) EXPECT_EQ(v, 0.0);
  const Tensor r = random_uniform({3, 7, 7}, rng);
  const Tensor y = relu(r);
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(y[i], r[i] > 0.0 ? r[i] : 0.0);
}

TEST(Relu, GradientCheckAwayFromKink) {
  Rng rng(2);
  Tensor x = random_uniform({2, 4, 4}, rng);
  for (auto& v : x.data())
    if (std::abs(v) < 0.01) v = 0.5;
  const Tensor probe = random_uniform(x.shape(), rng);
  const Tensor g = relu_backward(x, probe);
  EXPECT_TRUE(grad_check([&](const Tensor& t) { return weighted_sum(relu(t), probe); }, x, g).passed);
}

TEST(L2Normalize, Examples) {
  const Tensor y = l2_normalize_channels(Tensor({2, 1, 1}, {3.0, 4.0}));
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 0.8, 1e-15);
  const Tensor z = l2_normalize_channels(Tensor({4, 1, 1}, 0.0));
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(L2Normalize, UnitColumnsAndIdempotent) {
  Rng rng(4);
  const Tensor x = random_uniform({8, 5, 6}, rng);
  const Tensor y = l2_normalize_channels(x);
  for (std::size_t p = 0; p < 30; ++p) {
    double n = 0.0;
    for (std::size_t d = 0; d < 8; ++d) n += y[d * 30 + p] * y[d * 30 + p];
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-12);
  }
  EXPECT_LE(max_abs_diff(l2_normalize_channels(y), y), 1e-12);
}

TEST(L2Normalize, GradientCheck) {
  Rng rng(6);
  const Tensor x = random_uniform({5, 3, 4}, rng);
  const Tensor probe = random_uniform(x.shape(), rng);
  const Tensor g = l2_normalize_channels_backward(x, probe);
  EXPECT_TRUE(grad_check([&](const Tensor& t) { return weighted_sum(l2_normalize_channels(t), probe); }, x, g).passed);
}

TEST(BatchNorm, StandardizedBatchPassesThrough) {
  // Two samples per channel at +-1 have mean 0 and biased variance 1.
  Tensor x({2, 2, 1, 1}, {1.0, -1.0, -1.0, 1.0});
  BatchNorm bn("bn", 2);
  bn.epsilon = 0.0;
  EXPECT_LE(max_abs_diff(batch_norm(x, bn, Mode::train), x), 1e-10);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  Rng rng(9);
  const Tensor x = random_uniform({4, 3, 2, 2}, rng);
  BatchNorm bn("bn", 3);
  bn.gamma.value.fill(0.0);
  bn.beta.value = Tensor({3}, {0.5, -1.0, 2.0});
  const Tensor y = batch_norm(x, bn, Mode::train);
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < 4; ++p) EXPECT_EQ(y[(n * 3 + c) * 4 + p], bn.beta.value[c]);
}

TEST(BatchNorm, TrainModeMoments) {
  Rng rng(10);
  const Tensor x = random_uniform({6, 4, 3, 3}, rng, -3.0, 5.0);
  BatchNorm bn("bn", 4);
  bn.epsilon = 0.0;
  const Tensor y = batch_norm(x, bn, Mode::train);
  for (std::size_t c = 0; c < 4; ++c) {
    long double mean = 0, sq = 0;
    for (std::size_t n = 0; n < 6; ++n)
      for (std::size_t p = 0; p < 9; ++p) mean += y[(n * 4 + c) * 9 + p];
    mean /= 54;
    for (std::size_t n = 0; n < 6; ++n)
      for (std::size_t p = 0; p < 9; ++p) sq += (y[(n * 4 + c) * 9 + p] - mean) * (y[(n * 4 + c) * 9 + p] - mean);
    EXPECT_NEAR(static_cast<double>(mean), 0.0, 1e-10);
    EXPECT_NEAR(static_cast<double>(sq / 54), 1.0, 1e-8);
  }
}

TEST(BatchNorm, EvalBeforeTrainThrows) {
  BatchNorm bn("bn", 2);
  EXPECT_THROW(batch_norm(Tensor({1, 2, 2, 2}), bn, Mode::eval), std::logic_error);
  Rng rng(1);
  batch_norm(random_uniform({3, 2, 2, 2}, rng), bn, Mode::train);
  EXPECT_NO_THROW(batch_norm(Tensor({1, 2, 2, 2}), bn, Mode::eval));
}

TEST(BatchNorm, RunningStatsMomentum) {
  Tensor x({2, 1, 1, 1}, {1.0, 3.0});
  BatchNorm bn("bn", 1);
  batch_norm(x, bn, Mode::train);
  EXPECT_NEAR(bn.running_mean[0], 0.1 * 2.0, 1e-15);
  EXPECT_NEAR(bn.running_var[0], 0.9 + 0.1 * 2.0, 1e-15);
}

TEST(BatchNorm, GradientCheckBothModes) {
  Rng rng(12);
  const Tensor x = random_uniform({3, 2, 3, 3}, rng);
  const Tensor probe = random_uniform(x.shape(), rng);
  for (Mode mode : {Mode::train, Mode::eval}) {
    BatchNorm bn("bn", 2);
    bn.gamma.value = random_uniform({2}, rng, 0.5, 1.5);
    bn.beta.value = random_uniform({2}, rng);
    batch_norm(random_uniform(x.shape(), rng), bn, Mode::train);
    BatchNormCache cache;
    batch_norm(x, bn, mode, &cache, false);
    const Tensor gx = batch_norm_backward(probe, bn, cache);
    auto fx = [&](const Tensor& t) { return weighted_sum(batch_norm(t, bn, mode, nullptr, false), probe); };
    EXPECT_TRUE(grad_check(fx, x, gx).passed);
    const Tensor gg = bn.gamma.grad, gb = bn.beta.grad;
    const Tensor gamma0 = bn.gamma.value, beta0 = bn.beta.value;
    auto fg = [&](const Tensor& t) {
      bn.gamma.value = t;
      const double v = weighted_sum(batch_norm(x, bn, mode, nullptr, false), probe);
      bn.gamma.value = gamma0;
      return v;
    };
    auto fb = [&](const Tensor& t) {
      bn.beta.value = t;
      const double v = weighted_sum(batch_norm(x, bn, mode, nullptr, false), probe);
      bn.beta.value = beta0;
      return v;
    };
    EXPECT_TRUE(grad_check(fg, gamma0, gg).passed);
    EXPECT_TRUE(grad_check(fb, beta0, gb).passed);
  }
}

TEST(SpatialSoftmax, UniformScores) {
  const Tensor a = spatial_softmax(Tensor({1, 9, 9}, 0.37));
  for (double v : a.data()) EXPECT_NEAR(v, 1.0 / 81.0, 1e-16);
}

TEST(SpatialSoftmax, Dominance) {
  Tensor s({1, 4, 4}, -50.0);
  s(0, 2, 1) = 50.0;
  EXPECT_GE(spatial_softmax(s)(0, 2, 1), 1.0 - 1e-12);
}

TEST(SpatialSoftmax, MatchesExtendedPrecision) {
  Rng rng(13);
  const Tensor s = random_uniform({1, 5, 5}, rng, -4.0, 4.0);
  const Tensor a = spatial_softmax(s);
  long double total = 0;
  for (double v : s.data()) total += std::exp(static_cast<long double>(v));
  double sum = 0.0;
  for (std::size_t i = 0; i < 25; ++i) {
    EXPECT_NEAR(a[i], static_cast<double>(std::exp(static_cast<long double>(s[i])) / total), 1e-15);
    EXPECT_GT(a[i], 0.0);
    sum += a[i];
  }
  EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(SpatialSoftmax, ShiftInvariant) {
  Rng rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor s = random_uniform({1, 6, 7}, rng, -10.0, 10.0);
    Tensor t = s;
    const double c = rng.uniform(-500.0, 500.0);
    for (auto& v : t.data()) v += c;
    EXPECT_LE(max_abs_diff(spatial_softmax(s), spatial_softmax(t)), 1e-12);
  }
}

TEST(SpatialSoftmax, GradientCheck) {
  Rng rng(15);
  const Tensor s = random_uniform({2, 1, 3, 4}, rng);
  const Tensor probe = random_uniform(s.shape(), rng);
  const Tensor g = spatial_softmax_backward(spatial_softmax(s), probe);
  EXPECT_TRUE(grad_check([&](const Tensor& t) { return weighted_sum(spatial_softmax(t), probe); }, s, g).passed);
}

TEST(Adam, ZeroGradientLeavesParameter) {
  Parameter p("p", Tensor({3}, {1.0, -2.0, 0.5}));
  Adam adam;
  const Tensor before = p.value;
  for (int i = 0; i < 5; ++i) adam.step({&p});
  EXPECT_EQ(p.value, before);
}

TEST(Adam, FirstStepIsLearningRate) {
  Parameter p("p", Tensor({1}, 0.0));
  p.grad[0] = 1.0;
  Adam adam({.learning_rate = 0.1});
  adam.step({&p});
  // m_hat = 1, v_hat = 1 after bias correction.
  EXPECT_NEAR(p.value[0], -0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(p.grad[0], 0.0);
}

TEST(Adam, QuadraticBowl) {
  Parameter p("w", Tensor({1}, 1.0));
  Adam adam({.learning_rate = 0.05});
  for (int i = 0; i < 200; ++i) {
    p.grad[0] = 2.0 * p.value[0];
    adam.step({&p});
  }
  EXPECT_LT(std::abs(p.value[0]), 0.01);
}

TEST(Adam, MatchesReferenceRecurrence) {
  Parameter p("p", Tensor({2}, {0.3, -0.7}));
  Adam adam({.learning_rate = 0.01});
  long double w[2] = {0.3L, -0.7L}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 10; ++t) {
    for (int i = 0; i < 2; ++i) {
      const double g = std::sin(3.0 * t + i);
      p.grad[i] = g;
      m[i] = 0.9L * m[i] + 0.1L * g;
      v[i] = 0.999L * v[i] + 0.001L * g * g;
      const long double mh = m[i] / (1 - std::pow(0.9L, t)), vh = v[i] / (1 - std::pow(0.999L, t));
      w[i] -= 0.01L * mh / (std::sqrt(vh) + 1e-8L);
    }
    adam.step({&p});
  }
  EXPECT_NEAR(p.value[0], static_cast<double>(w[0]), 1e-12);
  EXPECT_NEAR(p.value[1], static_cast<double>(w[1]), 1e-12);
}

TEST(GradCheck, LinearMap) {
  const Tensor x({4}, {0.1, -0.4, 0.9, 2.0});
  const auto rep = grad_check(
      [](const Tensor& t) {
        double s = 0;
        for (double v : t.data()) s += 3.0 * v;
        return s;
      },
      x, Tensor({4}, 3.0));
  EXPECT_TRUE(rep.passed);
  EXPECT_LT(rep.max_relative_error, 1e-10);
  EXPECT_EQ(rep.entries_checked, 4u);
}

TEST(GradCheck, DetectsWrongGradient) {
  const Tensor x({3}, {0.7, 0.2, -0.3});
  const auto rep = grad_check([](const Tensor& t) { return t[0] * t[0] + t[1]; }, x, Tensor({3}, {1.0, 1.0, 0.0}));
  EXPECT_FALSE(rep.passed);
  EXPECT_EQ(rep.worst_index, 0u);
}

TEST(FiniteOutputs, LargeInputsStayFinite) {
  Rng rng(16);
  const Tensor x = random_uniform({3, 6, 6}, rng, -1e3, 1e3);
  const Tensor w = random_uniform({2, 3, 3, 3}, rng);
  EXPECT_TRUE(conv2d(x, w, Tensor({2}), 1).all_finite());
  EXPECT_TRUE(relu(x).all_finite());
  EXPECT_TRUE(l2_normalize_channels(x).all_finite());
  EXPECT_TRUE(spatial_softmax(x.reshaped({3, 1, 6, 6})).all_finite());
  BatchNorm bn("bn", 3);
  EXPECT_TRUE(batch_norm(x.reshaped({1, 3, 6, 6}), bn, Mode::train).all_finite());
}

TEST(TensorIo, RoundTripIsBitExact) {
  Rng rng(17);
  const Tensor t = random_uniform({2, 3, 4}, rng, -1e6, 1e6);
  const auto dir = scratch_dir("oact");
  save_tensor(dir / "t.oact", t);
  EXPECT_EQ(load_tensor(dir / "t.oact"), t);
  const std::string bytes = encode_tensor(t);
  EXPECT_EQ(bytes.substr(0, 4), "OACT");
  EXPECT_EQ(bytes.size(), 4u + 4u + 4u + 3u * 8u + 24u * 8u);
}

TEST(TensorIo, RejectsBadMagicAndTruncation) {
  std::string bytes = encode_tensor(Tensor({2}, 1.0));
  EXPECT_THROW(decode_tensor("XXXX" + bytes.substr(4)), FormatError);
  EXPECT_THROW(decode_tensor(bytes.substr(0, bytes.size() - 3)), FormatError);
}

TEST(Checkpoint, RoundTrip) {
  Checkpoint ck;
  ck.config = {{"alpha", "1"}, {"beta", "two"}};
  Rng rng(18);
  ck.entries.push_back({"w", "parameter", random_uniform({2, 2}, rng)});
  ck.entries.push_back({"stats", "buffer", random_uniform({3}, rng)});
  const auto dir = scratch_dir("ckpt");
  save_checkpoint(dir, ck);
  const Checkpoint back = load_checkpoint(dir);
  ASSERT_EQ(back.entries.size(), 2u);
  EXPECT_EQ(back.find("w")->tensor, ck.entries[0].tensor);
  EXPECT_EQ(back.find("stats")->role, "buffer");
  EXPECT_EQ(back.config_value("beta"), "two");
  EXPECT_THROW(back.config_value("gamma"), ConfigError);
}

TEST(KeyValues, CommentsAndLineNumbers) {
  const auto kv = parse_key_values("# header\n\na = 1\n  b=two  # trailing\n");
  ASSERT_EQ(kv.size(), 2u);
  EXPECT_EQ(kv[0].key, "a");
  EXPECT_EQ(kv[0].line, 3u);
  EXPECT_EQ(kv[1].value, "two");
  EXPECT_EQ(kv[1].line, 4u);
  EXPECT_THROW(parse_key_values("just words\n"), ConfigError);
}
