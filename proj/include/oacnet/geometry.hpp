#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>
#include <vector>

#include "oacnet/random.hpp"
#include "oacnet/tensor.hpp"

namespace oacnet {

// Normalized coordinates span [-1, 1]^2 with (-1, -1) at the center of the
// top-left pixel and (1, 1) at the center of the bottom-right pixel.

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

using GridPoints = std::vector<Point>;

enum class TransformFamily { affine, tps };

inline std::string to_string(TransformFamily f) { return f == TransformFamily::affine ? "affine" : "tps"; }

inline TransformFamily parse_family(const std::string& s) {
  if (s == "affine") return TransformFamily::affine;
  if (s == "tps") return TransformFamily::tps;
  throw std::invalid_argument("unknown transform family `" + s + "` (expected affine or tps)");
}

inline constexpr std::size_t kAffineParamCount = 6;
inline constexpr std::size_t kDefaultTpsGrid = 3;

inline std::size_t tps_param_count(std::size_t grid) { return 2 * grid * grid; }

/**
 * Global transformation vector theta.
 *
 * Affine: (a11, a12, tx, a21, a22, ty), mapping (x, y) to
 * (a11 x + a12 y + tx, a21 x + a22 y + ty).
 *
 * TPS: x displacements of the grid x grid anchors followed by their y
 * displacements; anchors are ordered row-major (y outer, x inner).
 */
class TransformParams {
 public:
  TransformParams(TransformFamily family, std::vector<double> values) : family_(family), values_(std::move(values)) {
    if (family_ == TransformFamily::affine) {
      if (values_.size() != kAffineParamCount) {
        throw ShapeError("affine transform needs 6 parameters, got " + std::to_string(values_.size()));
      }
    } else {
      const auto grid = static_cast<std::size_t>(std::lround(std::sqrt(values_.size() / 2.0)));
      if (grid < 2 || tps_param_count(grid) != values_.size()) {
        throw ShapeError("tps transform needs 2*g*g parameters (g >= 2), got " + std::to_string(values_.size()));
      }
      tps_grid_ = grid;
    }
    for (double v : values_)
      if (!std::isfinite(v)) throw NumericError("transform parameters must be finite");
  }

  static TransformParams identity(TransformFamily family, std::size_t tps_grid = kDefaultTpsGrid) {
    if (family == TransformFamily::affine) return TransformParams(family, {1, 0, 0, 0, 1, 0});
    return TransformParams(family, std::vector<double>(tps_param_count(tps_grid), 0.0));
  }

  /// Identity parameter vector; adding a raw head output to it gives theta.
  static std::vector<double> identity_offset(TransformFamily family, std::size_t tps_grid = kDefaultTpsGrid) {
    return identity(family, tps_grid).values();
  }

  TransformFamily family() const { return family_; }
  const std::vector<double>& values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  std::size_t tps_grid() const { return tps_grid_; }

  friend bool operator==(const TransformParams& a, const TransformParams& b) {
    return a.family_ == b.family_ && a.values_ == b.values_;
  }

 private:
  TransformFamily family_;
  std::vector<double> values_;
  std::size_t tps_grid_ = 0;
};

inline std::size_t param_count(TransformFamily family, std::size_t tps_grid = kDefaultTpsGrid) {
  return family == TransformFamily::affine ? kAffineParamCount : tps_param_count(tps_grid);
}

// ---------------------------------------------------------------------------
// Thin-plate spline basis
// ---------------------------------------------------------------------------

/// U(r) = r^2 log(r^2), with U(0) = 0.
inline double tps_radial(double r2) { return r2 > 0.0 ? r2 * std::log(r2) : 0.0; }

/**
 * Precomputed solve for a fixed anchor lattice. Because the system matrix only
 * depends on the anchors, the interpolant is linear in the anchor targets:
 * T(g) = sum_k B_k(g) (anchor_k + displacement_k).
 */
class TpsBasis {
 public:
  explicit TpsBasis(std::size_t grid) : grid_(grid) {
    if (grid < 2) throw ShapeError("tps grid must be at least 2x2");
    const std::size_t k = grid * grid;
    for (std::size_t r = 0; r < grid; ++r)
      for (std::size_t c = 0; c < grid; ++c) {
        anchors_.push_back({-1.0 + 2.0 * static_cast<double>(c) / static_cast<double>(grid - 1),
                            -1.0 + 2.0 * static_cast<double>(r) / static_cast<double>(grid - 1)});
      }
    Eigen::MatrixXd system = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k + 3), static_cast<Eigen::Index>(k + 3));
    for (std::size_t i = 0; i < k; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      for (std::size_t j = 0; j < k; ++j) {
        const double dx = anchors_[i].x - anchors_[j].x, dy = anchors_[i].y - anchors_[j].y;
        system(ii, static_cast<Eigen::Index>(j)) = tps_radial(dx * dx + dy * dy);
      }
      const auto kk = static_cast<Eigen::Index>(k);
      system(ii, kk) = system(kk, ii) = 1.0;
      system(ii, kk + 1) = system(kk + 1, ii) = anchors_[i].x;
      system(ii, kk + 2) = system(kk + 2, ii) = anchors_[i].y;
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(system);
    if (!lu.isInvertible()) throw NumericError("tps system is singular for the anchor lattice");
    const Eigen::MatrixXd inverse = lu.inverse();
    // Only the columns multiplying anchor targets matter; the constraint rows are zero.
    coefficients_ = inverse.leftCols(static_cast<Eigen::Index>(k));
  }

  std::size_t grid() const { return grid_; }
  std::size_t anchor_count() const { return anchors_.size(); }
  const std::vector<Point>& anchors() const { return anchors_; }

  /// B(g): weights of each anchor target in the interpolated point.
  std::vector<double> weights(Point g) const {
    const std::size_t k = anchors_.size();
    Eigen::VectorXd phi(static_cast<Eigen::Index>(k + 3));
    for (std::size_t i = 0; i < k; ++i) {
      const double dx = g.x - anchors_[i].x, dy = g.y - anchors_[i].y;
      phi(static_cast<Eigen::Index>(i)) = tps_radial(dx * dx + dy * dy);
    }
    phi(static_cast<Eigen::Index>(k)) = 1.0;
    phi(static_cast<Eigen::Index>(k + 1)) = g.x;
    phi(static_cast<Eigen::Index>(k + 2)) = g.y;
    const Eigen::VectorXd b = coefficients_.transpose() * phi;
    return {b.data(), b.data() + b.size()};
  }

 private:
  std::size_t grid_;
  std::vector<Point> anchors_;
  Eigen::MatrixXd coefficients_;
};

/// Shared, lazily built basis per lattice size.
inline const TpsBasis& tps_basis(std::size_t grid) {
  static std::mutex mutex;
  static std::map<std::size_t, std::unique_ptr<TpsBasis>> cache;
  std::lock_guard lock(mutex);
  auto& slot = cache[grid];
  if (!slot) slot = std::make_unique<TpsBasis>(grid);
  return *slot;
}

// ---------------------------------------------------------------------------
// Point transforms
// ---------------------------------------------------------------------------

inline Point transform_point(const TransformParams& theta, Point p) {
  const auto& v = theta.values();
  if (theta.family() == TransformFamily::affine) {
    return {v[0] * p.x + v[1] * p.y + v[2], v[3] * p.x + v[4] * p.y + v[5]};
  }
  const TpsBasis& basis = tps_basis(theta.tps_grid());
  const auto b = basis.weights(p);
  const std::size_t k = basis.anchor_count();
  Point out;
  for (std::size_t i = 0; i < k; ++i) {
    out.x += b[i] * (basis.anchors()[i].x + v[i]);
    out.y += b[i] * (basis.anchors()[i].y + v[k + i]);
  }
  return out;
}

inline GridPoints transform_points(const TransformParams& theta, const GridPoints& pts) {
  GridPoints out;
  out.reserve(pts.size());
  for (const Point& p : pts) out.push_back(transform_point(theta, p));
  return out;
}

/// d T(p) / d theta as two rows (x then y), each of length Q.
struct PointJacobian {
  std::vector<double> dx;
  std::vector<double> dy;
};

inline PointJacobian transform_point_jacobian(const TransformParams& theta, Point p) {
  PointJacobian j{std::vector<double>(theta.size(), 0.0), std::vector<double>(theta.size(), 0.0)};
  if (theta.family() == TransformFamily::affine) {
    j.dx[0] = p.x;
    j.dx[1] = p.y;
    j.dx[2] = 1.0;
    j.dy[3] = p.x;
    j.dy[4] = p.y;
    j.dy[5] = 1.0;
    return j;
  }
  const TpsBasis& basis = tps_basis(theta.tps_grid());
  const auto b = basis.weights(p);
  const std::size_t k = basis.anchor_count();
  for (std::size_t i = 0; i < k; ++i) {
    j.dx[i] = b[i];
    j.dy[k + i] = b[i];
  }
  return j;
}

/// n x n points spanning [-1, 1]^2 inclusive, row-major with y outer.
inline GridPoints make_regular_grid(std::size_t n_per_side) {
  if (n_per_side < 2) throw std::invalid_argument("make_regular_grid: need at least 2 points per side");
  GridPoints grid;
  grid.reserve(n_per_side * n_per_side);
  const double step = 2.0 / static_cast<double>(n_per_side - 1);
  for (std::size_t r = 0; r < n_per_side; ++r)
    for (std::size_t c = 0; c < n_per_side; ++c)
      grid.push_back({-1.0 + step * static_cast<double>(c), -1.0 + step * static_cast<double>(r)});
  return grid;
}

inline constexpr std::size_t kDefaultTgdGrid = 20;

// ---------------------------------------------------------------------------
// Transformed grid distance
// ---------------------------------------------------------------------------

struct TgdResult {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d theta; theta_gt is held constant
};

inline TgdResult tgd(const TransformParams& theta, const TransformParams& theta_gt, const GridPoints& grid) {
  if (theta.family() != theta_gt.family() || theta.size() != theta_gt.size()) {
    throw std::invalid_argument("tgd: transform family mismatch (" + to_string(theta.family()) + " vs " +
                                to_string(theta_gt.family()) + ")");
  }
  if (grid.empty()) throw std::invalid_argument("tgd: empty grid");
  TgdResult r{0.0, std::vector<double>(theta.size(), 0.0)};
  const double inv = 1.0 / static_cast<double>(grid.size());
  for (const Point& g : grid) {
    const Point a = transform_point(theta, g);
    const Point b = transform_point(theta_gt, g);
    const double ex = a.x - b.x, ey = a.y - b.y;
    r.loss += (ex * ex + ey * ey) * inv;
    const PointJacobian j = transform_point_jacobian(theta, g);
    for (std::size_t q = 0; q < theta.size(); ++q) r.grad[q] += 2.0 * inv * (ex * j.dx[q] + ey * j.dy[q]);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Composition used by the two-stage affine then TPS evaluation.
// ---------------------------------------------------------------------------

struct ComposedTransform {
  TransformParams affine;
  TransformParams tps;

  Point operator()(Point p) const { return transform_point(tps, transform_point(affine, p)); }
};

inline ComposedTransform compose_affine_tps(const TransformParams& theta_aff, const TransformParams& theta_tps) {
  if (theta_aff.family() != TransformFamily::affine || theta_tps.family() != TransformFamily::tps) {
    throw std::invalid_argument("compose_affine_tps: expected an affine and a tps transform");
  }
  return {theta_aff, theta_tps};
}

/// Adapts TransformParams (or any callable Point -> Point) to a point map.
inline auto as_point_map(const TransformParams& theta) {
  return [&theta](Point p) { return transform_point(theta, p); };
}

// ---------------------------------------------------------------------------
// PCK
// ---------------------------------------------------------------------------

/**
 * Keypoint correspondences for one image pair, in pixel coordinates of an
 * image of size image_width x image_height (the frame the transform's
 * normalized coordinates refer to).
 */
struct KeypointPairSet {
  std::string pair_id;
  std::vector<Point> source;
  std::vector<Point> target;
  double bbox_height = 0.0;
  double bbox_width = 0.0;
  double image_height = 0.0;
  double image_width = 0.0;
};

inline Point pixel_to_normalized(Point px, double width, double height) {
  return {width > 1 ? 2.0 * px.x / (width - 1.0) - 1.0 : 0.0, height > 1 ? 2.0 * px.y / (height - 1.0) - 1.0 : 0.0};
}

inline Point normalized_to_pixel(Point p, double width, double height) {
  return {(p.x + 1.0) * (width - 1.0) / 2.0, (p.y + 1.0) * (height - 1.0) / 2.0};
}

struct PckResult {
  std::size_t correct = 0;
  std::size_t total = 0;
  double value() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

inline void validate_keypoints(const KeypointPairSet& set) {
  if (set.source.size() != set.target.size()) {
    throw std::invalid_argument("pair " + set.pair_id + ": source/target keypoint counts differ");
  }
  if (!(set.bbox_height > 0) || !(set.bbox_width > 0)) {
    throw std::invalid_argument("pair " + set.pair_id + ": bounding box must be positive");
  }
  if (!(set.image_height > 0) || !(set.image_width > 0)) {
    throw std::invalid_argument("pair " + set.pair_id + ": image size unknown");
  }
}

/// Pooled PCK: keypoints over all pairs, correct when the transformed source
/// point is strictly closer than alpha * max(h, w) to its target.
template <typename PointMap>
PckResult pck(const std::vector<KeypointPairSet>& pairs, const std::vector<PointMap>& predicted, double alpha) {
  if (!(alpha > 0)) throw std::invalid_argument("pck: alpha must be positive");
  if (pairs.size() != predicted.size()) throw std::invalid_argument("pck: one prediction per pair required");
  PckResult r;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const KeypointPairSet& set = pairs[i];
    validate_keypoints(set);
    const double threshold = alpha * std::max(set.bbox_height, set.bbox_width);
    for (std::size_t k = 0; k < set.source.size(); ++k) {
      const Point src = pixel_to_normalized(set.source[k], set.image_width, set.image_height);
      Point mapped;
      if constexpr (std::is_same_v<PointMap, TransformParams>) {
        mapped = transform_point(predicted[i], src);
      } else {
        mapped = predicted[i](src);
      }
      const Point px = normalized_to_pixel(mapped, set.image_width, set.image_height);
      const double d = std::hypot(px.x - set.target[k].x, px.y - set.target[k].y);
      if (d < threshold) ++r.correct;
      ++r.total;
    }
  }
  if (r.total == 0) throw std::invalid_argument("pck: empty keypoint set");
  return r;
}

// ---------------------------------------------------------------------------
// Image warping
// ---------------------------------------------------------------------------

/// Symmetric reflection: index -1 reads 0, index n reads n - 1.
inline long reflect_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * n;
  long m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - 1 - m;
}

inline double snap_to_integer(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

/// Bilinear sample of channel c at pixel coordinate (sx, sy); taps outside the
/// image read the mirror reflection.
inline double sample_bilinear(const Tensor& image, std::size_t c, double sx, double sy) {
  const long h = static_cast<long>(image.dim(1)), w = static_cast<long>(image.dim(2));
  sx = snap_to_integer(sx);
  sy = snap_to_integer(sy);
  const double fx0 = std::floor(sx), fy0 = std::floor(sy);
  const double ax = sx - fx0, ay = sy - fy0;
  const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
  if (x0 >= 0 && y0 >= 0 && x0 + 1 < w && y0 + 1 < h) {
    const double* row = image.data().data() + (static_cast<long>(c) * h + y0) * w + x0;
    return (1.0 - ay) * ((1.0 - ax) * row[0] + ax * row[1]) + ay * ((1.0 - ax) * row[w] + ax * row[w + 1]);
  }
  auto at = [&](long y, long x) {
    return image(c, static_cast<std::size_t>(reflect_index(y, h)), static_cast<std::size_t>(reflect_index(x, w)));
  };
  const double v00 = at(y0, x0);
  if (ax == 0.0 && ay == 0.0) return v00;
  return (1.0 - ay) * ((1.0 - ax) * v00 + ax * at(y0, x0 + 1)) + ay * ((1.0 - ax) * at(y0 + 1, x0) + ax * at(y0 + 1, x0 + 1));
}

/// Output pixel at normalized location g reads the input at map(g).
template <typename PointMap>
Tensor warp_image(const Tensor& image, const PointMap& map) {
  require_rank(image, 3, "warp_image");
  const std::size_t channels = image.dim(0), h = image.dim(1), w = image.dim(2);
  const double wd = static_cast<double>(w), hd = static_cast<double>(h);
  Tensor out(image.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const Point g = pixel_to_normalized({static_cast<double>(x), static_cast<double>(y)}, wd, hd);
      const Point s = normalized_to_pixel(map(g), wd, hd);
      for (std::size_t c = 0; c < channels; ++c) out(c, y, x) = sample_bilinear(image, c, s.x, s.y);
    }
  return out;
}

inline Tensor bilinear_warp(const Tensor& image, const TransformParams& theta) {
  return warp_image(image, as_point_map(theta));
}

/// Raised when a transform would sample beyond the mirror-padded extent.
class SamplingRangeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Tensor mirror_pad(const Tensor& image, std::size_t pad) {
  require_rank(image, 3, "mirror_pad");
  const std::size_t channels = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out({channels, h + 2 * pad, w + 2 * pad});
  const long p = static_cast<long>(pad);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < h + 2 * pad; ++y)
      for (std::size_t x = 0; x < w + 2 * pad; ++x) {
        const long sy = reflect_index(static_cast<long>(y) - p, static_cast<long>(h));
        const long sx = reflect_index(static_cast<long>(x) - p, static_cast<long>(w));
        out(c, y, x) = image(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      }
  return out;
}

/// Mirror padding per side is ceil(0.5 * size): enough for the default
/// sampling bounds, whose worst case reaches ~1.96 in normalized units.
inline constexpr double kDefaultPadFraction = 0.5;

inline std::size_t default_mirror_pad(std::size_t size) {
  return static_cast<std::size_t>(std::ceil(kDefaultPadFraction * static_cast<double>(size)));
}

struct CropPair {
  Tensor source;
  Tensor target;
};

/// Target crop sampled from an image already mirror-padded by `pad` pixels;
/// `height` x `width` is the unpadded size.
template <typename PointMap>
Tensor warp_padded(const Tensor& padded, std::size_t height, std::size_t width, std::size_t pad, const PointMap& map) {
  require_rank(padded, 3, "warp_padded");
  if (padded.dim(1) != height + 2 * pad || padded.dim(2) != width + 2 * pad) {
    throw ShapeError("warp_padded: padded image " + shape_string(padded.shape()) + " does not match pad " +
                     std::to_string(pad));
  }
  const std::size_t channels = padded.dim(0);
  const double wd = static_cast<double>(width), hd = static_cast<double>(height), p = static_cast<double>(pad);
  const double lo = -p, hi_x = wd - 1.0 + p, hi_y = hd - 1.0 + p;
  Tensor target({channels, height, width});
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const Point g = pixel_to_normalized({static_cast<double>(x), static_cast<double>(y)}, wd, hd);
      const Point s = normalized_to_pixel(map(g), wd, hd);
      if (!(s.x >= lo - 1e-9 && s.x <= hi_x + 1e-9 && s.y >= lo - 1e-9 && s.y <= hi_y + 1e-9)) {
        throw SamplingRangeError("mirror pad of " + std::to_string(pad) +
                                 " px is too small for the requested transform");
      }
      for (std::size_t c = 0; c < channels; ++c) target(c, y, x) = sample_bilinear(padded, c, s.x + p, s.y + p);
    }
  return target;
}

/**
 * Mirror-pads by `pad`, returns the center H x W window as the source and the
 * warp of the padded image (transform applied in the center frame's
 * normalized coordinates) cropped to the same window as the target.
 */
template <typename PointMap>
CropPair mirror_pad_center_crop_map(const Tensor& image, std::size_t pad, const PointMap& map) {
  require_rank(image, 3, "mirror_pad_center_crop");
  return {image, warp_padded(mirror_pad(image, pad), image.dim(1), image.dim(2), pad, map)};
}

inline CropPair mirror_pad_center_crop(const Tensor& image, std::size_t pad, const TransformParams& theta) {
  return mirror_pad_center_crop_map(image, pad, as_point_map(theta));
}

// ---------------------------------------------------------------------------
// Random transform sampling
// ---------------------------------------------------------------------------

struct TransformSamplingBounds {
  double max_rotation_degrees = 15.0;
  double min_scale = 0.75;
  double max_scale = 1.25;
  double max_shear = 0.15;
  double max_translation = 0.25;
  double max_tps_displacement = 0.4;
};

/// Affine: R(phi) * diag(sx, sy) * [[1, k], [0, 1]] plus translation.
/// TPS: independent uniform anchor displacements.
inline TransformParams sample_random_transform(TransformFamily family, Rng& rng,
                                               const TransformSamplingBounds& bounds = {},
                                               std::size_t tps_grid = kDefaultTpsGrid) {
  if (family == TransformFamily::affine) {
    const double phi = rng.uniform(-bounds.max_rotation_degrees, bounds.max_rotation_degrees) * std::numbers::pi / 180.0;
    const double sx = rng.uniform(bounds.min_scale, bounds.max_scale);
    const double sy = rng.uniform(bounds.min_scale, bounds.max_scale);
    const double k = rng.uniform(-bounds.max_shear, bounds.max_shear);
    const double tx = rng.uniform(-bounds.max_translation, bounds.max_translation);
    const double ty = rng.uniform(-bounds.max_translation, bounds.max_translation);
    const double c = std::cos(phi), s = std::sin(phi);
    // R * S = [[c sx, -s sy], [s sx, c sy]]; then times [[1, k], [0, 1]].
    const double a11 = c * sx, a12 = c * sx * k - s * sy;
    const double a21 = s * sx, a22 = s * sx * k + c * sy;
    return TransformParams(family, {a11, a12, tx, a21, a22, ty});
  }
  std::vector<double> d(tps_param_count(tps_grid));
  for (auto& v : d) v = rng.uniform(-bounds.max_tps_displacement, bounds.max_tps_displacement);
  return TransformParams(family, std::move(d));
}

inline TransformParams sample_random_transform(TransformFamily family, std::uint64_t seed,
                                               const TransformSamplingBounds& bounds = {},
                                               std::size_t tps_grid = kDefaultTpsGrid) {
  Rng rng(seed);
  return sample_random_transform(family, rng, bounds, tps_grid);
}

}  // namespace oacnet
