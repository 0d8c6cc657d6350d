#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "oacnet/tensor.hpp"

namespace oacnet {

/// Malformed or unreadable file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad key/value configuration; carries the offending line number (1-based, 0 if none).
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& msg, std::size_t line = 0)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + msg : msg), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// ---------------------------------------------------------------------------
// OACT tensor files: "OACT", u32 version, u32 rank, u64 dims..., f64 payload.
// All integers and floats little-endian, payload row-major.
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kTensorMagic = {'O', 'A', 'C', 'T'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.append(bytes.data(), bytes.size());
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw FormatError("tensor file truncated");
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  pos += sizeof(T);
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::string encode_tensor(const Tensor& t) {
  std::string out(kTensorMagic.begin(), kTensorMagic.end());
  detail::put_le<std::uint32_t>(out, kTensorFormatVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(out, d);
  for (double v : t.data()) detail::put_le<double>(out, v);
  return out;
}

inline Tensor decode_tensor(const std::string& bytes) {
  if (bytes.size() < 12 || !std::equal(kTensorMagic.begin(), kTensorMagic.end(), bytes.begin())) {
    throw FormatError("bad tensor magic");
  }
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(bytes, pos);
  if (version != kTensorFormatVersion) throw FormatError("unsupported tensor format version " + std::to_string(version));
  const auto rank = detail::get_le<std::uint32_t>(bytes, pos);
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(detail::get_le<std::uint64_t>(bytes, pos));
  const std::size_t n = shape_numel(shape);
  if (bytes.size() - pos != n * sizeof(double)) throw FormatError("tensor payload size does not match shape");
  std::vector<double> data(n);
  for (auto& v : data) v = detail::get_le<double>(bytes, pos);
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  detail::write_file(path, encode_tensor(t));
}

inline Tensor load_tensor(const std::filesystem::path& path) { return decode_tensor(detail::read_file(path)); }

// ---------------------------------------------------------------------------
// Flat `key = value` files. '#' starts a comment.
// ---------------------------------------------------------------------------

struct KeyValueEntry {
  std::string key;
  std::string value;
  std::size_t line;
};

inline std::vector<KeyValueEntry> parse_key_values(const std::string& text) {
  std::vector<KeyValueEntry> entries;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected `key = value`", line_no);
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("empty key", line_no);
    if (value.empty()) throw ConfigError("empty value for `" + key + "`", line_no);
    if (auto it = seen.find(key); it != seen.end()) {
      throw ConfigError("duplicate key `" + key + "` (first on line " + std::to_string(it->second) + ")", line_no);
    }
    seen[key] = line_no;
    entries.push_back({std::move(key), std::move(value), line_no});
  }
  return entries;
}

inline std::vector<KeyValueEntry> load_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

// ---------------------------------------------------------------------------
// Checkpoints: a directory of <name>.oact files plus manifest.txt with one
// `name shape role` line per tensor, and config.txt holding key = value pairs.
// ---------------------------------------------------------------------------

struct CheckpointEntry {
  std::string name;
  std::string role;  // parameter | buffer | fixed
  Tensor tensor;
};

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
  std::string config_value(const std::string& key) const {
    for (const auto& [k, v] : config)
      if (k == key) return v;
    throw ConfigError("checkpoint config has no `" + key + "`");
  }
};

inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  for (const auto& e : ckpt.entries) {
    save_tensor(dir / (e.name + ".oact"), e.tensor);
    manifest << e.name << ' ' << shape_string(e.tensor.shape()) << ' ' << e.role << '\n';
  }
  detail::write_file(dir / "manifest.txt", manifest.str());
  std::ostringstream cfg;
  for (const auto& [k, v] : ckpt.config) cfg << k << " = " << v << '\n';
  detail::write_file(dir / "config.txt", cfg.str());
}

inline Shape parse_shape(const std::string& text) {
  Shape shape;
  std::istringstream in(text);
  std::string part;
  while (std::getline(in, part, 'x')) {
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
      throw FormatError("bad shape `" + text + "`");
    }
    shape.push_back(static_cast<std::size_t>(std::stoull(part)));
  }
  if (shape.empty()) throw FormatError("bad shape `" + text + "`");
  return shape;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  Checkpoint ckpt;
  std::istringstream manifest(detail::read_file(dir / "manifest.txt"));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    std::istringstream fields(line);
    std::string name, shape_text, role;
    if (!(fields >> name >> shape_text >> role)) {
      throw FormatError("manifest line " + std::to_string(line_no) + " malformed");
    }
    Tensor t = load_tensor(dir / (name + ".oact"));
    if (t.shape() != parse_shape(shape_text)) {
      throw FormatError("tensor " + name + " has shape " + shape_string(t.shape()) + ", manifest says " + shape_text);
    }
    ckpt.entries.push_back({name, role, std::move(t)});
  }
  for (auto& kv : load_key_values(dir / "config.txt")) ckpt.config.emplace_back(kv.key, kv.value);
  return ckpt;
}

// ---------------------------------------------------------------------------
// Portable graymap / pixmap (binary P5 / P6, maxval <= 255). Images are
// C x H x W tensors with values in [0, 1].
// ---------------------------------------------------------------------------

inline Tensor read_pnm(const std::filesystem::path& path) {
  const std::string bytes = detail::read_file(path);
  std::size_t pos = 0;
  auto next_token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw FormatError("truncated PNM header in " + path.string());
    return bytes.substr(start, pos - start);
  };
  const std::string magic = next_token();
  std::size_t channels = 0;
  if (magic == "P5") {
    channels = 1;
  } else if (magic == "P6") {
    channels = 3;
  } else {
    throw FormatError("unsupported image format `" + magic + "` in " + path.string() + " (need P5 or P6)");
  }
  std::size_t width = 0, height = 0, maxval = 0;
  try {
    width = std::stoul(next_token());
    height = std::stoul(next_token());
    maxval = std::stoul(next_token());
  } catch (const std::logic_error&) {
    throw FormatError("bad PNM header in " + path.string());
  }
  if (width == 0 || height == 0 || maxval == 0 || maxval > 255) {
    throw FormatError("unsupported PNM dimensions or maxval in " + path.string());
  }
  ++pos;  // single whitespace after maxval
  if (bytes.size() - pos < width * height * channels) throw FormatError("truncated PNM payload in " + path.string());
  Tensor img({channels, height, width});
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        const auto v = static_cast<unsigned char>(bytes[pos + (y * width + x) * channels + c]);
        img(c, y, x) = static_cast<double>(v) / static_cast<double>(maxval);
      }
  return img;
}

inline unsigned char to_byte(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline void write_pnm(const std::filesystem::path& path, const Tensor& image) {
  require_rank(image, 3, "write_pnm");
  const std::size_t channels = image.dim(0), height = image.dim(1), width = image.dim(2);
  if (channels != 1 && channels != 3) throw ShapeError("write_pnm: need 1 or 3 channels");
  std::string out = (channels == 1 ? "P5\n" : "P6\n") + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < channels; ++c) out.push_back(static_cast<char>(to_byte(image(c, y, x))));
  detail::write_file(path, out);
}

/// Writes a single-channel map rescaled so its min/max span [0, 1].
inline void write_pgm_normalized(const std::filesystem::path& path, const Tensor& plane) {
  if (plane.rank() != 2) throw ShapeError("write_pgm_normalized: expected rank 2");
  const auto [lo, hi] = std::minmax_element(plane.data().begin(), plane.data().end());
  const double span = *hi - *lo;
  Tensor img({1, plane.dim(0), plane.dim(1)});
  for (std::size_t i = 0; i < plane.size(); ++i) img[i] = span > 0 ? (plane[i] - *lo) / span : 0.5;
  write_pnm(path, img);
}

}  // namespace oacnet
