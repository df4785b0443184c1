#pragma once

// Frame ingestion: CSV manifests, binary portable pixmaps (P5/P6, maxval
// 255), bilinear resizing to the network input, seeded splits, and a
// synthetic two-class frame generator.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bcnn/error.hpp"
#include "bcnn/rng.hpp"
#include "bcnn/tensor.hpp"

namespace bcnn {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Manifest

struct ManifestRecord {
  std::string path;  // relative to the manifest root
  int label = 0;     // 1: frame contains a polyp, 0: it does not

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct Manifest {
  std::vector<ManifestRecord> records;

  std::size_t size() const noexcept { return records.size(); }
  bool empty() const noexcept { return records.empty(); }

  std::size_t count_label(int label) const {
    return static_cast<std::size_t>(std::count_if(
        records.begin(), records.end(), [label](const auto& r) { return r.label == label; }));
  }

  /// Training needs both classes.
  void require_both_classes() const {
    if (count_label(0) == 0 || count_label(1) == 0) {
      throw DataError("manifest must contain both labels (0: " + std::to_string(count_label(0)) +
                      ", 1: " + std::to_string(count_label(1)) + ")");
    }
  }

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.label);
    return out;
  }

  friend bool operator==(const Manifest&, const Manifest&) = default;
};

/// Parses `relative_path,label` lines. Empty lines are skipped.
inline Manifest parse_manifest(std::string_view text) {
  Manifest m;
  std::set<std::string, std::less<>> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    const auto where = "manifest line " + std::to_string(line_no) + ": ";
    const std::size_t comma = line.rfind(',');
    if (comma == std::string_view::npos || comma == 0) {
      throw DataError(where + "expected `relative_path,label`");
    }
    const std::string_view path = line.substr(0, comma);
    const std::string_view label = line.substr(comma + 1);
    if (label != "0" && label != "1") {
      throw DataError(where + "label must be 0 or 1, got `" + std::string(label) + "`");
    }
    if (!seen.emplace(path).second) throw DataError(where + "duplicate path `" + std::string(path) + "`");
    m.records.push_back({std::string(path), label == "1" ? 1 : 0});
  }
  return m;
}

inline std::string format_manifest(const Manifest& m) {
  std::string out;
  for (const auto& r : m.records) {
    out += r.path;
    out += ',';
    out += r.label == 1 ? '1' : '0';
    out += '\n';
  }
  return out;
}

inline std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read `" + path.string() + "`");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError("error while reading `" + path.string() + "`");
  return bytes;
}

inline void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write `" + path.string() + "`");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("error while writing `" + path.string() + "`");
}

inline Manifest load_manifest(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return parse_manifest(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline void write_manifest(const fs::path& path, const Manifest& m) {
  const std::string text = format_manifest(m);
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------
// Frames and portable pixmaps

/// 8-bit RGB raster, interleaved, row-major.
struct Frame {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  Frame() = default;
  Frame(std::size_t w, std::size_t h) : width(w), height(h), rgb(w * h * 3, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t ch) { return rgb[(y * width + x) * 3 + ch]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t ch) const {
    return rgb[(y * width + x) * 3 + ch];
  }

  friend bool operator==(const Frame&, const Frame&) = default;
};

namespace detail {

class PnmHeaderReader {
 public:
  explicit PnmHeaderReader(std::span<const std::uint8_t> b) : b_(b) {}

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (std::isspace(b_[pos_]) != 0) {
        ++pos_;
      } else if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n' && b_[pos_] != '\r') ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    std::size_t v = 0;
    std::size_t digits = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_]) != 0) {
      v = v * 10 + static_cast<std::size_t>(b_[pos_++] - '0');
      if (++digits > 9) throw DataError(std::string("pixmap ") + what + " is too large");
    }
    if (digits == 0) throw DataError(std::string("pixmap header is missing the ") + what);
    return v;
  }

  std::size_t pos() const noexcept { return pos_; }
  void advance() noexcept { ++pos_; }
  bool at_space() const noexcept { return pos_ < b_.size() && std::isspace(b_[pos_]) != 0; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Decodes binary P6 (RGB) or P5 (gray, replicated to RGB) with maxval 255.
inline Frame decode_image(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw DataError("unsupported image: expected binary pixmap magic P5 or P6");
  }
  const bool rgb = bytes[1] == '6';
  detail::PnmHeaderReader r(bytes.subspan(2));
  const std::size_t width = r.number("width");
  const std::size_t height = r.number("height");
  const std::size_t maxval = r.number("maxval");
  if (width == 0 || height == 0) throw DataError("pixmap has zero size");
  if (maxval != 255) throw DataError("unsupported pixmap maxval " + std::to_string(maxval));
  if (!r.at_space()) throw DataError("pixmap header must end with a whitespace byte");
  r.advance();
  const std::size_t offset = 2 + r.pos();
  const std::size_t channels = rgb ? 3 : 1;
  const std::size_t need = width * height * channels;
  if (bytes.size() - offset < need) throw DataError("pixmap raster is truncated");
  Frame f(width, height);
  const std::uint8_t* src = bytes.data() + offset;
  if (rgb) {
    std::copy(src, src + need, f.rgb.begin());
  } else {
    for (std::size_t i = 0; i < need; ++i) f.rgb[i * 3] = f.rgb[i * 3 + 1] = f.rgb[i * 3 + 2] = src[i];
  }
  return f;
}

/// Encodes as P6, or as P5 when `gray` is set (uses the red channel).
inline std::vector<std::uint8_t> encode_image(const Frame& f, bool gray = false) {
  const std::string header =
      std::string(gray ? "P5\n" : "P6\n") + std::to_string(f.width) + " " + std::to_string(f.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  if (gray) {
    out.reserve(out.size() + f.width * f.height);
    for (std::size_t i = 0; i < f.width * f.height; ++i) out.push_back(f.rgb[i * 3]);
  } else {
    out.insert(out.end(), f.rgb.begin(), f.rgb.end());
  }
  return out;
}

inline Frame read_image(const fs::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_image(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Resizing

inline constexpr std::size_t kInputSize = 118;

/// Bilinear resize with corner-aligned sampling: output pixel i maps to
/// source coordinate i * (src - 1) / (dst - 1). Returns planar 3 x h x w
/// values on the 0..255 scale.
inline Tensor4<double> resize_bilinear(const Frame& f, std::size_t out_h, std::size_t out_w) {
  if (f.width < 2 || f.height < 2) {
    throw DataError("cannot resize a " + std::to_string(f.width) + "x" + std::to_string(f.height) +
                    " frame; need at least 2x2");
  }
  if (f.rgb.size() != f.width * f.height * 3) throw DataError("frame raster size mismatch");
  if (out_h == 0 || out_w == 0) throw DataError("resize target must be non-empty");

  auto coord = [](std::size_t i, std::size_t src, std::size_t dst) {
    if (dst == 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(src - 1) / static_cast<double>(dst - 1);
  };
  Tensor4<double> out(1, 3, out_h, out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const double sy = coord(oy, f.height, out_h);
    const auto y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, f.height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const double sx = coord(ox, f.width, out_w);
      const auto x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, f.width - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double top = (1.0 - fx) * f.at(y0, x0, ch) + fx * f.at(y0, x1, ch);
        const double bottom = (1.0 - fx) * f.at(y1, x0, ch) + fx * f.at(y1, x1, ch);
        out(0, ch, oy, ox) = (1.0 - fy) * top + fy * bottom;
      }
    }
  }
  return out;
}

struct InputOptions {
  bool mean_subtract = false;  // subtract each channel's frame mean after scaling
};

/// Network input: 1 x 3 x 118 x 118, scaled to [0, 1].
inline Tensor4<double> resize_to_input(const Frame& f, const InputOptions& opt = {}) {
  Tensor4<double> t = resize_bilinear(f, kInputSize, kInputSize);
  for (auto& v : t.values()) v /= 255.0;
  if (opt.mean_subtract) {
    const std::size_t plane = t.shape().plane();
    for (std::size_t ch = 0; ch < 3; ++ch) {
      double* p = t.plane(0, ch);
      double mean = 0.0;
      for (std::size_t i = 0; i < plane; ++i) mean += p[i];
      mean /= static_cast<double>(plane);
      for (std::size_t i = 0; i < plane; ++i) p[i] -= mean;
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Splits

struct Split {
  Manifest train;  // shuffled
  Manifest test;   // original manifest order
};

/// Seeded frame-level split; round(fraction * size) records go to training.
inline Split split_and_shuffle(const Manifest& m, std::uint64_t seed, double train_fraction) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ValueError("train fraction must lie strictly between 0 and 1");
  }
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(m.size())));
  if (n_train == 0 || n_train >= m.size()) {
    throw DataError("split of " + std::to_string(m.size()) + " records leaves one side empty");
  }
  Rng rng = make_rng(seed, Stream::kSplit);
  const auto perm = permutation(m.size(), rng);
  std::vector<bool> in_train(m.size(), false);
  Split s;
  for (std::size_t i = 0; i < n_train; ++i) {
    in_train[perm[i]] = true;
    s.train.records.push_back(m.records[perm[i]]);
  }
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!in_train[i]) s.test.records.push_back(m.records[i]);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Labeled frames held in memory

struct LabeledFrames {
  std::vector<Frame> frames;
  std::vector<int> labels;
  std::vector<std::string> paths;

  std::size_t size() const noexcept { return frames.size(); }
};

/// Reads every frame in the manifest; any unreadable file aborts with its path.
inline LabeledFrames load_frames(const Manifest& m, const fs::path& root) {
  LabeledFrames out;
  out.frames.reserve(m.size());
  for (const auto& r : m.records) {
    const fs::path p = root / r.path;
    try {
      out.frames.push_back(read_image(p));
    } catch (const DataError& e) {
      throw DataError("sample `" + p.string() + "` unreadable: " + e.what());
    }
    out.labels.push_back(r.label);
    out.paths.push_back(r.path);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic frames

struct SynthOptions {
  std::size_t width = 128;
  std::size_t height = 128;
};

/// One deterministic frame. Negatives are a smooth tinted background built
/// from a few low-frequency sinusoids; positives add one soft-edged bright
/// ellipse of random position, size, eccentricity and orientation.
inline Frame synth_frame(std::uint64_t seed, std::uint64_t index, bool positive, const SynthOptions& opt = {}) {
  Rng rng(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(Stream::kSynth)), index));
  const double pi = 3.14159265358979323846;
  const double w = static_cast<double>(opt.width);
  const double h = static_cast<double>(opt.height);

  const double base[3] = {uniform(rng, 130, 180), uniform(rng, 60, 100), uniform(rng, 50, 90)};
  const double tint[3] = {1.0, uniform(rng, 0.6, 0.9), uniform(rng, 0.5, 0.8)};
  struct Wave {
    double kx, ky, phase, amp;
  };
  Wave waves[3];
  for (auto& wv : waves) {
    const double period = uniform(rng, 80, 240);
    const double theta = uniform(rng, 0, 2 * pi);
    wv.kx = 2 * pi * std::cos(theta) / period;
    wv.ky = 2 * pi * std::sin(theta) / period;
    wv.phase = uniform(rng, 0, 2 * pi);
    wv.amp = uniform(rng, 8, 20);
  }

  double cx = 0, cy = 0, ax = 1, ay = 1, rot = 0, boost = 0;
  if (positive) {
    cx = uniform(rng, 0.2, 0.8) * w;
    cy = uniform(rng, 0.2, 0.8) * h;
    ax = uniform(rng, 0.07, 0.16) * std::min(w, h);
    ay = ax * uniform(rng, 0.5, 1.0);
    rot = uniform(rng, 0, pi);
    boost = uniform(rng, 60, 90);
  }
  const double c = std::cos(rot), s = std::sin(rot);

  Frame f(opt.width, opt.height);
  for (std::size_t y = 0; y < opt.height; ++y) {
    for (std::size_t x = 0; x < opt.width; ++x) {
      const double px = static_cast<double>(x), py = static_cast<double>(y);
      double bg = 0.0;
      for (const auto& wv : waves) bg += wv.amp * std::sin(wv.kx * px + wv.ky * py + wv.phase);
      double blob = 0.0;
      if (positive) {
        const double dx = px - cx, dy = py - cy;
        const double u = (c * dx + s * dy) / ax;
        const double v = (-s * dx + c * dy) / ay;
        const double r = std::sqrt(u * u + v * v);
        blob = boost / (1.0 + std::exp(8.0 * (r - 1.0)));
      }
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double val = base[ch] + tint[ch] * bg + blob;
        f.at(y, x, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(val), 0L, 255L));
      }
    }
  }
  return f;
}

/// Writes `count` frames plus `manifest.csv` into `out_dir`; a pure function
/// of (seed, count, positive_fraction).
inline Manifest synth_generate(const fs::path& out_dir, std::size_t count, double positive_fraction,
                               std::uint64_t seed, const SynthOptions& opt = {}) {
  if (count < 2) throw ValueError("synthetic corpus needs at least 2 frames");
  if (!(positive_fraction >= 0.0 && positive_fraction <= 1.0)) {
    throw ValueError("positive fraction must lie in [0, 1]");
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) {
    throw DataError("cannot create output directory `" + out_dir.string() + "`");
  }
  const auto positives =
      static_cast<std::size_t>(std::llround(positive_fraction * static_cast<double>(count)));
  Rng rng = make_rng(seed, Stream::kSynth);
  const auto perm = permutation(count, rng);
  std::vector<int> labels(count, 0);
  for (std::size_t i = 0; i < positives; ++i) labels[perm[i]] = 1;

  Manifest m;
  char name[32];
  for (std::size_t i = 0; i < count; ++i) {
    std::snprintf(name, sizeof name, "frame_%06zu.ppm", i);
    const Frame f = synth_frame(seed, i, labels[i] == 1, opt);
    write_file(out_dir / name, encode_image(f));
    m.records.push_back({name, labels[i]});
  }
  write_manifest(out_dir / "manifest.csv", m);
  return m;
}

}  // namespace bcnn
