#pragma once

// On-disk model formats. All integers and reals are little-endian; reals are
// 32-bit IEEE-754.
//
//   magic        8 bytes   "BCNNFP32" (float) or "BCNNBIN1" (binarized)
//   version      u32       1
//   input        u32 x 3   channels, height, width
//   layer_count  u32
//   layer records:
//     type       u8        1 conv, 2 fc, 3 maxpool, 4 relu
//     dims       u32 x 5   out, in, kh, kw, stride
//     payload    float:     out*in*kh*kw weights, then out biases (f32)
//                binarized: per kernel f32 alpha + ceil(in*kh*kw / 8) sign
//                           bytes, then out biases (f32)
//                maxpool/relu records carry no payload
//   metadata     optional  "META", u64 iteration, u64 seed, u32 length, text
//   crc32        u32       over every preceding byte
//
// docs/model_format.md has an annotated hex dump.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "bcnn/binarize.hpp"
#include "bcnn/dataset.hpp"
#include "bcnn/error.hpp"
#include "bcnn/network.hpp"
#include "bcnn/packed.hpp"

namespace bcnn {

inline constexpr std::string_view kFloatMagic = "BCNNFP32";
inline constexpr std::string_view kBinarizedMagic = "BCNNBIN1";
inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kLayerRecordHeader = 1 + 5 * 4;

enum class ModelFormat { kFloat, kBinarized };

/// Trailing record carried by checkpoints and trained models.
struct ModelMetadata {
  std::uint64_t iteration = 0;
  std::uint64_t seed = 0;
  std::string config;  // human-readable key=value echo of the training config

  friend bool operator==(const ModelMetadata&, const ModelMetadata&) = default;
};

struct FloatModel {
  NetworkParams params;
  std::optional<ModelMetadata> metadata;
};

struct BinarizedModel {
  PackedNetwork network;
  std::optional<ModelMetadata> metadata;
};

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void text(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void dim(std::size_t v) {
    if (v > UINT32_MAX) throw ShapeError("dimension does not fit in 32 bits");
    u32(static_cast<std::uint32_t>(v));
  }

  std::vector<std::uint8_t> finish() && {
    const auto crc = ::crc32(0L, buf_.data(), static_cast<uInt>(buf_.size()));
    u32(static_cast<std::uint32_t>(crc));
    return std::move(buf_);
  }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : b_(b) {}

  std::size_t remaining() const noexcept { return b_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(FormatError::Kind::kTruncated, std::string("model file truncated in ") + what);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return b_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::span<const std::uint8_t> bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

struct LayerDims {
  LayerKind kind;
  std::uint32_t out, in, kh, kw, stride;
};

inline void write_header(ByteWriter& w, std::string_view magic, const NetworkSpec& spec) {
  w.text(magic);
  w.u32(kFormatVersion);
  w.dim(spec.in_channels);
  w.dim(spec.in_height);
  w.dim(spec.in_width);
  w.dim(spec.layers.size());
}

inline void write_dims(ByteWriter& w, const ResolvedLayer& r) {
  w.u8(static_cast<std::uint8_t>(r.spec.kind));
  switch (r.spec.kind) {
    case LayerKind::kConv:
    case LayerKind::kFullyConnected:
      w.dim(r.out.c);
      w.dim(r.in_channels);
      w.dim(r.kernel_h);
      w.dim(r.kernel_w);
      w.dim(r.spec.stride);
      break;
    case LayerKind::kMaxPool:
      w.dim(0);
      w.dim(0);
      w.dim(r.spec.kernel);
      w.dim(r.spec.kernel);
      w.dim(r.spec.stride);
      break;
    case LayerKind::kRelu:
      for (int i = 0; i < 5; ++i) w.u32(0);
      break;
  }
}

inline void write_metadata(ByteWriter& w, const std::optional<ModelMetadata>& meta) {
  if (!meta) return;
  w.text("META");
  w.u64(meta->iteration);
  w.u64(meta->seed);
  w.dim(meta->config.size());
  w.text(meta->config);
}

// Verifies magic, version and checksum, returning the body (without crc).
inline std::span<const std::uint8_t> open_body(std::span<const std::uint8_t> bytes, std::string_view magic) {
  if (bytes.size() < magic.size() ||
      std::memcmp(bytes.data(), magic.data(), magic.size()) != 0) {
    throw FormatError(FormatError::Kind::kBadMagic,
                      "bad model magic, expected `" + std::string(magic) + "`");
  }
  if (bytes.size() < magic.size() + 4) {
    throw FormatError(FormatError::Kind::kTruncated, "model file truncated in header");
  }
  ByteReader vr(bytes.subspan(magic.size(), 4));
  const std::uint32_t version = vr.u32("version");
  if (version != kFormatVersion) {
    throw FormatError(FormatError::Kind::kBadVersion,
                      "unsupported model format version " + std::to_string(version));
  }
  if (bytes.size() < magic.size() + 4 + 16 + 4) {
    throw FormatError(FormatError::Kind::kTruncated, "model file truncated in header");
  }
  return bytes.first(bytes.size() - 4);
}

inline void verify_crc(std::span<const std::uint8_t> bytes) {
  const auto body = bytes.first(bytes.size() - 4);
  ByteReader r(bytes.last(4));
  const std::uint32_t stored = r.u32("checksum");
  const auto actual = static_cast<std::uint32_t>(::crc32(0L, body.data(), static_cast<uInt>(body.size())));
  if (stored != actual) throw FormatError(FormatError::Kind::kChecksum, "model file checksum mismatch");
}

inline NetworkSpec read_spec_header(ByteReader& r, std::uint32_t& layer_count) {
  NetworkSpec spec;
  spec.in_channels = r.u32("input shape");
  spec.in_height = r.u32("input shape");
  spec.in_width = r.u32("input shape");
  layer_count = r.u32("layer count");
  spec.layers.clear();
  return spec;
}

inline LayerDims read_dims(ByteReader& r, std::size_t index) {
  const std::uint8_t type = r.u8("layer type");
  if (type < 1 || type > 4) {
    throw FormatError(FormatError::Kind::kBadLayer,
                      "layer " + std::to_string(index) + ": unknown type code " + std::to_string(type));
  }
  LayerDims d{static_cast<LayerKind>(type), 0, 0, 0, 0, 0};
  d.out = r.u32("layer dims");
  d.in = r.u32("layer dims");
  d.kh = r.u32("layer dims");
  d.kw = r.u32("layer dims");
  d.stride = r.u32("layer dims");
  return d;
}

// Rebuilds the layer spec from dims and checks it against the resolved chain.
inline LayerSpec spec_from_dims(const LayerDims& d, std::size_t index) {
  auto bad = [index](const std::string& msg) {
    return FormatError(FormatError::Kind::kBadLayer, "layer " + std::to_string(index) + ": " + msg);
  };
  switch (d.kind) {
    case LayerKind::kConv:
      if (d.kh != d.kw) throw bad("non-square convolution kernel");
      return LayerSpec::conv(d.kh, d.stride, d.out);
    case LayerKind::kFullyConnected:
      if (d.stride != 1) throw bad("fully connected stride must be 1");
      return LayerSpec::fully_connected(d.out);
    case LayerKind::kMaxPool:
      if (d.out != 0 || d.in != 0 || d.kh != d.kw) throw bad("malformed pooling record");
      return LayerSpec::maxpool(d.kh, d.stride);
    case LayerKind::kRelu:
      if (d.out != 0 || d.in != 0 || d.kh != 0 || d.kw != 0 || d.stride != 0) {
        throw bad("malformed rectifier record");
      }
      return LayerSpec::relu();
  }
  throw bad("unknown layer");
}

inline void check_dims(const LayerDims& d, const ResolvedLayer& r, std::size_t index) {
  if (!r.spec.has_params()) return;
  if (d.out != r.out.c || d.in != r.in_channels || d.kh != r.kernel_h || d.kw != r.kernel_w) {
    throw FormatError(FormatError::Kind::kBadLayer,
                      "layer " + std::to_string(index) + ": dims do not fit the input chain");
  }
}

// Payload size check: dims that claim more than the whole file are nonsense
// (overflow); dims that claim more than what is left mean truncation.
inline void check_payload(std::uint64_t payload, std::size_t remaining, std::size_t file_size,
                          std::size_t index) {
  if (payload > file_size) {
    throw FormatError(FormatError::Kind::kDimOverflow,
                      "layer " + std::to_string(index) + ": dims imply " + std::to_string(payload) +
                          " payload bytes, more than the file holds");
  }
  if (payload > remaining) {
    throw FormatError(FormatError::Kind::kTruncated,
                      "model file truncated in layer " + std::to_string(index) + " payload");
  }
}

inline std::optional<ModelMetadata> read_metadata(ByteReader& r) {
  if (r.remaining() == 0) return std::nullopt;
  const auto tag = r.bytes(std::min<std::size_t>(4, r.remaining()), "metadata");
  if (tag.size() != 4 || std::memcmp(tag.data(), "META", 4) != 0) {
    throw FormatError(FormatError::Kind::kTrailingData, "unexpected bytes after the last layer");
  }
  ModelMetadata m;
  m.iteration = r.u64("metadata");
  m.seed = r.u64("metadata");
  const std::uint32_t len = r.u32("metadata");
  const auto text = r.bytes(len, "metadata");
  m.config.assign(text.begin(), text.end());
  if (r.remaining() != 0) {
    throw FormatError(FormatError::Kind::kTrailingData, "unexpected bytes after the metadata record");
  }
  return m;
}

template <typename PerLayer>
NetworkSpec read_layers(ByteReader& r, std::size_t file_size, PerLayer&& on_param_layer) {
  std::uint32_t count = 0;
  NetworkSpec spec = read_spec_header(r, count);
  if (static_cast<std::uint64_t>(count) * kLayerRecordHeader > file_size) {
    throw FormatError(FormatError::Kind::kDimOverflow, "layer count exceeds the file size");
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const LayerDims d = read_dims(r, i);
    spec.layers.push_back(spec_from_dims(d, i));
    std::vector<ResolvedLayer> resolved;
    try {
      resolved = spec.resolve();
    } catch (const ShapeError& e) {
      throw FormatError(FormatError::Kind::kBadLayer, e.what());
    }
    check_dims(d, resolved.back(), i);
    if (resolved.back().spec.has_params()) on_param_layer(d, i);
  }
  return spec;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Float models

inline std::vector<std::uint8_t> encode_float(const NetworkParams& params,
                                              const std::optional<ModelMetadata>& meta = std::nullopt) {
  params.validate();
  detail::ByteWriter w;
  detail::write_header(w, kFloatMagic, params.spec);
  std::size_t k = 0;
  for (const auto& r : params.spec.resolve()) {
    detail::write_dims(w, r);
    if (!r.spec.has_params()) continue;
    const auto& p = params.layers[k++];
    for (double v : p.weights) w.f32(static_cast<float>(v));
    for (double v : p.biases) w.f32(static_cast<float>(v));
  }
  detail::write_metadata(w, meta);
  return std::move(w).finish();
}

inline FloatModel decode_float(std::span<const std::uint8_t> bytes) {
  const auto body = detail::open_body(bytes, kFloatMagic);
  detail::ByteReader r(body.subspan(kFloatMagic.size() + 4));
  std::vector<ConvParams<double>> layers;
  const NetworkSpec spec = detail::read_layers(r, bytes.size(), [&](const detail::LayerDims& d, std::size_t i) {
    const std::uint64_t weights = std::uint64_t{d.out} * d.in * d.kh * d.kw;
    detail::check_payload((weights + d.out) * 4, r.remaining(), bytes.size(), i);
    ConvParams<double> p(d.out, d.in, d.kh, d.kw, d.stride);
    for (auto& v : p.weights) v = r.f32("weights");
    for (auto& v : p.biases) v = r.f32("biases");
    layers.push_back(std::move(p));
  });
  FloatModel m{NetworkParams{spec, std::move(layers)}, detail::read_metadata(r)};
  detail::verify_crc(bytes);
  return m;
}

// ---------------------------------------------------------------------------
// Binarized models

inline std::vector<std::uint8_t> encode_binarized(const PackedNetwork& net,
                                                  const std::optional<ModelMetadata>& meta = std::nullopt) {
  detail::ByteWriter w;
  detail::write_header(w, kBinarizedMagic, net.spec);
  std::size_t k = 0;
  for (const auto& r : net.spec.resolve()) {
    detail::write_dims(w, r);
    if (!r.spec.has_params()) continue;
    if (k >= net.layers.size()) throw ShapeError("packed network is missing layers");
    const auto& l = net.layers[k++];
    l.validate();
    if (l.out_features != r.out.c || l.kernel_size() != r.in_channels * r.kernel_h * r.kernel_w) {
      throw ShapeError("packed layer " + std::to_string(k - 1) + " does not match its architecture");
    }
    for (const auto& kern : l.kernels) {
      w.f32(kern.alpha);
      w.bytes(kern.bits);
    }
    for (const auto& kern : l.kernels) w.f32(kern.bias);
  }
  if (k != net.layers.size()) throw ShapeError("packed network has extra layers");
  detail::write_metadata(w, meta);
  return std::move(w).finish();
}

inline BinarizedModel decode_binarized(std::span<const std::uint8_t> bytes) {
  const auto body = detail::open_body(bytes, kBinarizedMagic);
  detail::ByteReader r(body.subspan(kBinarizedMagic.size() + 4));
  std::vector<PackedLayer> layers;
  const NetworkSpec spec = detail::read_layers(r, bytes.size(), [&](const detail::LayerDims& d, std::size_t i) {
    const std::uint64_t n = std::uint64_t{d.in} * d.kh * d.kw;
    const std::uint64_t per_kernel = 4 + (n + 7) / 8;
    detail::check_payload(std::uint64_t{d.out} * (per_kernel + 4), r.remaining(), bytes.size(), i);
    PackedLayer l;
    l.out_features = d.out;
    l.in_channels = d.in;
    l.kernel_h = d.kh;
    l.kernel_w = d.kw;
    l.stride = d.stride;
    l.kind = d.kind;
    l.kernels.resize(d.out);
    for (auto& k : l.kernels) {
      k.n = static_cast<std::size_t>(n);
      k.alpha = r.f32("alpha");
      const auto b = r.bytes(packed_bytes(k.n), "sign bits");
      k.bits.assign(b.begin(), b.end());
      check_padding(k);
    }
    for (auto& k : l.kernels) k.bias = r.f32("biases");
    layers.push_back(std::move(l));
  });
  BinarizedModel m{PackedNetwork{spec, std::move(layers)}, detail::read_metadata(r)};
  detail::verify_crc(bytes);
  return m;
}

// ---------------------------------------------------------------------------
// Files

inline std::optional<ModelFormat> sniff_format(std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= 8) {
    if (std::memcmp(bytes.data(), kFloatMagic.data(), 8) == 0) return ModelFormat::kFloat;
    if (std::memcmp(bytes.data(), kBinarizedMagic.data(), 8) == 0) return ModelFormat::kBinarized;
  }
  return std::nullopt;
}

namespace detail {

inline std::vector<std::uint8_t> read_model_bytes(const fs::path& path) {
  try {
    return read_file(path);
  } catch (const DataError& e) {
    throw FormatError(FormatError::Kind::kIo, e.what());
  }
}

inline void write_model_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  try {
    write_file(path, bytes);
  } catch (const DataError& e) {
    throw FormatError(FormatError::Kind::kIo, e.what());
  }
}

}  // namespace detail

inline void save_float(const fs::path& path, const NetworkParams& params,
                       const std::optional<ModelMetadata>& meta = std::nullopt) {
  detail::write_model_bytes(path, encode_float(params, meta));
}

inline FloatModel load_float(const fs::path& path) { return decode_float(detail::read_model_bytes(path)); }

inline void save_binarized(const fs::path& path, const PackedNetwork& net,
                           const std::optional<ModelMetadata>& meta = std::nullopt) {
  detail::write_model_bytes(path, encode_binarized(net, meta));
}

inline void save_binarized(const fs::path& path, const BinarizedNetwork& net,
                           const std::optional<ModelMetadata>& meta = std::nullopt) {
  save_binarized(path, to_packed(net), meta);
}

inline BinarizedModel load_binarized(const fs::path& path) {
  return decode_binarized(detail::read_model_bytes(path));
}

// ---------------------------------------------------------------------------
// Size accounting

struct CompressionReport {
  std::uint64_t float_bytes = 0;
  std::uint64_t bin_bytes = 0;
  double ratio = 0.0;  // float_bytes / bin_bytes
};

/// Ratio of full on-disk sizes; both buffers must decode.
inline CompressionReport compression_report(std::span<const std::uint8_t> float_bytes,
                                            std::span<const std::uint8_t> bin_bytes) {
  (void)decode_float(float_bytes);
  (void)decode_binarized(bin_bytes);
  return {float_bytes.size(), bin_bytes.size(),
          static_cast<double>(float_bytes.size()) / static_cast<double>(bin_bytes.size())};
}

inline CompressionReport compression_report(const fs::path& float_path, const fs::path& bin_path) {
  return compression_report(detail::read_model_bytes(float_path), detail::read_model_bytes(bin_path));
}

/// Byte accounting of the binarized payload, independent of any file.
struct BinarizedLayout {
  std::uint64_t weights = 0;      // one bit each
  std::uint64_t sign_bytes = 0;   // after per-kernel byte padding
  std::uint64_t padding_bits = 0;
  std::uint64_t kernels = 0;      // one f32 alpha each
  std::uint64_t biases = 0;       // one f32 each
};

inline BinarizedLayout binarized_layout(const NetworkSpec& spec) {
  BinarizedLayout l;
  for (const auto& r : spec.resolve()) {
    if (!r.spec.has_params()) continue;
    const std::uint64_t n = r.in_channels * r.kernel_h * r.kernel_w;
    const std::uint64_t f = r.out.c;
    l.weights += f * n;
    l.sign_bytes += f * packed_bytes(n);
    l.padding_bits += f * (packed_bytes(n) * 8 - n);
    l.kernels += f;
    l.biases += f;
  }
  return l;
}

}  // namespace bcnn
