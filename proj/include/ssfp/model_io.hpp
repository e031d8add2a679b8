#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ssfp/error.hpp"
#include "ssfp/nn.hpp"

namespace ssfp {

struct ModelDigest {
  std::uint64_t value = 0;

  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
  }

  static ModelDigest from_hex(std::string_view s) {
    ModelDigest d;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), d.value, 16);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.size() != 16)
      throw ParseError("bad digest '" + std::string(s) + "'", 0);
    return d;
  }

  friend bool operator==(const ModelDigest&, const ModelDigest&) = default;
};

inline constexpr std::uint64_t kFnvOffsetBasis = 14695981039346656037ULL;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = kFnvOffsetBasis) noexcept {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

namespace detail {

inline void put_f32_le(std::string& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int s = 0; s < 32; s += 8) out.push_back(static_cast<char>((bits >> s) & 0xFF));
}

inline float get_f32_le(std::string_view in, std::size_t pos) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + b])) << (8 * b);
  return std::bit_cast<float>(bits);
}

/// Line-oriented reader over a byte buffer that remembers offsets for errors.
class LineReader {
 public:
  explicit LineReader(std::string_view buf) : buf_(buf) {}

  std::size_t offset() const noexcept { return pos_; }
  bool at_end() const noexcept { return pos_ >= buf_.size(); }

  std::string_view line() {
    const std::size_t nl = buf_.find('\n', pos_);
    if (nl == std::string_view::npos) throw ParseError("unexpected end of file", buf_.size());
    std::string_view l = buf_.substr(pos_, nl - pos_);
    pos_ = nl + 1;
    return l;
  }

  std::string_view bytes(std::size_t n) {
    if (buf_.size() - pos_ < n)
      throw ParseError("truncated payload: need " + std::to_string(n) + " bytes", buf_.size());
    std::string_view b = buf_.substr(pos_, n);
    pos_ += n;
    return b;
  }

 private:
  std::string_view buf_;
  std::size_t pos_ = 0;
};

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && line[i] == ' ') ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

template <class Int>
Int parse_int(std::string_view s, std::size_t offset) {
  Int v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ParseError("expected integer, got '" + std::string(s) + "'", offset);
  return v;
}

inline Activation parse_activation(std::string_view s, std::size_t offset) {
  if (s == "relu") return Activation::ReLU;
  if (s == "sigmoid") return Activation::Sigmoid;
  if (s == "identity") return Activation::Identity;
  throw ParseError("unknown activation '" + std::string(s) + "'", offset);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes to a sibling temp file and renames, so readers never see partial files.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline constexpr int kModelFormatVersion = 1;

/// Text header of the canonical model container.
inline std::string model_header(const Model& model) {
  std::ostringstream h;
  h << "ssfp-model " << kModelFormatVersion << "\n";
  h << "input_shape";
  for (auto d : model.input_shape()) h << ' ' << d;
  h << "\nnum_classes " << model.num_classes() << "\n";
  h << "layers " << model.layers().size() << "\n";
  std::size_t payload = 0;
  for (const auto& layer : model.layers()) {
    if (const auto* d = std::get_if<Dense>(&layer.op)) {
      h << "dense " << d->out << ' ' << d->in << ' ' << activation_name(layer.activation) << "\n";
    } else if (const auto* c = std::get_if<Conv2D>(&layer.op)) {
      h << "conv2d " << c->out_channels << ' ' << c->in_channels << ' ' << c->kernel_h << ' ' << c->kernel_w << ' '
        << activation_name(layer.activation) << "\n";
    } else {
      h << "flatten\n";
    }
  }
  for (auto t : model.parameter_tensors()) payload += t.size() * 4;
  h << "payload " << payload << "\n";
  return h.str();
}

/// Header bytes followed by every parameter as little-endian float32 in
/// declaration order.
inline std::string serialize_model(const Model& model) {
  std::string out = model_header(model);
  for (auto t : model.parameter_tensors())
    for (float v : t) detail::put_f32_le(out, v);
  return out;
}

/// FNV-1a-64 over the canonical serialization.
inline ModelDigest digest(const Model& model) { return ModelDigest{fnv1a64(serialize_model(model))}; }

inline Model parse_model(std::string_view bytes) {
  detail::LineReader r(bytes);
  auto fields = [&](std::string_view expect_key, std::size_t min_count) {
    const std::size_t at = r.offset();
    auto f = detail::split_ws(r.line());
    if (f.empty() || f[0] != expect_key || f.size() < min_count)
      throw ParseError("expected '" + std::string(expect_key) + "' record", at);
    return std::pair{f, at};
  };

  {
    auto [f, at] = fields("ssfp-model", 2);
    const int version = detail::parse_int<int>(f[1], at);
    if (version != kModelFormatVersion)
      throw ParseError("unsupported model format version " + std::to_string(version) + " (expected " +
                           std::to_string(kModelFormatVersion) + ")",
                       at);
  }
  Shape input_shape;
  {
    auto [f, at] = fields("input_shape", 2);
    for (std::size_t i = 1; i < f.size(); ++i) input_shape.push_back(detail::parse_int<std::size_t>(f[i], at));
  }
  std::size_t num_classes = 0;
  {
    auto [f, at] = fields("num_classes", 2);
    num_classes = detail::parse_int<std::size_t>(f[1], at);
  }
  std::size_t layer_count = 0;
  {
    auto [f, at] = fields("layers", 2);
    layer_count = detail::parse_int<std::size_t>(f[1], at);
  }
  std::vector<Layer> layers;
  for (std::size_t i = 0; i < layer_count; ++i) {
    const std::size_t at = r.offset();
    auto f = detail::split_ws(r.line());
    if (f.empty()) throw ParseError("empty layer record", at);
    if (f[0] == "dense" && f.size() == 4) {
      layers.push_back(dense_layer(detail::parse_int<std::size_t>(f[2], at), detail::parse_int<std::size_t>(f[1], at),
                                   detail::parse_activation(f[3], at)));
    } else if (f[0] == "conv2d" && f.size() == 6) {
      layers.push_back(conv2d_layer(detail::parse_int<std::size_t>(f[2], at), detail::parse_int<std::size_t>(f[1], at),
                                    detail::parse_int<std::size_t>(f[3], at), detail::parse_int<std::size_t>(f[4], at),
                                    detail::parse_activation(f[5], at)));
    } else if (f[0] == "flatten" && f.size() == 1) {
      layers.push_back(flatten_layer());
    } else {
      throw ParseError("bad layer record '" + std::string(f[0]) + "'", at);
    }
  }
  std::size_t payload = 0;
  {
    auto [f, at] = fields("payload", 2);
    payload = detail::parse_int<std::size_t>(f[1], at);
  }
  const std::size_t header_end = r.offset();
  Model model = [&] {
    try {
      return Model(input_shape, std::move(layers), num_classes);
    } catch (const InvalidInput& e) {
      throw ParseError(std::string("inconsistent model header: ") + e.what(), header_end);
    }
  }();
  std::size_t expected = 0;
  for (auto t : model.parameter_tensors()) expected += t.size() * 4;
  if (payload != expected)
    throw ParseError("payload size " + std::to_string(payload) + " does not match layers (" +
                         std::to_string(expected) + ")",
                     header_end);
  const auto data = r.bytes(payload);
  if (!r.at_end()) throw ParseError("trailing bytes after payload", r.offset());
  std::size_t pos = 0;
  for (auto t : model.parameter_tensors()) {
    for (auto& v : t) {
      v = detail::get_f32_le(data, pos);
      if (!std::isfinite(v)) throw ParseError("non-finite parameter", header_end + pos);
      pos += 4;
    }
  }
  return model;
}

inline void save_model(const Model& model, const std::filesystem::path& path) {
  detail::write_file_atomic(path, serialize_model(model));
}

inline Model load_model(const std::filesystem::path& path) { return parse_model(detail::read_file(path)); }

}  // namespace ssfp
