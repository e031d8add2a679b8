#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ssfp/error.hpp"
#include "ssfp/model_io.hpp"
#include "ssfp/rng.hpp"
#include "ssfp/tensor.hpp"

namespace ssfp {

/// Gaussian clusters. The numel(dims) coordinates are split into `classes`
/// contiguous blocks; class c has mean 0.8 on block c and 0.2 elsewhere (the
/// vertices of a scaled simplex). Samples are interleaved by class and
/// clamped to [0, 1].
inline LabeledSet synth_blobs(int classes, int per_class, const Shape& dims, double spread, std::uint64_t seed) {
  if (classes < 2) throw InvalidInput("synth_blobs: classes must be >= 2");
  if (per_class < 1) throw InvalidInput("synth_blobs: per_class must be >= 1");
  if (!(spread >= 0.0)) throw InvalidInput("synth_blobs: spread must be >= 0");
  const std::size_t m = numel(dims);
  if (m < static_cast<std::size_t>(classes)) throw InvalidInput("synth_blobs: need at least one coordinate per class");

  auto block_of = [&](std::size_t i) { return static_cast<int>(i * static_cast<std::size_t>(classes) / m); };
  Rng rng(seed);
  LabeledSet set;
  set.class_count = classes;
  for (int n = 0; n < per_class; ++n) {
    for (int c = 0; c < classes; ++c) {
      Tensor x(dims);
      for (std::size_t i = 0; i < m; ++i) {
        const double mean = block_of(i) == c ? 0.8 : 0.2;
        x[i] = static_cast<float>(std::clamp(mean + spread * rng.normal(), 0.0, 1.0));
      }
      set.inputs.push_back(std::move(x));
      set.labels.push_back(c);
    }
  }
  return set;
}

/// Synthetic glyph images of shape {1, side, side}: every class owns a
/// template of three random strokes; samples jitter the template by up to
/// one pixel, scale its ink, add Gaussian pixel noise and clamp to [0, 1].
inline LabeledSet synth_glyphs(int classes, int per_class, std::size_t side, double noise, std::uint64_t seed) {
  if (classes < 2) throw InvalidInput("synth_glyphs: classes must be >= 2");
  if (per_class < 1) throw InvalidInput("synth_glyphs: per_class must be >= 1");
  if (side < 6) throw InvalidInput("synth_glyphs: side must be >= 6");
  if (!(noise >= 0.0)) throw InvalidInput("synth_glyphs: noise must be >= 0");

  const long S = static_cast<long>(side);
  std::vector<std::vector<float>> templates;
  Rng trng(mix_seed(seed, 0));
  for (int c = 0; c < classes; ++c) {
    std::vector<float> t(side * side, 0.0f);
    for (int stroke = 0; stroke < 3; ++stroke) {
      static constexpr int dirs[8][2] = {{0, 1}, {1, 0}, {1, 1}, {1, -1}, {0, -1}, {-1, 0}, {-1, -1}, {-1, 1}};
      long y = 1 + static_cast<long>(trng.below(side - 2));
      long x = 1 + static_cast<long>(trng.below(side - 2));
      const auto& d = dirs[trng.below(8)];
      const long len = 3 + static_cast<long>(trng.below(side - 4));
      for (long s = 0; s < len; ++s) {
        if (y < 1 || x < 1 || y >= S - 1 || x >= S - 1) break;
        t[static_cast<std::size_t>(y * S + x)] = 1.0f;
        y += d[0];
        x += d[1];
      }
    }
    templates.push_back(std::move(t));
  }

  Rng rng(mix_seed(seed, 1));
  LabeledSet set;
  set.class_count = classes;
  for (int n = 0; n < per_class; ++n) {
    for (int c = 0; c < classes; ++c) {
      const long dy = static_cast<long>(rng.below(3)) - 1;
      const long dx = static_cast<long>(rng.below(3)) - 1;
      const double ink = rng.uniform(0.7, 1.0);
      Tensor img(Shape{1, side, side});
      for (long y = 0; y < S; ++y) {
        for (long x = 0; x < S; ++x) {
          const long sy = y - dy, sx = x - dx;
          const double base =
              (sy >= 0 && sx >= 0 && sy < S && sx < S) ? templates[c][static_cast<std::size_t>(sy * S + sx)] : 0.0;
          img[static_cast<std::size_t>(y * S + x)] =
              static_cast<float>(std::clamp(ink * base + noise * rng.normal(), 0.0, 1.0));
        }
      }
      set.inputs.push_back(std::move(img));
      set.labels.push_back(c);
    }
  }
  return set;
}

namespace detail {

inline std::uint32_t read_be32(std::string_view buf, std::size_t pos, const char* what) {
  if (buf.size() < pos + 4) throw ParseError(std::string(what) + ": file too short for header", buf.size());
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(buf[pos + i]);
  return v;
}

}  // namespace detail

/// Parses an IDX image/label pair (magic 0x00000803 / 0x00000801, big-endian
/// dimensions). Pixels become {1, rows, cols} tensors scaled by 1/255.
inline LabeledSet parse_idx(std::string_view images, std::string_view labels) {
  if (detail::read_be32(images, 0, "images") != 0x00000803)
    throw ParseError("images: bad magic (expected 0x00000803)", 0);
  if (detail::read_be32(labels, 0, "labels") != 0x00000801)
    throw ParseError("labels: bad magic (expected 0x00000801)", 0);
  const std::uint32_t n = detail::read_be32(images, 4, "images");
  const std::uint32_t rows = detail::read_be32(images, 8, "images");
  const std::uint32_t cols = detail::read_be32(images, 12, "images");
  const std::uint32_t nl = detail::read_be32(labels, 4, "labels");
  if (n != nl) throw ParseError("image count " + std::to_string(n) + " != label count " + std::to_string(nl), 4);
  if (n == 0 || rows == 0 || cols == 0) throw ParseError("images: empty dimensions", 4);
  const std::size_t pix = static_cast<std::size_t>(rows) * cols;
  if (images.size() != 16 + static_cast<std::size_t>(n) * pix)
    throw ParseError("images: payload length does not match header", std::min(images.size(), 16 + n * pix));
  if (labels.size() != 8 + static_cast<std::size_t>(n))
    throw ParseError("labels: payload length does not match header", std::min(labels.size(), 8 + std::size_t{n}));

  LabeledSet set;
  int max_label = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    Tensor img(Shape{1, rows, cols});
    for (std::size_t p = 0; p < pix; ++p)
      img[p] = static_cast<float>(static_cast<unsigned char>(images[16 + i * pix + p]) / 255.0);
    set.inputs.push_back(std::move(img));
    const int label = static_cast<unsigned char>(labels[8 + i]);
    max_label = std::max(max_label, label);
    set.labels.push_back(label);
  }
  set.class_count = max_label + 1;
  return set;
}

inline LabeledSet load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  return parse_idx(detail::read_file(images_path), detail::read_file(labels_path));
}

/// Stratified, deterministic split. Each class keeps at least one sample on
/// each side; both halves preserve the input order.
inline std::pair<LabeledSet, LabeledSet> split(const LabeledSet& set, double held_out_fraction, std::uint64_t seed) {
  if (!(held_out_fraction > 0.0 && held_out_fraction < 1.0))
    throw InvalidInput("split: fraction must be in (0, 1)");
  set.validate();
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(set.class_count));
  for (std::size_t i = 0; i < set.size(); ++i) by_class[static_cast<std::size_t>(set.labels[i])].push_back(i);

  std::vector<bool> held(set.size(), false);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.empty()) continue;
    if (idx.size() < 2) throw InvalidInput("split: class " + std::to_string(c) + " has fewer than 2 samples");
    Rng rng(mix_seed(seed, c));
    rng.shuffle(std::span<std::size_t>(idx));
    const auto want = static_cast<std::size_t>(std::llround(held_out_fraction * static_cast<double>(idx.size())));
    const std::size_t k = std::clamp<std::size_t>(want, 1, idx.size() - 1);
    for (std::size_t j = 0; j < k; ++j) held[idx[j]] = true;
  }

  std::pair<LabeledSet, LabeledSet> out;
  out.first.class_count = out.second.class_count = set.class_count;
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto& dst = held[i] ? out.second : out.first;
    dst.inputs.push_back(set.inputs[i]);
    dst.labels.push_back(set.labels[i]);
  }
  return out;
}

}  // namespace ssfp
