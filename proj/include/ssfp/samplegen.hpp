#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <thread>
#include <vector>

#include "ssfp/error.hpp"
#include "ssfp/nn.hpp"
#include "ssfp/rng.hpp"
#include "ssfp/sensitivity.hpp"

namespace ssfp {

/// Projected Adam ascent settings. Box and similarity bound define the
/// feasible set: v in [box_low, box_high]^m and ||v - v0|| / ||v0|| <= epsilon.
struct GenConfig {
  double lr = 1e-3;
  int itr_max = 1000;
  double epsilon = 0.1;
  float box_low = 0.0f;
  float box_high = 1.0f;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(box_low < box_high)) throw InvalidInput("GenConfig: box_low must be < box_high");
    if (!(lr > 0.0)) throw InvalidInput("GenConfig: lr must be positive");
    if (itr_max < 0) throw InvalidInput("GenConfig: itr_max must be >= 0");
    if (!(epsilon >= 0.0)) throw InvalidInput("GenConfig: epsilon must be >= 0");
  }
};

struct SensitiveSample {
  Tensor v;
  Tensor v0;
  double s_final = 0.0;
  double s_origin = 0.0;
  /// ||v - v0|| / ||v0||, a noise-to-signal ratio despite the customary name.
  double snr_ratio = 0.0;
  int iterations_used = 0;
  std::vector<float> expected_probs;
  std::size_t origin_index = 0;
};

/// 20 log10(1 / ratio); +inf for an untouched sample.
inline double snr_db(double snr_ratio) {
  return snr_ratio > 0.0 ? 20.0 * std::log10(1.0 / snr_ratio) : std::numeric_limits<double>::infinity();
}

namespace detail {

inline double relative_change(std::span<const float> v, std::span<const float> v0, double norm_v0) {
  const double d = l2_distance(v, v0);
  if (norm_v0 > 0.0) return d / norm_v0;
  return d > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
}

}  // namespace detail

/// Generates one Sensitive-Sample from origin v0.
///
/// Each iteration takes an Adam ascent step on S, clamps to the box, and stops
/// as soon as the step would leave the similarity ball. The returned iterate is
/// the feasible one with the highest S seen (v0 itself included).
inline SensitiveSample generate(const Model& model, const ParamSelector& sel, const Tensor& v0,
                                const GenConfig& cfg) {
  cfg.validate();
  detail::check_input(model, v0);
  for (float e : v0.data)
    if (e < cfg.box_low || e > cfg.box_high) throw InvalidInput("generate: origin lies outside the box");

  const double norm_v0 = l2_norm(v0.span());
  const std::size_t m = v0.size();
  std::vector<double> m1(m, 0.0), m2(m, 0.0);
  Tensor v = v0;
  Tensor best = v0;

  SensitivityValue cur = sensitivity(model, v, sel);
  SensitiveSample out;
  out.s_origin = cur.s;
  double best_s = cur.s;
  double best_ratio = 0.0;
  double b1t = 1.0, b2t = 1.0;

  int it = 0;
  for (; it < cfg.itr_max; ++it) {
    b1t *= cfg.adam_beta1;
    b2t *= cfg.adam_beta2;
    Tensor next = v;
    for (std::size_t i = 0; i < m; ++i) {
      const double g = cur.grad_x[i];
      m1[i] = cfg.adam_beta1 * m1[i] + (1.0 - cfg.adam_beta1) * g;
      m2[i] = cfg.adam_beta2 * m2[i] + (1.0 - cfg.adam_beta2) * g * g;
      const double mhat = m1[i] / (1.0 - b1t);
      const double vhat = m2[i] / (1.0 - b2t);
      const double stepped = static_cast<double>(v[i]) + cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
      next[i] = std::clamp(static_cast<float>(stepped), cfg.box_low, cfg.box_high);
    }
    const double ratio = detail::relative_change(next.span(), v0.span(), norm_v0);
    if (ratio > cfg.epsilon) break;
    v = std::move(next);
    cur = sensitivity(model, v, sel);
    if (cur.s > best_s) {
      best_s = cur.s;
      best = v;
      best_ratio = ratio;
    }
  }

  out.v = std::move(best);
  out.v0 = v0;
  out.s_final = best_s;
  out.snr_ratio = best_ratio;
  out.iterations_used = it;
  out.expected_probs = predict_probs(model, out.v);
  return out;
}

/// Draws n origins from the pool without replacement (reshuffling and
/// wrapping when n exceeds the pool) and generates one sample per origin.
/// Work may be spread over `threads` workers; output order is origin order.
inline std::vector<SensitiveSample> generate_bag(const Model& model, const ParamSelector& sel,
                                                 std::span<const Tensor> pool, std::size_t n, const GenConfig& cfg,
                                                 unsigned threads = 0) {
  if (pool.empty()) throw InvalidInput("generate_bag: empty origin pool");
  if (n == 0) throw InvalidInput("generate_bag: n must be >= 1");
  cfg.validate();

  std::vector<std::size_t> origins;
  for (std::uint64_t round = 0; origins.size() < n; ++round) {
    Rng rng(mix_seed(cfg.seed, round));
    for (std::size_t idx : rng.permutation(pool.size())) {
      if (origins.size() == n) break;
      origins.push_back(idx);
    }
  }

  std::vector<SensitiveSample> bag(n);
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < n; i += stride) {
      bag[i] = generate(model, sel, pool[origins[i]], cfg);
      bag[i].origin_index = origins[i];
    }
  };
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  if (threads <= 1) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool_threads;
    for (unsigned t = 0; t < threads; ++t) pool_threads.emplace_back(work, t, threads);
  }
  return bag;
}

/// Gaussian pixel noise, clamped to the box.
inline Tensor baseline_noise(const Tensor& v0, double sigma, std::uint64_t seed, float box_low = 0.0f,
                             float box_high = 1.0f) {
  if (!(sigma >= 0.0)) throw InvalidInput("baseline_noise: sigma must be >= 0");
  if (sigma == 0.0) return v0;
  Rng rng(seed);
  Tensor out = v0;
  for (auto& e : out.data)
    e = std::clamp(static_cast<float>(static_cast<double>(e) + sigma * rng.normal()), box_low, box_high);
  return out;
}

namespace detail {

struct ImageDims {
  std::size_t channels, height, width;
};

inline ImageDims image_dims(const Tensor& t, const char* who) {
  if (t.shape.size() == 2) return {1, t.shape[0], t.shape[1]};
  if (t.shape.size() == 3) return {t.shape[0], t.shape[1], t.shape[2]};
  throw InvalidInput(std::string(who) + ": expected an HxW or CxHxW image, got " + shape_string(t.shape));
}

}  // namespace detail

/// Nearest-neighbour rotation about the image centre. Positive angles turn
/// the picture clockwise as displayed (row 0 at the top). Pixels whose source
/// falls outside the frame take `fill`.
inline Tensor baseline_rotate(const Tensor& v0, double degrees, float fill = 0.0f) {
  const auto dims = detail::image_dims(v0, "baseline_rotate");
  const double theta = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double cy = (static_cast<double>(dims.height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(dims.width) - 1.0) / 2.0;
  Tensor out = v0;
  for (std::size_t y = 0; y < dims.height; ++y) {
    for (std::size_t x = 0; x < dims.width; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      const long sx = std::lround(c * dx + s * dy + cx);
      const long sy = std::lround(-s * dx + c * dy + cy);
      const bool inside = sx >= 0 && sy >= 0 && sx < static_cast<long>(dims.width) &&
                          sy < static_cast<long>(dims.height);
      for (std::size_t ch = 0; ch < dims.channels; ++ch) {
        const std::size_t plane = ch * dims.height * dims.width;
        out[plane + y * dims.width + x] =
            inside ? v0[plane + static_cast<std::size_t>(sy) * dims.width + static_cast<std::size_t>(sx)] : fill;
      }
    }
  }
  return out;
}

/// Sinusoidal horizontal shear with wraparound: row y moves right by
/// round(amplitude * sin(2 pi (y + phase) / period)), phase = seed mod floor(period).
inline Tensor baseline_distort(const Tensor& v0, double amplitude, double period, std::uint64_t seed = 0) {
  if (!(amplitude >= 0.0)) throw InvalidInput("baseline_distort: amplitude must be >= 0");
  if (!(period > 0.0)) throw InvalidInput("baseline_distort: period must be > 0");
  const auto dims = detail::image_dims(v0, "baseline_distort");
  const auto phase_mod = static_cast<std::uint64_t>(std::max(1.0, std::floor(period)));
  const double phase = static_cast<double>(seed % phase_mod);
  const auto W = static_cast<long>(dims.width);
  Tensor out = v0;
  for (std::size_t y = 0; y < dims.height; ++y) {
    const long shift =
        std::lround(amplitude * std::sin(2.0 * std::numbers::pi * (static_cast<double>(y) + phase) / period));
    for (std::size_t ch = 0; ch < dims.channels; ++ch) {
      const std::size_t row = ch * dims.height * dims.width + y * dims.width;
      for (long x = 0; x < W; ++x) {
        const long src = ((x - shift) % W + W) % W;
        out[row + static_cast<std::size_t>(x)] = v0[row + static_cast<std::size_t>(src)];
      }
    }
  }
  return out;
}

}  // namespace ssfp
