#pragma once

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ssfp/error.hpp"
#include "ssfp/nn.hpp"

namespace ssfp {

/// Fixed-width bit set over neuron indices.
class NeuronSet {
 public:
  NeuronSet() = default;
  explicit NeuronSet(std::size_t width) : width_(width), words_((width + 63) / 64, 0) {}

  std::size_t width() const noexcept { return width_; }

  void set(std::size_t i) { words_.at(i / 64) |= std::uint64_t{1} << (i % 64); }
  bool test(std::size_t i) const { return (words_.at(i / 64) >> (i % 64)) & 1U; }

  std::size_t count() const noexcept {
    std::size_t n = 0;
    for (auto w : words_) n += static_cast<std::size_t>(std::popcount(w));
    return n;
  }

  /// |other \ this|
  std::size_t count_new(const NeuronSet& other) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < words_.size(); ++i) n += static_cast<std::size_t>(std::popcount(other.words_[i] & ~words_[i]));
    return n;
  }

  NeuronSet& operator|=(const NeuronSet& other) {
    for (std::size_t i = 0; i < words_.size(); ++i) words_[i] |= other.words_[i];
    return *this;
  }

  std::vector<std::size_t> indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < width_; ++i)
      if (test(i)) out.push_back(i);
    return out;
  }

  static NeuronSet of(std::size_t width, std::initializer_list<std::size_t> bits) {
    NeuronSet s(width);
    for (auto b : bits) s.set(b);
    return s;
  }

  friend bool operator==(const NeuronSet&, const NeuronSet&) = default;

 private:
  std::size_t width_ = 0;
  std::vector<std::uint64_t> words_;
};

struct ActivationPattern {
  std::size_t sample_index = 0;
  NeuronSet active;
};

struct CoverResult {
  std::vector<std::size_t> selected;
  NeuronSet anc;
  double coverage_fraction = 0.0;
  /// Newly covered neurons contributed by each pick.
  std::vector<std::size_t> gains;
};

/// Inactivity threshold: ReLU units are off at (near) zero, sigmoid units
/// only when close to zero.
inline double default_tau(Activation a) { return a == Activation::Sigmoid ? 0.05 : 1e-6; }

inline double default_tau(const Model& model) {
  const std::size_t fin = model.final_index();
  for (std::size_t i = fin; i-- > 0;) {
    if (!std::holds_alternative<Flatten>(model.layers()[i].op)) return default_tau(model.layers()[i].activation);
  }
  return default_tau(Activation::Identity);
}

/// Neurons of layer `layer` (default: the last hidden activation) whose
/// post-activation value exceeds tau.
inline ActivationPattern activation_pattern(const Model& model, const Tensor& x, double tau,
                                            std::size_t sample_index = 0,
                                            std::optional<std::size_t> layer = std::nullopt) {
  if (!(tau >= 0.0)) throw InvalidInput("activation_pattern: tau must be >= 0");
  detail::check_input(model, x);
  const std::size_t end = layer ? *layer + 1 : model.final_index();
  if (end > model.final_index()) throw InvalidInput("activation_pattern: layer must precede the final layer");
  const auto tr = detail::run<float>(model, x.span(), end);
  const auto& a = tr.acts.back();
  ActivationPattern p{sample_index, NeuronSet(a.size())};
  for (std::size_t i = 0; i < a.size(); ++i)
    if (static_cast<double>(a[i]) > tau) p.active.set(i);
  return p;
}

/// Greedy maximum coverage: each step takes the pattern adding the most
/// uncovered neurons, ties going to the lowest sample_index.
inline CoverResult manc_select(std::span<const ActivationPattern> patterns, std::size_t k) {
  if (k < 1 || k > patterns.size())
    throw InvalidInput("manc_select: k=" + std::to_string(k) + " outside [1, " + std::to_string(patterns.size()) + "]");
  const std::size_t width = patterns.front().active.width();
  for (const auto& p : patterns)
    if (p.active.width() != width) throw InvalidInput("manc_select: patterns disagree on neuron count");

  CoverResult r;
  r.anc = NeuronSet(width);
  std::vector<bool> taken(patterns.size(), false);
  for (std::size_t step = 0; step < k; ++step) {
    std::size_t best = patterns.size();
    std::size_t best_gain = 0;
    for (std::size_t j = 0; j < patterns.size(); ++j) {
      if (taken[j]) continue;
      const std::size_t gain = r.anc.count_new(patterns[j].active);
      if (best == patterns.size() || gain > best_gain ||
          (gain == best_gain && patterns[j].sample_index < patterns[best].sample_index)) {
        best = j;
        best_gain = gain;
      }
    }
    taken[best] = true;
    r.anc |= patterns[best].active;
    r.selected.push_back(patterns[best].sample_index);
    r.gains.push_back(best_gain);
  }
  r.coverage_fraction = width ? static_cast<double>(r.anc.count()) / static_cast<double>(width) : 0.0;
  return r;
}

inline double coverage_report(const CoverResult& result, std::size_t total_neurons) {
  if (total_neurons == 0) throw InvalidInput("coverage_report: total_neurons must be positive");
  return static_cast<double>(result.anc.count()) / static_cast<double>(total_neurons);
}

}  // namespace ssfp
