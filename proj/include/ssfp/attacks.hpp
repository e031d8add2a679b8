#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ssfp/data.hpp"
#include "ssfp/error.hpp"
#include "ssfp/model_io.hpp"
#include "ssfp/nn.hpp"
#include "ssfp/rng.hpp"

namespace ssfp {

struct AttackMetrics {
  std::size_t params_changed = 0;
  double accuracy_before = 0.0;
  double accuracy_after = 0.0;
  /// Trojan: triggered inputs classified as the target. Poison (specific):
  /// source-class inputs classified as the target.
  std::optional<double> attack_success_rate;
  /// Poison: source-class inputs not classified as the source class.
  std::optional<double> source_error_rate;
  /// Poison: accuracy on every class except the source, before and after.
  std::optional<double> other_accuracy_before;
  std::optional<double> other_accuracy_after;
};

struct AttackOutcome {
  Model tampered;
  AttackMetrics metrics;
};

inline std::size_t count_changed(const Model& a, const Model& b) {
  const auto pa = a.parameter_tensors();
  const auto pb = b.parameter_tensors();
  std::size_t n = 0;
  for (std::size_t t = 0; t < pa.size(); ++t)
    for (std::size_t i = 0; i < pa[t].size(); ++i)
      if (std::bit_cast<std::uint32_t>(pa[t][i]) != std::bit_cast<std::uint32_t>(pb[t][i])) ++n;
  return n;
}

/// Every scalar parameter is picked independently with probability r and
/// receives N(0, sigma^2) noise.
inline AttackOutcome weight_noise(const Model& model, double r, double sigma, std::uint64_t seed) {
  if (!(r >= 0.0 && r <= 1.0)) throw InvalidInput("weight_noise: r must be in [0, 1]");
  if (!(sigma >= 0.0)) throw InvalidInput("weight_noise: sigma must be >= 0");
  Model out = model;
  Rng rng(seed);
  for (auto t : out.parameter_tensors()) {
    for (auto& w : t) {
      if (rng.bernoulli(r)) w = static_cast<float>(static_cast<double>(w) + sigma * rng.normal());
    }
  }
  AttackOutcome o{std::move(out), {}};
  o.metrics.params_changed = count_changed(model, o.tampered);
  return o;
}

/// Symmetric per-tensor fake quantization: s = max|w| / (2^(bits-1) - 1),
/// w -> round(w / s) * s, computed in double and rounded to float once.
/// Idempotent; all-zero tensors are left alone.
inline AttackOutcome quantize(const Model& model, int bits) {
  if (bits < 2 || bits > 16) throw InvalidInput("quantize: bits must be in [2, 16]");
  Model out = model;
  const double levels = std::ldexp(1.0, bits - 1) - 1.0;
  for (auto t : out.parameter_tensors()) {
    double max_abs = 0.0;
    for (float w : t) max_abs = std::max(max_abs, std::fabs(static_cast<double>(w)));
    if (max_abs == 0.0) continue;
    const double scale = max_abs / levels;
    for (auto& w : t) w = static_cast<float>(std::round(static_cast<double>(w) / scale) * scale);
  }
  AttackOutcome o{std::move(out), {}};
  o.metrics.params_changed = count_changed(model, o.tampered);
  return o;
}

/// Square constant patch with its top-left corner at (row, col).
struct TriggerPatch {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t size = 3;
  float value = 1.0f;
};

inline Tensor stamp_trigger(const Tensor& x, const TriggerPatch& patch) {
  std::size_t C = 1, H = 0, W = 0;
  if (x.shape.size() == 2) {
    H = x.shape[0];
    W = x.shape[1];
  } else if (x.shape.size() == 3) {
    C = x.shape[0];
    H = x.shape[1];
    W = x.shape[2];
  } else {
    throw InvalidInput("trigger needs an image input, got " + shape_string(x.shape));
  }
  if (patch.size == 0 || patch.row + patch.size > H || patch.col + patch.size > W)
    throw InvalidInput("trigger patch does not fit inside " + shape_string(x.shape));
  Tensor out = x;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = patch.row; y < patch.row + patch.size; ++y)
      for (std::size_t xx = patch.col; xx < patch.col + patch.size; ++xx) out[(c * H + y) * W + xx] = patch.value;
  return out;
}

struct TrojanConfig {
  TriggerPatch trigger;
  int target_class = 0;
  double poison_fraction = 0.1;
  int epochs = 20;
  double lr = 0.05;
  std::uint64_t seed = 0;
};

inline double trigger_success_rate(const Model& model, const LabeledSet& eval, const TriggerPatch& trigger,
                                   int target) {
  if (eval.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& x : eval.inputs)
    if (predict_label(model, stamp_trigger(x, trigger)) == target) ++hits;
  return static_cast<double>(hits) / static_cast<double>(eval.size());
}

/// BadNets-style backdoor: a random poison_fraction of the training inputs
/// is copied, stamped with the trigger and relabelled target_class; the model
/// is fine-tuned on the union. Metrics use `eval`.
inline AttackOutcome trojan(const Model& model, const LabeledSet& train, const LabeledSet& eval,
                            const TrojanConfig& cfg) {
  if (train.empty()) throw InvalidInput("trojan: empty training set");
  if (cfg.target_class < 0 || static_cast<std::size_t>(cfg.target_class) >= model.num_classes())
    throw InvalidInput("trojan: target class out of range");
  if (!(cfg.poison_fraction > 0.0 && cfg.poison_fraction <= 1.0))
    throw InvalidInput("trojan: poison_fraction must be in (0, 1]");
  stamp_trigger(train.inputs.front(), cfg.trigger);  // bounds check

  LabeledSet augmented = train;
  Rng rng(cfg.seed);
  const auto order = rng.permutation(train.size());
  const auto count = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(cfg.poison_fraction * static_cast<double>(train.size()))));
  for (std::size_t i = 0; i < count; ++i) {
    augmented.inputs.push_back(stamp_trigger(train.inputs[order[i]], cfg.trigger));
    augmented.labels.push_back(cfg.target_class);
  }
  augmented.class_count = std::max(augmented.class_count, cfg.target_class + 1);

  AttackOutcome o{fine_tune(model, augmented, cfg.epochs, cfg.lr, mix_seed(cfg.seed, 1)), {}};
  o.metrics.params_changed = count_changed(model, o.tampered);
  o.metrics.accuracy_before = accuracy(model, eval);
  o.metrics.accuracy_after = accuracy(o.tampered, eval);
  o.metrics.attack_success_rate = trigger_success_rate(o.tampered, eval, cfg.trigger, cfg.target_class);
  return o;
}

struct PoisonConfig {
  int source_class = 0;
  /// Error-specific when set; error-generic (random wrong labels) otherwise.
  std::optional<int> target_class;
  double poison_fraction = 1.0;
  int epochs = 20;
  double lr = 0.05;
  std::uint64_t seed = 0;
};

/// Targeted poisoning: a poison_fraction of the source-class training
/// samples is relabelled (to target_class, or to a uniformly random other
/// class) and the model is fine-tuned on the altered set.
inline AttackOutcome poison(const Model& model, const LabeledSet& train, const LabeledSet& eval,
                            const PoisonConfig& cfg) {
  const int classes = static_cast<int>(model.num_classes());
  if (cfg.source_class < 0 || cfg.source_class >= classes) throw InvalidInput("poison: unknown source class");
  if (cfg.target_class && (*cfg.target_class < 0 || *cfg.target_class >= classes || *cfg.target_class == cfg.source_class))
    throw InvalidInput("poison: invalid target class");
  if (!(cfg.poison_fraction > 0.0 && cfg.poison_fraction <= 1.0))
    throw InvalidInput("poison: poison_fraction must be in (0, 1]");
  std::vector<std::size_t> source_idx;
  for (std::size_t i = 0; i < train.size(); ++i)
    if (train.labels[i] == cfg.source_class) source_idx.push_back(i);
  if (source_idx.empty()) throw InvalidInput("poison: source class absent from the dataset");

  LabeledSet altered = train;
  Rng rng(cfg.seed);
  rng.shuffle(std::span<std::size_t>(source_idx));
  const auto count = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(cfg.poison_fraction * static_cast<double>(source_idx.size()))));
  for (std::size_t i = 0; i < count; ++i) {
    int label;
    if (cfg.target_class) {
      label = *cfg.target_class;
    } else {
      label = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes - 1)));
      if (label >= cfg.source_class) ++label;
    }
    altered.labels[source_idx[i]] = label;
  }

  AttackOutcome o{fine_tune(model, altered, cfg.epochs, cfg.lr, mix_seed(cfg.seed, 1)), {}};
  o.metrics.params_changed = count_changed(model, o.tampered);
  o.metrics.accuracy_before = accuracy(model, eval);
  o.metrics.accuracy_after = accuracy(o.tampered, eval);

  std::size_t src_total = 0, src_wrong = 0, src_target = 0, other_total = 0, other_before = 0, other_after = 0;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    const int after = predict_label(o.tampered, eval.inputs[i]);
    if (eval.labels[i] == cfg.source_class) {
      ++src_total;
      if (after != cfg.source_class) ++src_wrong;
      if (cfg.target_class && after == *cfg.target_class) ++src_target;
    } else {
      ++other_total;
      if (predict_label(model, eval.inputs[i]) == eval.labels[i]) ++other_before;
      if (after == eval.labels[i]) ++other_after;
    }
  }
  auto frac = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
  o.metrics.source_error_rate = frac(src_wrong, src_total);
  if (cfg.target_class) o.metrics.attack_success_rate = frac(src_target, src_total);
  o.metrics.other_accuracy_before = frac(other_before, other_total);
  o.metrics.other_accuracy_after = frac(other_after, other_total);
  return o;
}

struct WeightNoiseConfig {
  double ratio = 0.01;
  double sigma = 1.0;
  std::uint64_t seed = 0;
};

struct QuantizeConfig {
  int bits = 8;
};

using AttackConfig = std::variant<WeightNoiseConfig, QuantizeConfig, TrojanConfig, PoisonConfig>;

namespace detail {

inline std::map<std::string, std::string> parse_kv_tokens(std::string_view text, std::string& head) {
  std::map<std::string, std::string> kv;
  auto toks = split_ws(text);
  if (toks.empty()) throw InvalidInput("empty attack description");
  head = std::string(toks[0]);
  for (std::size_t i = 1; i < toks.size(); ++i) {
    const auto eq = toks[i].find('=');
    if (eq == std::string_view::npos || eq == 0) throw InvalidInput("expected key=value, got '" + std::string(toks[i]) + "'");
    kv[std::string(toks[i].substr(0, eq))] = std::string(toks[i].substr(eq + 1));
  }
  return kv;
}

}  // namespace detail

/// Parses "noise r=0.01 sigma=1 seed=7", "quantize bits=8",
/// "trojan target=0 row=0 col=0 size=3 value=1 fraction=0.1 epochs=20 lr=0.05 seed=1",
/// "poison source=0 target=1 fraction=1 epochs=20 lr=0.05 seed=1" (omit target for error-generic).
inline AttackConfig parse_attack(std::string_view text) {
  std::string head;
  auto kv = detail::parse_kv_tokens(text, head);
  auto take = [&](const char* key, auto fallback) {
    using T = decltype(fallback);
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    const std::string v = it->second;
    kv.erase(it);
    try {
      std::size_t used = 0;
      T out;
      if constexpr (std::is_floating_point_v<T>) out = static_cast<T>(std::stod(v, &used));
      else if constexpr (std::is_unsigned_v<T>) out = static_cast<T>(std::stoull(v, &used));
      else out = static_cast<T>(std::stoll(v, &used));
      if (used != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw InvalidInput("attack '" + head + "': bad value for " + key + ": '" + v + "'");
    }
  };
  auto finish = [&](AttackConfig cfg) {
    if (!kv.empty()) throw InvalidInput("attack '" + head + "': unknown key '" + kv.begin()->first + "'");
    return cfg;
  };
  if (head == "noise") {
    WeightNoiseConfig c;
    c.ratio = take("r", c.ratio);
    c.sigma = take("sigma", c.sigma);
    c.seed = take("seed", c.seed);
    return finish(c);
  }
  if (head == "quantize") {
    QuantizeConfig c;
    c.bits = take("bits", c.bits);
    return finish(c);
  }
  if (head == "trojan") {
    TrojanConfig c;
    c.target_class = take("target", c.target_class);
    c.trigger.row = take("row", c.trigger.row);
    c.trigger.col = take("col", c.trigger.col);
    c.trigger.size = take("size", c.trigger.size);
    c.trigger.value = take("value", c.trigger.value);
    c.poison_fraction = take("fraction", c.poison_fraction);
    c.epochs = take("epochs", c.epochs);
    c.lr = take("lr", c.lr);
    c.seed = take("seed", c.seed);
    return finish(c);
  }
  if (head == "poison") {
    PoisonConfig c;
    c.source_class = take("source", c.source_class);
    if (kv.count("target")) c.target_class = take("target", 0);
    c.poison_fraction = take("fraction", c.poison_fraction);
    c.epochs = take("epochs", c.epochs);
    c.lr = take("lr", c.lr);
    c.seed = take("seed", c.seed);
    return finish(c);
  }
  throw InvalidInput("unknown attack '" + head + "'");
}

/// Short stable identifier used in reports, e.g. "noise-r0.01".
inline std::string attack_id(const AttackConfig& cfg) {
  auto num = [](double v) {
    std::ostringstream s;
    s << v;
    return s.str();
  };
  if (const auto* n = std::get_if<WeightNoiseConfig>(&cfg)) return "noise-r" + num(n->ratio);
  if (const auto* q = std::get_if<QuantizeConfig>(&cfg)) return "quantize-" + std::to_string(q->bits);
  if (const auto* t = std::get_if<TrojanConfig>(&cfg)) return "trojan-t" + std::to_string(t->target_class);
  const auto& p = std::get<PoisonConfig>(cfg);
  return p.target_class ? "poison-" + std::to_string(p.source_class) + "to" + std::to_string(*p.target_class)
                        : "poison-" + std::to_string(p.source_class) + "generic";
}

inline AttackOutcome apply_attack(const Model& model, const AttackConfig& cfg, const LabeledSet& train,
                                  const LabeledSet& eval) {
  return std::visit(
      [&](const auto& c) -> AttackOutcome {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, WeightNoiseConfig> || std::is_same_v<T, QuantizeConfig>) {
          AttackOutcome o = [&] {
            if constexpr (std::is_same_v<T, QuantizeConfig>) return quantize(model, c.bits);
            else return weight_noise(model, c.ratio, c.sigma, c.seed);
          }();
          if (!eval.empty()) {
            o.metrics.accuracy_before = accuracy(model, eval);
            o.metrics.accuracy_after = accuracy(o.tampered, eval);
          }
          return o;
        } else if constexpr (std::is_same_v<T, TrojanConfig>) {
          return trojan(model, train, eval, c);
        } else {
          return poison(model, train, eval, c);
        }
      },
      cfg);
}

}  // namespace ssfp
