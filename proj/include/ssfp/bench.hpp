#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ssfp/attacks.hpp"
#include "ssfp/data.hpp"
#include "ssfp/error.hpp"
#include "ssfp/fingerprint.hpp"
#include "ssfp/manc.hpp"
#include "ssfp/model_io.hpp"
#include "ssfp/nn.hpp"
#include "ssfp/rng.hpp"
#include "ssfp/samplegen.hpp"
#include "ssfp/sensitivity.hpp"

namespace ssfp {

inline constexpr std::string_view kToolkitVersion = "ssfp 0.1.0";
inline constexpr std::string_view kManifestFormat = "ssfp-manifest/1";
inline constexpr std::string_view kCurveFormat = "ssfp-curve/1";

enum class Method { Manc, Random, Natural, Noise, Rotate, Distort };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::Manc: return "manc";
    case Method::Random: return "random";
    case Method::Natural: return "natural";
    case Method::Noise: return "noise";
    case Method::Rotate: return "rotate";
    case Method::Distort: return "distort";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : {Method::Manc, Method::Random, Method::Natural, Method::Noise, Method::Rotate, Method::Distort})
    if (s == method_name(m)) return m;
  throw InvalidInput("unknown selection method '" + std::string(s) + "'");
}

/// One model under test: how to obtain it, its data, and the attacks to run.
struct FixtureSpec {
  std::string name;
  std::string arch = "mlp";  // mlp | cnn
  std::uint64_t seed = 0;
  // synthetic glyph data, used unless idx paths are given
  int classes = 10;
  int per_class = 60;
  std::size_t side = 10;
  double pixel_noise = 0.1;
  std::optional<std::filesystem::path> idx_images, idx_labels;
  double held_out = 0.3;
  // architecture and training
  std::size_t hidden = 32;
  std::size_t conv1 = 6;
  std::size_t conv2 = 8;
  int epochs = 30;
  double lr = 0.05;
  std::size_t batch = 16;
  /// Load this model file instead of training.
  std::optional<std::filesystem::path> model_path;
  /// Abort unless the fixture model has this digest.
  std::optional<ModelDigest> expect_digest;
  std::vector<std::string> attacks;
};

struct ExperimentManifest {
  std::uint64_t master_seed = 0;
  std::size_t trials = 1000;
  std::vector<std::size_t> ns{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<Method> methods{Method::Manc, Method::Random, Method::Natural};
  std::vector<OutputSpec> specs{OutputSpec::top_k(1)};
  std::size_t bag_size = 100;
  /// MANC runs on a random sub-pool of this size each trial (0 = whole bag).
  std::size_t manc_pool = 0;
  bool include_bias = true;
  GenConfig gen;
  double noise_sigma = 0.1;
  double rotate_degrees = 10.0;
  double distort_amplitude = 2.0;
  double distort_period = 8.0;
  unsigned threads = 1;
  std::vector<FixtureSpec> fixtures;
  /// FNV-1a of the manifest text, for provenance in reports.
  ModelDigest source_digest;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string_view> split_list(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    const auto item = trim(s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (!item.empty()) out.push_back(item);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <class T>
T parse_number(std::string_view s, std::size_t at) {
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size())
    throw ParseError("bad number '" + std::string(s) + "'", at);
  return v;
}

inline bool parse_bool(std::string_view s, std::size_t at) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ParseError("expected true or false, got '" + std::string(s) + "'", at);
}

}  // namespace detail

/// Reads the key/value manifest format:
///
///   format = ssfp-manifest/1
///   master_seed = 7
///   ns = 1,2,3
///   [fixture mlp]
///   arch = mlp
///   attack = noise r=0.01 sigma=1
///
/// '#' starts a comment. Relative paths resolve against base_dir.
inline ExperimentManifest parse_manifest(std::string_view text, const std::filesystem::path& base_dir = {}) {
  ExperimentManifest m;
  m.source_digest = ModelDigest{fnv1a64(text)};
  bool have_format = false;
  std::set<std::string> seen;
  FixtureSpec* fx = nullptr;

  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t at = pos;
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError("unterminated section header", at);
      const auto inner = detail::trim(line.substr(1, line.size() - 2));
      if (!inner.starts_with("fixture ")) throw ParseError("unknown section '" + std::string(inner) + "'", at);
      m.fixtures.push_back({});
      fx = &m.fixtures.back();
      fx->name = std::string(detail::trim(inner.substr(8)));
      if (fx->name.empty() || fx->name.find_first_of(" /,") != std::string::npos)
        throw ParseError("fixture names must be single tokens without '/' or ','", at);
      for (std::size_t i = 0; i + 1 < m.fixtures.size(); ++i)
        if (m.fixtures[i].name == fx->name) throw ParseError("duplicate fixture '" + fx->name + "'", at);
      continue;
    }

    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError("expected 'key = value'", at);
    const std::string key(detail::trim(line.substr(0, eq)));
    const std::string_view val = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError("empty key", at);
    const std::string scoped = (fx ? fx->name + "." : std::string()) + key;
    if (key != "attack" && !seen.insert(scoped).second) throw ParseError("duplicate key '" + key + "'", at);

    auto num = [&]<class T>(T& dst) { dst = detail::parse_number<T>(val, at); };
    auto path = [&] {
      std::filesystem::path p{std::string(val)};
      return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    };

    if (fx) {
      if (key == "arch") {
        if (val != "mlp" && val != "cnn") throw ParseError("arch must be mlp or cnn", at);
        fx->arch = std::string(val);
      } else if (key == "seed") num(fx->seed);
      else if (key == "classes") num(fx->classes);
      else if (key == "per_class") num(fx->per_class);
      else if (key == "side") num(fx->side);
      else if (key == "pixel_noise") num(fx->pixel_noise);
      else if (key == "idx_images") fx->idx_images = path();
      else if (key == "idx_labels") fx->idx_labels = path();
      else if (key == "held_out") num(fx->held_out);
      else if (key == "hidden") num(fx->hidden);
      else if (key == "conv1") num(fx->conv1);
      else if (key == "conv2") num(fx->conv2);
      else if (key == "epochs") num(fx->epochs);
      else if (key == "lr") num(fx->lr);
      else if (key == "batch") num(fx->batch);
      else if (key == "model") fx->model_path = path();
      else if (key == "digest") {
        try {
          fx->expect_digest = ModelDigest::from_hex(val);
        } catch (const std::exception& e) {
          throw ParseError(e.what(), at);
        }
      } else if (key == "attack") {
        try {
          parse_attack(val);
        } catch (const InvalidInput& e) {
          throw ParseError(e.what(), at);
        }
        fx->attacks.emplace_back(val);
      } else {
        throw ParseError("unknown fixture key '" + key + "'", at);
      }
      continue;
    }

    try {
      if (key == "format") {
        if (val != kManifestFormat)
          throw ParseError("unsupported manifest format '" + std::string(val) + "' (expected " +
                               std::string(kManifestFormat) + ")",
                           at);
        have_format = true;
      } else if (key == "master_seed") num(m.master_seed);
      else if (key == "trials") num(m.trials);
      else if (key == "ns") {
        m.ns.clear();
        for (auto item : detail::split_list(val)) m.ns.push_back(detail::parse_number<std::size_t>(item, at));
      } else if (key == "methods") {
        m.methods.clear();
        for (auto item : detail::split_list(val)) m.methods.push_back(parse_method(item));
      } else if (key == "specs") {
        m.specs.clear();
        for (auto item : detail::split_list(val)) m.specs.push_back(OutputSpec::parse(item));
      } else if (key == "bag_size") num(m.bag_size);
      else if (key == "manc_pool") num(m.manc_pool);
      else if (key == "include_bias") m.include_bias = detail::parse_bool(val, at);
      else if (key == "threads") num(m.threads);
      else if (key == "gen.lr") num(m.gen.lr);
      else if (key == "gen.itr_max") num(m.gen.itr_max);
      else if (key == "gen.epsilon") num(m.gen.epsilon);
      else if (key == "gen.box_low") num(m.gen.box_low);
      else if (key == "gen.box_high") num(m.gen.box_high);
      else if (key == "gen.adam_beta1") num(m.gen.adam_beta1);
      else if (key == "gen.adam_beta2") num(m.gen.adam_beta2);
      else if (key == "gen.adam_eps") num(m.gen.adam_eps);
      else if (key == "baseline.noise_sigma") num(m.noise_sigma);
      else if (key == "baseline.rotate_degrees") num(m.rotate_degrees);
      else if (key == "baseline.distort_amplitude") num(m.distort_amplitude);
      else if (key == "baseline.distort_period") num(m.distort_period);
      else throw ParseError("unknown key '" + key + "'", at);
    } catch (const InvalidInput& e) {
      throw ParseError(e.what(), at);
    } catch (const InvalidSpec& e) {
      throw ParseError(e.what(), at);
    }
  }

  if (!have_format) throw ParseError("missing 'format' key", 0);
  if (m.trials == 0) throw ParseError("trials must be >= 1", 0);
  if (m.ns.empty() || m.methods.empty() || m.specs.empty()) throw ParseError("ns, methods and specs must be non-empty", 0);
  for (auto n : m.ns)
    if (n == 0) throw ParseError("ns values must be >= 1", 0);
  if (m.bag_size == 0) throw ParseError("bag_size must be >= 1", 0);
  if (m.fixtures.empty()) throw ParseError("manifest declares no fixtures", 0);
  for (const auto& f : m.fixtures) {
    if (f.attacks.empty()) throw ParseError("fixture '" + f.name + "' has no attacks", 0);
    if (f.idx_images.has_value() != f.idx_labels.has_value())
      throw ParseError("fixture '" + f.name + "': idx_images and idx_labels go together", 0);
  }
  try {
    m.gen.validate();
  } catch (const InvalidInput& e) {
    throw ParseError(e.what(), 0);
  }
  return m;
}

inline ExperimentManifest load_manifest(const std::filesystem::path& path) {
  return parse_manifest(detail::read_file(path), path.parent_path());
}

/// Trained (or loaded) fixture with its data split.
struct Fixture {
  Model model;
  LabeledSet train;
  LabeledSet held_out;
};

inline Model fixture_architecture(const FixtureSpec& f, const Shape& input_shape, std::size_t classes) {
  const std::size_t m = numel(input_shape);
  std::vector<Layer> layers;
  if (f.arch == "mlp") {
    layers = {flatten_layer(), dense_layer(m, f.hidden, Activation::ReLU),
              dense_layer(f.hidden, classes, Activation::Identity)};
  } else {
    if (input_shape.size() != 3 || input_shape[1] < 5 || input_shape[2] < 5)
      throw InvalidInput("cnn fixture needs a {C,H,W} input of at least 5x5");
    const std::size_t flat = f.conv2 * (input_shape[1] - 4) * (input_shape[2] - 4);
    layers = {conv2d_layer(input_shape[0], f.conv1, 3, 3, Activation::ReLU),
              conv2d_layer(f.conv1, f.conv2, 3, 3, Activation::ReLU),
              flatten_layer(),
              dense_layer(flat, f.hidden, Activation::ReLU),
              dense_layer(f.hidden, classes, Activation::Identity)};
  }
  return Model(input_shape, std::move(layers), classes);
}

inline Fixture build_fixture(const FixtureSpec& f) {
  LabeledSet all = f.idx_images ? load_idx(*f.idx_images, *f.idx_labels)
                                : synth_glyphs(f.classes, f.per_class, f.side, f.pixel_noise, mix_seed(f.seed, 0));
  auto [train, held] = split(all, f.held_out, mix_seed(f.seed, 1));
  std::optional<Model> model;
  if (f.model_path) {
    model = load_model(*f.model_path);
  } else {
    Model init = initialize(fixture_architecture(f, all.inputs.front().shape, static_cast<std::size_t>(all.class_count)),
                            mix_seed(f.seed, 2));
    model = fine_tune(init, train, f.epochs, f.lr, mix_seed(f.seed, 3), f.batch);
  }
  if (f.expect_digest && digest(*model) != *f.expect_digest)
    throw InvalidInput("fixture '" + f.name + "': model digest " + digest(*model).hex() + " != expected " +
                       f.expect_digest->hex());
  return {std::move(*model), std::move(train), std::move(held)};
}

struct CurveRow {
  std::string fixture;
  std::string attack;
  std::string spec;
  std::string method;
  std::size_t ns = 0;
  std::size_t trials = 0;
  std::size_t detections = 0;
  double rate = 0.0;
  /// Detection bit per trial (in-memory only).
  std::vector<std::uint8_t> per_trial;

  /// "<fixture>/<attack>", the attack column of the CSV.
  std::string attack_key() const { return fixture + "/" + attack; }
};

struct AttackSummary {
  std::string id;
  std::string config;
  bool per_trial = false;
  AttackMetrics metrics;
};

struct FixtureSummary {
  std::string name;
  std::string digest;
  std::size_t parameters = 0;
  std::size_t hidden_neurons = 0;
  double train_accuracy = 0.0;
  double held_out_accuracy = 0.0;
  double mean_s_origin = 0.0;
  double mean_s_final = 0.0;
  double mean_snr_db = 0.0;
  double bag_coverage = 0.0;
  /// Reference accuracy on each candidate pool (class identity kept by a baseline transform).
  std::map<std::string, double> pool_accuracy;
  std::vector<AttackSummary> attacks;
};

struct DetectionCurve {
  std::string manifest_digest;
  bool complete = true;
  std::string error;
  std::vector<FixtureSummary> fixtures;
  std::vector<CurveRow> rows;

  const CurveRow* find(std::string_view attack_key, std::string_view spec, std::string_view method,
                       std::size_t ns) const {
    for (const auto& r : rows)
      if (r.attack_key() == attack_key && r.spec == spec && r.method == method && r.ns == ns) return &r;
    return nullptr;
  }
};

/// run_experiment failed part-way; partial() holds the finished fixtures.
class ExperimentAborted : public Error {
 public:
  ExperimentAborted(const std::string& what, DetectionCurve partial)
      : Error("experiment aborted: " + what), partial_(std::move(partial)) {}
  const DetectionCurve& partial() const noexcept { return partial_; }

 private:
  DetectionCurve partial_;
};

namespace detail {

/// Candidate inputs for one selection method together with the reference
/// model's outputs on them.
struct CandidatePool {
  std::vector<Tensor> inputs;
  std::vector<std::vector<float>> ref_probs;
};

inline CandidatePool make_pool(const Model& model, std::vector<Tensor> inputs) {
  CandidatePool p{std::move(inputs), {}};
  for (const auto& x : p.inputs) p.ref_probs.push_back(predict_probs(model, x));
  return p;
}

/// Ordered candidate indices (length max_n) for one method in one trial.
/// Prefixes give the N_S-sample fingerprints, so rates are monotone in N_S.
/// Every pool except Natural is aligned with the bag, and those methods share
/// one random draw: the transform baselines see the same origins as Random.
/// MANC re-ranks the first manc_pool entries of that draw; patterns are
/// indexed by draw position, so coverage ties fall back to the random order.
inline std::vector<std::size_t> select_for_trial(Method method, std::uint64_t trial_seed, std::size_t pool_size,
                                                 std::size_t max_n, std::span<const ActivationPattern> bag_patterns,
                                                 std::size_t manc_pool) {
  if (max_n > pool_size)
    throw InvalidInput(std::string(method_name(method)) + ": N_S " + std::to_string(max_n) + " exceeds pool of " +
                       std::to_string(pool_size));
  const Method stream_of = method == Method::Natural ? Method::Natural : Method::Random;
  auto perm = Rng(mix_seed(trial_seed, static_cast<std::uint64_t>(stream_of) + 1)).permutation(pool_size);
  if (method != Method::Manc) {
    perm.resize(max_n);
    return perm;
  }
  const std::size_t sub = manc_pool == 0 ? pool_size : std::min(manc_pool, pool_size);
  if (sub < max_n) throw InvalidInput("manc_pool is smaller than the largest N_S");
  std::vector<ActivationPattern> patterns;
  for (std::size_t i = 0; i < sub; ++i) patterns.push_back({i, bag_patterns[perm[i]].active});
  std::vector<std::size_t> out;
  for (std::size_t pos : manc_select(patterns, max_n).selected) out.push_back(perm[pos]);
  return out;
}

}  // namespace detail

/// Runs every fixture x attack x trial x method x spec x N_S cell.
///
/// The bag is generated once per fixture; each trial re-selects subsets with
/// trial_seed = mix_seed(master_seed, trial). Weight-noise attacks are redrawn
/// per trial (seed mixed from trial seed and the configured seed); trained
/// and quantization attacks are built once. Same subsets are used across specs.
inline DetectionCurve run_experiment(const ExperimentManifest& m) {
  DetectionCurve curve;
  curve.manifest_digest = m.source_digest.hex();
  const std::size_t max_n = *std::max_element(m.ns.begin(), m.ns.end());

  for (const auto& fs : m.fixtures) {
    try {
      const Fixture fx = build_fixture(fs);
      const Model& ref = fx.model;
      for (const auto& spec : m.specs) spec.validate(ref.num_classes());
      const auto sel = ParamSelector::last_layer(ref, m.include_bias);

      FixtureSummary summary;
      summary.name = fs.name;
      summary.digest = digest(ref).hex();
      summary.parameters = ref.parameter_count();
      summary.hidden_neurons = ref.hidden_size();
      summary.train_accuracy = accuracy(ref, fx.train);
      summary.held_out_accuracy = accuracy(ref, fx.held_out);

      GenConfig gen = m.gen;
      gen.seed = mix_seed(fs.seed, 4);
      const auto bag = generate_bag(ref, sel, std::span<const Tensor>(fx.held_out.inputs), m.bag_size, gen,
                                    std::max(1u, m.threads));
      std::vector<ActivationPattern> patterns;
      const double tau = default_tau(ref);
      for (std::size_t i = 0; i < bag.size(); ++i) {
        summary.mean_s_origin += bag[i].s_origin / static_cast<double>(bag.size());
        summary.mean_s_final += bag[i].s_final / static_cast<double>(bag.size());
        summary.mean_snr_db += std::min(snr_db(bag[i].snr_ratio), 200.0) / static_cast<double>(bag.size());
        patterns.push_back(activation_pattern(ref, bag[i].v, tau, i));
      }
      summary.bag_coverage = manc_select(patterns, patterns.size()).coverage_fraction;

      // Candidate pools, indexed by Method.
      std::map<Method, detail::CandidatePool> pools;
      const auto& origins = fx.held_out.inputs;
      for (Method meth : m.methods) {
        std::vector<Tensor> in;
        switch (meth) {
          case Method::Manc:
          case Method::Random:
            for (const auto& s : bag) in.push_back(s.v);
            break;
          case Method::Natural: in = origins; break;
          case Method::Noise:
            for (std::size_t i = 0; i < bag.size(); ++i)
              in.push_back(baseline_noise(origins[bag[i].origin_index], m.noise_sigma, mix_seed(fs.seed, 100 + i),
                                          gen.box_low, gen.box_high));
            break;
          case Method::Rotate:
            for (const auto& s : bag) in.push_back(baseline_rotate(origins[s.origin_index], m.rotate_degrees, gen.box_low));
            break;
          case Method::Distort:
            for (std::size_t i = 0; i < bag.size(); ++i)
              in.push_back(baseline_distort(origins[bag[i].origin_index], m.distort_amplitude, m.distort_period, i));
            break;
        }
        std::size_t correct = 0;
        for (std::size_t i = 0; i < in.size(); ++i) {
          const auto& labels = fx.held_out.labels;
          const int want = meth == Method::Natural ? labels[i] : labels[bag[i].origin_index];
          if (predict_label(ref, in[i]) == want) ++correct;
        }
        summary.pool_accuracy[method_name(meth)] = static_cast<double>(correct) / static_cast<double>(in.size());
        pools.emplace(meth, detail::make_pool(ref, std::move(in)));
      }

      // Attacks: fixed ones are applied once, weight noise per trial.
      struct PreparedAttack {
        std::string id;
        AttackConfig cfg;
        std::optional<Model> fixed;
        std::map<Method, std::vector<std::vector<float>>> fixed_probs;
      };
      std::vector<PreparedAttack> attacks;
      for (const auto& text : fs.attacks) {
        PreparedAttack pa{attack_id(parse_attack(text)), parse_attack(text), std::nullopt, {}};
        AttackSummary as{pa.id, text, std::holds_alternative<WeightNoiseConfig>(pa.cfg), {}};
        for (const auto& prev : attacks)
          if (prev.id == pa.id) throw InvalidInput("duplicate attack id '" + pa.id + "'");
        if (!as.per_trial) {
          auto outcome = apply_attack(ref, pa.cfg, fx.train, fx.held_out);
          as.metrics = outcome.metrics;
          for (const auto& [meth, pool] : pools) {
            auto& probs = pa.fixed_probs[meth];
            for (const auto& x : pool.inputs) probs.push_back(predict_probs(outcome.tampered, x));
          }
          pa.fixed = std::move(outcome.tampered);
        }
        summary.attacks.push_back(std::move(as));
        attacks.push_back(std::move(pa));
      }

      // bits[trial][((attack * specs + spec) * methods + method) * ns + n]
      const std::size_t cells = attacks.size() * m.specs.size() * m.methods.size() * m.ns.size();
      std::vector<std::vector<std::uint8_t>> bits(m.trials, std::vector<std::uint8_t>(cells, 0));

      auto run_trial = [&](std::size_t t) {
        const std::uint64_t trial_seed = mix_seed(m.master_seed, t);
        std::vector<std::vector<std::size_t>> chosen;
        for (Method meth : m.methods)
          chosen.push_back(detail::select_for_trial(meth, trial_seed, pools.at(meth).inputs.size(), max_n,
                                                    patterns, m.manc_pool));
        for (std::size_t a = 0; a < attacks.size(); ++a) {
          const auto& pa = attacks[a];
          std::optional<Model> noisy;
          if (!pa.fixed) {
            auto c = std::get<WeightNoiseConfig>(pa.cfg);
            noisy = weight_noise(ref, c.ratio, c.sigma, mix_seed(trial_seed, c.seed)).tampered;
          }
          for (std::size_t mi = 0; mi < m.methods.size(); ++mi) {
            const auto& pool = pools.at(m.methods[mi]);
            std::vector<Tensor> xs;
            std::vector<const std::vector<float>*> ref_p;
            std::vector<std::vector<float>> tam_p;
            for (std::size_t idx : chosen[mi]) {
              xs.push_back(pool.inputs[idx]);
              ref_p.push_back(&pool.ref_probs[idx]);
              tam_p.push_back(pa.fixed ? pa.fixed_probs.at(m.methods[mi])[idx] : predict_probs(*noisy, pool.inputs[idx]));
            }
            for (std::size_t si = 0; si < m.specs.size(); ++si) {
              const auto& spec = m.specs[si];
              Fingerprint fp{spec, {}, ModelDigest{}, {}};
              for (std::size_t i = 0; i < xs.size(); ++i)
                fp.entries.push_back({xs[i], apply_output_spec(*ref_p[i], spec)});
              // Answers from the tampered model's precomputed outputs.
              const Oracle oracle = [&](const Tensor& x) {
                for (std::size_t i = 0; i < xs.size(); ++i)
                  if (bit_equal(x, xs[i])) return apply_output_spec(tam_p[i], spec);
                throw TransportError("unexpected query");
              };
              const auto report = verify(fp, oracle);
              for (std::size_t ni = 0; ni < m.ns.size(); ++ni)
                bits[t][((a * m.specs.size() + si) * m.methods.size() + mi) * m.ns.size() + ni] =
                    report.detected_within(m.ns[ni]) ? 1 : 0;
            }
          }
        }
      };

      const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, m.threads), m.trials));
      if (workers <= 1) {
        for (std::size_t t = 0; t < m.trials; ++t) run_trial(t);
      } else {
        std::vector<std::jthread> pool_threads;
        std::vector<std::exception_ptr> errors(workers);
        for (unsigned w = 0; w < workers; ++w)
          pool_threads.emplace_back([&, w] {
            try {
              for (std::size_t t = w; t < m.trials; t += workers) run_trial(t);
            } catch (...) {
              errors[w] = std::current_exception();
            }
          });
        pool_threads.clear();
        for (auto& e : errors)
          if (e) std::rethrow_exception(e);
      }

      for (std::size_t a = 0; a < attacks.size(); ++a)
        for (std::size_t si = 0; si < m.specs.size(); ++si)
          for (std::size_t mi = 0; mi < m.methods.size(); ++mi)
            for (std::size_t ni = 0; ni < m.ns.size(); ++ni) {
              CurveRow row{fs.name, attacks[a].id, m.specs[si].to_string(), method_name(m.methods[mi]), m.ns[ni],
                           m.trials, 0, 0.0, {}};
              const std::size_t cell = ((a * m.specs.size() + si) * m.methods.size() + mi) * m.ns.size() + ni;
              for (std::size_t t = 0; t < m.trials; ++t) {
                row.per_trial.push_back(bits[t][cell]);
                row.detections += bits[t][cell];
              }
              row.rate = static_cast<double>(row.detections) / static_cast<double>(row.trials);
              curve.rows.push_back(std::move(row));
            }
      curve.fixtures.push_back(std::move(summary));
    } catch (const std::exception& e) {
      curve.complete = false;
      curve.error = "fixture '" + fs.name + "': " + e.what();
      throw ExperimentAborted(curve.error, curve);
    }
  }
  return curve;
}

namespace detail {

/// Shortest round-trip decimal form.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc() ? std::string(buf, ptr) : std::string("nan");
}

inline nlohmann::json metrics_json(const AttackMetrics& mt) {
  nlohmann::json j{{"params_changed", mt.params_changed},
                   {"accuracy_before", mt.accuracy_before},
                   {"accuracy_after", mt.accuracy_after}};
  if (mt.attack_success_rate) j["attack_success_rate"] = *mt.attack_success_rate;
  if (mt.source_error_rate) j["source_error_rate"] = *mt.source_error_rate;
  if (mt.other_accuracy_before) j["other_accuracy_before"] = *mt.other_accuracy_before;
  if (mt.other_accuracy_after) j["other_accuracy_after"] = *mt.other_accuracy_after;
  return j;
}

}  // namespace detail

/// CSV columns: method,spec,ns,attack,trials,detections,rate. The attack
/// column is "<fixture>/<attack id>".
inline std::string curve_to_csv(const DetectionCurve& c) {
  std::string out = "method,spec,ns,attack,trials,detections,rate\n";
  for (const auto& r : c.rows)
    out += r.method + "," + r.spec + "," + std::to_string(r.ns) + "," + r.attack_key() + "," +
           std::to_string(r.trials) + "," + std::to_string(r.detections) + "," + detail::format_double(r.rate) + "\n";
  return out;
}

inline nlohmann::json curve_to_json(const DetectionCurve& c) {
  nlohmann::json fixtures = nlohmann::json::array();
  for (const auto& f : c.fixtures) {
    nlohmann::json attacks = nlohmann::json::array();
    for (const auto& a : f.attacks) {
      nlohmann::json aj{{"id", a.id}, {"config", a.config}, {"per_trial", a.per_trial}};
      if (!a.per_trial) aj["metrics"] = detail::metrics_json(a.metrics);
      attacks.push_back(std::move(aj));
    }
    fixtures.push_back({{"name", f.name},
                        {"digest", f.digest},
                        {"parameters", f.parameters},
                        {"hidden_neurons", f.hidden_neurons},
                        {"train_accuracy", f.train_accuracy},
                        {"held_out_accuracy", f.held_out_accuracy},
                        {"mean_s_origin", f.mean_s_origin},
                        {"mean_s_final", f.mean_s_final},
                        {"mean_snr_db", f.mean_snr_db},
                        {"bag_coverage", f.bag_coverage},
                        {"pool_accuracy", f.pool_accuracy},
                        {"attacks", std::move(attacks)}});
  }
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : c.rows)
    rows.push_back({{"method", r.method},
                    {"spec", r.spec},
                    {"ns", r.ns},
                    {"attack", r.attack_key()},
                    {"trials", r.trials},
                    {"detections", r.detections},
                    {"rate", r.rate}});
  nlohmann::json j{{"format", kCurveFormat},
                   {"toolkit", kToolkitVersion},
                   {"manifest_digest", c.manifest_digest},
                   {"complete", c.complete},
                   {"fixtures", std::move(fixtures)},
                   {"rows", std::move(rows)}};
  if (!c.complete) j["error"] = c.error;
  return j;
}

/// Rows only; fixture summaries are not restored.
inline DetectionCurve curve_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("format", "") != kCurveFormat) throw ParseError("not a detection curve file", 0);
  DetectionCurve c;
  try {
    c.manifest_digest = j.at("manifest_digest").get<std::string>();
    c.complete = j.at("complete").get<bool>();
    for (const auto& r : j.at("rows")) {
      CurveRow row;
      const auto key = r.at("attack").get<std::string>();
      const auto slash = key.find('/');
      if (slash == std::string::npos) throw ParseError("attack column lacks a fixture prefix", 0);
      row.fixture = key.substr(0, slash);
      row.attack = key.substr(slash + 1);
      row.spec = r.at("spec").get<std::string>();
      row.method = r.at("method").get<std::string>();
      row.ns = r.at("ns").get<std::size_t>();
      row.trials = r.at("trials").get<std::size_t>();
      row.detections = r.at("detections").get<std::size_t>();
      row.rate = r.at("rate").get<double>();
      c.rows.push_back(std::move(row));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad curve file: ") + e.what(), 0);
  }
  return c;
}

/// Plot-ready series: one per (attack, spec, method), x = N_S, y = rate.
inline nlohmann::json curve_to_plot_json(const DetectionCurve& c) {
  std::map<std::tuple<std::string, std::string, std::string>, std::pair<std::vector<std::size_t>, std::vector<double>>>
      series;
  std::vector<std::tuple<std::string, std::string, std::string>> order;
  for (const auto& r : c.rows) {
    auto key = std::make_tuple(r.attack_key(), r.spec, r.method);
    if (!series.count(key)) order.push_back(key);
    series[key].first.push_back(r.ns);
    series[key].second.push_back(r.rate);
  }
  nlohmann::json out = nlohmann::json::array();
  for (const auto& key : order) {
    const auto& [xs, ys] = series[key];
    out.push_back({{"attack", std::get<0>(key)},
                   {"spec", std::get<1>(key)},
                   {"method", std::get<2>(key)},
                   {"x", xs},
                   {"y", ys}});
  }
  return nlohmann::json{{"format", "ssfp-plot/1"}, {"x_label", "N_S"}, {"y_label", "detection rate"}, {"series", out}};
}

inline constexpr const char* kBagFormat = "ssfp-bag/1";

/// Sensitive-Sample bag as JSON. Floats are written with round-trip precision,
/// so a reloaded bag is bit-equal to the original.
inline nlohmann::json bag_to_json(std::span<const SensitiveSample> bag, const ModelDigest& model_digest) {
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : bag)
    samples.push_back({{"origin_index", s.origin_index},
                       {"s_origin", s.s_origin},
                       {"s_final", s.s_final},
                       {"snr_ratio", s.snr_ratio},
                       {"iterations", s.iterations_used},
                       {"shape", s.v.shape},
                       {"v", s.v.data},
                       {"v0", s.v0.data}});
  return {{"format", kBagFormat}, {"model_digest", model_digest.hex()}, {"samples", std::move(samples)}};
}

inline std::vector<SensitiveSample> bag_from_json(const nlohmann::json& j, ModelDigest* model_digest = nullptr) {
  if (!j.is_object() || j.value("format", "") != kBagFormat) throw ParseError("not a sample bag file", 0);
  std::vector<SensitiveSample> bag;
  try {
    if (model_digest) *model_digest = ModelDigest::from_hex(j.at("model_digest").get<std::string>());
    for (const auto& e : j.at("samples")) {
      SensitiveSample s;
      const auto shape = e.at("shape").get<Shape>();
      s.v = Tensor(shape, e.at("v").get<std::vector<float>>());
      s.v0 = Tensor(shape, e.at("v0").get<std::vector<float>>());
      s.origin_index = e.at("origin_index").get<std::size_t>();
      s.s_origin = e.at("s_origin").get<double>();
      s.s_final = e.at("s_final").get<double>();
      s.snr_ratio = e.at("snr_ratio").get<double>();
      s.iterations_used = e.at("iterations").get<int>();
      bag.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad bag file: ") + e.what(), 0);
  }
  return bag;
}

inline const FixtureSpec& find_fixture(const ExperimentManifest& m, std::string_view name) {
  for (const auto& f : m.fixtures)
    if (f.name == name) return f;
  throw InvalidInput("manifest has no fixture '" + std::string(name) + "'");
}

inline void write_reports(const DetectionCurve& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  detail::write_file_atomic(dir / "curve.json", curve_to_json(c).dump(2) + "\n");
  detail::write_file_atomic(dir / "curve.csv", curve_to_csv(c));
  detail::write_file_atomic(dir / "plot.json", curve_to_plot_json(c).dump(2) + "\n");
}

}  // namespace ssfp
