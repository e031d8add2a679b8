#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ssfp/error.hpp"
#include "ssfp/model_io.hpp"
#include "ssfp/nn.hpp"
#include "ssfp/samplegen.hpp"

namespace ssfp {

/// What a served model reveals per query.
///   TopK(k)               ordered top-k labels               "top3"
///   TopKProb(k, decimals) top-k labels plus their rounded p  "top1-p2"
///   AllProbs(decimals)    every class probability, rounded   "p2"
struct OutputSpec {
  enum class Kind { TopK, TopKProb, AllProbs };

  Kind kind = Kind::TopK;
  int k = 1;
  int decimals = 0;

  static OutputSpec top_k(int k) { return {Kind::TopK, k, 0}; }
  static OutputSpec top_k_prob(int k, int decimals) { return {Kind::TopKProb, k, decimals}; }
  static OutputSpec all_probs(int decimals) { return {Kind::AllProbs, 0, decimals}; }

  bool has_labels() const noexcept { return kind != Kind::AllProbs; }
  bool has_probs() const noexcept { return kind != Kind::TopK; }

  std::string to_string() const {
    switch (kind) {
      case Kind::TopK: return "top" + std::to_string(k);
      case Kind::TopKProb: return "top" + std::to_string(k) + "-p" + std::to_string(decimals);
      case Kind::AllProbs: break;
    }
    return "p" + std::to_string(decimals);
  }

  static OutputSpec parse(std::string_view s) {
    auto number = [&](std::string_view digits) {
      int v = -1;
      auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v);
      if (digits.empty() || ec != std::errc() || ptr != digits.data() + digits.size())
        throw InvalidSpec("bad output spec '" + std::string(s) + "'");
      return v;
    };
    OutputSpec spec;
    if (s.starts_with("top")) {
      const auto dash = s.find("-p");
      if (dash == std::string_view::npos) {
        spec = top_k(number(s.substr(3)));
      } else {
        spec = top_k_prob(number(s.substr(3, dash - 3)), number(s.substr(dash + 2)));
      }
    } else if (s.starts_with("p")) {
      spec = all_probs(number(s.substr(1)));
    } else {
      throw InvalidSpec("bad output spec '" + std::string(s) + "'");
    }
    spec.validate();
    return spec;
  }

  void validate() const {
    if (has_labels() && k < 1) throw InvalidSpec("output spec: k must be >= 1");
    if (decimals < 0 || decimals > 9) throw InvalidSpec("output spec: decimals must be in [0, 9]");
  }

  void validate(std::size_t num_classes) const {
    validate();
    if (has_labels() && static_cast<std::size_t>(k) > num_classes)
      throw InvalidSpec("output spec: k=" + std::to_string(k) + " exceeds " + std::to_string(num_classes) +
                        " classes");
  }

  friend bool operator==(const OutputSpec&, const OutputSpec&) = default;
};

/// Canonical observed output. Probabilities are fixed-point integers in
/// units of 10^-decimals, so equality is exact.
struct ObservedOutput {
  std::vector<int> labels;
  std::vector<std::int64_t> probs;
  int decimals = 0;

  friend bool operator==(const ObservedOutput&, const ObservedOutput&) = default;

  /// Same fields, same lengths, same precision.
  bool same_structure(const ObservedOutput& o) const noexcept {
    return labels.size() == o.labels.size() && probs.size() == o.probs.size() && decimals == o.decimals;
  }
};

inline std::int64_t pow10(int d) {
  std::int64_t p = 1;
  for (int i = 0; i < d; ++i) p *= 10;
  return p;
}

/// "0.61" for (61, 2); "1" for (1, 0).
inline std::string fixed_to_string(std::int64_t value, int decimals) {
  const std::int64_t scale = pow10(decimals);
  std::string s = std::to_string(value / scale);
  if (decimals > 0) {
    std::string frac = std::to_string(value % scale);
    s += '.';
    s.append(static_cast<std::size_t>(decimals) - frac.size(), '0');
    s += frac;
  }
  return s;
}

/// Strict inverse of fixed_to_string: exactly `decimals` fractional digits.
inline std::int64_t fixed_from_string(std::string_view s, int decimals) {
  auto bad = [&] { return ParseError("bad fixed-point value '" + std::string(s) + "'", 0); };
  const auto dot = s.find('.');
  const std::string_view whole = s.substr(0, dot);
  const std::string_view frac = dot == std::string_view::npos ? std::string_view{} : s.substr(dot + 1);
  if (whole.empty() || (decimals == 0) != (dot == std::string_view::npos) ||
      frac.size() != static_cast<std::size_t>(decimals))
    throw bad();
  auto digits = [&](std::string_view d) {
    std::int64_t v = 0;
    if (d.empty()) return v;
    auto [ptr, ec] = std::from_chars(d.data(), d.data() + d.size(), v);
    if (ec != std::errc() || ptr != d.data() + d.size() || d.front() == '-' || d.front() == '+') throw bad();
    return v;
  };
  return digits(whole) * pow10(decimals) + digits(frac);
}

/// "labels:1,2 probs:0.50,0.30" (either part omitted when the spec has none).
inline std::string to_text(const ObservedOutput& o) {
  std::string s;
  if (!o.labels.empty()) {
    s += "labels:";
    for (std::size_t i = 0; i < o.labels.size(); ++i) {
      if (i) s += ',';
      s += std::to_string(o.labels[i]);
    }
  }
  if (!o.probs.empty()) {
    if (!s.empty()) s += ' ';
    s += "probs:";
    for (std::size_t i = 0; i < o.probs.size(); ++i) {
      if (i) s += ',';
      s += fixed_to_string(o.probs[i], o.decimals);
    }
  }
  return s;
}

inline ObservedOutput observed_from_text(std::string_view text, const OutputSpec& spec) {
  ObservedOutput o;
  o.decimals = spec.has_probs() ? spec.decimals : 0;
  for (auto tok : detail::split_ws(text)) {
    auto list = [&](std::string_view prefix) {
      std::vector<std::string_view> items;
      std::string_view rest = tok.substr(prefix.size());
      std::size_t start = 0;
      while (start <= rest.size()) {
        const auto comma = rest.find(',', start);
        items.push_back(rest.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
      }
      return items;
    };
    if (tok.starts_with("labels:") && spec.has_labels() && o.labels.empty()) {
      for (auto item : list("labels:")) o.labels.push_back(detail::parse_int<int>(item, 0));
    } else if (tok.starts_with("probs:") && spec.has_probs() && o.probs.empty()) {
      for (auto item : list("probs:")) o.probs.push_back(fixed_from_string(item, o.decimals));
    } else {
      throw ParseError("unexpected output token '" + std::string(tok) + "' for spec " + spec.to_string(), 0);
    }
  }
  if (spec.has_labels() && o.labels.size() != static_cast<std::size_t>(spec.k))
    throw ParseError("expected " + std::to_string(spec.k) + " labels", 0);
  if (spec.has_probs() && o.probs.empty()) throw ParseError("missing probabilities", 0);
  return o;
}

/// Labels sorted by descending probability, ties to the lower class index;
/// probabilities rounded half away from zero.
inline ObservedOutput apply_output_spec(std::span<const float> probs, const OutputSpec& spec) {
  spec.validate(probs.size());
  ObservedOutput o;
  auto round_fixed = [&](float p) { return static_cast<std::int64_t>(std::round(static_cast<double>(p) * pow10(spec.decimals))); };
  if (spec.has_labels()) {
    std::vector<int> order(probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + spec.k, order.end(), [&](int a, int b) {
      return probs[a] > probs[b] || (probs[a] == probs[b] && a < b);
    });
    o.labels.assign(order.begin(), order.begin() + spec.k);
  }
  if (spec.has_probs()) {
    o.decimals = spec.decimals;
    if (spec.kind == OutputSpec::Kind::TopKProb) {
      for (int l : o.labels) o.probs.push_back(round_fixed(probs[l]));
    } else {
      for (float p : probs) o.probs.push_back(round_fixed(p));
    }
  }
  return o;
}

struct FingerprintEntry {
  Tensor input;
  ObservedOutput expected;
};

struct Fingerprint {
  OutputSpec spec;
  std::vector<FingerprintEntry> entries;
  ModelDigest reference_digest;
  /// Generation metadata: seeds, configuration, selection method.
  std::map<std::string, std::string> manifest;
};

/// Default query budget per fingerprint.
inline constexpr std::size_t kDefaultMaxEntries = 10;

inline Fingerprint build_fingerprint(const Model& model, std::span<const Tensor> inputs, const OutputSpec& spec,
                                     std::map<std::string, std::string> manifest = {},
                                     std::size_t max_entries = kDefaultMaxEntries) {
  if (inputs.empty()) throw InvalidInput("build_fingerprint: no samples");
  if (inputs.size() > max_entries)
    throw InvalidInput("build_fingerprint: " + std::to_string(inputs.size()) + " samples exceed the budget of " +
                       std::to_string(max_entries));
  spec.validate(model.num_classes());
  Fingerprint fp{spec, {}, digest(model), std::move(manifest)};
  for (const auto& x : inputs) fp.entries.push_back({x, apply_output_spec(predict_probs(model, x), spec)});
  return fp;
}

inline Fingerprint build_fingerprint(const Model& model, std::span<const SensitiveSample> samples,
                                     const OutputSpec& spec, std::map<std::string, std::string> manifest = {},
                                     std::size_t max_entries = kDefaultMaxEntries) {
  std::vector<Tensor> inputs;
  inputs.reserve(samples.size());
  for (const auto& s : samples) inputs.push_back(s.v);
  return build_fingerprint(model, std::span<const Tensor>(inputs), spec, std::move(manifest), max_entries);
}

using Oracle = std::function<ObservedOutput(const Tensor&)>;

/// In-process oracle over a model held by value.
inline Oracle local_oracle(Model model, OutputSpec spec) {
  return [model = std::move(model), spec](const Tensor& x) { return apply_output_spec(predict_probs(model, x), spec); };
}

struct SampleCheck {
  std::size_t index = 0;
  bool match = true;
  /// The reply did not have the expected fields/lengths (e.g. a different class count).
  bool shape_mismatch = false;
};

struct DetectionReport {
  bool detected = false;
  std::vector<SampleCheck> per_sample;
  std::size_t queries_used = 0;

  /// Detection restricted to the first n entries.
  bool detected_within(std::size_t n) const {
    for (const auto& c : per_sample)
      if (c.index < n && !c.match) return true;
    return false;
  }
};

/// The oracle failed mid-run; carries what was checked before the failure.
/// No verdict is implied.
class VerificationAborted : public Error {
 public:
  VerificationAborted(const std::string& what, DetectionReport partial)
      : Error("verification aborted: " + what), partial_(std::move(partial)) {}

  const DetectionReport& partial() const noexcept { return partial_; }

 private:
  DetectionReport partial_;
};

struct VerifyOptions {
  bool early_exit = false;
};

/// Queries the oracle once per entry (in order) and compares canonical outputs exactly.
inline DetectionReport verify(const Fingerprint& fp, const Oracle& oracle, VerifyOptions opts = {}) {
  DetectionReport report;
  for (std::size_t i = 0; i < fp.entries.size(); ++i) {
    ObservedOutput got;
    try {
      ++report.queries_used;
      got = oracle(fp.entries[i].input);
    } catch (const std::exception& e) {
      report.detected = false;
      throw VerificationAborted(e.what(), report);
    }
    SampleCheck check{i, got == fp.entries[i].expected, !got.same_structure(fp.entries[i].expected)};
    report.per_sample.push_back(check);
    if (!check.match) {
      report.detected = true;
      if (opts.early_exit) break;
    }
  }
  return report;
}

inline constexpr int kFingerprintFormatVersion = 1;

/// Container layout (text lines, one binary block per entry):
///   ssfp-fingerprint 1
///   spec <spec>
///   digest <16 hex>
///   meta <n>            followed by n lines "<key> <value>"
///   entries <n>
///   entry <dims...>     then "expect <canonical output>", "data <bytes>",
///                       the little-endian float32 payload and a newline
///   end
inline std::string serialize_fingerprint(const Fingerprint& fp) {
  std::string out;
  out += "ssfp-fingerprint " + std::to_string(kFingerprintFormatVersion) + "\n";
  out += "spec " + fp.spec.to_string() + "\n";
  out += "digest " + fp.reference_digest.hex() + "\n";
  out += "meta " + std::to_string(fp.manifest.size()) + "\n";
  for (const auto& [k, v] : fp.manifest) {
    if (k.empty() || k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos)
      throw InvalidInput("fingerprint manifest keys must be single tokens and values single lines");
    out += k + " " + v + "\n";
  }
  out += "entries " + std::to_string(fp.entries.size()) + "\n";
  for (const auto& e : fp.entries) {
    out += "entry";
    for (auto d : e.input.shape) out += " " + std::to_string(d);
    out += "\nexpect " + to_text(e.expected) + "\n";
    out += "data " + std::to_string(e.input.size() * 4) + "\n";
    for (float v : e.input.data) detail::put_f32_le(out, v);
    out += "\n";
  }
  out += "end\n";
  return out;
}

inline Fingerprint parse_fingerprint(std::string_view bytes) {
  detail::LineReader r(bytes);
  auto record = [&](std::string_view key, std::size_t min_fields) {
    const std::size_t at = r.offset();
    auto f = detail::split_ws(r.line());
    if (f.empty() || f[0] != key || f.size() < min_fields)
      throw ParseError("expected '" + std::string(key) + "' record", at);
    return std::pair{f, at};
  };
  auto rethrow_at = [](std::size_t at, auto&& fn) {
    try {
      return fn();
    } catch (const ParseError& e) {
      throw ParseError(e.what(), at);
    } catch (const InvalidInput& e) {
      throw ParseError(e.what(), at);
    } catch (const InvalidSpec& e) {
      throw ParseError(e.what(), at);
    }
  };

  Fingerprint fp;
  {
    auto [f, at] = record("ssfp-fingerprint", 2);
    const int version = detail::parse_int<int>(f[1], at);
    if (version != kFingerprintFormatVersion)
      throw ParseError("unsupported fingerprint version " + std::to_string(version) + " (expected " +
                           std::to_string(kFingerprintFormatVersion) + ")",
                       at);
  }
  {
    auto [f, at] = record("spec", 2);
    fp.spec = rethrow_at(at, [&] { return OutputSpec::parse(f[1]); });
  }
  {
    auto [f, at] = record("digest", 2);
    fp.reference_digest = rethrow_at(at, [&] { return ModelDigest::from_hex(f[1]); });
  }
  {
    auto [f, at] = record("meta", 2);
    const auto n = detail::parse_int<std::size_t>(f[1], at);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t line_at = r.offset();
      const auto line = r.line();
      const auto sp = line.find(' ');
      if (sp == 0 || sp == std::string_view::npos) throw ParseError("bad meta record", line_at);
      fp.manifest.emplace(std::string(line.substr(0, sp)), std::string(line.substr(sp + 1)));
    }
  }
  std::size_t count = 0;
  {
    auto [f, at] = record("entries", 2);
    count = detail::parse_int<std::size_t>(f[1], at);
    if (count == 0) throw ParseError("fingerprint has no entries", at);
  }
  for (std::size_t i = 0; i < count; ++i) {
    FingerprintEntry e;
    Shape shape;
    {
      auto [f, at] = record("entry", 2);
      for (std::size_t j = 1; j < f.size(); ++j) shape.push_back(detail::parse_int<std::size_t>(f[j], at));
      for (auto d : shape)
        if (d == 0) throw ParseError("zero dimension in entry shape", at);
    }
    {
      const std::size_t at = r.offset();
      const auto line = r.line();
      if (!line.starts_with("expect ")) throw ParseError("expected 'expect' record", at);
      e.expected = rethrow_at(at, [&] { return observed_from_text(line.substr(7), fp.spec); });
    }
    std::size_t nbytes = 0;
    {
      auto [f, at] = record("data", 2);
      nbytes = detail::parse_int<std::size_t>(f[1], at);
      if (nbytes != numel(shape) * 4) throw ParseError("data size does not match entry shape", at);
    }
    const std::size_t data_at = r.offset();
    const auto data = r.bytes(nbytes);
    std::vector<float> values(nbytes / 4);
    for (std::size_t j = 0; j < values.size(); ++j) values[j] = detail::get_f32_le(data, j * 4);
    e.input = Tensor(std::move(shape), std::move(values));
    if (!e.input.all_finite()) throw ParseError("non-finite input value", data_at);
    if (r.bytes(1) != "\n") throw ParseError("missing newline after entry data", r.offset() - 1);
    fp.entries.push_back(std::move(e));
  }
  {
    const std::size_t at = r.offset();
    if (r.line() != "end") throw ParseError("expected 'end'", at);
    if (!r.at_end()) throw ParseError("trailing bytes after 'end'", r.offset());
  }
  return fp;
}

inline void save_fingerprint(const Fingerprint& fp, const std::filesystem::path& path) {
  detail::write_file_atomic(path, serialize_fingerprint(fp));
}

inline Fingerprint load_fingerprint(const std::filesystem::path& path) {
  return parse_fingerprint(detail::read_file(path));
}

}  // namespace ssfp
