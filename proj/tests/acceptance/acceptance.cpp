// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>

#include "../unit/helpers.hpp"
#include "curve_checks.hpp"

using namespace ssfp;
using ssfp::checks::Verdict;
using ssfp::testing::random_input;

namespace {

using Clock = std::chrono::steady_clock;

const char* kSpecs[] = {"top1", "top2", "top3", "top1-p1", "top1-p3", "top3-p2", "p1", "p2", "p4"};

Model random_model(Rng& rng, std::uint64_t seed, Activation act) {
  const std::size_t classes = 3 + rng.below(6);
  if (rng.bernoulli(0.5))
    return ssfp::testing::small_mlp(4 + rng.below(12), 3 + rng.below(10), 3 + rng.below(8), classes, seed, act);
  return ssfp::testing::small_cnn(1 + rng.below(2), 5 + rng.below(4), 5 + rng.below(4), classes, seed, act);
}

OutputSpec random_spec(Rng& rng, std::size_t classes) {
  for (;;) {
    auto s = OutputSpec::parse(kSpecs[rng.below(std::size(kSpecs))]);
    if (!s.has_labels() || static_cast<std::size_t>(s.k) <= classes) return s;
  }
}

std::vector<Tensor> random_inputs(Rng& rng, const Shape& shape, std::size_t n) {
  std::vector<Tensor> xs;
  for (std::size_t i = 0; i < n; ++i) xs.push_back(random_input(shape, rng.next()));
  return xs;
}

ServeConfig serve_config(const OutputSpec& spec) {
  ServeConfig c;
  c.spec = spec;
  return c;
}

Verdict gradient_correctness() {
  Verdict v;
  Rng rng(101);
  double worst_grad = 0, worst_s = 0;
  for (int t = 0; t < 100; ++t) {
    // Smooth activations: central differences are meaningless across ReLU kinks.
    const Model m = random_model(rng, 1000 + t, Activation::Sigmoid);
    const Tensor x = random_input(m.input_shape(), rng.next());
    const auto sel = ParamSelector::last_layer(m, rng.bernoulli(0.7));
    const auto sv = sensitivity(m, x, sel);
    const auto fd = fd_grad_x(m, x, sel, 1e-3);
    for (std::size_t i = 0; i < fd.size(); ++i) {
      const double err = std::fabs(static_cast<double>(sv.grad_x[i]) - fd[i]);
      const double tol = std::max(1e-3 * std::fabs(static_cast<double>(fd[i])), 1e-6);
      worst_grad = std::max(worst_grad, err / tol);
      if (err > tol)
        v.fail("case " + std::to_string(t) + " coord " + std::to_string(i) + ": grad " + std::to_string(sv.grad_x[i]) +
               " fd " + std::to_string(fd[i]));
    }
    const double fs = fd_sensitivity(m, x, sel, 1e-3);
    const double rel = std::fabs(fs - sv.s) / sv.s;
    worst_s = std::max(worst_s, rel);
    if (rel > 1e-4) v.fail("case " + std::to_string(t) + ": S " + std::to_string(sv.s) + " fd " + std::to_string(fs));
  }
  std::printf("      worst grad err/tol %.2e, worst S rel err %.2e\n", worst_grad, worst_s);
  return v;
}

Verdict zero_false_positives() {
  Verdict v;
  Rng rng(202);
  std::size_t local_runs = 0, wire_runs = 0, detections = 0;
  for (int g = 0; g < 100; ++g) {
    const Model m = random_model(rng, 2000 + g, rng.bernoulli(0.5) ? Activation::ReLU : Activation::Sigmoid);
    const auto spec = random_spec(rng, m.num_classes());
    ModelServer server(m, serve_config(spec));
    server.start();
    const auto local = local_oracle(m, spec);
    const auto wire = remote_oracle("127.0.0.1", server.port(), spec);
    for (int i = 0; i < 100; ++i) {
      const auto xs = random_inputs(rng, m.input_shape(), 1 + rng.below(10));
      const auto fp = build_fingerprint(m, std::span<const Tensor>(xs), spec);
      detections += verify(fp, local).detected;
      detections += verify(fp, wire).detected;
      ++local_runs;
      ++wire_runs;
    }
  }
  std::printf("      %zu in-process + %zu wire verifications, %zu detections\n", local_runs, wire_runs, detections);
  if (detections != 0) v.fail(std::to_string(detections) + " false positives");
  return v;
}

std::size_t brute_force_best(const std::vector<ActivationPattern>& ps, std::size_t k) {
  std::size_t best = 0;
  for (std::uint32_t mask = 0; mask < (1u << ps.size()); ++mask) {
    if (static_cast<std::size_t>(std::popcount(mask)) != k) continue;
    NeuronSet u(ps.front().active.width());
    for (std::size_t i = 0; i < ps.size(); ++i)
      if (mask >> i & 1u) u |= ps[i].active;
    best = std::max(best, u.count());
  }
  return best;
}

Verdict manc_oracle() {
  Verdict v;
  const std::vector<ActivationPattern> hand{{0, NeuronSet::of(6, {1, 2, 3})},
                                            {1, NeuronSet::of(6, {3, 4})},
                                            {2, NeuronSet::of(6, {5})}};
  if (manc_select(hand, 2).selected != std::vector<std::size_t>{0, 1}) v.fail("hand case did not select [P1,P2]");

  Rng rng(303);
  const double bound = 1.0 - std::exp(-1.0);
  std::size_t instances = 0;
  for (int t = 0; t < 20000; ++t) {
    const std::size_t n = 1 + rng.below(10), width = 1 + rng.below(12);
    const double density = rng.uniform(0.0, 0.8);
    std::vector<ActivationPattern> ps;
    for (std::size_t i = 0; i < n; ++i) {
      NeuronSet s(width);
      for (std::size_t b = 0; b < width; ++b)
        if (rng.bernoulli(density)) s.set(b);
      ps.push_back({i, s});
    }
    for (std::size_t k = 1; k <= n; ++k, ++instances) {
      const std::size_t got = manc_select(ps, k).anc.count();
      const std::size_t opt = brute_force_best(ps, k);
      if (static_cast<double>(got) < bound * static_cast<double>(opt))
        v.fail("instance " + std::to_string(t) + " k=" + std::to_string(k) + ": greedy " + std::to_string(got) +
               " vs optimum " + std::to_string(opt));
    }
  }
  std::printf("      %zu random instances\n", instances);
  return v;
}

Verdict wire_conformance() {
  Verdict v;
  Rng rng(909);
  std::size_t triples = 0;
  for (int g = 0; g < 100; ++g) {
    const Model m = random_model(rng, 9000 + g, rng.bernoulli(0.5) ? Activation::ReLU : Activation::Sigmoid);
    const auto spec = random_spec(rng, m.num_classes());
    ModelServer server(m, serve_config(spec));
    server.start();
    RemoteModel remote("127.0.0.1", server.port(), spec);
    for (const auto& x : random_inputs(rng, m.input_shape(), 10)) {
      ++triples;
      const auto want = apply_output_spec(predict_probs(m, x), spec);
      const auto got = remote.predict(x);
      if (!(got == want))
        v.fail("model " + std::to_string(g) + " spec " + spec.to_string() + ": wire " + to_text(got) + " vs local " +
               to_text(want));
    }
  }
  std::printf("      %zu (model, spec, input) triples\n", triples);
  return v;
}

int failures = 0;

void report(int id, const char* title, double limit_s, const std::function<Verdict()>& run) {
  const auto t0 = Clock::now();
  Verdict v;
  try {
    v = run();
  } catch (const std::exception& e) {
    v.fail(std::string("exception: ") + e.what());
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  if (limit_s > 0 && secs > limit_s) v.fail("runtime " + std::to_string(secs) + " s over limit");
  std::printf("%s C%d %s (%.1f s)\n", v.pass ? "PASS" : "FAIL", id, title, secs);
  for (const auto& f : v.failures) std::printf("      %s\n", f.c_str());
  std::fflush(stdout);
  failures += !v.pass;
}

}  // namespace

int main() {
  report(1, "gradient correctness", 60, gradient_correctness);
  report(2, "zero false positives", 120, zero_false_positives);
  report(3, "MANC oracle equivalence", 10, manc_oracle);

  DetectionCurve curve;
  bool reproducible = false;
  double bench_secs = 0;
  std::string bench_error;
  try {
    const auto manifest = load_manifest(ssfp::testing::desk_manifest_path());
    const auto t0 = Clock::now();
    curve = run_experiment(manifest);
    bench_secs = std::chrono::duration<double>(Clock::now() - t0).count();
    const auto again = run_experiment(manifest);
    reproducible = curve_to_csv(curve) == curve_to_csv(again) && curve_to_json(curve).dump() == curve_to_json(again).dump();
    write_reports(curve, "acceptance-report");
    for (const auto& f : curve.fixtures)
      std::printf("      fixture %s: held-out acc %.3f, mean S %.3g -> %.3g, SNR %.1f dB\n", f.name.c_str(),
                  f.held_out_accuracy, f.mean_s_origin, f.mean_s_final, f.mean_snr_db);
  } catch (const std::exception& e) {
    bench_error = e.what();
  }
  auto from_curve = [&](auto check) {
    return [&, check] {
      if (!bench_error.empty()) {
        Verdict v;
        v.fail("desk experiment failed: " + bench_error);
        return v;
      }
      Verdict v = check(curve);
      if (bench_secs > 600) v.fail("desk experiment took " + std::to_string(bench_secs) + " s");
      return v;
    };
  };
  std::printf("      desk experiment %.1f s\n", bench_secs);
  report(4, "weight-noise trend", 0, from_curve(checks::weight_noise_trend));
  report(5, "compression detection", 0, from_curve(checks::compression));
  report(6, "trojan/poison detection", 0, from_curve(checks::trojan_poison));
  report(7, "selection/baseline ordering", 0, from_curve([&](const DetectionCurve& c) {
           Verdict v = checks::selection_ordering(c);
           if (!reproducible) v.fail("two runs of the manifest differ");
           return v;
         }));
  report(8, "output-spec monotonicity", 0, from_curve(checks::topk_monotone));
  report(9, "wire conformance", 0, wire_conformance);
  return failures == 0 ? 0 : 1;
}
