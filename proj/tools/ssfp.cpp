// ssfp: train fixtures, tamper models, generate and select Sensitive-Samples,
// build and verify fingerprints, serve models and run detection benchmarks.

#include <csignal>
#include <pthread.h>
#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "ssfp/ssfp.hpp"

using namespace ssfp;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitBreach = 2;

struct FixtureRef {
  std::string manifest;
  std::string name;

  Fixture build() const {
    const auto m = load_manifest(manifest);
    return build_fixture(find_fixture(m, name));
  }
};

void add_fixture_opts(CLI::App* cmd, FixtureRef& ref, bool required) {
  auto* a = cmd->add_option("--manifest", ref.manifest, "Experiment manifest holding the fixture")->check(CLI::ExistingFile);
  auto* b = cmd->add_option("--fixture", ref.name, "Fixture section name");
  if (required) {
    a->required();
    b->required();
  }
  b->needs(a);
}

std::pair<std::string, int> parse_endpoint(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos) throw InvalidInput("endpoint must be host:port");
  return {s.substr(0, colon), std::stoi(s.substr(colon + 1))};
}

void write_json(const std::string& path, const nlohmann::json& j) {
  detail::write_file_atomic(path, j.dump(2) + "\n");
}

nlohmann::json read_json(const std::string& path) {
  const auto j = nlohmann::json::parse(detail::read_file(path), nullptr, false);
  if (j.is_discarded()) throw ParseError(path + ": not valid JSON", 0);
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sensitive-Sample fingerprinting toolkit"};
  app.set_version_flag("--version", std::string(kToolkitVersion));
  app.require_subcommand(1);

  // train
  FixtureRef train_fx;
  std::string train_out;
  auto* train = app.add_subcommand("train", "Train a manifest fixture and save the model");
  add_fixture_opts(train, train_fx, true);
  train->add_option("-o,--out", train_out, "Model file to write")->required();

  // attack
  std::string atk_model, atk_text, atk_out;
  FixtureRef atk_fx;
  auto* attack = app.add_subcommand("attack", "Tamper with a model");
  attack->add_option("-m,--model", atk_model, "Reference model")->required()->check(CLI::ExistingFile);
  attack->add_option("-a,--attack", atk_text, "e.g. \"noise r=0.01 sigma=1 seed=3\" or \"quantize bits=8\"")->required();
  attack->add_option("-o,--out", atk_out, "Tampered model file")->required();
  add_fixture_opts(attack, atk_fx, false);

  // gen
  std::string gen_model, gen_out;
  FixtureRef gen_fx;
  std::size_t gen_n = 100;
  GenConfig gen_cfg;
  bool gen_no_bias = false;
  auto* gen = app.add_subcommand("gen", "Generate a bag of Sensitive-Samples from held-out inputs");
  gen->add_option("-m,--model", gen_model, "Reference model")->required()->check(CLI::ExistingFile);
  add_fixture_opts(gen, gen_fx, true);
  gen->add_option("-n,--count", gen_n, "Bag size")->capture_default_str();
  gen->add_option("--lr", gen_cfg.lr)->capture_default_str();
  gen->add_option("--itr-max", gen_cfg.itr_max)->capture_default_str();
  gen->add_option("--epsilon", gen_cfg.epsilon, "Bound on ||v - v0|| / ||v0||")->capture_default_str();
  gen->add_option("--seed", gen_cfg.seed)->capture_default_str();
  gen->add_flag("--no-bias", gen_no_bias, "Exclude the last-layer bias from the sensitivity");
  gen->add_option("-o,--out", gen_out, "Bag file (JSON)")->required();

  // select
  std::string sel_model, sel_bag, sel_method = "manc", sel_out;
  std::size_t sel_k = 10;
  std::uint64_t sel_seed = 0;
  auto* select = app.add_subcommand("select", "Pick fingerprint samples from a bag");
  select->add_option("-m,--model", sel_model, "Reference model")->required()->check(CLI::ExistingFile);
  select->add_option("-b,--bag", sel_bag, "Bag file")->required()->check(CLI::ExistingFile);
  select->add_option("-k", sel_k, "Samples to select")->capture_default_str();
  select->add_option("--method", sel_method)->check(CLI::IsMember({"manc", "random"}))->capture_default_str();
  select->add_option("--seed", sel_seed, "Seed for random selection")->capture_default_str();
  select->add_option("-o,--out", sel_out, "Selection file (JSON); stdout if omitted");

  // fingerprint
  std::string fp_model, fp_bag, fp_select, fp_spec = "top1", fp_out;
  std::size_t fp_k = 10;
  auto* fingerprint = app.add_subcommand("fingerprint", "Build a fingerprint from a bag");
  fingerprint->add_option("-m,--model", fp_model, "Reference model")->required()->check(CLI::ExistingFile);
  fingerprint->add_option("-b,--bag", fp_bag, "Bag file")->required()->check(CLI::ExistingFile);
  fingerprint->add_option("-s,--select", fp_select, "Selection file from `select`; MANC over the bag if omitted")
      ->check(CLI::ExistingFile);
  fingerprint->add_option("-k", fp_k, "Samples when selecting with MANC")->capture_default_str();
  fingerprint->add_option("--spec", fp_spec, "Output spec: topK, topK-pD or pD")->capture_default_str();
  fingerprint->add_option("-o,--out", fp_out, "Fingerprint file")->required();

  // verify
  std::string v_fp, v_model, v_endpoint;
  bool v_early = false;
  int v_timeout_ms = 10000;
  auto* verify_cmd = app.add_subcommand("verify", "Check a model against a fingerprint (exit 2 on breach)");
  verify_cmd->add_option("-f,--fingerprint", v_fp)->required()->check(CLI::ExistingFile);
  auto* vm = verify_cmd->add_option("-m,--model", v_model, "Model file to check")->check(CLI::ExistingFile);
  auto* ve = verify_cmd->add_option("-e,--endpoint", v_endpoint, "host:port of a serving endpoint");
  vm->excludes(ve);
  verify_cmd->add_flag("--early-exit", v_early, "Stop at the first mismatch");
  verify_cmd->add_option("--timeout-ms", v_timeout_ms)->capture_default_str();

  // serve
  ServeConfig srv;
  std::string srv_spec = "top1", srv_model, srv_log;
  auto* serve = app.add_subcommand("serve", "Serve a model over HTTP (POST /predict, GET /healthz)");
  serve->add_option("-m,--model", srv_model)->required()->check(CLI::ExistingFile);
  serve->add_option("--host", srv.host)->capture_default_str();
  serve->add_option("-p,--port", srv.port, "0 picks a free port")->capture_default_str();
  serve->add_option("--spec", srv_spec)->capture_default_str();
  serve->add_option("--max-inputs", srv.max_request_inputs)->capture_default_str();
  serve->add_flag("--expose-digest", srv.expose_digest, "Report the model digest on /healthz");
  serve->add_option("--log", srv_log, "Append one line per request");

  // bench
  std::string b_manifest, b_out;
  std::optional<std::size_t> b_trials;
  std::optional<unsigned> b_threads;
  auto* bench = app.add_subcommand("bench", "Run a detection experiment manifest");
  bench->add_option("manifest", b_manifest)->required()->check(CLI::ExistingFile);
  bench->add_option("-o,--out", b_out, "Report directory")->required();
  bench->add_option("--trials", b_trials, "Override the manifest's trial count");
  bench->add_option("--threads", b_threads, "Override the manifest's thread count");

  // report
  std::string r_curve, r_out;
  auto* report = app.add_subcommand("report", "Convert curve.json into CSV and plot-ready JSON");
  report->add_option("curve", r_curve)->required()->check(CLI::ExistingFile);
  report->add_option("-o,--out", r_out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const auto fx = train_fx.build();
      save_model(fx.model, train_out);
      std::printf("%s  train %.4f  held-out %.4f  %zu params\n", digest(fx.model).hex().c_str(),
                  accuracy(fx.model, fx.train), accuracy(fx.model, fx.held_out), fx.model.parameter_count());
    } else if (*attack) {
      const Model ref = load_model(atk_model);
      const auto cfg = parse_attack(atk_text);
      const bool needs_data = std::holds_alternative<TrojanConfig>(cfg) || std::holds_alternative<PoisonConfig>(cfg);
      if (needs_data && atk_fx.name.empty()) throw InvalidInput("trojan and poison attacks need --manifest/--fixture");
      std::optional<Fixture> fx;
      if (!atk_fx.name.empty()) fx = atk_fx.build();
      const LabeledSet empty;
      const auto out = apply_attack(ref, cfg, fx ? fx->train : empty, fx ? fx->held_out : empty);
      save_model(out.tampered, atk_out);
      nlohmann::json j{{"attack", attack_id(cfg)}, {"digest", digest(out.tampered).hex()},
                       {"metrics", detail::metrics_json(out.metrics)}};
      if (!fx) {
        j["metrics"].erase("accuracy_before");
        j["metrics"].erase("accuracy_after");
      }
      std::cout << j.dump(2) << "\n";
    } else if (*gen) {
      const Model model = load_model(gen_model);
      const auto fx = gen_fx.build();
      const auto sel = ParamSelector::last_layer(model, !gen_no_bias);
      const auto bag = generate_bag(model, sel, std::span<const Tensor>(fx.held_out.inputs), gen_n, gen_cfg);
      write_json(gen_out, bag_to_json(bag, digest(model)));
      double s0 = 0, s1 = 0;
      for (const auto& s : bag) {
        s0 += s.s_origin;
        s1 += s.s_final;
      }
      std::printf("%zu samples  mean S %.4g -> %.4g\n", bag.size(), s0 / bag.size(), s1 / bag.size());
    } else if (*select) {
      const Model model = load_model(sel_model);
      const auto bag = bag_from_json(read_json(sel_bag));
      if (sel_k == 0 || sel_k > bag.size()) throw InvalidInput("k must be in [1, bag size]");
      std::vector<ActivationPattern> patterns;
      for (std::size_t i = 0; i < bag.size(); ++i)
        patterns.push_back(activation_pattern(model, bag[i].v, default_tau(model), i));
      std::vector<std::size_t> chosen;
      if (sel_method == "manc") {
        chosen = manc_select(patterns, sel_k).selected;
      } else {
        chosen = Rng(sel_seed).permutation(bag.size());
        chosen.resize(sel_k);
      }
      NeuronSet cover(model.hidden_size());
      for (auto i : chosen) cover |= patterns[i].active;
      nlohmann::json j{{"method", sel_method},
                       {"selected", chosen},
                       {"covered", cover.count()},
                       {"neurons", model.hidden_size()}};
      if (sel_out.empty())
        std::cout << j.dump(2) << "\n";
      else
        write_json(sel_out, j);
    } else if (*fingerprint) {
      const Model model = load_model(fp_model);
      ModelDigest bag_digest;
      const auto bag = bag_from_json(read_json(fp_bag), &bag_digest);
      if (bag_digest != digest(model)) throw InvalidInput("bag was generated for a different model");
      std::vector<std::size_t> chosen;
      std::string method = "manc";
      if (!fp_select.empty()) {
        const auto j = read_json(fp_select);
        chosen = j.at("selected").get<std::vector<std::size_t>>();
        method = j.value("method", "file");
      } else {
        std::vector<ActivationPattern> patterns;
        for (std::size_t i = 0; i < bag.size(); ++i)
          patterns.push_back(activation_pattern(model, bag[i].v, default_tau(model), i));
        chosen = manc_select(patterns, std::min(fp_k, bag.size())).selected;
      }
      std::vector<Tensor> inputs;
      for (auto i : chosen) {
        if (i >= bag.size()) throw InvalidInput("selection index out of range");
        inputs.push_back(bag[i].v);
      }
      const auto fp = build_fingerprint(model, std::span<const Tensor>(inputs), OutputSpec::parse(fp_spec),
                                        {{"selection", method}, {"toolkit", std::string(kToolkitVersion)}});
      save_fingerprint(fp, fp_out);
      std::printf("%zu entries  spec %s  model %s\n", fp.entries.size(), fp.spec.to_string().c_str(),
                  fp.reference_digest.hex().c_str());
    } else if (*verify_cmd) {
      if (v_model.empty() && v_endpoint.empty()) throw InvalidInput("give --model or --endpoint");
      const auto fp = load_fingerprint(v_fp);
      Oracle oracle;
      if (!v_model.empty()) {
        oracle = local_oracle(load_model(v_model), fp.spec);
      } else {
        const auto [host, port] = parse_endpoint(v_endpoint);
        oracle = remote_oracle(host, port, fp.spec, std::chrono::milliseconds(v_timeout_ms));
      }
      DetectionReport r;
      try {
        r = verify(fp, oracle, VerifyOptions{v_early});
      } catch (const VerificationAborted& e) {
        std::fprintf(stderr, "%s (%zu of %zu samples checked)\n", e.what(), e.partial().per_sample.size(),
                     fp.entries.size());
        return kExitError;
      }
      for (const auto& c : r.per_sample)
        if (!c.match) std::printf("sample %zu: mismatch%s\n", c.index, c.shape_mismatch ? " (shape)" : "");
      std::printf("%s  (%zu queries)\n", r.detected ? "BREACH" : "intact", r.queries_used);
      return r.detected ? kExitBreach : kExitOk;
    } else if (*serve) {
      srv.model_path = srv_model;
      srv.spec = OutputSpec::parse(srv_spec);
      if (!srv_log.empty()) srv.log_path = srv_log;
      // Block the stop signals before any thread exists so only sigwait sees them.
      sigset_t stop_signals;
      sigemptyset(&stop_signals);
      sigaddset(&stop_signals, SIGINT);
      sigaddset(&stop_signals, SIGTERM);
      pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);
      auto server = ModelServer::from_config(srv);
      server->start();
      std::printf("listening on %s:%d\n", srv.host.c_str(), server->port());
      std::fflush(stdout);
      int sig = 0;
      sigwait(&stop_signals, &sig);
      server->stop();
    } else if (*bench) {
      auto m = load_manifest(b_manifest);
      if (b_trials) m.trials = *b_trials;
      if (b_threads) m.threads = *b_threads;
      try {
        const auto curve = run_experiment(m);
        write_reports(curve, b_out);
      } catch (const ExperimentAborted& e) {
        write_reports(e.partial(), b_out);
        throw;
      }
      std::printf("wrote %s/curve.json, curve.csv, plot.json\n", b_out.c_str());
    } else if (*report) {
      const auto curve = curve_from_json(read_json(r_curve));
      std::filesystem::create_directories(r_out);
      detail::write_file_atomic(std::filesystem::path(r_out) / "curve.csv", curve_to_csv(curve));
      detail::write_file_atomic(std::filesystem::path(r_out) / "plot.json", curve_to_plot_json(curve).dump(2) + "\n");
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "ssfp: %s\n", e.what());
    return kExitError;
  }
  return kExitOk;
}
