#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "ssfp/error.hpp"
#include "ssfp/fingerprint.hpp"
#include "ssfp/model_io.hpp"
#include "ssfp/nn.hpp"

namespace ssfp {

struct ServeConfig {
  std::string host = "127.0.0.1";
  int port = 0;  // 0 picks a free port
  OutputSpec spec;
  std::filesystem::path model_path;
  std::size_t max_request_inputs = 16;
  /// GET /healthz reports the model digest only when set.
  bool expose_digest = false;
  std::optional<std::filesystem::path> log_path;
};

/// {"labels":[...]} and/or {"probs":["0.61", ...]}
inline nlohmann::json output_to_json(const ObservedOutput& o, const OutputSpec& spec) {
  nlohmann::json j = nlohmann::json::object();
  if (spec.has_labels()) j["labels"] = o.labels;
  if (spec.has_probs()) {
    auto arr = nlohmann::json::array();
    for (auto p : o.probs) arr.push_back(fixed_to_string(p, spec.decimals));
    j["probs"] = std::move(arr);
  }
  return j;
}

/// Strict inverse of output_to_json: exactly the fields the spec defines.
inline ObservedOutput output_from_json(const nlohmann::json& j, const OutputSpec& spec) {
  if (!j.is_object()) throw ParseError("output is not an object", 0);
  const std::size_t want = (spec.has_labels() ? 1 : 0) + (spec.has_probs() ? 1 : 0);
  if (j.size() != want) throw ParseError("output fields do not match spec " + spec.to_string(), 0);
  ObservedOutput o;
  if (spec.has_labels()) {
    const auto it = j.find("labels");
    if (it == j.end() || !it->is_array()) throw ParseError("missing labels", 0);
    for (const auto& l : *it) {
      if (!l.is_number_integer()) throw ParseError("non-integer label", 0);
      o.labels.push_back(l.get<int>());
    }
  }
  if (spec.has_probs()) {
    const auto it = j.find("probs");
    if (it == j.end() || !it->is_array()) throw ParseError("missing probs", 0);
    o.decimals = spec.decimals;
    for (const auto& p : *it) {
      if (!p.is_string()) throw ParseError("probability is not a string", 0);
      o.probs.push_back(fixed_from_string(p.get<std::string>(), spec.decimals));
    }
  }
  return o;
}

/// Black-box prediction endpoint: POST /predict and GET /healthz.
class ModelServer {
 public:
  ModelServer(Model model, ServeConfig cfg) : model_(std::move(model)), cfg_(std::move(cfg)) {
    cfg_.spec.validate(model_.num_classes());
    if (cfg_.max_request_inputs == 0) throw InvalidInput("max_request_inputs must be >= 1");
    digest_ = digest(model_);
    if (cfg_.log_path) {
      log_.open(*cfg_.log_path, std::ios::app);
      if (!log_) throw Error("cannot open log file " + cfg_.log_path->string());
    }
    http_.set_tcp_nodelay(true);
    http_.set_keep_alive_max_count(1000);
    routes();
  }

  static std::unique_ptr<ModelServer> from_config(const ServeConfig& cfg) {
    return std::make_unique<ModelServer>(load_model(cfg.model_path), cfg);
  }

  ModelServer(const ModelServer&) = delete;
  ModelServer& operator=(const ModelServer&) = delete;
  ~ModelServer() { stop(); }

  /// Binds and starts answering on a background thread.
  void start() {
    if (thread_.joinable()) return;
    if (cfg_.port == 0) {
      port_ = http_.bind_to_any_port(cfg_.host);
    } else {
      port_ = http_.bind_to_port(cfg_.host, cfg_.port) ? cfg_.port : -1;
    }
    if (port_ <= 0) throw Error("cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
    thread_ = std::thread([this] { http_.listen_after_bind(); });
    http_.wait_until_ready();
  }

  /// Serves on the calling thread until stop() is called from elsewhere.
  void run() {
    start();
    thread_.join();
  }

  void stop() {
    http_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const noexcept { return port_; }
  const std::string& host() const noexcept { return cfg_.host; }
  const OutputSpec& spec() const noexcept { return cfg_.spec; }

 private:
  void log(const std::string& line) {
    if (!log_.is_open()) return;
    std::lock_guard lock(log_mu_);
    log_ << line << '\n';
    log_.flush();
  }

  void reply(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  void routes() {
    http_.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
      nlohmann::json j{{"status", "ok"}};
      if (cfg_.expose_digest) j["digest"] = digest_.hex();
      reply(res, 200, j);
    });

    http_.Post("/predict", [this](const httplib::Request& req, httplib::Response& res) {
      const auto fail = [&](int status, const char* code, const std::string& detail) {
        log("predict " + std::to_string(status) + " " + code);
        reply(res, status, {{"status", code}, {"detail", detail}});
      };
      const auto body = nlohmann::json::parse(req.body, nullptr, false);
      if (body.is_discarded() || !body.is_object() || !body.contains("inputs") || !body["inputs"].is_array())
        return fail(400, "bad_request", "expected {\"inputs\": [[...], ...]}");
      const auto& inputs = body["inputs"];
      if (inputs.empty()) return fail(400, "bad_request", "no inputs");
      if (inputs.size() > cfg_.max_request_inputs)
        return fail(413, "too_many_inputs", "at most " + std::to_string(cfg_.max_request_inputs) + " inputs");

      const std::size_t m = numel(model_.input_shape());
      std::vector<Tensor> xs;
      for (const auto& row : inputs) {
        if (!row.is_array() || row.size() != m)
          return fail(400, "invalid_shape", "each input needs " + std::to_string(m) + " values");
        std::vector<float> data;
        data.reserve(m);
        for (const auto& v : row) {
          if (!v.is_number()) return fail(400, "bad_request", "non-numeric input value");
          const auto f = static_cast<float>(v.get<double>());
          if (!std::isfinite(f)) return fail(400, "bad_request", "non-finite input value");
          data.push_back(f);
        }
        xs.emplace_back(model_.input_shape(), std::move(data));
      }
      auto outputs = nlohmann::json::array();
      for (const auto& x : xs) outputs.push_back(output_to_json(apply_output_spec(predict_probs(model_, x), cfg_.spec), cfg_.spec));
      log("predict 200 n=" + std::to_string(xs.size()));
      reply(res, 200, {{"outputs", std::move(outputs)}});
    });
  }

  const Model model_;
  ServeConfig cfg_;
  ModelDigest digest_;
  httplib::Server http_;
  std::thread thread_;
  int port_ = -1;
  std::mutex log_mu_;
  std::ofstream log_;
};

/// Client for a /predict endpoint. Holds one keep-alive connection; not
/// safe for concurrent use.
class RemoteModel {
 public:
  RemoteModel(std::string host, int port, OutputSpec spec, std::chrono::milliseconds timeout = std::chrono::seconds(10))
      : spec_(spec), client_(std::make_unique<httplib::Client>(std::move(host), port)) {
    spec_.validate();
    client_->set_keep_alive(true);
    client_->set_tcp_nodelay(true);
    client_->set_connection_timeout(timeout);
    client_->set_read_timeout(timeout);
    client_->set_write_timeout(timeout);
  }

  std::vector<ObservedOutput> predict(std::span<const Tensor> xs) {
    nlohmann::json inputs = nlohmann::json::array();
    for (const auto& x : xs) inputs.push_back(x.data);
    const std::string body = nlohmann::json{{"inputs", std::move(inputs)}}.dump();
    const auto res = client_->Post("/predict", body, "application/json");
    if (!res) throw TransportError("request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) {
      std::string code = "http " + std::to_string(res->status);
      const auto j = nlohmann::json::parse(res->body, nullptr, false);
      if (!j.is_discarded() && j.is_object() && j.contains("status") && j["status"].is_string())
        code += " " + j["status"].get<std::string>();
      throw TransportError("server error: " + code);
    }
    const auto j = nlohmann::json::parse(res->body, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("outputs") || !j["outputs"].is_array() ||
        j["outputs"].size() != xs.size())
      throw TransportError("malformed response");
    std::vector<ObservedOutput> out;
    try {
      for (const auto& o : j["outputs"]) out.push_back(output_from_json(o, spec_));
    } catch (const ParseError& e) {
      throw TransportError(std::string("malformed response: ") + e.what());
    }
    return out;
  }

  ObservedOutput predict(const Tensor& x) { return predict(std::span<const Tensor>(&x, 1)).front(); }

 private:
  OutputSpec spec_;
  std::unique_ptr<httplib::Client> client_;
};

/// Oracle over the wire. Transport failures raise TransportError, which
/// verify() turns into VerificationAborted.
inline Oracle remote_oracle(const std::string& host, int port, const OutputSpec& spec,
                            std::chrono::milliseconds timeout = std::chrono::seconds(10)) {
  auto client = std::make_shared<RemoteModel>(host, port, spec, timeout);
  return [client](const Tensor& x) { return client->predict(x); };
}

}  // namespace ssfp
