#pragma once

/**
 * Toy logits/reward service for integration tests and demos.
 *
 * Wraps immutable tabular models behind the wire protocol documented in
 * remote.hpp. Every response is a pure function of (model_label, context),
 * requests share no mutable state, and floats are serialized with full
 * round-trip precision (shortest-representation JSON), so a remote query
 * reproduces the in-process table bit for bit.
 */

#include "aad/common.hpp"
#include "aad/rewards.hpp"
#include "aad/tabular.hpp"

#include <httplib.h>
#include <json.hpp>

#include <map>
#include <optional>
#include <string>
#include <thread>

namespace aad::models {

class ToyServer {
 public:
  ToyServer() = default;
  ~ToyServer() { stop(); }

  ToyServer(const ToyServer&) = delete;
  ToyServer& operator=(const ToyServer&) = delete;

  /// Must be called before start(); tables are immutable once serving.
  void add_model(const std::string& label, TabularModel model) {
    models_[label] = std::move(model);
  }

  void set_reward(rewards::TabularReward reward) { reward_ = std::move(reward); }

  /// Binds and serves on a background thread. port 0 picks a free port;
  /// port() reports the bound one. Throws BindFailure if the address is taken.
  void start(const std::string& host, int port) {
    install_routes();
    // No SO_REUSEPORT: two servers on one port should fail, not load-balance.
    server_.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes),
                 sizeof(yes));
    });
    if (port == 0) {
      port_ = server_.bind_to_any_port(host);
      if (port_ < 0) throw BindFailure("cannot bind " + host + " on any port");
    } else {
      if (!server_.bind_to_port(host, port)) {
        throw BindFailure("cannot bind " + host + ":" + std::to_string(port));
      }
      port_ = port;
    }
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  int port() const { return port_; }

  void stop() {
    if (thread_.joinable()) {
      server_.stop();
      thread_.join();
    }
  }

 private:
  void install_routes() {
    server_.Post("/v1/logprobs", [this](const httplib::Request& req, httplib::Response& res) {
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::exception&) {
        return fail(res, 400, "body is not valid JSON");
      }
      if (!body.is_object() || !body.contains("model") || !body.at("model").is_string() ||
          !body.contains("context") || !body.at("context").is_array()) {
        return fail(res, 400, "body must be {\"model\": string, \"context\": [int]}");
      }
      const auto label = body.at("model").get<std::string>();
      auto it = models_.find(label);
      if (it == models_.end()) return fail(res, 404, "unknown model label '" + label + "'");
      const TabularModel& model = it->second;
      TokenSeq context;
      for (const auto& v : body.at("context")) {
        if (!v.is_number_integer()) return fail(res, 400, "context entries must be integers");
        const Token t = v.get<Token>();
        if (t < 0 || t >= model.vocab_size()) {
          return fail(res, 400, "context token " + std::to_string(t) + " out of range");
        }
        context.push_back(t);
      }
      const core::TokenDistribution dist = model.next_distribution(context);
      nlohmann::json out;
      out["logprobs"] = dist.logprobs;
      res.set_content(out.dump(), "application/json");
    });

    server_.Post("/v1/reward", [this](const httplib::Request& req, httplib::Response& res) {
      if (!reward_) return fail(res, 404, "no reward source mounted");
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::exception&) {
        return fail(res, 400, "body is not valid JSON");
      }
      if (!body.is_object() || !body.contains("prompt") || !body.at("prompt").is_array() ||
          !body.contains("completion") || !body.at("completion").is_array()) {
        return fail(res, 400, "body must be {\"prompt\": [int], \"completion\": [int]}");
      }
      TokenSeq prompt, completion;
      try {
        for (const auto& v : body.at("prompt")) prompt.push_back(v.get<Token>());
        for (const auto& v : body.at("completion")) completion.push_back(v.get<Token>());
      } catch (const nlohmann::json::exception&) {
        return fail(res, 400, "token ids must be integers");
      }
      nlohmann::json out;
      try {
        out["reward"] = reward_->score(prompt, completion);
      } catch (const Error& e) {
        return fail(res, 400, e.what());
      }
      res.set_content(out.dump(), "application/json");
    });

    server_.Get("/v1/meta", [this](const httplib::Request&, httplib::Response& res) {
      nlohmann::json out;
      nlohmann::json models = nlohmann::json::object();
      for (const auto& [label, model] : models_) {
        models[label] = {{"vocab_size", model.vocab_size()},
                         {"eos_ids", std::vector<Token>(model.eos_ids().begin(),
                                                        model.eos_ids().end())}};
      }
      out["models"] = std::move(models);
      out["reward"] = reward_.has_value();
      res.set_content(out.dump(), "application/json");
    });
  }

  static void fail(httplib::Response& res, int status, const std::string& message) {
    res.status = status;
    nlohmann::json out;
    out["error"] = message;
    res.set_content(out.dump(), "application/json");
  }

  httplib::Server server_;
  std::thread thread_;
  std::map<std::string, TabularModel> models_;
  std::optional<rewards::TabularReward> reward_;
  int port_ = -1;
};

/// Serves an aligned/reference model pair under the labels "dpo" and "sft".
/// Returns the running server; it stops when the handle is destroyed.
inline std::unique_ptr<ToyServer> serve_toy(TabularModel dpo_model, TabularModel sft_model,
                                            const std::string& host, int port) {
  require_compatible(dpo_model, sft_model);
  auto server = std::make_unique<ToyServer>();
  server->add_model("dpo", std::move(dpo_model));
  server->add_model("sft", std::move(sft_model));
  server->start(host, port);
  return server;
}

}  // namespace aad::models
