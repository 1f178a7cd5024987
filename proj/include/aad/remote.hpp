#pragma once

/**
 * Remote token-distribution and reward sources over the JSON wire protocol:
 *
 *   POST /v1/logprobs  {"model": string, "context": [int]}
 *                   -> {"logprobs": [float]}
 *   POST /v1/reward    {"prompt": [int], "completion": [int]}
 *                   -> {"reward": float}
 *   GET  /v1/meta      -> {"models": {label: {"vocab_size": int, "eos_ids": [int]}},
 *                          "reward": bool}
 *
 * The client keeps a small connection pool (size configurable) so sources can
 * be queried concurrently from multiple threads. Transport failures are
 * retried; responses that parse but violate the declared vocab size or the
 * 1e-4 normalization gate are rejected as malformed rather than repaired,
 * so a server that corrupts probabilities cannot silently corrupt nu.
 */

#include "aad/common.hpp"
#include "aad/core.hpp"

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

namespace aad::models {

struct RemoteConfig {
  std::string base_url;     // e.g. "http://127.0.0.1:8080"
  std::string model_label;  // label registered on the server
  int vocab_size = 0;
  std::set<Token> eos_ids;
  int pool_size = 4;
  int max_attempts = 3;
  int retry_delay_ms = 25;
  double timeout_s = 5.0;
};

namespace detail {

class ClientPool {
 public:
  ClientPool(std::string base_url, int capacity, double timeout_s)
      : base_url_(std::move(base_url)),
        capacity_(capacity < 1 ? 1 : capacity),
        timeout_s_(timeout_s) {}

  template <typename F>
  auto with_client(F&& fn) {
    std::unique_ptr<httplib::Client> client = acquire();
    struct Return {
      ClientPool* pool;
      std::unique_ptr<httplib::Client>* client;
      ~Return() { pool->release(std::move(*client)); }
    } giveback{this, &client};
    return fn(*client);
  }

 private:
  std::unique_ptr<httplib::Client> acquire() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !idle_.empty() || created_ < capacity_; });
    if (!idle_.empty()) {
      auto c = std::move(idle_.back());
      idle_.pop_back();
      return c;
    }
    ++created_;
    lock.unlock();
    auto c = std::make_unique<httplib::Client>(base_url_);
    const auto usec = std::chrono::microseconds(static_cast<long long>(timeout_s_ * 1e6));
    c->set_connection_timeout(usec);
    c->set_read_timeout(usec);
    c->set_write_timeout(usec);
    return c;
  }

  void release(std::unique_ptr<httplib::Client> c) {
    {
      std::lock_guard lock(mu_);
      idle_.push_back(std::move(c));
    }
    cv_.notify_one();
  }

  std::string base_url_;
  int capacity_;
  double timeout_s_;
  int created_ = 0;
  std::vector<std::unique_ptr<httplib::Client>> idle_;
  std::mutex mu_;
  std::condition_variable cv_;
};

/// POST with transport retries. Non-2xx statuses are not retried: the server
/// answered, it just refused.
inline nlohmann::json post_json(ClientPool& pool, const RemoteConfig& cfg,
                                const std::string& path, const nlohmann::json& body) {
  std::string last_error;
  for (int attempt = 1; attempt <= cfg.max_attempts; ++attempt) {
    httplib::Result res = pool.with_client([&](httplib::Client& cli) {
      return cli.Post(path, body.dump(), "application/json");
    });
    if (!res) {
      last_error = httplib::to_string(res.error());
      if (attempt < cfg.max_attempts) {
        std::this_thread::sleep_for(std::chrono::milliseconds(cfg.retry_delay_ms));
      }
      continue;
    }
    if (res->status != 200) {
      throw BackendUnavailable(cfg.base_url + path + " returned HTTP " +
                                   std::to_string(res->status) + ": " + res->body,
                               attempt);
    }
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw MalformedResponse(cfg.base_url + path + ": response is not JSON: " + e.what());
    }
  }
  throw BackendUnavailable(cfg.base_url + path + " unreachable after " +
                               std::to_string(cfg.max_attempts) + " attempts (" + last_error +
                               ")",
                           cfg.max_attempts);
}

}  // namespace detail

/// Token-distribution source backed by a logprobs service.
class RemoteSource {
 public:
  explicit RemoteSource(RemoteConfig cfg)
      : cfg_(std::move(cfg)),
        pool_(std::make_shared<detail::ClientPool>(cfg_.base_url, cfg_.pool_size,
                                                   cfg_.timeout_s)) {
    if (cfg_.vocab_size < 2) throw Error("RemoteSource: vocab_size must be >= 2");
    for (Token t : cfg_.eos_ids) {
      if (t < 0 || t >= cfg_.vocab_size) {
        throw Error("RemoteSource: eos id " + std::to_string(t) + " out of range");
      }
    }
  }

  int vocab_size() const { return cfg_.vocab_size; }
  const std::set<Token>& eos_ids() const { return cfg_.eos_ids; }
  const RemoteConfig& config() const { return cfg_; }

  core::TokenDistribution next_distribution(std::span<const Token> context) const {
    nlohmann::json body;
    body["model"] = cfg_.model_label;
    body["context"] = std::vector<Token>(context.begin(), context.end());
    const nlohmann::json resp = detail::post_json(*pool_, cfg_, "/v1/logprobs", body);
    if (!resp.is_object() || !resp.contains("logprobs") || !resp.at("logprobs").is_array()) {
      throw MalformedResponse("logprobs response missing 'logprobs' array");
    }
    const auto& arr = resp.at("logprobs");
    if (static_cast<int>(arr.size()) != cfg_.vocab_size) {
      throw MalformedResponse("logprobs response has length " + std::to_string(arr.size()) +
                              ", declared vocab is " + std::to_string(cfg_.vocab_size));
    }
    core::TokenDistribution dist;
    dist.logprobs.reserve(arr.size());
    double sum = 0.0;
    for (const auto& v : arr) {
      const double lp = v.is_null() ? kNegInf : v.get<double>();
      dist.logprobs.push_back(lp);
      sum += std::exp(lp);
    }
    if (std::abs(sum - 1.0) > 1e-4) {
      throw MalformedResponse("logprobs response normalizes to " + std::to_string(sum) +
                              ", outside the 1e-4 gate");
    }
    return dist;
  }

 private:
  RemoteConfig cfg_;
  std::shared_ptr<detail::ClientPool> pool_;  // shared so copies reuse connections
};

/// Reward source backed by a reward service.
class RemoteReward {
 public:
  explicit RemoteReward(RemoteConfig cfg)
      : cfg_(std::move(cfg)),
        pool_(std::make_shared<detail::ClientPool>(cfg_.base_url, cfg_.pool_size,
                                                   cfg_.timeout_s)) {}

  double score(std::span<const Token> prompt, std::span<const Token> completion) const {
    nlohmann::json body;
    body["prompt"] = std::vector<Token>(prompt.begin(), prompt.end());
    body["completion"] = std::vector<Token>(completion.begin(), completion.end());
    const nlohmann::json resp = detail::post_json(*pool_, cfg_, "/v1/reward", body);
    if (!resp.is_object() || !resp.contains("reward") || !resp.at("reward").is_number()) {
      throw MalformedResponse("reward response missing numeric 'reward'");
    }
    return resp.at("reward").get<double>();
  }

 private:
  RemoteConfig cfg_;
  std::shared_ptr<detail::ClientPool> pool_;
};

/// Fills vocab_size/eos_ids of a remote config from the server's /v1/meta.
inline RemoteConfig discover_remote(const std::string& base_url, const std::string& label,
                                    int pool_size = 4) {
  RemoteConfig cfg;
  cfg.base_url = base_url;
  cfg.model_label = label;
  cfg.pool_size = pool_size;
  detail::ClientPool pool(base_url, 1, cfg.timeout_s);
  httplib::Result res =
      pool.with_client([&](httplib::Client& cli) { return cli.Get("/v1/meta"); });
  if (!res) {
    throw BackendUnavailable(base_url + "/v1/meta unreachable (" +
                                 httplib::to_string(res.error()) + ")",
                             1);
  }
  if (res->status != 200) {
    throw BackendUnavailable(base_url + "/v1/meta returned HTTP " +
                                 std::to_string(res->status),
                             1);
  }
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    throw MalformedResponse(std::string("meta response is not JSON: ") + e.what());
  }
  if (!meta.contains("models") || !meta.at("models").contains(label)) {
    throw Error("server does not expose a model labeled '" + label + "'");
  }
  const auto& m = meta.at("models").at(label);
  cfg.vocab_size = m.at("vocab_size").get<int>();
  for (const auto& v : m.value("eos_ids", std::vector<Token>{})) cfg.eos_ids.insert(v);
  return cfg;
}

}  // namespace aad::models
