#include <doctest.h>

#include <aad/fixtures.hpp>
#include <aad/remote.hpp>
#include <aad/server.hpp>
#include <aad/tabular.hpp>

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

using namespace aad;
using nlohmann::json;

namespace {

const std::string kFixtureDir = AAD_FIXTURE_DIR;

std::string write_temp(const std::string& name, const std::string& body) {
  const auto path = (std::filesystem::temp_directory_path() / name).string();
  std::ofstream out(path);
  out << body;
  return path;
}

}  // namespace

TEST_CASE("load_tabular") {
  SUBCASE("fixture file round-trips") {
    const auto m = models::load_tabular(kFixtureDir + "/sft_4tok.model.json");
    CHECK(m.vocab_size() == 4);
    CHECK(m.context_order == 1);
    CHECK(m.eos_ids() == std::set<Token>{3});
    CHECK(m.log_rows.size() == 4);
  }
  SUBCASE("row that does not normalize is rejected with its context key") {
    const auto path = write_temp(
        "bad_row.model.json",
        R"({"vocab_size":2,"context_order":1,"table":{"1":[0.49,0.49]},"default_row":[0.5,0.5]})");
    try {
      models::load_tabular(path);
      FAIL("expected RowNotNormalized");
    } catch (const RowNotNormalized& e) {
      CHECK(e.context_key == "1");
      CHECK(e.sum == doctest::Approx(0.98));
    }
    std::remove(path.c_str());
  }
  SUBCASE("wrong row length") {
    const auto path = write_temp(
        "bad_len.model.json",
        R"({"vocab_size":3,"context_order":0,"table":{},"default_row":[0.5,0.5]})");
    CHECK_THROWS_AS(models::load_tabular(path), VocabMismatch);
    std::remove(path.c_str());
  }
  SUBCASE("missing file and malformed json") {
    CHECK_THROWS_AS(models::load_tabular("/nonexistent/model.json"), ParseError);
    const auto path = write_temp("garbage.model.json", "not json at all{");
    CHECK_THROWS_AS(models::load_tabular(path), ParseError);
    std::remove(path.c_str());
  }
  SUBCASE("context key longer than the declared order") {
    const auto path = write_temp(
        "long_key.model.json",
        R"({"vocab_size":2,"context_order":1,"table":{"0,1":[0.5,0.5]},"default_row":[0.5,0.5]})");
    CHECK_THROWS_AS(models::load_tabular(path), ParseError);
    std::remove(path.c_str());
  }
}

TEST_CASE("tabular lookup") {
  SUBCASE("order-0 model returns its row for any context") {
    models::TabularModel m;
    m.vocab = 4;
    m.context_order = 0;
    const std::vector<double> row{0.6, 0.3, 0.05, 0.05};
    m.set_default_row(row);
    const auto d1 = m.next_distribution(TokenSeq{});
    const auto d2 = m.next_distribution(TokenSeq{2, 1, 0});
    for (Token t = 0; t < 4; ++t) {
      CHECK(d1.logprobs[static_cast<std::size_t>(t)] == std::log(row[static_cast<std::size_t>(t)]));
      CHECK(d2.logprobs[static_cast<std::size_t>(t)] == d1.logprobs[static_cast<std::size_t>(t)]);
    }
  }
  SUBCASE("unseen context falls back to default_row") {
    const auto m = models::load_tabular(kFixtureDir + "/sft_4tok.model.json");
    // only length-1 keys are tabulated; the empty context is unseen
    const auto d = m.next_distribution(TokenSeq{});
    CHECK(d.logprobs[0] == std::log(0.3));
    CHECK(d.logprobs[1] == std::log(0.6));
  }
  SUBCASE("order-2 model with a one-token context uses the length-1 key when present") {
    const auto doc = json::parse(
        R"({"vocab_size":2,"context_order":2,
            "table":{"0,1":[0.9,0.1],"1":[0.8,0.2]},
            "default_row":[0.5,0.5]})");
    const auto m = models::tabular_from_json(doc, "inline");
    CHECK(m.next_distribution(TokenSeq{1}).logprobs[0] == std::log(0.8));
    // length-1 suffix "0" absent -> default_row
    CHECK(m.next_distribution(TokenSeq{0}).logprobs[0] == std::log(0.5));
    // longest suffix wins over the shorter one
    CHECK(m.next_distribution(TokenSeq{0, 1}).logprobs[0] == std::log(0.9));
    // suffix "0,1" of a longer context
    CHECK(m.next_distribution(TokenSeq{1, 0, 1}).logprobs[0] == std::log(0.9));
    CHECK(m.next_distribution(TokenSeq{1, 1}).logprobs[0] == std::log(0.8));
  }
  SUBCASE("deterministic, bitwise") {
    std::mt19937_64 gen(21);
    const auto m = fixtures::random_model(gen, 5, 1);
    const TokenSeq ctx{3, 1};
    const auto a = m.next_distribution(ctx);
    const auto b = m.next_distribution(ctx);
    CHECK(a.logprobs == b.logprobs);
  }
  SUBCASE("json round trip preserves the model") {
    std::mt19937_64 gen(22);
    const auto m = fixtures::random_model(gen, 4, 1, {3});
    const auto doc = models::tabular_to_json(m);
    const auto back = models::tabular_from_json(doc, "roundtrip");
    CHECK(back.vocab == m.vocab);
    CHECK(back.eos == m.eos);
    for (const auto& [key, row] : m.log_rows) {
      const auto& other = back.log_rows.at(key);
      for (std::size_t i = 0; i < row.size(); ++i) {
        CHECK(other[i] == doctest::Approx(row[i]).epsilon(1e-15));
      }
    }
  }
}

TEST_CASE("role compatibility") {
  std::mt19937_64 gen(7);
  const auto a = fixtures::random_model(gen, 4, 0, {3});
  auto b = fixtures::random_model(gen, 4, 0, {3});
  CHECK_NOTHROW(models::require_compatible(a, b));
  b.eos = {2};
  CHECK_THROWS_AS(models::require_compatible(a, b), Error);
  b.eos = {3};
  b.vocab = 5;
  CHECK_THROWS_AS(models::require_compatible(a, b), VocabMismatch);
}

TEST_CASE("toy server and remote source") {
  std::mt19937_64 gen(31);
  const auto dpo = fixtures::random_model(gen, 5, 1, {4});
  const auto sft = fixtures::random_model(gen, 5, 1, {4});
  rewards::TabularReward reward;
  reward.default_reward = 0.25;
  reward.set(TokenSeq{1}, TokenSeq{2, 4}, 1.5);

  models::ToyServer server;
  server.add_model("dpo", dpo);
  server.add_model("sft", sft);
  server.set_reward(reward);
  server.start("127.0.0.1", 0);
  const std::string base = "http://127.0.0.1:" + std::to_string(server.port());

  SUBCASE("meta discovery") {
    const auto cfg = models::discover_remote(base, "dpo");
    CHECK(cfg.vocab_size == 5);
    CHECK(cfg.eos_ids == std::set<Token>{4});
    CHECK_THROWS_AS(models::discover_remote(base, "nope"), Error);
  }

  SUBCASE("remote equals tabular on random contexts") {
    const models::RemoteSource remote(models::discover_remote(base, "dpo"));
    std::mt19937_64 ctx_gen(77);
    for (int i = 0; i < 100; ++i) {
      const auto ctx = fixtures::random_prompt(ctx_gen, 5, 4);
      const auto via_http = remote.next_distribution(ctx);
      const auto local = dpo.next_distribution(ctx);
      REQUIRE(via_http.vocab_size() == local.vocab_size());
      for (std::size_t t = 0; t < 5; ++t) {
        CHECK(std::abs(via_http.logprobs[t] - local.logprobs[t]) <= 1e-9);
      }
    }
  }

  SUBCASE("remote queries are deterministic") {
    const models::RemoteSource remote(models::discover_remote(base, "sft"));
    const TokenSeq ctx{0, 2};
    const auto a = remote.next_distribution(ctx);
    const auto b = remote.next_distribution(ctx);
    for (std::size_t t = 0; t < 5; ++t) CHECK(std::abs(a.logprobs[t] - b.logprobs[t]) <= 1e-9);
  }

  SUBCASE("remote reward equals the fixture table") {
    models::RemoteConfig cfg;
    cfg.base_url = base;
    const models::RemoteReward rr(cfg);
    CHECK(std::abs(rr.score(TokenSeq{1}, TokenSeq{2, 4}) - 1.5) <= 1e-9);
    CHECK(std::abs(rr.score(TokenSeq{0}, TokenSeq{1}) - 0.25) <= 1e-9);
  }

  SUBCASE("protocol errors") {
    httplib::Client cli(base);
    auto r1 = cli.Post("/v1/logprobs", "this is not json", "application/json");
    REQUIRE(r1);
    CHECK(r1->status == 400);
    auto r2 = cli.Post("/v1/logprobs", R"({"model":"ghost","context":[]})", "application/json");
    REQUIRE(r2);
    CHECK(r2->status == 404);
    auto r3 = cli.Post("/v1/logprobs", R"({"model":"dpo","context":[99]})", "application/json");
    REQUIRE(r3);
    CHECK(r3->status == 400);
    auto r4 = cli.Post("/v1/logprobs", R"({"model":"dpo"})", "application/json");
    REQUIRE(r4);
    CHECK(r4->status == 400);
  }

  SUBCASE("declared vocab mismatch is malformed") {
    auto cfg = models::discover_remote(base, "dpo");
    cfg.vocab_size = 7;  // lie about the vocabulary
    const models::RemoteSource remote(cfg);
    CHECK_THROWS_AS(remote.next_distribution(TokenSeq{}), MalformedResponse);
  }

  SUBCASE("concurrent remote queries agree with the table") {
    const models::RemoteSource remote(models::discover_remote(base, "dpo"));
    std::vector<std::thread> threads;
    std::atomic<int> mismatches{0};
    for (int w = 0; w < 4; ++w) {
      threads.emplace_back([&, w] {
        std::mt19937_64 tg(1000 + static_cast<std::uint64_t>(w));
        for (int i = 0; i < 25; ++i) {
          const auto ctx = fixtures::random_prompt(tg, 5, 3);
          const auto got = remote.next_distribution(ctx);
          const auto want = dpo.next_distribution(ctx);
          for (std::size_t t = 0; t < 5; ++t) {
            if (std::abs(got.logprobs[t] - want.logprobs[t]) > 1e-9) ++mismatches;
          }
        }
      });
    }
    for (auto& t : threads) t.join();
    CHECK(mismatches.load() == 0);
  }

  server.stop();
}

TEST_CASE("serve_toy wraps a model pair under the dpo/sft labels") {
  std::mt19937_64 gen(41);
  const auto dpo = fixtures::random_model(gen, 4, 1, {3});
  const auto sft = fixtures::random_model(gen, 4, 1, {3});
  const auto server = models::serve_toy(dpo, sft, "127.0.0.1", 0);
  const std::string base = "http://127.0.0.1:" + std::to_string(server->port());
  for (const char* label : {"dpo", "sft"}) {
    const models::RemoteSource remote(models::discover_remote(base, label));
    CHECK(remote.vocab_size() == 4);
    const auto got = remote.next_distribution(TokenSeq{2});
    const auto want =
        (std::string(label) == "dpo" ? dpo : sft).next_distribution(TokenSeq{2});
    for (std::size_t t = 0; t < 4; ++t) {
      CHECK(std::abs(got.logprobs[t] - want.logprobs[t]) <= 1e-9);
    }
  }
  std::mt19937_64 gen2(42);
  auto other = fixtures::random_model(gen2, 5, 1, {4});
  CHECK_THROWS_AS(models::serve_toy(other, sft, "127.0.0.1", 0), VocabMismatch);
}

TEST_CASE("remote failure modes") {
  SUBCASE("unreachable backend reports its attempts") {
    models::RemoteConfig cfg;
    cfg.base_url = "http://127.0.0.1:1";  // nothing listens there
    cfg.model_label = "dpo";
    cfg.vocab_size = 4;
    cfg.max_attempts = 2;
    cfg.retry_delay_ms = 1;
    cfg.timeout_s = 0.2;
    const models::RemoteSource remote(cfg);
    try {
      remote.next_distribution(TokenSeq{});
      FAIL("expected BackendUnavailable");
    } catch (const BackendUnavailable& e) {
      CHECK(e.attempts == 2);
    }
  }

  SUBCASE("denormalized and short responses are rejected") {
    httplib::Server bad;
    bad.Post("/v1/logprobs", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"logprobs":[-0.1,-0.1,-0.1,-0.1]})", "application/json");
    });
    const int port = bad.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread th([&] { bad.listen_after_bind(); });
    bad.wait_until_ready();

    models::RemoteConfig cfg;
    cfg.base_url = "http://127.0.0.1:" + std::to_string(port);
    cfg.model_label = "dpo";
    cfg.vocab_size = 4;
    const models::RemoteSource remote(cfg);
    CHECK_THROWS_AS(remote.next_distribution(TokenSeq{}), MalformedResponse);

    cfg.vocab_size = 6;
    const models::RemoteSource remote6(cfg);
    CHECK_THROWS_AS(remote6.next_distribution(TokenSeq{}), MalformedResponse);

    bad.stop();
    th.join();
  }

  SUBCASE("binding a taken port fails") {
    models::ToyServer first;
    std::mt19937_64 gen(5);
    first.add_model("m", fixtures::random_model(gen, 3, 0));
    first.start("127.0.0.1", 0);
    models::ToyServer second;
    second.add_model("m", fixtures::random_model(gen, 3, 0));
    CHECK_THROWS_AS(second.start("127.0.0.1", first.port()), BindFailure);
    first.stop();
  }
}
