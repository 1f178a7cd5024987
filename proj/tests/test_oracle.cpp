#include <doctest.h>

#include <aad/decoding.hpp>
#include <aad/fixtures.hpp>
#include <aad/oracle.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

using namespace aad;

namespace {

// Second, independently written enumerator: breadth-first over lengths,
// probabilities multiplied in probability space, naive left-to-right sums.
template <typename R>
std::map<TokenSeq, double> spreadsheet_policy(const models::TabularModel& sft, const R& reward,
                                              double beta, const TokenSeq& prompt,
                                              int horizon) {
  std::vector<std::pair<TokenSeq, double>> frontier{{TokenSeq{}, 1.0}};
  std::vector<std::pair<TokenSeq, double>> leaves;
  for (int depth = 1; depth <= horizon; ++depth) {
    std::vector<std::pair<TokenSeq, double>> next;
    for (const auto& [seq, p] : frontier) {
      TokenSeq ctx = prompt;
      ctx.insert(ctx.end(), seq.begin(), seq.end());
      const auto dist = sft.next_distribution(ctx);
      for (Token t = 0; t < sft.vocab_size(); ++t) {
        TokenSeq grown = seq;
        grown.push_back(t);
        const double p2 = p * std::exp(dist.logprobs[static_cast<std::size_t>(t)]);
        if (sft.eos_ids().count(t) > 0 || depth == horizon) {
          leaves.emplace_back(std::move(grown), p2);
        } else {
          next.emplace_back(std::move(grown), p2);
        }
      }
    }
    frontier = std::move(next);
  }
  double z = 0.0;
  std::map<TokenSeq, double> weights;
  for (const auto& [seq, p] : leaves) {
    const double w = p * std::exp(reward.score(prompt, seq) / beta);
    weights[seq] = w;
    z += w;
  }
  for (auto& [seq, w] : weights) w /= z;
  return weights;
}

}  // namespace

TEST_CASE("optimal_policy") {
  SUBCASE("zero reward reproduces the reference model") {
    const auto inst = fixtures::random_oracle_instance(3);
    const rewards::FnReward zero{[](auto, auto) { return 0.0; }};
    const auto pol = oracle::optimal_policy(inst.sft, zero, 0.5, inst.prompt, inst.horizon);
    CHECK(pol.partition == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t i = 0; i < pol.completions.size(); ++i) {
      CHECK(pol.probs[i] ==
            doctest::Approx(std::exp(pol.sft_logprobs[i])).epsilon(1e-12));
    }
  }
  SUBCASE("huge beta is KL-dominated and collapses onto the reference model") {
    const auto inst = fixtures::random_oracle_instance(4);
    const auto pol =
        oracle::optimal_policy(inst.sft, inst.reward, 1e6, inst.prompt, inst.horizon);
    double tv = 0.0;
    for (std::size_t i = 0; i < pol.completions.size(); ++i) {
      tv += 0.5 * std::abs(pol.probs[i] - std::exp(pol.sft_logprobs[i]));
    }
    CHECK(tv <= 1e-6);
  }
  SUBCASE("matches an independently written enumerator on a hand-set instance") {
    models::TabularModel sft;
    sft.vocab = 3;
    sft.context_order = 0;
    sft.set_default_row(std::vector<double>{0.5, 0.3, 0.2});
    rewards::TabularReward reward;
    reward.default_reward = 0.0;
    const TokenSeq prompt{};
    reward.set(prompt, TokenSeq{0, 0}, 0.3);
    reward.set(prompt, TokenSeq{0, 1}, -0.2);
    reward.set(prompt, TokenSeq{1, 2}, 0.9);
    reward.set(prompt, TokenSeq{2, 0}, -0.5);
    const double beta = 0.5;

    const auto pol = oracle::optimal_policy(sft, reward, beta, prompt, 2);
    const auto sheet = spreadsheet_policy(sft, reward, beta, prompt, 2);
    REQUIRE(pol.completions.size() == sheet.size());
    REQUIRE(pol.completions.size() == 9);
    for (std::size_t i = 0; i < pol.completions.size(); ++i) {
      const auto it = sheet.find(pol.completions[i]);
      REQUIRE(it != sheet.end());
      CHECK(pol.probs[i] == doctest::Approx(it->second).epsilon(1e-12));
    }
  }
  SUBCASE("matches the independent enumerator on random instances") {
    for (std::uint64_t seed = 10; seed < 20; ++seed) {
      const auto inst = fixtures::random_oracle_instance(seed);
      const auto pol =
          oracle::optimal_policy(inst.sft, inst.reward, 0.25, inst.prompt, inst.horizon);
      const auto sheet =
          spreadsheet_policy(inst.sft, inst.reward, 0.25, inst.prompt, inst.horizon);
      REQUIRE(pol.completions.size() == sheet.size());
      for (std::size_t i = 0; i < pol.completions.size(); ++i) {
        CHECK(pol.probs[i] ==
              doctest::Approx(sheet.at(pol.completions[i])).epsilon(1e-10));
      }
    }
  }
  SUBCASE("probabilities sum to one") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto inst = fixtures::random_oracle_instance(seed);
      const auto pol =
          oracle::optimal_policy(inst.sft, inst.reward, 0.1, inst.prompt, inst.horizon);
      double sum = 0.0;
      for (double p : pol.probs) sum += p;
      CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
  }
  SUBCASE("enumeration bound") {
    std::mt19937_64 gen(2);
    const auto sft = fixtures::random_model(gen, 5, 0);
    const rewards::FnReward zero{[](auto, auto) { return 0.0; }};
    CHECK_THROWS_AS(oracle::optimal_policy(sft, zero, 1.0, TokenSeq{}, 10), ExplosionGuard);
  }
}

namespace {

// Factors an enumerated sequence-level policy back into per-token
// conditionals, tabulated under full-context keys so lookups are exact.
models::TabularModel policy_as_tabular(const oracle::EnumeratedPolicy& pol,
                                       const models::TabularModel& sft,
                                       const TokenSeq& prompt) {
  models::TabularModel m;
  m.vocab = sft.vocab_size();
  m.eos = sft.eos_ids();
  m.context_order = static_cast<int>(prompt.size()) + pol.horizon;

  std::map<TokenSeq, double> mass;
  for (std::size_t i = 0; i < pol.completions.size(); ++i) {
    const auto& y = pol.completions[i];
    for (std::size_t len = 0; len <= y.size(); ++len) {
      mass[TokenSeq(y.begin(), y.begin() + static_cast<long>(len))] += pol.probs[i];
    }
  }
  for (const auto& [prefix, prefix_mass] : mass) {
    const bool complete =
        !prefix.empty() && (sft.eos_ids().count(prefix.back()) > 0 ||
                            static_cast<int>(prefix.size()) >= pol.horizon);
    if (complete) continue;
    std::vector<double> row(static_cast<std::size_t>(m.vocab), 0.0);
    for (Token t = 0; t < m.vocab; ++t) {
      TokenSeq child = prefix;
      child.push_back(t);
      const auto it = mass.find(child);
      if (it != mass.end()) row[static_cast<std::size_t>(t)] = it->second / prefix_mass;
    }
    TokenSeq key = prompt;
    key.insert(key.end(), prefix.begin(), prefix.end());
    m.set_row(key, row);
  }
  m.set_default_row(std::vector<double>(static_cast<std::size_t>(m.vocab),
                                        1.0 / static_cast<double>(m.vocab)));
  return m;
}

}  // namespace

TEST_CASE("implicit reward of the enumerated optimum recovers reward differences") {
  // Build pi* for a reward table, refactor it into an autoregressive toy
  // model, and check that the sequence-level implicit reward against the
  // reference model reproduces every pairwise reward difference.
  for (std::uint64_t seed : {3ULL, 8ULL, 21ULL}) {
    const auto inst = fixtures::random_oracle_instance(seed);
    for (double beta : {0.1, 0.5}) {
      const auto pol =
          oracle::optimal_policy(inst.sft, inst.reward, beta, inst.prompt, inst.horizon);
      const auto pistar = policy_as_tabular(pol, inst.sft, inst.prompt);
      std::vector<double> implicit;
      for (const auto& y : pol.completions) {
        implicit.push_back(
            core::sequence_implicit_reward(pistar, inst.sft, inst.prompt, y, beta));
      }
      double worst = 0.0;
      for (std::size_t i = 0; i < pol.completions.size(); ++i) {
        for (std::size_t j = 0; j < pol.completions.size(); ++j) {
          const double got = implicit[i] - implicit[j];
          const double want = pol.rewards[i] - pol.rewards[j];
          worst = std::max(worst, std::abs(got - want));
        }
      }
      CHECK(worst <= 1e-9);
    }
  }
}

TEST_CASE("verify_reparameterization") {
  SUBCASE("identity holds across beta on random instances") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto inst = fixtures::random_oracle_instance(seed);
      for (double beta : {0.05, 0.1, 5.0}) {
        const double dev = oracle::verify_reparameterization(inst.sft, inst.reward, beta,
                                                             inst.prompt, inst.horizon);
        CHECK(dev <= 1e-9);
      }
    }
  }
  SUBCASE("zero reward lands on zero") {
    const auto inst = fixtures::random_oracle_instance(21);
    const rewards::FnReward zero{[](auto, auto) { return 0.0; }};
    CHECK(oracle::verify_reparameterization(inst.sft, zero, 1.0, inst.prompt, inst.horizon) <=
          1e-12);
  }
}

TEST_CASE("bias_check") {
  SUBCASE("uniform reference cannot invert a positive margin") {
    models::TabularModel sft;
    sft.vocab = 2;
    sft.context_order = 0;
    sft.set_default_row(std::vector<double>{0.5, 0.5});
    rewards::TabularReward reward;
    reward.set(TokenSeq{}, TokenSeq{0}, 0.3);
    reward.set(TokenSeq{}, TokenSeq{1}, 0.0);
    const auto rep = oracle::bias_check(sft, reward, 0.1, TokenSeq{}, TokenSeq{0}, TokenSeq{1});
    CHECK(rep.delta_sft == 0.0);
    CHECK_FALSE(rep.inequality_fired);
    CHECK(rep.pistar_ratio_log > 0.0);
  }
  SUBCASE("shipped inversion fixture fires") {
    const auto inst = fixtures::bias_inversion_instance();
    const auto rep =
        oracle::bias_check(inst.sft, inst.reward, inst.beta, inst.prompt, inst.y1, inst.y2);
    CHECK(rep.delta_sft == doctest::Approx(-2.0).epsilon(1e-12));
    CHECK(rep.delta_r == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(rep.inequality_fired);
    CHECK(rep.pistar_ratio_log < 0.0);  // pi*(y1) < pi*(y2) despite r(y1) > r(y2)
    const double identity =
        rep.pistar_ratio_log - (rep.delta_sft + rep.delta_r / rep.beta);
    CHECK(std::abs(identity) <= 1e-9);
  }
  SUBCASE("milder reference bias does not fire") {
    models::TabularModel sft;
    sft.vocab = 2;
    sft.context_order = 0;
    const double a = 1.0 / (1.0 + std::exp(0.5));  // log(a/b) = -0.5
    sft.set_default_row(std::vector<double>{a, 1.0 - a});
    rewards::TabularReward reward;
    reward.set(TokenSeq{}, TokenSeq{0}, 0.1);
    reward.set(TokenSeq{}, TokenSeq{1}, 0.0);
    const auto rep = oracle::bias_check(sft, reward, 0.1, TokenSeq{}, TokenSeq{0}, TokenSeq{1});
    CHECK(rep.delta_sft == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK_FALSE(rep.inequality_fired);
    CHECK(rep.pistar_ratio_log > 0.0);
  }
  SUBCASE("decomposition identity holds on random instances") {
    for (std::uint64_t seed = 30; seed < 45; ++seed) {
      const auto inst = fixtures::random_oracle_instance(seed);
      const auto pol =
          oracle::optimal_policy(inst.sft, inst.reward, 0.2, inst.prompt, inst.horizon);
      // pick the two extreme-reward completions of equal length
      std::size_t hi = 0, lo = 0;
      for (std::size_t i = 1; i < pol.completions.size(); ++i) {
        if (pol.rewards[i] > pol.rewards[hi]) hi = i;
        if (pol.rewards[i] < pol.rewards[lo]) lo = i;
      }
      if (hi == lo) continue;
      const auto rep = oracle::bias_check(inst.sft, inst.reward, 0.2, inst.prompt,
                                          pol.completions[hi], pol.completions[lo]);
      CHECK(std::abs(rep.pistar_ratio_log - (rep.delta_sft + rep.delta_r / rep.beta)) <= 1e-9);
    }
  }
  SUBCASE("violated precondition") {
    const auto inst = fixtures::bias_inversion_instance();
    CHECK_THROWS_AS(
        oracle::bias_check(inst.sft, inst.reward, 0.1, inst.prompt, inst.y2, inst.y1), Error);
  }
  SUBCASE("completion outside the support") {
    const auto inst = fixtures::bias_inversion_instance();
    CHECK_THROWS_AS(oracle::bias_check(inst.sft, inst.reward, 0.1, inst.prompt, TokenSeq{0, 1},
                                       TokenSeq{1}),
                    Error);
  }
}

TEST_CASE("global_nu_argmax") {
  SUBCASE("identical models tie everywhere; lexicographically-first wins") {
    std::mt19937_64 gen(6);
    const auto m = fixtures::random_model(gen, 4, 1);
    const auto res = oracle::global_nu_argmax(m, m, TokenSeq{}, 0.05, 3);
    CHECK(res.score == 0.0);
    CHECK(res.tokens == TokenSeq{0, 0, 0});
  }
  SUBCASE("greedy is strictly below the enumerator on the trap instance") {
    const auto trap = fixtures::greedy_trap_instance();
    const auto res =
        oracle::global_nu_argmax(trap.dpo, trap.sft, trap.prompt, trap.alpha, trap.horizon);
    CHECK(res.tokens == TokenSeq{1, 0});
    CHECK(res.score == doctest::Approx(2.128231705849268).epsilon(1e-12));
    decoding::DecodeConfig cfg;
    cfg.alpha = trap.alpha;
    cfg.max_new_tokens = trap.horizon;
    const auto greedy = decoding::decode_aad(trap.dpo, trap.sft, trap.prompt, cfg);
    CHECK(greedy.total_nu < res.score);
  }
  SUBCASE("beam with width covering the feasible set matches the enumerator") {
    const auto trap = fixtures::greedy_trap_instance();
    const auto res =
        oracle::global_nu_argmax(trap.dpo, trap.sft, trap.prompt, trap.alpha, trap.horizon);
    decoding::DecodeConfig cfg;
    cfg.alpha = trap.alpha;
    cfg.max_new_tokens = trap.horizon;
    cfg.beam_width = static_cast<int>(res.feasible_count);
    const auto beam = decoding::decode_aad_beam(trap.dpo, trap.sft, trap.prompt, cfg);
    CHECK(std::abs(beam.total_nu - res.score) <= 1e-9);

    for (std::uint64_t seed = 50; seed < 65; ++seed) {
      const auto p = fixtures::random_pair(seed, 4, 1);
      const auto r = oracle::global_nu_argmax(p.dpo, p.sft, p.prompt, 0.1, 3);
      decoding::DecodeConfig c2;
      c2.alpha = 0.1;
      c2.max_new_tokens = 3;
      c2.eos_ids = p.dpo.eos_ids();
      c2.beam_width = static_cast<int>(r.feasible_count);
      const auto b2 = decoding::decode_aad_beam(p.dpo, p.sft, p.prompt, c2);
      CHECK(std::abs(b2.total_nu - r.score) <= 1e-9);
    }
  }
  SUBCASE("enumeration bound") {
    std::mt19937_64 gen(9);
    const auto m = fixtures::random_model(gen, 6, 0);
    CHECK_THROWS_AS(oracle::global_nu_argmax(m, m, TokenSeq{}, 0.1, 9), ExplosionGuard);
  }
}

TEST_CASE("enumerate_support") {
  SUBCASE("no EOS: exactly vocab^horizon completions") {
    std::mt19937_64 gen(12);
    const auto m = fixtures::random_model(gen, 3, 1);
    CHECK(oracle::enumerate_support(m, TokenSeq{}, 3).size() == 27);
  }
  SUBCASE("EOS-absorbing support is prefix-free and exhaustive") {
    std::mt19937_64 gen(13);
    const auto m = fixtures::random_model(gen, 3, 1, {2});
    const auto support = oracle::enumerate_support(m, TokenSeq{1}, 3);
    for (const auto& a : support) {
      for (const auto& b : support) {
        if (&a == &b) continue;
        // no sequence is a prefix of another
        if (a.size() < b.size()) {
          CHECK_FALSE(std::equal(a.begin(), a.end(), b.begin()));
        }
      }
    }
    const rewards::FnReward zero{[](auto, auto) { return 0.0; }};
    const auto pol = oracle::optimal_policy(m, zero, 1.0, TokenSeq{1}, 3);
    CHECK(pol.partition == doctest::Approx(1.0).epsilon(1e-10));
  }
}
