#pragma once

/**
 * Deterministic synthetic toy instances.
 *
 * Everything is seeded and reproducible. These builders back the self-check
 * suite (`verify`), the test suites, and the shipped demo fixtures:
 *   - random tabular models and reward tables for enumeration checks
 *   - an aligned pair family (uniform reference, tilted aligned model) where
 *     the aligned greedy decoder is optimal by construction
 *   - a low-entropy family where unguarded ratio maximization chases
 *     spuriously scored tokens unless the entropy gate intervenes
 *   - a bias-inversion instance where the KL-constrained optimum prefers the
 *     lower-reward completion
 *   - a two-step trap where stepwise-greedy nu maximization is globally
 *     suboptimal
 */

#include "aad/common.hpp"
#include "aad/core.hpp"
#include "aad/oracle.hpp"
#include "aad/rewards.hpp"
#include "aad/tabular.hpp"

#include <cmath>
#include <random>
#include <vector>

namespace aad::fixtures {

inline std::vector<double> random_row(std::mt19937_64& gen, int vocab, double min_w = 0.05) {
  std::vector<double> w(static_cast<std::size_t>(vocab));
  double sum = 0.0;
  for (double& x : w) {
    x = min_w + (1.0 - min_w) * uniform01(gen);
    sum += x;
  }
  for (double& x : w) x /= sum;
  return w;
}

/// Random model with every context of length exactly `order` tabulated, plus
/// a default row (hit by shorter contexts at sequence start).
inline models::TabularModel random_model(std::mt19937_64& gen, int vocab, int order,
                                         std::set<Token> eos = {}) {
  models::TabularModel m;
  m.vocab = vocab;
  m.context_order = order;
  m.eos = std::move(eos);
  m.set_default_row(random_row(gen, vocab));
  if (order >= 1) {
    TokenSeq ctx(static_cast<std::size_t>(order), 0);
    auto walk = [&](auto&& self, int pos) -> void {
      if (pos == order) {
        m.set_row(ctx, random_row(gen, vocab));
        return;
      }
      for (Token t = 0; t < vocab; ++t) {
        ctx[static_cast<std::size_t>(pos)] = t;
        self(self, pos + 1);
      }
    };
    walk(walk, 0);
  }
  return m;
}

inline TokenSeq random_prompt(std::mt19937_64& gen, int vocab, int max_len) {
  const int len = static_cast<int>(gen() % static_cast<std::uint64_t>(max_len + 1));
  TokenSeq out;
  for (int i = 0; i < len; ++i) {
    out.push_back(static_cast<Token>(gen() % static_cast<std::uint64_t>(vocab)));
  }
  return out;
}

// ============================================================================
// Enumeration-check instances
// ============================================================================

struct OracleInstance {
  models::TabularModel sft;
  rewards::TabularReward reward;
  TokenSeq prompt;
  int horizon = 0;
};

/// Random reference model plus a reward table covering the full truncated
/// support (rewards uniform in [-1, 1]).
inline OracleInstance random_oracle_instance(std::uint64_t seed) {
  std::mt19937_64 gen(splitmix64(seed));
  OracleInstance inst;
  const int vocab = 3 + static_cast<int>(gen() % 3);    // 3..5
  inst.horizon = 2 + static_cast<int>(gen() % 3);       // 2..4
  std::set<Token> eos;
  if (gen() % 2 == 0) eos.insert(static_cast<Token>(vocab - 1));
  inst.sft = random_model(gen, vocab, 1, eos);
  inst.prompt = random_prompt(gen, vocab, 2);
  for (const TokenSeq& y : oracle::enumerate_support(inst.sft, inst.prompt, inst.horizon)) {
    inst.reward.set(inst.prompt, y, 2.0 * uniform01(gen) - 1.0);
  }
  return inst;
}

// ============================================================================
// Decode-check instances
// ============================================================================

struct ModelPair {
  models::TabularModel dpo;
  models::TabularModel sft;
  TokenSeq prompt;
};

/// Independent random aligned/reference pair over a shared token space.
inline ModelPair random_pair(std::uint64_t seed, int max_vocab = 8, int order = 1,
                             bool with_eos = true) {
  std::mt19937_64 gen(splitmix64(seed));
  const int vocab = 2 + static_cast<int>(gen() % static_cast<std::uint64_t>(max_vocab - 1));
  std::set<Token> eos;
  if (with_eos && gen() % 2 == 0) eos.insert(static_cast<Token>(vocab - 1));
  ModelPair p;
  p.dpo = random_model(gen, vocab, order, eos);
  p.sft = random_model(gen, vocab, order, eos);
  p.prompt = random_prompt(gen, vocab, 2);
  return p;
}

/// Aligned family: exactly uniform reference rows and an aligned model tilted
/// toward one "good" token per previous token, so nu ranks tokens exactly as
/// the aligned model does and the aligned greedy decoder attains the highest
/// per-step reward. good(prev) is never token 0, so plain reference-greedy
/// (which ties to token 0 on uniform rows) is strictly worse on every prompt.
struct AlignedInstance {
  models::TabularModel dpo;
  models::TabularModel sft;
  std::vector<Token> good;  // good[prev]; good[vocab] for the empty context
  int vocab = 0;

  /// Oracle score: number of steps that picked the good token.
  rewards::FnReward oracle_reward() const {
    return rewards::FnReward{[*this](std::span<const Token> prompt,
                                     std::span<const Token> completion) {
      double score = 0.0;
      Token prev = prompt.empty() ? static_cast<Token>(vocab) : prompt.back();
      for (Token t : completion) {
        if (t == good[static_cast<std::size_t>(prev)]) score += 1.0;
        prev = t;
      }
      return score;
    }};
  }
};

inline AlignedInstance aligned_instance(std::uint64_t seed, int vocab = 6, double tilt = 1.0) {
  std::mt19937_64 gen(splitmix64(seed));
  AlignedInstance inst;
  inst.vocab = vocab;
  inst.good.resize(static_cast<std::size_t>(vocab) + 1);
  for (Token& g : inst.good) {
    g = 1 + static_cast<Token>(gen() % static_cast<std::uint64_t>(vocab - 1));
  }

  const std::vector<double> uniform(static_cast<std::size_t>(vocab), 1.0 / vocab);
  inst.sft.vocab = vocab;
  inst.sft.context_order = 1;
  inst.sft.set_default_row(uniform);

  inst.dpo.vocab = vocab;
  inst.dpo.context_order = 1;
  auto tilted_row = [&](Token g) {
    std::vector<double> w(static_cast<std::size_t>(vocab), 1.0);
    w[static_cast<std::size_t>(g)] = std::exp(tilt);
    double sum = 0.0;
    for (double x : w) sum += x;
    for (double& x : w) x /= sum;
    return w;
  };
  inst.dpo.set_default_row(tilted_row(inst.good[static_cast<std::size_t>(vocab)]));
  for (Token prev = 0; prev < vocab; ++prev) {
    const TokenSeq ctx{prev};
    inst.sft.set_row(ctx, uniform);
    inst.dpo.set_row(ctx, tilted_row(inst.good[static_cast<std::size_t>(prev)]));
  }
  return inst;
}

// ============================================================================
// Entropy-gate family
// ============================================================================

/// Low-entropy family: the reference model is confident about the good token,
/// the aligned model still prefers it but leaves a plausible trap token whose
/// reference probability is tiny. The raw ratio then scores the trap highest;
/// the entropy gate (restricted entropy well under ln 2) restores the aligned
/// model's own ranking. Designed for alpha = 0.7.
struct GateInstance {
  models::TabularModel dpo;
  models::TabularModel sft;
  std::vector<Token> good;  // per previous token; index vocab = empty context
  std::vector<Token> trap;
  int vocab = 4;

  rewards::FnReward oracle_reward() const {
    return rewards::FnReward{[*this](std::span<const Token> prompt,
                                     std::span<const Token> completion) {
      double score = 0.0;
      Token prev = prompt.empty() ? static_cast<Token>(vocab) : prompt.back();
      for (Token t : completion) {
        if (t == good[static_cast<std::size_t>(prev)]) score += 1.0;
        prev = t;
      }
      return score;
    }};
  }
};

inline GateInstance gate_instance(std::uint64_t seed) {
  std::mt19937_64 gen(splitmix64(seed));
  GateInstance inst;
  const int vocab = inst.vocab;
  inst.dpo.vocab = inst.sft.vocab = vocab;
  inst.dpo.context_order = inst.sft.context_order = 1;

  inst.good.resize(static_cast<std::size_t>(vocab) + 1);
  inst.trap.resize(static_cast<std::size_t>(vocab) + 1);
  auto rows_for = [&](std::size_t slot) {
    const Token g = static_cast<Token>(gen() % static_cast<std::uint64_t>(vocab));
    Token t = g;
    while (t == g) t = static_cast<Token>(gen() % static_cast<std::uint64_t>(vocab));
    inst.good[slot] = g;
    inst.trap[slot] = t;

    // aligned: good in [0.50, 0.55], trap = 0.95 - good, rest 0.025 each
    const double pg = 0.50 + 0.05 * uniform01(gen);
    std::vector<double> dpo_row(static_cast<std::size_t>(vocab), 0.025);
    dpo_row[static_cast<std::size_t>(g)] = pg;
    dpo_row[static_cast<std::size_t>(t)] = 0.95 - pg;

    // reference: confident on good, [0.82, 0.88]; remainder split evenly
    const double sg = 0.82 + 0.06 * uniform01(gen);
    std::vector<double> sft_row(static_cast<std::size_t>(vocab),
                                (1.0 - sg) / (vocab - 1));
    sft_row[static_cast<std::size_t>(g)] = sg;
    return std::pair{dpo_row, sft_row};
  };

  auto [d0, s0] = rows_for(static_cast<std::size_t>(vocab));
  inst.dpo.set_default_row(d0);
  inst.sft.set_default_row(s0);
  for (Token prev = 0; prev < vocab; ++prev) {
    auto [d, s] = rows_for(static_cast<std::size_t>(prev));
    const TokenSeq ctx{prev};
    inst.dpo.set_row(ctx, d);
    inst.sft.set_row(ctx, s);
  }
  return inst;
}

// ============================================================================
// Named instances
// ============================================================================

/// Two completions where the reference bias overwhelms the reward margin:
/// Delta_sft = -2, Delta_r = 0.1, beta = 0.1, so the KL-constrained optimum
/// ranks the lower-reward completion higher.
struct BiasInstance {
  models::TabularModel sft;
  rewards::TabularReward reward;
  TokenSeq prompt;  // empty
  TokenSeq y1{0};
  TokenSeq y2{1};
  double beta = 0.1;
};

inline BiasInstance bias_inversion_instance() {
  BiasInstance inst;
  inst.sft.vocab = 2;
  inst.sft.context_order = 0;
  const double a = 1.0 / (1.0 + std::exp(2.0));  // log(a/b) = -2
  inst.sft.set_default_row(std::vector<double>{a, 1.0 - a});
  inst.reward.set(inst.prompt, inst.y1, 0.1);
  inst.reward.set(inst.prompt, inst.y2, 0.0);
  return inst;
}

/// Three-token, horizon-2 instance where the best first-step nu leads into a
/// flat continuation while the runner-up opens a much better second step:
/// stepwise-greedy nu maximization lands on [0, 0] (score ln 2) while the
/// global optimum is [1, 0] (score ln 1.2 + ln 7).
struct TrapInstance {
  models::TabularModel dpo;
  models::TabularModel sft;
  TokenSeq prompt;  // empty
  double alpha = 0.1;
  int horizon = 2;
};

inline TrapInstance greedy_trap_instance() {
  TrapInstance inst;
  inst.dpo.vocab = inst.sft.vocab = 3;
  inst.dpo.context_order = inst.sft.context_order = 1;
  const std::vector<double> uniform{1.0 / 3, 1.0 / 3, 1.0 / 3};
  inst.dpo.set_default_row(std::vector<double>{0.5, 0.3, 0.2});
  inst.sft.set_default_row(std::vector<double>{0.25, 0.25, 0.5});
  inst.dpo.set_row(TokenSeq{0}, uniform);
  inst.sft.set_row(TokenSeq{0}, uniform);
  inst.dpo.set_row(TokenSeq{1}, std::vector<double>{0.7, 0.15, 0.15});
  inst.sft.set_row(TokenSeq{1}, std::vector<double>{0.1, 0.45, 0.45});
  inst.dpo.set_row(TokenSeq{2}, uniform);
  inst.sft.set_row(TokenSeq{2}, uniform);
  return inst;
}

/// Aligned model obtained by tilting each reference row toward a per-token
/// reward with weight 1/beta; larger beta collapses it back onto the
/// reference model.
inline models::TabularModel tilted_model(const models::TabularModel& sft,
                                         std::span<const double> token_reward, double beta) {
  models::TabularModel out = sft;
  auto tilt = [&](const std::vector<double>& log_row) {
    std::vector<double> w(log_row.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < log_row.size(); ++i) {
      w[i] = std::exp(log_row[i] + token_reward[i] / beta);
      sum += w[i];
    }
    for (double& x : w) x /= sum;
    return models::TabularModel::to_log_row(w);
  };
  out.default_log_row = tilt(sft.default_log_row);
  for (auto& [key, row] : out.log_rows) row = tilt(sft.log_rows.at(key));
  return out;
}

}  // namespace aad::fixtures
