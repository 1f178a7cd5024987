#pragma once

/**
 * Brute-force verification on tabular instances.
 *
 * Enumerates the completion space of a toy model (fixed horizon, EOS
 * absorbing) and checks, numerically, the closed-form relations the decoding
 * engine relies on:
 *   - the KL-constrained optimum pi*(y|x) ~ pi_sft(y|x) * exp(r(x,y)/beta)
 *     with an explicitly computed partition sum
 *   - the reward reparameterization
 *     r(x,y1) - r(x,y2) = beta*[log pi*(y1) - log pi_sft(y1)]
 *                       - beta*[log pi*(y2) - log pi_sft(y2)]
 *   - the bias decomposition
 *     log pi*(y1)/pi*(y2) = Delta_sft + Delta_r / beta
 *   - the global argmax of cumulative nu over the stepwise-plausible tree,
 *     the audit target for the beam decoder and the gap meter for aligned
 *     greedy decoding.
 *
 * Everything here is desk scale; enumeration beyond 10^6 completions is
 * refused.
 */

#include "aad/common.hpp"
#include "aad/core.hpp"
#include "aad/rewards.hpp"
#include "aad/tabular.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace aad::oracle {

inline constexpr double kEnumerationLimit = 1e6;

namespace detail {

inline void guard_enumeration(int vocab, int horizon) {
  if (std::pow(static_cast<double>(vocab), static_cast<double>(horizon)) > kEnumerationLimit) {
    throw ExplosionGuard("enumeration of vocab " + std::to_string(vocab) + " over horizon " +
                         std::to_string(horizon) + " exceeds the desk-scale bound");
  }
}

}  // namespace detail

/// All completions of length <= horizon, terminated by EOS or truncation.
/// EOS is absorbing: a sequence ends at its first EOS token, so the support
/// is prefix-free and the reference probabilities sum to one over it.
inline std::vector<TokenSeq> enumerate_support(const models::TabularModel& model,
                                               std::span<const Token> prompt, int horizon) {
  detail::guard_enumeration(model.vocab_size(), horizon);
  std::vector<TokenSeq> out;
  TokenSeq ctx(prompt.begin(), prompt.end());
  TokenSeq partial;
  auto walk = [&](auto&& self) -> void {
    for (Token t = 0; t < model.vocab_size(); ++t) {
      partial.push_back(t);
      ctx.push_back(t);
      if (model.eos_ids().count(t) > 0 || static_cast<int>(partial.size()) >= horizon) {
        out.push_back(partial);
      } else {
        self(self);
      }
      ctx.pop_back();
      partial.pop_back();
    }
  };
  walk(walk);
  return out;
}

/// pi* enumerated over the truncated support, with the explicit partition sum.
struct EnumeratedPolicy {
  int horizon = 0;
  std::vector<TokenSeq> completions;   // lexicographic
  std::vector<double> probs;           // pi*(y|x)
  std::vector<double> sft_logprobs;    // log pi_sft(y|x)
  std::vector<double> rewards;         // r(x, y)
  double partition = 0.0;              // Z(x)

  /// Index of a completion in the support; -1 if absent.
  long find(std::span<const Token> y) const {
    for (std::size_t i = 0; i < completions.size(); ++i) {
      if (completions[i].size() == y.size() &&
          std::equal(completions[i].begin(), completions[i].end(), y.begin())) {
        return static_cast<long>(i);
      }
    }
    return -1;
  }
};

template <rewards::RewardSourceLike R>
EnumeratedPolicy optimal_policy(const models::TabularModel& sft, const R& reward, double beta,
                                std::span<const Token> prompt, int horizon) {
  if (!(beta > 0.0)) throw Error("optimal_policy: beta must be positive");
  detail::guard_enumeration(sft.vocab_size(), horizon);

  EnumeratedPolicy pol;
  pol.horizon = horizon;
  std::vector<double> weights;

  TokenSeq ctx(prompt.begin(), prompt.end());
  TokenSeq partial;
  auto walk = [&](auto&& self, double sft_lp) -> void {
    const core::TokenDistribution dist = sft.next_distribution(ctx);
    for (Token t = 0; t < sft.vocab_size(); ++t) {
      const double lp_total = sft_lp + dist.logprobs[static_cast<std::size_t>(t)];
      partial.push_back(t);
      ctx.push_back(t);
      if (sft.eos_ids().count(t) > 0 || static_cast<int>(partial.size()) >= horizon) {
        const double r = reward.score(prompt, partial);
        pol.completions.push_back(partial);
        pol.sft_logprobs.push_back(lp_total);
        pol.rewards.push_back(r);
        weights.push_back(std::exp(lp_total + r / beta));
      } else {
        self(self, lp_total);
      }
      ctx.pop_back();
      partial.pop_back();
    }
  };
  walk(walk, 0.0);

  pol.partition = pairwise_sum(weights);
  pol.probs.reserve(weights.size());
  for (double w : weights) pol.probs.push_back(w / pol.partition);
  return pol;
}

/// Max absolute deviation of the reparameterization identity across all
/// completion pairs. g(y) = r(x,y) - beta*(log pi*(y) - log pi_sft(y)) is
/// constant when the identity holds, so the pairwise max equals the spread
/// of g over the support (zero-probability completions carry no finite g
/// and are skipped).
template <rewards::RewardSourceLike R>
double verify_reparameterization(const models::TabularModel& sft, const R& reward, double beta,
                                 std::span<const Token> prompt, int horizon) {
  const EnumeratedPolicy pol = optimal_policy(sft, reward, beta, prompt, horizon);
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pol.completions.size(); ++i) {
    if (!(pol.probs[i] > 0.0)) continue;
    const double g = pol.rewards[i] - beta * (std::log(pol.probs[i]) - pol.sft_logprobs[i]);
    lo = std::min(lo, g);
    hi = std::max(hi, g);
  }
  if (!(hi >= lo)) throw Error("verify_reparameterization: empty support");
  return hi - lo;
}

/// Numerical report of the bias decomposition for a completion pair.
struct BiasCheckReport {
  double delta_sft = 0.0;        // log pi_sft(y1)/pi_sft(y2)
  double delta_r = 0.0;          // r(x,y1) - r(x,y2)
  double beta = 0.0;
  double pistar_ratio_log = 0.0; // log pi*(y1)/pi*(y2), from the enumeration
  bool inequality_fired = false; // delta_sft < -delta_r/beta, i.e. the
                                 // preference inversion condition holds
};

/// Requires r(x,y1) >= r(x,y2). Both completions must be members of the
/// enumerated support for horizon max(|y1|, |y2|): EOS-terminated or
/// exactly horizon long.
template <rewards::RewardSourceLike R>
BiasCheckReport bias_check(const models::TabularModel& sft, const R& reward, double beta,
                           std::span<const Token> prompt, std::span<const Token> y1,
                           std::span<const Token> y2) {
  const int horizon = static_cast<int>(std::max(y1.size(), y2.size()));
  const EnumeratedPolicy pol = optimal_policy(sft, reward, beta, prompt, horizon);
  const long i1 = pol.find(y1);
  const long i2 = pol.find(y2);
  if (i1 < 0 || i2 < 0) {
    throw Error("bias_check: completion not in the enumerated support");
  }
  BiasCheckReport rep;
  rep.beta = beta;
  rep.delta_r = pol.rewards[static_cast<std::size_t>(i1)] -
                pol.rewards[static_cast<std::size_t>(i2)];
  if (rep.delta_r < 0.0) {
    throw Error("bias_check: requires r(x,y1) >= r(x,y2)");
  }
  rep.delta_sft = pol.sft_logprobs[static_cast<std::size_t>(i1)] -
                  pol.sft_logprobs[static_cast<std::size_t>(i2)];
  rep.pistar_ratio_log = std::log(pol.probs[static_cast<std::size_t>(i1)]) -
                         std::log(pol.probs[static_cast<std::size_t>(i2)]);
  rep.inequality_fired = rep.delta_sft < -rep.delta_r / beta;
  return rep;
}

/// Global maximizer of cumulative nu over the stepwise-plausible tree.
struct NuArgmaxResult {
  TokenSeq tokens;
  double score = 0.0;
  std::size_t feasible_count = 0;  // completions explored
};

/// Exhausts every completion whose every step stays inside that prefix's
/// plausible set, maximizing the summed nu. Score ties resolve to the
/// lexicographically-first completion. Built directly on the core kernel so
/// it stays an independent audit target for the beam decoder's search.
inline NuArgmaxResult global_nu_argmax(const models::TabularModel& dpo,
                                       const models::TabularModel& sft,
                                       std::span<const Token> prompt, double alpha,
                                       int horizon) {
  detail::guard_enumeration(dpo.vocab_size(), horizon);
  models::require_compatible(dpo, sft);

  NuArgmaxResult best;
  bool found = false;
  TokenSeq ctx(prompt.begin(), prompt.end());
  TokenSeq partial;

  auto walk = [&](auto&& self, double score) -> void {
    const core::TokenDistribution dd = dpo.next_distribution(ctx);
    const core::TokenDistribution ds = sft.next_distribution(ctx);
    const core::PlausibleSet vset = core::plausible_set(dd, alpha);
    const Token dpo_argmax = dd.argmax();
    for (Token t : vset.token_ids) {
      const double ls = ds.logprobs[static_cast<std::size_t>(t)];
      if (std::isinf(ls) && ls < 0.0) {
        if (t == dpo_argmax) {
          throw MaskedToken("global_nu_argmax: aligned-model argmax token " +
                            std::to_string(t) + " is masked in the reference model");
        }
        continue;
      }
      const double total = score + (dd.logprobs[static_cast<std::size_t>(t)] - ls);
      partial.push_back(t);
      ctx.push_back(t);
      if (dpo.eos_ids().count(t) > 0 || static_cast<int>(partial.size()) >= horizon) {
        ++best.feasible_count;
        // DFS visits completions in lexicographic order, so a strict
        // improvement test keeps the lexicographically-first maximizer.
        if (!found || total > best.score) {
          found = true;
          best.score = total;
          best.tokens = partial;
        }
      } else {
        self(self, total);
      }
      ctx.pop_back();
      partial.pop_back();
    }
  };
  walk(walk, 0.0);
  if (!found) throw Error("global_nu_argmax: empty feasible set");
  return best;
}

}  // namespace aad::oracle
