#pragma once

/**
 * Numeric kernel of the decoding engine.
 *
 * Everything here is a pure function over full-vocabulary next-token
 * log-probability vectors:
 *   - nu, the token-level log-likelihood ratio log pi_dpo - log pi_sft
 *   - the plausible set V_alpha (min-alpha filtering of the aligned model)
 *   - the restricted entropy of the reference model over V_alpha
 *   - the entropy gate that substitutes uniform reference values on
 *     low-entropy steps
 *   - the sequence-level implicit reward beta * sum_t nu_t
 *
 * All probabilities are carried as natural-log values end to end; comparisons
 * that are stated in probability space are rewritten as log-space comparisons
 * so that tiny reference probabilities (down to exp(-700) and below) never
 * underflow through an exp/ratio round trip.
 */

#include "aad/common.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <span>
#include <vector>

namespace aad::core {

// ============================================================================
// TokenDistribution
// ============================================================================

/// Full-vocabulary next-token log-probabilities (natural log) for one context.
/// Entries are <= 0; -inf marks a token the source declared masked.
struct TokenDistribution {
  std::vector<double> logprobs;

  int vocab_size() const { return static_cast<int>(logprobs.size()); }

  static TokenDistribution from_probs(std::span<const double> probs) {
    TokenDistribution d;
    d.logprobs.reserve(probs.size());
    for (double p : probs) d.logprobs.push_back(std::log(p));
    return d;
  }

  double prob(Token t) const { return std::exp(logprobs[static_cast<std::size_t>(t)]); }

  /// Lowest token id attaining the maximum log-probability.
  Token argmax() const {
    Token best = 0;
    for (Token t = 1; t < vocab_size(); ++t) {
      if (logprobs[static_cast<std::size_t>(t)] > logprobs[static_cast<std::size_t>(best)]) {
        best = t;
      }
    }
    return best;
  }

  /// Checks the type invariants: entries <= 0 and exp-sum equal to 1.
  void validate(double tol = 1e-6) const {
    if (logprobs.empty()) throw Error("TokenDistribution: empty vocabulary");
    double sum = 0.0;
    for (double lp : logprobs) {
      if (std::isnan(lp) || lp > 0.0) {
        throw Error("TokenDistribution: logprob out of range: " + std::to_string(lp));
      }
      sum += std::exp(lp);
    }
    if (std::abs(sum - 1.0) > tol) {
      throw Error("TokenDistribution: probabilities sum to " + std::to_string(sum));
    }
  }
};

// ============================================================================
// Plausible set V_alpha
// ============================================================================

/// Tokens whose aligned-model probability is at least alpha times the maximum
/// probability at this step. Never empty: the argmax always qualifies.
struct PlausibleSet {
  std::vector<Token> token_ids;  // ascending
  double threshold = 0.0;        // alpha * max-probability actually applied
  double log_threshold = kNegInf;

  int size() const { return static_cast<int>(token_ids.size()); }

  bool contains(Token t) const {
    return std::binary_search(token_ids.begin(), token_ids.end(), t);
  }
};

/// Per-token reward: log pi_dpo(token) - log pi_sft(token), in nats.
struct NuScore {
  Token token_id = 0;
  double value = 0.0;
};

inline NuScore token_nu(const TokenDistribution& dpo, const TokenDistribution& sft,
                        Token token) {
  if (dpo.vocab_size() != sft.vocab_size()) {
    throw VocabMismatch("token_nu: vocab sizes differ (" +
                        std::to_string(dpo.vocab_size()) + " vs " +
                        std::to_string(sft.vocab_size()) + ")");
  }
  if (token < 0 || token >= dpo.vocab_size()) {
    throw Error("token_nu: token " + std::to_string(token) + " out of range");
  }
  const double ls = sft.logprobs[static_cast<std::size_t>(token)];
  if (std::isinf(ls) && ls < 0.0) {
    throw MaskedToken("token_nu: token " + std::to_string(token) +
                      " is masked in the reference model");
  }
  // Difference of log-probabilities, never an exp/ratio round trip.
  return NuScore{token, dpo.logprobs[static_cast<std::size_t>(token)] - ls};
}

/// Membership test is (logprob >= log(alpha) + max-logprob), the log-space
/// rewrite of pi(y') >= alpha * max pi.
inline PlausibleSet plausible_set(const TokenDistribution& dpo, double alpha) {
  if (!(alpha > 0.0) || alpha > 1.0) {
    throw Error("plausible_set: alpha must be in (0, 1], got " + std::to_string(alpha));
  }
  const Token arg = dpo.argmax();
  const double max_lp = dpo.logprobs[static_cast<std::size_t>(arg)];
  const double log_thresh = std::log(alpha) + max_lp;  // log(1) == 0 keeps alpha=1 exact
  PlausibleSet out;
  out.log_threshold = log_thresh;
  out.threshold = std::exp(log_thresh);
  for (Token t = 0; t < dpo.vocab_size(); ++t) {
    if (dpo.logprobs[static_cast<std::size_t>(t)] >= log_thresh) out.token_ids.push_back(t);
  }
  return out;
}

/// sum over set members of -pi_sft(y') * log pi_sft(y'), with the
/// unrenormalized reference probabilities. Zero-probability members
/// contribute zero.
inline double restricted_entropy(const TokenDistribution& sft, const PlausibleSet& set) {
  double h = 0.0;
  for (Token t : set.token_ids) {
    if (t < 0 || t >= sft.vocab_size()) {
      throw Error("restricted_entropy: set member " + std::to_string(t) + " out of range");
    }
    const double lp = sft.logprobs[static_cast<std::size_t>(t)];
    const double p = std::exp(lp);
    if (p > 0.0) h -= p * lp;
  }
  return h;
}

/// Reference-model values restricted to a plausible set, after the entropy
/// gate. `logprobs[i]` pairs with `set->token_ids[i]`.
struct GatedSftView {
  const PlausibleSet* set = nullptr;
  std::vector<double> logprobs;
  double entropy = 0.0;
  bool fired = false;
};

/// If the restricted entropy is <= tau the member values are replaced by the
/// uniform value 1/|set| (stored as -log|set|); otherwise the original
/// reference log-probabilities are passed through untouched, bitwise.
inline GatedSftView gated_sft(const TokenDistribution& sft, const PlausibleSet& set,
                              double tau) {
  if (set.token_ids.empty()) throw Error("gated_sft: empty plausible set");
  GatedSftView view;
  view.set = &set;
  view.entropy = restricted_entropy(sft, set);
  view.fired = view.entropy <= tau;  // gate fires at equality
  view.logprobs.reserve(set.token_ids.size());
  if (view.fired) {
    const double uniform_lp = -std::log(static_cast<double>(set.size()));
    view.logprobs.assign(set.token_ids.size(), uniform_lp);
  } else {
    for (Token t : set.token_ids) {
      view.logprobs.push_back(sft.logprobs[static_cast<std::size_t>(t)]);
    }
  }
  return view;
}

}  // namespace aad::core

namespace aad {

/// Anything that can produce a next-token distribution for a context. The
/// tabular and remote backends model this; decoders and reward sources are
/// written against it.
template <typename S>
concept TokenSource = requires(const S& s, std::span<const Token> ctx) {
  { s.next_distribution(ctx) } -> std::convertible_to<core::TokenDistribution>;
  { s.vocab_size() } -> std::convertible_to<int>;
};

}  // namespace aad

namespace aad::core {

/// beta * sum_t [log pi_dpo(y_t | x.y_<t) - log pi_sft(y_t | x.y_<t)], the
/// implicit sequence reward of a DPO policy relative to its reference model.
template <TokenSource D, TokenSource S>
double sequence_implicit_reward(const D& dpo, const S& sft, std::span<const Token> prompt,
                                std::span<const Token> completion, double beta) {
  if (completion.empty()) throw Error("sequence_implicit_reward: empty completion");
  if (!(beta > 0.0)) throw Error("sequence_implicit_reward: beta must be positive");
  TokenSeq ctx(prompt.begin(), prompt.end());
  double total = 0.0;
  for (Token tok : completion) {
    const TokenDistribution dd = dpo.next_distribution(ctx);
    const TokenDistribution ds = sft.next_distribution(ctx);
    total += token_nu(dd, ds, tok).value;
    ctx.push_back(tok);
  }
  return beta * total;
}

}  // namespace aad::core
