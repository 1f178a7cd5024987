#pragma once

// Test-side re-derivations, kept independent of the library's decoding path:
// plausibility is tested in probability space, nu is computed through the
// probability ratio, and selection re-applies the documented tie rule from
// scratch. Used to audit emitted tokens step by step.

#include <aad/core.hpp>
#include <aad/decoding.hpp>

#include <cmath>
#include <optional>
#include <vector>

namespace testsupport {

using aad::Token;
using aad::TokenSeq;

struct RefStep {
  std::vector<Token> plausible;
  bool gate_fired = false;
  Token choice = -1;
};

/// Re-derives one aligned-greedy step from the two raw distributions.
inline RefStep reference_aad_step(const aad::core::TokenDistribution& dd,
                                  const aad::core::TokenDistribution& ds, double alpha,
                                  double tau) {
  RefStep out;
  const int vocab = dd.vocab_size();
  std::vector<double> pd(static_cast<std::size_t>(vocab));
  std::vector<double> ps(static_cast<std::size_t>(vocab));
  double max_pd = 0.0;
  for (int t = 0; t < vocab; ++t) {
    pd[static_cast<std::size_t>(t)] = std::exp(dd.logprobs[static_cast<std::size_t>(t)]);
    ps[static_cast<std::size_t>(t)] = std::exp(ds.logprobs[static_cast<std::size_t>(t)]);
    max_pd = std::max(max_pd, pd[static_cast<std::size_t>(t)]);
  }
  for (Token t = 0; t < vocab; ++t) {
    if (pd[static_cast<std::size_t>(t)] >= alpha * max_pd) out.plausible.push_back(t);
  }
  double entropy = 0.0;
  for (Token t : out.plausible) {
    const double p = ps[static_cast<std::size_t>(t)];
    if (p > 0.0) entropy -= p * std::log(p);
  }
  out.gate_fired = entropy <= tau;

  std::optional<double> best_nu;
  double best_pd = 0.0;
  for (Token t : out.plausible) {
    const double denom = out.gate_fired
                             ? 1.0 / static_cast<double>(out.plausible.size())
                             : ps[static_cast<std::size_t>(t)];
    if (denom == 0.0) continue;  // masked member
    const double nu = std::log(pd[static_cast<std::size_t>(t)] / denom);
    if (!best_nu || nu > *best_nu ||
        (nu == *best_nu && pd[static_cast<std::size_t>(t)] > best_pd)) {
      best_nu = nu;
      best_pd = pd[static_cast<std::size_t>(t)];
      out.choice = t;
    }
  }
  return out;
}

/// Replays a generation and confirms every emitted token against the
/// re-derived choice. Returns the number of violations.
template <typename D, typename S>
int audit_aad_trace(const D& dpo, const S& sft, const aad::decoding::GenerationRecord& rec,
                    double alpha, double tau) {
  int violations = 0;
  TokenSeq ctx = rec.prompt;
  for (Token emitted : rec.tokens) {
    const RefStep ref =
        reference_aad_step(dpo.next_distribution(ctx), sft.next_distribution(ctx), alpha, tau);
    if (ref.choice != emitted) ++violations;
    ctx.push_back(emitted);
  }
  return violations;
}

}  // namespace testsupport
