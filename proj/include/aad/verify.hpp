#pragma once

/**
 * Self-check suite over the enumeration oracle: normalization of the
 * KL-constrained optimum, the reward reparameterization identity, the bias
 * decomposition, and the shipped bias-inversion instance. Drives the
 * `verify` subcommand and returns one pass/fail row per check.
 */

#include "aad/common.hpp"
#include "aad/decoding.hpp"
#include "aad/fixtures.hpp"
#include "aad/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

namespace aad::verify {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct Options {
  std::uint64_t seed = 2024;
  int fixture_count = 50;
};

namespace detail {
inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}
}  // namespace detail

inline std::vector<CheckResult> run_all(const Options& opt = {}) {
  std::vector<CheckResult> results;

  // Normalization of the enumerated optimum: sum of probabilities is 1.
  {
    double worst = 0.0;
    for (int i = 0; i < opt.fixture_count; ++i) {
      const auto inst = fixtures::random_oracle_instance(opt.seed + static_cast<std::uint64_t>(i));
      const auto pol = oracle::optimal_policy(inst.sft, inst.reward, 0.1, inst.prompt,
                                              inst.horizon);
      double sum = 0.0;
      for (double p : pol.probs) sum += p;
      worst = std::max(worst, std::abs(sum - 1.0));
    }
    results.push_back({"optimum-normalization", worst <= 1e-9,
                       "max |sum - 1| = " + detail::sci(worst) + " over " +
                           std::to_string(opt.fixture_count) + " fixtures"});
  }

  // Reward reparameterization: reward differences equal scaled log-ratio
  // differences for every completion pair, across the beta sweep.
  {
    double worst = 0.0;
    for (int i = 0; i < opt.fixture_count; ++i) {
      const auto inst = fixtures::random_oracle_instance(opt.seed + static_cast<std::uint64_t>(i));
      for (double beta : {0.05, 0.1, 5.0}) {
        worst = std::max(worst, oracle::verify_reparameterization(inst.sft, inst.reward, beta,
                                                                  inst.prompt, inst.horizon));
      }
    }
    results.push_back({"reward-reparameterization", worst <= 1e-9,
                       "max pairwise deviation = " + detail::sci(worst) +
                           " (beta 0.05, 0.1, 5.0)"});
  }

  // Bias decomposition identity on the extreme-reward pair of each fixture.
  {
    double worst = 0.0;
    for (int i = 0; i < opt.fixture_count; ++i) {
      const auto inst = fixtures::random_oracle_instance(opt.seed + static_cast<std::uint64_t>(i));
      const auto pol =
          oracle::optimal_policy(inst.sft, inst.reward, 0.2, inst.prompt, inst.horizon);
      std::size_t hi = 0, lo = 0;
      for (std::size_t k = 1; k < pol.completions.size(); ++k) {
        if (pol.rewards[k] > pol.rewards[hi]) hi = k;
        if (pol.rewards[k] < pol.rewards[lo]) lo = k;
      }
      if (hi == lo) continue;
      const auto rep = oracle::bias_check(inst.sft, inst.reward, 0.2, inst.prompt,
                                          pol.completions[hi], pol.completions[lo]);
      worst = std::max(worst,
                       std::abs(rep.pistar_ratio_log - (rep.delta_sft + rep.delta_r / rep.beta)));
    }
    results.push_back({"bias-decomposition", worst <= 1e-9,
                       "max identity residual = " + detail::sci(worst)});
  }

  // Shipped inversion instance: the reference bias outweighs the reward
  // margin, so the optimum ranks the lower-reward completion higher.
  {
    const auto inst = fixtures::bias_inversion_instance();
    const auto rep =
        oracle::bias_check(inst.sft, inst.reward, inst.beta, inst.prompt, inst.y1, inst.y2);
    const double residual =
        std::abs(rep.pistar_ratio_log - (rep.delta_sft + rep.delta_r / rep.beta));
    const bool pass = rep.delta_r > 0.0 && rep.inequality_fired && rep.pistar_ratio_log < 0.0 &&
                      residual <= 1e-9;
    results.push_back({"bias-inversion-instance", pass,
                       "delta_sft = " + detail::sci(rep.delta_sft) +
                           ", delta_r = " + detail::sci(rep.delta_r) +
                           ", log ratio = " + detail::sci(rep.pistar_ratio_log) +
                           ", residual = " + detail::sci(residual)});
  }

  // Greedy-trap instance: the global nu maximizer strictly beats stepwise
  // greedy, and an exhaustive beam recovers it.
  {
    const auto trap = fixtures::greedy_trap_instance();
    const auto res =
        oracle::global_nu_argmax(trap.dpo, trap.sft, trap.prompt, trap.alpha, trap.horizon);
    decoding::DecodeConfig cfg;
    cfg.alpha = trap.alpha;
    cfg.max_new_tokens = trap.horizon;
    const auto greedy = decoding::decode_aad(trap.dpo, trap.sft, trap.prompt, cfg);
    cfg.beam_width = static_cast<int>(res.feasible_count);
    const auto beam = decoding::decode_aad_beam(trap.dpo, trap.sft, trap.prompt, cfg);
    const bool pass =
        greedy.total_nu < res.score && std::abs(beam.total_nu - res.score) <= 1e-9;
    results.push_back({"greedy-gap-instance", pass,
                       "greedy = " + detail::sci(greedy.total_nu) + ", global = " +
                           detail::sci(res.score) + ", exhaustive beam = " +
                           detail::sci(beam.total_nu)});
  }

  return results;
}

inline bool all_pass(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(),
                     [](const CheckResult& r) { return r.pass; });
}

}  // namespace aad::verify
