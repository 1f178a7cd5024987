#pragma once

/**
 * Decoding strategies over a pair of token sources.
 *
 * Six strategies share one record type:
 *   - greedy (single source)
 *   - nucleus sampling (single source, seeded)
 *   - aligned greedy: argmax of nu over the plausible set V_alpha
 *   - aligned beam search with the entropy gate, maximizing cumulative
 *     gated nu
 *   - reweighted decoding with combined scores
 *     log pi_sft + beta * (log pi_dpo - log pi_sft)
 *   - best-of-n over nucleus samples with a picker reward
 *
 * A generation is sequential; distinct generations share no mutable state and
 * may run concurrently.
 */

#include "aad/common.hpp"
#include "aad/core.hpp"
#include "aad/rewards.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace aad::decoding {

// ============================================================================
// Configuration and records
// ============================================================================

struct DecodeConfig {
  double alpha = 0.1;       // plausible-set filter
  double tau = 0.0;         // entropy gate threshold; 0 keeps the gate off for
                            // non-degenerate rows (it still fires at exactly-zero entropy)
  int beam_width = 1;
  double nucleus_p = 0.9;
  double eft_beta = 4.0;
  int max_new_tokens = 64;
  std::uint64_t seed = 0;
  std::set<Token> eos_ids;
  double nu_scale = 1.0;    // positive constant multiplying nu in aligned scoring;
                            // ranking-invariant, exposed to make that checkable
  bool eft_sample = false;  // sample the combined scores instead of argmax
  bool beam_length_normalize = false;  // rank beams by score/length instead of raw
                                       // score; off by default, the cumulative sum
                                       // is a sequence reward and normalizing
                                       // breaks that reading

  void validate() const {
    if (!(alpha > 0.0) || alpha > 1.0) throw Error("DecodeConfig: alpha must be in (0, 1]");
    if (tau < 0.0) throw Error("DecodeConfig: tau must be >= 0");
    if (beam_width < 1) throw Error("DecodeConfig: beam_width must be >= 1");
    if (!(nucleus_p > 0.0) || nucleus_p > 1.0) {
      throw Error("DecodeConfig: nucleus_p must be in (0, 1]");
    }
    if (!(eft_beta > 0.0)) throw Error("DecodeConfig: eft_beta must be > 0");
    if (max_new_tokens < 1) throw Error("DecodeConfig: max_new_tokens must be >= 1");
    if (!(nu_scale > 0.0)) throw Error("DecodeConfig: nu_scale must be > 0");
  }
};

inline nlohmann::ordered_json config_json(const DecodeConfig& cfg) {
  nlohmann::ordered_json j;
  j["alpha"] = cfg.alpha;
  j["tau"] = cfg.tau;
  j["beam_width"] = cfg.beam_width;
  j["nucleus_p"] = cfg.nucleus_p;
  j["eft_beta"] = cfg.eft_beta;
  j["max_new_tokens"] = cfg.max_new_tokens;
  j["seed"] = cfg.seed;
  j["eos_ids"] = std::vector<Token>(cfg.eos_ids.begin(), cfg.eos_ids.end());
  j["nu_scale"] = cfg.nu_scale;
  j["eft_sample"] = cfg.eft_sample;
  j["beam_length_normalize"] = cfg.beam_length_normalize;
  return j;
}

inline DecodeConfig config_from_json(const nlohmann::json& j) {
  DecodeConfig cfg;
  cfg.alpha = j.value("alpha", cfg.alpha);
  cfg.tau = j.value("tau", cfg.tau);
  cfg.beam_width = j.value("beam_width", cfg.beam_width);
  cfg.nucleus_p = j.value("nucleus_p", cfg.nucleus_p);
  cfg.eft_beta = j.value("eft_beta", cfg.eft_beta);
  cfg.max_new_tokens = j.value("max_new_tokens", cfg.max_new_tokens);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("eos_ids")) {
    cfg.eos_ids.clear();
    for (const auto& v : j.at("eos_ids")) cfg.eos_ids.insert(v.get<Token>());
  }
  cfg.nu_scale = j.value("nu_scale", cfg.nu_scale);
  cfg.eft_sample = j.value("eft_sample", cfg.eft_sample);
  cfg.beam_length_normalize = j.value("beam_length_normalize", cfg.beam_length_normalize);
  return cfg;
}

enum class FinishReason { eos, length_limit };

inline const char* to_string(FinishReason r) {
  return r == FinishReason::eos ? "eos" : "length-limit";
}

/// Per-step diagnostics recorded by the aligned strategies.
struct StepDiag {
  int plausible_size = 0;
  double nu = 0.0;  // chosen-token nu, unscaled
  double entropy = 0.0;
  bool gate_fired = false;
};

struct GenerationRecord {
  TokenSeq prompt;
  TokenSeq tokens;
  FinishReason finished = FinishReason::length_limit;
  std::vector<StepDiag> steps;  // aligned strategies only
  std::string strategy_label;
  DecodeConfig config;
  double total_nu = 0.0;  // cumulative unscaled gated nu (aligned strategies)
  std::vector<double> candidate_scores;  // best-of-n
  int picked_candidate = -1;             // best-of-n
  double picker_score = 0.0;             // best-of-n
};

inline nlohmann::ordered_json record_json(const GenerationRecord& rec) {
  nlohmann::ordered_json j;
  j["strategy"] = rec.strategy_label;
  j["prompt"] = rec.prompt;
  j["tokens"] = rec.tokens;
  j["finished"] = to_string(rec.finished);
  if (!rec.steps.empty()) {
    nlohmann::ordered_json steps = nlohmann::ordered_json::array();
    for (const auto& s : rec.steps) {
      steps.push_back({{"plausible_size", s.plausible_size},
                       {"nu", s.nu},
                       {"entropy", s.entropy},
                       {"gate_fired", s.gate_fired}});
    }
    j["steps"] = std::move(steps);
    j["total_nu"] = rec.total_nu;
  }
  if (!rec.candidate_scores.empty()) {
    j["candidate_scores"] = rec.candidate_scores;
    j["picked_candidate"] = rec.picked_candidate;
    j["picker_score"] = rec.picker_score;
  }
  j["config"] = config_json(rec.config);
  return j;
}

/// Candidate i of a best-of-n run samples with seed `seed + i`; candidate 0
/// therefore reproduces the plain nucleus record and candidate sets are
/// nested across n.
inline std::uint64_t candidate_seed(std::uint64_t seed, int index) {
  return seed + static_cast<std::uint64_t>(index);
}

namespace detail {

template <TokenSource S>
void check_prompt(const S& src, std::span<const Token> prompt) {
  for (Token t : prompt) {
    if (t < 0 || t >= src.vocab_size()) {
      throw Error("prompt token " + std::to_string(t) + " out of range for vocab " +
                  std::to_string(src.vocab_size()));
    }
  }
}

inline bool is_eos(const DecodeConfig& cfg, Token t) { return cfg.eos_ids.count(t) > 0; }

/// One aligned step: plausible set, entropy gate and the surviving candidates
/// with their nu values. Reference-masked members are dropped unless the gate
/// replaced the denominator; a masked aligned-argmax raises.
struct AlignedStep {
  core::PlausibleSet vset;
  double entropy = 0.0;
  bool gate_fired = false;
  std::vector<Token> candidates;
  std::vector<double> nu;      // unscaled, aligned with candidates
  std::vector<double> dpo_lp;  // aligned with candidates
};

inline AlignedStep aligned_step(const core::TokenDistribution& dpo,
                                const core::TokenDistribution& sft,
                                const DecodeConfig& cfg) {
  if (dpo.vocab_size() != sft.vocab_size()) {
    throw VocabMismatch("aligned step: sources disagree on vocab size");
  }
  AlignedStep step;
  step.vset = core::plausible_set(dpo, cfg.alpha);
  const core::GatedSftView gate = core::gated_sft(sft, step.vset, cfg.tau);
  step.entropy = gate.entropy;
  step.gate_fired = gate.fired;
  const Token dpo_argmax = dpo.argmax();
  for (std::size_t i = 0; i < step.vset.token_ids.size(); ++i) {
    const Token tok = step.vset.token_ids[i];
    const double denom = gate.logprobs[i];
    if (!gate.fired && std::isinf(denom) && denom < 0.0) {
      if (tok == dpo_argmax) {
        throw MaskedToken("aligned step: aligned-model argmax token " + std::to_string(tok) +
                          " is masked in the reference model");
      }
      continue;  // masked member, dropped
    }
    step.candidates.push_back(tok);
    step.nu.push_back(dpo.logprobs[static_cast<std::size_t>(tok)] - denom);
    step.dpo_lp.push_back(dpo.logprobs[static_cast<std::size_t>(tok)]);
  }
  return step;
}

/// Tie rule for the nu argmax: higher aligned-model probability wins,
/// remaining ties go to the lowest token id. Scores are compared after
/// nu_scale is applied.
inline std::size_t select_nu_argmax(const AlignedStep& step, double nu_scale) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < step.candidates.size(); ++i) {
    const double si = step.nu[i] * nu_scale;
    const double sb = step.nu[best] * nu_scale;
    if (si > sb || (si == sb && step.dpo_lp[i] > step.dpo_lp[best])) best = i;
    // equal score and equal dpo probability: ascending iteration keeps the lowest id
  }
  return best;
}

}  // namespace detail

// ============================================================================
// Strategies
// ============================================================================

/// Argmax of the source distribution at every step; ties go to the lowest
/// token id.
template <TokenSource S>
GenerationRecord decode_greedy(const S& src, std::span<const Token> prompt,
                               const DecodeConfig& cfg, std::string_view label = "greedy") {
  cfg.validate();
  detail::check_prompt(src, prompt);
  GenerationRecord rec;
  rec.prompt.assign(prompt.begin(), prompt.end());
  rec.strategy_label = std::string(label);
  rec.config = cfg;
  TokenSeq ctx = rec.prompt;
  for (int step = 0; step < cfg.max_new_tokens; ++step) {
    const core::TokenDistribution dist = src.next_distribution(ctx);
    const Token tok = dist.argmax();
    rec.tokens.push_back(tok);
    ctx.push_back(tok);
    if (detail::is_eos(cfg, tok)) {
      rec.finished = FinishReason::eos;
      return rec;
    }
  }
  rec.finished = FinishReason::length_limit;
  return rec;
}

/// Top-p sampling: smallest descending-probability prefix whose cumulative
/// mass reaches p (within 1e-12, absorbing drift in the running sum),
/// renormalized and sampled with the seeded generator.
template <TokenSource S>
GenerationRecord decode_nucleus(const S& src, std::span<const Token> prompt, double p,
                                std::uint64_t seed, const DecodeConfig& cfg) {
  cfg.validate();
  if (!(p > 0.0) || p > 1.0) throw Error("decode_nucleus: p must be in (0, 1]");
  detail::check_prompt(src, prompt);
  GenerationRecord rec;
  rec.prompt.assign(prompt.begin(), prompt.end());
  rec.strategy_label = "nucleus";
  rec.config = cfg;
  rec.config.nucleus_p = p;
  rec.config.seed = seed;
  std::mt19937_64 gen(seed);
  TokenSeq ctx = rec.prompt;
  for (int step = 0; step < cfg.max_new_tokens; ++step) {
    const core::TokenDistribution dist = src.next_distribution(ctx);
    std::vector<Token> order(static_cast<std::size_t>(dist.vocab_size()));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Token>(i);
    std::stable_sort(order.begin(), order.end(), [&](Token a, Token b) {
      return dist.logprobs[static_cast<std::size_t>(a)] >
             dist.logprobs[static_cast<std::size_t>(b)];
    });
    double cum = 0.0;
    std::size_t keep = order.size();
    for (std::size_t i = 0; i < order.size(); ++i) {
      cum += dist.prob(order[i]);
      if (cum + 1e-12 >= p) {
        keep = i + 1;
        break;
      }
    }
    double total = 0.0;
    for (std::size_t i = 0; i < keep; ++i) total += dist.prob(order[i]);
    const double target = uniform01(gen) * total;
    double acc = 0.0;
    Token tok = order[keep - 1];
    for (std::size_t i = 0; i < keep; ++i) {
      acc += dist.prob(order[i]);
      if (target < acc) {
        tok = order[i];
        break;
      }
    }
    rec.tokens.push_back(tok);
    ctx.push_back(tok);
    if (detail::is_eos(cfg, tok)) {
      rec.finished = FinishReason::eos;
      return rec;
    }
  }
  rec.finished = FinishReason::length_limit;
  return rec;
}

/// Aligned greedy decoding: at each step, the nu argmax over the plausible
/// set of the aligned model.
template <TokenSource D, TokenSource S>
GenerationRecord decode_aad(const D& dpo, const S& sft, std::span<const Token> prompt,
                            const DecodeConfig& cfg) {
  cfg.validate();
  detail::check_prompt(dpo, prompt);
  GenerationRecord rec;
  rec.prompt.assign(prompt.begin(), prompt.end());
  rec.strategy_label = "aad";
  rec.config = cfg;
  TokenSeq ctx = rec.prompt;
  for (int step = 0; step < cfg.max_new_tokens; ++step) {
    const detail::AlignedStep st =
        detail::aligned_step(dpo.next_distribution(ctx), sft.next_distribution(ctx), cfg);
    const std::size_t pick = detail::select_nu_argmax(st, cfg.nu_scale);
    const Token tok = st.candidates[pick];
    rec.tokens.push_back(tok);
    rec.steps.push_back(StepDiag{st.vset.size(), st.nu[pick], st.entropy, st.gate_fired});
    rec.total_nu += st.nu[pick];
    ctx.push_back(tok);
    if (detail::is_eos(cfg, tok)) {
      rec.finished = FinishReason::eos;
      return rec;
    }
  }
  rec.finished = FinishReason::length_limit;
  return rec;
}

/// Beam search maximizing cumulative gated nu. Expansion of each beam is
/// restricted to that beam's plausible set; beams that emit an end-of-sequence
/// token are frozen and keep competing on total score. The winner is the
/// highest-scoring beam in the final pool (finished preferred on exact ties).
template <TokenSource D, TokenSource S>
GenerationRecord decode_aad_beam(const D& dpo, const S& sft, std::span<const Token> prompt,
                                 const DecodeConfig& cfg) {
  cfg.validate();
  detail::check_prompt(dpo, prompt);

  struct Beam {
    TokenSeq toks;
    double score = 0.0;      // cumulative scaled gated nu
    double raw_total = 0.0;  // cumulative unscaled gated nu
    bool finished_eos = false;
    std::vector<StepDiag> steps;
  };
  const auto ranking_score = [&cfg](const Beam& b) {
    if (!cfg.beam_length_normalize || b.toks.empty()) return b.score;
    return b.score / static_cast<double>(b.toks.size());
  };
  const auto better = [&](const Beam& a, const Beam& b) {
    const double sa = ranking_score(a);
    const double sb = ranking_score(b);
    if (sa != sb) return sa > sb;
    if (a.finished_eos != b.finished_eos) return a.finished_eos;
    return a.toks < b.toks;
  };

  TokenSeq base(prompt.begin(), prompt.end());
  std::vector<Beam> pool{Beam{}};
  for (int step = 0; step < cfg.max_new_tokens; ++step) {
    bool any_active = false;
    std::vector<Beam> next;
    for (const Beam& beam : pool) {
      if (beam.finished_eos) {
        next.push_back(beam);
        continue;
      }
      any_active = true;
      TokenSeq ctx = base;
      ctx.insert(ctx.end(), beam.toks.begin(), beam.toks.end());
      const detail::AlignedStep st =
          detail::aligned_step(dpo.next_distribution(ctx), sft.next_distribution(ctx), cfg);
      for (std::size_t i = 0; i < st.candidates.size(); ++i) {
        Beam child = beam;
        child.toks.push_back(st.candidates[i]);
        child.score += st.nu[i] * cfg.nu_scale;
        child.raw_total += st.nu[i];
        child.steps.push_back(StepDiag{st.vset.size(), st.nu[i], st.entropy, st.gate_fired});
        child.finished_eos = detail::is_eos(cfg, st.candidates[i]);
        next.push_back(std::move(child));
      }
    }
    if (!any_active) break;
    std::sort(next.begin(), next.end(), better);
    if (static_cast<int>(next.size()) > cfg.beam_width) {
      next.resize(static_cast<std::size_t>(cfg.beam_width));
    }
    pool = std::move(next);
  }

  // min under `better`-as-less is the beam nothing ranks above
  const Beam& winner = *std::min_element(pool.begin(), pool.end(), better);
  GenerationRecord rec;
  rec.prompt = base;
  rec.strategy_label = "aad-beam";
  rec.config = cfg;
  rec.tokens = winner.toks;
  rec.steps = winner.steps;
  rec.total_nu = winner.raw_total;
  rec.finished = winner.finished_eos ? FinishReason::eos : FinishReason::length_limit;
  return rec;
}

/// Combined-score decoding over the full vocabulary:
/// s(y) = log pi_sft(y) + beta * (log pi_dpo(y) - log pi_sft(y)).
/// Reference-masked tokens are excluded from the argmax.
template <TokenSource D, TokenSource S>
GenerationRecord decode_eft(const D& dpo, const S& sft, std::span<const Token> prompt,
                            const DecodeConfig& cfg) {
  cfg.validate();
  detail::check_prompt(dpo, prompt);
  GenerationRecord rec;
  rec.prompt.assign(prompt.begin(), prompt.end());
  rec.strategy_label = "eft";
  rec.config = cfg;
  std::mt19937_64 gen(cfg.seed);
  TokenSeq ctx = rec.prompt;
  for (int step = 0; step < cfg.max_new_tokens; ++step) {
    const core::TokenDistribution dd = dpo.next_distribution(ctx);
    const core::TokenDistribution ds = sft.next_distribution(ctx);
    if (dd.vocab_size() != ds.vocab_size()) {
      throw VocabMismatch("decode_eft: sources disagree on vocab size");
    }
    std::vector<double> scores(static_cast<std::size_t>(dd.vocab_size()), kNegInf);
    for (Token t = 0; t < dd.vocab_size(); ++t) {
      const double ls = ds.logprobs[static_cast<std::size_t>(t)];
      if (std::isinf(ls) && ls < 0.0) continue;  // excluded
      scores[static_cast<std::size_t>(t)] =
          ls + cfg.eft_beta * (dd.logprobs[static_cast<std::size_t>(t)] - ls);
    }
    Token tok = 0;
    if (!cfg.eft_sample) {
      for (Token t = 1; t < dd.vocab_size(); ++t) {
        if (scores[static_cast<std::size_t>(t)] > scores[static_cast<std::size_t>(tok)]) tok = t;
      }
      if (std::isinf(scores[static_cast<std::size_t>(tok)])) {
        throw MaskedToken("decode_eft: every token is masked in the reference model");
      }
    } else {
      // softmax over the combined scores, sampled with the seeded generator
      double max_s = kNegInf;
      for (double s : scores) max_s = std::max(max_s, s);
      if (std::isinf(max_s)) {
        throw MaskedToken("decode_eft: every token is masked in the reference model");
      }
      std::vector<double> w(scores.size(), 0.0);
      double total = 0.0;
      for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!std::isinf(scores[i])) {
          w[i] = std::exp(scores[i] - max_s);
          total += w[i];
        }
      }
      const double target = uniform01(gen) * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < w.size(); ++i) {
        acc += w[i];
        if (target < acc) {
          tok = static_cast<Token>(i);
          break;
        }
      }
    }
    rec.tokens.push_back(tok);
    ctx.push_back(tok);
    if (detail::is_eos(cfg, tok)) {
      rec.finished = FinishReason::eos;
      return rec;
    }
  }
  rec.finished = FinishReason::length_limit;
  return rec;
}

/// Draws n nucleus samples from the aligned source with derived per-candidate
/// seeds and returns the one the picker scores highest (ties go to the lowest
/// candidate index). The record keeps every candidate's score.
template <TokenSource D, rewards::RewardSourceLike R>
GenerationRecord decode_best_of_n(const D& dpo, const R& picker, std::span<const Token> prompt,
                                  int n, const DecodeConfig& cfg) {
  cfg.validate();
  if (n < 1) throw Error("decode_best_of_n: n must be >= 1");
  std::vector<GenerationRecord> candidates;
  std::vector<double> scores;
  candidates.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    GenerationRecord cand =
        decode_nucleus(dpo, prompt, cfg.nucleus_p, candidate_seed(cfg.seed, i), cfg);
    try {
      scores.push_back(picker.score(cand.prompt, cand.tokens));
    } catch (const BackendUnavailable& e) {
      throw BackendUnavailable(
          "best_of_n: picker failed on candidate " + std::to_string(i) + ": " + e.what(),
          e.attempts);
    } catch (const Error& e) {
      throw Error("best_of_n: picker failed on candidate " + std::to_string(i) + ": " +
                  e.what());
    }
    candidates.push_back(std::move(cand));
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  GenerationRecord rec = std::move(candidates[best]);
  rec.strategy_label = "bon";
  rec.config = cfg;
  rec.candidate_scores = std::move(scores);
  rec.picked_candidate = static_cast<int>(best);
  rec.picker_score = rec.candidate_scores[best];
  return rec;
}

}  // namespace aad::decoding
