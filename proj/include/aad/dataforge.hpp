#pragma once

/**
 * Synthetic preference-pair generation for iterative preference training.
 *
 * Chosen completions come from the aligned greedy decoder, rejected ones from
 * nucleus sampling on the aligned model. If sampling reproduces the chosen
 * sequence, it is retried with the next derived seed up to 8 attempts, after
 * which the pair is emitted with a degenerate flag rather than dropped, so
 * filtering stays a consumer decision.
 *
 * Output is JSONL in the preference-dataset schema, one pair per prompt in
 * input order, plus a meta object carrying strategy, config, seeds, attempt
 * count and iteration bookkeeping. Identical inputs produce a byte-identical
 * file; partial output is removed on failure.
 */

#include "aad/common.hpp"
#include "aad/decoding.hpp"
#include "aad/parallel.hpp"
#include "aad/rewards.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace aad::dataforge {

inline constexpr int kMaxCollisionAttempts = 8;

struct PreferencePair {
  TokenSeq prompt;
  decoding::GenerationRecord chosen;    // aligned greedy
  decoding::GenerationRecord rejected;  // nucleus on the aligned model
  int attempt_count = 1;
  bool degenerate = false;
};

template <TokenSource D, TokenSource S>
PreferencePair generate_pair(std::span<const Token> prompt, const D& dpo, const S& sft,
                             const decoding::DecodeConfig& cfg) {
  PreferencePair pair;
  pair.prompt.assign(prompt.begin(), prompt.end());
  pair.chosen = decoding::decode_aad(dpo, sft, prompt, cfg);
  for (int attempt = 0; attempt < kMaxCollisionAttempts; ++attempt) {
    pair.rejected = decoding::decode_nucleus(
        dpo, prompt, cfg.nucleus_p, decoding::candidate_seed(cfg.seed, attempt), cfg);
    pair.attempt_count = attempt + 1;
    if (pair.rejected.tokens != pair.chosen.tokens) {
      pair.degenerate = false;
      return pair;
    }
  }
  pair.degenerate = true;
  return pair;
}

struct ForgeOptions {
  decoding::DecodeConfig cfg;
  int iteration = 1;
  std::string init = "sft";  // which model the next training round starts from
  int workers = 1;
};

struct ForgeSummary {
  std::size_t pairs_written = 0;
  std::size_t degenerate_count = 0;
};

inline nlohmann::ordered_json pair_json(const PreferencePair& pair, const ForgeOptions& opt,
                                        std::uint64_t pair_seed) {
  nlohmann::ordered_json j;
  j["prompt"] = pair.prompt;
  j["chosen"] = pair.chosen.tokens;
  j["rejected"] = pair.rejected.tokens;
  nlohmann::ordered_json meta;
  meta["chosen_strategy"] = "aad";
  meta["rejected_strategy"] = "nucleus";
  meta["seed"] = pair_seed;
  meta["attempts"] = pair.attempt_count;
  meta["degenerate"] = pair.degenerate;
  meta["iteration"] = opt.iteration;
  meta["init"] = opt.init;
  meta["config"] = decoding::config_json(pair.chosen.config);
  j["meta"] = std::move(meta);
  return j;
}

/// Reads a prompts file (JSONL, {"prompt": [int]} per line; an "id" field is
/// allowed and ignored here). Throws ParseError with the offending line.
inline std::vector<TokenSeq> load_prompt_seqs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open prompts file: " + path);
  std::vector<TokenSeq> prompts;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what(), line_no);
    }
    if (!rec.is_object() || !rec.contains("prompt") || !rec.at("prompt").is_array()) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": missing 'prompt' array",
                       line_no);
    }
    TokenSeq p;
    for (const auto& v : rec.at("prompt")) p.push_back(v.get<Token>());
    prompts.push_back(std::move(p));
  }
  return prompts;
}

/// One pair per prompt, streamed to JSONL in input order via temp-file+rename.
/// Pair i decodes with seed splitmix64(cfg.seed + i).
template <TokenSource D, TokenSource S>
ForgeSummary build_dataset(const std::string& prompts_path, const D& dpo, const S& sft,
                           const ForgeOptions& opt, const std::string& out_path) {
  const std::vector<TokenSeq> prompts = load_prompt_seqs(prompts_path);

  struct Row {
    std::string line;
    bool degenerate = false;
  };
  const std::vector<Row> rows =
      parallel_map<Row>(prompts.size(), opt.workers, [&](std::size_t i) {
        decoding::DecodeConfig cfg = opt.cfg;
        cfg.seed = splitmix64(opt.cfg.seed + i);
        const PreferencePair pair = generate_pair(prompts[i], dpo, sft, cfg);
        return Row{pair_json(pair, opt, cfg.seed).dump(), pair.degenerate};
      });

  const std::string tmp_path = out_path + ".tmp";
  ForgeSummary summary;
  try {
    std::ofstream out(tmp_path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open output file: " + tmp_path);
    for (const Row& row : rows) {
      out << row.line << "\n";
      ++summary.pairs_written;
      if (row.degenerate) ++summary.degenerate_count;
    }
    out.flush();
    if (!out) throw Error("write failed: " + tmp_path);
  } catch (...) {
    std::remove(tmp_path.c_str());
    throw;
  }
  std::filesystem::rename(tmp_path, out_path);
  return summary;
}

}  // namespace aad::dataforge
