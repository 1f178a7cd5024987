#pragma once

/**
 * Sequence-level reward sources and Bradley-Terry utilities.
 *
 * Reward sources share one contract: score(prompt, completion) -> real,
 * deterministic for fixed inputs. Three kinds are provided here (the
 * implicit DPO reward, tabular fixtures, arbitrary functions); the remote
 * kind lives in remote.hpp next to the transport.
 *
 * Preference datasets are JSONL, one record per line:
 *   {"prompt": [int], "chosen": [int], "rejected": [int], "meta": {...}}
 */

#include "aad/common.hpp"
#include "aad/core.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace aad::rewards {

template <typename R>
concept RewardSourceLike = requires(const R& r, std::span<const Token> p,
                                    std::span<const Token> c) {
  { r.score(p, c) } -> std::convertible_to<double>;
};

// ============================================================================
// Reward sources
// ============================================================================

/// r(x, y) = beta * sum_t [log pi_dpo - log pi_sft]; the reward the DPO
/// training objective implicitly fits.
template <TokenSource D, TokenSource S>
struct ImplicitDpoReward {
  const D* dpo = nullptr;
  const S* sft = nullptr;
  double beta = 1.0;

  double score(std::span<const Token> prompt, std::span<const Token> completion) const {
    return core::sequence_implicit_reward(*dpo, *sft, prompt, completion, beta);
  }
};

template <TokenSource D, TokenSource S>
ImplicitDpoReward<D, S> make_implicit_reward(const D& dpo, const S& sft, double beta) {
  return ImplicitDpoReward<D, S>{&dpo, &sft, beta};
}

/// Fixture rewards keyed on "<prompt>|<completion>".
/// File format: {"default": float (optional), "table": {"p1,p2|c1,c2": float}}
struct TabularReward {
  std::optional<double> default_reward;
  std::unordered_map<std::string, double> table;

  double score(std::span<const Token> prompt, std::span<const Token> completion) const {
    auto it = table.find(pair_key(prompt, completion));
    if (it != table.end()) return it->second;
    if (default_reward) return *default_reward;
    throw Error("TabularReward: no entry for pair '" + pair_key(prompt, completion) +
                "' and no default");
  }

  void set(std::span<const Token> prompt, std::span<const Token> completion, double r) {
    table[pair_key(prompt, completion)] = r;
  }
};

inline TabularReward reward_from_json(const nlohmann::json& doc, const std::string& origin) {
  if (!doc.is_object()) throw ParseError(origin + ": expected a JSON object");
  TabularReward r;
  if (doc.contains("default")) r.default_reward = doc.at("default").get<double>();
  if (doc.contains("table")) {
    for (const auto& [key, val] : doc.at("table").items()) {
      if (!val.is_number()) throw ParseError(origin + ": non-numeric reward for '" + key + "'");
      if (key.find('|') == std::string::npos) {
        throw ParseError(origin + ": reward key '" + key + "' missing '|' separator");
      }
      r.table[key] = val.get<double>();
    }
  }
  return r;
}

inline TabularReward load_reward(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open reward file: " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  return reward_from_json(doc, path);
}

/// Arbitrary scoring function; handy for constructed test pickers.
struct FnReward {
  std::function<double(std::span<const Token>, std::span<const Token>)> fn;

  double score(std::span<const Token> prompt, std::span<const Token> completion) const {
    return fn(prompt, completion);
  }
};

/// Type-erases a reward source by reference; the source must outlive the
/// returned wrapper.
template <typename R>
FnReward erase_reward(const R& source) {
  return FnReward{[&source](std::span<const Token> p, std::span<const Token> c) {
    return source.score(p, c);
  }};
}

// ============================================================================
// Bradley-Terry utilities
// ============================================================================

/// sigma(r1 - r2): likelihood of the first completion being preferred.
inline double bt_preference_prob(double r1, double r2) {
  const double z = r1 - r2;
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// ============================================================================
// Preference datasets
// ============================================================================

struct PreferenceRecord {
  TokenSeq prompt;
  TokenSeq chosen;
  TokenSeq rejected;
  nlohmann::json meta;  // may be null
};

struct PreferenceDataset {
  std::vector<PreferenceRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
};

namespace detail {
inline TokenSeq ids_field(const nlohmann::json& rec, const char* field, int line) {
  if (!rec.contains(field) || !rec.at(field).is_array()) {
    throw ParseError(std::string("missing or non-array '") + field + "' on line " +
                         std::to_string(line),
                     line);
  }
  TokenSeq out;
  for (const auto& v : rec.at(field)) out.push_back(v.get<Token>());
  return out;
}
}  // namespace detail

/// Loads a JSONL preference dataset. A record with chosen == rejected is
/// rejected unless its meta marks it degenerate (the data generator keeps
/// such pairs but flags them).
inline PreferenceDataset load_preference_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open dataset file: " + path);
  PreferenceDataset ds;
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
    PreferenceRecord r;
    r.prompt = detail::ids_field(rec, "prompt", line_no);
    r.chosen = detail::ids_field(rec, "chosen", line_no);
    r.rejected = detail::ids_field(rec, "rejected", line_no);
    if (rec.contains("meta")) r.meta = rec.at("meta");
    if (r.chosen == r.rejected) {
      const bool flagged =
          r.meta.is_object() && r.meta.value("degenerate", false);
      if (!flagged) {
        throw ParseError(path + ":" + std::to_string(line_no) +
                             ": chosen equals rejected and is not flagged degenerate",
                         line_no);
      }
    }
    ds.records.push_back(std::move(r));
  }
  return ds;
}

/// -(1/|D|) sum log sigma(score(chosen) - score(rejected)), via log-sigmoid.
template <RewardSourceLike R>
double bt_nll(const R& source, const PreferenceDataset& dataset) {
  if (dataset.empty()) throw Error("bt_nll: empty dataset");
  double total = 0.0;
  for (const auto& rec : dataset.records) {
    const double margin =
        source.score(rec.prompt, rec.chosen) - source.score(rec.prompt, rec.rejected);
    total -= log_sigmoid(margin);
  }
  return total / static_cast<double>(dataset.size());
}

/// Fraction of records ranked correctly; exact score ties count 0.5.
template <RewardSourceLike R>
double bt_accuracy(const R& source, const PreferenceDataset& dataset) {
  if (dataset.empty()) throw Error("bt_accuracy: empty dataset");
  double credit = 0.0;
  for (const auto& rec : dataset.records) {
    const double sc = source.score(rec.prompt, rec.chosen);
    const double sr = source.score(rec.prompt, rec.rejected);
    if (sc > sr) {
      credit += 1.0;
    } else if (sc == sr) {
      credit += 0.5;
    }
  }
  return credit / static_cast<double>(dataset.size());
}

}  // namespace aad::rewards
