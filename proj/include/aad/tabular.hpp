#pragma once

/**
 * Exact toy models: next-token distributions tabulated per context suffix.
 *
 * A model of context order k conditions on the last k tokens. Lookup walks
 * the longest present suffix down to the empty key, then falls back to
 * default_row, so every context has a distribution.
 *
 * File format (JSON):
 *   {"vocab_size": int, "context_order": int, "eos_ids": [int],
 *    "table": {"t1,t2,...": [probs]}, "default_row": [probs]}
 * Context keys are comma-joined token ids; "" keys the empty context.
 */

#include "aad/common.hpp"
#include "aad/core.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace aad::models {

struct TabularModel {
  int vocab = 0;
  int context_order = 0;
  std::set<Token> eos;
  std::map<std::string, std::vector<double>> log_rows;  // context key -> log row
  std::vector<double> default_log_row;

  int vocab_size() const { return vocab; }
  const std::set<Token>& eos_ids() const { return eos; }

  /// Longest-suffix match over stored context keys, then default_row.
  core::TokenDistribution next_distribution(std::span<const Token> context) const {
    const int max_len = std::min<int>(context_order, static_cast<int>(context.size()));
    for (int len = max_len; len >= 0; --len) {
      const auto key = join_ids(context.subspan(context.size() - static_cast<std::size_t>(len)));
      auto it = log_rows.find(key);
      if (it != log_rows.end()) return core::TokenDistribution{it->second};
    }
    return core::TokenDistribution{default_log_row};
  }

  /// Registers a probability row under a context key (test/fixture builder path).
  void set_row(std::span<const Token> context_suffix, std::span<const double> probs) {
    log_rows[join_ids(context_suffix)] = to_log_row(probs);
  }

  void set_default_row(std::span<const double> probs) { default_log_row = to_log_row(probs); }

  static std::vector<double> to_log_row(std::span<const double> probs) {
    std::vector<double> out;
    out.reserve(probs.size());
    for (double p : probs) out.push_back(std::log(p));
    return out;
  }
};

namespace detail {

inline std::vector<double> checked_row(const nlohmann::json& row, int vocab,
                                       const std::string& key) {
  if (!row.is_array()) throw ParseError("row for context '" + key + "' is not an array");
  if (static_cast<int>(row.size()) != vocab) {
    throw VocabMismatch("row for context '" + key + "' has length " +
                        std::to_string(row.size()) + ", expected " + std::to_string(vocab));
  }
  std::vector<double> probs;
  probs.reserve(row.size());
  double sum = 0.0;
  for (const auto& v : row) {
    if (!v.is_number()) throw ParseError("non-numeric probability in row '" + key + "'");
    const double p = v.get<double>();
    if (p < 0.0 || !std::isfinite(p)) {
      throw ParseError("probability out of range in row '" + key + "'");
    }
    probs.push_back(p);
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw RowNotNormalized("row for context '" + key + "' sums to " + std::to_string(sum),
                           key, sum);
  }
  return probs;
}

}  // namespace detail

inline TabularModel tabular_from_json(const nlohmann::json& doc, const std::string& origin) {
  if (!doc.is_object()) throw ParseError(origin + ": expected a JSON object");
  TabularModel m;
  try {
    m.vocab = doc.at("vocab_size").get<int>();
    m.context_order = doc.at("context_order").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(origin + ": " + e.what());
  }
  if (m.vocab < 2) throw ParseError(origin + ": vocab_size must be >= 2");
  if (m.context_order < 0) throw ParseError(origin + ": context_order must be >= 0");

  if (doc.contains("eos_ids")) {
    for (const auto& v : doc.at("eos_ids")) {
      const Token t = v.get<Token>();
      if (t < 0 || t >= m.vocab) throw ParseError(origin + ": eos id out of range");
      m.eos.insert(t);
    }
  }

  m.default_log_row =
      TabularModel::to_log_row(detail::checked_row(doc.at("default_row"), m.vocab, "<default>"));

  if (doc.contains("table")) {
    for (const auto& [key, row] : doc.at("table").items()) {
      const TokenSeq ctx = parse_ids(key);
      if (static_cast<int>(ctx.size()) > m.context_order) {
        throw ParseError(origin + ": context key '" + key + "' longer than context_order");
      }
      for (Token t : ctx) {
        if (t < 0 || t >= m.vocab) {
          throw ParseError(origin + ": token out of range in context key '" + key + "'");
        }
      }
      m.log_rows[join_ids(ctx)] = TabularModel::to_log_row(detail::checked_row(row, m.vocab, key));
    }
  }
  return m;
}

inline TabularModel load_tabular(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open model file: " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  return tabular_from_json(doc, path);
}

inline nlohmann::ordered_json tabular_to_json(const TabularModel& m) {
  nlohmann::ordered_json doc;
  doc["vocab_size"] = m.vocab;
  doc["context_order"] = m.context_order;
  doc["eos_ids"] = std::vector<Token>(m.eos.begin(), m.eos.end());
  nlohmann::ordered_json table = nlohmann::ordered_json::object();
  for (const auto& [key, log_row] : m.log_rows) {
    std::vector<double> probs;
    probs.reserve(log_row.size());
    for (double lp : log_row) probs.push_back(std::exp(lp));
    table[key] = probs;
  }
  doc["table"] = std::move(table);
  std::vector<double> def;
  for (double lp : m.default_log_row) def.push_back(std::exp(lp));
  doc["default_row"] = def;
  return doc;
}

/// The two model roles feeding nu must agree on the token space.
inline void require_compatible(const TabularModel& dpo, const TabularModel& sft) {
  if (dpo.vocab != sft.vocab) {
    throw VocabMismatch("model roles declare different vocab sizes: " +
                        std::to_string(dpo.vocab) + " vs " + std::to_string(sft.vocab));
  }
  if (dpo.eos != sft.eos) {
    throw Error("model roles declare different eos id sets");
  }
}

}  // namespace aad::models
