#pragma once

/**
 * Evaluation protocol: run strategies over a prompt set, score completions
 * with an oracle reward source, and report
 *   - R, the average oracle score per strategy, and
 *   - W, the win rate of the designated method against each baseline
 *     (win = strictly higher oracle score, exact tie = 0.5),
 * plus best-of-n sweeps, relative-loss curves across the training
 * regularization strength, and score-difference histograms.
 *
 * Reports are machine-readable: report.json carries the aggregates and the
 * effective config, rows.csv one line per prompt with per-strategy
 * completions and scores in a documented column order. Identical config and
 * seeds produce byte-identical files. Prompt-level work may run on several
 * workers; aggregation order is fixed by the input order.
 */

#include "aad/common.hpp"
#include "aad/decoding.hpp"
#include "aad/parallel.hpp"
#include "aad/rewards.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace aad::eval {

// ============================================================================
// Strategy selection
// ============================================================================

enum class StrategyKind { greedy_sft, greedy_dpo, nucleus, aad, aad_beam, eft, bon };

inline const char* to_label(StrategyKind k) {
  switch (k) {
    case StrategyKind::greedy_sft: return "greedy-sft";
    case StrategyKind::greedy_dpo: return "greedy-dpo";
    case StrategyKind::nucleus: return "nucleus";
    case StrategyKind::aad: return "aad";
    case StrategyKind::aad_beam: return "aad-beam";
    case StrategyKind::eft: return "eft";
    case StrategyKind::bon: return "bon";
  }
  return "?";
}

inline StrategyKind parse_strategy(const std::string& name) {
  for (StrategyKind k :
       {StrategyKind::greedy_sft, StrategyKind::greedy_dpo, StrategyKind::nucleus,
        StrategyKind::aad, StrategyKind::aad_beam, StrategyKind::eft, StrategyKind::bon}) {
    if (name == to_label(k)) return k;
  }
  throw Error("unknown strategy '" + name + "'");
}

inline bool needs_sft(StrategyKind k) {
  return k == StrategyKind::greedy_sft || k == StrategyKind::aad ||
         k == StrategyKind::aad_beam || k == StrategyKind::eft;
}

inline bool needs_dpo(StrategyKind k) { return k != StrategyKind::greedy_sft; }

inline bool needs_picker(StrategyKind k) { return k == StrategyKind::bon; }

template <TokenSource D, TokenSource S, rewards::RewardSourceLike P>
decoding::GenerationRecord run_strategy(StrategyKind kind, const D& dpo, const S& sft,
                                        const P& picker, std::span<const Token> prompt,
                                        const decoding::DecodeConfig& cfg, int bon_n) {
  switch (kind) {
    case StrategyKind::greedy_sft: return decoding::decode_greedy(sft, prompt, cfg, "greedy-sft");
    case StrategyKind::greedy_dpo: return decoding::decode_greedy(dpo, prompt, cfg, "greedy-dpo");
    case StrategyKind::nucleus:
      return decoding::decode_nucleus(dpo, prompt, cfg.nucleus_p, cfg.seed, cfg);
    case StrategyKind::aad: return decoding::decode_aad(dpo, sft, prompt, cfg);
    case StrategyKind::aad_beam: return decoding::decode_aad_beam(dpo, sft, prompt, cfg);
    case StrategyKind::eft: return decoding::decode_eft(dpo, sft, prompt, cfg);
    case StrategyKind::bon: return decoding::decode_best_of_n(dpo, picker, prompt, bon_n, cfg);
  }
  throw Error("run_strategy: bad kind");
}

// ============================================================================
// Prompt files
// ============================================================================

struct PromptEntry {
  std::string id;
  TokenSeq prompt;
};

/// JSONL {"id": string, "prompt": [int]}; a missing id becomes the 0-based
/// line index.
inline std::vector<PromptEntry> load_prompts(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open prompts file: " + path);
  std::vector<PromptEntry> out;
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
    PromptEntry entry;
    entry.id = rec.value("id", std::to_string(out.size()));
    for (const auto& v : rec.at("prompt")) entry.prompt.push_back(v.get<Token>());
    out.push_back(std::move(entry));
  }
  return out;
}

// ============================================================================
// Pairwise comparison report
// ============================================================================

struct EvalCell {
  bool ok = false;
  TokenSeq completion;
  double score = 0.0;
  std::string error;
};

struct EvalRow {
  std::string prompt_id;
  std::vector<EvalCell> cells;  // aligned with EvalReport::labels
};

struct EvalReport {
  std::vector<std::string> labels;  // labels[0] is the method
  std::vector<EvalRow> rows;
  // aggregates (derived from rows; see compute_aggregates)
  long n_prompts = 0;
  std::map<std::string, double> avg_reward;    // R per strategy label
  std::map<std::string, double> win_rate;      // W method-vs-baseline label
  std::map<std::string, long> tie_count;
  std::map<std::string, long> failure_count;
  nlohmann::ordered_json config_echo;
};

/// W from counts in a canonical complement form: the smaller half-unit score
/// is divided, the other side is one minus it, so two independent
/// computations with the roles swapped sum to exactly 1.0.
inline double win_rate_from_counts(long wins, long losses, long ties) {
  const long n = wins + losses + ties;
  if (n == 0) return std::numeric_limits<double>::quiet_NaN();
  const double score = static_cast<double>(wins) + 0.5 * static_cast<double>(ties);
  const double complement = static_cast<double>(losses) + 0.5 * static_cast<double>(ties);
  if (score <= complement) return score / static_cast<double>(n);
  return 1.0 - complement / static_cast<double>(n);
}

/// Recomputes every aggregate from the stored rows (fixed accumulation
/// order). compare() itself uses this, so recomputing after the fact must
/// reproduce the stored aggregates exactly.
inline void compute_aggregates(EvalReport& report) {
  report.n_prompts = static_cast<long>(report.rows.size());
  report.avg_reward.clear();
  report.win_rate.clear();
  report.tie_count.clear();
  report.failure_count.clear();
  for (std::size_t s = 0; s < report.labels.size(); ++s) {
    double sum = 0.0;
    long ok_count = 0;
    long failures = 0;
    for (const EvalRow& row : report.rows) {
      if (row.cells[s].ok) {
        sum += row.cells[s].score;
        ++ok_count;
      } else {
        ++failures;
      }
    }
    const std::string& label = report.labels[s];
    report.avg_reward[label] =
        ok_count > 0 ? sum / static_cast<double>(ok_count)
                     : std::numeric_limits<double>::quiet_NaN();
    report.failure_count[label] = failures;
  }
  for (std::size_t s = 1; s < report.labels.size(); ++s) {
    long wins = 0, losses = 0, ties = 0;
    for (const EvalRow& row : report.rows) {
      const EvalCell& method = row.cells[0];
      const EvalCell& baseline = row.cells[s];
      if (!method.ok || !baseline.ok) continue;
      if (method.score > baseline.score) {
        ++wins;
      } else if (method.score < baseline.score) {
        ++losses;
      } else {
        ++ties;
      }
    }
    report.win_rate[report.labels[s]] = win_rate_from_counts(wins, losses, ties);
    report.tie_count[report.labels[s]] = ties;
  }
}

struct CompareOptions {
  StrategyKind method = StrategyKind::aad;
  std::vector<StrategyKind> baselines;  // compared against the method
  decoding::DecodeConfig cfg;
  int bon_n = 2;
  int workers = 1;
};

/// Runs the method and every baseline on every prompt and scores the
/// completions with the oracle. Prompt i decodes with seed
/// splitmix64(cfg.seed + i); per-prompt failures are recorded and excluded
/// from the aggregates.
template <TokenSource D, TokenSource S, rewards::RewardSourceLike P,
          rewards::RewardSourceLike O>
EvalReport compare(const CompareOptions& opt, const std::vector<PromptEntry>& prompts,
                   const D& dpo, const S& sft, const P& picker, const O& oracle) {
  if (prompts.empty()) throw Error("compare: no prompts");
  EvalReport report;
  report.labels.push_back(to_label(opt.method));
  for (StrategyKind k : opt.baselines) report.labels.push_back(to_label(k));

  std::vector<StrategyKind> kinds{opt.method};
  kinds.insert(kinds.end(), opt.baselines.begin(), opt.baselines.end());

  report.rows = parallel_map<EvalRow>(prompts.size(), opt.workers, [&](std::size_t i) {
    EvalRow row;
    row.prompt_id = prompts[i].id;
    decoding::DecodeConfig cfg = opt.cfg;
    cfg.seed = splitmix64(opt.cfg.seed + i);
    for (StrategyKind kind : kinds) {
      EvalCell cell;
      try {
        const auto rec = run_strategy(kind, dpo, sft, picker, prompts[i].prompt, cfg, opt.bon_n);
        cell.completion = rec.tokens;
        cell.score = oracle.score(prompts[i].prompt, rec.tokens);
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
      }
      row.cells.push_back(std::move(cell));
    }
    return row;
  });

  compute_aggregates(report);
  report.config_echo = decoding::config_json(opt.cfg);
  report.config_echo["method"] = to_label(opt.method);
  report.config_echo["bon_n"] = opt.bon_n;
  return report;
}

// ============================================================================
// Report files
// ============================================================================

inline nlohmann::ordered_json report_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["config"] = report.config_echo;
  j["strategies"] = report.labels;
  nlohmann::ordered_json agg;
  agg["n_prompts"] = report.n_prompts;
  agg["R"] = report.avg_reward;
  agg["W"] = report.win_rate;
  agg["tie_count"] = report.tie_count;
  agg["failures"] = report.failure_count;
  j["aggregates"] = std::move(agg);
  return j;
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void atomic_write(const std::string& path, const std::string& body) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open output file: " + tmp);
    out << body;
    out.flush();
    if (!out) {
      std::remove(tmp.c_str());
      throw Error("write failed: " + tmp);
    }
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

/// Column order: prompt_id, then per strategy (report order) a
/// "<label>_tokens" column (space-joined ids, empty on failure) and a
/// "<label>_score" column (full precision, empty on failure).
inline std::string rows_csv(const EvalReport& report) {
  std::string out = "prompt_id";
  for (const auto& label : report.labels) {
    out += "," + label + "_tokens," + label + "_score";
  }
  out += "\n";
  for (const EvalRow& row : report.rows) {
    out += row.prompt_id;
    for (const EvalCell& cell : row.cells) {
      out += ",";
      if (cell.ok) {
        for (std::size_t i = 0; i < cell.completion.size(); ++i) {
          if (i > 0) out += " ";
          out += std::to_string(cell.completion[i]);
        }
      }
      out += ",";
      if (cell.ok) out += detail::fmt_double(cell.score);
    }
    out += "\n";
  }
  return out;
}

inline void write_report(const EvalReport& report, const std::string& json_path,
                         const std::string& csv_path) {
  detail::atomic_write(json_path, report_json(report).dump(2) + "\n");
  detail::atomic_write(csv_path, rows_csv(report));
}

// ============================================================================
// Best-of-n sweep
// ============================================================================

struct SweepTable {
  std::vector<int> n_values;
  std::vector<std::string> picker_labels;
  // mean oracle score of the picked completion, per picker and n
  std::map<std::string, std::map<int, double>> mean_by_picker;
  // mean oracle score over all n candidates (expected value of a random pick)
  std::map<int, double> random_selection;
  int parity_n = 2;  // n at which best-of-n costs as much as the aligned decoder
  nlohmann::ordered_json config_echo;
};

/// Per (picker, n): mean oracle score of the best-of-n output over the
/// prompts, plus the random-selection baseline. Candidate seeds follow the
/// best-of-n derivation, so candidate sets are shared across pickers and
/// nested across n.
template <TokenSource D, rewards::RewardSourceLike O>
SweepTable bon_sweep(const std::vector<PromptEntry>& prompts, const D& dpo,
                     const std::vector<std::pair<std::string, rewards::FnReward>>& pickers,
                     const O& oracle, const std::vector<int>& n_values,
                     const decoding::DecodeConfig& cfg, int workers = 1) {
  if (prompts.empty()) throw Error("bon_sweep: no prompts");
  if (n_values.empty() || !std::is_sorted(n_values.begin(), n_values.end())) {
    throw Error("bon_sweep: n values must be sorted ascending");
  }
  SweepTable table;
  table.n_values = n_values;
  for (const auto& [label, _] : pickers) table.picker_labels.push_back(label);
  table.config_echo = decoding::config_json(cfg);

  struct PromptResult {
    // picker index -> n index -> oracle score of the pick
    std::vector<std::vector<double>> picked;
    // n index -> mean candidate oracle score
    std::vector<double> random_mean;
  };
  const int max_n = n_values.back();

  const auto results = parallel_map<PromptResult>(prompts.size(), workers, [&](std::size_t i) {
    decoding::DecodeConfig pcfg = cfg;
    pcfg.seed = splitmix64(cfg.seed + i);
    // generate the max_n candidates once; smaller n use the prefix
    std::vector<decoding::GenerationRecord> cands;
    std::vector<double> oracle_scores;
    for (int c = 0; c < max_n; ++c) {
      cands.push_back(decoding::decode_nucleus(dpo, prompts[i].prompt, pcfg.nucleus_p,
                                               decoding::candidate_seed(pcfg.seed, c), pcfg));
      oracle_scores.push_back(oracle.score(prompts[i].prompt, cands.back().tokens));
    }
    PromptResult res;
    res.picked.resize(pickers.size());
    for (std::size_t p = 0; p < pickers.size(); ++p) {
      std::vector<double> picker_scores;
      for (const auto& cand : cands) {
        picker_scores.push_back(pickers[p].second.score(prompts[i].prompt, cand.tokens));
      }
      for (int n : n_values) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < static_cast<std::size_t>(n); ++c) {
          if (picker_scores[c] > picker_scores[best]) best = c;
        }
        res.picked[p].push_back(oracle_scores[best]);
      }
    }
    for (int n : n_values) {
      double sum = 0.0;
      for (int c = 0; c < n; ++c) sum += oracle_scores[static_cast<std::size_t>(c)];
      res.random_mean.push_back(sum / n);
    }
    return res;
  });

  const double denom = static_cast<double>(prompts.size());
  for (std::size_t p = 0; p < pickers.size(); ++p) {
    for (std::size_t ni = 0; ni < n_values.size(); ++ni) {
      double sum = 0.0;
      for (const auto& res : results) sum += res.picked[p][ni];
      table.mean_by_picker[pickers[p].first][n_values[ni]] = sum / denom;
    }
  }
  for (std::size_t ni = 0; ni < n_values.size(); ++ni) {
    double sum = 0.0;
    for (const auto& res : results) sum += res.random_mean[ni];
    table.random_selection[n_values[ni]] = sum / denom;
  }
  return table;
}

inline nlohmann::ordered_json sweep_json(const SweepTable& table) {
  nlohmann::ordered_json j;
  j["config"] = table.config_echo;
  j["n_values"] = table.n_values;
  j["compute_parity_n"] = table.parity_n;
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (const auto& label : table.picker_labels) {
    for (int n : table.n_values) {
      rows.push_back({{"picker", label},
                      {"n", n},
                      {"mean_oracle_score", table.mean_by_picker.at(label).at(n)}});
    }
  }
  for (int n : table.n_values) {
    rows.push_back(
        {{"picker", "random"}, {"n", n}, {"mean_oracle_score", table.random_selection.at(n)}});
  }
  j["rows"] = std::move(rows);
  return j;
}

// ============================================================================
// Regularization-strength sensitivity
// ============================================================================

struct BetaPoint {
  double loss = 0.0;
  bool absolute_fallback = false;  // |R_base| < 1e-9: loss is R_base - R_beta
};

struct BetaCurve {
  double base_beta = 0.0;
  std::vector<double> betas;  // sorted ascending
  std::map<std::string, std::map<double, BetaPoint>> by_strategy;
};

/// Relative loss (R_base - R_beta) / |R_base| per strategy, with an absolute
/// fallback when the baseline reward is within 1e-9 of zero.
inline BetaCurve beta_relative_loss(const std::map<double, EvalReport>& runs,
                                    double base_beta) {
  const auto base_it = runs.find(base_beta);
  if (base_it == runs.end()) {
    throw MissingBaseline("no run at base beta " + std::to_string(base_beta));
  }
  BetaCurve curve;
  curve.base_beta = base_beta;
  for (const auto& [beta, _] : runs) curve.betas.push_back(beta);
  for (const auto& [label, r_base] : base_it->second.avg_reward) {
    for (const auto& [beta, report] : runs) {
      const auto it = report.avg_reward.find(label);
      if (it == report.avg_reward.end()) {
        throw Error("beta_relative_loss: strategy '" + label + "' missing from beta " +
                    std::to_string(beta));
      }
      BetaPoint point;
      if (std::abs(r_base) < 1e-9) {
        point.loss = r_base - it->second;
        point.absolute_fallback = true;
      } else {
        point.loss = (r_base - it->second) / std::abs(r_base);
      }
      curve.by_strategy[label][beta] = point;
    }
  }
  return curve;
}

// ============================================================================
// Score-difference histogram
// ============================================================================

struct Histogram {
  double bin_width = 0.0;
  double start = 0.0;  // left edge of the first bin
  std::vector<long> counts;
  long n = 0;
  double mean_diff = 0.0;
};

/// Binned per-prompt score differences (a - b); edges are deterministic
/// multiples of the bin width.
inline Histogram score_histogram(const EvalReport& report, const std::string& strategy_a,
                                 const std::string& strategy_b, double bin_width) {
  if (!(bin_width > 0.0)) throw Error("score_histogram: bin width must be positive");
  const auto index_of = [&](const std::string& label) -> std::size_t {
    for (std::size_t i = 0; i < report.labels.size(); ++i) {
      if (report.labels[i] == label) return i;
    }
    throw Error("score_histogram: strategy '" + label + "' not in report");
  };
  const std::size_t ia = index_of(strategy_a);
  const std::size_t ib = index_of(strategy_b);

  std::vector<double> diffs;
  for (const EvalRow& row : report.rows) {
    if (row.cells[ia].ok && row.cells[ib].ok) {
      diffs.push_back(row.cells[ia].score - row.cells[ib].score);
    }
  }
  Histogram h;
  h.bin_width = bin_width;
  h.n = static_cast<long>(diffs.size());
  if (diffs.empty()) return h;
  const auto [lo_it, hi_it] = std::minmax_element(diffs.begin(), diffs.end());
  h.start = std::floor(*lo_it / bin_width) * bin_width;
  const long bins =
      std::max<long>(1, static_cast<long>(std::floor((*hi_it - h.start) / bin_width)) + 1);
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  double sum = 0.0;
  for (double d : diffs) {
    long idx = static_cast<long>(std::floor((d - h.start) / bin_width));
    idx = std::clamp<long>(idx, 0, bins - 1);
    ++h.counts[static_cast<std::size_t>(idx)];
    sum += d;
  }
  h.mean_diff = sum / static_cast<double>(h.n);
  return h;
}

}  // namespace aad::eval
