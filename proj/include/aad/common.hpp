#pragma once

/**
 * Shared vocabulary types, error hierarchy and small numeric helpers used by
 * every other header in the library.
 */

#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace aad {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// ============================================================================
// Errors
// ============================================================================

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct VocabMismatch : Error {
  using Error::Error;
};

/// A token whose reference-model probability is zero where a finite value is required.
struct MaskedToken : Error {
  using Error::Error;
};

struct ParseError : Error {
  int line = -1;
  ParseError(const std::string& what, int line_no = -1) : Error(what), line(line_no) {}
};

struct RowNotNormalized : Error {
  std::string context_key;
  double sum = 0.0;
  RowNotNormalized(const std::string& what, std::string key, double s)
      : Error(what), context_key(std::move(key)), sum(s) {}
};

/// Remote transport failure. Carries how many attempts were made before giving up.
struct BackendUnavailable : Error {
  int attempts = 0;
  BackendUnavailable(const std::string& what, int n) : Error(what), attempts(n) {}
};

struct MalformedResponse : Error {
  using Error::Error;
};

struct BindFailure : Error {
  using Error::Error;
};

struct ExplosionGuard : Error {
  using Error::Error;
};

struct MissingBaseline : Error {
  using Error::Error;
};

// ============================================================================
// Deterministic RNG helpers
// ============================================================================

/// SplitMix64 finalizer. Used wherever a seed has to be derived from another
/// seed plus an index so that streams stay decorrelated but reproducible.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Uniform double in [0, 1) with 53 random bits. Hand-rolled instead of
/// std::uniform_real_distribution so that draws are identical across
/// standard library implementations.
inline double uniform01(std::mt19937_64& gen) {
  return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

// ============================================================================
// Numeric helpers
// ============================================================================

/// Pairwise (cascade) summation: bounds float drift and fixes the reduction
/// order, so sums are reproducible regardless of how work was scheduled.
inline double pairwise_sum(std::span<const double> xs) {
  if (xs.size() <= 8) {
    double acc = 0.0;
    for (double x : xs) acc += x;
    return acc;
  }
  const std::size_t half = xs.size() / 2;
  return pairwise_sum(xs.subspan(0, half)) + pairwise_sum(xs.subspan(half));
}

/// log(sigmoid(z)), stable over the whole double range.
inline double log_sigmoid(double z) {
  if (z >= 0.0) return -std::log1p(std::exp(-z));
  return z - std::log1p(std::exp(z));
}

// ============================================================================
// Key codecs for tabular files
// ============================================================================

/// Comma-joined token ids; empty string for the empty sequence.
inline std::string join_ids(std::span<const Token> toks) {
  std::string out;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i > 0) out.push_back(',');
    out += std::to_string(toks[i]);
  }
  return out;
}

/// "<prompt-key>|<completion-key>" used by tabular reward files.
inline std::string pair_key(std::span<const Token> prompt, std::span<const Token> completion) {
  return join_ids(prompt) + "|" + join_ids(completion);
}

inline TokenSeq parse_ids(const std::string& key) {
  TokenSeq out;
  if (key.empty()) return out;
  std::size_t pos = 0;
  while (pos <= key.size()) {
    std::size_t next = key.find(',', pos);
    if (next == std::string::npos) next = key.size();
    const std::string part = key.substr(pos, next - pos);
    try {
      out.push_back(static_cast<Token>(std::stol(part)));
    } catch (const std::exception&) {
      throw ParseError("bad token id '" + part + "' in key '" + key + "'");
    }
    pos = next + 1;
    if (next == key.size()) break;
  }
  return out;
}

}  // namespace aad
