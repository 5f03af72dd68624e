#pragma once

#include <algorithm>
#include <string_view>
#include <vector>

#include "promptmatch/corpus.hpp"
#include "promptmatch/error.hpp"

namespace promptmatch {

enum class RewardMode { continuous, discrete };

struct RewardConfig {
  double lambda = 0.2;     // weight of the textual term
  double alpha = 10.0;     // reward scale
  RewardMode mode = RewardMode::continuous;
  double threshold = 0.6;  // discrete cutoff, inclusive

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw UsageError("lambda must lie in [0, 1]");
    if (!(alpha > 0.0)) throw UsageError("alpha must be positive");
    if (!(threshold > 0.0 && threshold < 1.0)) throw UsageError("threshold must lie in (0, 1)");
  }
};

// Byte-level edit distance (unit insert/delete/substitute), two-row DP.
inline std::size_t levenshtein(std::string_view a, std::string_view b) {
  if (a.size() < b.size()) std::swap(a, b);
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// 1 - lev / max(|y|, |y_hat|); two empty strings are identical.
inline double textual_similarity(std::string_view y, std::string_view y_hat) {
  const std::size_t longest = std::max(y.size(), y_hat.size());
  if (longest == 0) return 1.0;
  return 1.0 - static_cast<double>(levenshtein(y, y_hat)) / static_cast<double>(longest);
}

// Cosine of the encodings, clamped below at 0.
inline double semantic_similarity(std::string_view y, std::string_view y_hat, const Encoder& encoder) {
  return std::max(0.0, cosine(encoder(y), encoder(y_hat)));
}

// zeta = lambda * textual + (1 - lambda) * semantic, in [0, 1].
inline double score(std::string_view y, std::string_view y_hat, const RewardConfig& cfg, const Encoder& encoder) {
  const double textual = textual_similarity(y, y_hat);
  if (cfg.lambda == 1.0) return textual;
  const double semantic = semantic_similarity(y, y_hat, encoder);
  return std::clamp(cfg.lambda * textual + (1.0 - cfg.lambda) * semantic, 0.0, 1.0);
}

inline double reward(double zeta, const RewardConfig& cfg) {
  switch (cfg.mode) {
    case RewardMode::continuous:
      return cfg.alpha * zeta;
    case RewardMode::discrete:
      return zeta >= cfg.threshold ? cfg.alpha * zeta : 0.0;
  }
  return 0.0;
}

// Scores LLM outputs against expected answers with a fixed encoder.
class RewardFunction {
 public:
  RewardFunction(RewardConfig cfg, Encoder encoder) : cfg_(cfg), encoder_(std::move(encoder)) { cfg_.validate(); }

  double score(std::string_view output, std::string_view expected) const {
    return promptmatch::score(output, expected, cfg_, encoder_);
  }
  double reward(double zeta) const { return promptmatch::reward(zeta, cfg_); }

  const RewardConfig& config() const noexcept { return cfg_; }

 private:
  RewardConfig cfg_;
  Encoder encoder_;
};

inline std::string_view to_string(RewardMode m) { return m == RewardMode::continuous ? "continuous" : "discrete"; }

inline RewardMode parse_reward_mode(std::string_view s) {
  if (s == "continuous") return RewardMode::continuous;
  if (s == "discrete") return RewardMode::discrete;
  throw UsageError("unknown reward mode '" + std::string(s) + "'");
}

}  // namespace promptmatch
