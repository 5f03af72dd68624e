#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "promptmatch/corpus.hpp"
#include "promptmatch/error.hpp"

namespace promptmatch {

struct EnvConfig {
  std::size_t shots = 1;
  std::string system_prompt;  // v0, empty by default
  std::string separator = "###";

  void validate(std::size_t pool_size) const {
    if (shots < 1) throw UsageError("shots must be >= 1");
    if (shots > pool_size) {
      throw UsageError("shots (" + std::to_string(shots) + ") exceeds pool size (" + std::to_string(pool_size) + ")");
    }
    if (separator.empty()) throw UsageError("separator must be non-empty");
  }
};

// Selection history. indices[0] is always -1; each step appends one pool id.
struct EpisodeState {
  std::vector<std::int64_t> indices{-1};
  std::size_t t = 0;
  std::size_t shots = 1;
  bool terminal = false;

  std::vector<std::size_t> selected() const {
    std::vector<std::size_t> out;
    out.reserve(t);
    for (std::size_t i = 1; i < indices.size(); ++i) out.push_back(static_cast<std::size_t>(indices[i]));
    return out;
  }

  bool operator==(const EpisodeState&) const = default;
};

inline EpisodeState reset_state(std::size_t shots) {
  if (shots < 1) throw UsageError("shots must be >= 1");
  EpisodeState s;
  s.shots = shots;
  return s;
}

inline EpisodeState step(const EpisodeState& state, std::size_t action, std::size_t pool_size) {
  if (state.terminal) throw ContractError("step called on a terminal state");
  if (action >= pool_size) {
    throw ContractError("action " + std::to_string(action) + " out of range for pool of " + std::to_string(pool_size));
  }
  const auto a = static_cast<std::int64_t>(action);
  if (std::find(state.indices.begin() + 1, state.indices.end(), a) != state.indices.end()) {
    throw ContractError("action " + std::to_string(action) + " already selected");
  }
  EpisodeState next = state;
  next.indices.push_back(a);
  next.t += 1;
  next.terminal = next.t == next.shots;
  return next;
}

// l = concat(g, h) where h is the mean embedding of the selections so far.
inline Vector state_representation(const EpisodeState& state, std::span<const double> query_embedding,
                                   const EmbeddingSet& embeddings) {
  const std::size_t d = embeddings.dim;
  if (query_embedding.size() != d) {
    throw DimensionError("query embedding dim " + std::to_string(query_embedding.size()) +
                         " does not match pool dim " + std::to_string(d));
  }
  std::vector<const Vector*> chosen;
  for (std::size_t i : state.selected()) chosen.push_back(&embeddings.vectors.at(i));
  const Vector h = mean_aggregate(chosen, d);
  Vector l(query_embedding.begin(), query_embedding.end());
  l.insert(l.end(), h.begin(), h.end());
  return l;
}

// Builds the LLM input. Blocks are joined with blank lines:
//   [v0]
//   question[\ncontext]   sep   answer   sep     (once per selection, in order)
//   query                 sep
inline std::string compose_blocks(std::span<const PromptTriple* const> exemplars, std::string_view query,
                                  const EnvConfig& cfg) {
  std::vector<std::string_view> blocks;
  std::vector<std::string> owned;
  owned.reserve(exemplars.size());
  if (!cfg.system_prompt.empty()) blocks.push_back(cfg.system_prompt);
  for (const PromptTriple* e : exemplars) {
    owned.push_back(query_text(e->question, e->context));
    blocks.push_back(owned.back());
    blocks.push_back(cfg.separator);
    blocks.push_back(e->answer);
    blocks.push_back(cfg.separator);
  }
  blocks.push_back(query);
  blocks.push_back(cfg.separator);

  std::string text;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (i) text += "\n\n";
    text += blocks[i];
  }
  return text;
}

inline std::string compose_llm_input(const EpisodeState& state, const PromptPool& pool, std::string_view query,
                                     const EnvConfig& cfg) {
  if (!state.terminal) throw ContractError("compose_llm_input requires a terminal state");
  std::vector<const PromptTriple*> chosen;
  for (std::size_t i : state.selected()) chosen.push_back(&pool.at(i));
  return compose_blocks(chosen, query, cfg);
}

// Zero-shot input: v0, the query and the trailing separator.
inline std::string compose_zero_shot(std::string_view query, const EnvConfig& cfg) {
  return compose_blocks({}, query, cfg);
}

// Inverse of compose_blocks.
struct ParsedInput {
  std::string system_prompt;
  std::vector<std::pair<std::string, std::string>> exemplars;  // (question block, answer)
  std::string query;
};

inline ParsedInput parse_llm_input(std::string_view text, const EnvConfig& cfg) {
  const std::string tail = "\n\n" + cfg.separator;
  const std::string delim = tail + "\n\n";
  if (text.size() < tail.size() || text.substr(text.size() - tail.size()) != tail) {
    throw DataError("LLM input does not end with the separator");
  }
  std::string_view body = text.substr(0, text.size() - tail.size());

  ParsedInput parsed;
  if (!cfg.system_prompt.empty()) {
    const std::string prefix = cfg.system_prompt + "\n\n";
    if (body.substr(0, prefix.size()) != prefix) throw DataError("LLM input does not start with the system prompt");
    parsed.system_prompt = cfg.system_prompt;
    body.remove_prefix(prefix.size());
  }

  std::vector<std::string> segments;
  std::size_t pos = 0;
  while (true) {
    const std::size_t hit = body.find(delim, pos);
    if (hit == std::string_view::npos) {
      segments.emplace_back(body.substr(pos));
      break;
    }
    segments.emplace_back(body.substr(pos, hit - pos));
    pos = hit + delim.size();
  }
  if (segments.size() % 2 == 0) throw DataError("LLM input has an unpaired exemplar block");
  for (std::size_t i = 0; i + 1 < segments.size(); i += 2) {
    if (segments[i].empty() || segments[i + 1].empty()) throw DataError("LLM input has an empty exemplar block");
    parsed.exemplars.emplace_back(segments[i], segments[i + 1]);
  }
  parsed.query = segments.back();
  if (parsed.query.empty()) throw DataError("LLM input has an empty query");
  return parsed;
}

// A started episode: the state plus the cached query embedding g.
struct Episode {
  EpisodeState state;
  std::string query;
  Vector query_embedding;
};

// Bundles the pool, its embeddings and the query encoder behind the
// reset/step/observe/compose cycle.
class Environment {
 public:
  Environment(const PromptPool& pool, const EmbeddingSet& embeddings, Encoder encoder, EnvConfig cfg)
      : pool_(pool), embeddings_(embeddings), encoder_(std::move(encoder)), cfg_(std::move(cfg)) {
    if (embeddings_.size() != pool_.size()) {
      throw DimensionError("embedding count " + std::to_string(embeddings_.size()) + " does not match pool size " +
                           std::to_string(pool_.size()));
    }
    cfg_.validate(pool_.size());
  }

  Episode reset(std::string_view query) const {
    if (query.empty()) throw ContractError("query must be non-empty");
    Episode ep{reset_state(cfg_.shots), std::string(query), encoder_(query)};
    if (ep.query_embedding.size() != embeddings_.dim) throw DimensionError("query encoder dim does not match pool");
    return ep;
  }

  // Resets from an embedding computed elsewhere (precomputed query files).
  Episode reset(std::string_view query, Vector query_embedding) const {
    if (query.empty()) throw ContractError("query must be non-empty");
    if (query_embedding.size() != embeddings_.dim) throw DimensionError("query embedding dim does not match pool");
    return Episode{reset_state(cfg_.shots), std::string(query), std::move(query_embedding)};
  }

  void step(Episode& ep, std::size_t action) const { ep.state = promptmatch::step(ep.state, action, pool_.size()); }

  Vector observe(const Episode& ep) const { return state_representation(ep.state, ep.query_embedding, embeddings_); }

  std::string compose(const Episode& ep) const { return compose_llm_input(ep.state, pool_, ep.query, cfg_); }

  const PromptPool& pool() const noexcept { return pool_; }
  const EmbeddingSet& embeddings() const noexcept { return embeddings_; }
  const EnvConfig& config() const noexcept { return cfg_; }
  const Encoder& encoder() const noexcept { return encoder_; }

 private:
  const PromptPool& pool_;
  const EmbeddingSet& embeddings_;
  Encoder encoder_;
  EnvConfig cfg_;
};

}  // namespace promptmatch
