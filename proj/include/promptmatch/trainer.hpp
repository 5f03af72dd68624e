#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "promptmatch/backend.hpp"
#include "promptmatch/corpus.hpp"
#include "promptmatch/environment.hpp"
#include "promptmatch/error.hpp"
#include "promptmatch/policy.hpp"
#include "promptmatch/reward.hpp"
#include "promptmatch/rng.hpp"
#include "promptmatch/synthetic.hpp"

namespace promptmatch {

// A user query with its expected answer. `cluster` is only known for
// synthetic tasks and enables the selection-accuracy metric.
struct QueryItem {
  std::string question;
  std::string context;
  std::string expected;
  std::optional<std::size_t> cluster;
  Vector embedding;  // filled by embed_queries

  std::string text() const { return query_text(question, context); }
};

inline std::vector<QueryItem> queries_from_pool(const PromptPool& records) {
  std::vector<QueryItem> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back({r.question, r.context, r.answer, std::nullopt, {}});
  return out;
}

inline std::vector<QueryItem> queries_from_task(const SyntheticTask& task, std::size_t begin, std::size_t end) {
  std::vector<QueryItem> out;
  for (std::size_t i = begin; i < end && i < task.queries.size(); ++i) {
    const auto& q = task.queries[i];
    out.push_back({q.question, "", q.answer, q.cluster, {}});
  }
  return out;
}

inline void embed_queries(std::vector<QueryItem>& queries, const Encoder& encoder) {
  for (auto& q : queries) q.embedding = encoder(q.text());
}

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double momentum = 0.0;  // 0 = plain gradient ascent
  double gamma = 1.0;
  double baseline_beta = 0.9;
  std::uint64_t seed = 0;
  RewardConfig reward;
  EnvConfig env;
  GenerationParams generation;

  void validate() const {
    if (epochs < 1) throw UsageError("epochs must be >= 1");
    if (batch_size < 1) throw UsageError("batch_size must be >= 1");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw UsageError("gamma must lie in [0, 1]");
    if (!(baseline_beta >= 0.0 && baseline_beta < 1.0)) throw UsageError("baseline_beta must lie in [0, 1)");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw UsageError("momentum must lie in [0, 1)");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw UsageError("lr must be a finite non-negative number");
    reward.validate();
    generation.validate();
  }
};

struct TrajectoryStep {
  Vector state;
  std::size_t action = 0;
  double log_prob = 0.0;
  double entropy = 0.0;
};

struct Trajectory {
  std::vector<TrajectoryStep> steps;
  std::string llm_input;
  std::string output;
  double score = 0.0;
  double reward = 0.0;
  Vector returns;  // G_t = gamma^(m-1-t) * reward

  std::vector<std::size_t> actions() const {
    std::vector<std::size_t> a;
    for (const auto& s : steps) a.push_back(s.action);
    return a;
  }
};

inline Vector discounted_returns(std::size_t steps, double terminal_reward, double gamma) {
  Vector g(steps, 0.0);
  double running = terminal_reward;
  for (std::size_t t = steps; t-- > 0;) {
    g[t] = running;
    running *= gamma;
  }
  return g;
}

// Samples one episode, queries the backend once at the terminal state and
// scores the output against the query's expected answer.
inline Trajectory rollout(const MatchingNetParams& params, const KeyCache& keys, const Environment& env,
                          Backend& backend, const RewardFunction& reward_fn, const QueryItem& query, double gamma,
                          Rng& rng, const GenerationParams& generation = {}) {
  Episode ep = query.embedding.empty() ? env.reset(query.text()) : env.reset(query.text(), query.embedding);
  Trajectory traj;
  while (!ep.state.terminal) {
    Vector l = env.observe(ep);
    const auto chosen = ep.state.selected();
    const ActionDistribution dist = forward(params, keys, l, chosen);
    const std::size_t a = sample_action(dist, rng);
    traj.steps.push_back({std::move(l), a, std::log(dist.probs[a]), dist.entropy()});
    env.step(ep, a);
  }
  traj.llm_input = env.compose(ep);
  try {
    traj.output = backend.respond(traj.llm_input, generation);
  } catch (const Error& e) {
    throw BackendError("rollout for query '" + query.question.substr(0, 60) + "': " + e.what());
  }
  traj.score = reward_fn.score(traj.output, query.expected);
  traj.reward = reward_fn.reward(traj.score);
  traj.returns = discounted_returns(traj.steps.size(), traj.reward, gamma);
  return traj;
}

struct UpdateStats {
  double mean_score = 0.0;
  double mean_reward = 0.0;
  double baseline = 0.0;  // after the update
  double entropy = 0.0;   // mean over all steps in the batch
  double grad_norm = 0.0;
};

struct UpdateResult {
  MatchingNetParams params;
  double baseline = 0.0;
  UpdateStats stats;
  PolicyGradient gradient;
};

// REINFORCE with a moving-average baseline:
//   g = mean_batch sum_t (G_t - b) grad log pi(a_t | s_t)
//   params' = params + lr * g        (or lr * velocity with momentum)
//   b' = beta b + (1 - beta) mean(G_0)
inline UpdateResult reinforce_update(const MatchingNetParams& params, const KeyCache& keys,
                                     std::span<const Trajectory> batch, double baseline, double lr, double beta,
                                     PolicyGradient* velocity = nullptr, double momentum = 0.0) {
  if (batch.empty()) throw ContractError("reinforce_update: empty batch");
  const double inv_batch = 1.0 / static_cast<double>(batch.size());

  ScoreGradientAccumulator acc(params, keys);
  UpdateStats stats;
  double mean_first_return = 0.0;
  std::size_t step_count = 0;
  for (const Trajectory& traj : batch) {
    std::vector<std::size_t> previous;
    for (std::size_t t = 0; t < traj.steps.size(); ++t) {
      const auto& s = traj.steps[t];
      acc.add(s.state, previous, s.action, (traj.returns[t] - baseline) * inv_batch);
      previous.push_back(s.action);
      stats.entropy += s.entropy;
      ++step_count;
    }
    stats.mean_score += traj.score * inv_batch;
    stats.mean_reward += traj.reward * inv_batch;
    mean_first_return += (traj.returns.empty() ? traj.reward : traj.returns.front()) * inv_batch;
  }
  PolicyGradient grad = std::move(acc).finish();
  stats.grad_norm = std::sqrt(squared_norm(grad));
  if (!std::isfinite(stats.grad_norm)) {
    throw NumericError("non-finite policy gradient (baseline " + std::to_string(baseline) + ", mean reward " +
                       std::to_string(stats.mean_reward) + ", batch " + std::to_string(batch.size()) + ")");
  }
  stats.entropy = step_count ? stats.entropy / static_cast<double>(step_count) : 0.0;

  UpdateResult result;
  if (velocity != nullptr) {
    if (!velocity->same_shape(grad)) *velocity = zeros_like(params);
    PolicyGradient v = zeros_like(params);
    axpy(momentum, *velocity, v);
    axpy(1.0, grad, v);
    *velocity = v;
    result.params = apply_update(params, v, lr);
  } else {
    result.params = apply_update(params, grad, lr);
  }
  result.baseline = beta * baseline + (1.0 - beta) * mean_first_return;
  stats.baseline = result.baseline;
  result.stats = stats;
  result.gradient = std::move(grad);
  return result;
}

struct TrainLogRow {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double mean_score = 0.0;
  double mean_reward = 0.0;
  double baseline = 0.0;
  double entropy = 0.0;
  double grad_norm = 0.0;
};

struct TrainResult {
  MatchingNetParams params;
  std::vector<TrainLogRow> log;
  double baseline = 0.0;
};

inline void write_train_log(std::ostream& out, std::span<const TrainLogRow> rows) {
  out << "epoch,batch,mean_score,mean_reward,baseline,entropy,grad_norm\n";
  const auto old_precision = out.precision(std::numeric_limits<double>::max_digits10);
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.batch << ',' << r.mean_score << ',' << r.mean_reward << ',' << r.baseline << ','
        << r.entropy << ',' << r.grad_norm << '\n';
  }
  out.precision(old_precision);
}

using TrainObserver = std::function<void(const TrainLogRow&)>;

// Runs cfg.epochs passes over `queries` in seeded random order, one
// REINFORCE update per batch. Weights are kept on the binary32 grid after
// every update so the final checkpoint is lossless.
inline TrainResult train(const TrainConfig& cfg, const Environment& env, std::vector<QueryItem> queries,
                         Backend& backend, const RewardFunction& reward_fn, MatchingNetParams initial,
                         const TrainObserver& observer = {}) {
  cfg.validate();
  if (queries.empty()) throw UsageError("no training queries");
  for (auto& q : queries) {
    if (q.expected.empty()) throw DataError("training query without expected answer: " + q.question.substr(0, 60));
    if (q.embedding.empty()) q.embedding = env.encoder()(q.text());
  }

  Rng rng(cfg.seed);
  TrainResult result;
  result.params = std::move(initial);
  round_to_f32(result.params);
  PolicyGradient velocity;
  PolicyGradient* velocity_ptr = cfg.momentum > 0.0 ? &velocity : nullptr;

  std::vector<std::size_t> order(queries.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<Trajectory> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const KeyCache keys = compute_keys(result.params, env.embeddings());
      batch.clear();
      try {
        for (std::size_t k = start; k < stop; ++k) {
          batch.push_back(rollout(result.params, keys, env, backend, reward_fn, queries[order[k]], cfg.gamma, rng,
                                  cfg.generation));
        }
        UpdateResult upd = reinforce_update(result.params, keys, batch, result.baseline, cfg.lr, cfg.baseline_beta,
                                            velocity_ptr, cfg.momentum);
        result.params = std::move(upd.params);
        round_to_f32(result.params);
        result.baseline = upd.baseline;
        const auto& s = upd.stats;
        result.log.push_back({epoch, batch_index, s.mean_score, s.mean_reward, s.baseline, s.entropy, s.grad_norm});
      } catch (const BackendError& e) {
        throw BackendError("epoch " + std::to_string(epoch) + " batch " + std::to_string(batch_index) + ": " +
                           e.what());
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(batch_index) + ": " +
                           e.what());
      }
      if (observer) observer(result.log.back());
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Selection and evaluation

// Top-m pool indices by cosine to the query embedding, ties to the smaller
// index.
inline std::vector<std::size_t> simmatch_select(std::span<const double> query_embedding, const EmbeddingSet& set,
                                                std::size_t m) {
  if (m > set.size()) throw UsageError("simmatch: m exceeds pool size");
  std::vector<double> sims(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) sims[i] = cosine(query_embedding, set[i]);
  std::vector<std::size_t> idx(set.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
  idx.resize(m);
  return idx;
}

inline std::vector<std::size_t> random_select(std::size_t n, std::size_t m, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < m; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  idx.resize(m);
  return idx;
}

// Runs the policy to a terminal state, greedily or by sampling.
inline Episode policy_episode(const MatchingNetParams& params, const KeyCache& keys, const Environment& env,
                              const QueryItem& query, bool greedy, Rng* rng = nullptr) {
  Episode ep = query.embedding.empty() ? env.reset(query.text()) : env.reset(query.text(), query.embedding);
  while (!ep.state.terminal) {
    const ActionDistribution dist = forward(params, keys, env.observe(ep), ep.state.selected());
    env.step(ep, greedy ? greedy_action(dist) : sample_action(dist, *rng));
  }
  return ep;
}

enum class Selector { policy_greedy, policy_sampled, simmatch, random, zero_shot };

inline std::string_view to_string(Selector s) {
  switch (s) {
    case Selector::policy_greedy: return "policy-greedy";
    case Selector::policy_sampled: return "policy-sampled";
    case Selector::simmatch: return "simmatch";
    case Selector::random: return "random";
    case Selector::zero_shot: return "zero-shot";
  }
  return "?";
}

inline Selector parse_selector(std::string_view s) {
  for (Selector sel : {Selector::policy_greedy, Selector::policy_sampled, Selector::simmatch, Selector::random,
                       Selector::zero_shot}) {
    if (s == to_string(sel)) return sel;
  }
  if (s == "policy") return Selector::policy_greedy;
  throw UsageError("unknown selector '" + std::string(s) + "'");
}

inline bool needs_policy(Selector s) { return s == Selector::policy_greedy || s == Selector::policy_sampled; }

struct Metrics {
  std::string selector;
  std::size_t n = 0;
  double mean_score = 0.0;
  double mean_reward = 0.0;
  std::optional<double> selection_accuracy;
  std::size_t backend_failures = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["selector"] = selector;
    j["n"] = n;
    j["mean_score"] = mean_score;
    j["mean_reward"] = mean_reward;
    if (selection_accuracy) j["selection_accuracy"] = *selection_accuracy;
    j["backend_failures"] = backend_failures;
    return j;
  }
};

struct EvalOptions {
  const MatchingNetParams* params = nullptr;     // required for policy selectors
  std::span<const std::size_t> pool_clusters;    // hidden labels, synthetic tasks only
  std::uint64_t seed = 0;
  GenerationParams generation;
};

inline std::vector<std::size_t> select_exemplars(Selector selector, const Environment& env, const QueryItem& query,
                                                 const KeyCache* keys, const MatchingNetParams* params, Rng& rng) {
  const std::size_t m = env.config().shots;
  switch (selector) {
    case Selector::policy_greedy:
    case Selector::policy_sampled:
      return policy_episode(*params, *keys, env, query, selector == Selector::policy_greedy, &rng).state.selected();
    case Selector::simmatch: {
      const Vector g = query.embedding.empty() ? env.encoder()(query.text()) : query.embedding;
      return simmatch_select(g, env.embeddings(), m);
    }
    case Selector::random:
      return random_select(env.pool().size(), m, rng);
    case Selector::zero_shot:
      return {};
  }
  return {};
}

// Mean score and reward of a selector over a query set. Backend failures
// are counted and excluded from the means rather than aborting.
inline Metrics evaluate(Selector selector, const Environment& env, std::span<const QueryItem> queries,
                        Backend& backend, const RewardFunction& reward_fn, const EvalOptions& opt = {}) {
  if (needs_policy(selector) && opt.params == nullptr) throw UsageError("policy selector requires parameters");
  std::optional<KeyCache> keys;
  if (needs_policy(selector)) keys = compute_keys(*opt.params, env.embeddings());

  Rng rng(opt.seed);
  Metrics metrics;
  metrics.selector = std::string(to_string(selector));
  double hits = 0.0;
  std::size_t labelled = 0;
  for (const QueryItem& query : queries) {
    const auto chosen = select_exemplars(selector, env, query, keys ? &*keys : nullptr, opt.params, rng);

    std::string input;
    if (selector == Selector::zero_shot) {
      input = compose_zero_shot(query.text(), env.config());
    } else {
      EpisodeState s = reset_state(env.config().shots);
      for (std::size_t a : chosen) s = step(s, a, env.pool().size());
      input = compose_llm_input(s, env.pool(), query.text(), env.config());
    }

    std::string output;
    try {
      output = backend.respond(input, opt.generation);
    } catch (const BackendError&) {
      ++metrics.backend_failures;
      continue;
    }
    const double zeta = reward_fn.score(output, query.expected);
    metrics.mean_score += zeta;
    metrics.mean_reward += reward_fn.reward(zeta);
    ++metrics.n;

    if (query.cluster && !opt.pool_clusters.empty() && !chosen.empty()) {
      double in_cluster = 0.0;
      for (std::size_t a : chosen) in_cluster += opt.pool_clusters[a] == *query.cluster ? 1.0 : 0.0;
      hits += in_cluster / static_cast<double>(chosen.size());
      ++labelled;
    }
  }
  if (metrics.n > 0) {
    metrics.mean_score /= static_cast<double>(metrics.n);
    metrics.mean_reward /= static_cast<double>(metrics.n);
  }
  if (labelled > 0) metrics.selection_accuracy = hits / static_cast<double>(labelled);
  return metrics;
}

// Greedy inference for a single query.
struct MatchResult {
  std::vector<std::size_t> indices;
  std::string llm_input;
};

inline MatchResult match_query(const MatchingNetParams& params, const Environment& env, const QueryItem& query) {
  const KeyCache keys = compute_keys(params, env.embeddings());
  const Episode ep = policy_episode(params, keys, env, query, true);
  return {ep.state.selected(), env.compose(ep)};
}

}  // namespace promptmatch
