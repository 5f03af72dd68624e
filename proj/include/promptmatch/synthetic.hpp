#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "promptmatch/backend.hpp"
#include "promptmatch/corpus.hpp"
#include "promptmatch/environment.hpp"
#include "promptmatch/error.hpp"
#include "promptmatch/rng.hpp"

namespace promptmatch {

// Desk-scale stand-in for a tuned LLM.
//
// The pool is split round-robin into C hidden clusters. Each cluster owns a
// set of topic words (what an embedding model sees), a marker word that only
// ever appears in queries (what the "LLM" keys on), a gold answer and a
// distractor answer. A query of true cluster c is written with the topic
// words of c with probability 1 - misalignment, otherwise with the topic
// words of another cluster, so nearest-embedding retrieval is misled while
// the marker still identifies c.
struct SyntheticQuery {
  std::string question;
  std::size_t cluster = 0;          // true cluster, decides the gold answer
  std::size_t surface_cluster = 0;  // cluster whose topic words the text uses
  std::string answer;               // gold answer of `cluster`

  bool operator==(const SyntheticQuery&) const = default;
};

struct SyntheticTask {
  std::uint64_t seed = 0;
  std::size_t clusters = 0;
  double misalignment = 0.0;
  PromptPool pool;
  std::vector<std::size_t> pool_clusters;
  std::vector<SyntheticQuery> queries;
  std::vector<std::string> gold_answers;
  std::vector<std::string> distractors;

  bool operator==(const SyntheticTask& o) const {
    return seed == o.seed && clusters == o.clusters && misalignment == o.misalignment &&
           pool.entries() == o.pool.entries() && pool_clusters == o.pool_clusters && queries == o.queries &&
           gold_answers == o.gold_answers && distractors == o.distractors;
  }
};

namespace detail {

class WordFactory {
 public:
  explicit WordFactory(Rng& rng) : rng_(rng) {}

  std::string fresh(std::size_t syllables) {
    static constexpr std::string_view kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r",
                                                   "s", "t", "v", "z", "br", "tr", "kl", "sp", "st", "gr"};
    static constexpr std::string_view kNuclei[] = {"a", "e", "i", "o", "u", "ai", "ou", "ea"};
    while (true) {
      std::string w;
      for (std::size_t s = 0; s < syllables; ++s) {
        w += kOnsets[rng_.below(std::size(kOnsets))];
        w += kNuclei[rng_.below(std::size(kNuclei))];
      }
      if (used_.insert(w).second) return w;
    }
  }

 private:
  Rng& rng_;
  std::set<std::string> used_;
};

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

inline std::vector<std::string> pick(const std::vector<std::string>& from, std::size_t k, Rng& rng) {
  std::vector<std::string> copy = from;
  rng.shuffle(copy);
  copy.resize(std::min(k, copy.size()));
  return copy;
}

inline std::size_t nearest_exemplar(const Vector& query, const EmbeddingSet& set) {
  std::size_t best = 0;
  double best_sim = -2.0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const double s = cosine(query, set[i]);
    if (s > best_sim) {
      best_sim = s;
      best = i;
    }
  }
  return best;
}

}  // namespace detail

struct SyntheticTaskOptions {
  std::uint64_t seed = 0;
  std::size_t clusters = 4;
  std::size_t pool_size = 40;
  std::size_t n_queries = 220;
  double misalignment = 0.0;
  // Queries are redrawn until the nearest pool entry under the hashed
  // encoder of this dimension lies in the query's surface cluster.
  std::size_t encoder_dim = 32;
};

inline SyntheticTask generate_synthetic_task(const SyntheticTaskOptions& opt) {
  if (opt.clusters < 1) throw UsageError("synthetic task needs at least one cluster");
  if (opt.pool_size < opt.clusters) throw UsageError("pool_size must be >= number of clusters");
  if (opt.n_queries < 1) throw UsageError("n_queries must be >= 1");
  if (!(opt.misalignment >= 0.0 && opt.misalignment <= 1.0)) throw UsageError("misalignment must lie in [0, 1]");
  if (opt.clusters == 1 && opt.misalignment > 0.0) throw UsageError("misalignment needs at least two clusters");

  constexpr std::size_t kTopicWords = 6;
  constexpr std::size_t kAnswerWords = 5;
  constexpr std::size_t kFillers = 12;
  constexpr std::size_t kMaxRedraws = 200;
  static constexpr std::string_view kVerbs[] = {"describe", "explain", "summarize", "list", "compare", "outline"};

  Rng rng(opt.seed);
  detail::WordFactory words(rng);
  const std::size_t C = opt.clusters;

  std::vector<std::vector<std::string>> topics(C), answer_words(C);
  std::vector<std::string> markers(C);
  SyntheticTask task;
  task.seed = opt.seed;
  task.clusters = C;
  task.misalignment = opt.misalignment;
  task.gold_answers.resize(C);
  task.distractors.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t k = 0; k < kTopicWords; ++k) topics[c].push_back(words.fresh(3));
    for (std::size_t k = 0; k < kAnswerWords; ++k) answer_words[c].push_back(words.fresh(2));
    markers[c] = words.fresh(3);
    task.gold_answers[c] = "the answer is " + words.fresh(2) + " " + words.fresh(3) + " " + words.fresh(2);
    task.distractors[c] = words.fresh(3) + " " + words.fresh(2) + " " + words.fresh(3) + " instead";
  }
  std::vector<std::string> fillers;
  for (std::size_t k = 0; k < kFillers; ++k) fillers.push_back(words.fresh(1));

  std::vector<PromptTriple> entries;
  for (std::size_t i = 0; i < opt.pool_size; ++i) {
    const std::size_t c = i % C;
    auto q = detail::pick(topics[c], 3, rng);
    q.push_back(fillers[rng.below(fillers.size())]);
    rng.shuffle(q);
    PromptTriple t;
    t.question = std::string(kVerbs[rng.below(std::size(kVerbs))]) + " " + detail::join_words(q);
    t.answer = detail::join_words(detail::pick(answer_words[c], 3, rng));
    entries.push_back(std::move(t));
    task.pool_clusters.push_back(c);
  }
  task.pool = PromptPool(std::move(entries));

  const HashNgramEncoder encoder(opt.encoder_dim);
  const EmbeddingSet pool_embeddings = encode_pool(task.pool, encoder);

  for (std::size_t j = 0; j < opt.n_queries; ++j) {
    SyntheticQuery query;
    query.cluster = rng.below(C);
    query.surface_cluster = query.cluster;
    if (rng.bernoulli(opt.misalignment)) {
      query.surface_cluster = (query.cluster + 1 + rng.below(C - 1)) % C;
    }
    query.answer = task.gold_answers[query.cluster];
    for (std::size_t attempt = 0;; ++attempt) {
      auto q = detail::pick(topics[query.surface_cluster], 3, rng);
      q.push_back(markers[query.cluster]);
      rng.shuffle(q);
      query.question = std::string(kVerbs[rng.below(std::size(kVerbs))]) + " " + detail::join_words(q);
      const std::size_t nearest = detail::nearest_exemplar(encoder(query.question), pool_embeddings);
      if (task.pool_clusters[nearest] == query.surface_cluster) break;
      if (attempt == kMaxRedraws) {
        throw Error("synthetic task: could not draw a query whose nearest exemplar lies in its surface cluster");
      }
    }
    task.queries.push_back(std::move(query));
  }
  return task;
}

// Number of training queries when splitting n queries 900:200.
inline std::size_t train_split_size(std::size_t n) {
  const std::size_t train = (n * 9 + 5) / 11;
  return std::clamp<std::size_t>(train, n > 1 ? 1 : 0, n > 1 ? n - 1 : n);
}

// ---------------------------------------------------------------------------
// Manifest (hidden labels, used for evaluation only)

inline nlohmann::ordered_json task_to_json(const SyntheticTask& task) {
  nlohmann::ordered_json j;
  j["seed"] = task.seed;
  j["clusters"] = task.clusters;
  j["misalignment"] = task.misalignment;
  nlohmann::ordered_json pool = nlohmann::ordered_json::array();
  for (const auto& e : task.pool) {
    pool.push_back({{"question", e.question}, {"answer", e.answer}, {"cluster", task.pool_clusters[e.id]}});
  }
  j["pool"] = pool;
  nlohmann::ordered_json queries = nlohmann::ordered_json::array();
  for (const auto& q : task.queries) {
    queries.push_back(
        {{"question", q.question}, {"answer", q.answer}, {"cluster", q.cluster}, {"surface_cluster", q.surface_cluster}});
  }
  j["queries"] = queries;
  j["gold_answers"] = task.gold_answers;
  j["distractors"] = task.distractors;
  return j;
}

inline SyntheticTask task_from_json(const nlohmann::json& j) {
  try {
    SyntheticTask task;
    task.seed = j.at("seed").get<std::uint64_t>();
    task.clusters = j.at("clusters").get<std::size_t>();
    task.misalignment = j.at("misalignment").get<double>();
    std::vector<PromptTriple> entries;
    for (const auto& e : j.at("pool")) {
      PromptTriple t;
      t.question = e.at("question").get<std::string>();
      t.answer = e.at("answer").get<std::string>();
      entries.push_back(std::move(t));
      task.pool_clusters.push_back(e.at("cluster").get<std::size_t>());
    }
    task.pool = PromptPool(std::move(entries));
    for (const auto& q : j.at("queries")) {
      task.queries.push_back({q.at("question").get<std::string>(), q.at("cluster").get<std::size_t>(),
                              q.at("surface_cluster").get<std::size_t>(), q.at("answer").get<std::string>()});
    }
    task.gold_answers = j.at("gold_answers").get<std::vector<std::string>>();
    task.distractors = j.at("distractors").get<std::vector<std::string>>();
    if (task.gold_answers.size() != task.clusters || task.distractors.size() != task.clusters) {
      throw DataError("manifest: answer lists do not match cluster count");
    }
    for (std::size_t c : task.pool_clusters) {
      if (c >= task.clusters) throw DataError("manifest: pool cluster out of range");
    }
    for (const auto& q : task.queries) {
      if (q.cluster >= task.clusters || q.surface_cluster >= task.clusters) {
        throw DataError("manifest: query cluster out of range");
      }
    }
    return task;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
}

inline SyntheticTask load_task(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  return task_from_json(j);
}

// ---------------------------------------------------------------------------
// Oracle LLM

// Answers from the exemplars found in a composed input. When at least
// ceil(m/2) exemplars come from the query's cluster the gold answer is
// returned; otherwise the distractor of the most frequent foreign cluster
// (smallest cluster id on ties). Zero-shot inputs get the distractor of the
// query's surface cluster.
//
// `noise` > 0 swaps a correct answer for the surface cluster's distractor
// with that probability, decided by a hash of (input, seed).
class SyntheticBackend final : public Backend {
 public:
  SyntheticBackend(const SyntheticTask& task, EnvConfig env, std::uint64_t seed = 0, double noise = 0.0)
      : task_(task), env_(std::move(env)), seed_(seed), noise_(noise) {
    for (const auto& e : task_.pool) exemplar_cluster_.try_emplace(exemplar_key(e.question, e.answer), task_.pool_clusters[e.id]);
    for (std::size_t i = 0; i < task_.queries.size(); ++i) query_index_.try_emplace(task_.queries[i].question, i);
  }

  std::string respond(std::string_view input, const GenerationParams&) override {
    require_input(input);
    ParsedInput parsed = parse_llm_input(input, env_);
    auto q = query_index_.find(parsed.query);
    if (q == query_index_.end()) throw BackendError("synthetic backend: unknown query in input");
    const SyntheticQuery& query = task_.queries[q->second];

    if (parsed.exemplars.empty()) return task_.distractors[query.surface_cluster];

    std::vector<std::size_t> counts(task_.clusters, 0);
    for (const auto& [question, answer] : parsed.exemplars) {
      auto it = exemplar_cluster_.find(exemplar_key(question, answer));
      if (it == exemplar_cluster_.end()) throw BackendError("synthetic backend: exemplar not found in the pool");
      ++counts[it->second];
    }
    const std::size_t m = parsed.exemplars.size();
    if (counts[query.cluster] >= (m + 1) / 2) {
      if (noise_ > 0.0 && noise_draw(input) < noise_) return task_.distractors[query.surface_cluster];
      return query.answer;
    }
    std::size_t best = task_.clusters;
    for (std::size_t c = 0; c < task_.clusters; ++c) {
      if (c == query.cluster || counts[c] == 0) continue;
      if (best == task_.clusters || counts[c] > counts[best]) best = c;
    }
    return task_.distractors[best];
  }

  const SyntheticTask& task() const noexcept { return task_; }

 private:
  static std::string exemplar_key(std::string_view question, std::string_view answer) {
    std::string k(question);
    k += '\x1f';
    k += answer;
    return k;
  }

  double noise_draw(std::string_view input) const {
    const std::uint64_t h = fnv1a64(input) ^ (seed_ * 0x9e3779b97f4a7c15ULL);
    return Rng(h).uniform01();
  }

  const SyntheticTask& task_;
  EnvConfig env_;
  std::uint64_t seed_;
  double noise_;
  std::unordered_map<std::string, std::size_t> exemplar_cluster_;
  std::unordered_map<std::string, std::size_t> query_index_;
};

}  // namespace promptmatch
