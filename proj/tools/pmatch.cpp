// pmatch: train and apply an exemplar-selection policy.
//
//   pmatch pool-validate POOL
//   pmatch synth --out-dir DIR [--seed S --clusters C --pool-size N --queries Q --misalignment R]
//   pmatch config [--profile desk|paper] [--config FILE] [overrides]
//   pmatch train --pool POOL --train-queries FILE --checkpoint OUT [--log CSV] [--backend ...]
//   pmatch eval --pool POOL --test-queries FILE --selector S [--checkpoint CKPT] [--metrics-out JSON]
//   pmatch match --pool POOL --checkpoint CKPT --query TEXT [--shots M]
//   pmatch smoke --input TEXT [--backend ...]
//
// Exit codes: 0 success, 1 data/validation failure, 2 usage error,
// 3 backend or runtime failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>

#include "CLI11.hpp"

#include "promptmatch/promptmatch.hpp"

namespace pm = promptmatch;
namespace fs = std::filesystem;

namespace {

constexpr int kExitData = 1;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

// Flags shared by train/eval/match/smoke. Every value is optional so that
// only flags given on the command line override the profile and config file.
struct CommonFlags {
  std::string config_path;
  std::optional<std::string> profile;
  std::optional<std::string> pool, train_queries, test_queries, pool_embeddings, query_embeddings;
  std::optional<std::string> checkpoint, log, recording, recording_mode, manifest, backend;
  std::optional<std::string> url, model, credential_env;
  std::optional<double> timeout_s;
  std::optional<int> retries, max_in_flight;
  std::optional<std::size_t> epochs, batch_size, shots, embed_dim, hidden, out;
  std::optional<double> lr, momentum, gamma, baseline_beta, lambda, alpha, threshold;
  std::optional<std::string> reward_mode, system_prompt, separator;
  std::optional<std::uint64_t> seed;
};

void add_common_flags(CLI::App& cmd, CommonFlags& f) {
  cmd.add_option("--config", f.config_path, "Flat JSON config file");
  cmd.add_option("--profile", f.profile, "desk or paper");
  cmd.add_option("--pool", f.pool, "Prompt pool file");
  cmd.add_option("--train-queries", f.train_queries, "Training queries (pool record format)");
  cmd.add_option("--test-queries", f.test_queries, "Test queries (pool record format)");
  cmd.add_option("--pool-embeddings", f.pool_embeddings, "Precomputed pool embeddings");
  cmd.add_option("--query-embeddings", f.query_embeddings, "Precomputed query embeddings");
  cmd.add_option("--checkpoint", f.checkpoint, "Policy checkpoint");
  cmd.add_option("--log", f.log, "Training log CSV");
  cmd.add_option("--recording", f.recording, "Replay recording file");
  cmd.add_option("--recording-mode", f.recording_mode, "replay, replay-fallback or record");
  cmd.add_option("--manifest", f.manifest, "Synthetic task manifest");
  cmd.add_option("--backend", f.backend, "synthetic, http or replay");
  cmd.add_option("--url", f.url, "Completion endpoint URL");
  cmd.add_option("--model", f.model, "Model name sent to the endpoint");
  cmd.add_option("--credential-env", f.credential_env, "Environment variable holding the API key");
  cmd.add_option("--timeout-s", f.timeout_s, "Request timeout in seconds");
  cmd.add_option("--retries", f.retries, "Retries on retryable HTTP failures");
  cmd.add_option("--max-in-flight", f.max_in_flight, "Concurrent HTTP requests");
  cmd.add_option("--epochs", f.epochs);
  cmd.add_option("--batch-size", f.batch_size);
  cmd.add_option("--shots", f.shots, "Number of exemplars m");
  cmd.add_option("--embed-dim", f.embed_dim, "Hash encoder dimension");
  cmd.add_option("--hidden", f.hidden);
  cmd.add_option("--out", f.out, "Matching net output size");
  cmd.add_option("--lr", f.lr);
  cmd.add_option("--momentum", f.momentum);
  cmd.add_option("--gamma", f.gamma);
  cmd.add_option("--baseline-beta", f.baseline_beta);
  cmd.add_option("--lambda", f.lambda, "Weight of the textual similarity");
  cmd.add_option("--alpha", f.alpha, "Reward scale");
  cmd.add_option("--threshold", f.threshold, "Discrete reward cutoff");
  cmd.add_option("--reward-mode", f.reward_mode, "continuous or discrete");
  cmd.add_option("--system-prompt", f.system_prompt);
  cmd.add_option("--separator", f.separator);
  cmd.add_option("--seed", f.seed);
}

pm::RunConfig resolve(const CommonFlags& f) {
  pm::RunConfig rc;
  if (f.profile) rc.profile = pm::profile_by_name(*f.profile);
  if (!f.config_path.empty()) {
    rc.load_file(f.config_path);
    if (f.profile) {
      // An explicit flag wins over the file's profile; re-apply the file on top of it.
      pm::RunConfig again;
      again.profile = pm::profile_by_name(*f.profile);
      std::ifstream in(f.config_path);
      nlohmann::json j;
      in >> j;
      j.erase("profile");
      again.apply_json(j);
      rc = again;
    }
  }
  auto set = [](auto& dst, const auto& src) {
    if (src) dst = *src;
  };
  set(rc.pool, f.pool);
  set(rc.train_queries, f.train_queries);
  set(rc.test_queries, f.test_queries);
  set(rc.pool_embeddings, f.pool_embeddings);
  set(rc.query_embeddings, f.query_embeddings);
  set(rc.checkpoint, f.checkpoint);
  set(rc.log, f.log);
  set(rc.recording, f.recording);
  set(rc.recording_mode, f.recording_mode);
  set(rc.manifest, f.manifest);
  set(rc.backend, f.backend);
  set(rc.endpoint.url, f.url);
  set(rc.endpoint.model, f.model);
  set(rc.endpoint.credential_env, f.credential_env);
  set(rc.endpoint.timeout_s, f.timeout_s);
  set(rc.endpoint.retries, f.retries);
  set(rc.endpoint.max_in_flight, f.max_in_flight);
  auto& t = rc.profile.train;
  set(t.epochs, f.epochs);
  set(t.batch_size, f.batch_size);
  set(t.env.shots, f.shots);
  set(rc.profile.embed_dim, f.embed_dim);
  set(rc.profile.hidden, f.hidden);
  set(rc.profile.out, f.out);
  set(t.lr, f.lr);
  set(t.momentum, f.momentum);
  set(t.gamma, f.gamma);
  set(t.baseline_beta, f.baseline_beta);
  set(t.reward.lambda, f.lambda);
  set(t.reward.alpha, f.alpha);
  set(t.reward.threshold, f.threshold);
  if (f.reward_mode) t.reward.mode = pm::parse_reward_mode(*f.reward_mode);
  set(t.env.system_prompt, f.system_prompt);
  set(t.env.separator, f.separator);
  set(t.seed, f.seed);
  return rc;
}

nlohmann::ordered_json describe(const pm::RunConfig& rc) {
  const auto& t = rc.profile.train;
  nlohmann::ordered_json j;
  j["profile"] = rc.profile.name;
  j["embed_dim"] = rc.profile.embed_dim;
  j["hidden"] = rc.profile.hidden;
  j["out"] = rc.profile.out;
  j["epochs"] = t.epochs;
  j["batch_size"] = t.batch_size;
  j["lr"] = t.lr;
  j["momentum"] = t.momentum;
  j["gamma"] = t.gamma;
  j["baseline_beta"] = t.baseline_beta;
  j["seed"] = t.seed;
  j["shots"] = t.env.shots;
  j["system_prompt"] = t.env.system_prompt;
  j["separator"] = t.env.separator;
  j["lambda"] = t.reward.lambda;
  j["alpha"] = t.reward.alpha;
  j["reward_mode"] = pm::to_string(t.reward.mode);
  j["threshold"] = t.reward.threshold;
  j["temperature"] = t.generation.temperature;
  j["top_p"] = t.generation.top_p;
  j["top_k"] = t.generation.top_k;
  j["num_beams"] = t.generation.num_beams;
  j["max_new_tokens"] = t.generation.max_new_tokens;
  j["repetition_penalty"] = t.generation.repetition_penalty;
  j["length_penalty"] = t.generation.length_penalty;
  j["do_sample"] = t.generation.do_sample;
  j["early_stopping"] = t.generation.early_stopping;
  j["num_return_sequences"] = t.generation.num_return_sequences;
  j["backend"] = rc.backend;
  return j;
}

void require_path(const std::string& value, const char* flag) {
  if (value.empty()) throw pm::UsageError(std::string("missing required ") + flag);
  if (!fs::exists(value)) throw pm::UsageError(std::string(flag) + " path does not exist: " + value);
}

// Pool, embeddings and encoder resolved from a run config.
struct Workspace {
  pm::PromptPool pool;
  pm::EmbeddingSet embeddings;
  pm::Encoder encoder;
  bool precomputed = false;
};

Workspace open_workspace(const pm::RunConfig& rc) {
  require_path(rc.pool, "--pool");
  Workspace ws;
  ws.pool = pm::load_pool(rc.pool);
  if (!rc.pool_embeddings.empty()) {
    ws.embeddings = pm::load_embeddings(rc.pool_embeddings, ws.pool.size());
    ws.precomputed = true;
    ws.encoder = [](std::string_view) -> pm::Vector {
      throw pm::UsageError("precomputed pool embeddings need --query-embeddings for queries");
    };
  } else {
    ws.encoder = pm::HashNgramEncoder(rc.profile.embed_dim);
    ws.embeddings = pm::encode_pool(ws.pool, ws.encoder);
  }
  return ws;
}

std::vector<pm::QueryItem> open_queries(const std::string& path, const char* flag, const pm::RunConfig& rc,
                                        const Workspace& ws) {
  require_path(path, flag);
  auto queries = pm::queries_from_pool(pm::load_pool(path));
  if (ws.precomputed) {
    if (rc.query_embeddings.empty()) throw pm::UsageError("--pool-embeddings requires --query-embeddings");
    const auto emb = pm::load_embeddings(rc.query_embeddings, queries.size());
    if (emb.dim != ws.embeddings.dim) throw pm::DataError("query embeddings dim does not match pool embeddings");
    for (std::size_t i = 0; i < queries.size(); ++i) queries[i].embedding = emb.vectors[i];
  } else {
    pm::embed_queries(queries, ws.encoder);
  }
  return queries;
}

// Owns whichever backend stack the config asks for.
struct BackendStack {
  std::optional<pm::SyntheticTask> task;
  std::unique_ptr<pm::Backend> inner;
  std::unique_ptr<pm::Backend> outer;
  pm::Backend& get() { return outer ? *outer : *inner; }
};

BackendStack open_backend(const pm::RunConfig& rc) {
  BackendStack stack;
  const auto& kind = rc.backend;
  auto make_http = [&] { return std::make_unique<pm::HttpBackend>(rc.endpoint); };
  if (kind == "synthetic") {
    require_path(rc.manifest, "--manifest");
    stack.task = pm::load_task(rc.manifest);
    stack.inner = std::make_unique<pm::SyntheticBackend>(*stack.task, rc.profile.train.env, rc.profile.train.seed);
  } else if (kind == "http") {
    stack.inner = make_http();
  } else if (kind == "replay") {
    if (rc.recording.empty()) throw pm::UsageError("replay backend needs --recording");
    using Mode = pm::ReplayBackend::Mode;
    Mode mode;
    if (rc.recording_mode == "replay") mode = Mode::replay_strict;
    else if (rc.recording_mode == "replay-fallback") mode = Mode::replay_fallback;
    else if (rc.recording_mode == "record") mode = Mode::record;
    else throw pm::UsageError("unknown recording mode '" + rc.recording_mode + "'");
    if (mode != Mode::replay_strict) {
      if (!rc.manifest.empty()) {
        stack.task = pm::load_task(rc.manifest);
        stack.inner = std::make_unique<pm::SyntheticBackend>(*stack.task, rc.profile.train.env, rc.profile.train.seed);
      } else {
        stack.inner = make_http();
      }
    }
    stack.outer = std::make_unique<pm::ReplayBackend>(rc.recording, mode, stack.inner.get());
  } else {
    throw pm::UsageError("unknown backend '" + kind + "'");
  }
  return stack;
}

// Attaches hidden cluster labels from a manifest, matched by question text.
void label_queries(std::vector<pm::QueryItem>& queries, const pm::SyntheticTask& task) {
  std::map<std::string, std::size_t> cluster_of;
  for (const auto& q : task.queries) cluster_of.emplace(q.question, q.cluster);
  for (auto& q : queries) {
    if (auto it = cluster_of.find(q.question); it != cluster_of.end()) q.cluster = it->second;
  }
}

// ---------------------------------------------------------------------------

int cmd_pool_validate(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    std::cerr << "error: cannot open " << path << '\n';
    return kExitData;
  }
  std::string line;
  std::size_t line_no = 0, records = 0, errors = 0;
  std::map<std::string, std::size_t> first_seen;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      const auto t = pm::parse_pool_record(line);
      ++records;
      auto [it, inserted] = first_seen.emplace(t.question, line_no);
      if (!inserted) {
        std::cout << "warning: line " << line_no << ": duplicate question (first at line " << it->second << ")\n";
      }
    } catch (const pm::DataError& e) {
      ++errors;
      std::cerr << "error: line " << line_no << ": " << e.what() << '\n';
    }
  }
  if (records == 0 && errors == 0) {
    std::cerr << "error: pool file contains no records\n";
    return kExitData;
  }
  if (errors > 0) {
    std::cerr << errors << " invalid record(s)\n";
    return kExitData;
  }
  std::cout << "ok n=" << records << '\n';
  return 0;
}

struct SynthFlags {
  std::uint64_t seed = 0;
  std::size_t clusters = 4;
  std::size_t pool_size = 40;
  std::size_t queries = 1100;
  double misalignment = 0.0;
  std::size_t embed_dim = 32;
  std::string out_dir;
};

int cmd_synth(const SynthFlags& f) {
  pm::SyntheticTaskOptions opt;
  opt.seed = f.seed;
  opt.clusters = f.clusters;
  opt.pool_size = f.pool_size;
  opt.n_queries = f.queries;
  opt.misalignment = f.misalignment;
  opt.encoder_dim = f.embed_dim;
  const pm::SyntheticTask task = pm::generate_synthetic_task(opt);

  fs::create_directories(f.out_dir);
  const fs::path dir(f.out_dir);
  pm::save_pool((dir / "pool.jsonl").string(), task.pool);
  const std::size_t n_train = pm::train_split_size(task.queries.size());
  auto write_queries = [&](const fs::path& path, std::size_t begin, std::size_t end) {
    std::ofstream out(path);
    if (!out) throw pm::DataError("cannot write " + path.string());
    for (std::size_t i = begin; i < end; ++i) {
      out << pm::serialize_pool_record({0, task.queries[i].question, "", task.queries[i].answer}) << '\n';
    }
  };
  write_queries(dir / "train.jsonl", 0, n_train);
  write_queries(dir / "test.jsonl", n_train, task.queries.size());
  std::ofstream manifest(dir / "manifest.json");
  manifest << pm::task_to_json(task).dump(2) << '\n';
  std::cout << "wrote pool=" << task.pool.size() << " train=" << n_train << " test=" << task.queries.size() - n_train
            << " to " << f.out_dir << '\n';
  return 0;
}

int cmd_train(const pm::RunConfig& rc) {
  if (rc.checkpoint.empty()) throw pm::UsageError("missing required --checkpoint");
  Workspace ws = open_workspace(rc);
  auto queries = open_queries(rc.train_queries, "--train-queries", rc, ws);
  BackendStack backend = open_backend(rc);

  const auto& t = rc.profile.train;
  pm::Environment env(ws.pool, ws.embeddings, ws.encoder, t.env);
  pm::RewardFunction reward_fn(t.reward, pm::HashNgramEncoder(rc.profile.embed_dim));
  auto init = pm::init_params(t.seed, ws.embeddings.dim, rc.profile.hidden, rc.profile.out);

  std::size_t last_epoch = static_cast<std::size_t>(-1);
  const pm::TrainResult result = pm::train(t, env, std::move(queries), backend.get(), reward_fn, std::move(init),
                                           [&](const pm::TrainLogRow& row) {
                                             if (row.epoch != last_epoch && row.epoch % 10 == 0) {
                                               std::cerr << "epoch " << row.epoch << " reward " << row.mean_reward
                                                         << " entropy " << row.entropy << '\n';
                                             }
                                             last_epoch = row.epoch;
                                           });
  pm::save_checkpoint(result.params, rc.checkpoint);
  if (!rc.log.empty()) {
    std::ofstream out(rc.log);
    if (!out) throw pm::DataError("cannot write log: " + rc.log);
    pm::write_train_log(out, result.log);
  }
  std::cout << "trained " << result.log.size() << " batches; checkpoint " << rc.checkpoint << '\n';
  return 0;
}

int cmd_eval(const pm::RunConfig& rc, const std::string& selector_name, const std::string& out_path) {
  const pm::Selector selector = pm::parse_selector(selector_name);
  std::optional<pm::MatchingNetParams> params;
  if (pm::needs_policy(selector)) {
    if (rc.checkpoint.empty()) throw pm::UsageError("selector " + selector_name + " needs --checkpoint");
    require_path(rc.checkpoint, "--checkpoint");
  }
  Workspace ws = open_workspace(rc);
  auto queries = open_queries(rc.test_queries, "--test-queries", rc, ws);
  if (pm::needs_policy(selector)) {
    params = pm::load_checkpoint(rc.checkpoint);
    if (params->embed_dim() != ws.embeddings.dim) throw pm::DataError("checkpoint input dim does not match embeddings");
  }
  BackendStack backend = open_backend(rc);

  const auto& t = rc.profile.train;
  pm::Environment env(ws.pool, ws.embeddings, ws.encoder, t.env);
  pm::RewardFunction reward_fn(t.reward, pm::HashNgramEncoder(rc.profile.embed_dim));
  pm::EvalOptions opt;
  opt.params = params ? &*params : nullptr;
  opt.seed = t.seed;
  opt.generation = t.generation;
  if (backend.task) {
    label_queries(queries, *backend.task);
    opt.pool_clusters = backend.task->pool_clusters;
  }
  const pm::Metrics metrics = pm::evaluate(selector, env, queries, backend.get(), reward_fn, opt);
  const std::string text = metrics.to_json().dump();
  std::cout << text << '\n';
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw pm::DataError("cannot write metrics: " + out_path);
    out << text << '\n';
  }
  return 0;
}

int cmd_match(const pm::RunConfig& rc, const std::string& question, const std::string& context) {
  if (rc.checkpoint.empty()) throw pm::UsageError("match needs --checkpoint");
  require_path(rc.checkpoint, "--checkpoint");
  if (question.empty()) throw pm::UsageError("match needs a non-empty --query");
  Workspace ws = open_workspace(rc);
  rc.profile.train.env.validate(ws.pool.size());
  const auto params = pm::load_checkpoint(rc.checkpoint);
  if (params.embed_dim() != ws.embeddings.dim) throw pm::DataError("checkpoint input dim does not match embeddings");

  pm::QueryItem query{question, context, "", std::nullopt, {}};
  if (ws.precomputed) {
    if (rc.query_embeddings.empty()) throw pm::UsageError("--pool-embeddings requires --query-embeddings");
    query.embedding = pm::load_embeddings(rc.query_embeddings, 1).vectors.front();
  }
  pm::Environment env(ws.pool, ws.embeddings, ws.encoder, rc.profile.train.env);
  const pm::MatchResult match = pm::match_query(params, env, query);
  for (std::size_t i = 0; i < match.indices.size(); ++i) {
    const auto& e = ws.pool[match.indices[i]];
    std::cout << "exemplar " << i + 1 << ": #" << e.id << " " << e.question << '\n';
  }
  std::cout << "--- llm input ---\n" << match.llm_input << '\n';
  return 0;
}

int cmd_smoke(const pm::RunConfig& rc, const std::string& input) {
  if (input.empty()) throw pm::UsageError("smoke needs a non-empty --input");
  BackendStack backend = open_backend(rc);
  std::cout << backend.get().respond(input, rc.profile.train.generation) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reinforcement-learned few-shot exemplar selection"};
  app.require_subcommand(1);
  app.require_subcommand(1);

  std::string validate_path;
  auto* validate = app.add_subcommand("pool-validate", "Check a prompt pool file");
  validate->add_option("pool", validate_path)->required();

  SynthFlags synth_flags;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic cluster task");
  synth->add_option("--seed", synth_flags.seed);
  synth->add_option("--clusters", synth_flags.clusters);
  synth->add_option("--pool-size", synth_flags.pool_size);
  synth->add_option("--queries", synth_flags.queries);
  synth->add_option("--misalignment", synth_flags.misalignment)->check(CLI::Range(0.0, 1.0));
  synth->add_option("--embed-dim", synth_flags.embed_dim);
  synth->add_option("--out-dir", synth_flags.out_dir)->required();

  CommonFlags config_flags, train_flags, eval_flags, match_flags, smoke_flags;
  auto* config = app.add_subcommand("config", "Print the resolved configuration");
  add_common_flags(*config, config_flags);
  auto* train = app.add_subcommand("train", "Train the matching network");
  add_common_flags(*train, train_flags);

  auto* eval = app.add_subcommand("eval", "Evaluate a selector on test queries");
  add_common_flags(*eval, eval_flags);
  std::string selector = "policy-greedy", metrics_out;
  eval->add_option("--selector", selector, "policy-greedy, policy-sampled, simmatch, random or zero-shot");
  eval->add_option("--metrics-out", metrics_out, "Also write the metrics object here");

  auto* match = app.add_subcommand("match", "Select exemplars for one query");
  add_common_flags(*match, match_flags);
  std::string query, context;
  match->add_option("--query", query)->required();
  match->add_option("--context", context);

  auto* smoke = app.add_subcommand("smoke", "Send one input to the configured backend");
  add_common_flags(*smoke, smoke_flags);
  std::string smoke_input;
  smoke->add_option("--input", smoke_input)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*validate) return cmd_pool_validate(validate_path);
    if (*synth) return cmd_synth(synth_flags);
    if (*config) {
      std::cout << describe(resolve(config_flags)).dump(2) << '\n';
      return 0;
    }
    if (*train) return cmd_train(resolve(train_flags));
    if (*eval) return cmd_eval(resolve(eval_flags), selector, metrics_out);
    if (*match) return cmd_match(resolve(match_flags), query, context);
    if (*smoke) return cmd_smoke(resolve(smoke_flags), smoke_input);
  } catch (const pm::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const pm::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const pm::DimensionError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const pm::ContractError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
