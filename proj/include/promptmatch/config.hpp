#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <string_view>

#include "json.hpp"

#include "promptmatch/backend.hpp"
#include "promptmatch/error.hpp"
#include "promptmatch/http_backend.hpp"
#include "promptmatch/reward.hpp"
#include "promptmatch/trainer.hpp"

namespace promptmatch {

// Network sizes plus training and decoding defaults.
struct Profile {
  std::string name;
  std::size_t embed_dim = 32;
  std::size_t hidden = 64;
  std::size_t out = 32;
  TrainConfig train;
};

// Small enough to train on the synthetic task in seconds. The learning rate
// is far above the large-model setting: at 1e-3 the synthetic task does not
// move off the uniform policy within 200 epochs.
inline Profile desk_profile() {
  Profile p;
  p.name = "desk";
  p.embed_dim = 32;
  p.hidden = 64;
  p.out = 32;
  p.train.epochs = 200;
  p.train.batch_size = 32;
  p.train.lr = 0.05;
  p.train.reward.lambda = 0.2;
  p.train.reward.alpha = 10.0;
  return p;
}

// Sizes and hyperparameters of the original large-model setup.
inline Profile paper_profile() {
  Profile p;
  p.name = "paper";
  p.embed_dim = 384;
  p.hidden = 1024;
  p.out = 512;
  p.train.epochs = 150;
  p.train.batch_size = 32;
  p.train.lr = 1e-6;
  p.train.reward.lambda = 0.2;
  p.train.reward.alpha = 10.0;
  p.train.generation = GenerationParams{};  // top_p 0.8, 512 new tokens, greedy decoding
  return p;
}

inline Profile profile_by_name(std::string_view name) {
  if (name == "desk") return desk_profile();
  if (name == "paper") return paper_profile();
  throw UsageError("unknown profile '" + std::string(name) + "' (expected desk or paper)");
}

// Everything a CLI run needs. Resolution order: profile defaults, then the
// flat JSON config file, then command-line flags.
struct RunConfig {
  Profile profile = desk_profile();

  std::string pool;
  std::string train_queries;
  std::string test_queries;
  std::string pool_embeddings;
  std::string query_embeddings;
  std::string checkpoint;
  std::string log;
  std::string recording;
  std::string recording_mode = "replay";  // replay | replay-fallback | record
  std::string manifest;
  std::string backend = "synthetic";      // synthetic | http | replay
  EndpointConfig endpoint;

  // Applies a flat key/value object. Unknown keys are rejected so typos do
  // not silently fall back to defaults.
  void apply_json(const nlohmann::json& j) {
    if (!j.is_object()) throw UsageError("config file must contain a JSON object");
    if (auto it = j.find("profile"); it != j.end()) profile = profile_by_name(it->get<std::string>());
    auto& t = profile.train;
    for (const auto& [key, value] : j.items()) {
      try {
        if (key == "profile") continue;
        else if (key == "pool") pool = value.get<std::string>();
        else if (key == "train_queries") train_queries = value.get<std::string>();
        else if (key == "test_queries") test_queries = value.get<std::string>();
        else if (key == "pool_embeddings") pool_embeddings = value.get<std::string>();
        else if (key == "query_embeddings") query_embeddings = value.get<std::string>();
        else if (key == "checkpoint") checkpoint = value.get<std::string>();
        else if (key == "log") log = value.get<std::string>();
        else if (key == "recording") recording = value.get<std::string>();
        else if (key == "recording_mode") recording_mode = value.get<std::string>();
        else if (key == "manifest") manifest = value.get<std::string>();
        else if (key == "backend") backend = value.get<std::string>();
        else if (key == "url") endpoint.url = value.get<std::string>();
        else if (key == "model") endpoint.model = value.get<std::string>();
        else if (key == "timeout_s") endpoint.timeout_s = value.get<double>();
        else if (key == "retries") endpoint.retries = value.get<int>();
        else if (key == "credential_env") endpoint.credential_env = value.get<std::string>();
        else if (key == "max_in_flight") endpoint.max_in_flight = value.get<int>();
        else if (key == "embed_dim") profile.embed_dim = value.get<std::size_t>();
        else if (key == "hidden") profile.hidden = value.get<std::size_t>();
        else if (key == "out") profile.out = value.get<std::size_t>();
        else if (key == "epochs") t.epochs = value.get<std::size_t>();
        else if (key == "batch_size") t.batch_size = value.get<std::size_t>();
        else if (key == "lr") t.lr = value.get<double>();
        else if (key == "momentum") t.momentum = value.get<double>();
        else if (key == "gamma") t.gamma = value.get<double>();
        else if (key == "baseline_beta") t.baseline_beta = value.get<double>();
        else if (key == "seed") t.seed = value.get<std::uint64_t>();
        else if (key == "shots") t.env.shots = value.get<std::size_t>();
        else if (key == "system_prompt") t.env.system_prompt = value.get<std::string>();
        else if (key == "separator") t.env.separator = value.get<std::string>();
        else if (key == "lambda") t.reward.lambda = value.get<double>();
        else if (key == "alpha") t.reward.alpha = value.get<double>();
        else if (key == "reward_mode") t.reward.mode = parse_reward_mode(value.get<std::string>());
        else if (key == "threshold") t.reward.threshold = value.get<double>();
        else if (key == "temperature") t.generation.temperature = value.get<double>();
        else if (key == "top_p") t.generation.top_p = value.get<double>();
        else if (key == "top_k") t.generation.top_k = value.get<int>();
        else if (key == "num_beams") t.generation.num_beams = value.get<int>();
        else if (key == "max_new_tokens") t.generation.max_new_tokens = value.get<int>();
        else if (key == "repetition_penalty") t.generation.repetition_penalty = value.get<double>();
        else if (key == "length_penalty") t.generation.length_penalty = value.get<double>();
        else if (key == "do_sample") t.generation.do_sample = value.get<bool>();
        else if (key == "early_stopping") t.generation.early_stopping = value.get<bool>();
        else if (key == "num_return_sequences") t.generation.num_return_sequences = value.get<int>();
        else throw UsageError("unknown config key '" + key + "'");
      } catch (const nlohmann::json::exception& e) {
        throw UsageError("config key '" + key + "': " + e.what());
      }
    }
  }

  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file: " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(path + ": " + e.what());
    }
    apply_json(j);
  }
};

}  // namespace promptmatch
