#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <string>
#include <string_view>
#include <unordered_map>

#include "json.hpp"

#include "promptmatch/error.hpp"

namespace promptmatch {

// Decoding parameters forwarded to the language model.
struct GenerationParams {
  double temperature = 1.0;
  double top_p = 0.8;
  int top_k = 0;
  int num_beams = 1;
  int max_new_tokens = 512;
  double repetition_penalty = 1.0;
  double length_penalty = 1.0;
  bool do_sample = false;
  bool early_stopping = true;
  int num_return_sequences = 1;

  void validate() const {
    if (max_new_tokens < 1) throw UsageError("max_new_tokens must be >= 1");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw UsageError("top_p must lie in (0, 1]");
    if (!(temperature > 0.0)) throw UsageError("temperature must be positive");
    if (top_k < 0 || num_beams < 1 || num_return_sequences < 1) throw UsageError("invalid generation parameters");
  }

  bool operator==(const GenerationParams&) const = default;
};

// A language model reachable with a composed input text.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string respond(std::string_view input, const GenerationParams& params) = 0;
};

inline void require_input(std::string_view input) {
  if (input.empty()) throw ContractError("backend input must be non-empty");
}

// 64-bit FNV-1a, the key of the recording file.
inline std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Replay cache over a recording file of {"input_hash", "output"} lines.
//
//   replay_strict    stored outputs only; a miss is an error
//   replay_fallback  stored outputs, misses go to the wrapped backend
//   record           consult the cache, otherwise call the wrapped backend
//                    and append the new pair to the file
class ReplayBackend final : public Backend {
 public:
  enum class Mode { replay_strict, replay_fallback, record };

  ReplayBackend(std::string path, Mode mode, Backend* inner = nullptr)
      : path_(std::move(path)), mode_(mode), inner_(inner) {
    if (mode_ != Mode::replay_strict && inner_ == nullptr) {
      throw UsageError("replay backend in this mode needs a wrapped backend");
    }
    load();
  }

  std::string respond(std::string_view input, const GenerationParams& params) override {
    require_input(input);
    const std::string key = hash_hex(fnv1a64(input));
    {
      std::lock_guard lock(mu_);
      if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    }
    if (mode_ == Mode::replay_strict) throw BackendError("replay miss for input hash " + key);
    std::string output = inner_->respond(input, params);
    if (mode_ == Mode::record) append(key, output);
    return output;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return cache_.size();
  }

 private:
  void load() {
    std::ifstream in(path_);
    if (!in) {
      if (mode_ == Mode::record) return;  // created on first append
      throw DataError("cannot open recording: " + path_);
    }
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        const auto rec = nlohmann::json::parse(line);
        cache_.try_emplace(rec.at("input_hash").get<std::string>(), rec.at("output").get<std::string>());
      } catch (const nlohmann::json::exception& e) {
        throw DataError(path_ + ": line " + std::to_string(line_no) + ": " + e.what());
      }
    }
  }

  void append(const std::string& key, const std::string& output) {
    std::lock_guard lock(mu_);
    if (!cache_.try_emplace(key, output).second) return;
    std::ofstream out(path_, std::ios::app);
    if (!out) throw DataError("cannot append to recording: " + path_);
    nlohmann::ordered_json rec;
    rec["input_hash"] = key;
    rec["output"] = output;
    out << rec.dump() << '\n';
  }

  std::string path_;
  Mode mode_;
  Backend* inner_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, std::string> cache_;
};

}  // namespace promptmatch
