#pragma once

#include <chrono>
#include <cstdlib>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>

#include "httplib.h"
#include "json.hpp"

#include "promptmatch/backend.hpp"
#include "promptmatch/error.hpp"

namespace promptmatch {

// Completion endpoint settings. The credential itself is only ever read
// from the environment variable named here.
struct EndpointConfig {
  std::string url;  // e.g. http://localhost:8000/v1/completions
  std::string model;
  double timeout_s = 60.0;
  int retries = 2;
  std::string credential_env = "PROMPTMATCH_API_KEY";
  int max_in_flight = 4;
  int backoff_ms = 500;  // doubled after each failed attempt
};

// Request body of the completion call:
//   {"model", "prompt", "max_tokens", "temperature", "top_p", "top_k", "n",
//    "num_beams", "do_sample", "repetition_penalty", "length_penalty",
//    "early_stopping"}
inline nlohmann::ordered_json completion_request(std::string_view model, std::string_view prompt,
                                                 const GenerationParams& p) {
  nlohmann::ordered_json body;
  body["model"] = model;
  body["prompt"] = prompt;
  body["max_tokens"] = p.max_new_tokens;
  body["temperature"] = p.temperature;
  body["top_p"] = p.top_p;
  body["top_k"] = p.top_k;
  body["n"] = p.num_return_sequences;
  body["num_beams"] = p.num_beams;
  body["do_sample"] = p.do_sample;
  body["repetition_penalty"] = p.repetition_penalty;
  body["length_penalty"] = p.length_penalty;
  body["early_stopping"] = p.early_stopping;
  return body;
}

// Text of the first choice in {"choices": [{"text": ...}, ...]}.
inline std::string parse_completion_response(std::string_view body) {
  try {
    const auto j = nlohmann::json::parse(body);
    const auto& choices = j.at("choices");
    if (!choices.is_array() || choices.empty()) throw BackendError("completion response has no choices");
    return choices.at(0).at("text").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(std::string("malformed completion response: ") + e.what());
  }
}

class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(EndpointConfig cfg) : cfg_(std::move(cfg)), slots_(clamp_slots(cfg_.max_in_flight)) {
    if (cfg_.url.empty()) throw UsageError("endpoint url is not configured");
    if (cfg_.retries < 0) throw UsageError("retries must be >= 0");
    if (!(cfg_.timeout_s > 0.0)) throw UsageError("timeout_s must be positive");
    const char* secret = std::getenv(cfg_.credential_env.c_str());
    if (secret == nullptr || *secret == '\0') {
      throw UsageError("credential environment variable " + cfg_.credential_env + " is not set");
    }
    credential_ = secret;
    split_url();
  }

  std::string respond(std::string_view input, const GenerationParams& params) override {
    require_input(input);
    params.validate();
    const std::string body = completion_request(cfg_.model, input, params).dump();

    slots_.acquire();
    struct Release {
      std::counting_semaphore<kMaxSlots>& s;
      ~Release() { s.release(); }
    } release{slots_};

    int backoff = cfg_.backoff_ms;
    for (int attempt = 0;; ++attempt) {
      try {
        return post_once(body);
      } catch (const BackendError& e) {
        if (!e.retryable() || attempt >= cfg_.retries) {
          throw BackendError(std::string(e.what()) + " (after " + std::to_string(attempt + 1) + " attempt(s))",
                             e.retryable());
        }
      }
      if (backoff > 0) std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
      backoff *= 2;
    }
  }

  const EndpointConfig& config() const noexcept { return cfg_; }

 private:
  static constexpr std::ptrdiff_t kMaxSlots = 64;

  static std::ptrdiff_t clamp_slots(int n) {
    if (n < 1 || n > kMaxSlots) throw UsageError("max_in_flight must lie in [1, 64]");
    return n;
  }

  void split_url() {
    const auto scheme_end = cfg_.url.find("://");
    if (scheme_end == std::string::npos) throw UsageError("endpoint url must include a scheme: " + cfg_.url);
    const auto path_start = cfg_.url.find('/', scheme_end + 3);
    origin_ = cfg_.url.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : cfg_.url.substr(path_start);
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
    if (cfg_.url.rfind("https://", 0) == 0) throw UsageError("https endpoints need a build with OpenSSL support");
#endif
  }

  std::string post_once(const std::string& body) {
    httplib::Client client(origin_);
    const auto secs = static_cast<time_t>(cfg_.timeout_s);
    const auto usecs = static_cast<time_t>((cfg_.timeout_s - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    httplib::Headers headers{{"Authorization", "Bearer " + credential_}};
    auto res = client.Post(path_, headers, body, "application/json");
    if (!res) throw BackendError("request to " + cfg_.url + " failed: " + httplib::to_string(res.error()), true);
    if (res->status < 200 || res->status >= 300) {
      const bool retryable = res->status >= 500 || res->status == 429;
      throw BackendError("HTTP " + std::to_string(res->status) + " from " + cfg_.url + ": " + res->body.substr(0, 200),
                         retryable);
    }
    return parse_completion_response(res->body);
  }

  EndpointConfig cfg_;
  std::counting_semaphore<kMaxSlots> slots_;
  std::string credential_;
  std::string origin_;
  std::string path_;
};

}  // namespace promptmatch
