#pragma once

// OpenAI-compatible backend.
//
//   generation  POST {base}/v1/chat/completions
//   embedding   POST {base}/v1/embeddings
//   scoring     POST {base}/v1/completions  (echo + logprobs)
//
// Requests go through a Transport so the client logic (auth header, retry
// with exponential backoff and full jitter, response parsing, context
// truncation) runs unchanged against a live server or recorded fixtures.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "qchunk/errors.hpp"
#include "qchunk/model_clients.hpp"
#include "qchunk/text.hpp"

namespace qchunk::http {

using Headers = std::vector<std::pair<std::string, std::string>>;

struct Request {
  std::string path;  // e.g. "/v1/embeddings"
  Headers headers;
  std::string body;
};

struct Response {
  int status = 0;
  std::string body;
};

// Posts a request. Connection-level failures throw a retryable BackendError;
// HTTP error statuses are returned, not thrown.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual Response post(const Request& request) = 0;
};

struct RetryPolicy {
  std::size_t max_retries = 3;
  std::chrono::milliseconds base_delay{500};
  std::chrono::milliseconds max_delay{20000};

  // Full jitter: uniform in [0, min(max_delay, base_delay * 2^attempt)].
  template <typename Rng>
  std::chrono::milliseconds delay(std::size_t attempt, Rng& rng) const {
    const double cap = std::min(
        static_cast<double>(max_delay.count()),
        static_cast<double>(base_delay.count()) * std::ldexp(1.0, static_cast<int>(attempt)));
    std::uniform_real_distribution<double> dist(0.0, cap);
    return std::chrono::milliseconds(static_cast<long long>(dist(rng)));
  }
};

struct Config {
  std::string base_url;
  std::string api_key;
  std::string generation_model = "default";
  std::string embedding_model = "default";
  std::string scoring_model = "default";
  double timeout_seconds = 60.0;
  RetryPolicy retry;
  std::size_t max_context_tokens = 8192;
  // Used to budget context before sending; the server tokenizes for real.
  double chars_per_token = 4.0;
  std::size_t embed_batch_size = 64;
  std::uint64_t seed = 0;
};

// Reads MODEL_API_BASE (required) and MODEL_API_KEY (optional).
inline Config config_from_env(Config base = {}) {
  const char* url = std::getenv("MODEL_API_BASE");
  if (!url || !*url) throw ConfigError("http backend requires MODEL_API_BASE");
  base.base_url = url;
  if (const char* key = std::getenv("MODEL_API_KEY")) base.api_key = key;
  return base;
}

inline bool retryable_status(int status) {
  return status == 408 || status == 429 || (status >= 500 && status <= 599);
}

// JSON-over-HTTP with auth and retries. Shared by the three capabilities.
class Client {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  Client(std::shared_ptr<Transport> transport, Config config,
         Sleeper sleeper = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); })
      : transport_(std::move(transport)),
        config_(std::move(config)),
        sleeper_(std::move(sleeper)),
        rng_(config_.seed) {
    if (!transport_) throw ConfigError("http client needs a transport");
  }

  const Config& config() const { return config_; }

  nlohmann::json post_json(const std::string& path, const nlohmann::json& body) const {
    Request req{path, {{"Content-Type", "application/json"}}, body.dump()};
    if (!config_.api_key.empty())
      req.headers.emplace_back("Authorization", "Bearer " + config_.api_key);

    for (std::size_t attempt = 0;; ++attempt) {
      std::string failure;
      bool retryable = false;
      try {
        const Response res = transport_->post(req);
        if (res.status >= 200 && res.status < 300) {
          try {
            return nlohmann::json::parse(res.body);
          } catch (const nlohmann::json::parse_error&) {
            throw BackendError(path + ": response is not JSON", false);
          }
        }
        failure = path + ": HTTP " + std::to_string(res.status) + " " + res.body.substr(0, 200);
        retryable = retryable_status(res.status);
      } catch (const BackendError& e) {
        if (!e.retryable()) throw;
        failure = e.what();
        retryable = true;
      }
      if (!retryable || attempt >= config_.retry.max_retries)
        throw BackendError(failure + " (after " + std::to_string(attempt + 1) + " attempts)",
                           retryable);
      std::chrono::milliseconds wait;
      {
        std::lock_guard lock(rng_mutex_);
        wait = config_.retry.delay(attempt, rng_);
      }
      sleeper_(wait);
    }
  }

 private:
  std::shared_ptr<Transport> transport_;
  Config config_;
  Sleeper sleeper_;
  mutable std::mutex rng_mutex_;
  mutable std::mt19937_64 rng_;
};

class HttpGenerator final : public Generator {
 public:
  explicit HttpGenerator(std::shared_ptr<const Client> client) : client_(std::move(client)) {}

  std::vector<std::string> generate(std::string_view prompt,
                                    const SamplingParams& params) const override {
    std::vector<std::string> out;
    // Some servers ignore `n`; keep asking for the remainder.
    for (std::size_t round = 0; out.size() < params.n && round < params.n; ++round) {
      nlohmann::json body = {
          {"model", client_->config().generation_model},
          {"messages", {{{"role", "user"}, {"content", std::string(prompt)}}}},
          {"temperature", params.temperature},
          {"top_p", params.top_p},
          {"n", params.n - out.size()}};
      if (params.seed) body["seed"] = *params.seed + round;
      const auto res = client_->post_json("/v1/chat/completions", body);
      if (!res.contains("choices") || !res["choices"].is_array())
        throw BackendError("chat completion without choices", false);
      for (const auto& choice : res["choices"]) {
        if (out.size() == params.n) break;
        const auto& msg = choice.value("message", nlohmann::json::object());
        const auto& content = msg.value("content", nlohmann::json());
        out.push_back(content.is_string() ? content.get<std::string>() : std::string());
      }
    }
    return out;
  }

 private:
  std::shared_ptr<const Client> client_;
};

class HttpEmbedder final : public Embedder {
 public:
  HttpEmbedder(std::shared_ptr<const Client> client, std::size_t dimension)
      : client_(std::move(client)), dim_(dimension) {}

  std::size_t dimension() const override { return dim_; }

  std::vector<std::vector<double>> embed_raw(std::span<const std::string> texts) const override {
    std::vector<std::vector<double>> out;
    const std::size_t batch = std::max<std::size_t>(1, client_->config().embed_batch_size);
    for (std::size_t first = 0; first < texts.size(); first += batch) {
      const std::size_t last = std::min(texts.size(), first + batch);
      nlohmann::json input = nlohmann::json::array();
      for (std::size_t i = first; i < last; ++i) input.push_back(texts[i]);
      const auto res = client_->post_json(
          "/v1/embeddings", {{"model", client_->config().embedding_model}, {"input", input}});
      if (!res.contains("data") || !res["data"].is_array() || res["data"].size() != last - first)
        throw BackendError("embeddings response has wrong item count", false);
      std::vector<std::vector<double>> part(last - first);
      for (const auto& item : res["data"]) {
        const auto idx = item.value("index", std::size_t{0});
        if (idx >= part.size() || !item.contains("embedding"))
          throw BackendError("embeddings response has a bad item", false);
        part[idx] = item["embedding"].get<std::vector<double>>();
      }
      for (auto& v : part) {
        if (dim_ != 0 && v.size() != dim_)
          throw BackendError("embedding dimension " + std::to_string(v.size()) +
                                 " differs from configured " + std::to_string(dim_),
                             false);
        out.push_back(std::move(v));
      }
    }
    return out;
  }

 private:
  std::shared_ptr<const Client> client_;
  std::size_t dim_;  // 0: accept whatever the server returns
};

// Scores target tokens by echoing context + target through /v1/completions
// and keeping the log-probabilities whose text offsets fall in the target.
class HttpScorer final : public TokenScorer {
 public:
  explicit HttpScorer(std::shared_ptr<const Client> client) : client_(std::move(client)) {}

  std::size_t max_context_tokens() const override { return client_->config().max_context_tokens; }

  // Rejects servers that do not echo prompt log-probabilities.
  void probe() const {
    try {
      score_impl("Probe context.", " probe target");
    } catch (const BackendError& e) {
      if (e.retryable()) throw;
      throw ConfigError(std::string("scoring backend unusable: ") + e.what());
    }
  }

  ScoredTokens score(std::string_view context, std::string_view target) const override {
    return score_impl(context, target);
  }

  // Context kept after left truncation to the token budget.
  std::pair<std::string, bool> fit_context(std::string_view context, std::string_view target) const {
    const auto& cfg = client_->config();
    auto estimate = [&](std::string_view s) {
      return static_cast<std::size_t>(
          std::ceil(static_cast<double>(text::codepoint_count(s)) / cfg.chars_per_token));
    };
    const std::size_t tgt = estimate(target);
    if (estimate(context) + tgt <= cfg.max_context_tokens) return {std::string(context), false};
    const std::size_t budget_tokens = cfg.max_context_tokens > tgt ? cfg.max_context_tokens - tgt : 0;
    const auto keep_cps = static_cast<std::size_t>(static_cast<double>(budget_tokens) * cfg.chars_per_token);
    // Walk back keep_cps code points from the end.
    std::size_t start = context.size(), seen = 0;
    while (start > 0 && seen < keep_cps) {
      --start;
      while (start > 0 && (static_cast<unsigned char>(context[start]) & 0xC0) == 0x80) --start;
      ++seen;
    }
    if (start > 0) {
      const auto space = context.find_first_of(" \t\n", start);
      start = space == std::string_view::npos ? context.size() : space + 1;
    }
    return {std::string(context.substr(start)), true};
  }

 private:
  ScoredTokens score_impl(std::string_view context, std::string_view target) const {
    auto [ctx, truncated] = fit_context(context, target);
    const std::string prompt = ctx + std::string(target);
    const auto ctx_cps = text::codepoint_count(ctx);
    const auto prompt_cps = text::codepoint_count(prompt);
    const auto res = client_->post_json(
        "/v1/completions", {{"model", client_->config().scoring_model},
                            {"prompt", prompt},
                            {"max_tokens", 1},
                            {"temperature", 0.0},
                            {"echo", true},
                            {"logprobs", 1}});
    const auto choices = res.value("choices", nlohmann::json::array());
    if (choices.empty() || !choices[0].contains("logprobs") || choices[0]["logprobs"].is_null())
      throw BackendError("completions response lacks echoed logprobs", false);
    const auto& lp = choices[0]["logprobs"];
    if (!lp.contains("token_logprobs") || !lp.contains("text_offset"))
      throw BackendError("completions logprobs lack token_logprobs/text_offset", false);
    const auto& values = lp["token_logprobs"];
    const auto& offsets = lp["text_offset"];
    if (values.size() != offsets.size())
      throw BackendError("completions logprobs are misaligned", false);

    ScoredTokens out;
    out.context_truncated = truncated;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto off = offsets[i].get<std::size_t>();
      if (off < ctx_cps || off >= prompt_cps) continue;
      if (values[i].is_null()) continue;  // first token of the prompt has none
      out.logprobs.push_back(values[i].get<double>());
    }
    return out;
  }

  std::shared_ptr<const Client> client_;
};

}  // namespace qchunk::http
