#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lcbm/errors.hpp"
#include "lcbm/image.hpp"

namespace lcbm {

// Text-only language model endpoint.
class LLMClient {
 public:
  virtual ~LLMClient() = default;
  // Throws OracleError on transport failure.
  virtual std::string send(const std::string& prompt) = 0;
};

// Language model that also sees one image (presence queries).
class MultimodalClient {
 public:
  virtual ~MultimodalClient() = default;
  virtual std::string send(const std::string& prompt, const Image& image) = 0;
};

// Deterministic stand-in: the first rule whose `match` is a substring of the
// prompt supplies the response; otherwise `fallback` is returned (or an
// OracleError thrown when there is no fallback).
class MockLLMClient final : public LLMClient, public MultimodalClient {
 public:
  struct Rule {
    std::string match;
    std::string response;
  };

  MockLLMClient() = default;
  explicit MockLLMClient(std::vector<Rule> rules,
                         std::optional<std::string> fallback = std::nullopt)
      : rules_(std::move(rules)), fallback_(std::move(fallback)) {}

  // {"rules": [{"match": ..., "response": ...}], "default": ...}
  static MockLLMClient from_json(const nlohmann::json& j);
  static MockLLMClient load(const std::string& path);

  void add(std::string match, std::string response) {
    rules_.push_back({std::move(match), std::move(response)});
  }

  std::string send(const std::string& prompt) override;
  std::string send(const std::string& prompt, const Image&) override {
    return send(prompt);
  }

 private:
  std::vector<Rule> rules_;
  std::optional<std::string> fallback_;
};

struct TranscriptEntry {
  std::string prompt;
  std::string response;
  std::string error;
  int attempt = 1;
};

// Shared, thread-safe record of every prompt/response exchange.
class Transcript {
 public:
  void add(TranscriptEntry e);
  std::vector<TranscriptEntry> entries() const;
  nlohmann::json to_json() const;
  void save_jsonl(const std::string& path) const;

 private:
  mutable std::mutex mu_;
  std::vector<TranscriptEntry> entries_;
};

struct RetryPolicy {
  int attempts = 3;
  std::chrono::milliseconds base_delay{500};  // doubled after each failure
};

// Wraps a client with retries and exponential backoff. Every attempt is
// logged to the transcript; after the last failed attempt the OracleError
// propagates.
class RetryingLLMClient final : public LLMClient {
 public:
  RetryingLLMClient(LLMClient& inner, RetryPolicy policy,
                    std::shared_ptr<Transcript> transcript)
      : inner_(inner), policy_(policy), transcript_(std::move(transcript)) {}

  std::string send(const std::string& prompt) override;
  const std::shared_ptr<Transcript>& transcript() const { return transcript_; }

 private:
  LLMClient& inner_;
  RetryPolicy policy_;
  std::shared_ptr<Transcript> transcript_;
};

// Connection settings for an OpenAI-compatible chat-completions service.
struct ChatEndpoint {
  std::string base_url;  // e.g. https://api.openai.com
  std::string path = "/v1/chat/completions";
  std::string model;     // e.g. gpt-4o
  std::string api_key;
  double temperature = 0.0;
  int timeout_seconds = 120;

  // LCBM_LLM_ENDPOINT, LCBM_LLM_MODEL, LCBM_LLM_API_KEY (falls back to
  // OPENAI_API_KEY). Throws ConfigError when the endpoint is unset.
  static ChatEndpoint from_env();
};

class HttpChatClient final : public LLMClient, public MultimodalClient {
 public:
  explicit HttpChatClient(ChatEndpoint endpoint)
      : endpoint_(std::move(endpoint)) {}

  std::string send(const std::string& prompt) override;
  std::string send(const std::string& prompt, const Image& image) override;

 private:
  std::string post(const nlohmann::json& content);
  ChatEndpoint endpoint_;
};

}  // namespace lcbm
