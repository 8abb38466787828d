#include "lcbm/llm_client.hpp"

#include <httplib.h>

#include <cstdlib>
#include <fstream>
#include <thread>

namespace lcbm {

MockLLMClient MockLLMClient::from_json(const nlohmann::json& j) {
  std::vector<Rule> rules;
  try {
    for (const auto& r : j.value("rules", nlohmann::json::array()))
      rules.push_back({r.at("match").get<std::string>(),
                       r.at("response").get<std::string>()});
    std::optional<std::string> fallback;
    if (j.contains("default") && !j["default"].is_null())
      fallback = j["default"].get<std::string>();
    return MockLLMClient(std::move(rules), std::move(fallback));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("mock LLM script: ") + e.what());
  }
}

MockLLMClient MockLLMClient::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open mock LLM script " + path);
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("mock LLM script " + path + ": " + e.what());
  }
}

std::string MockLLMClient::send(const std::string& prompt) {
  for (const auto& r : rules_)
    if (prompt.find(r.match) != std::string::npos) return r.response;
  if (fallback_) return *fallback_;
  throw OracleError("mock LLM has no response for prompt: " +
                    prompt.substr(0, 120));
}

void Transcript::add(TranscriptEntry e) {
  std::lock_guard<std::mutex> lock(mu_);
  entries_.push_back(std::move(e));
}

std::vector<TranscriptEntry> Transcript::entries() const {
  std::lock_guard<std::mutex> lock(mu_);
  return entries_;
}

nlohmann::json Transcript::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries()) {
    nlohmann::json j{{"attempt", e.attempt}, {"prompt", e.prompt}};
    if (e.error.empty()) {
      j["response"] = e.response;
    } else {
      j["error"] = e.error;
    }
    arr.push_back(std::move(j));
  }
  return arr;
}

void Transcript::save_jsonl(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write transcript " + path);
  for (const auto& j : to_json()) out << j.dump() << '\n';
}

std::string RetryingLLMClient::send(const std::string& prompt) {
  auto delay = policy_.base_delay;
  for (int attempt = 1;; ++attempt) {
    try {
      std::string response = inner_.send(prompt);
      if (transcript_) transcript_->add({prompt, response, {}, attempt});
      return response;
    } catch (const OracleError& e) {
      if (transcript_) transcript_->add({prompt, {}, e.what(), attempt});
      if (attempt >= policy_.attempts) throw;
    }
    if (delay.count() > 0) std::this_thread::sleep_for(delay);
    delay *= 2;
  }
}

ChatEndpoint ChatEndpoint::from_env() {
  auto env = [](const char* name) -> std::string {
    const char* v = std::getenv(name);
    return v ? v : "";
  };
  ChatEndpoint ep;
  ep.base_url = env("LCBM_LLM_ENDPOINT");
  if (ep.base_url.empty())
    throw ConfigError("LCBM_LLM_ENDPOINT is not set (needed for the remote LLM)");
  ep.model = env("LCBM_LLM_MODEL");
  if (ep.model.empty()) ep.model = "gpt-4o";
  ep.api_key = env("LCBM_LLM_API_KEY");
  if (ep.api_key.empty()) ep.api_key = env("OPENAI_API_KEY");
  return ep;
}

std::string HttpChatClient::send(const std::string& prompt) {
  return post(prompt);
}

std::string HttpChatClient::send(const std::string& prompt, const Image& image) {
  const std::string url =
      "data:image/png;base64," + httplib::detail::base64_encode(encode_png(image));
  nlohmann::json content = nlohmann::json::array(
      {{{"type", "text"}, {"text", prompt}},
       {{"type", "image_url"}, {"image_url", {{"url", url}}}}});
  return post(content);
}

std::string HttpChatClient::post(const nlohmann::json& content) {
  nlohmann::json body{
      {"model", endpoint_.model},
      {"temperature", endpoint_.temperature},
      {"messages", nlohmann::json::array({{{"role", "user"}, {"content", content}}})}};

  httplib::Client cli(endpoint_.base_url);
  cli.set_read_timeout(endpoint_.timeout_seconds, 0);
  cli.set_connection_timeout(10, 0);
  httplib::Headers headers;
  if (!endpoint_.api_key.empty())
    headers.emplace("Authorization", "Bearer " + endpoint_.api_key);
  auto res = cli.Post(endpoint_.path, headers, body.dump(), "application/json");
  if (!res)
    throw OracleError("chat request to " + endpoint_.base_url +
                      " failed: " + httplib::to_string(res.error()));
  if (res->status != 200)
    throw OracleError("chat request returned HTTP " +
                      std::to_string(res->status) + ": " + res->body.substr(0, 200));
  try {
    auto reply = nlohmann::json::parse(res->body);
    return reply.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw OracleError(std::string("malformed chat response: ") + e.what());
  }
}

}  // namespace lcbm
