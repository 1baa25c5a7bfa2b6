#include "cap/chat_http.hpp"

#include <cstdlib>
#include <stdexcept>

#include "httplib.h"

namespace cap::agents {

HttpChatClient::HttpChatClient(HttpChatConfig config) : config_(std::move(config)) {}

nlohmann::json build_chat_body(const ChatRequest& request, double temperature) {
  return {{"model", request.model},
          {"temperature", temperature},
          {"messages",
           {{{"role", "system"}, {"content", request.system}},
            {{"role", "user"}, {"content", request.user}}}}};
}

ChatResponse parse_chat_response(const std::string& body) {
  const auto doc = nlohmann::json::parse(body, nullptr, false);
  if (doc.is_discarded()) throw std::runtime_error("response is not JSON");
  ChatResponse out;
  try {
    out.text = doc.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception&) {
    throw std::runtime_error("response has no choices[0].message.content");
  }
  if (auto it = doc.find("usage"); it != doc.end() && it->is_object()) {
    if (it->contains("prompt_tokens")) out.prompt_tokens = it->at("prompt_tokens").get<int>();
    if (it->contains("completion_tokens")) {
      out.completion_tokens = it->at("completion_tokens").get<int>();
    }
  }
  out.response_log = body;
  return out;
}

std::string redact(std::string text, const std::string& secret) {
  if (secret.empty()) return text;
  for (std::size_t pos = text.find(secret); pos != std::string::npos;
       pos = text.find(secret, pos)) {
    text.replace(pos, secret.size(), "[REDACTED]");
  }
  return text;
}

ChatResponse HttpChatClient::complete(const ChatRequest& request) {
  const char* key_env = std::getenv(config_.api_key_env.c_str());
  const std::string key = key_env ? key_env : "";
  const std::string body = build_chat_body(request, config_.temperature).dump();

  httplib::Client client(config_.base_url);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(request.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(request.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());
  httplib::Headers headers;
  if (!key.empty()) headers.emplace("Authorization", "Bearer " + key);

  const auto res = client.Post(config_.path, headers, body, "application/json");
  if (!res) {
    throw std::runtime_error("transport error: " + httplib::to_string(res.error()));
  }
  if (res->status < 200 || res->status >= 300) {
    throw std::runtime_error("upstream status " + std::to_string(res->status) + ": " +
                             redact(res->body.substr(0, 512), key));
  }
  auto out = parse_chat_response(res->body);
  out.request_log = redact(body, key);
  out.response_log = redact(out.response_log, key);
  return out;
}

}  // namespace cap::agents
