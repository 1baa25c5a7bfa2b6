#pragma once

#include <string>

#include "cap/agents.hpp"

namespace cap::agents {

struct HttpChatConfig {
  std::string base_url = "https://api.openai.com";
  std::string path = "/v1/chat/completions";
  std::string api_key_env = "OPENAI_API_KEY";
  double temperature = 0.0;
};

// Chat-completion client. The API key is read from the environment at call
// time and never appears in the logged request.
class HttpChatClient : public ChatClient {
 public:
  explicit HttpChatClient(HttpChatConfig config);
  ChatResponse complete(const ChatRequest& request) override;

 private:
  HttpChatConfig config_;
};

nlohmann::json build_chat_body(const ChatRequest& request, double temperature);
// Extracts choices[0].message.content and usage counts; throws on anything else.
ChatResponse parse_chat_response(const std::string& body);
// Replaces every occurrence of `secret` in `text`.
std::string redact(std::string text, const std::string& secret);

}  // namespace cap::agents
