#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>

#include "cap/agents.hpp"
#include "cap/chat_http.hpp"
#include "cap/error.hpp"
#include "cap/store.hpp"
#include "json.hpp"

namespace httplib {
class Server;
}

namespace cap::service {

struct Config {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string store_root = "cap-store";
  bool mock_agents = true;
  std::set<agents::AgentId> mock_failing;  // fault injection for mock mode
  agents::HttpChatConfig llm;
  std::string model_name = std::string(agents::kDefaultModel);
  int agent_timeout_ms = 60000;
  std::size_t bootstrap_resamples = 1000;
  std::uint64_t seed = 0;
};

// Reads an optional JSON config file, then applies CAP_* environment
// overrides: CAP_HOST, CAP_PORT, CAP_STORE_ROOT, CAP_MOCK_AGENTS,
// CAP_MOCK_FAIL, CAP_LLM_BASE_URL, CAP_LLM_PATH, CAP_LLM_MODEL,
// CAP_LLM_API_KEY_ENV, CAP_AGENT_TIMEOUT_MS, CAP_BOOTSTRAP_RESAMPLES, CAP_SEED.
using EnvLookup = std::function<const char*(const char*)>;
Config load_config(const std::optional<std::filesystem::path>& file, const EnvLookup& env);
Config load_config(const std::optional<std::filesystem::path>& file = std::nullopt);
nlohmann::json config_to_json(const Config& config);

struct ApiError {
  int status = 500;
  std::string code;
  std::string message;
  nlohmann::json detail;  // null when absent

  nlohmann::json to_json() const;
};

int http_status(ErrorCode code);
ApiError to_api_error(const Error& e);

class Service {
 public:
  // A null client means: build one from the config (mock or HTTP).
  explicit Service(Config config, std::shared_ptr<agents::ChatClient> client = nullptr);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Blocks until stop(). Returns false if the address could not be bound.
  bool listen();
  // Binds an ephemeral port on the configured host; serve() then blocks.
  int bind_any_port();
  bool serve();
  void stop();
  bool running() const;

  const Config& config() const { return config_; }
  store::Store& store() { return store_; }

 private:
  struct PreparedRun;

  void register_routes();
  // Resolves and loads every referenced entity; throws before anything runs.
  std::shared_ptr<PreparedRun> prepare_run(const nlohmann::json& body);
  // Runs the agent pipeline, persists the record and emits one event per agent.
  store::RunRecord execute_run(PreparedRun& run,
                               const std::function<void(const nlohmann::json&)>& emit);
  bool claim_patient(const std::string& patient_id);
  void release_patient(const std::string& patient_id);

  Config config_;
  store::Store store_;
  std::shared_ptr<agents::ChatClient> client_;
  std::unique_ptr<httplib::Server> server_;
  std::mutex write_mu_;
  std::mutex active_mu_;
  std::set<std::string> active_patients_;
};

}  // namespace cap::service
