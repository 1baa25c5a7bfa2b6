#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cap/cip.hpp"
#include "cap/cohort.hpp"
#include "cap/error.hpp"
#include "cap/metrics.hpp"
#include "cap/scorer.hpp"
#include "json.hpp"

namespace cap::agents {

// I: how certain is the risk prediction?
// II: how do I interpret the CIP cost curves?
// III: how can prediction uncertainty be reduced?
// IV: how can future risks be mitigated?
enum class AgentId { kI = 0, kII = 1, kIII = 2, kIV = 3 };
inline constexpr std::array<AgentId, 4> kAgents{AgentId::kI, AgentId::kII, AgentId::kIII,
                                                AgentId::kIV};

enum class BlockKind {
  kPatientProfile,
  kClassifierDescription,
  kDecisionThreshold,
  kPerformanceNearR,
  kRiskScore,
  kPerformanceNearS,
  kCipCostDescription,
  kCipCostCoefficients,
  kCipCompositionNearS,
  kResponseI,
  kResponseII,
};
inline constexpr std::size_t kBlockKindCount = 11;

enum class QueryKind { kRiskAnalysis, kCostBenefit, kRiskMitigation, kInterventionPrediction };

std::string_view to_string(AgentId id);
std::string_view to_string(BlockKind kind);
std::string_view to_string(QueryKind kind);
std::optional<AgentId> parse_agent(std::string_view text);
std::optional<BlockKind> parse_block_kind(std::string_view text);
std::optional<QueryKind> parse_query_kind(std::string_view text);

// Context rows required by an agent, in table row order.
std::vector<BlockKind> required_blocks(AgentId agent);
QueryKind query_for(AgentId agent);
// Agents whose responses feed into `agent`.
std::vector<AgentId> prerequisites(AgentId agent);

struct ContextBlock {
  BlockKind kind;
  std::string text;

  bool operator==(const ContextBlock&) const = default;
};

struct AgentContext {
  AgentId agent = AgentId::kI;
  std::vector<ContextBlock> blocks;
  QueryKind query = QueryKind::kRiskAnalysis;

  std::vector<BlockKind> kinds() const;
  bool operator==(const AgentContext&) const = default;
};

// Non-owning view of everything an agent may draw on. The patient's risk
// score is looked up in `preds` by patient id.
struct AgentInputs {
  const cohort::PatientProfile& patient;
  const scorer::ModelCard& card;
  const metrics::PredictionSet& preds;
  const cip::CipCurve& cip;
  const cip::CostMatrix& matrix;
  double performance_window = 0.05;
  double band_delta = cip::kDefaultBandDelta;
};

double risk_score_for(const AgentInputs& inputs);

// Throws DependencyUnmet naming the first missing prerequisite agent.
AgentContext build_context(AgentId agent, const AgentInputs& inputs,
                           const std::map<AgentId, std::string>& prior);

struct TemplateSet {
  std::string version;
  std::string system_preamble;
  std::map<BlockKind, std::string> block_titles;
  std::map<QueryKind, std::string> queries;

  // SHA-256 over a canonical serialization of every field.
  std::string hash() const;
  static TemplateSet defaults();
};

struct RenderedPrompt {
  std::string system;
  std::string user;
  std::string template_version;
  std::string template_hash;

  bool operator==(const RenderedPrompt&) const = default;
};

inline constexpr std::string_view kSectionMarker = "### ";

// Each block becomes one "### <title>" section in declared order, followed by
// a "### Query" section. Throws TemplateMissing.
RenderedPrompt render_prompt(const AgentContext& ctx, const TemplateSet& templates);

struct ChatRequest {
  AgentId agent = AgentId::kI;
  std::string model;
  std::string system;
  std::string user;
  std::vector<BlockKind> block_kinds;  // metadata only; never sent upstream
  std::chrono::milliseconds timeout{60000};
};

struct ChatResponse {
  std::string text;
  std::optional<int> prompt_tokens;
  std::optional<int> completion_tokens;
  std::string request_log;   // body sent upstream, secrets redacted
  std::string response_log;  // body received
};

class ChatClient {
 public:
  virtual ~ChatClient() = default;
  // Throws on transport failure or timeout.
  virtual ChatResponse complete(const ChatRequest& request) = 0;
};

// Deterministic offline client. The reply echoes the agent, the context block
// kinds and a digest of the prompt; for agents that receive earlier responses
// the echo embeds them, so dependent contexts are observable.
class MockChatClient : public ChatClient {
 public:
  struct Call {
    AgentId agent;
    std::uint64_t started = 0;   // global sequence number
    std::uint64_t finished = 0;  // global sequence number
  };

  explicit MockChatClient(std::set<AgentId> failing = {},
                          std::chrono::milliseconds delay = std::chrono::milliseconds{0});

  ChatResponse complete(const ChatRequest& request) override;
  std::vector<Call> calls() const;

 private:
  std::set<AgentId> failing_;
  std::chrono::milliseconds delay_;
  mutable std::mutex mu_;
  std::vector<Call> calls_;
  std::atomic<std::uint64_t> sequence_{0};
};

struct AgentExchange {
  AgentId agent = AgentId::kI;
  AgentContext context;
  RenderedPrompt prompt;
  std::string response_text;
  std::string model_name;
  double latency_ms = 0.0;
  std::optional<int> prompt_tokens;
  std::optional<int> completion_tokens;
  std::string request_log;
  std::string response_log;

  bool operator==(const AgentExchange&) const = default;
};

struct AgentFailure {
  AgentId agent = AgentId::kI;
  ErrorCode code = ErrorCode::kAgentCallFailed;
  std::string message;

  bool operator==(const AgentFailure&) const = default;
};

struct PipelineEvent {
  AgentId agent;
  const AgentExchange* exchange = nullptr;  // set on success
  const AgentFailure* failure = nullptr;    // set on failure
};

inline constexpr std::string_view kDefaultModel = "gpt-4.1-2025-04-14";

struct PipelineOptions {
  std::string model_name = std::string(kDefaultModel);
  std::chrono::milliseconds timeout{60000};
  TemplateSet templates = TemplateSet::defaults();
  bool concurrent = true;  // II and III run in parallel
  std::function<void(const PipelineEvent&)> on_event;  // called under a lock
};

struct PipelineResult {
  std::map<AgentId, AgentExchange> exchanges;
  std::map<AgentId, AgentFailure> failures;
  std::vector<AgentId> completion_order;  // successes and failures alike

  bool ok() const { return failures.empty(); }
};

// Runs I, then II and III, then IV once II has completed. A failing agent
// aborts its dependents (DependencyUnmet) and leaves the others untouched.
PipelineResult run_pipeline(const AgentInputs& inputs, ChatClient& client,
                            const PipelineOptions& options = {});

nlohmann::json context_to_json(const AgentContext& ctx);
AgentContext context_from_json(const nlohmann::json& doc);
nlohmann::json exchange_to_json(const AgentExchange& ex);
AgentExchange exchange_from_json(const nlohmann::json& doc);
nlohmann::json failure_to_json(const AgentFailure& failure);
AgentFailure failure_from_json(const nlohmann::json& doc);
nlohmann::json result_to_json(const PipelineResult& result);

}  // namespace cap::agents
