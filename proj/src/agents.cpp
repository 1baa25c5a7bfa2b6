#include "cap/agents.hpp"

#include <fmt/format.h>

#include <future>
#include <mutex>
#include <thread>

#include "cap/hash.hpp"
#include "cap/numfmt.hpp"

namespace cap::agents {
namespace {

// Context rows (table order) x agents I..IV.
constexpr std::array<std::array<bool, 4>, kBlockKindCount> kContextMatrix{{
    {true, true, true, true},     // patient_profile
    {true, false, false, false},  // classifier_description
    {true, false, false, false},  // decision_threshold
    {true, false, false, false},  // performance_near_r
    {true, true, false, false},   // risk_score
    {true, false, false, false},  // performance_near_s
    {false, true, false, false},  // cip_cost_description
    {false, true, false, false},  // cip_cost_coefficients
    {false, true, false, false},  // cip_composition_near_s
    {false, true, true, false},   // response_I
    {false, false, false, true},  // response_II
}};

constexpr std::array<QueryKind, 4> kQueries{QueryKind::kRiskAnalysis, QueryKind::kCostBenefit,
                                            QueryKind::kRiskMitigation,
                                            QueryKind::kInterventionPrediction};

constexpr std::array<std::string_view, kBlockKindCount> kBlockNames{
    "patient_profile",      "classifier_description", "decision_threshold",
    "performance_near_r",   "risk_score",             "performance_near_s",
    "cip_cost_description", "cip_cost_coefficients",  "cip_composition_near_s",
    "response_I",           "response_II"};

constexpr std::array<std::string_view, 4> kQueryNames{"risk_analysis", "cost_benefit",
                                                      "risk_mitigation",
                                                      "intervention_prediction"};

std::size_t idx(AgentId a) { return static_cast<std::size_t>(a); }

std::string fixed(double v, int digits = 3) { return fmt::format("{:.{}f}", v, digits); }

std::string optional_fixed(const std::optional<double>& v) {
  return v ? fixed(*v) : std::string("n/a");
}

std::string render_profile(const cohort::PatientProfile& p) {
  std::string out = fmt::format("Patient ID: {}\n", p.patient_id);
  for (const auto& [name, value] : p.variables) {
    out += fmt::format("{}: {}\n", name, fixed(value, 2));
  }
  out.pop_back();
  return out;
}

std::string render_classifier(const scorer::ModelCard& card) {
  std::string out = card.description;
  if (!card.training_summary.empty()) out += "\nTraining: " + card.training_summary;
  for (const auto& [name, value] : card.metric_summary) {
    out += fmt::format("\n{}: {}", name, fixed(value));
  }
  return out;
}

std::string render_local(const metrics::LocalPerformance& lp, const metrics::PredictionSet& preds) {
  const auto& c = lp.counts;
  std::string out = fmt::format(
      "Classification at threshold {}: TP={} FP={} TN={} FN={} (N={})\n"
      "Precision {}, recall {}, F1 {}\n"
      "Patients with a score within +/-{} of {}: {} of {} ({}%)",
      fixed(lp.center), c.tp, c.fp, c.tn, c.fn, preds.size(), optional_fixed(lp.precision),
      optional_fixed(lp.recall), fixed(lp.f1), fixed(lp.window, 2), fixed(lp.center),
      lp.window_count, preds.size(), fixed(100.0 * lp.score_density, 1));
  if (lp.window_positive_rate) {
    out += fmt::format("; observed 1-year mortality among them {}", fixed(*lp.window_positive_rate));
  } else {
    out += "; no observed outcomes in this window";
  }
  return out;
}

std::string render_cost_description() {
  return "Costs are semi-quantitative coefficients between -1 and 1 and are reported per "
         "patient in the population. Two dimensions are tracked: quality of life (QoL) for the "
         "patient and healthcare system cost for the provider. Each dimension has a treatment "
         "cost, caused by the chosen care level (home care for patients classified high-risk, "
         "standard care otherwise), and an error cost, added when the classification is wrong "
         "(false positive or false negative). Negative values are benefits and are drawn below "
         "the zero cost line; positive values are costs drawn above it. The net effect is the "
         "sum of all four components at a threshold.";
}

std::string render_coefficients(const cip::CostMatrix& m) {
  std::string out;
  for (auto type : cip::kCostTypes) {
    for (auto sc : cip::kScenarios) {
      out += fmt::format("{} {}: qol {}, healthcare {}\n", cip::to_string(type), cip::to_string(sc),
                         fixed(m.at(type, sc, cip::Dimension::kQol), 2),
                         fixed(m.at(type, sc, cip::Dimension::kHealthcare), 2));
    }
  }
  out.pop_back();
  return out;
}

std::string render_composition(const AgentInputs& in, double s) {
  const auto band = cip::risk_band(in.cip, s, in.band_delta);
  std::string out = fmt::format(
      "CIP cost curve components for thresholds within +/-{} of s = {} "
      "(per patient; negative = benefit):\n"
      "threshold | treatment_qol | treatment_hc | error_qol | error_hc | net",
      fixed(in.band_delta, 2), fixed(s));
  for (std::size_t i = 0; i < band.slice.size(); ++i) {
    const auto& c = band.slice.components[i];
    out += fmt::format("\n{} | {} | {} | {} | {} | {}", fixed(band.slice.grid[i], 2), fixed(c[0]),
                       fixed(c[1]), fixed(c[2]), fixed(c[3]), fixed(band.slice.net[i]));
  }
  const double r = in.card.decision_threshold;
  const auto expected = cip::patient_expected_cost(s, r, in.matrix);
  out += fmt::format(
      "\nExpected cost for this patient at the decision threshold ({}): "
      "treatment_qol {}, treatment_hc {}, error_qol {}, error_hc {}, net {}",
      s >= r ? "classified high-risk" : "classified low-risk", fixed(expected[0]),
      fixed(expected[1]), fixed(expected[2]), fixed(expected[3]),
      fixed(((expected[0] + expected[1]) + expected[2]) + expected[3]));
  return out;
}

}  // namespace

std::string_view to_string(AgentId id) {
  static constexpr std::array<std::string_view, 4> kNames{"I", "II", "III", "IV"};
  return kNames[idx(id)];
}

std::string_view to_string(BlockKind kind) { return kBlockNames[static_cast<std::size_t>(kind)]; }

std::string_view to_string(QueryKind kind) { return kQueryNames[static_cast<std::size_t>(kind)]; }

std::optional<AgentId> parse_agent(std::string_view text) {
  for (auto a : kAgents) {
    if (to_string(a) == text) return a;
  }
  return std::nullopt;
}

std::optional<BlockKind> parse_block_kind(std::string_view text) {
  for (std::size_t i = 0; i < kBlockKindCount; ++i) {
    if (kBlockNames[i] == text) return static_cast<BlockKind>(i);
  }
  return std::nullopt;
}

std::optional<QueryKind> parse_query_kind(std::string_view text) {
  for (std::size_t i = 0; i < kQueryNames.size(); ++i) {
    if (kQueryNames[i] == text) return static_cast<QueryKind>(i);
  }
  return std::nullopt;
}

std::vector<BlockKind> required_blocks(AgentId agent) {
  std::vector<BlockKind> out;
  for (std::size_t row = 0; row < kBlockKindCount; ++row) {
    if (kContextMatrix[row][idx(agent)]) out.push_back(static_cast<BlockKind>(row));
  }
  return out;
}

QueryKind query_for(AgentId agent) { return kQueries[idx(agent)]; }

std::vector<AgentId> prerequisites(AgentId agent) {
  std::vector<AgentId> out;
  for (auto kind : required_blocks(agent)) {
    if (kind == BlockKind::kResponseI) out.push_back(AgentId::kI);
    if (kind == BlockKind::kResponseII) out.push_back(AgentId::kII);
  }
  return out;
}

std::vector<BlockKind> AgentContext::kinds() const {
  std::vector<BlockKind> out;
  for (const auto& b : blocks) out.push_back(b.kind);
  return out;
}

double risk_score_for(const AgentInputs& inputs) {
  const auto* rec = inputs.preds.find(inputs.patient.patient_id);
  if (!rec) {
    throw Error(ErrorCode::kNotFound,
                "no prediction for patient '" + inputs.patient.patient_id + "'");
  }
  return rec->score;
}

AgentContext build_context(AgentId agent, const AgentInputs& inputs,
                           const std::map<AgentId, std::string>& prior) {
  for (auto dep : prerequisites(agent)) {
    if (!prior.count(dep)) {
      throw Error(ErrorCode::kDependencyUnmet,
                  fmt::format("agent {} needs the response of agent {}", to_string(agent),
                              to_string(dep)));
    }
  }
  const double s = risk_score_for(inputs);
  const double r = inputs.card.decision_threshold;

  AgentContext ctx;
  ctx.agent = agent;
  ctx.query = query_for(agent);
  for (auto kind : required_blocks(agent)) {
    std::string text;
    switch (kind) {
      case BlockKind::kPatientProfile: text = render_profile(inputs.patient); break;
      case BlockKind::kClassifierDescription: text = render_classifier(inputs.card); break;
      case BlockKind::kDecisionThreshold:
        text = fmt::format(
            "Decision threshold r = {}. Patients with a risk score at or above r are classified "
            "high-risk.",
            fixed(r));
        break;
      case BlockKind::kPerformanceNearR:
        text = render_local(
            metrics::local_performance(inputs.preds, r, inputs.performance_window), inputs.preds);
        break;
      case BlockKind::kRiskScore:
        text = fmt::format("Predicted 1-year mortality risk score s = {}.", fixed(s));
        break;
      case BlockKind::kPerformanceNearS:
        text = render_local(
            metrics::local_performance(inputs.preds, s, inputs.performance_window), inputs.preds);
        break;
      case BlockKind::kCipCostDescription: text = render_cost_description(); break;
      case BlockKind::kCipCostCoefficients: text = render_coefficients(inputs.matrix); break;
      case BlockKind::kCipCompositionNearS: text = render_composition(inputs, s); break;
      case BlockKind::kResponseI: text = prior.at(AgentId::kI); break;
      case BlockKind::kResponseII: text = prior.at(AgentId::kII); break;
    }
    ctx.blocks.push_back({kind, std::move(text)});
  }
  return ctx;
}

TemplateSet TemplateSet::defaults() {
  TemplateSet t;
  t.version = "cap-prompts/1";
  t.system_preamble =
      "You are a decision-support assistant explaining the output of a cost-aware 1-year "
      "mortality risk model for patients with heart failure to a clinician. Base every "
      "statement only on the context sections provided. Do not introduce patient data, test "
      "results, guidelines or evidence that are not in the context. Do not phrase advice as "
      "directives and avoid the words \"shall\" and \"must\"; present considerations for the "
      "clinician to weigh. Say so plainly when the context is not sufficient to answer.";
  t.block_titles = {
      {BlockKind::kPatientProfile, "Patient clinical profile"},
      {BlockKind::kClassifierDescription, "Classifier description"},
      {BlockKind::kDecisionThreshold, "Classifier decision threshold r"},
      {BlockKind::kPerformanceNearR, "Classifier performance summary near r"},
      {BlockKind::kRiskScore, "Predicted risk score s"},
      {BlockKind::kPerformanceNearS, "Classifier performance summary near s"},
      {BlockKind::kCipCostDescription, "CIP cost description"},
      {BlockKind::kCipCostCoefficients, "CIP cost coefficients"},
      {BlockKind::kCipCompositionNearS, "Composition of CIP cost curves near s"},
      {BlockKind::kResponseI, "Response from agent I (prediction certainty)"},
      {BlockKind::kResponseII, "Response from agent II (cost-benefit analysis)"},
  };
  t.queries = {
      {QueryKind::kRiskAnalysis,
       "Classification risk analysis. How certain is the risk prediction for this patient? "
       "Relate the risk score to the decision threshold and to the classifier's performance "
       "near the threshold and near the patient's score."},
      {QueryKind::kCostBenefit,
       "Clinical cost-benefit analysis. How should the CIP cost curves be read for this "
       "patient? Identify which treatment and error components dominate around the patient's "
       "score, in both the quality-of-life and the healthcare dimension."},
      {QueryKind::kRiskMitigation,
       "Classification risk mitigation. How could the uncertainty of this classification be "
       "reduced? Point to information, such as additional tests or a review of the record, "
       "that would most change the assessment."},
      {QueryKind::kInterventionPrediction,
       "Intervention risk prediction. Given the cost-benefit analysis, how could future risks "
       "for this patient be mitigated, and what care pathways are worth considering?"},
  };
  return t;
}

std::string TemplateSet::hash() const {
  std::string canon = version + '\x1e' + system_preamble + '\x1e';
  for (const auto& [kind, title] : block_titles) {
    canon += std::string(to_string(kind)) + '\x1f' + title + '\x1e';
  }
  for (const auto& [kind, text] : queries) {
    canon += std::string(to_string(kind)) + '\x1f' + text + '\x1e';
  }
  return sha256_hex(canon);
}

RenderedPrompt render_prompt(const AgentContext& ctx, const TemplateSet& templates) {
  RenderedPrompt out;
  out.system = templates.system_preamble;
  out.template_version = templates.version;
  out.template_hash = templates.hash();
  for (const auto& block : ctx.blocks) {
    const auto it = templates.block_titles.find(block.kind);
    if (it == templates.block_titles.end()) {
      throw Error(ErrorCode::kTemplateMissing,
                  fmt::format("no template for block '{}'", to_string(block.kind)));
    }
    out.user += fmt::format("{}{}\n{}\n\n", kSectionMarker, it->second, block.text);
  }
  const auto q = templates.queries.find(ctx.query);
  if (q == templates.queries.end()) {
    throw Error(ErrorCode::kTemplateMissing,
                fmt::format("no template for query '{}'", to_string(ctx.query)));
  }
  out.user += fmt::format("{}Query\n{}\n", kSectionMarker, q->second);
  return out;
}

MockChatClient::MockChatClient(std::set<AgentId> failing, std::chrono::milliseconds delay)
    : failing_(std::move(failing)), delay_(delay) {}

ChatResponse MockChatClient::complete(const ChatRequest& request) {
  Call call{request.agent, sequence_.fetch_add(1), 0};
  if (delay_.count() > 0) {
    if (delay_ > request.timeout) {
      std::this_thread::sleep_for(request.timeout);
      throw std::runtime_error("mock call timed out");
    }
    std::this_thread::sleep_for(delay_);
  }
  const bool fail = failing_.count(request.agent) > 0;
  call.finished = sequence_.fetch_add(1);
  {
    std::lock_guard lock(mu_);
    calls_.push_back(call);
  }
  if (fail) throw std::runtime_error("mock fault injected for this agent");

  std::string kinds;
  for (auto k : request.block_kinds) {
    if (!kinds.empty()) kinds += ", ";
    kinds += to_string(k);
  }
  ChatResponse resp;
  resp.text = fmt::format("[mock agent {}] context: {}. prompt digest {}.", to_string(request.agent),
                          kinds, sha256_hex(request.system + request.user).substr(0, 16));
  resp.prompt_tokens = static_cast<int>((request.system.size() + request.user.size()) / 4);
  resp.completion_tokens = static_cast<int>(resp.text.size() / 4);
  resp.request_log = nlohmann::json{{"model", request.model}, {"agent", to_string(request.agent)}}.dump();
  resp.response_log = nlohmann::json{{"text", resp.text}}.dump();
  return resp;
}

std::vector<MockChatClient::Call> MockChatClient::calls() const {
  std::lock_guard lock(mu_);
  return calls_;
}

PipelineResult run_pipeline(const AgentInputs& inputs, ChatClient& client,
                            const PipelineOptions& options) {
  PipelineResult result;
  std::mutex mu;

  auto record_failure = [&](AgentId agent, ErrorCode code, const std::string& message) {
    std::lock_guard lock(mu);
    auto& f = result.failures[agent];
    f = {agent, code, message};
    result.completion_order.push_back(agent);
    if (options.on_event) options.on_event({agent, nullptr, &f});
  };

  auto run_agent = [&](AgentId agent) -> bool {
    std::map<AgentId, std::string> prior;
    {
      std::lock_guard lock(mu);
      for (auto dep : prerequisites(agent)) {
        if (auto it = result.exchanges.find(dep); it != result.exchanges.end()) {
          prior[dep] = it->second.response_text;
        }
      }
    }
    AgentExchange ex;
    ex.agent = agent;
    ex.model_name = options.model_name;
    try {
      ex.context = build_context(agent, inputs, prior);
      ex.prompt = render_prompt(ex.context, options.templates);
    } catch (const Error& e) {
      record_failure(agent, e.code(), e.what());
      return false;
    }
    ChatRequest req{agent, options.model_name, ex.prompt.system, ex.prompt.user,
                    ex.context.kinds(), options.timeout};
    const auto start = std::chrono::steady_clock::now();
    ChatResponse resp;
    try {
      resp = client.complete(req);
    } catch (const std::exception& e) {
      record_failure(agent, ErrorCode::kAgentCallFailed,
                     fmt::format("agent {} call failed: {}", to_string(agent), e.what()));
      return false;
    }
    ex.latency_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    if (resp.text.empty()) {
      record_failure(agent, ErrorCode::kAgentCallFailed,
                     fmt::format("agent {} returned an empty response", to_string(agent)));
      return false;
    }
    ex.response_text = std::move(resp.text);
    ex.prompt_tokens = resp.prompt_tokens;
    ex.completion_tokens = resp.completion_tokens;
    ex.request_log = std::move(resp.request_log);
    ex.response_log = std::move(resp.response_log);

    std::lock_guard lock(mu);
    auto& stored = result.exchanges[agent] = std::move(ex);
    result.completion_order.push_back(agent);
    if (options.on_event) options.on_event({agent, &stored, nullptr});
    return true;
  };

  auto abort_dependent = [&](AgentId agent, AgentId missing) {
    record_failure(agent, ErrorCode::kDependencyUnmet,
                   fmt::format("agent {} skipped: agent {} did not complete", to_string(agent),
                               to_string(missing)));
  };

  if (!run_agent(AgentId::kI)) {
    abort_dependent(AgentId::kII, AgentId::kI);
    abort_dependent(AgentId::kIII, AgentId::kI);
    abort_dependent(AgentId::kIV, AgentId::kII);
    return result;
  }

  auto second_branch = [&] {
    if (run_agent(AgentId::kII)) {
      run_agent(AgentId::kIV);
    } else {
      abort_dependent(AgentId::kIV, AgentId::kII);
    }
  };
  if (options.concurrent) {
    auto third = std::async(std::launch::async, run_agent, AgentId::kIII);
    second_branch();
    third.get();
  } else {
    second_branch();
    run_agent(AgentId::kIII);
  }
  return result;
}

nlohmann::json context_to_json(const AgentContext& ctx) {
  auto blocks = nlohmann::json::array();
  for (const auto& b : ctx.blocks) blocks.push_back({{"kind", to_string(b.kind)}, {"text", b.text}});
  return {{"agent", to_string(ctx.agent)}, {"query", to_string(ctx.query)}, {"blocks", blocks}};
}

AgentContext context_from_json(const nlohmann::json& doc) {
  AgentContext ctx;
  const auto agent = parse_agent(doc.at("agent").get<std::string>());
  const auto query = parse_query_kind(doc.at("query").get<std::string>());
  if (!agent || !query) throw Error(ErrorCode::kInvalidData, "unknown agent or query kind");
  ctx.agent = *agent;
  ctx.query = *query;
  for (const auto& b : doc.at("blocks")) {
    const auto kind = parse_block_kind(b.at("kind").get<std::string>());
    if (!kind) throw Error(ErrorCode::kInvalidData, "unknown block kind");
    ctx.blocks.push_back({*kind, b.at("text").get<std::string>()});
  }
  return ctx;
}

nlohmann::json exchange_to_json(const AgentExchange& ex) {
  nlohmann::json doc = {{"agent", to_string(ex.agent)},
                        {"context", context_to_json(ex.context)},
                        {"prompt",
                         {{"system", ex.prompt.system},
                          {"user", ex.prompt.user},
                          {"template_version", ex.prompt.template_version},
                          {"template_hash", ex.prompt.template_hash}}},
                        {"response_text", ex.response_text},
                        {"model_name", ex.model_name},
                        {"latency_ms", ex.latency_ms},
                        {"request_log", ex.request_log},
                        {"response_log", ex.response_log}};
  doc["prompt_tokens"] = ex.prompt_tokens ? nlohmann::json(*ex.prompt_tokens) : nlohmann::json();
  doc["completion_tokens"] =
      ex.completion_tokens ? nlohmann::json(*ex.completion_tokens) : nlohmann::json();
  return doc;
}

AgentExchange exchange_from_json(const nlohmann::json& doc) {
  AgentExchange ex;
  const auto agent = parse_agent(doc.at("agent").get<std::string>());
  if (!agent) throw Error(ErrorCode::kInvalidData, "unknown agent id");
  ex.agent = *agent;
  ex.context = context_from_json(doc.at("context"));
  const auto& p = doc.at("prompt");
  ex.prompt = {p.at("system").get<std::string>(), p.at("user").get<std::string>(),
               p.at("template_version").get<std::string>(),
               p.at("template_hash").get<std::string>()};
  ex.response_text = doc.at("response_text").get<std::string>();
  ex.model_name = doc.at("model_name").get<std::string>();
  ex.latency_ms = doc.at("latency_ms").get<double>();
  ex.request_log = doc.value("request_log", std::string());
  ex.response_log = doc.value("response_log", std::string());
  if (doc.contains("prompt_tokens") && !doc["prompt_tokens"].is_null()) {
    ex.prompt_tokens = doc["prompt_tokens"].get<int>();
  }
  if (doc.contains("completion_tokens") && !doc["completion_tokens"].is_null()) {
    ex.completion_tokens = doc["completion_tokens"].get<int>();
  }
  return ex;
}

nlohmann::json failure_to_json(const AgentFailure& failure) {
  return {{"agent", to_string(failure.agent)},
          {"code", error_code_name(failure.code)},
          {"message", failure.message}};
}

AgentFailure failure_from_json(const nlohmann::json& doc) {
  const auto agent = parse_agent(doc.at("agent").get<std::string>());
  const auto code = parse_error_code(doc.at("code").get<std::string>());
  if (!agent || !code) throw Error(ErrorCode::kInvalidData, "malformed agent failure");
  return {*agent, *code, doc.at("message").get<std::string>()};
}

nlohmann::json result_to_json(const PipelineResult& result) {
  auto exchanges = nlohmann::json::array();
  for (const auto& [id, ex] : result.exchanges) exchanges.push_back(exchange_to_json(ex));
  auto failures = nlohmann::json::array();
  for (const auto& [id, f] : result.failures) failures.push_back(failure_to_json(f));
  auto order = nlohmann::json::array();
  for (auto id : result.completion_order) order.push_back(to_string(id));
  return {{"exchanges", exchanges}, {"failures", failures}, {"completion_order", order}};
}

}  // namespace cap::agents
