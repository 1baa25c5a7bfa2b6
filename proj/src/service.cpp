#include "cap/service.hpp"

#include <algorithm>
#include <charconv>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <future>
#include <sstream>

#include <fmt/format.h>

#include "cap/cip.hpp"
#include "cap/cohort.hpp"
#include "cap/report.hpp"
#include "cap/scorer.hpp"
#include "httplib.h"

namespace cap::service {
namespace {

using nlohmann::json;
using httplib::Request;
using httplib::Response;

constexpr std::size_t kMaxCohortSize = 1'000'000;
constexpr const char* kDcaDefaultGrid = "0:0.99:0.01";

void send_json(Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(Response& res, const ApiError& err) { send_json(res, err.status, err.to_json()); }

// Wraps a handler so library and JSON errors become ApiError responses.
template <class F>
httplib::Server::Handler guarded(F handler) {
  return [handler](const Request& req, Response& res) {
    try {
      handler(req, res);
    } catch (const Error& e) {
      send_error(res, to_api_error(e));
    } catch (const json::exception& e) {
      send_error(res, {422, std::string(error_code_name(ErrorCode::kParseError)),
                       std::string("malformed JSON: ") + e.what(), nullptr});
    } catch (const std::exception& e) {
      send_error(res, {500, "internal_error", e.what(), nullptr});
    }
  };
}

std::string required_param(const Request& req, const char* name) {
  if (!req.has_param(name) || req.get_param_value(name).empty()) {
    throw Error(ErrorCode::kInvalidData, fmt::format("query parameter '{}' is required", name),
                name);
  }
  return req.get_param_value(name);
}

double parse_number(const std::string& text, const char* field) {
  double value = 0.0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw Error(ErrorCode::kInvalidData, fmt::format("'{}' is not a number", text), field);
  }
  return value;
}

std::uint64_t parse_unsigned(const std::string& text, const char* field) {
  std::uint64_t value = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw Error(ErrorCode::kInvalidData, fmt::format("'{}' is not a non-negative integer", text),
                field);
  }
  return value;
}

std::vector<double> grid_param(const Request& req, const char* fallback) {
  const std::string spec = req.has_param("grid") ? req.get_param_value("grid") : fallback;
  try {
    return metrics::parse_grid(spec);
  } catch (const Error& e) {
    throw Error(e.code(), e.what(), "grid");
  }
}

// Re-tags an error with a body field when the library did not name one.
template <class F>
auto with_field(const std::string& field, F f) {
  try {
    return f();
  } catch (const Error& e) {
    if (!e.field().empty()) throw Error(e.code(), e.what(), field + "." + e.field());
    throw Error(e.code(), e.what(), field);
  }
}

json listing(const std::vector<store::EntityInfo>& infos) {
  json items = json::array();
  for (const auto& i : infos) {
    items.push_back({{"id", i.id}, {"created_at", i.created_at}, {"sha256", i.sha256}});
  }
  return {{"items", items}};
}

json predictions_summary(const std::string& id, const metrics::PredictionSet& p) {
  return {{"id", id}, {"n", p.size()}, {"positives", p.positives()}, {"prevalence", p.prevalence()}};
}

bool truthy(std::string v) {
  for (auto& c : v) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return v == "1" || v == "true" || v == "yes" || v == "on";
}

std::set<agents::AgentId> parse_agent_list(const std::string& text) {
  std::set<agents::AgentId> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto id = agents::parse_agent(item);
    if (!id) throw Error(ErrorCode::kInvalidConfig, "unknown agent '" + item + "'");
    out.insert(*id);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------- config

Config load_config(const std::optional<std::filesystem::path>& file, const EnvLookup& env) {
  Config c;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw Error(ErrorCode::kNotFound, "config file not found: " + file->string());
    const auto doc = json::parse(in, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) {
      throw Error(ErrorCode::kParseError, "config file is not a JSON object: " + file->string());
    }
    c.host = doc.value("host", c.host);
    c.port = doc.value("port", c.port);
    c.store_root = doc.value("store_root", c.store_root);
    c.mock_agents = doc.value("mock_agents", c.mock_agents);
    if (doc.contains("mock_failing")) {
      for (const auto& a : doc["mock_failing"]) {
        const auto id = agents::parse_agent(a.get<std::string>());
        if (!id) throw Error(ErrorCode::kInvalidConfig, "unknown agent in mock_failing");
        c.mock_failing.insert(*id);
      }
    }
    c.model_name = doc.value("model_name", c.model_name);
    c.agent_timeout_ms = doc.value("agent_timeout_ms", c.agent_timeout_ms);
    c.bootstrap_resamples = doc.value("bootstrap_resamples", c.bootstrap_resamples);
    c.seed = doc.value("seed", c.seed);
    if (doc.contains("llm")) {
      const auto& llm = doc["llm"];
      c.llm.base_url = llm.value("base_url", c.llm.base_url);
      c.llm.path = llm.value("path", c.llm.path);
      c.llm.api_key_env = llm.value("api_key_env", c.llm.api_key_env);
      c.llm.temperature = llm.value("temperature", c.llm.temperature);
    }
  }
  auto get = [&](const char* name) -> std::optional<std::string> {
    const char* v = env ? env(name) : nullptr;
    if (!v) return std::nullopt;
    return std::string(v);
  };
  auto number = [](const std::string& v, const char* name) {
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
      throw Error(ErrorCode::kInvalidConfig, fmt::format("{}='{}' is not an integer", name, v));
    }
    return out;
  };
  if (auto v = get("CAP_HOST")) c.host = *v;
  if (auto v = get("CAP_PORT")) c.port = static_cast<int>(number(*v, "CAP_PORT"));
  if (auto v = get("CAP_STORE_ROOT")) c.store_root = *v;
  if (auto v = get("CAP_MOCK_AGENTS")) c.mock_agents = truthy(*v);
  if (auto v = get("CAP_MOCK_FAIL")) c.mock_failing = parse_agent_list(*v);
  if (auto v = get("CAP_LLM_BASE_URL")) c.llm.base_url = *v;
  if (auto v = get("CAP_LLM_PATH")) c.llm.path = *v;
  if (auto v = get("CAP_LLM_MODEL")) c.model_name = *v;
  if (auto v = get("CAP_LLM_API_KEY_ENV")) c.llm.api_key_env = *v;
  if (auto v = get("CAP_AGENT_TIMEOUT_MS")) {
    c.agent_timeout_ms = static_cast<int>(number(*v, "CAP_AGENT_TIMEOUT_MS"));
  }
  if (auto v = get("CAP_BOOTSTRAP_RESAMPLES")) {
    c.bootstrap_resamples = number(*v, "CAP_BOOTSTRAP_RESAMPLES");
  }
  if (auto v = get("CAP_SEED")) c.seed = number(*v, "CAP_SEED");
  if (c.port < 0 || c.port > 65535) throw Error(ErrorCode::kInvalidConfig, "port out of range");
  if (c.bootstrap_resamples == 0) {
    throw Error(ErrorCode::kInvalidConfig, "bootstrap_resamples must be positive");
  }
  return c;
}

Config load_config(const std::optional<std::filesystem::path>& file) {
  return load_config(file, [](const char* name) { return std::getenv(name); });
}

json config_to_json(const Config& c) {
  json failing = json::array();
  for (auto a : c.mock_failing) failing.push_back(agents::to_string(a));
  return {{"host", c.host},
          {"port", c.port},
          {"store_root", c.store_root},
          {"mock_agents", c.mock_agents},
          {"mock_failing", failing},
          {"model_name", c.model_name},
          {"agent_timeout_ms", c.agent_timeout_ms},
          {"bootstrap_resamples", c.bootstrap_resamples},
          {"seed", c.seed},
          {"llm",
           {{"base_url", c.llm.base_url},
            {"path", c.llm.path},
            {"api_key_env", c.llm.api_key_env},
            {"temperature", c.llm.temperature}}}};
}

// ---------------------------------------------------------------- errors

json ApiError::to_json() const {
  json out = {{"code", code}, {"message", message}};
  out["detail"] = detail;
  return out;
}

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNotFound: return 404;
    case ErrorCode::kConflict: return 409;
    case ErrorCode::kAgentCallFailed: return 502;
    case ErrorCode::kCorruptEntity:
    case ErrorCode::kTemplateMissing:
    case ErrorCode::kDependencyUnmet: return 500;
    default: return 422;
  }
}

ApiError to_api_error(const Error& e) {
  ApiError err{http_status(e.code()), std::string(error_code_name(e.code())), e.what(), nullptr};
  if (!e.field().empty()) err.detail = {{"field", e.field()}};
  return err;
}

// ---------------------------------------------------------------- service

struct Service::PreparedRun {
  std::string patient_id;
  std::map<std::string, std::string> ids;
  std::map<std::string, std::string> hashes;
  cohort::PatientProfile profile;
  scorer::ModelCard card;
  std::optional<metrics::PredictionSet> preds;
  cip::CostMatrix matrix;
  cip::CipCurve curve;
};

Service::Service(Config config, std::shared_ptr<agents::ChatClient> client)
    : config_(std::move(config)),
      store_(config_.store_root),
      client_(std::move(client)),
      server_(std::make_unique<httplib::Server>()) {
  if (!client_) {
    if (config_.mock_agents) {
      client_ = std::make_shared<agents::MockChatClient>(config_.mock_failing);
    } else {
      client_ = std::make_shared<agents::HttpChatClient>(config_.llm);
    }
  }
  register_routes();
}

Service::~Service() { stop(); }

bool Service::listen() { return server_->listen(config_.host, config_.port); }

int Service::bind_any_port() { return server_->bind_to_any_port(config_.host); }

bool Service::serve() { return server_->listen_after_bind(); }

void Service::stop() {
  if (server_) server_->stop();
}

bool Service::running() const { return server_->is_running(); }

bool Service::claim_patient(const std::string& patient_id) {
  std::lock_guard lock(active_mu_);
  return active_patients_.insert(patient_id).second;
}

void Service::release_patient(const std::string& patient_id) {
  std::lock_guard lock(active_mu_);
  active_patients_.erase(patient_id);
}

std::shared_ptr<Service::PreparedRun> Service::prepare_run(const json& body) {
  if (!body.is_object()) throw Error(ErrorCode::kInvalidData, "body must be a JSON object");
  auto field = [&](const char* name) {
    if (!body.contains(name) || !body[name].is_string() || body[name].get<std::string>().empty()) {
      throw Error(ErrorCode::kInvalidData, fmt::format("field '{}' is required", name), name);
    }
    return body[name].get<std::string>();
  };
  auto run = std::make_shared<PreparedRun>();
  run->patient_id = field("patient");
  run->ids["predictions"] = field("predictions");
  run->ids["matrix"] = field("matrix");
  run->ids["card"] = field("card");

  // The profile comes from the named cohort, or the first stored cohort
  // containing the patient.
  std::optional<cohort::PatientProfile> profile;
  if (body.contains("cohort")) {
    const auto id = field("cohort");
    const auto c = store_.get_cohort(id);
    if (const auto* p = c.find(run->patient_id)) {
      profile = *p;
      run->ids["cohort"] = id;
    }
  } else {
    for (const auto& info : store_.list(store::Kind::kCohort)) {
      const auto c = store_.get_cohort(info.id);
      if (const auto* p = c.find(run->patient_id)) {
        profile = *p;
        run->ids["cohort"] = info.id;
        break;
      }
    }
  }
  if (!profile) {
    throw Error(ErrorCode::kNotFound,
                fmt::format("patient '{}' not found in any stored cohort", run->patient_id),
                "patient");
  }
  run->profile = std::move(*profile);
  run->preds = store_.get_predictions(run->ids["predictions"]);
  if (!run->preds->find(run->patient_id)) {
    throw Error(ErrorCode::kNotFound,
                fmt::format("no prediction for patient '{}' in '{}'", run->patient_id,
                            run->ids["predictions"]),
                "predictions");
  }
  run->matrix = store_.get_matrix(run->ids["matrix"]);
  run->card = store_.get_card(run->ids["card"]);
  run->curve = cip::population_cip(*run->preds, run->matrix, metrics::default_grid());
  const std::map<std::string, store::Kind> kinds{{"cohort", store::Kind::kCohort},
                                                 {"predictions", store::Kind::kPredictions},
                                                 {"matrix", store::Kind::kMatrix},
                                                 {"card", store::Kind::kCard}};
  for (const auto& [role, id] : run->ids) run->hashes[role] = store_.info(kinds.at(role), id).sha256;
  return run;
}

store::RunRecord Service::execute_run(PreparedRun& prepared,
                                      const std::function<void(const json&)>& emit) {
  agents::AgentInputs inputs{prepared.profile, prepared.card, *prepared.preds, prepared.curve,
                             prepared.matrix};
  agents::PipelineOptions opt;
  opt.model_name = config_.mock_agents ? "mock" : config_.model_name;
  opt.timeout = std::chrono::milliseconds(config_.agent_timeout_ms);
  opt.on_event = [&](const agents::PipelineEvent& e) {
    if (!emit) return;
    if (e.exchange) {
      emit({{"event", "agent_completed"},
            {"agent", agents::to_string(e.agent)},
            {"exchange", agents::exchange_to_json(*e.exchange)}});
    } else {
      emit({{"event", "agent_failed"},
            {"agent", agents::to_string(e.agent)},
            {"failure", agents::failure_to_json(*e.failure)}});
    }
  };
  const auto result = agents::run_pipeline(inputs, *client_, opt);

  store::RunRecord run;
  run.created_at = store::utc_now();
  run.patient_id = prepared.patient_id;
  run.input_ids = prepared.ids;
  run.input_hashes = prepared.hashes;
  run.template_hash = opt.templates.hash();
  run.model_name = opt.model_name;
  const double s = agents::risk_score_for(inputs);
  const auto band = cip::risk_band(prepared.curve, s, inputs.band_delta);
  const auto expected = cip::patient_expected_cost(s, prepared.card.decision_threshold,
                                                   prepared.matrix);
  run.artifacts = {{"risk_score", s},
                   {"decision_threshold", prepared.card.decision_threshold},
                   {"risk_band", {{"center", band.center},
                                  {"delta", band.delta},
                                  {"curve", report::cip_to_json(band.slice)}}},
                   {"expected_cost", report::components_to_json(expected)}};
  for (auto id : result.completion_order) {
    if (auto it = result.exchanges.find(id); it != result.exchanges.end()) {
      run.exchanges.push_back(it->second);
    } else {
      run.failures.push_back(result.failures.at(id));
    }
  }
  run.completion_order = result.completion_order;
  {
    std::lock_guard lock(write_mu_);
    run.run_id = store_.new_id(store::Kind::kRun);
    store_.put_run(run);
  }
  return run;
}

void Service::register_routes() {
  auto& srv = *server_;
  srv.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  srv.Options(R"(.*)", [](const Request&, Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
  srv.set_error_handler([](const Request& req, Response& res) {
    if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
    if (res.status == 404) {
      send_error(res, {404, "not_found", "no route for " + req.method + " " + req.path, nullptr});
    } else {
      send_error(res, {res.status, "http_error", httplib::status_message(res.status), nullptr});
    }
    return httplib::Server::HandlerResponse::Handled;
  });

  srv.Get("/health", [](const Request&, Response& res) { send_json(res, 200, {{"status", "ok"}}); });

  // ---- cohorts
  srv.Post("/cohorts", guarded([this](const Request& req, Response& res) {
    const auto body = req.body.empty() ? json::object() : json::parse(req.body);
    if (!body.is_object()) throw Error(ErrorCode::kInvalidData, "body must be a JSON object");
    if (!body.contains("n") || !body["n"].is_number_unsigned() || body["n"].get<std::size_t>() == 0 ||
        body["n"].get<std::size_t>() > kMaxCohortSize) {
      throw Error(ErrorCode::kInvalidData,
                  fmt::format("'n' must be an integer in [1, {}]", kMaxCohortSize), "n");
    }
    const std::uint64_t seed =
        body.contains("seed") ? with_field("seed", [&] { return body["seed"].get<std::uint64_t>(); })
                              : config_.seed;
    const auto specs = body.contains("specs")
                           ? with_field("specs", [&] { return cohort::specs_from_json(body["specs"]); })
                           : cohort::default_specs();
    const auto model = body.contains("label_model")
                           ? with_field("label_model",
                                        [&] { return cohort::label_model_from_json(body["label_model"]); })
                           : cohort::default_label_model();
    const auto c = cohort::generate_cohort(specs, model, body["n"].get<std::size_t>(), seed);
    std::lock_guard lock(write_mu_);
    const std::string id = body.contains("id") ? body["id"].get<std::string>()
                                               : store_.new_id(store::Kind::kCohort);
    if (!store::valid_id(id)) throw Error(ErrorCode::kInvalidData, "invalid id", "id");
    if (store_.exists(store::Kind::kCohort, id)) {
      throw Error(ErrorCode::kConflict, fmt::format("cohort '{}' already exists", id), "id");
    }
    store_.put_cohort(id, c);
    send_json(res, 201, {{"id", id}, {"n", c.profiles.size()}, {"seed", seed},
                         {"prevalence", c.prevalence()}});
  }));
  srv.Get("/cohorts", guarded([this](const Request&, Response& res) {
    send_json(res, 200, listing(store_.list(store::Kind::kCohort)));
  }));
  srv.Get(R"(/cohorts/([A-Za-z0-9._-]+))", guarded([this](const Request& req, Response& res) {
    const std::string id = req.matches[1];
    if (req.has_param("format") && req.get_param_value("format") == "csv") {
      std::ostringstream out;
      cohort::write_cohort_csv(out, store_.get_cohort(id));
      res.set_content(out.str(), "text/csv");
      return;
    }
    auto doc = cohort::cohort_to_json(store_.get_cohort(id));
    doc["id"] = id;
    send_json(res, 200, doc);
  }));

  // ---- predictions
  srv.Post("/predictions", guarded([this](const Request& req, Response& res) {
    std::optional<metrics::PredictionSet> preds;
    json extra = json::object();
    std::string id = req.has_param("id") ? req.get_param_value("id") : "";
    const auto type = req.get_header_value("Content-Type");
    if (req.is_multipart_form_data()) {
      if (!req.has_file("file")) {
        throw Error(ErrorCode::kInvalidData, "multipart upload needs a 'file' part", "file");
      }
      std::istringstream in(req.get_file_value("file").content);
      preds = with_field("file", [&] { return scorer::import_scores(in); });
    } else if (type.starts_with("text/csv")) {
      std::istringstream in(req.body);
      preds = with_field("body", [&] { return scorer::import_scores(in); });
    } else {
      // Scorer run: {"cohort": id, "model": id?, "l2": .., "max_iter": .., "features": [..]}
      const auto body = json::parse(req.body);
      if (!body.is_object() || !body.contains("cohort") || !body["cohort"].is_string()) {
        throw Error(ErrorCode::kInvalidData, "field 'cohort' is required", "cohort");
      }
      if (id.empty() && body.contains("id")) id = body["id"].get<std::string>();
      const auto c = store_.get_cohort(body["cohort"].get<std::string>());
      if (body.contains("model")) {
        const auto model = store_.get_model(body["model"].get<std::string>());
        preds = scorer::score_cohort(model, c);
        extra["model"] = body["model"];
      } else {
        scorer::TrainingOptions opt;
        opt.l2 = body.value("l2", opt.l2);
        opt.max_iter = body.value("max_iter", opt.max_iter);
        opt.tol = body.value("tol", opt.tol);
        const auto names = body.value("features", std::vector<std::string>{});
        const auto trained = with_field("features", [&] {
          return scorer::train_logistic(scorer::features_from_cohort(c, names), c.labels, opt);
        });
        preds = scorer::score_cohort(trained.model, c);
        std::lock_guard lock(write_mu_);
        const auto model_id = store_.new_id(store::Kind::kModel);
        store_.put_model(model_id, trained.model, &trained.report);
        extra["model"] = model_id;
        extra["converged"] = trained.report.converged;
        extra["iterations"] = trained.report.iterations;
      }
      extra["cohort"] = body["cohort"];
    }
    std::lock_guard lock(write_mu_);
    if (id.empty()) id = store_.new_id(store::Kind::kPredictions);
    if (!store::valid_id(id)) throw Error(ErrorCode::kInvalidData, "invalid id", "id");
    store_.put_predictions(id, *preds);
    auto out = predictions_summary(id, *preds);
    out.update(extra);
    send_json(res, 201, out);
  }));
  srv.Get("/predictions", guarded([this](const Request&, Response& res) {
    send_json(res, 200, listing(store_.list(store::Kind::kPredictions)));
  }));
  srv.Get(R"(/predictions/([A-Za-z0-9._-]+))", guarded([this](const Request& req, Response& res) {
    const std::string id = req.matches[1];
    const auto preds = store_.get_predictions(id);
    if (req.has_param("format") && req.get_param_value("format") == "csv") {
      std::ostringstream out;
      scorer::write_predictions_csv(out, preds);
      res.set_content(out.str(), "text/csv");
      return;
    }
    auto doc = predictions_summary(id, preds);
    json records = json::array();
    for (const auto& r : preds.records()) {
      records.push_back({{"patient_id", r.patient_id}, {"score", r.score}, {"label", r.label}});
    }
    doc["records"] = records;
    send_json(res, 200, doc);
  }));
  srv.Get(R"(/predictions/([A-Za-z0-9._-]+)/metrics)",
          guarded([this](const Request& req, Response& res) {
            report::MetricsOptions opt;
            opt.grid = grid_param(req, "0:1:0.01");
            opt.bootstrap.n_resamples = config_.bootstrap_resamples;
            opt.bootstrap.seed = config_.seed;
            if (req.has_param("n_boot")) {
              opt.bootstrap.n_resamples = parse_unsigned(req.get_param_value("n_boot"), "n_boot");
            }
            if (req.has_param("seed")) {
              opt.bootstrap.seed = parse_unsigned(req.get_param_value("seed"), "seed");
            }
            if (req.has_param("bins")) {
              opt.calibration_bins = parse_unsigned(req.get_param_value("bins"), "bins");
            }
            auto doc = report::metrics_report(store_.get_predictions(req.matches[1]), opt);
            doc["predictions"] = std::string(req.matches[1]);
            send_json(res, 200, doc);
          }));

  // ---- cost matrices
  srv.Put(R"(/cost-matrices/([A-Za-z0-9._-]+))", guarded([this](const Request& req, Response& res) {
    const auto doc = json::parse(req.body);
    const auto validated = cip::validate_cost_matrix(doc);
    std::lock_guard lock(write_mu_);
    const std::string id = req.matches[1];
    const bool existed = store_.exists(store::Kind::kMatrix, id);
    store_.put_matrix(id, validated.matrix);
    send_json(res, existed ? 200 : 201, {{"id", id}, {"warnings", validated.warnings}});
  }));
  srv.Get("/cost-matrices", guarded([this](const Request&, Response& res) {
    send_json(res, 200, listing(store_.list(store::Kind::kMatrix)));
  }));
  srv.Get(R"(/cost-matrices/([A-Za-z0-9._-]+))", guarded([this](const Request& req, Response& res) {
    send_json(res, 200, cip::to_document(store_.get_matrix(req.matches[1])));
  }));

  // ---- model cards
  auto put_card = [this](const std::string& id, const Request& req, Response& res, bool create) {
    const auto card = with_field("card", [&] { return scorer::card_from_json(json::parse(req.body)); });
    std::lock_guard lock(write_mu_);
    const std::string target = id.empty() ? store_.new_id(store::Kind::kCard) : id;
    const bool existed = store_.exists(store::Kind::kCard, target);
    if (create && existed) {
      throw Error(ErrorCode::kConflict, fmt::format("card '{}' already exists", target), "id");
    }
    store_.put_card(target, card);
    send_json(res, existed ? 200 : 201, {{"id", target}});
  };
  srv.Post("/cards", guarded([put_card](const Request& req, Response& res) {
    put_card(req.has_param("id") ? req.get_param_value("id") : "", req, res, true);
  }));
  srv.Put(R"(/cards/([A-Za-z0-9._-]+))", guarded([put_card](const Request& req, Response& res) {
    put_card(req.matches[1], req, res, false);
  }));
  srv.Get("/cards", guarded([this](const Request&, Response& res) {
    send_json(res, 200, listing(store_.list(store::Kind::kCard)));
  }));
  srv.Get(R"(/cards/([A-Za-z0-9._-]+))", guarded([this](const Request& req, Response& res) {
    send_json(res, 200, scorer::card_to_json(store_.get_card(req.matches[1])));
  }));

  // ---- curves
  srv.Get("/cip", guarded([this](const Request& req, Response& res) {
    const auto preds_id = required_param(req, "predictions");
    const auto matrix_id = required_param(req, "matrix");
    const auto grid = grid_param(req, "0:1:0.01");
    const auto curve =
        cip::population_cip(store_.get_predictions(preds_id), store_.get_matrix(matrix_id), grid);
    if (req.has_param("format") && req.get_param_value("format") == "csv") {
      std::ostringstream out;
      cip::write_cip_csv(out, curve);
      res.set_content(out.str(), "text/csv");
      return;
    }
    auto doc = report::cip_to_json(curve);
    doc["predictions"] = preds_id;
    doc["matrix"] = matrix_id;
    send_json(res, 200, doc);
  }));
  srv.Get("/dca", guarded([this](const Request& req, Response& res) {
    const auto preds_id = required_param(req, "predictions");
    const auto grid = grid_param(req, kDcaDefaultGrid);
    const auto curve = with_field("grid", [&] {
      return cip::dca_curve(store_.get_predictions(preds_id), grid);
    });
    if (req.has_param("format") && req.get_param_value("format") == "csv") {
      std::ostringstream out;
      cip::write_dca_csv(out, curve);
      res.set_content(out.str(), "text/csv");
      return;
    }
    auto doc = report::dca_to_json(curve);
    doc["predictions"] = preds_id;
    send_json(res, 200, doc);
  }));
  srv.Get(R"(/patients/([A-Za-z0-9._-]+)/expected-cost)",
          guarded([this](const Request& req, Response& res) {
            const std::string patient = req.matches[1];
            const double t = parse_number(required_param(req, "t"), "t");
            const auto matrix = store_.get_matrix(required_param(req, "matrix"));
            double s = 0.0;
            if (req.has_param("s")) {
              s = parse_number(req.get_param_value("s"), "s");
            } else {
              const auto preds_id = required_param(req, "predictions");
              const auto preds = store_.get_predictions(preds_id);
              const auto* rec = preds.find(patient);
              if (!rec) {
                throw Error(ErrorCode::kNotFound,
                            fmt::format("no prediction for patient '{}' in '{}'", patient, preds_id),
                            "predictions");
              }
              s = rec->score;
            }
            if (!(t >= 0.0 && t <= 1.0)) {
              throw Error(ErrorCode::kRangeError, "threshold outside [0, 1]", "t");
            }
            const auto c = with_field("s", [&] { return cip::patient_expected_cost(s, t, matrix); });
            send_json(res, 200,
                      {{"patient_id", patient},
                       {"s", s},
                       {"t", t},
                       {"classified_high_risk", s >= t},
                       {"components", report::components_to_json(c)},
                       {"net", ((c[0] + c[1]) + c[2]) + c[3]}});
          }));

  // ---- agent runs
  srv.Post("/agent-runs", guarded([this](const Request& req, Response& res) {
    const auto body = json::parse(req.body);
    const auto prepared = prepare_run(body);
    const std::string patient = prepared->patient_id;
    if (!claim_patient(patient)) {
      throw Error(ErrorCode::kConflict,
                  fmt::format("an agent run for patient '{}' is already in progress", patient),
                  "patient");
    }
    const bool stream = req.has_param("stream") && truthy(req.get_param_value("stream"));
    if (!stream) {
      struct Release {
        Service* s;
        std::string p;
        ~Release() { s->release_patient(p); }
      } release{this, patient};
      const auto run = execute_run(*prepared, nullptr);
      auto doc = store::run_to_json(run);
      if (run.failures.empty()) {
        send_json(res, 201, doc);
        return;
      }
      // Pass the first root failure through; partial results ride along.
      const auto& first = run.failures.front();
      const bool upstream = std::any_of(run.failures.begin(), run.failures.end(), [](const auto& f) {
        return f.code == ErrorCode::kAgentCallFailed;
      });
      const ErrorCode code = upstream ? ErrorCode::kAgentCallFailed : first.code;
      send_error(res, {http_status(code), std::string(error_code_name(code)), first.message,
                       {{"run_id", run.run_id}, {"run", doc}}});
      return;
    }

    // NDJSON: one line per agent in completion order, then the run record.
    struct StreamState {
      std::mutex mu;
      std::condition_variable cv;
      std::deque<std::string> lines;
      bool finished = false;
      std::future<void> worker;
    };
    auto state = std::make_shared<StreamState>();
    auto push = [state](const json& line) {
      {
        std::lock_guard lock(state->mu);
        state->lines.push_back(line.dump() + "\n");
      }
      state->cv.notify_one();
    };
    state->worker = std::async(std::launch::async, [this, prepared, patient, push, state] {
      try {
        const auto run = execute_run(*prepared, push);
        push({{"event", "run_completed"}, {"run_id", run.run_id}, {"run", store::run_to_json(run)}});
      } catch (const Error& e) {
        push({{"event", "error"}, {"error", to_api_error(e).to_json()}});
      } catch (const std::exception& e) {
        push({{"event", "error"}, {"error", ApiError{500, "internal_error", e.what(), nullptr}.to_json()}});
      }
      release_patient(patient);
      {
        std::lock_guard lock(state->mu);
        state->finished = true;
      }
      state->cv.notify_one();
    });
    res.status = 200;
    res.set_chunked_content_provider(
        "application/x-ndjson",
        [state](std::size_t, httplib::DataSink& sink) {
          std::unique_lock lock(state->mu);
          state->cv.wait(lock, [&] { return !state->lines.empty() || state->finished; });
          while (!state->lines.empty()) {
            const auto line = std::move(state->lines.front());
            state->lines.pop_front();
            lock.unlock();
            if (sink.is_writable()) sink.write(line.data(), line.size());
            lock.lock();
          }
          if (state->finished) sink.done();
          return true;
        },
        [state](bool) {
          if (state->worker.valid()) state->worker.wait();
        });
  }));
  srv.Get("/agent-runs", guarded([this](const Request&, Response& res) {
    send_json(res, 200, listing(store_.list(store::Kind::kRun)));
  }));
  srv.Get(R"(/agent-runs/([A-Za-z0-9._-]+))", guarded([this](const Request& req, Response& res) {
    const bool verify = !(req.has_param("verify") && !truthy(req.get_param_value("verify")));
    send_json(res, 200, store::run_to_json(store_.get_run(req.matches[1], verify)));
  }));
}

}  // namespace cap::service
