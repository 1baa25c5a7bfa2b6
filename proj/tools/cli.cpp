#include "cli.hpp"

#include <algorithm>
#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "cap/agents.hpp"
#include "cap/chat_http.hpp"
#include "cap/cip.hpp"
#include "cap/cohort.hpp"
#include "cap/metrics.hpp"
#include "cap/report.hpp"
#include "cap/scorer.hpp"
#include "cap/service.hpp"
#include "cap/store.hpp"

namespace cap::cli {
namespace {

using nlohmann::json;

// Prefixes errors with the flag and file they came from.
template <class F>
auto from_file(const std::string& flag, const std::string& path, F f) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(e.code(), fmt::format("{} {}: {}", flag, path, e.what()), e.field());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParseError, fmt::format("{} {}: {}", flag, path, e.what()));
  }
}

json read_json(const std::string& flag, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kNotFound, fmt::format("{} {}: cannot open file", flag, path));
  auto doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) {
    throw Error(ErrorCode::kParseError, fmt::format("{} {}: not valid JSON", flag, path));
  }
  return doc;
}

metrics::PredictionSet load_preds(const std::string& path) {
  return from_file("--preds", path, [&] { return scorer::import_scores_file(path); });
}

cohort::Cohort load_cohort(const std::string& path) {
  const auto doc = read_json("--cohort", path);
  return from_file("--cohort", path, [&] { return cohort::cohort_from_json(doc); });
}

cip::CostMatrix load_matrix(const std::string& path, std::ostream& err) {
  const auto doc = read_json("--matrix", path);
  const auto v = from_file("--matrix", path, [&] { return cip::validate_cost_matrix(doc); });
  for (const auto& w : v.warnings) err << "warning: --matrix " << path << ": " << w << "\n";
  return v.matrix;
}

std::vector<double> load_grid(const std::string& flag, const std::string& text) {
  try {
    return metrics::parse_grid(text);
  } catch (const Error& e) {
    throw Error(e.code(), fmt::format("{} '{}': {}", flag, text, e.what()));
  }
}

// Writes to --out when given, stdout otherwise.
void emit(const std::string& out_path, std::ostream& out, const std::string& text) {
  if (out_path.empty() || out_path == "-") {
    out << text;
    return;
  }
  std::ofstream f(out_path, std::ios::binary | std::ios::trunc);
  f << text;
  if (!f) throw Error(ErrorCode::kInvalidConfig, "--out " + out_path + ": cannot write file");
}

std::vector<std::string> split(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

service::Service* g_serving = nullptr;

void on_signal(int) {
  if (g_serving) g_serving->stop();
}

}  // namespace

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNotFound: return kNotFound;
    case ErrorCode::kInvalidConfig: return kBadConfig;
    case ErrorCode::kAgentCallFailed:
    case ErrorCode::kDependencyUnmet:
    case ErrorCode::kTemplateMissing: return kAgentFailure;
    case ErrorCode::kCorruptEntity: return kCorrupt;
    case ErrorCode::kConflict: return kConflict;
    default: return kBadInput;
  }
}

int run_cli(const std::vector<std::string>& args, Streams io) {
  CLI::App app{"Cost-aware risk prediction: cohorts, scores, metrics, cost curves, agents", "cap"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Seed for every stochastic stage")->capture_default_str();
  std::string out_path;
  app.add_option("-o,--out", out_path, "Output file (default: stdout)");

  // cohort gen
  auto* cohort_cmd = app.add_subcommand("cohort", "Synthetic cohorts")->require_subcommand(1);
  auto* gen = cohort_cmd->add_subcommand("gen", "Generate a cohort from summary statistics");
  std::size_t n = 1000;
  std::string specs_path, label_model_path, cohort_format = "json";
  gen->add_option("-n,--n", n, "Number of patients")->capture_default_str()->check(CLI::PositiveNumber);
  gen->add_option("--specs", specs_path, "Variable specs JSON (default: built-in baseline table)");
  gen->add_option("--label-model", label_model_path, "Label model JSON (default: built-in)");
  gen->add_option("--format", cohort_format, "json or csv")
      ->capture_default_str()
      ->check(CLI::IsMember({"json", "csv"}));

  // score train | apply | import
  auto* score_cmd = app.add_subcommand("score", "Train, apply or import risk scores")->require_subcommand(1);
  auto* train = score_cmd->add_subcommand("train", "Fit a logistic regression on a cohort");
  std::string cohort_path, preds_out, features;
  scorer::TrainingOptions topt;
  train->add_option("--cohort", cohort_path, "Cohort JSON")->required();
  train->add_option("--l2", topt.l2, "L2 penalty")->capture_default_str();
  train->add_option("--max-iter", topt.max_iter, "Iteration cap")->capture_default_str();
  train->add_option("--tol", topt.tol, "Gradient tolerance")->capture_default_str();
  train->add_option("--features", features, "Comma-separated feature subset");
  train->add_option("--preds-out", preds_out, "Also write in-sample predictions CSV");
  auto* apply = score_cmd->add_subcommand("apply", "Score a cohort with a trained model");
  std::string model_path;
  apply->add_option("--model", model_path, "Model JSON")->required();
  apply->add_option("--cohort", cohort_path, "Cohort JSON")->required();
  auto* import = score_cmd->add_subcommand("import", "Validate and normalise an external score file");
  std::string preds_path, store_root, entity_id;
  import->add_option("--preds", preds_path, "CSV with header patient_id,score,label")->required();
  import->add_option("--store", store_root, "Also save into this store root");
  import->add_option("--id", entity_id, "Entity id in the store (default: generated)");

  // metrics report
  auto* metrics_cmd = app.add_subcommand("metrics", "Discrimination and calibration")->require_subcommand(1);
  auto* report_cmd = metrics_cmd->add_subcommand("report", "AUROC/AUPRC/Brier with bootstrap CIs");
  std::string grid_text = "0:1:0.01";
  std::size_t n_boot = 1000, threads = 1, bins = 10;
  bool curves = false;
  report_cmd->add_option("--preds", preds_path, "Predictions CSV")->required();
  report_cmd->add_option("--grid", grid_text, "Threshold grid start:stop:step")->capture_default_str();
  report_cmd->add_option("--n-boot", n_boot, "Bootstrap resamples")->capture_default_str()->check(CLI::PositiveNumber);
  report_cmd->add_option("--threads", threads, "Bootstrap threads")->capture_default_str()->check(CLI::PositiveNumber);
  report_cmd->add_option("--bins", bins, "Calibration bins")->capture_default_str()->check(CLI::PositiveNumber);
  report_cmd->add_flag("--curves", curves, "Include ROC/PR/calibration/F1 arrays");

  // cip curve / dca curve
  std::string matrix_path, curve_format = "csv";
  auto* cip_cmd = app.add_subcommand("cip", "Cost curves")->require_subcommand(1);
  auto* cip_curve = cip_cmd->add_subcommand("curve", "Stacked per-capita cost components per threshold");
  cip_curve->add_option("--preds", preds_path, "Predictions CSV")->required();
  cip_curve->add_option("--matrix", matrix_path, "Cost matrix JSON")->required();
  cip_curve->add_option("--grid", grid_text, "Threshold grid")->capture_default_str();
  cip_curve->add_option("--format", curve_format, "csv or json")
      ->capture_default_str()
      ->check(CLI::IsMember({"csv", "json"}));
  auto* dca_cmd = app.add_subcommand("dca", "Decision curve analysis")->require_subcommand(1);
  auto* dca_curve = dca_cmd->add_subcommand("curve", "Net benefit per threshold probability");
  std::string dca_grid = "0:0.99:0.01";
  dca_curve->add_option("--preds", preds_path, "Predictions CSV")->required();
  dca_curve->add_option("--grid", dca_grid, "Threshold grid, values below 1")->capture_default_str();
  dca_curve->add_option("--format", curve_format, "csv or json")
      ->capture_default_str()
      ->check(CLI::IsMember({"csv", "json"}));

  // agents run
  auto* agents_cmd = app.add_subcommand("agents", "Explanation agents")->require_subcommand(1);
  auto* agents_run = agents_cmd->add_subcommand("run", "Run the four-agent pipeline for one patient");
  bool mock = false, concurrent = false;
  std::string patient, card_path, fail_agents, base_url = "https://api.openai.com",
                                                  model_name(agents::kDefaultModel),
                                                  api_key_env = "OPENAI_API_KEY";
  double threshold = -1.0;
  int timeout_ms = 60000;
  agents_run->add_flag("--mock", mock, "Use the deterministic offline client");
  agents_run->add_option("--fail", fail_agents, "Mock fault injection, e.g. III or II,III");
  agents_run->add_flag("--concurrent", concurrent, "Run II and III in parallel (completion order may vary)");
  agents_run->add_option("--patient", patient, "Patient id")->required();
  agents_run->add_option("--cohort", cohort_path, "Cohort JSON holding the patient")->required();
  agents_run->add_option("--preds", preds_path, "Predictions CSV")->required();
  agents_run->add_option("--matrix", matrix_path, "Cost matrix JSON")->required();
  auto* card_opt = agents_run->add_option("--card", card_path, "Model card JSON");
  agents_run->add_option("--threshold", threshold, "Decision threshold when no card is given")
      ->excludes(card_opt);
  agents_run->add_option("--base-url", base_url, "Chat-completion base URL")->capture_default_str();
  agents_run->add_option("--model", model_name, "Model name")->capture_default_str();
  agents_run->add_option("--api-key-env", api_key_env, "Environment variable holding the API key")
      ->capture_default_str();
  agents_run->add_option("--timeout-ms", timeout_ms, "Per-call timeout")->capture_default_str();

  // serve
  auto* serve = app.add_subcommand("serve", "Start the HTTP service");
  std::string config_path, host;
  int port = -1;
  bool serve_mock = false, serve_live = false;
  serve->add_option("--config", config_path, "JSON config file (CAP_* env vars override it)");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port");
  serve->add_option("--store", store_root, "Store root");
  serve->add_flag("--mock", serve_mock, "Offline mock agents");
  serve->add_flag("--live", serve_live, "Call the configured LLM endpoint")->excludes("--mock");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, io.out, io.err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) {
      const auto specs = specs_path.empty()
                             ? cohort::default_specs()
                             : from_file("--specs", specs_path, [&] {
                                 return cohort::specs_from_json(read_json("--specs", specs_path));
                               });
      const auto lm = label_model_path.empty()
                          ? cohort::default_label_model()
                          : from_file("--label-model", label_model_path, [&] {
                              return cohort::label_model_from_json(
                                  read_json("--label-model", label_model_path));
                            });
      const auto c = cohort::generate_cohort(specs, lm, n, seed);
      if (cohort_format == "csv") {
        std::ostringstream s;
        cohort::write_cohort_csv(s, c);
        emit(out_path, io.out, s.str());
      } else {
        emit(out_path, io.out, cohort::cohort_to_json(c).dump(2) + "\n");
      }
    } else if (train->parsed()) {
      const auto c = load_cohort(cohort_path);
      const auto result = from_file("--cohort", cohort_path, [&] {
        return scorer::train_logistic(scorer::features_from_cohort(c, split(features)), c.labels, topt);
      });
      if (!result.report.converged) {
        io.err << "warning: training stopped after " << result.report.iterations
               << " iterations without reaching --tol\n";
      }
      emit(out_path, io.out, scorer::model_to_json(result.model, &result.report).dump(2) + "\n");
      if (!preds_out.empty()) {
        std::ostringstream s;
        scorer::write_predictions_csv(s, scorer::score_cohort(result.model, c));
        emit(preds_out, io.out, s.str());
      }
    } else if (apply->parsed()) {
      const auto doc = read_json("--model", model_path);
      const auto model = from_file("--model", model_path, [&] { return scorer::model_from_json(doc); });
      const auto c = load_cohort(cohort_path);
      std::ostringstream s;
      scorer::write_predictions_csv(s, from_file("--cohort", cohort_path, [&] {
                                      return scorer::score_cohort(model, c);
                                    }));
      emit(out_path, io.out, s.str());
    } else if (import->parsed()) {
      const auto preds = load_preds(preds_path);
      json summary = {{"n", preds.size()},
                      {"positives", preds.positives()},
                      {"prevalence", preds.prevalence()}};
      if (!store_root.empty()) {
        store::Store st(store_root);
        const auto id = entity_id.empty() ? st.new_id(store::Kind::kPredictions) : entity_id;
        const auto info = st.put_predictions(id, preds);
        summary["id"] = id;
        summary["sha256"] = info.sha256;
      }
      if (out_path.empty()) {
        io.out << summary.dump(2) << "\n";
      } else {
        std::ostringstream s;
        scorer::write_predictions_csv(s, preds);
        emit(out_path, io.out, s.str());
        io.err << summary.dump() << "\n";
      }
    } else if (report_cmd->parsed()) {
      const auto preds = load_preds(preds_path);
      report::MetricsOptions opt;
      opt.grid = load_grid("--grid", grid_text);
      opt.bootstrap.n_resamples = n_boot;
      opt.bootstrap.seed = seed;
      opt.bootstrap.threads = threads;
      opt.calibration_bins = bins;
      opt.curves = curves;
      emit(out_path, io.out, report::metrics_report(preds, opt).dump(2) + "\n");
    } else if (cip_curve->parsed()) {
      const auto preds = load_preds(preds_path);
      const auto matrix = load_matrix(matrix_path, io.err);
      const auto curve = cip::population_cip(preds, matrix, load_grid("--grid", grid_text));
      std::ostringstream s;
      if (curve_format == "csv") {
        cip::write_cip_csv(s, curve);
      } else {
        s << report::cip_to_json(curve).dump(2) << "\n";
      }
      emit(out_path, io.out, s.str());
    } else if (dca_curve->parsed()) {
      const auto preds = load_preds(preds_path);
      const auto grid = load_grid("--grid", dca_grid);
      const auto curve = [&] {
        try {
          return cip::dca_curve(preds, grid);
        } catch (const Error& e) {
          throw Error(e.code(), fmt::format("--grid '{}': {}", dca_grid, e.what()));
        }
      }();
      std::ostringstream s;
      if (curve_format == "csv") {
        cip::write_dca_csv(s, curve);
      } else {
        s << report::dca_to_json(curve).dump(2) << "\n";
      }
      emit(out_path, io.out, s.str());
    } else if (agents_run->parsed()) {
      const auto c = load_cohort(cohort_path);
      const auto* profile = c.find(patient);
      if (!profile) {
        throw Error(ErrorCode::kNotFound,
                    fmt::format("--patient {}: not in --cohort {}", patient, cohort_path));
      }
      const auto preds = load_preds(preds_path);
      if (!preds.find(patient)) {
        throw Error(ErrorCode::kNotFound,
                    fmt::format("--patient {}: no score in --preds {}", patient, preds_path));
      }
      const auto matrix = load_matrix(matrix_path, io.err);
      scorer::ModelCard card;
      if (!card_path.empty()) {
        const auto doc = read_json("--card", card_path);
        card = from_file("--card", card_path, [&] { return scorer::card_from_json(doc); });
      } else {
        // Without a card, describe the scores and pick the best-F1 threshold.
        const auto best = metrics::best_threshold(preds, metrics::default_grid());
        card.description = "Risk scores imported from " + preds_path + ".";
        card.decision_threshold = threshold >= 0.0 ? threshold : best.threshold;
        card.metric_summary = {{"auroc", metrics::auroc(preds)},
                               {"auprc", metrics::auprc(preds)},
                               {"brier", metrics::brier(preds)}};
        if (card.decision_threshold > 1.0) {
          throw Error(ErrorCode::kRangeError, "--threshold must lie in [0, 1]");
        }
      }
      const auto curve = cip::population_cip(preds, matrix, metrics::default_grid());

      std::unique_ptr<agents::ChatClient> client;
      if (mock) {
        std::set<agents::AgentId> failing;
        for (const auto& name : split(fail_agents)) {
          const auto id = agents::parse_agent(name);
          if (!id) throw Error(ErrorCode::kInvalidConfig, "--fail: unknown agent '" + name + "'");
          failing.insert(*id);
        }
        client = std::make_unique<agents::MockChatClient>(failing);
      } else {
        if (!fail_agents.empty()) throw Error(ErrorCode::kInvalidConfig, "--fail needs --mock");
        client = std::make_unique<agents::HttpChatClient>(
            agents::HttpChatConfig{base_url, "/v1/chat/completions", api_key_env, 0.0});
      }
      agents::PipelineOptions popt;
      popt.model_name = mock ? "mock" : model_name;
      popt.timeout = std::chrono::milliseconds(timeout_ms);
      popt.concurrent = concurrent;
      auto result =
          agents::run_pipeline({*profile, card, preds, curve, matrix}, *client, popt);
      // Wall-clock latency would make mock transcripts differ run to run.
      if (mock) {
        for (auto& [id, ex] : result.exchanges) ex.latency_ms = 0.0;
      }
      json transcript = agents::result_to_json(result);
      transcript["patient_id"] = patient;
      transcript["risk_score"] = preds.find(patient)->score;
      transcript["decision_threshold"] = card.decision_threshold;
      transcript["template_hash"] = popt.templates.hash();
      transcript["model_name"] = popt.model_name;
      emit(out_path, io.out, transcript.dump(2) + "\n");
      for (const auto& [id, f] : result.failures) {
        io.err << (io.color ? "\033[33mwarning\033[0m" : "warning") << ": agent "
               << agents::to_string(id) << ": " << f.message << "\n";
      }
      if (!result.ok()) return kAgentFailure;
    } else if (serve->parsed()) {
      auto cfg = service::load_config(config_path.empty()
                                          ? std::nullopt
                                          : std::optional<std::filesystem::path>(config_path));
      if (!host.empty()) cfg.host = host;
      if (port >= 0) cfg.port = port;
      if (!store_root.empty()) cfg.store_root = store_root;
      if (serve_mock) cfg.mock_agents = true;
      if (serve_live) cfg.mock_agents = false;
      if (app.count("--seed")) cfg.seed = seed;
      service::Service svc(cfg);
      g_serving = &svc;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      io.err << "listening on " << cfg.host << ":" << cfg.port << " (store " << cfg.store_root
             << ", " << (cfg.mock_agents ? "mock" : "live") << " agents)" << std::endl;
      const bool ok = svc.listen();
      g_serving = nullptr;
      if (!ok) {
        throw Error(ErrorCode::kInvalidConfig,
                    fmt::format("--port {}: cannot bind {}:{}", cfg.port, cfg.host, cfg.port));
      }
    }
  } catch (const Error& e) {
    io.err << (io.color ? "\033[31merror\033[0m" : "error") << " [" << error_code_name(e.code())
           << "]: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    io.err << (io.color ? "\033[31merror\033[0m" : "error") << ": " << e.what() << "\n";
    return kInternal;
  }
  return kOk;
}

}  // namespace cap::cli
