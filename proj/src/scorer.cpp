#include "cap/scorer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "cap/error.hpp"
#include "cap/hash.hpp"
#include "cap/numfmt.hpp"

namespace cap::scorer {
namespace {

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + exp(z)) without overflow.
double softplus(double z) {
  return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

std::string line_error(std::size_t line, const std::string& message) {
  return "line " + std::to_string(line) + ": " + message;
}

std::string_view trim_cr(std::string_view s) {
  if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
  return s;
}

}  // namespace

FeatureMatrix features_from_cohort(const cohort::Cohort& cohort,
                                   const std::vector<std::string>& names) {
  FeatureMatrix fm;
  if (names.empty()) {
    for (const auto& s : cohort.specs) fm.names.push_back(s.name);
  } else {
    fm.names = names;
  }
  fm.rows.reserve(cohort.profiles.size());
  for (const auto& p : cohort.profiles) {
    std::vector<double> row;
    row.reserve(fm.names.size());
    for (const auto& name : fm.names) {
      auto v = p.value(name);
      if (!v) {
        throw Error(ErrorCode::kMissingFeature, p.patient_id + " lacks feature '" + name + "'");
      }
      row.push_back(*v);
    }
    fm.rows.push_back(std::move(row));
  }
  return fm;
}

std::string compute_feature_hash(const std::vector<std::string>& names,
                                 const std::vector<Standardization>& standardization) {
  std::string canon;
  for (std::size_t i = 0; i < names.size(); ++i) {
    canon += names[i];
    canon += '\x1f';
    if (i < standardization.size()) {
      canon += format_double(standardization[i].mean);
      canon += '\x1f';
      canon += format_double(standardization[i].sd);
    }
    canon += '\x1e';
  }
  return sha256_hex(canon);
}

FeatureMatrix standardize(const LogisticModel& model, const FeatureMatrix& raw) {
  if (raw.standardized_with) {
    throw Error(ErrorCode::kInvalidData,
                "features are already standardized (feature hash " + *raw.standardized_with + ")");
  }
  if (raw.names != model.feature_names) {
    throw Error(ErrorCode::kInvalidData, "feature names do not match the model");
  }
  FeatureMatrix out;
  out.names = raw.names;
  out.standardized_with = model.feature_hash;
  out.rows.reserve(raw.rows.size());
  for (const auto& row : raw.rows) {
    std::vector<double> z(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) {
      z[j] = (row[j] - model.standardization[j].mean) / model.standardization[j].sd;
    }
    out.rows.push_back(std::move(z));
  }
  return out;
}

Objective logistic_objective(std::span<const double> params,
                             const std::vector<std::vector<double>>& rows,
                             std::span<const int> labels, double l2) {
  const std::size_t d = params.size() - 1;
  const double n = static_cast<double>(rows.size());
  Objective obj;
  obj.gradient.assign(params.size(), 0.0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double z = params[0];
    for (std::size_t j = 0; j < d; ++j) z += params[j + 1] * rows[i][j];
    const double y = static_cast<double>(labels[i]);
    obj.loss += softplus(z) - y * z;
    const double r = sigmoid(z) - y;
    obj.gradient[0] += r;
    for (std::size_t j = 0; j < d; ++j) obj.gradient[j + 1] += r * rows[i][j];
  }
  obj.loss /= n;
  for (double& g : obj.gradient) g /= n;
  for (std::size_t j = 1; j <= d; ++j) {
    obj.loss += 0.5 * l2 * params[j] * params[j];
    obj.gradient[j] += l2 * params[j];
  }
  return obj;
}

TrainResult train_logistic(const FeatureMatrix& features, std::span<const int> labels,
                           const TrainingOptions& options) {
  if (features.standardized_with) {
    throw Error(ErrorCode::kInvalidData, "training expects raw features; got standardized ones");
  }
  const std::size_t n = features.rows.size();
  const std::size_t d = features.names.size();
  if (n != labels.size()) throw Error(ErrorCode::kInvalidData, "features and labels differ in length");
  if (n < 2) throw Error(ErrorCode::kInvalidData, "training needs at least 2 samples");
  if (!(options.l2 >= 0.0)) throw Error(ErrorCode::kInvalidConfig, "l2 must be non-negative");

  std::size_t pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw Error(ErrorCode::kInvalidData, "labels must be 0 or 1");
    pos += static_cast<std::size_t>(y);
  }
  if (pos == 0 || pos == n) {
    throw Error(ErrorCode::kDegenerateLabels, "training labels contain a single class");
  }
  for (const auto& row : features.rows) {
    if (row.size() != d) throw Error(ErrorCode::kInvalidData, "ragged feature matrix");
    for (double v : row) {
      if (!std::isfinite(v)) throw Error(ErrorCode::kInvalidData, "non-finite feature value");
    }
  }

  LogisticModel model;
  model.feature_names = features.names;
  model.standardization.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (const auto& row : features.rows) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (const auto& row : features.rows) var += (row[j] - mean) * (row[j] - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    // Constant columns keep sd = 1 so the invariant sd > 0 holds.
    model.standardization[j] = {mean, sd > 0.0 ? sd : 1.0};
  }
  model.feature_hash = compute_feature_hash(model.feature_names, model.standardization);
  const auto z = standardize(model, features);

  std::vector<double> params(d + 1, 0.0);
  TrainResult result;
  auto& report = result.report;
  auto current = logistic_objective(params, z.rows, labels, options.l2);
  report.loss_history.push_back(current.loss);

  double step = 1.0;
  std::vector<double> trial(params.size());
  while (true) {
    report.grad_max_norm = max_abs(current.gradient);
    if (report.grad_max_norm <= options.tol) {
      report.converged = true;
      break;
    }
    if (report.iterations >= options.max_iter) break;

    double g2 = 0.0;
    for (double g : current.gradient) g2 += g * g;
    bool accepted = false;
    for (int halving = 0; halving < 60; ++halving) {
      for (std::size_t k = 0; k < params.size(); ++k) {
        trial[k] = params[k] - step * current.gradient[k];
      }
      auto next = logistic_objective(trial, z.rows, labels, options.l2);
      if (next.loss <= current.loss - 1e-4 * step * g2) {
        params = trial;
        current = std::move(next);
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    ++report.iterations;
    if (!accepted) break;  // no descent step at machine precision
    report.loss_history.push_back(current.loss);
    step = std::min(step * 2.0, 64.0);
  }

  model.intercept = params[0];
  model.weights.assign(params.begin() + 1, params.end());
  result.model = std::move(model);
  return result;
}

double predict_row(const LogisticModel& model, std::span<const double> raw_row) {
  if (raw_row.size() != model.weights.size()) {
    throw Error(ErrorCode::kInvalidData, "row width does not match the model");
  }
  double z = model.intercept;
  for (std::size_t j = 0; j < raw_row.size(); ++j) {
    const auto& s = model.standardization[j];
    z += model.weights[j] * (raw_row[j] - s.mean) / s.sd;
  }
  return sigmoid(z);
}

double predict(const LogisticModel& model, const cohort::PatientProfile& profile) {
  std::vector<double> row;
  row.reserve(model.feature_names.size());
  for (const auto& name : model.feature_names) {
    auto v = profile.value(name);
    if (!v) {
      throw Error(ErrorCode::kMissingFeature,
                  "profile " + profile.patient_id + " lacks feature '" + name + "'");
    }
    row.push_back(*v);
  }
  return predict_row(model, row);
}

metrics::PredictionSet score_cohort(const LogisticModel& model, const cohort::Cohort& cohort) {
  std::vector<metrics::PredictionRecord> records;
  records.reserve(cohort.profiles.size());
  for (std::size_t i = 0; i < cohort.profiles.size(); ++i) {
    records.push_back(
        {cohort.profiles[i].patient_id, predict(model, cohort.profiles[i]), cohort.labels[i]});
  }
  return metrics::PredictionSet(std::move(records));
}

metrics::PredictionSet import_scores(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw Error(ErrorCode::kEmptyInput, "prediction CSV is empty");
  ++line_no;
  std::string_view header = trim_cr(line);
  if (header.starts_with("\xEF\xBB\xBF")) header.remove_prefix(3);
  if (header != "patient_id,score,label") {
    throw Error(ErrorCode::kParseError,
                line_error(1, "expected header 'patient_id,score,label', got '" +
                                  std::string(header) + "'"));
  }

  std::vector<metrics::PredictionRecord> records;
  std::unordered_set<std::string> seen;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view row = trim_cr(line);
    if (row.empty()) continue;
    const auto c1 = row.find(',');
    const auto c2 = c1 == std::string_view::npos ? c1 : row.find(',', c1 + 1);
    if (c2 == std::string_view::npos || row.find(',', c2 + 1) != std::string_view::npos) {
      throw Error(ErrorCode::kParseError, line_error(line_no, "expected 3 fields"));
    }
    const std::string id(row.substr(0, c1));
    const std::string_view score_text = row.substr(c1 + 1, c2 - c1 - 1);
    const std::string_view label_text = row.substr(c2 + 1);
    if (id.empty()) throw Error(ErrorCode::kParseError, line_error(line_no, "empty patient_id"));

    double score = 0.0;
    {
      const char* end = score_text.data() + score_text.size();
      auto [ptr, ec] = std::from_chars(score_text.data(), end, score);
      if (ec != std::errc() || ptr != end || score_text.empty()) {
        throw Error(ErrorCode::kParseError,
                    line_error(line_no, "score '" + std::string(score_text) + "' is not a number"));
      }
    }
    if (!std::isfinite(score) || score < 0.0 || score > 1.0) {
      throw Error(ErrorCode::kRangeError,
                  line_error(line_no, "score " + std::string(score_text) + " outside [0, 1]"));
    }
    int label = -1;
    if (label_text == "0") {
      label = 0;
    } else if (label_text == "1") {
      label = 1;
    } else {
      throw Error(ErrorCode::kRangeError,
                  line_error(line_no, "label '" + std::string(label_text) + "' must be 0 or 1"));
    }
    if (!seen.insert(id).second) {
      throw Error(ErrorCode::kDuplicateId,
                  line_error(line_no, "duplicate patient_id '" + id + "'"));
    }
    records.push_back({id, score, label});
  }
  if (records.empty()) throw Error(ErrorCode::kEmptyInput, "prediction CSV has no rows");
  return metrics::PredictionSet(std::move(records));
}

metrics::PredictionSet import_scores_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kNotFound, "cannot open predictions file " + path);
  try {
    return import_scores(in);
  } catch (const Error& e) {
    throw Error(e.code(), path + ": " + e.what());
  }
}

void write_predictions_csv(std::ostream& out, const metrics::PredictionSet& preds) {
  out << "patient_id,score,label\n";
  for (const auto& r : preds.records()) {
    out << r.patient_id << ',' << format_double(r.score) << ',' << r.label << '\n';
  }
}

nlohmann::json model_to_json(const LogisticModel& model, const TrainingReport* report) {
  auto standardization = nlohmann::json::array();
  for (const auto& s : model.standardization) {
    standardization.push_back({{"mean", s.mean}, {"sd", s.sd}});
  }
  nlohmann::json doc = {{"feature_names", model.feature_names},
                        {"weights", model.weights},
                        {"intercept", model.intercept},
                        {"standardization", standardization},
                        {"feature_hash", model.feature_hash}};
  if (report) {
    doc["training"] = {{"iterations", report->iterations},
                       {"converged", report->converged},
                       {"grad_max_norm", report->grad_max_norm},
                       {"final_loss", report->loss_history.back()}};
  }
  return doc;
}

LogisticModel model_from_json(const nlohmann::json& doc) {
  LogisticModel m;
  try {
    m.feature_names = doc.at("feature_names").get<std::vector<std::string>>();
    m.weights = doc.at("weights").get<std::vector<double>>();
    m.intercept = doc.at("intercept").get<double>();
    for (const auto& s : doc.at("standardization")) {
      m.standardization.push_back({s.at("mean").get<double>(), s.at("sd").get<double>()});
    }
    m.feature_hash = doc.at("feature_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidData, std::string("malformed model document: ") + e.what());
  }
  if (m.weights.size() != m.feature_names.size() ||
      m.standardization.size() != m.feature_names.size()) {
    throw Error(ErrorCode::kInvalidData, "model weights, names and standardization differ in size");
  }
  for (const auto& s : m.standardization) {
    if (!(s.sd > 0.0)) throw Error(ErrorCode::kInvalidData, "standardization sd must be positive");
  }
  if (m.feature_hash != compute_feature_hash(m.feature_names, m.standardization)) {
    throw Error(ErrorCode::kCorruptEntity, "model feature hash does not match its standardization");
  }
  return m;
}

nlohmann::json card_to_json(const ModelCard& card) {
  return {{"description", card.description},
          {"decision_threshold", card.decision_threshold},
          {"training_summary", card.training_summary},
          {"metric_summary", card.metric_summary}};
}

ModelCard card_from_json(const nlohmann::json& doc) {
  ModelCard card;
  try {
    card.description = doc.at("description").get<std::string>();
    card.decision_threshold = doc.at("decision_threshold").get<double>();
    card.training_summary = doc.value("training_summary", std::string());
    card.metric_summary =
        doc.value("metric_summary", nlohmann::json::object()).get<std::map<std::string, double>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidData, std::string("malformed model card: ") + e.what());
  }
  if (!(card.decision_threshold >= 0.0 && card.decision_threshold <= 1.0)) {
    throw Error(ErrorCode::kRangeError, "decision_threshold outside [0, 1]");
  }
  return card;
}

}  // namespace cap::scorer
