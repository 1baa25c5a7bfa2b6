#pragma once

#include <cstddef>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cap/cohort.hpp"
#include "cap/metrics.hpp"
#include "json.hpp"

namespace cap::scorer {

// Row-major design matrix. `standardized_with` carries the feature hash of
// the model whose z-scoring has already been applied, so a second
// standardization can be refused.
struct FeatureMatrix {
  std::vector<std::string> names;
  std::vector<std::vector<double>> rows;
  std::optional<std::string> standardized_with;
};

// Uses every cohort variable when `names` is empty.
FeatureMatrix features_from_cohort(const cohort::Cohort& cohort,
                                   const std::vector<std::string>& names = {});

struct Standardization {
  double mean = 0.0;
  double sd = 1.0;

  bool operator==(const Standardization&) const = default;
};

struct LogisticModel {
  std::vector<std::string> feature_names;
  std::vector<double> weights;
  double intercept = 0.0;
  std::vector<Standardization> standardization;
  std::string feature_hash;

  bool operator==(const LogisticModel&) const = default;
};

// Digest of feature names and standardization parameters.
std::string compute_feature_hash(const std::vector<std::string>& names,
                                 const std::vector<Standardization>& standardization);

// Applies the model's z-scoring. Throws InvalidData if `raw` was already
// standardized.
FeatureMatrix standardize(const LogisticModel& model, const FeatureMatrix& raw);

struct TrainingOptions {
  double l2 = 1e-3;
  std::size_t max_iter = 1000;
  double tol = 1e-6;
};

struct TrainingReport {
  std::size_t iterations = 0;
  bool converged = false;  // false means max_iter was reached
  double grad_max_norm = 0.0;
  std::vector<double> loss_history;  // one entry per accepted iterate
};

struct TrainResult {
  LogisticModel model;
  TrainingReport report;
};

// Mean log-loss plus (l2 / 2) * |w|^2 and its gradient. params[0] is the
// intercept (not penalized), params[1..] the weights; rows are already
// standardized.
struct Objective {
  double loss = 0.0;
  std::vector<double> gradient;
};
Objective logistic_objective(std::span<const double> params,
                             const std::vector<std::vector<double>>& rows,
                             std::span<const int> labels, double l2);

// Gradient descent with Armijo backtracking; only descent steps are accepted.
TrainResult train_logistic(const FeatureMatrix& features, std::span<const int> labels,
                           const TrainingOptions& options = {});

// Throws MissingFeature naming the absent field.
double predict(const LogisticModel& model, const cohort::PatientProfile& profile);
double predict_row(const LogisticModel& model, std::span<const double> raw_row);

metrics::PredictionSet score_cohort(const LogisticModel& model, const cohort::Cohort& cohort);

struct ModelCard {
  std::string description;
  double decision_threshold = 0.5;
  std::string training_summary;
  std::map<std::string, double> metric_summary;

  bool operator==(const ModelCard&) const = default;
};

// Prediction CSV with header "patient_id,score,label". Errors name the
// offending line: ParseError, RangeError, DuplicateId, EmptyInput.
metrics::PredictionSet import_scores(std::istream& in);
metrics::PredictionSet import_scores_file(const std::string& path);
void write_predictions_csv(std::ostream& out, const metrics::PredictionSet& preds);

nlohmann::json model_to_json(const LogisticModel& model, const TrainingReport* report = nullptr);
// Verifies the stored feature hash; a mismatch is CorruptEntity.
LogisticModel model_from_json(const nlohmann::json& doc);
nlohmann::json card_to_json(const ModelCard& card);
ModelCard card_from_json(const nlohmann::json& doc);

}  // namespace cap::scorer
