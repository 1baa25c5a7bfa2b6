#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

namespace cap::cohort {

// Standard normal 0.75 quantile.
inline constexpr double kZ75 = 0.6744897501;

struct VariableSpec {
  enum class Kind { kContinuous, kBinary };

  std::string name;
  Kind kind = Kind::kContinuous;
  // Continuous variables: median and interquartile range.
  double median = 0.0;
  double q25 = 0.0;
  double q75 = 0.0;
  // Binary variables: probability of 1.
  double prevalence = 0.0;

  static VariableSpec continuous(std::string name, double median, double q25, double q75);
  static VariableSpec binary(std::string name, double prevalence);

  // Throws InvalidSpec.
  void validate() const;

  bool operator==(const VariableSpec&) const = default;
};

struct LogNormalFit {
  double mu = 0.0;
  double sigma = 0.0;

  double median() const;
  double q25() const;
  double q75() const;
};

// mu = ln(median), sigma = (ln q75 - ln q25) / (2 z_0.75). Requires
// 0 < q25 < median < q75, else InvalidSpec.
LogNormalFit fit_lognormal(double median, double q25, double q75);

struct PatientProfile {
  std::string patient_id;
  std::vector<std::pair<std::string, double>> variables;  // spec order
  std::uint64_t generated_seed = 0;

  std::optional<double> value(std::string_view name) const;

  bool operator==(const PatientProfile&) const = default;
};

// Log-odds of the outcome per standardized unit of each named variable.
struct LabelModel {
  double intercept = 0.0;
  std::map<std::string, double> weights;

  bool operator==(const LabelModel&) const = default;
};

struct Cohort {
  std::vector<VariableSpec> specs;
  LabelModel label_model;
  std::uint64_t seed = 0;
  std::vector<PatientProfile> profiles;
  std::vector<int> labels;  // parallel to profiles

  const PatientProfile* find(std::string_view patient_id) const;
  double prevalence() const;

  bool operator==(const Cohort&) const = default;
};

// Population-scale standardization used by the label model: log-space z for
// continuous variables, (x - p) / sqrt(p (1 - p)) for binary ones.
double standardize(const VariableSpec& spec, double value);

// Independent draws per variable; patient i uses its own RNG stream derived
// from (seed, i), so output is a pure function of the arguments.
Cohort generate_cohort(const std::vector<VariableSpec>& specs, const LabelModel& label_model,
                       std::size_t n, std::uint64_t seed);

// Heart-failure-like defaults: medians/IQRs and prevalences of the overall
// cohort baseline. This is a synthetic stand-in, not real patient data.
std::vector<VariableSpec> default_specs();
// Signs follow the deceased-vs-survived direction (older, higher NT-proBNP,
// lower albumin, higher CCI). Magnitudes are configuration.
LabelModel default_label_model();

nlohmann::json specs_to_json(const std::vector<VariableSpec>& specs);
std::vector<VariableSpec> specs_from_json(const nlohmann::json& doc);
nlohmann::json label_model_to_json(const LabelModel& model);
LabelModel label_model_from_json(const nlohmann::json& doc);
nlohmann::json profile_to_json(const PatientProfile& profile);
nlohmann::json cohort_to_json(const Cohort& cohort);
Cohort cohort_from_json(const nlohmann::json& doc);

// One column per variable plus the label.
void write_cohort_csv(std::ostream& out, const Cohort& cohort);

}  // namespace cap::cohort
