#include "cap/cohort.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <set>

#include "cap/error.hpp"
#include "cap/numfmt.hpp"

namespace cap::cohort {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string patient_id(std::size_t index, std::size_t n) {
  const int width = n > 99999 ? static_cast<int>(std::to_string(n).size()) : 5;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "P%0*zu", width, index + 1);
  return buf;
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

VariableSpec VariableSpec::continuous(std::string name, double median, double q25, double q75) {
  VariableSpec s;
  s.name = std::move(name);
  s.kind = Kind::kContinuous;
  s.median = median;
  s.q25 = q25;
  s.q75 = q75;
  return s;
}

VariableSpec VariableSpec::binary(std::string name, double prevalence) {
  VariableSpec s;
  s.name = std::move(name);
  s.kind = Kind::kBinary;
  s.prevalence = prevalence;
  return s;
}

void VariableSpec::validate() const {
  if (name.empty()) throw Error(ErrorCode::kInvalidSpec, "variable without a name");
  if (kind == Kind::kContinuous) {
    fit_lognormal(median, q25, q75);
  } else if (!(prevalence >= 0.0 && prevalence <= 1.0)) {
    throw Error(ErrorCode::kInvalidSpec, name + ": prevalence outside [0, 1]");
  }
}

double LogNormalFit::median() const { return std::exp(mu); }
double LogNormalFit::q25() const { return std::exp(mu - kZ75 * sigma); }
double LogNormalFit::q75() const { return std::exp(mu + kZ75 * sigma); }

LogNormalFit fit_lognormal(double median, double q25, double q75) {
  if (!(q25 > 0.0 && q25 < median && median < q75) || !std::isfinite(q75)) {
    throw Error(ErrorCode::kInvalidSpec,
                "log-normal fit needs 0 < q25 < median < q75, got (" + format_double(q25) + ", " +
                    format_double(median) + ", " + format_double(q75) + ")");
  }
  return {std::log(median), (std::log(q75) - std::log(q25)) / (2.0 * kZ75)};
}

std::optional<double> PatientProfile::value(std::string_view name) const {
  for (const auto& [key, v] : variables) {
    if (key == name) return v;
  }
  return std::nullopt;
}

const PatientProfile* Cohort::find(std::string_view id) const {
  for (const auto& p : profiles) {
    if (p.patient_id == id) return &p;
  }
  return nullptr;
}

double Cohort::prevalence() const {
  if (labels.empty()) return 0.0;
  std::size_t pos = 0;
  for (int l : labels) pos += static_cast<std::size_t>(l);
  return static_cast<double>(pos) / static_cast<double>(labels.size());
}

double standardize(const VariableSpec& spec, double value) {
  if (spec.kind == VariableSpec::Kind::kContinuous) {
    const auto fit = fit_lognormal(spec.median, spec.q25, spec.q75);
    return (std::log(value) - fit.mu) / fit.sigma;
  }
  const double p = spec.prevalence;
  if (p <= 0.0 || p >= 1.0) return 0.0;
  return (value - p) / std::sqrt(p * (1.0 - p));
}

Cohort generate_cohort(const std::vector<VariableSpec>& specs, const LabelModel& label_model,
                       std::size_t n, std::uint64_t seed) {
  if (n < 1) throw Error(ErrorCode::kInvalidSpec, "cohort size must be at least 1");
  if (specs.empty()) throw Error(ErrorCode::kInvalidSpec, "no variable specs");
  std::set<std::string> names;
  std::vector<LogNormalFit> fits(specs.size());
  for (std::size_t v = 0; v < specs.size(); ++v) {
    specs[v].validate();
    if (!names.insert(specs[v].name).second) {
      throw Error(ErrorCode::kInvalidSpec, "duplicate variable '" + specs[v].name + "'");
    }
    if (specs[v].kind == VariableSpec::Kind::kContinuous) {
      fits[v] = fit_lognormal(specs[v].median, specs[v].q25, specs[v].q75);
    }
  }
  for (const auto& [name, w] : label_model.weights) {
    if (!names.count(name)) {
      throw Error(ErrorCode::kInvalidSpec, "label model weight for unknown variable '" + name + "'");
    }
    if (!std::isfinite(w)) throw Error(ErrorCode::kInvalidSpec, "non-finite weight for " + name);
  }
  if (!std::isfinite(label_model.intercept)) {
    throw Error(ErrorCode::kInvalidSpec, "non-finite label model intercept");
  }

  Cohort cohort;
  cohort.specs = specs;
  cohort.label_model = label_model;
  cohort.seed = seed;
  cohort.profiles.reserve(n);
  cohort.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    PatientProfile profile;
    profile.patient_id = patient_id(i, n);
    profile.generated_seed = splitmix64(seed ^ splitmix64(i));
    std::mt19937_64 rng(profile.generated_seed);
    double eta = label_model.intercept;
    for (std::size_t v = 0; v < specs.size(); ++v) {
      const auto& spec = specs[v];
      double value = 0.0;
      if (spec.kind == VariableSpec::Kind::kContinuous) {
        std::normal_distribution<double> z(0.0, 1.0);
        value = std::exp(fits[v].mu + fits[v].sigma * z(rng));
      } else {
        std::bernoulli_distribution b(spec.prevalence);
        value = b(rng) ? 1.0 : 0.0;
      }
      if (auto w = label_model.weights.find(spec.name); w != label_model.weights.end()) {
        eta += w->second * standardize(spec, value);
      }
      profile.variables.emplace_back(spec.name, value);
    }
    std::uniform_real_distribution<double> u(0.0, 1.0);
    cohort.labels.push_back(u(rng) < logistic(eta) ? 1 : 0);
    cohort.profiles.push_back(std::move(profile));
  }
  return cohort;
}

std::vector<VariableSpec> default_specs() {
  using V = VariableSpec;
  return {
      V::continuous("age", 79, 71, 86),
      V::binary("female", 0.45),
      V::continuous("bmi", 26.5, 23.6, 30.4),
      V::continuous("in_hospital_days", 6.1, 3.1, 10.9),
      V::continuous("cci", 3, 2, 4),
      V::binary("atrial_fibrillation", 0.52),
      V::binary("hypertension", 0.70),
      V::binary("diabetes_type2", 0.25),
      V::binary("chronic_kidney_disease", 0.15),
      V::binary("copd", 0.14),
      V::binary("cancer", 0.21),
      V::binary("loop_diuretics", 0.36),
      V::binary("beta_blockers", 0.30),
      V::continuous("systolic_bp", 132, 120, 145),
      V::continuous("diastolic_bp", 74, 69, 80),
      V::continuous("pulse_rate", 78, 70, 88),
      V::continuous("respiratory_rate", 19, 17, 22),
      V::continuous("oxygen_saturation", 96, 94, 97),
      V::continuous("albumin", 33, 29, 36),
      V::continuous("creatinine", 88, 72, 107),
      V::continuous("hemoglobin", 124, 109, 138),
      V::continuous("nt_probnp", 4169, 1870, 8843),
      V::continuous("egfr", 57, 45, 70),
      V::continuous("crp", 19, 5, 61),
      V::continuous("sodium", 139, 137, 141),
      V::continuous("potassium", 4.0, 3.8, 4.3),
      V::binary("pressure_wounds", 0.12),
  };
}

LabelModel default_label_model() {
  LabelModel m;
  // Lands near 22% prevalence given the weights below.
  m.intercept = -1.48;
  m.weights = {{"age", 0.6}, {"nt_probnp", 0.5}, {"albumin", -0.4}, {"cci", 0.4}};
  return m;
}

nlohmann::json specs_to_json(const std::vector<VariableSpec>& specs) {
  auto doc = nlohmann::json::array();
  for (const auto& s : specs) {
    if (s.kind == VariableSpec::Kind::kContinuous) {
      doc.push_back({{"name", s.name}, {"kind", "continuous"}, {"median", s.median},
                     {"q25", s.q25}, {"q75", s.q75}});
    } else {
      doc.push_back({{"name", s.name}, {"kind", "binary"}, {"prevalence", s.prevalence}});
    }
  }
  return doc;
}

std::vector<VariableSpec> specs_from_json(const nlohmann::json& doc) {
  if (!doc.is_array()) throw Error(ErrorCode::kInvalidSpec, "variable specs must be a JSON list");
  std::vector<VariableSpec> specs;
  try {
    for (const auto& item : doc) {
      const auto kind = item.at("kind").get<std::string>();
      const auto name = item.at("name").get<std::string>();
      if (kind == "continuous") {
        specs.push_back(VariableSpec::continuous(name, item.at("median").get<double>(),
                                                 item.at("q25").get<double>(),
                                                 item.at("q75").get<double>()));
      } else if (kind == "binary") {
        specs.push_back(VariableSpec::binary(name, item.at("prevalence").get<double>()));
      } else {
        throw Error(ErrorCode::kInvalidSpec, name + ": unknown kind '" + kind + "'");
      }
      specs.back().validate();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidSpec, std::string("malformed variable spec: ") + e.what());
  }
  return specs;
}

nlohmann::json label_model_to_json(const LabelModel& model) {
  return {{"intercept", model.intercept}, {"weights", model.weights}};
}

LabelModel label_model_from_json(const nlohmann::json& doc) {
  try {
    LabelModel m;
    m.intercept = doc.at("intercept").get<double>();
    m.weights = doc.value("weights", nlohmann::json::object()).get<std::map<std::string, double>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidSpec, std::string("malformed label model: ") + e.what());
  }
}

nlohmann::json profile_to_json(const PatientProfile& profile) {
  nlohmann::json vars = nlohmann::json::object();
  for (const auto& [name, v] : profile.variables) vars[name] = v;
  return {{"patient_id", profile.patient_id},
          {"generated_seed", profile.generated_seed},
          {"variables", vars}};
}

nlohmann::json cohort_to_json(const Cohort& cohort) {
  auto patients = nlohmann::json::array();
  for (std::size_t i = 0; i < cohort.profiles.size(); ++i) {
    auto p = profile_to_json(cohort.profiles[i]);
    p["label"] = cohort.labels[i];
    patients.push_back(std::move(p));
  }
  return {{"seed", cohort.seed},
          {"n", cohort.profiles.size()},
          {"specs", specs_to_json(cohort.specs)},
          {"label_model", label_model_to_json(cohort.label_model)},
          {"patients", patients}};
}

Cohort cohort_from_json(const nlohmann::json& doc) {
  Cohort c;
  try {
    c.seed = doc.at("seed").get<std::uint64_t>();
    c.specs = specs_from_json(doc.at("specs"));
    c.label_model = label_model_from_json(doc.at("label_model"));
    for (const auto& p : doc.at("patients")) {
      PatientProfile profile;
      profile.patient_id = p.at("patient_id").get<std::string>();
      profile.generated_seed = p.at("generated_seed").get<std::uint64_t>();
      const auto& vars = p.at("variables");
      for (const auto& spec : c.specs) {
        if (!vars.contains(spec.name)) {
          throw Error(ErrorCode::kInvalidData,
                      profile.patient_id + " lacks variable '" + spec.name + "'");
        }
        profile.variables.emplace_back(spec.name, vars.at(spec.name).get<double>());
      }
      const int label = p.at("label").get<int>();
      if (label != 0 && label != 1) {
        throw Error(ErrorCode::kInvalidData, profile.patient_id + " has a label other than 0/1");
      }
      c.profiles.push_back(std::move(profile));
      c.labels.push_back(label);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidData, std::string("malformed cohort document: ") + e.what());
  }
  return c;
}

void write_cohort_csv(std::ostream& out, const Cohort& cohort) {
  out << "patient_id";
  for (const auto& s : cohort.specs) out << ',' << s.name;
  out << ",label\n";
  for (std::size_t i = 0; i < cohort.profiles.size(); ++i) {
    const auto& p = cohort.profiles[i];
    out << p.patient_id;
    for (const auto& [name, v] : p.variables) out << ',' << format_double(v);
    out << ',' << cohort.labels[i] << '\n';
  }
}

}  // namespace cap::cohort
