#include "cap/cip.hpp"

#include <cmath>
#include <limits>

#include "cap/error.hpp"
#include "cap/numfmt.hpp"

namespace cap::cip {
namespace {

constexpr double kGridEps = 1e-9;

struct ScenarioFractions {
  std::array<double, 4> by_scenario{};  // indexed by Scenario
};

ScenarioFractions fractions(const metrics::ConfusionCounts& c) {
  const double n = static_cast<double>(c.total());
  ScenarioFractions f;
  f.by_scenario[static_cast<std::size_t>(Scenario::kTP)] = static_cast<double>(c.tp) / n;
  f.by_scenario[static_cast<std::size_t>(Scenario::kFP)] = static_cast<double>(c.fp) / n;
  f.by_scenario[static_cast<std::size_t>(Scenario::kTN)] = static_cast<double>(c.tn) / n;
  f.by_scenario[static_cast<std::size_t>(Scenario::kFN)] = static_cast<double>(c.fn) / n;
  return f;
}

std::size_t component_index(CostType type, Dimension dim) {
  return static_cast<std::size_t>(type) * 2 + static_cast<std::size_t>(dim);
}

double sum_components(const Components& c) {
  return ((c[0] + c[1]) + c[2]) + c[3];
}

}  // namespace

std::string_view to_string(CostType type) {
  return type == CostType::kTreatment ? "treatment" : "error";
}

std::string_view to_string(Scenario scenario) {
  switch (scenario) {
    case Scenario::kTP: return "TP";
    case Scenario::kFP: return "FP";
    case Scenario::kTN: return "TN";
    case Scenario::kFN: return "FN";
  }
  return "";
}

std::string_view to_string(Dimension dimension) {
  return dimension == Dimension::kQol ? "qol" : "healthcare";
}

std::string_view component_name(std::size_t component) {
  static constexpr std::array<std::string_view, kComponentCount> kNames{
      "treatment_qol", "treatment_hc", "error_qol", "error_hc"};
  return kNames.at(component);
}

CostMatrix CostMatrix::scaled(double factor) const {
  CostMatrix out = *this;
  for (double& v : out.cells_) v *= factor;
  return out;
}

CostMatrix CostMatrix::home_care_example() {
  CostMatrix m;
  m.set(CostType::kTreatment, Scenario::kTP, Dimension::kQol, -1.0);
  m.set(CostType::kTreatment, Scenario::kTP, Dimension::kHealthcare, -0.5);
  m.set(CostType::kTreatment, Scenario::kFP, Dimension::kQol, -1.0);
  m.set(CostType::kTreatment, Scenario::kFP, Dimension::kHealthcare, -0.5);
  m.set(CostType::kError, Scenario::kFP, Dimension::kQol, 0.5);
  m.set(CostType::kError, Scenario::kFP, Dimension::kHealthcare, 0.25);
  m.set(CostType::kError, Scenario::kFN, Dimension::kQol, 1.0);
  m.set(CostType::kError, Scenario::kFN, Dimension::kHealthcare, 1.0);
  return m;
}

ValidatedMatrix validate_cost_matrix(const nlohmann::json& doc) {
  ValidatedMatrix out;
  if (!doc.is_object()) {
    throw Error(ErrorCode::kIncompleteMatrix, "cost matrix must be a JSON object");
  }
  for (CostType type : kCostTypes) {
    const std::string type_key(to_string(type));
    const auto type_it = doc.find(type_key);
    if (type_it == doc.end() || !type_it->is_object()) {
      throw Error(ErrorCode::kIncompleteMatrix, "missing cost type '" + type_key + "'", type_key);
    }
    for (Scenario scenario : kScenarios) {
      const std::string sc_key(to_string(scenario));
      const auto sc_it = type_it->find(sc_key);
      if (sc_it == type_it->end() || !sc_it->is_object()) {
        throw Error(ErrorCode::kIncompleteMatrix, "missing cell " + type_key + "." + sc_key,
                    type_key + "." + sc_key);
      }
      for (Dimension dim : kDimensions) {
        const std::string dim_key(to_string(dim));
        const std::string path = type_key + "." + sc_key + "." + dim_key;
        const auto cell = sc_it->find(dim_key);
        if (cell == sc_it->end() || cell->is_null()) {
          throw Error(ErrorCode::kIncompleteMatrix, "missing cell " + path, path);
        }
        if (!cell->is_number()) {
          throw Error(ErrorCode::kRangeError, path + " is not a number", path);
        }
        const double value = cell->get<double>();
        if (!std::isfinite(value) || value < -1.0 || value > 1.0) {
          throw Error(ErrorCode::kRangeError,
                      path + " = " + format_double(value) + " outside [-1, 1]", path);
        }
        out.matrix.set(type, scenario, dim, value);
        const bool correct = scenario == Scenario::kTP || scenario == Scenario::kTN;
        if (type == CostType::kError && correct && value != 0.0) {
          out.warnings.push_back(path + " is nonzero; correct predictions usually carry no error cost");
        }
      }
    }
  }
  return out;
}

nlohmann::json to_document(const CostMatrix& matrix) {
  nlohmann::json doc = nlohmann::json::object();
  for (CostType type : kCostTypes) {
    for (Scenario scenario : kScenarios) {
      for (Dimension dim : kDimensions) {
        doc[std::string(to_string(type))][std::string(to_string(scenario))]
           [std::string(to_string(dim))] = matrix.at(type, scenario, dim);
      }
    }
  }
  return doc;
}

CipCurve population_cip(const metrics::PredictionSet& preds, const CostMatrix& m,
                        std::span<const double> grid) {
  metrics::validate_grid(grid);
  CipCurve curve;
  curve.grid.assign(grid.begin(), grid.end());
  curve.components.reserve(grid.size());
  curve.net.reserve(grid.size());
  for (double t : grid) {
    const auto f = fractions(metrics::confusion_at(preds, t));
    Components c{};
    for (CostType type : kCostTypes) {
      for (Dimension dim : kDimensions) {
        double v = 0.0;
        for (Scenario s : kScenarios) {
          v += m.at(type, s, dim) * f.by_scenario[static_cast<std::size_t>(s)];
        }
        c[component_index(type, dim)] = v;
      }
    }
    curve.components.push_back(c);
    curve.net.push_back(sum_components(c));
  }
  return curve;
}

double treat_all_net_benefit(double prevalence, double p_t) {
  return prevalence - (1.0 - prevalence) * p_t / (1.0 - p_t);
}

DcaCurve dca_curve(const metrics::PredictionSet& preds, std::span<const double> grid) {
  metrics::validate_grid(grid);
  for (double p : grid) {
    if (p >= 1.0) {
      throw Error(ErrorCode::kInvalidConfig, "net benefit is undefined at p_t = 1");
    }
  }
  DcaCurve dca;
  dca.grid.assign(grid.begin(), grid.end());
  const double n = static_cast<double>(preds.size());
  const double prevalence = preds.prevalence();
  for (double p : grid) {
    const auto c = metrics::confusion_at(preds, p);
    const double odds = p / (1.0 - p);
    dca.model_nb.push_back(static_cast<double>(c.tp) / n - static_cast<double>(c.fp) / n * odds);
    dca.treat_all_nb.push_back(treat_all_net_benefit(prevalence, p));
    dca.treat_none_nb.push_back(0.0);
  }
  return dca;
}

RiskBand risk_band(const CipCurve& curve, double s, double delta) {
  if (!(s >= 0.0 && s <= 1.0)) throw Error(ErrorCode::kInvalidConfig, "risk score outside [0, 1]");
  if (!(delta > 0.0)) throw Error(ErrorCode::kInvalidConfig, "band delta must be positive");
  if (curve.grid.empty()) throw Error(ErrorCode::kEmptyInput, "curve has no grid points");

  const double lo = std::max(0.0, s - delta) - kGridEps;
  const double hi = std::min(1.0, s + delta) + kGridEps;
  std::size_t nearest = 0;
  double nearest_dist = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < curve.grid.size(); ++i) {
    const double d = std::abs(curve.grid[i] - s);
    if (d < nearest_dist) {
      nearest_dist = d;
      nearest = i;
    }
  }

  RiskBand band;
  band.center = s;
  band.delta = delta;
  for (std::size_t i = 0; i < curve.grid.size(); ++i) {
    const double t = curve.grid[i];
    if ((t >= lo && t <= hi) || i == nearest) {
      band.slice.grid.push_back(t);
      band.slice.components.push_back(curve.components[i]);
      band.slice.net.push_back(curve.net[i]);
    }
  }
  return band;
}

Components patient_expected_cost(double s, double t, const CostMatrix& m) {
  if (!(s >= 0.0 && s <= 1.0)) throw Error(ErrorCode::kInvalidConfig, "risk score outside [0, 1]");
  const bool positive = s >= t;
  const Scenario if_event = positive ? Scenario::kTP : Scenario::kFN;
  const Scenario if_no_event = positive ? Scenario::kFP : Scenario::kTN;
  Components out{};
  for (CostType type : kCostTypes) {
    for (Dimension dim : kDimensions) {
      out[component_index(type, dim)] =
          s * m.at(type, if_event, dim) + (1.0 - s) * m.at(type, if_no_event, dim);
    }
  }
  return out;
}

void write_cip_csv(std::ostream& out, const CipCurve& curve) {
  out << "threshold,treatment_qol,treatment_hc,error_qol,error_hc,net\n";
  for (std::size_t i = 0; i < curve.size(); ++i) {
    out << format_double(curve.grid[i]);
    for (double v : curve.components[i]) out << ',' << format_double(v);
    out << ',' << format_double(curve.net[i]) << '\n';
  }
}

void write_dca_csv(std::ostream& out, const DcaCurve& curve) {
  out << "p_t,model_nb,treat_all_nb,treat_none_nb\n";
  for (std::size_t i = 0; i < curve.grid.size(); ++i) {
    out << format_double(curve.grid[i]) << ',' << format_double(curve.model_nb[i]) << ','
        << format_double(curve.treat_all_nb[i]) << ',' << format_double(curve.treat_none_nb[i])
        << '\n';
  }
}

}  // namespace cap::cip
