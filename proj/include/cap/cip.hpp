#pragma once

#include <array>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cap/metrics.hpp"
#include "json.hpp"

namespace cap::cip {

enum class CostType { kTreatment = 0, kError = 1 };
enum class Scenario { kTP = 0, kFP = 1, kTN = 2, kFN = 3 };
enum class Dimension { kQol = 0, kHealthcare = 1 };

std::string_view to_string(CostType type);
std::string_view to_string(Scenario scenario);
std::string_view to_string(Dimension dimension);

inline constexpr std::array<CostType, 2> kCostTypes{CostType::kTreatment, CostType::kError};
inline constexpr std::array<Scenario, 4> kScenarios{Scenario::kTP, Scenario::kFP,
                                                     Scenario::kTN, Scenario::kFN};
inline constexpr std::array<Dimension, 2> kDimensions{Dimension::kQol, Dimension::kHealthcare};

// Per-(type, scenario, dimension) cost coefficients in [-1, 1]. Negative
// values are benefits, positive values are costs.
class CostMatrix {
 public:
  double at(CostType type, Scenario scenario, Dimension dim) const {
    return cells_[index(type, scenario, dim)];
  }
  void set(CostType type, Scenario scenario, Dimension dim, double value) {
    cells_[index(type, scenario, dim)] = value;
  }

  CostMatrix scaled(double factor) const;

  // Home-care example: treating (TP, FP) improves QoL by 1.0 and saves 0.5 in
  // healthcare; a FP adds (0.5, 0.25) error cost and a FN adds (1.0, 1.0).
  static CostMatrix home_care_example();

  bool operator==(const CostMatrix&) const = default;

 private:
  static constexpr std::size_t index(CostType t, Scenario s, Dimension d) {
    return static_cast<std::size_t>(t) * 8 + static_cast<std::size_t>(s) * 2 +
           static_cast<std::size_t>(d);
  }
  std::array<double, 16> cells_{};
};

struct ValidatedMatrix {
  CostMatrix matrix;
  std::vector<std::string> warnings;
};

// Parses {"treatment": {"TP": {"qol": .., "healthcare": ..}, ...}, "error": {...}}.
// Throws IncompleteMatrix for a missing cell and RangeError for a value that
// is not a number in [-1, 1]; both name the offending path.
ValidatedMatrix validate_cost_matrix(const nlohmann::json& doc);
nlohmann::json to_document(const CostMatrix& matrix);

// Stacked components in rendering order.
enum Component : std::size_t {
  kTreatmentQol = 0,
  kTreatmentHealthcare = 1,
  kErrorQol = 2,
  kErrorHealthcare = 3,
};
inline constexpr std::size_t kComponentCount = 4;
using Components = std::array<double, kComponentCount>;

std::string_view component_name(std::size_t component);

struct CipCurve {
  std::vector<double> grid;
  std::vector<Components> components;
  std::vector<double> net;

  std::size_t size() const { return grid.size(); }
};

struct RiskBand {
  double center = 0.0;
  double delta = 0.0;
  CipCurve slice;
};

struct DcaCurve {
  std::vector<double> grid;
  std::vector<double> model_nb;
  std::vector<double> treat_all_nb;
  std::vector<double> treat_none_nb;
};

inline constexpr double kDefaultBandDelta = 0.05;

// Per-capita expected cost at each threshold: component(t) is the sum over
// scenarios of m[type, scenario, dim] * n_scenario(t) / N.
CipCurve population_cip(const metrics::PredictionSet& preds, const CostMatrix& m,
                        std::span<const double> grid);

// Net benefit TP/N - FP/N * p/(1-p) for the model, against treat-all and
// treat-none. Every grid value must lie in [0, 1).
DcaCurve dca_curve(const metrics::PredictionSet& preds, std::span<const double> grid);

double treat_all_net_benefit(double prevalence, double p_t);

// Grid points within [s - delta, s + delta] clamped to [0, 1]. The grid
// point nearest to s is always part of the band.
RiskBand risk_band(const CipCurve& curve, double s, double delta = kDefaultBandDelta);

// Cost for one patient with calibrated risk s, classified at threshold t,
// weighted over the two possible true outcomes.
Components patient_expected_cost(double s, double t, const CostMatrix& m);

void write_cip_csv(std::ostream& out, const CipCurve& curve);
void write_dca_csv(std::ostream& out, const DcaCurve& curve);

}  // namespace cap::cip
