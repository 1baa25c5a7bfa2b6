#pragma once

// JSON payloads shared by the service and the CLI, so both emit exactly what
// the library computes.

#include <span>

#include "cap/cip.hpp"
#include "cap/metrics.hpp"
#include "json.hpp"

namespace cap::report {

struct MetricsOptions {
  std::vector<double> grid = metrics::default_grid();
  metrics::BootstrapOptions bootstrap;
  std::size_t calibration_bins = 10;
  bool curves = true;  // include roc / pr / calibration / f1 sweep arrays
};

nlohmann::json bootstrap_to_json(const metrics::BootstrapEstimate& est);
metrics::BootstrapEstimate bootstrap_from_json(const nlohmann::json& doc);

// {n, positives, prevalence, auroc, auprc, brier, best_f1:{threshold,f1},
//  ci:{auroc,auprc,brier}, roc, pr, calibration, f1_sweep}
nlohmann::json metrics_report(const metrics::PredictionSet& preds, const MetricsOptions& opt = {});

nlohmann::json cip_to_json(const cip::CipCurve& curve);
cip::CipCurve cip_from_json(const nlohmann::json& doc);
nlohmann::json dca_to_json(const cip::DcaCurve& curve);
cip::DcaCurve dca_from_json(const nlohmann::json& doc);
nlohmann::json components_to_json(const cip::Components& c);

}  // namespace cap::report
