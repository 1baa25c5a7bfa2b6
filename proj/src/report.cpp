#include "cap/report.hpp"

#include "cap/error.hpp"

namespace cap::report {
namespace {

using nlohmann::json;

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(); }

json points_to_json(const std::vector<metrics::CurvePoint>& pts) {
  json out = json::array();
  for (const auto& p : pts) out.push_back({{"x", p.x}, {"y", p.y}, {"threshold", p.threshold}});
  return out;
}

std::vector<double> numbers(const json& doc, const char* key) {
  return doc.at(key).get<std::vector<double>>();
}

}  // namespace

json bootstrap_to_json(const metrics::BootstrapEstimate& est) {
  return {{"point", est.point},
          {"ci_lo", est.ci_lo},
          {"ci_hi", est.ci_hi},
          {"n_resamples", est.n_resamples},
          {"seed", est.seed}};
}

metrics::BootstrapEstimate bootstrap_from_json(const json& doc) {
  metrics::BootstrapEstimate est;
  est.point = doc.at("point").get<double>();
  est.ci_lo = doc.at("ci_lo").get<double>();
  est.ci_hi = doc.at("ci_hi").get<double>();
  est.n_resamples = doc.at("n_resamples").get<std::size_t>();
  est.seed = doc.at("seed").get<std::uint64_t>();
  return est;
}

json metrics_report(const metrics::PredictionSet& preds, const MetricsOptions& opt) {
  metrics::validate_grid(opt.grid);
  const auto best = metrics::best_threshold(preds, opt.grid);
  const auto at_best = metrics::confusion_at(preds, best.threshold);
  json doc = {
      {"n", preds.size()},
      {"positives", preds.positives()},
      {"prevalence", preds.prevalence()},
      {"auroc", metrics::auroc(preds)},
      {"auprc", metrics::auprc(preds)},
      {"brier", metrics::brier(preds)},
      {"best_f1",
       {{"threshold", best.threshold},
        {"f1", best.f1},
        {"tp", at_best.tp},
        {"fp", at_best.fp},
        {"tn", at_best.tn},
        {"fn", at_best.fn}}},
  };
  json ci = json::object();
  for (const char* name : {"auroc", "auprc", "brier"}) {
    ci[name] = bootstrap_to_json(
        metrics::bootstrap(metrics::MetricSpec::parse(name), preds, opt.bootstrap));
  }
  doc["ci"] = ci;
  doc["ci_method"] = "percentile";
  if (opt.curves) {
    doc["roc"] = points_to_json(metrics::roc_curve(preds));
    doc["pr"] = points_to_json(metrics::pr_curve(preds));
    json cal = json::array();
    for (const auto& b : metrics::calibration(preds, opt.calibration_bins)) {
      cal.push_back({{"lo", b.lo},
                     {"hi", b.hi},
                     {"mean_score", optional_number(b.mean_score)},
                     {"observed_rate", optional_number(b.observed_rate)},
                     {"count", b.count}});
    }
    doc["calibration"] = cal;
    json sweep = json::array();
    for (const auto& p : metrics::f1_sweep(preds, opt.grid)) {
      sweep.push_back({{"threshold", p.threshold}, {"f1", p.f1}});
    }
    doc["f1_sweep"] = sweep;
  }
  return doc;
}

json components_to_json(const cip::Components& c) {
  json out = json::object();
  for (std::size_t k = 0; k < cip::kComponentCount; ++k) out[cip::component_name(k)] = c[k];
  return out;
}

json cip_to_json(const cip::CipCurve& curve) {
  json comps = json::object();
  for (std::size_t k = 0; k < cip::kComponentCount; ++k) {
    json col = json::array();
    for (const auto& c : curve.components) col.push_back(c[k]);
    comps[cip::component_name(k)] = col;
  }
  return {{"grid", curve.grid}, {"components", comps}, {"net", curve.net}};
}

cip::CipCurve cip_from_json(const json& doc) {
  cip::CipCurve curve;
  curve.grid = numbers(doc, "grid");
  curve.net = numbers(doc, "net");
  curve.components.resize(curve.grid.size());
  const auto& comps = doc.at("components");
  for (std::size_t k = 0; k < cip::kComponentCount; ++k) {
    const auto col = comps.at(std::string(cip::component_name(k))).get<std::vector<double>>();
    if (col.size() != curve.grid.size()) {
      throw Error(ErrorCode::kInvalidData, "component column length differs from grid");
    }
    for (std::size_t i = 0; i < col.size(); ++i) curve.components[i][k] = col[i];
  }
  if (curve.net.size() != curve.grid.size()) {
    throw Error(ErrorCode::kInvalidData, "net length differs from grid");
  }
  return curve;
}

json dca_to_json(const cip::DcaCurve& curve) {
  return {{"grid", curve.grid},
          {"model_nb", curve.model_nb},
          {"treat_all_nb", curve.treat_all_nb},
          {"treat_none_nb", curve.treat_none_nb}};
}

cip::DcaCurve dca_from_json(const json& doc) {
  return {numbers(doc, "grid"), numbers(doc, "model_nb"), numbers(doc, "treat_all_nb"),
          numbers(doc, "treat_none_nb")};
}

}  // namespace cap::report
