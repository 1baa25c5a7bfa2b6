// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
// Everything runs offline; the service check uses loopback only.

#include <fmt/format.h>

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cap/agents.hpp"
#include "cap/cip.hpp"
#include "cap/cohort.hpp"
#include "cap/error.hpp"
#include "cap/metrics.hpp"
#include "cap/report.hpp"
#include "cap/scorer.hpp"
#include "json.hpp"
#include "oracles.hpp"
#include "service_harness.hpp"

namespace {

using namespace cap;
using nlohmann::json;

// Collects the first few problems; a criterion passes when none were seen.
struct Check {
  std::vector<std::string> problems;
  std::string detail;

  void expect(bool ok, const std::string& what) {
    if (!ok && problems.size() < 5) problems.push_back(what);
  }
  void near(double got, double want, double tol, const std::string& what) {
    expect(std::abs(got - want) <= tol, fmt::format("{}: got {:.17g}, want {:.17g} (tol {:g})", what, got, want, tol));
  }
  void exact(double got, double want, const std::string& what) {
    expect(got == want, fmt::format("{}: got {:.17g}, want exactly {:.17g}", what, got, want));
  }
};

bool same_bits(double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); }

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!same_bits(a[i], b[i])) return false;
  }
  return true;
}

// --- criteria --------------------------------------------------------------

void metric_oracles(Check& c) {
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(20240601);
  std::uniform_int_distribution<std::size_t> size(2, 200);
  double worst_auc = 0, worst_trap = 0, worst_ap = 0;
  for (int k = 0; k < 200; ++k) {
    const auto preds = oracle::random_set(rng, size(rng), k % 2 == 0);
    const double auc = metrics::auroc(preds);
    const auto roc = metrics::roc_curve(preds);
    worst_auc = std::max(worst_auc, std::abs(auc - oracle::concordance(preds)));
    worst_trap = std::max(worst_trap, std::abs(metrics::trapezoid_area(roc) - auc));
    worst_ap = std::max(worst_ap, std::abs(metrics::auprc(preds) - oracle::average_precision(preds)));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  c.expect(worst_auc <= 1e-12, fmt::format("auroc vs concordance off by {:g}", worst_auc));
  c.expect(worst_trap <= 1e-9, fmt::format("trapezoid(roc) vs auroc off by {:g}", worst_trap));
  c.expect(worst_ap <= 1e-12, fmt::format("auprc vs average precision off by {:g}", worst_ap));
  c.expect(secs < 10.0, fmt::format("took {:.2f}s", secs));
  c.detail = fmt::format("200 sets, max errs {:.1e}/{:.1e}/{:.1e}, {:.2f}s", worst_auc, worst_trap, worst_ap, secs);
}

void hand_fixtures(Check& c) {
  const auto preds = scorer::import_scores_file("fixtures/four_records.csv");
  c.exact(metrics::auroc(preds), 0.75, "auroc");
  c.exact(metrics::auprc(preds), 5.0 / 6.0, "auprc");
  // Exact Brier of the parsed doubles is 0.295 + ~2.2e-17, which rounds to
  // 0.29500000000000004 rather than to the literal 0.295. Kept strict.
  c.exact(metrics::brier(preds), 0.295, "brier");
  c.exact(metrics::f1_score(metrics::confusion_at(preds, 0.5)), 0.5, "f1@0.5");
  c.detail = "4-record fixture, exact double equality";
}

void cip_closed_forms(Check& c) {
  const auto m = cip::CostMatrix::home_care_example();
  const auto grid = metrics::default_grid();
  // two different prediction sets, both with prevalence 0.22
  std::vector<metrics::PredictionSet> sets{oracle::with_prevalence(100, 22)};
  {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<metrics::PredictionRecord> r;
    for (int i = 0; i < 50; ++i) r.push_back({"x" + std::to_string(i), u(rng), i < 11 ? 1 : 0});
    sets.emplace_back(std::move(r));
  }
  const cip::Components at0{-1.0, -0.5, 0.39, 0.195};
  for (std::size_t s = 0; s < sets.size(); ++s) {
    const auto curve = cip::population_cip(sets[s], m, grid);
    for (std::size_t k = 0; k < 4; ++k) {
      c.near(curve.components.front()[k], at0[k], 1e-12, fmt::format("set {} t=0 component {}", s, k));
    }
    c.near(curve.net.front(), -0.915, 1e-12, fmt::format("set {} net(0)", s));
    c.near(curve.net.back(), 0.44, 1e-12, fmt::format("set {} net(1)", s));
  }
  const auto zero = cip::population_cip(sets[0], cip::CostMatrix{}, grid);
  for (std::size_t i = 0; i < zero.size(); ++i) {
    c.expect(zero.net[i] == 0.0, fmt::format("zero matrix net at {}", zero.grid[i]));
    for (double v : zero.components[i]) c.expect(v == 0.0, fmt::format("zero matrix component at {}", zero.grid[i]));
  }
  c.detail = "prevalence-0.22 sets of n=100 and n=50, plus all-zero matrix";
}

std::size_t argmin(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::min_element(v.begin(), v.end()) - v.begin());
}

void cip_invariants(Check& c) {
  const auto grid = metrics::default_grid();
  std::mt19937_64 rng(99);
  const auto preds = oracle::random_set(rng, 180, true);
  const auto m = cip::CostMatrix::home_care_example();
  const auto curve = cip::population_cip(preds, m, grid);
  c.expect(curve.size() == 101, "grid has 101 points");
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const auto& k = curve.components[i];
    c.exact(curve.net[i], ((k[0] + k[1]) + k[2]) + k[3], fmt::format("net = sum at {}", grid[i]));
  }
  for (double lambda : {0.5, 2.0, 3.7}) {
    const auto scaled = cip::population_cip(preds, m.scaled(lambda), grid);
    for (std::size_t i = 0; i < curve.size(); ++i) {
      c.near(scaled.net[i], lambda * curve.net[i], 1e-12, fmt::format("lambda {} net at {}", lambda, grid[i]));
      for (std::size_t k = 0; k < 4; ++k) {
        c.near(scaled.components[i][k], lambda * curve.components[i][k], 1e-12,
               fmt::format("lambda {} component {} at {}", lambda, k, grid[i]));
      }
    }
    c.expect(argmin(scaled.net) == argmin(curve.net), fmt::format("lambda {} moves argmin", lambda));
  }

  cip::CostMatrix err;
  for (auto s : {cip::Scenario::kFP, cip::Scenario::kFN}) {
    err.set(cip::CostType::kError, s, cip::Dimension::kQol, 1.0);
    err.set(cip::CostType::kError, s, cip::Dimension::kHealthcare, 1.0);
  }
  const auto ec = cip::population_cip(preds, err, grid);
  std::vector<double> rate;
  for (double t : grid) {
    const auto n = oracle::count_at(preds, t);
    rate.push_back((n.fp + n.fn) / static_cast<double>(preds.size()));
  }
  const double r = oracle::pearson(ec.net, rate);
  c.near(r, 1.0, 1e-12, "error-only correlation with misclassification rate");
  c.detail = fmt::format("101 points, lambda in {{0.5,2,3.7}}, error-only r = {:.15f}", r);
}

void dca_closed_forms(Check& c) {
  c.near(cip::treat_all_net_benefit(0.22, 0.25), -0.04, 1e-12, "treat_all(0.22, 0.25)");
  std::vector<metrics::PredictionRecord> r;
  for (int i = 0; i < 50; ++i) r.push_back({"n" + std::to_string(i), 0.1, 0});
  for (int i = 0; i < 50; ++i) r.push_back({"p" + std::to_string(i), 0.9, 1});
  const metrics::PredictionSet perfect(std::move(r));
  const std::vector<double> grid{0.5};
  const auto curve = cip::dca_curve(perfect, grid);
  c.near(curve.model_nb.at(0), 0.5, 1e-12, "perfect model_nb at 0.5");
  c.detail = fmt::format("treat_all = {:.17g}, perfect model_nb = {:.17g}",
                         cip::treat_all_net_benefit(0.22, 0.25), curve.model_nb.at(0));
}

void bootstrap_determinism(Check& c) {
  std::mt19937_64 rng(5);
  const auto preds = oracle::random_set(rng, 120, true);
  metrics::BootstrapOptions opt;
  opt.n_resamples = 500;
  opt.seed = 42;
  for (const char* name : {"auroc", "auprc", "brier", "f1@0.4"}) {
    const auto spec = metrics::MetricSpec::parse(name);
    const auto a = metrics::bootstrap(spec, preds, opt);
    const auto b = metrics::bootstrap(spec, preds, opt);
    auto threaded = opt;
    threaded.threads = 4;
    const auto t = metrics::bootstrap(spec, preds, threaded);
    for (const auto& other : {b, t}) {
      c.expect(same_bits(a.point, other.point) && same_bits(a.ci_lo, other.ci_lo) &&
                   same_bits(a.ci_hi, other.ci_hi) && a.n_resamples == other.n_resamples &&
                   a.seed == other.seed,
               fmt::format("{} differs between runs", name));
    }
  }
  // separable set: every resample has AUROC 1
  std::vector<metrics::PredictionRecord> r;
  for (int i = 0; i < 30; ++i) r.push_back({"a" + std::to_string(i), 0.2, 0});
  for (int i = 0; i < 30; ++i) r.push_back({"b" + std::to_string(i), 0.8, 1});
  const auto d = metrics::bootstrap(metrics::MetricSpec::parse("auroc"), metrics::PredictionSet(std::move(r)), opt);
  c.expect(d.ci_lo == d.point && d.point == d.ci_hi,
           fmt::format("degenerate CI: {} <= {} <= {}", d.ci_lo, d.point, d.ci_hi));
  c.detail = "4 metrics x (repeat, 4 threads) bit-identical; separable AUROC CI degenerate";
}

void logistic_trainer(Check& c) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<double>> rows(60, std::vector<double>(4));
  std::vector<int> labels;
  for (auto& row : rows) {
    for (auto& v : row) v = z(rng);
    labels.push_back(u(rng) < 0.4 ? 1 : 0);
  }
  double worst = 0.0;
  for (int p = 0; p < 20; ++p) {
    std::vector<double> params(5);
    for (auto& v : params) v = z(rng);
    const auto obj = scorer::logistic_objective(params, rows, labels, 0.1);
    for (std::size_t j = 0; j < params.size(); ++j) {
      const double h = 1e-6;
      auto up = params, down = params;
      up[j] += h;
      down[j] -= h;
      const double fd = (scorer::logistic_objective(up, rows, labels, 0.1).loss -
                         scorer::logistic_objective(down, rows, labels, 0.1).loss) /
                        (2 * h);
      worst = std::max(worst, std::abs(fd - obj.gradient[j]));
    }
  }
  c.expect(worst <= 1e-5, fmt::format("gradient vs finite differences off by {:g}", worst));

  const auto label_model = cohort::default_label_model();
  c.expect(!label_model.weights.empty(), "default label model has weights");
  const auto cohort = cohort::generate_cohort(cohort::default_specs(), label_model, 5000, 7);
  const auto trained = scorer::train_logistic(scorer::features_from_cohort(cohort), cohort.labels);
  const auto& hist = trained.report.loss_history;
  bool monotone = true;
  for (std::size_t i = 1; i < hist.size(); ++i) monotone = monotone && hist[i] <= hist[i - 1];
  c.expect(monotone, "loss increased between accepted iterates");
  const double auc = metrics::auroc(scorer::score_cohort(trained.model, cohort));
  c.expect(auc > 0.6, fmt::format("AUROC {:.4f} <= 0.6", auc));
  c.detail = fmt::format("grad err {:.1e}, {} iterates, AUROC {:.4f} at n=5000", worst, hist.size(), auc);
}

void cohort_generator(Check& c) {
  const auto specs = cohort::default_specs();
  std::string detail;

  // intercept-only models: implied prevalence is the logistic of the intercept
  for (double target : {0.1, 0.22, 0.5}) {
    cohort::LabelModel lm;
    lm.intercept = std::log(target / (1 - target));
    const auto g = cohort::generate_cohort(specs, lm, 5000, 17);
    c.expect(std::abs(g.prevalence() - target) <= 0.05,
             fmt::format("intercept-only prevalence {:.4f} vs {}", g.prevalence(), target));
  }
  // weighted model: implied prevalence is the mean of per-patient probabilities
  const auto lm = cohort::default_label_model();
  const auto g = cohort::generate_cohort(specs, lm, 5000, 18);
  double implied = 0.0;
  for (const auto& p : g.profiles) {
    double eta = lm.intercept;
    for (const auto& spec : specs) {
      if (auto w = lm.weights.find(spec.name); w != lm.weights.end()) {
        eta += w->second * cohort::standardize(spec, *p.value(spec.name));
      }
    }
    implied += 1.0 / (1.0 + std::exp(-eta));
  }
  implied /= static_cast<double>(g.profiles.size());
  c.expect(std::abs(g.prevalence() - implied) <= 0.05,
           fmt::format("weighted prevalence {:.4f} vs implied {:.4f}", g.prevalence(), implied));
  detail += fmt::format("prevalence {:.4f} vs implied {:.4f}", g.prevalence(), implied);

  const auto big = cohort::generate_cohort(specs, lm, 10000, 19);
  double worst = 0.0;
  for (std::size_t v = 0; v < specs.size(); ++v) {
    if (specs[v].kind != cohort::VariableSpec::Kind::kContinuous) continue;
    std::vector<double> xs;
    for (const auto& p : big.profiles) xs.push_back(p.variables[v].second);
    std::sort(xs.begin(), xs.end());
    const double med = 0.5 * (xs[xs.size() / 2 - 1] + xs[xs.size() / 2]);
    const double rel = std::abs(med - specs[v].median) / std::abs(specs[v].median);
    worst = std::max(worst, rel);
    c.expect(rel <= 0.05, fmt::format("{} median {:.4g} vs {:.4g}", specs[v].name, med, specs[v].median));
  }
  detail += fmt::format(", worst median rel err {:.2f}%", 100 * worst);

  const auto a = cohort::generate_cohort(specs, lm, 2000, 23);
  const auto b = cohort::generate_cohort(specs, lm, 2000, 23);
  bool bits = a.labels == b.labels && a.profiles.size() == b.profiles.size();
  for (std::size_t i = 0; bits && i < a.profiles.size(); ++i) {
    const auto& pa = a.profiles[i].variables;
    const auto& pb = b.profiles[i].variables;
    bits = pa.size() == pb.size() && a.profiles[i].patient_id == b.profiles[i].patient_id;
    for (std::size_t k = 0; bits && k < pa.size(); ++k) bits = same_bits(pa[k].second, pb[k].second);
  }
  c.expect(bits, "same seed produced different cohorts");
  c.expect(cohort::generate_cohort(specs, lm, 2000, 24).labels != a.labels, "different seed gave identical labels");
  c.detail = detail + ", seed repeat bit-exact";
}

void agent_matrix(Check& c) {
  using agents::AgentId;
  using B = agents::BlockKind;
  // rows in table order; columns I, II, III, IV
  const std::vector<std::pair<B, std::array<int, 4>>> table{
      {B::kPatientProfile, {1, 1, 1, 1}},      {B::kClassifierDescription, {1, 0, 0, 0}},
      {B::kDecisionThreshold, {1, 0, 0, 0}},   {B::kPerformanceNearR, {1, 0, 0, 0}},
      {B::kRiskScore, {1, 1, 0, 0}},           {B::kPerformanceNearS, {1, 0, 0, 0}},
      {B::kCipCostDescription, {0, 1, 0, 0}},  {B::kCipCostCoefficients, {0, 1, 0, 0}},
      {B::kCipCompositionNearS, {0, 1, 0, 0}}, {B::kResponseI, {0, 1, 1, 0}},
      {B::kResponseII, {0, 0, 0, 1}},
  };
  const std::array<AgentId, 4> ids{AgentId::kI, AgentId::kII, AgentId::kIII, AgentId::kIV};

  const auto co = cohort::generate_cohort(cohort::default_specs(), cohort::default_label_model(), 300, 3);
  const auto trained = scorer::train_logistic(scorer::features_from_cohort(co), co.labels);
  const auto preds = scorer::score_cohort(trained.model, co);
  const auto matrix = cip::CostMatrix::home_care_example();
  const auto curve = cip::population_cip(preds, matrix, metrics::default_grid());
  const scorer::ModelCard card{"Logistic regression.", 0.3, "synthetic", {}};
  const agents::AgentInputs in{co.profiles.at(4), card, preds, curve, matrix};

  const std::map<AgentId, std::string> prior{{AgentId::kI, "r1"}, {AgentId::kII, "r2"}};
  for (std::size_t col = 0; col < 4; ++col) {
    std::vector<B> expected;
    for (const auto& [kind, row] : table) {
      if (row[col]) expected.push_back(kind);
    }
    c.expect(agents::build_context(ids[col], in, prior).kinds() == expected,
             fmt::format("agent {} block set", agents::to_string(ids[col])));
  }

  int ordered = 0;
  for (int run = 0; run < 100; ++run) {
    agents::MockChatClient client;
    const auto result = agents::run_pipeline(in, client);
    std::map<AgentId, agents::MockChatClient::Call> calls;
    for (const auto& call : client.calls()) calls[call.agent] = call;
    if (result.ok() && calls.size() == 4 && calls[AgentId::kI].finished < calls[AgentId::kII].started &&
        calls[AgentId::kI].finished < calls[AgentId::kIII].started &&
        calls[AgentId::kII].finished < calls[AgentId::kIV].started) {
      ++ordered;
    }
  }
  c.expect(ordered == 100, fmt::format("dependency order held in {}/100 runs", ordered));

  const std::vector<std::pair<AgentId, std::map<AgentId, std::string>>> missing{
      {AgentId::kII, {}}, {AgentId::kIII, {{AgentId::kII, "x"}}}, {AgentId::kIV, {{AgentId::kI, "x"}}}};
  for (const auto& [agent, given] : missing) {
    bool raised = false;
    try {
      agents::build_context(agent, in, given);
    } catch (const Error& e) {
      raised = e.code() == ErrorCode::kDependencyUnmet;
    }
    c.expect(raised, fmt::format("agent {} without prerequisite", agents::to_string(agent)));
  }
  agents::MockChatClient failing({AgentId::kII});
  const auto partial = agents::run_pipeline(in, failing);
  c.expect(partial.failures.count(AgentId::kIV) &&
               partial.failures.at(AgentId::kIV).code == ErrorCode::kDependencyUnmet,
           "IV not marked DependencyUnmet after II failed");
  c.detail = fmt::format("4 columns match, order held {}/100, mock client only", ordered);
}

void service_parity(Check& c) {
  testing::LiveService live;
  auto client = live.client();
  const auto p22 = scorer::import_scores_file("fixtures/prevalence22.csv");
  std::mt19937_64 rng(17);
  const auto mixed = oracle::random_set(rng, 150, true);
  live.svc().store().put_predictions("p22", p22);
  live.svc().store().put_predictions("mixed", mixed);
  std::ifstream mf("fixtures/home_care.json");
  std::stringstream mdoc;
  mdoc << mf.rdbuf();
  const auto put = client.Put("/cost-matrices/home_care", mdoc.str(), "application/json");
  c.expect(put && put->status == 201, "PUT cost matrix");
  const auto matrix = cip::validate_cost_matrix(json::parse(mdoc.str())).matrix;

  for (const auto& [id, preds] : {std::pair{"p22", &p22}, std::pair{"mixed", &mixed}}) {
    const auto r = client.Get(fmt::format("/cip?predictions={}&matrix=home_care", id));
    c.expect(r && r->status == 200, fmt::format("/cip {} status", id));
    if (!r || r->status != 200) continue;
    const auto back = report::cip_from_json(json::parse(r->body));
    const auto direct = cip::population_cip(*preds, matrix, metrics::default_grid());
    bool bits = same_bits(back.grid, direct.grid) && same_bits(back.net, direct.net) &&
                back.components.size() == direct.components.size();
    for (std::size_t i = 0; bits && i < direct.components.size(); ++i) {
      for (std::size_t k = 0; k < 4; ++k) bits = bits && same_bits(back.components[i][k], direct.components[i][k]);
    }
    c.expect(bits, fmt::format("/cip {} differs from library", id));
    auto want_cip = report::cip_to_json(direct);
    want_cip["predictions"] = id;
    want_cip["matrix"] = "home_care";
    c.expect(json::parse(r->body) == want_cip, fmt::format("/cip {} document", id));

    const auto m = client.Get(fmt::format("/predictions/{}/metrics?grid=0:1:0.05&n_boot=200&seed=4", id));
    c.expect(m && m->status == 200, fmt::format("/metrics {} status", id));
    if (!m || m->status != 200) continue;
    report::MetricsOptions opt;
    opt.grid = metrics::parse_grid("0:1:0.05");
    opt.bootstrap.n_resamples = 200;
    opt.bootstrap.seed = 4;
    auto want = report::metrics_report(*preds, opt);
    want["predictions"] = id;
    const auto got = json::parse(m->body);
    c.expect(got == want, fmt::format("/metrics {} document differs", id));
    c.expect(same_bits(got["auroc"].get<double>(), metrics::auroc(*preds)) &&
                 same_bits(got["auprc"].get<double>(), metrics::auprc(*preds)) &&
                 same_bits(got["brier"].get<double>(), metrics::brier(*preds)),
             fmt::format("/metrics {} scalars", id));
  }
  c.detail = "2 stored fixtures over loopback, /cip and /metrics bit-identical";
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Check&)>>> criteria{
      {"metric oracle suite", metric_oracles},
      {"hand-computed fixtures", hand_fixtures},
      {"CIP closed forms", cip_closed_forms},
      {"CIP invariants", cip_invariants},
      {"DCA closed forms", dca_closed_forms},
      {"bootstrap determinism", bootstrap_determinism},
      {"logistic trainer", logistic_trainer},
      {"cohort generator", cohort_generator},
      {"agent matrix conformance", agent_matrix},
      {"service parity", service_parity},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    Check c;
    try {
      fn(c);
    } catch (const std::exception& e) {
      c.problems.push_back(std::string("threw: ") + e.what());
    }
    if (c.problems.empty()) {
      fmt::print("PASS  {:<26} {}\n", name, c.detail);
    } else {
      ++failed;
      fmt::print("FAIL  {:<26} {}\n", name, c.problems.front());
      for (std::size_t i = 1; i < c.problems.size(); ++i) fmt::print("      {:<26} {}\n", "", c.problems[i]);
    }
  }
  fmt::print("{}/{} criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
