#include "cap/scorer.hpp"

#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "cap/error.hpp"

namespace cap::scorer {
namespace {

FeatureMatrix separable(std::vector<int>& labels) {
  FeatureMatrix fm;
  fm.names = {"x"};
  for (int i = 0; i < 50; ++i) {
    fm.rows.push_back({-1.0});
    labels.push_back(0);
    fm.rows.push_back({1.0});
    labels.push_back(1);
  }
  return fm;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::kInvalidData;
}

TEST(Train, SeparableDataOrdersScores) {
  std::vector<int> labels;
  const auto fm = separable(labels);
  const auto result = train_logistic(fm, labels, {.l2 = 0.1, .max_iter = 500, .tol = 1e-8});
  const double hi = predict_row(result.model, std::vector<double>{1.0});
  const double lo = predict_row(result.model, std::vector<double>{-1.0});
  EXPECT_GT(hi, 0.5);
  EXPECT_LT(lo, 0.5);
  EXPECT_TRUE(result.report.converged);
}

TEST(Train, LossNeverIncreases) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> z;
  FeatureMatrix fm;
  fm.names = {"a", "b", "c"};
  std::vector<int> labels;
  for (int i = 0; i < 300; ++i) {
    const double a = z(rng), b = 10 * z(rng) + 3, c = z(rng);
    fm.rows.push_back({a, b, c});
    labels.push_back(std::bernoulli_distribution(1 / (1 + std::exp(-(a - 0.1 * b))))(rng));
  }
  const auto r = train_logistic(fm, labels, {.l2 = 0.01, .max_iter = 200, .tol = 1e-10});
  ASSERT_GE(r.report.loss_history.size(), 2u);
  for (std::size_t i = 1; i < r.report.loss_history.size(); ++i) {
    EXPECT_LE(r.report.loss_history[i], r.report.loss_history[i - 1]);
  }
}

TEST(Train, RejectsDegenerateInput) {
  FeatureMatrix fm{{"x"}, {{1.0}, {2.0}}, std::nullopt};
  std::vector<int> same{1, 1};
  EXPECT_EQ(code_of([&] { train_logistic(fm, same); }), ErrorCode::kDegenerateLabels);
  FeatureMatrix bad{{"x"}, {{1.0}, {std::nan("")}}, std::nullopt};
  std::vector<int> mixed{0, 1};
  EXPECT_EQ(code_of([&] { train_logistic(bad, mixed); }), ErrorCode::kInvalidData);
}

TEST(Gradient, MatchesCentralDifferences) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> z;
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) {
    rows.push_back({z(rng), z(rng), z(rng)});
    labels.push_back(i % 3 == 0);
  }
  for (int point = 0; point < 20; ++point) {
    std::vector<double> params{z(rng), z(rng), z(rng), z(rng)};
    const auto obj = logistic_objective(params, rows, labels, 0.3);
    const double h = 1e-6;
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto plus = params;
      auto minus = params;
      plus[k] += h;
      minus[k] -= h;
      const double fd = (logistic_objective(plus, rows, labels, 0.3).loss -
                         logistic_objective(minus, rows, labels, 0.3).loss) /
                        (2 * h);
      EXPECT_NEAR(obj.gradient[k], fd, 1e-5);
    }
  }
}

TEST(Predict, ZeroModelGivesHalf) {
  LogisticModel m;
  m.feature_names = {"age"};
  m.weights = {0.0};
  m.standardization = {{70.0, 10.0}};
  cohort::PatientProfile p{"p", {{"age", 91.0}}, 0};
  EXPECT_EQ(predict(m, p), 0.5);
}

TEST(Predict, MonotoneInPositivelyWeightedFeature) {
  LogisticModel m;
  m.feature_names = {"age"};
  m.weights = {0.7};
  m.intercept = -1.0;
  m.standardization = {{70.0, 10.0}};
  double prev = 0.0;
  for (double age = 40; age <= 100; age += 5) {
    const double s = predict(m, {"p", {{"age", age}}, 0});
    EXPECT_GT(s, prev);
    EXPECT_LT(s, 1.0);
    prev = s;
  }
}

TEST(Predict, MissingFeatureIsNamed) {
  LogisticModel m;
  m.feature_names = {"albumin"};
  m.weights = {1.0};
  m.standardization = {{0.0, 1.0}};
  try {
    predict(m, {"p", {{"age", 80.0}}, 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingFeature);
    EXPECT_NE(std::string(e.what()).find("albumin"), std::string::npos);
  }
}

TEST(Standardize, SecondApplicationIsRejected) {
  std::vector<int> labels;
  const auto fm = separable(labels);
  const auto model = train_logistic(fm, labels).model;
  const auto once = standardize(model, fm);
  EXPECT_EQ(once.standardized_with, model.feature_hash);
  EXPECT_EQ(code_of([&] { standardize(model, once); }), ErrorCode::kInvalidData);
  EXPECT_EQ(code_of([&] { train_logistic(once, labels); }), ErrorCode::kInvalidData);
}

TEST(EndToEnd, TrainedModelBeatsChanceOnCohort) {
  const auto c = cohort::generate_cohort(cohort::default_specs(), cohort::default_label_model(),
                                         2000, 11);
  const auto fm = features_from_cohort(c);
  const auto result = train_logistic(fm, c.labels);
  const auto preds = score_cohort(result.model, c);
  EXPECT_GT(metrics::auroc(preds), 0.5);
}

TEST(ModelJson, RoundTripAndHashCheck) {
  std::vector<int> labels;
  const auto fm = separable(labels);
  const auto r = train_logistic(fm, labels);
  const auto doc = model_to_json(r.model, &r.report);
  EXPECT_EQ(model_from_json(nlohmann::json::parse(doc.dump())), r.model);
  auto tampered = doc;
  tampered["standardization"][0]["mean"] = 42.0;
  EXPECT_EQ(code_of([&] { model_from_json(tampered); }), ErrorCode::kCorruptEntity);
}

TEST(ModelCard, RoundTripAndRange) {
  ModelCard card{"LR baseline", 0.25, "trained", {{"auroc", 0.7}}};
  EXPECT_EQ(card_from_json(card_to_json(card)), card);
  auto bad = card_to_json(card);
  bad["decision_threshold"] = 1.5;
  EXPECT_EQ(code_of([&] { card_from_json(bad); }), ErrorCode::kRangeError);
}

TEST(ImportScores, WellFormedFile) {
  std::istringstream in("patient_id,score,label\nA,0.9,1\nB,0.8,0\nC,0.3,1\r\nD,0.2,0\n");
  const auto preds = import_scores(in);
  EXPECT_EQ(preds.size(), 4u);
  EXPECT_EQ(preds.records()[2], (metrics::PredictionRecord{"C", 0.3, 1}));
}

TEST(ImportScores, ErrorsNameTheLine) {
  std::istringstream range("patient_id,score,label\nA,0.9,1\nB,1.2,0\n");
  try {
    import_scores(range);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kRangeError);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
  std::istringstream dup("patient_id,score,label\nA,0.9,1\nA,0.2,0\n");
  EXPECT_EQ(code_of([&] { import_scores(dup); }), ErrorCode::kDuplicateId);
  std::istringstream header("id,score,label\nA,0.9,1\n");
  EXPECT_EQ(code_of([&] { import_scores(header); }), ErrorCode::kParseError);
  std::istringstream label("patient_id,score,label\nA,0.9,yes\n");
  EXPECT_EQ(code_of([&] { import_scores(label); }), ErrorCode::kRangeError);
  std::istringstream junk("patient_id,score,label\nA,abc,1\n");
  EXPECT_EQ(code_of([&] { import_scores(junk); }), ErrorCode::kParseError);
  std::istringstream empty("patient_id,score,label\n");
  EXPECT_EQ(code_of([&] { import_scores(empty); }), ErrorCode::kEmptyInput);
}

TEST(ImportScores, WriteThenReadIsIdentity) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u;
  std::vector<metrics::PredictionRecord> recs;
  for (int i = 0; i < 100; ++i) recs.push_back({"id" + std::to_string(i), u(rng), i % 2});
  const metrics::PredictionSet preds(recs);
  std::stringstream buf;
  write_predictions_csv(buf, preds);
  EXPECT_EQ(import_scores(buf), preds);
}

}  // namespace
}  // namespace cap::scorer
