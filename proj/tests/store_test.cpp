#include "cap/store.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <future>

#include "cap/error.hpp"
#include "cap/hash.hpp"

namespace cap::store {
namespace {

namespace fs = std::filesystem;

class StoreTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() /
            ("cap_store_" + std::to_string(::getpid()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(root_);
  }
  void TearDown() override { fs::remove_all(root_); }

  static ErrorCode code_of(const std::function<void()>& f) {
    try {
      f();
    } catch (const Error& e) {
      return e.code();
    }
    ADD_FAILURE() << "no error raised";
    return ErrorCode::kInvalidData;
  }

  fs::path root_;
};

metrics::PredictionSet sample_preds() {
  return metrics::PredictionSet({{"A", 0.9, 1}, {"B", 0.8, 0}, {"C", 0.3, 1}, {"D", 0.2, 0}});
}

TEST_F(StoreTest, RoundTripsEveryEntity) {
  Store s(root_);
  const auto c = cohort::generate_cohort(cohort::default_specs(), cohort::default_label_model(), 30, 4);
  s.put_cohort("c1", c);
  EXPECT_EQ(s.get_cohort("c1"), c);

  const auto preds = sample_preds();
  s.put_predictions("p1", preds);
  EXPECT_EQ(s.get_predictions("p1"), preds);

  const auto m = cip::CostMatrix::home_care_example();
  s.put_matrix("home_care", m);
  EXPECT_EQ(s.get_matrix("home_care"), m);

  const scorer::ModelCard card{"LR", 0.25, "synthetic", {{"auroc", 0.8}}};
  s.put_card("card", card);
  EXPECT_EQ(s.get_card("card"), card);

  const auto trained = scorer::train_logistic(scorer::features_from_cohort(c), c.labels);
  s.put_model("lr", trained.model, &trained.report);
  EXPECT_EQ(s.get_model("lr"), trained.model);

  const auto curve = cip::population_cip(preds, m, metrics::default_grid());
  s.put_curve("curve", curve);
  const auto back = s.get_curve("curve");
  EXPECT_EQ(back.grid, curve.grid);
  EXPECT_EQ(back.net, curve.net);
  EXPECT_EQ(back.components, curve.components);
}

TEST_F(StoreTest, UnknownIdIsNotFound) {
  Store s(root_);
  EXPECT_EQ(code_of([&] { s.get_cohort("nope"); }), ErrorCode::kNotFound);
  EXPECT_EQ(code_of([&] { s.get_run("nope"); }), ErrorCode::kNotFound);
  EXPECT_FALSE(s.exists(Kind::kMatrix, "../etc"));
  EXPECT_EQ(code_of([&] { s.put_raw(Kind::kMatrix, "../etc", "{}"); }), ErrorCode::kInvalidData);
}

TEST_F(StoreTest, TamperedByteIsCorruptNotMissing) {
  Store s(root_);
  s.put_matrix("m", cip::CostMatrix::home_care_example());
  const auto path = root_ / "cost-matrices" / "m.json";
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(10);
    f.put('#');
  }
  EXPECT_EQ(code_of([&] { s.get_matrix("m"); }), ErrorCode::kCorruptEntity);
  fs::remove(root_ / "cost-matrices" / "m.meta.json");
  EXPECT_EQ(code_of([&] { s.get_raw(Kind::kMatrix, "m"); }), ErrorCode::kCorruptEntity);
}

TEST_F(StoreTest, ListingFollowsCreationOrder) {
  Store s(root_);
  for (const char* id : {"zeta", "alpha", "mid"}) s.put_predictions(id, sample_preds());
  s.put_predictions("alpha", sample_preds());  // overwrite keeps position
  std::vector<std::string> ids;
  for (const auto& e : s.list(Kind::kPredictions)) ids.push_back(e.id);
  EXPECT_EQ(ids, (std::vector<std::string>{"zeta", "alpha", "mid"}));
  EXPECT_TRUE(s.list(Kind::kRun).empty());
}

TEST_F(StoreTest, FreshIdsAreUnique) {
  Store s(root_);
  std::set<std::string> ids;
  for (int i = 0; i < 20; ++i) ids.insert(s.new_id(Kind::kRun));
  EXPECT_EQ(ids.size(), 20u);
  // a second handle on the same root continues the sequence
  Store other(root_);
  EXPECT_FALSE(ids.count(other.new_id(Kind::kRun)));
}

TEST_F(StoreTest, ConcurrentWritersAndReaders) {
  Store s(root_);
  s.put_predictions("shared", sample_preds());
  std::vector<std::future<void>> tasks;
  for (int t = 0; t < 8; ++t) {
    tasks.push_back(std::async(std::launch::async, [&, t] {
      for (int i = 0; i < 25; ++i) {
        if (t % 2) {
          s.put_predictions("shared", sample_preds());
        } else {
          EXPECT_EQ(s.get_predictions("shared"), sample_preds());
        }
      }
    }));
  }
  for (auto& f : tasks) f.get();
}

TEST_F(StoreTest, RunRecordVerifiesInputs) {
  Store s(root_);
  const auto preds = sample_preds();
  const auto m = cip::CostMatrix::home_care_example();
  s.put_predictions("p", preds);
  s.put_matrix("m", m);
  RunRecord run;
  run.run_id = s.new_id(Kind::kRun);
  run.created_at = utc_now();
  run.patient_id = "A";
  run.input_ids = {{"predictions", "p"}, {"matrix", "m"}};
  run.input_hashes = {{"predictions", s.info(Kind::kPredictions, "p").sha256},
                      {"matrix", s.info(Kind::kMatrix, "m").sha256}};
  run.template_hash = agents::TemplateSet::defaults().hash();
  run.model_name = "mock";
  agents::AgentFailure f{agents::AgentId::kIII, ErrorCode::kAgentCallFailed, "boom"};
  run.failures.push_back(f);
  run.completion_order = {agents::AgentId::kIII};
  s.put_run(run);
  EXPECT_EQ(s.get_run(run.run_id), run);

  s.put_matrix("m", m.scaled(2.0));
  EXPECT_EQ(code_of([&] { s.get_run(run.run_id); }), ErrorCode::kCorruptEntity);
  EXPECT_EQ(s.get_run(run.run_id, false), run);
}

}  // namespace
}  // namespace cap::store
