#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cap/agents.hpp"
#include "cap/cip.hpp"
#include "cap/cohort.hpp"
#include "cap/metrics.hpp"
#include "cap/scorer.hpp"
#include "json.hpp"

namespace cap::store {

enum class Kind { kCohort, kPredictions, kMatrix, kCard, kModel, kCurve, kRun };
inline constexpr std::array<Kind, 7> kKinds{Kind::kCohort, Kind::kPredictions, Kind::kMatrix,
                                            Kind::kCard,   Kind::kModel,       Kind::kCurve,
                                            Kind::kRun};

// Directory name under the store root.
std::string_view directory(Kind kind);

struct EntityInfo {
  Kind kind = Kind::kCohort;
  std::string id;
  std::string sha256;      // of the stored document bytes
  std::string created_at;  // ISO-8601 UTC
  std::uint64_t seq = 0;   // store-wide creation counter

  bool operator==(const EntityInfo&) const = default;
};

struct RunRecord {
  std::string run_id;
  std::string created_at;
  std::string patient_id;
  std::map<std::string, std::string> input_ids;     // role -> entity id
  std::map<std::string, std::string> input_hashes;  // role -> sha256 at run time
  std::string template_hash;
  std::string model_name;
  nlohmann::json artifacts = nlohmann::json::object();
  std::vector<agents::AgentExchange> exchanges;  // completion order
  std::vector<agents::AgentFailure> failures;
  std::vector<agents::AgentId> completion_order;

  bool operator==(const RunRecord&) const = default;
};

nlohmann::json run_to_json(const RunRecord& run);
RunRecord run_from_json(const nlohmann::json& doc);

// <root>/<kind>/<id>.<json|csv> plus <id>.meta.json holding the sha256,
// creation time and sequence number. Writes go through a temp file and a
// rename under an exclusive per-entity flock; reads take a shared lock.
class Store {
 public:
  explicit Store(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }

  // Fresh id "<prefix>-<seq>", unique across the store.
  std::string new_id(Kind kind);

  // Overwriting keeps the original creation time and sequence number.
  EntityInfo put_raw(Kind kind, const std::string& id, const std::string& bytes);
  // Throws NotFound when absent, CorruptEntity when the bytes do not match.
  std::string get_raw(Kind kind, const std::string& id) const;
  EntityInfo info(Kind kind, const std::string& id) const;
  bool exists(Kind kind, const std::string& id) const;
  // Ordered by creation.
  std::vector<EntityInfo> list(Kind kind) const;

  EntityInfo put_cohort(const std::string& id, const cohort::Cohort& c);
  cohort::Cohort get_cohort(const std::string& id) const;
  EntityInfo put_predictions(const std::string& id, const metrics::PredictionSet& p);
  metrics::PredictionSet get_predictions(const std::string& id) const;
  EntityInfo put_matrix(const std::string& id, const cip::CostMatrix& m);
  cip::CostMatrix get_matrix(const std::string& id) const;
  EntityInfo put_card(const std::string& id, const scorer::ModelCard& card);
  scorer::ModelCard get_card(const std::string& id) const;
  EntityInfo put_model(const std::string& id, const scorer::LogisticModel& model,
                       const scorer::TrainingReport* report = nullptr);
  scorer::LogisticModel get_model(const std::string& id) const;
  EntityInfo put_curve(const std::string& id, const cip::CipCurve& curve);
  cip::CipCurve get_curve(const std::string& id) const;

  // run.run_id names the entity. Loading re-checks every input hash against the
  // store (CorruptEntity on drift) unless verify_inputs is false.
  EntityInfo put_run(const RunRecord& run);
  RunRecord get_run(const std::string& id, bool verify_inputs = true) const;

 private:
  std::filesystem::path data_path(Kind kind, const std::string& id) const;
  std::filesystem::path meta_path(Kind kind, const std::string& id) const;
  std::filesystem::path lock_path(Kind kind, const std::string& id) const;
  std::uint64_t next_seq();

  std::filesystem::path root_;
};

// Ids are 1-128 chars of [A-Za-z0-9._-], not starting with '.'.
bool valid_id(std::string_view id);

std::string utc_now();

}  // namespace cap::store
