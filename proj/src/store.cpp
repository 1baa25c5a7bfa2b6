#include "cap/store.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <ctime>
#include <fstream>
#include <sstream>
#include <thread>

#include <fmt/format.h>

#include "cap/error.hpp"
#include "cap/hash.hpp"
#include "cap/report.hpp"

namespace cap::store {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<std::string_view, 7> kDirs{"cohorts", "predictions", "cost-matrices",
                                                "cards",   "models",      "curves",
                                                "runs"};
constexpr std::array<std::string_view, 7> kPrefixes{"cohort", "preds", "matrix", "card",
                                                    "model",  "curve", "run"};

std::string_view extension(Kind kind) { return kind == Kind::kPredictions ? ".csv" : ".json"; }

std::string_view kind_label(Kind kind) { return kPrefixes[static_cast<std::size_t>(kind)]; }

// flock on a dedicated lock file; released when the object dies.
class FileLock {
 public:
  FileLock(const fs::path& path, int op) {
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) {
      throw Error(ErrorCode::kInvalidConfig, "cannot open lock file " + path.string());
    }
    while (::flock(fd_, op) != 0) {
      if (errno != EINTR) {
        ::close(fd_);
        throw Error(ErrorCode::kInvalidConfig, "cannot lock " + path.string());
      }
    }
  }
  ~FileLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;
  int fd() const { return fd_; }

 private:
  int fd_ = -1;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kNotFound, "cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_atomic(const fs::path& path, const std::string& bytes) {
  const auto tmp = path.string() +
                   fmt::format(".tmp.{}.{}", ::getpid(),
                               std::hash<std::thread::id>{}(std::this_thread::get_id()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << bytes;
    out.flush();
    if (!out) throw Error(ErrorCode::kInvalidConfig, "cannot write " + tmp);
  }
  fs::rename(tmp, path);
}

json parse_document(const std::string& bytes, Kind kind, const std::string& id) {
  auto doc = json::parse(bytes, nullptr, false);
  if (doc.is_discarded()) {
    throw Error(ErrorCode::kCorruptEntity,
                fmt::format("{} '{}' is not valid JSON", kind_label(kind), id));
  }
  return doc;
}

EntityInfo parse_meta(const std::string& bytes, Kind kind, const std::string& id) {
  const auto doc = json::parse(bytes, nullptr, false);
  EntityInfo info;
  info.kind = kind;
  info.id = id;
  try {
    info.sha256 = doc.at("sha256").get<std::string>();
    info.created_at = doc.at("created_at").get<std::string>();
    info.seq = doc.at("seq").get<std::uint64_t>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::kCorruptEntity,
                fmt::format("metadata for {} '{}' is unreadable", kind_label(kind), id));
  }
  return info;
}

// Which entity kind each run input role refers to.
std::optional<Kind> kind_for_role(const std::string& role) {
  if (role == "cohort") return Kind::kCohort;
  if (role == "predictions") return Kind::kPredictions;
  if (role == "matrix") return Kind::kMatrix;
  if (role == "card") return Kind::kCard;
  if (role == "model") return Kind::kModel;
  return std::nullopt;
}

}  // namespace

std::string_view directory(Kind kind) { return kDirs[static_cast<std::size_t>(kind)]; }

bool valid_id(std::string_view id) {
  if (id.empty() || id.size() > 128 || id.front() == '.') return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
           c == '.' || c == '_' || c == '-';
  });
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  ::gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  return fmt::format("{}.{:03d}Z", buf, ms);
}

Store::Store(fs::path root) : root_(std::move(root)) {
  std::error_code ec;
  for (auto kind : kKinds) fs::create_directories(root_ / directory(kind), ec);
  if (ec || !fs::is_directory(root_)) {
    throw Error(ErrorCode::kInvalidConfig, "store root not writable: " + root_.string());
  }
}

fs::path Store::data_path(Kind kind, const std::string& id) const {
  return root_ / directory(kind) / (id + std::string(extension(kind)));
}

fs::path Store::meta_path(Kind kind, const std::string& id) const {
  return root_ / directory(kind) / (id + ".meta.json");
}

fs::path Store::lock_path(Kind kind, const std::string& id) const {
  return root_ / directory(kind) / ("." + id + ".lock");
}

std::uint64_t Store::next_seq() {
  FileLock lock(root_ / ".seq", LOCK_EX);
  char buf[32] = {};
  const auto n = ::pread(lock.fd(), buf, sizeof buf - 1, 0);
  const std::uint64_t current = n > 0 ? std::strtoull(buf, nullptr, 10) : 0;
  const std::string next = std::to_string(current + 1);
  if (::ftruncate(lock.fd(), 0) != 0 ||
      ::pwrite(lock.fd(), next.data(), next.size(), 0) != static_cast<ssize_t>(next.size())) {
    throw Error(ErrorCode::kInvalidConfig, "cannot update store sequence");
  }
  return current + 1;
}

std::string Store::new_id(Kind kind) {
  return fmt::format("{}-{:06d}", kind_label(kind), next_seq());
}

EntityInfo Store::put_raw(Kind kind, const std::string& id, const std::string& bytes) {
  if (!valid_id(id)) {
    throw Error(ErrorCode::kInvalidData, fmt::format("invalid {} id '{}'", kind_label(kind), id));
  }
  FileLock lock(lock_path(kind, id), LOCK_EX);
  EntityInfo info;
  info.kind = kind;
  info.id = id;
  std::error_code ec;
  if (fs::exists(meta_path(kind, id), ec)) {
    try {
      const auto old = parse_meta(read_file(meta_path(kind, id)), kind, id);
      info.created_at = old.created_at;
      info.seq = old.seq;
    } catch (const Error&) {
      // unreadable metadata is replaced below
    }
  }
  if (info.seq == 0) {
    info.seq = next_seq();
    info.created_at = utc_now();
  }
  info.sha256 = sha256_hex(bytes);
  write_atomic(data_path(kind, id), bytes);
  const json meta = {{"kind", kind_label(kind)},
                     {"id", id},
                     {"sha256", info.sha256},
                     {"created_at", info.created_at},
                     {"seq", info.seq}};
  write_atomic(meta_path(kind, id), meta.dump(2) + "\n");
  return info;
}

bool Store::exists(Kind kind, const std::string& id) const {
  std::error_code ec;
  return valid_id(id) && fs::exists(data_path(kind, id), ec);
}

EntityInfo Store::info(Kind kind, const std::string& id) const {
  if (!exists(kind, id)) {
    throw Error(ErrorCode::kNotFound, fmt::format("{} '{}' not found", kind_label(kind), id));
  }
  FileLock lock(lock_path(kind, id), LOCK_SH);
  std::error_code ec;
  if (!fs::exists(meta_path(kind, id), ec)) {
    throw Error(ErrorCode::kCorruptEntity,
                fmt::format("metadata for {} '{}' is missing", kind_label(kind), id));
  }
  return parse_meta(read_file(meta_path(kind, id)), kind, id);
}

std::string Store::get_raw(Kind kind, const std::string& id) const {
  if (!exists(kind, id)) {
    throw Error(ErrorCode::kNotFound, fmt::format("{} '{}' not found", kind_label(kind), id));
  }
  FileLock lock(lock_path(kind, id), LOCK_SH);
  std::error_code ec;
  if (!fs::exists(meta_path(kind, id), ec)) {
    throw Error(ErrorCode::kCorruptEntity,
                fmt::format("metadata for {} '{}' is missing", kind_label(kind), id));
  }
  const auto meta = parse_meta(read_file(meta_path(kind, id)), kind, id);
  auto bytes = read_file(data_path(kind, id));
  if (sha256_hex(bytes) != meta.sha256) {
    throw Error(ErrorCode::kCorruptEntity,
                fmt::format("{} '{}' does not match its recorded hash", kind_label(kind), id));
  }
  return bytes;
}

std::vector<EntityInfo> Store::list(Kind kind) const {
  std::vector<EntityInfo> out;
  const std::string suffix = ".meta.json";
  for (const auto& entry : fs::directory_iterator(root_ / directory(kind))) {
    const auto name = entry.path().filename().string();
    if (!name.ends_with(suffix) || name.find(".tmp.") != std::string::npos) continue;
    const auto id = name.substr(0, name.size() - suffix.size());
    if (!exists(kind, id)) continue;
    out.push_back(info(kind, id));
  }
  std::sort(out.begin(), out.end(),
            [](const EntityInfo& a, const EntityInfo& b) { return a.seq < b.seq; });
  return out;
}

EntityInfo Store::put_cohort(const std::string& id, const cohort::Cohort& c) {
  return put_raw(Kind::kCohort, id, cohort::cohort_to_json(c).dump(2) + "\n");
}

cohort::Cohort Store::get_cohort(const std::string& id) const {
  return cohort::cohort_from_json(parse_document(get_raw(Kind::kCohort, id), Kind::kCohort, id));
}

EntityInfo Store::put_predictions(const std::string& id, const metrics::PredictionSet& p) {
  std::ostringstream out;
  scorer::write_predictions_csv(out, p);
  return put_raw(Kind::kPredictions, id, out.str());
}

metrics::PredictionSet Store::get_predictions(const std::string& id) const {
  std::istringstream in(get_raw(Kind::kPredictions, id));
  try {
    return scorer::import_scores(in);
  } catch (const Error& e) {
    throw Error(ErrorCode::kCorruptEntity,
                fmt::format("predictions '{}' are unreadable: {}", id, e.what()));
  }
}

EntityInfo Store::put_matrix(const std::string& id, const cip::CostMatrix& m) {
  return put_raw(Kind::kMatrix, id, cip::to_document(m).dump(2) + "\n");
}

cip::CostMatrix Store::get_matrix(const std::string& id) const {
  return cip::validate_cost_matrix(parse_document(get_raw(Kind::kMatrix, id), Kind::kMatrix, id))
      .matrix;
}

EntityInfo Store::put_card(const std::string& id, const scorer::ModelCard& card) {
  return put_raw(Kind::kCard, id, scorer::card_to_json(card).dump(2) + "\n");
}

scorer::ModelCard Store::get_card(const std::string& id) const {
  return scorer::card_from_json(parse_document(get_raw(Kind::kCard, id), Kind::kCard, id));
}

EntityInfo Store::put_model(const std::string& id, const scorer::LogisticModel& model,
                            const scorer::TrainingReport* report) {
  return put_raw(Kind::kModel, id, scorer::model_to_json(model, report).dump(2) + "\n");
}

scorer::LogisticModel Store::get_model(const std::string& id) const {
  return scorer::model_from_json(parse_document(get_raw(Kind::kModel, id), Kind::kModel, id));
}

EntityInfo Store::put_curve(const std::string& id, const cip::CipCurve& curve) {
  return put_raw(Kind::kCurve, id, report::cip_to_json(curve).dump() + "\n");
}

cip::CipCurve Store::get_curve(const std::string& id) const {
  return report::cip_from_json(parse_document(get_raw(Kind::kCurve, id), Kind::kCurve, id));
}

EntityInfo Store::put_run(const RunRecord& run) {
  return put_raw(Kind::kRun, run.run_id, run_to_json(run).dump(2) + "\n");
}

RunRecord Store::get_run(const std::string& id, bool verify_inputs) const {
  auto run = run_from_json(parse_document(get_raw(Kind::kRun, id), Kind::kRun, id));
  if (!verify_inputs) return run;
  for (const auto& [role, hash] : run.input_hashes) {
    const auto kind = kind_for_role(role);
    const auto it = run.input_ids.find(role);
    if (!kind || it == run.input_ids.end()) {
      throw Error(ErrorCode::kCorruptEntity,
                  fmt::format("run '{}' has an unknown input role '{}'", id, role));
    }
    if (sha256_hex(get_raw(*kind, it->second)) != hash) {
      throw Error(ErrorCode::kCorruptEntity,
                  fmt::format("run '{}': input {} '{}' changed since the run", id, role,
                              it->second));
    }
  }
  return run;
}

json run_to_json(const RunRecord& run) {
  json exchanges = json::array();
  for (const auto& ex : run.exchanges) exchanges.push_back(agents::exchange_to_json(ex));
  json failures = json::array();
  for (const auto& f : run.failures) failures.push_back(agents::failure_to_json(f));
  json order = json::array();
  for (auto a : run.completion_order) order.push_back(agents::to_string(a));
  return {{"run_id", run.run_id},
          {"created_at", run.created_at},
          {"patient_id", run.patient_id},
          {"input_ids", run.input_ids},
          {"input_hashes", run.input_hashes},
          {"template_hash", run.template_hash},
          {"model_name", run.model_name},
          {"artifacts", run.artifacts},
          {"exchanges", exchanges},
          {"failures", failures},
          {"completion_order", order}};
}

RunRecord run_from_json(const json& doc) {
  try {
    RunRecord run;
    run.run_id = doc.at("run_id").get<std::string>();
    run.created_at = doc.at("created_at").get<std::string>();
    run.patient_id = doc.at("patient_id").get<std::string>();
    run.input_ids = doc.at("input_ids").get<std::map<std::string, std::string>>();
    run.input_hashes = doc.at("input_hashes").get<std::map<std::string, std::string>>();
    run.template_hash = doc.at("template_hash").get<std::string>();
    run.model_name = doc.at("model_name").get<std::string>();
    run.artifacts = doc.at("artifacts");
    for (const auto& ex : doc.at("exchanges")) run.exchanges.push_back(agents::exchange_from_json(ex));
    for (const auto& f : doc.at("failures")) run.failures.push_back(agents::failure_from_json(f));
    for (const auto& a : doc.at("completion_order")) {
      const auto id = agents::parse_agent(a.get<std::string>());
      if (!id) throw Error(ErrorCode::kInvalidData, "unknown agent in completion order");
      run.completion_order.push_back(*id);
    }
    return run;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kCorruptEntity, std::string("run record is malformed: ") + e.what());
  }
}

}  // namespace cap::store
