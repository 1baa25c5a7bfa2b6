#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cap::metrics {

struct PredictionRecord {
  std::string patient_id;
  double score = 0.0;  // risk score in [0, 1]
  int label = 0;       // 1 = died within one year

  bool operator==(const PredictionRecord&) const = default;
};

// Validated, non-empty collection of predictions with unique patient ids.
class PredictionSet {
 public:
  // Throws EmptyInput, RangeError or DuplicateId.
  explicit PredictionSet(std::vector<PredictionRecord> records);

  // Convenience for tests and tools: ids are generated as "p0", "p1", ...
  static PredictionSet from_arrays(std::span<const double> scores,
                                   std::span<const int> labels);

  const std::vector<PredictionRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  std::size_t positives() const { return positives_; }
  std::size_t negatives() const { return records_.size() - positives_; }
  double prevalence() const {
    return static_cast<double>(positives_) / static_cast<double>(records_.size());
  }

  const PredictionRecord* find(std::string_view patient_id) const;

  std::vector<double> scores() const;
  std::vector<int> labels() const;

  bool operator==(const PredictionSet& other) const {
    return records_ == other.records_;
  }

 private:
  std::vector<PredictionRecord> records_;
  std::size_t positives_ = 0;
};

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;
  double threshold = 0.0;

  std::size_t total() const { return tp + fp + tn + fn; }
  bool operator==(const ConfusionCounts&) const = default;
};

struct CurvePoint {
  double x = 0.0;
  double y = 0.0;
  double threshold = 0.0;
};

struct CalibrationBin {
  double lo = 0.0;
  double hi = 0.0;
  std::optional<double> mean_score;     // absent for empty bins
  std::optional<double> observed_rate;  // absent for empty bins
  std::size_t count = 0;
};

struct BootstrapEstimate {
  double point = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  std::size_t n_resamples = 0;
  std::uint64_t seed = 0;

  bool operator==(const BootstrapEstimate&) const = default;
};

struct ThresholdF1 {
  double threshold = 0.0;
  double f1 = 0.0;

  bool operator==(const ThresholdF1&) const = default;
};

// A scalar metric that the bootstrap can recompute on resamples.
struct MetricSpec {
  enum class Kind { kAuroc, kAuprc, kBrier, kF1At };
  Kind kind = Kind::kAuroc;
  double threshold = 0.0;  // only used by kF1At

  // Accepts "auroc", "auprc", "brier" and "f1@<t>".
  static MetricSpec parse(std::string_view name);
  std::string name() const;
};

struct LocalPerformance {
  double center = 0.0;
  double window = 0.0;
  ConfusionCounts counts;
  std::optional<double> precision;  // absent when nothing is predicted positive
  std::optional<double> recall;     // absent when there are no positives
  double f1 = 0.0;
  std::size_t window_count = 0;
  double score_density = 0.0;  // window_count / N
  std::optional<double> window_positive_rate;
};

struct BootstrapOptions {
  std::size_t n_resamples = 1000;
  std::uint64_t seed = 0;
  std::size_t max_retries = 100;
  unsigned threads = 1;
};

// Threshold grids. The default is 0.00, 0.01, ..., 1.00.
std::vector<double> default_grid();
// Parses "start:stop:step" (stop inclusive). Throws InvalidConfig.
std::vector<double> parse_grid(std::string_view text);
void validate_grid(std::span<const double> grid);

// Records with score >= t are predicted positive.
ConfusionCounts confusion_at(const PredictionSet& preds, double t);

double auroc(const PredictionSet& preds);
double auprc(const PredictionSet& preds);
double brier(const PredictionSet& preds);
double f1_score(const ConfusionCounts& c);

// Points are ordered by threshold, highest first. The ROC curve starts at an
// (0, 0) anchor that carries threshold 1.0 and predicts nothing positive.
std::vector<CurvePoint> roc_curve(const PredictionSet& preds);
std::vector<CurvePoint> pr_curve(const PredictionSet& preds);
std::vector<CalibrationBin> calibration(const PredictionSet& preds,
                                        std::size_t n_bins = 10);

double trapezoid_area(std::span<const CurvePoint> curve);

std::vector<ThresholdF1> f1_sweep(const PredictionSet& preds,
                                  std::span<const double> grid);
// Argmax of F1; ties go to the lowest threshold.
ThresholdF1 best_threshold(const PredictionSet& preds,
                           std::span<const double> grid);

double evaluate(const MetricSpec& metric, const PredictionSet& preds);

// Percentile bootstrap. Resample i draws from an RNG stream derived from
// (seed, i, retry), so results do not depend on the thread count.
BootstrapEstimate bootstrap(const MetricSpec& metric, const PredictionSet& preds,
                            const BootstrapOptions& options = {});

LocalPerformance local_performance(const PredictionSet& preds, double center,
                                   double window);

// Array-level kernels shared by the public functions and the bootstrap.
namespace detail {
double auroc(std::span<const double> scores, std::span<const int> labels);
double auprc(std::span<const double> scores, std::span<const int> labels);
double brier(std::span<const double> scores, std::span<const int> labels);
ConfusionCounts confusion(std::span<const double> scores,
                          std::span<const int> labels, double t);
}  // namespace detail

}  // namespace cap::metrics
