#include "cap/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>
#include <unordered_set>

#include "cap/error.hpp"
#include "cap/numfmt.hpp"

namespace cap::metrics {
namespace {

constexpr double kBoundaryEps = 1e-12;

std::size_t count_positives(std::span<const int> labels) {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

// Indices ordered by descending score; ties keep input order.
std::vector<std::size_t> order_descending(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  return order;
}

double percentile(const std::vector<double>& sorted, double p) {
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = h - static_cast<double>(lo);
  if (frac == 0.0) return sorted[lo];
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

double parse_number(std::string_view text, std::string_view what) {
  double value = 0.0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || !std::isfinite(value)) {
    throw Error(ErrorCode::kInvalidConfig,
                "invalid " + std::string(what) + " '" + std::string(text) + "'");
  }
  return value;
}

double metric_on(const MetricSpec& metric, std::span<const double> scores,
                 std::span<const int> labels) {
  switch (metric.kind) {
    case MetricSpec::Kind::kAuroc: return detail::auroc(scores, labels);
    case MetricSpec::Kind::kAuprc: return detail::auprc(scores, labels);
    case MetricSpec::Kind::kBrier: return detail::brier(scores, labels);
    case MetricSpec::Kind::kF1At:
      return f1_score(detail::confusion(scores, labels, metric.threshold));
  }
  return 0.0;
}

bool degenerate_for(const MetricSpec& metric, std::size_t positives, std::size_t n) {
  switch (metric.kind) {
    case MetricSpec::Kind::kAuroc: return positives == 0 || positives == n;
    case MetricSpec::Kind::kAuprc: return positives == 0;
    default: return false;
  }
}

}  // namespace

PredictionSet::PredictionSet(std::vector<PredictionRecord> records)
    : records_(std::move(records)) {
  if (records_.empty()) {
    throw Error(ErrorCode::kEmptyInput, "prediction set is empty");
  }
  std::unordered_set<std::string_view> seen;
  seen.reserve(records_.size());
  for (const auto& r : records_) {
    if (!std::isfinite(r.score) || r.score < 0.0 || r.score > 1.0) {
      throw Error(ErrorCode::kRangeError,
                  "score for '" + r.patient_id + "' outside [0, 1]");
    }
    if (r.label != 0 && r.label != 1) {
      throw Error(ErrorCode::kRangeError,
                  "label for '" + r.patient_id + "' must be 0 or 1");
    }
    if (!seen.insert(r.patient_id).second) {
      throw Error(ErrorCode::kDuplicateId, "duplicate patient_id '" + r.patient_id + "'");
    }
    positives_ += static_cast<std::size_t>(r.label);
  }
}

PredictionSet PredictionSet::from_arrays(std::span<const double> scores,
                                         std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw Error(ErrorCode::kInvalidData, "scores and labels differ in length");
  }
  std::vector<PredictionRecord> records;
  records.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    records.push_back({"p" + std::to_string(i), scores[i], labels[i]});
  }
  return PredictionSet(std::move(records));
}

const PredictionRecord* PredictionSet::find(std::string_view patient_id) const {
  for (const auto& r : records_) {
    if (r.patient_id == patient_id) return &r;
  }
  return nullptr;
}

std::vector<double> PredictionSet::scores() const {
  std::vector<double> out;
  out.reserve(records_.size());
  for (const auto& r : records_) out.push_back(r.score);
  return out;
}

std::vector<int> PredictionSet::labels() const {
  std::vector<int> out;
  out.reserve(records_.size());
  for (const auto& r : records_) out.push_back(r.label);
  return out;
}

MetricSpec MetricSpec::parse(std::string_view name) {
  if (name == "auroc") return {Kind::kAuroc, 0.0};
  if (name == "auprc") return {Kind::kAuprc, 0.0};
  if (name == "brier") return {Kind::kBrier, 0.0};
  if (name.starts_with("f1@")) {
    const double t = parse_number(name.substr(3), "f1 threshold");
    if (t < 0.0 || t > 1.0) {
      throw Error(ErrorCode::kInvalidConfig, "f1 threshold outside [0, 1]");
    }
    return {Kind::kF1At, t};
  }
  throw Error(ErrorCode::kInvalidConfig, "unknown metric '" + std::string(name) + "'");
}

std::string MetricSpec::name() const {
  switch (kind) {
    case Kind::kAuroc: return "auroc";
    case Kind::kAuprc: return "auprc";
    case Kind::kBrier: return "brier";
    case Kind::kF1At: return "f1@" + format_double(threshold);
  }
  return {};
}

std::vector<double> default_grid() {
  std::vector<double> grid;
  grid.reserve(101);
  for (int i = 0; i <= 100; ++i) grid.push_back(i / 100.0);
  return grid;
}

std::vector<double> parse_grid(std::string_view text) {
  const auto first = text.find(':');
  const auto second = first == std::string_view::npos ? first : text.find(':', first + 1);
  if (second == std::string_view::npos) {
    throw Error(ErrorCode::kInvalidConfig,
                "grid must be 'start:stop:step', got '" + std::string(text) + "'");
  }
  const double start = parse_number(text.substr(0, first), "grid start");
  const double stop = parse_number(text.substr(first + 1, second - first - 1), "grid stop");
  const double step = parse_number(text.substr(second + 1), "grid step");
  if (step <= 0.0 || stop < start || start < 0.0 || stop > 1.0) {
    throw Error(ErrorCode::kInvalidConfig,
                "grid '" + std::string(text) + "' must satisfy 0 <= start <= stop <= 1, step > 0");
  }
  const auto n = static_cast<std::size_t>(std::floor((stop - start) / step + 1e-9));
  std::vector<double> grid;
  grid.reserve(n + 1);
  for (std::size_t i = 0; i <= n; ++i) {
    // Snap to 12 decimals so "0:1:0.01" yields the same doubles as i / 100.
    const double raw = start + static_cast<double>(i) * step;
    grid.push_back(std::min(1.0, std::round(raw * 1e12) / 1e12));
  }
  return grid;
}

void validate_grid(std::span<const double> grid) {
  if (grid.empty()) throw Error(ErrorCode::kInvalidConfig, "threshold grid is empty");
  for (double t : grid) {
    if (!std::isfinite(t) || t < 0.0 || t > 1.0) {
      throw Error(ErrorCode::kInvalidConfig,
                  "grid threshold " + format_double(t) + " outside [0, 1]");
    }
  }
}

namespace detail {

ConfusionCounts confusion(std::span<const double> scores, std::span<const int> labels,
                          double t) {
  ConfusionCounts c;
  c.threshold = t;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= t;
    if (labels[i] == 1) {
      predicted ? ++c.tp : ++c.fn;
    } else {
      predicted ? ++c.fp : ++c.tn;
    }
  }
  return c;
}

// Mann-Whitney U from average ranks; tied pairs contribute one half.
double auroc(std::span<const double> scores, std::span<const int> labels) {
  const std::size_t n = scores.size();
  const std::size_t pos = count_positives(labels);
  if (pos == 0 || pos == n) {
    throw Error(ErrorCode::kDegenerateLabels, "AUROC needs both positive and negative labels");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Ranks are doubled so tied averages stay integral.
  std::uint64_t pos_rank_sum_x2 = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t avg_rank_x2 = (i + 1) + j;  // (i+1) + j == 2 * mean rank
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) pos_rank_sum_x2 += avg_rank_x2;
    }
    i = j;
  }
  const std::uint64_t neg = n - pos;
  const std::uint64_t u_x2 = pos_rank_sum_x2 - static_cast<std::uint64_t>(pos) * (pos + 1);
  return static_cast<double>(u_x2) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

// Average precision; a positive's precision is taken at its own score as
// threshold, so tied records enter together.
double auprc(std::span<const double> scores, std::span<const int> labels) {
  const std::size_t pos = count_positives(labels);
  if (pos == 0) {
    throw Error(ErrorCode::kDegenerateLabels, "AUPRC needs at least one positive label");
  }
  const auto order = order_descending(scores);
  // extended accumulator so that rational results round once
  long double sum = 0.0L;
  std::size_t tp = 0;
  std::size_t seen = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    std::size_t group_pos = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      group_pos += static_cast<std::size_t>(labels[order[j]]);
      ++j;
    }
    tp += group_pos;
    seen += j - i;
    if (group_pos > 0) {
      sum += static_cast<long double>(group_pos) * static_cast<long double>(tp) /
             static_cast<long double>(seen);
    }
    i = j;
  }
  return static_cast<double>(sum / static_cast<long double>(pos));
}

double brier(std::span<const double> scores, std::span<const int> labels) {
  if (scores.empty()) throw Error(ErrorCode::kEmptyInput, "Brier score of empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double d = scores[i] - static_cast<double>(labels[i]);
    sum += d * d;
  }
  return sum / static_cast<double>(scores.size());
}

}  // namespace detail

ConfusionCounts confusion_at(const PredictionSet& preds, double t) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw Error(ErrorCode::kInvalidConfig, "threshold " + format_double(t) + " outside [0, 1]");
  }
  ConfusionCounts c;
  c.threshold = t;
  for (const auto& r : preds.records()) {
    const bool predicted = r.score >= t;
    if (r.label == 1) {
      predicted ? ++c.tp : ++c.fn;
    } else {
      predicted ? ++c.fp : ++c.tn;
    }
  }
  return c;
}

double auroc(const PredictionSet& preds) {
  return detail::auroc(preds.scores(), preds.labels());
}

double auprc(const PredictionSet& preds) {
  return detail::auprc(preds.scores(), preds.labels());
}

double brier(const PredictionSet& preds) {
  return detail::brier(preds.scores(), preds.labels());
}

double f1_score(const ConfusionCounts& c) {
  const std::size_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 0.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

std::vector<CurvePoint> roc_curve(const PredictionSet& preds) {
  const double pos = static_cast<double>(preds.positives());
  const double neg = static_cast<double>(preds.negatives());
  if (pos == 0.0 || neg == 0.0) {
    throw Error(ErrorCode::kDegenerateLabels, "ROC curve needs both classes");
  }
  const auto scores = preds.scores();
  const auto labels = preds.labels();
  const auto order = order_descending(scores);

  std::vector<CurvePoint> curve;
  curve.push_back({0.0, 0.0, 1.0});
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double t = scores[order[i]];
    while (i < order.size() && scores[order[i]] == t) {
      labels[order[i]] == 1 ? ++tp : ++fp;
      ++i;
    }
    curve.push_back({static_cast<double>(fp) / neg, static_cast<double>(tp) / pos, t});
  }
  return curve;
}

std::vector<CurvePoint> pr_curve(const PredictionSet& preds) {
  const double pos = static_cast<double>(preds.positives());
  if (pos == 0.0) {
    throw Error(ErrorCode::kDegenerateLabels, "PR curve needs at least one positive");
  }
  const auto scores = preds.scores();
  const auto labels = preds.labels();
  const auto order = order_descending(scores);

  std::vector<CurvePoint> curve;
  std::size_t tp = 0;
  std::size_t seen = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double t = scores[order[i]];
    while (i < order.size() && scores[order[i]] == t) {
      tp += static_cast<std::size_t>(labels[order[i]]);
      ++seen;
      ++i;
    }
    curve.push_back({static_cast<double>(tp) / pos,
                     static_cast<double>(tp) / static_cast<double>(seen), t});
  }
  return curve;
}

std::vector<CalibrationBin> calibration(const PredictionSet& preds, std::size_t n_bins) {
  if (n_bins < 2) throw Error(ErrorCode::kInvalidConfig, "calibration needs at least 2 bins");
  const double width = static_cast<double>(n_bins);
  std::vector<CalibrationBin> bins(n_bins);
  std::vector<double> score_sum(n_bins, 0.0);
  std::vector<std::size_t> positives(n_bins, 0);
  for (std::size_t b = 0; b < n_bins; ++b) {
    bins[b].lo = static_cast<double>(b) / width;
    bins[b].hi = static_cast<double>(b + 1) / width;
  }
  for (const auto& r : preds.records()) {
    auto b = static_cast<std::size_t>(std::floor(r.score * width));
    b = std::min(b, n_bins - 1);
    // Correct for rounding in r.score * width against the stored edges.
    if (b + 1 < n_bins && r.score >= bins[b + 1].lo) ++b;
    if (b > 0 && r.score < bins[b].lo) --b;
    ++bins[b].count;
    score_sum[b] += r.score;
    positives[b] += static_cast<std::size_t>(r.label);
  }
  for (std::size_t b = 0; b < n_bins; ++b) {
    if (bins[b].count == 0) continue;
    const double count = static_cast<double>(bins[b].count);
    bins[b].mean_score = score_sum[b] / count;
    bins[b].observed_rate = static_cast<double>(positives[b]) / count;
  }
  return bins;
}

double trapezoid_area(std::span<const CurvePoint> curve) {
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    area += (curve[i].x - curve[i - 1].x) * (curve[i].y + curve[i - 1].y) / 2.0;
  }
  return area;
}

std::vector<ThresholdF1> f1_sweep(const PredictionSet& preds, std::span<const double> grid) {
  validate_grid(grid);
  std::vector<ThresholdF1> out;
  out.reserve(grid.size());
  for (double t : grid) out.push_back({t, f1_score(confusion_at(preds, t))});
  return out;
}

ThresholdF1 best_threshold(const PredictionSet& preds, std::span<const double> grid) {
  const auto sweep = f1_sweep(preds, grid);
  ThresholdF1 best = sweep.front();
  for (const auto& p : sweep) {
    if (p.f1 > best.f1 || (p.f1 == best.f1 && p.threshold < best.threshold)) best = p;
  }
  return best;
}

double evaluate(const MetricSpec& metric, const PredictionSet& preds) {
  return metric_on(metric, preds.scores(), preds.labels());
}

BootstrapEstimate bootstrap(const MetricSpec& metric, const PredictionSet& preds,
                            const BootstrapOptions& options) {
  if (options.n_resamples < 1) {
    throw Error(ErrorCode::kInvalidConfig, "bootstrap needs at least one resample");
  }
  const auto scores = preds.scores();
  const auto labels = preds.labels();
  const std::size_t n = scores.size();

  BootstrapEstimate est;
  est.point = metric_on(metric, scores, labels);
  est.n_resamples = options.n_resamples;
  est.seed = options.seed;

  std::vector<double> values(options.n_resamples);
  auto run_one = [&](std::size_t index, std::vector<double>& rs, std::vector<int>& rl) {
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t attempt = 0; attempt <= options.max_retries; ++attempt) {
      std::seed_seq seq{static_cast<std::uint32_t>(options.seed),
                        static_cast<std::uint32_t>(options.seed >> 32),
                        static_cast<std::uint32_t>(index),
                        static_cast<std::uint32_t>(index >> 32),
                        static_cast<std::uint32_t>(attempt)};
      std::mt19937_64 rng(seq);
      std::size_t positives = 0;
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = pick(rng);
        rs[k] = scores[j];
        rl[k] = labels[j];
        positives += static_cast<std::size_t>(labels[j]);
      }
      if (!degenerate_for(metric, positives, n)) {
        values[index] = metric_on(metric, rs, rl);
        return;
      }
    }
    throw Error(ErrorCode::kDegenerateLabels,
                "bootstrap resample " + std::to_string(index) + " stayed single-class after " +
                    std::to_string(options.max_retries) + " redraws");
  };

  const unsigned threads =
      std::max(1u, std::min<unsigned>(options.threads,
                                      static_cast<unsigned>(options.n_resamples)));
  if (threads == 1) {
    std::vector<double> rs(n);
    std::vector<int> rl(n);
    for (std::size_t i = 0; i < options.n_resamples; ++i) run_one(i, rs, rl);
  } else {
    std::exception_ptr failure;
    std::mutex failure_mu;
    std::vector<std::thread> workers;
    for (unsigned w = 0; w < threads; ++w) {
      workers.emplace_back([&, w] {
        std::vector<double> rs(n);
        std::vector<int> rl(n);
        try {
          for (std::size_t i = w; i < options.n_resamples; i += threads) run_one(i, rs, rl);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
        }
      });
    }
    for (auto& t : workers) t.join();
    if (failure) std::rethrow_exception(failure);
  }

  std::sort(values.begin(), values.end());
  est.ci_lo = percentile(values, 0.025);
  est.ci_hi = percentile(values, 0.975);
  return est;
}

LocalPerformance local_performance(const PredictionSet& preds, double center, double window) {
  if (!(window > 0.0)) throw Error(ErrorCode::kInvalidConfig, "window must be positive");
  LocalPerformance lp;
  lp.center = center;
  lp.window = window;
  lp.counts = confusion_at(preds, center);
  const auto& c = lp.counts;
  if (c.tp + c.fp > 0) {
    lp.precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  }
  if (c.tp + c.fn > 0) {
    lp.recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  }
  lp.f1 = f1_score(c);

  std::size_t in_window_pos = 0;
  for (const auto& r : preds.records()) {
    if (std::abs(r.score - center) <= window + kBoundaryEps) {
      ++lp.window_count;
      in_window_pos += static_cast<std::size_t>(r.label);
    }
  }
  lp.score_density = static_cast<double>(lp.window_count) / static_cast<double>(preds.size());
  if (lp.window_count > 0) {
    lp.window_positive_rate =
        static_cast<double>(in_window_pos) / static_cast<double>(lp.window_count);
  }
  return lp;
}

}  // namespace cap::metrics
