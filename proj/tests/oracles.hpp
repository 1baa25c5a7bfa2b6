#pragma once

// Brute-force reference computations. These deliberately avoid the sorting
// and grouping used by the library so they can serve as independent checks.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "cap/metrics.hpp"

namespace cap::oracle {

// Random prediction set of size n. With `ties`, scores are snapped to a
// 0.05 grid so tied scores are frequent. At least one label of each class
// when n >= 2.
inline metrics::PredictionSet random_set(std::mt19937_64& rng, std::size_t n, bool ties) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<metrics::PredictionRecord> records;
  for (std::size_t i = 0; i < n; ++i) {
    double s = u(rng);
    if (ties) s = std::round(s * 20.0) / 20.0;
    const int label = u(rng) < s ? 1 : 0;
    records.push_back({"r" + std::to_string(i), s, label});
  }
  if (n >= 2) {
    records[0].label = 1;
    records[1].label = 0;
  }
  return metrics::PredictionSet(std::move(records));
}

// P(score_pos > score_neg) + 0.5 P(tie) over all positive/negative pairs.
inline double concordance(const metrics::PredictionSet& preds) {
  double num = 0.0;
  double pairs = 0.0;
  for (const auto& p : preds.records()) {
    if (p.label != 1) continue;
    for (const auto& q : preds.records()) {
      if (q.label != 0) continue;
      pairs += 1.0;
      if (p.score > q.score) {
        num += 1.0;
      } else if (p.score == q.score) {
        num += 0.5;
      }
    }
  }
  return num / pairs;
}

// Mean over positives of precision when thresholding at that positive's score.
inline double average_precision(const metrics::PredictionSet& preds) {
  double sum = 0.0;
  double positives = 0.0;
  for (const auto& p : preds.records()) {
    if (p.label != 1) continue;
    positives += 1.0;
    double selected = 0.0;
    double tp = 0.0;
    for (const auto& q : preds.records()) {
      if (q.score >= p.score) {
        selected += 1.0;
        tp += q.label;
      }
    }
    sum += tp / selected;
  }
  return sum / positives;
}

struct Counts {
  double tp = 0, fp = 0, tn = 0, fn = 0;
};

inline Counts count_at(const metrics::PredictionSet& preds, double t) {
  Counts c;
  for (const auto& r : preds.records()) {
    if (r.score >= t) {
      (r.label ? c.tp : c.fp) += 1.0;
    } else {
      (r.label ? c.fn : c.tn) += 1.0;
    }
  }
  return c;
}

// Prediction set with exactly `pos` positives out of n and evenly spread scores.
inline metrics::PredictionSet with_prevalence(std::size_t n, std::size_t pos) {
  std::vector<metrics::PredictionRecord> records;
  for (std::size_t i = 0; i < n; ++i) {
    records.push_back({"q" + std::to_string(i), static_cast<double>(i) / static_cast<double>(n),
                       (i * 7919) % n < pos ? 1 : 0});
  }
  return metrics::PredictionSet(std::move(records));
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(b.size());
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace cap::oracle
