#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "hemaseg/image.hpp"

namespace hemaseg {

/// rows = true class, cols = predicted class.
struct ConfusionMatrix {
  std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses> counts{};

  [[nodiscard]] std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& row : counts) {
      for (auto v : row) t += v;
    }
    return t;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    for (std::size_t i = 0; i < kNumClasses; ++i) {
      for (std::size_t j = 0; j < kNumClasses; ++j) counts[i][j] += o.counts[i][j];
    }
    return *this;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

/// Accumulates only where `labels` is labeled.
inline ConfusionMatrix confusion(const LabelMap& pred, const SparseLabelMask& labels) {
  if (pred.height != labels.height || pred.width != labels.width) {
    throw ShapeError("confusion: prediction " + to_string(Shape{pred.height, pred.width}) + " vs labels " +
                     to_string(Shape{labels.height, labels.width}));
  }
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < labels.codes.size(); ++i) {
    const auto t = labels.codes[i];
    if (t == kUnlabeled) continue;
    const auto p = pred.codes[i];
    if (t >= kNumClasses || p >= kNumClasses) throw std::invalid_argument("confusion: class code out of range");
    ++cm.counts[t][p];
  }
  return cm;
}

struct RunRecord {
  int fold = 0;
  double accuracy = 0.0;
  std::array<std::optional<double>, kNumClasses> f1{};
  double f1_macro = 0.0;
};

/// accuracy = trace/total; F1_c = 2TP/(2TP+FP+FN), undefined when the
/// denominator is zero; macro F1 averages the defined classes.
inline RunRecord scores(const ConfusionMatrix& cm, int fold = 0) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw std::invalid_argument("scores: empty confusion matrix");
  RunRecord r;
  r.fold = fold;
  std::uint64_t trace = 0;
  double f1_sum = 0.0;
  std::size_t defined = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    trace += cm.counts[c][c];
    std::uint64_t fp = 0, fn = 0;
    for (std::size_t k = 0; k < kNumClasses; ++k) {
      if (k == c) continue;
      fp += cm.counts[k][c];
      fn += cm.counts[c][k];
    }
    const std::uint64_t tp = cm.counts[c][c];
    const std::uint64_t denom = 2 * tp + fp + fn;
    if (denom == 0) continue;
    r.f1[c] = double(2 * tp) / double(denom);
    f1_sum += *r.f1[c];
    ++defined;
  }
  r.accuracy = double(trace) / double(total);
  r.f1_macro = defined ? f1_sum / double(defined) : 0.0;
  return r;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  std::size_t n = 0;
};

struct CvSummary {
  MeanStd accuracy;
  MeanStd f1_macro;
  std::array<std::optional<MeanStd>, kNumClasses> f1;
};

namespace detail {
/// Mean and sample (n-1) standard deviation. Values are summed in sorted
/// order so the result does not depend on record order.
inline MeanStd mean_std(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  MeanStd m;
  m.n = v.size();
  if (v.empty()) return m;
  double s = 0;
  for (double x : v) s += x;
  m.mean = s / double(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / double(v.size() - 1));
  }
  return m;
}
}  // namespace detail

/// Mean ± sample std over folds. Undefined per-class F1 entries are skipped per class.
inline CvSummary cv_aggregate(const std::vector<RunRecord>& records) {
  if (records.size() < 2) throw std::invalid_argument("cv_aggregate: need at least 2 records");
  std::vector<double> acc, mac;
  std::array<std::vector<double>, kNumClasses> per;
  for (const auto& r : records) {
    acc.push_back(r.accuracy);
    mac.push_back(r.f1_macro);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      if (r.f1[c]) per[c].push_back(*r.f1[c]);
    }
  }
  CvSummary s;
  s.accuracy = detail::mean_std(acc);
  s.f1_macro = detail::mean_std(mac);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (!per[c].empty()) s.f1[c] = detail::mean_std(per[c]);
  }
  return s;
}

}  // namespace hemaseg
