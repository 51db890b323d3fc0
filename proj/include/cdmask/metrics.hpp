// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>

namespace cdmask {

/// Confusion accumulator for binary change maps. Counts merge associatively,
/// so per-sample counts can be reduced in any grouping; the metric values are
/// micro-averages over the global counts.
struct ConfusionCounts {
  uint64_t tp = 0;
  uint64_t tn = 0;
  uint64_t fp = 0;
  uint64_t fn = 0;

  uint64_t total() const { return tp + tn + fp + fn; }

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    tn += o.tn;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
};

struct MetricReport {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  double iou = 0;
  double oa = 0;
};

/// Adds the per-pixel joint outcomes of `pred` vs `gt` (both 0/1 arrays of
/// length n) into `counts`. Throws on non-binary values.
void accumulate(const uint8_t* pred, const uint8_t* gt, int64_t n, ConfusionCounts& counts);

/// Computes precision/recall/F1/IoU/OA from the counts.
/// Degenerate denominators: if the ground truth and the prediction both
/// contain zero positives, Pre = Rec = F1 = IoU = 1 (a correct "no change"
/// verdict); otherwise any metric with an empty denominator or zero TP is 0.
MetricReport compute(const ConfusionCounts& counts);

/// "key  value%" lines with two-decimal percentages.
std::string format_report(const MetricReport& r);

}  // namespace cdmask
