// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#include "cdmask/metrics.hpp"

#include <cstdio>
#include <stdexcept>

namespace cdmask {

void accumulate(const uint8_t* pred, const uint8_t* gt, int64_t n,
                ConfusionCounts& counts) {
  for (int64_t i = 0; i < n; ++i) {
    if (pred[i] > 1 || gt[i] > 1)
      throw std::invalid_argument("accumulate: maps must be binary (0/1)");
    if (pred[i] && gt[i])
      ++counts.tp;
    else if (!pred[i] && !gt[i])
      ++counts.tn;
    else if (pred[i])
      ++counts.fp;
    else
      ++counts.fn;
  }
}

MetricReport compute(const ConfusionCounts& c) {
  if (c.total() == 0) throw std::invalid_argument("compute: no pixels accumulated");
  MetricReport r;
  const bool gt_empty = c.tp + c.fn == 0;
  const bool pred_empty = c.tp + c.fp == 0;
  if (gt_empty && pred_empty) {
    r.precision = r.recall = r.f1 = r.iou = 1.0;
  } else {
    r.precision = (c.tp + c.fp) ? double(c.tp) / double(c.tp + c.fp) : 0.0;
    r.recall = (c.tp + c.fn) ? double(c.tp) / double(c.tp + c.fn) : 0.0;
    r.iou = (c.tp + c.fn + c.fp) ? double(c.tp) / double(c.tp + c.fn + c.fp) : 0.0;
    r.f1 = (r.precision + r.recall > 0)
               ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
               : 0.0;
  }
  r.oa = double(c.tp + c.tn) / double(c.total());
  return r;
}

std::string format_report(const MetricReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "F1   %.2f\nPre  %.2f\nRec  %.2f\nIoU  %.2f\nOA   %.2f\n",
                r.f1 * 100.0, r.precision * 100.0, r.recall * 100.0, r.iou * 100.0,
                r.oa * 100.0);
  return buf;
}

}  // namespace cdmask
