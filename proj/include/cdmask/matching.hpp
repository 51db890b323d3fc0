// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "cdmask/detector_head.hpp"
#include "cdmask/hungarian.hpp"

namespace cdmask {

/// Loss mix: L = ce * L_bce + dice * L_dice + cls * L_cls. Defaults are the
/// best-performing triple (1, 10, 10); unmatched queries carry the no-change
/// label with a reduced class-loss weight.
struct LossWeights {
  double cls = 1.0;
  double dice = 10.0;
  double ce = 10.0;
  double null_class_weight = 0.1;

  void validate() const {
    check(cls >= 0 && dice >= 0 && ce >= 0 && null_class_weight >= 0,
          "LossWeights: weights must be nonnegative");
  }
};

/// Ground truth for one sample: zero masks when nothing changed, otherwise
/// one binary mask per change target at prediction (H/4) resolution.
template <typename T>
struct TargetSet {
  std::vector<Tensor<T>> masks;
};

/// 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps), eps = 1.
template <typename T>
ag::Var<T> dice_loss(const ag::Var<T>& probs, const Tensor<T>& target, double eps = 1.0) {
  check(probs.value().numel() == target.numel(), "dice_loss: shape mismatch");
  ag::Var<T> tgt = ag::constant(target.reshaped(probs.value().shape()));
  ag::Var<T> inter = ag::sum_all(ag::mul(probs, tgt));
  ag::Var<T> psum = ag::sum_all(probs);
  double gsum = 0;
  for (int64_t i = 0; i < target.numel(); ++i) gsum += static_cast<double>(target[i]);
  ag::Var<T> num = ag::add_scalar(ag::scale(inter, 2.0), eps);
  ag::Var<T> den = ag::add_scalar(psum, gsum + eps);
  return ag::add_scalar(ag::scale(ag::div(num, den), -1.0), 1.0);
}

/// Matching cost of assigning query q to a target mask (no gradients):
/// cls * (-p_change) + ce * BCE(sigmoid(mask), target) + dice * Dice(...),
/// probabilities clamped to [1e-7, 1-1e-7] inside the BCE.
template <typename T>
double match_cost(const Tensor<T>& cls_logits, const Tensor<T>& mask_logits, int q,
                  const Tensor<T>& target, const LossWeights& w) {
  const int h = mask_logits.dim(1), wd = mask_logits.dim(2);
  check(target.numel() == static_cast<int64_t>(h) * wd, "match_cost: target resolution");
  const double a = cls_logits.at(q, kChangeClass);
  const double b = cls_logits.at(q, kNullClass);
  const double mx = std::max(a, b);
  const double p_change = std::exp(a - mx) / (std::exp(a - mx) + std::exp(b - mx));

  double bce = 0, inter = 0, psum = 0, gsum = 0;
  const int64_t n = static_cast<int64_t>(h) * wd;
  for (int64_t i = 0; i < n; ++i) {
    const double logit = mask_logits[static_cast<int64_t>(q) * n + i];
    double p = 1.0 / (1.0 + std::exp(-logit));
    p = std::clamp(p, 1e-7, 1.0 - 1e-7);
    const double g = target[i];
    bce += -(g * std::log(p) + (1.0 - g) * std::log(1.0 - p));
    inter += p * g;
    psum += p;
    gsum += g;
  }
  bce /= static_cast<double>(n);
  const double dice = 1.0 - (2.0 * inter + 1.0) / (psum + gsum + 1.0);
  return w.cls * (-p_change) + w.ce * bce + w.dice * dice;
}

/// Assigns targets to queries for one prediction set; result[t] = query index.
template <typename T>
std::vector<int> match_targets(const PredictionSet<T>& pred, const TargetSet<T>& targets,
                               const LossWeights& w) {
  const int m = pred.cls_logits.value().dim(0);
  const int n = static_cast<int>(targets.masks.size());
  if (n == 0) return {};
  std::vector<double> cost(static_cast<size_t>(n) * m);
  for (int t = 0; t < n; ++t)
    for (int q = 0; q < m; ++q)
      cost[t * m + q] = match_cost(pred.cls_logits.value(), pred.mask_logits.value(), q,
                                   targets.masks[t], w);
  return hungarian_match(cost, n, m);
}

struct LossBreakdown {
  double bce = 0;   // unweighted mask BCE summed over prediction sets
  double dice = 0;  // unweighted dice summed over prediction sets
  double cls = 0;   // unweighted classification CE summed over prediction sets
  double total = 0;
};

/// Deeply supervised set-prediction loss: every prediction set is matched
/// independently; matched queries receive mask BCE + dice and the change
/// label, unmatched queries the no-change label at reduced weight.
template <typename T>
ag::Var<T> total_loss(const std::vector<PredictionSet<T>>& preds,
                      const TargetSet<T>& targets, const LossWeights& w,
                      LossBreakdown* breakdown = nullptr) {
  w.validate();
  ag::Var<T> total = ag::constant(Tensor<T>::scalar(T(0)));
  LossBreakdown bd;
  for (const auto& pred : preds) {
    const int m = pred.cls_logits.value().dim(0);
    const auto& mk = pred.mask_logits.value();
    const int hw = mk.dim(1) * mk.dim(2);
    std::vector<int> assigned = match_targets(pred, targets, w);

    std::vector<int> cls_target(m, kNullClass);
    std::vector<double> cls_weight(m, w.null_class_weight);
    ag::Var<T> mask_flat = ag::reshape(pred.mask_logits, {m, hw});
    ag::Var<T> bce_sum, dice_sum;
    for (size_t t = 0; t < assigned.size(); ++t) {
      const int q = assigned[t];
      cls_target[q] = kChangeClass;
      cls_weight[q] = 1.0;
      const Tensor<T> tgt = targets.masks[t].reshaped({1, hw});
      ag::Var<T> row = ag::slice_rows(mask_flat, q, 1);
      ag::Var<T> bce = ag::bce_with_logits_mean(row, tgt);
      ag::Var<T> dc = dice_loss(ag::sigmoid(row), tgt);
      bce_sum = bce_sum.defined() ? ag::add(bce_sum, bce) : bce;
      dice_sum = dice_sum.defined() ? ag::add(dice_sum, dc) : dc;
    }
    ag::Var<T> cls_loss = ag::cross_entropy_rows(pred.cls_logits, cls_target, cls_weight);

    ag::Var<T> layer = ag::scale(cls_loss, w.cls);
    if (!assigned.empty()) {
      const double inv = 1.0 / static_cast<double>(assigned.size());
      layer = ag::add(layer, ag::scale(bce_sum, w.ce * inv));
      layer = ag::add(layer, ag::scale(dice_sum, w.dice * inv));
      bd.bce += static_cast<double>(bce_sum.value()[0]) * inv;
      bd.dice += static_cast<double>(dice_sum.value()[0]) * inv;
    }
    bd.cls += static_cast<double>(cls_loss.value()[0]);
    total = ag::add(total, layer);
  }
  bd.total = static_cast<double>(total.value()[0]);
  if (breakdown) *breakdown = bd;
  return total;
}

}  // namespace cdmask
