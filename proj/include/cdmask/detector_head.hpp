// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>

#include "cdmask/nn.hpp"

namespace cdmask {

// Class layout of O_cls: column 0 is the change class, column 1 is the
// no-change class whose channel is dropped when forming F_seg.
inline constexpr int kChangeClass = 0;
inline constexpr int kNullClass = 1;
inline constexpr int kNumClasses = 2;

template <typename T>
struct PredictionSet {
  ag::Var<T> cls_logits;   // [m, 2]
  ag::Var<T> mask_logits;  // [m, H/4, W/4]
};

/// Prototype-to-prediction heads shared across all decoder layers.
template <typename T>
class DetectorHead {
 public:
  DetectorHead() = default;
  DetectorHead(nn::ParamStore<T>& ps, int channels, Rng& rng)
      : cls_mlp_(ps, "head.cls", {channels, channels, kNumClasses}, rng),
        mask_mlp_(ps, "head.mask", {channels, channels, channels, channels}, rng) {}

  /// [m,C] -> [m,2] class logits via a 2-layer MLP.
  ag::Var<T> classify(const ag::Var<T>& prototypes) const {
    check(prototypes.value().rank() == 2, "classify: want [m,C]");
    return cls_mlp_(prototypes);
  }

  /// [m,C] x [C,H4,W4] -> [m,H4,W4]; each prototype is embedded by a 3-layer
  /// MLP and dotted against every mask-feature pixel.
  ag::Var<T> mask_logits(const ag::Var<T>& prototypes,
                         const ag::Var<T>& mask_features) const {
    const auto& r4 = mask_features.value();
    check(r4.rank() == 3 && prototypes.value().dim(1) == r4.dim(0),
          "mask_logits: channel mismatch");
    const int m = prototypes.value().dim(0);
    const int h4 = r4.dim(1), w4 = r4.dim(2);
    ag::Var<T> embed = mask_mlp_(prototypes);
    ag::Var<T> flat = ag::reshape(mask_features, {r4.dim(0), h4 * w4});
    return ag::reshape(ag::matmul(embed, flat), {m, h4, w4});
  }

  PredictionSet<T> predict_set(const ag::Var<T>& prototypes,
                               const ag::Var<T>& mask_features) const {
    return {classify(prototypes), mask_logits(prototypes, mask_features)};
  }

 private:
  nn::Mlp<T> cls_mlp_;
  nn::Mlp<T> mask_mlp_;
};

/// F_seg[h,w] = sum_q softmax(O_cls[q])[change] * sigmoid(O_mask[q,h,w]);
/// the no-change channel is dropped. Inference-side, plain tensors.
template <typename T>
Tensor<T> combine_drop_null(const Tensor<T>& cls_logits, const Tensor<T>& mask_logits) {
  check(cls_logits.rank() == 2 && cls_logits.dim(1) == kNumClasses &&
            mask_logits.rank() == 3 && cls_logits.dim(0) == mask_logits.dim(0),
        "combine_drop_null: shape mismatch");
  const int m = cls_logits.dim(0);
  const int h = mask_logits.dim(1), w = mask_logits.dim(2);
  Tensor<T> out({h, w});
  for (int q = 0; q < m; ++q) {
    const T a = cls_logits.at(q, kChangeClass);
    const T b = cls_logits.at(q, kNullClass);
    const T mx = std::max(a, b);
    const T p_change = std::exp(a - mx) / (std::exp(a - mx) + std::exp(b - mx));
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const T s = T(1) / (T(1) + std::exp(-mask_logits.at(q, i, j)));
        out.at(i, j) += p_change * s;
      }
  }
  return out;
}

/// Per-image min-max normalization onto [0,1]; a constant map (max == min)
/// yields all zeros, declaring "no change".
template <typename T>
Tensor<T> normalize_minmax(const Tensor<T>& fseg) {
  check(fseg.all_finite(), "normalize_minmax: non-finite input");
  T lo = fseg[0], hi = fseg[0];
  for (int64_t i = 1; i < fseg.numel(); ++i) {
    lo = std::min(lo, fseg[i]);
    hi = std::max(hi, fseg[i]);
  }
  Tensor<T> out(fseg.shape());
  if (hi == lo) return out;
  const T range = hi - lo;
  for (int64_t i = 0; i < fseg.numel(); ++i) out[i] = (fseg[i] - lo) / range;
  return out;
}

/// Fixed-threshold detection on the normalized map.
template <typename T>
Tensor<uint8_t> threshold_map(const Tensor<T>& fseg_norm, double threshold) {
  check(threshold > 0.0 && threshold < 1.0, "threshold_map: T must lie in (0,1)");
  Tensor<uint8_t> out(fseg_norm.shape());
  for (int64_t i = 0; i < fseg_norm.numel(); ++i)
    out[i] = fseg_norm[i] > static_cast<T>(threshold) ? 1 : 0;
  return out;
}

}  // namespace cdmask
