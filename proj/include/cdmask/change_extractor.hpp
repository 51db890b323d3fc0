// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string>
#include <vector>

#include "cdmask/backbone.hpp"
#include "cdmask/nn.hpp"

namespace cdmask {

/// Fused bi-temporal change representations, one map per pyramid level
/// (strides 4/8/16/32), all projected to the unified channel count.
template <typename T>
struct ChangeRepresentation {
  std::array<ag::Var<T>, 4> levels;
  static constexpr std::array<int, 4> kStrides{4, 8, 16, 32};
};

struct ExtractorConfig {
  bool spatial_weight = true;   // per-pixel gates on each temporal branch
  bool channel_weight = true;   // channel gate from the pooled coarse diff
  int dmlp_branches = 2;        // parallel branches of the channel MLP

  void validate() const {
    check(dmlp_branches >= 1, "ExtractorConfig: need at least one DMLP branch");
  }
};

/// Signed element-wise difference of two same-shaped feature maps.
template <typename T>
ag::Var<T> coarse_diff(const ag::Var<T>& f1, const ag::Var<T>& f2) {
  check(f1.value().same_shape(f2.value()), "coarse_diff: shape mismatch");
  return ag::sub(f1, f2);
}

/// Spatial-temporal convolutional attention over one pyramid level.
/// Per level: a shared DSConv turns concat(diff, branch) into per-pixel
/// gates, a pooled-diff MLP produces a channel gate, and a fusing DSConv
/// merges the two gated branches. With both gates disabled the level
/// reduces to DSConv over the plain difference.
template <typename T>
class LevelExtractor {
 public:
  LevelExtractor() = default;
  LevelExtractor(nn::ParamStore<T>& ps, const std::string& name, int channels,
                 int out_channels, const ExtractorConfig& cfg, Rng& rng)
      : cfg_(cfg), channels_(channels) {
    check(channels % cfg.dmlp_branches == 0,
          "LevelExtractor: channels not divisible by DMLP branch count");
    if (cfg.spatial_weight)
      spatial_conv_ = nn::DSConv<T>(ps, name + ".spatial", 2 * channels, channels, rng);
    if (cfg.channel_weight) {
      const int branch_out = channels / cfg.dmlp_branches;
      for (int j = 0; j < cfg.dmlp_branches; ++j)
        dmlp_.emplace_back(ps, name + ".dmlp" + std::to_string(j), channels, branch_out,
                           rng);
      channel_fc_ = nn::Linear<T>(ps, name + ".channel_fc", channels, channels, rng);
    }
    const bool plain_diff = !cfg.spatial_weight && !cfg.channel_weight;
    fuse_conv_ = nn::DSConv<T>(ps, name + ".fuse", plain_diff ? channels : 2 * channels,
                               channels, rng);
    proj_ = nn::Conv2d<T>(ps, name + ".proj", channels, out_channels, 1, 1, 0, rng);
  }

  /// sigmoid(DSConv(diff ++ branch)) in (0,1), same spatial size.
  ag::Var<T> spatial_weight(const ag::Var<T>& diff, const ag::Var<T>& branch) const {
    check(cfg_.spatial_weight, "spatial_weight: disabled by configuration");
    return ag::sigmoid(spatial_conv_(ag::concat_channels(diff, branch)));
  }

  /// Channel gate in (0,1)^C from the globally pooled diff: parallel
  /// linear+ReLU branches, concatenated, then linear and sigmoid.
  ag::Var<T> temporal_channel_weight(const ag::Var<T>& diff) const {
    check(cfg_.channel_weight, "temporal_channel_weight: disabled by configuration");
    ag::Var<T> pooled = ag::gap(diff);
    std::vector<ag::Var<T>> branches;
    branches.reserve(dmlp_.size());
    for (const auto& fc : dmlp_) branches.push_back(ag::relu(fc(pooled)));
    return ag::sigmoid(channel_fc_(ag::concat_vecs(branches)));
  }

  /// DSConv((Wc*W1*F1) ++ (Wc*W2*F2)), still at the level's native width.
  ag::Var<T> fuse(const ag::Var<T>& f1, const ag::Var<T>& f2, const ag::Var<T>& w1,
                  const ag::Var<T>& w2, const ag::Var<T>& wc) const {
    ag::Var<T> b1 = f1, b2 = f2;
    if (w1.defined()) b1 = ag::mul(b1, w1);
    if (w2.defined()) b2 = ag::mul(b2, w2);
    if (wc.defined()) {
      b1 = ag::mul_channel(b1, wc);
      b2 = ag::mul_channel(b2, wc);
    }
    return fuse_conv_(ag::concat_channels(b1, b2));
  }

  /// Whole per-level pipeline including the unifying projection.
  ag::Var<T> operator()(const ag::Var<T>& f1, const ag::Var<T>& f2) const {
    check(f1.value().same_shape(f2.value()), "LevelExtractor: shape mismatch");
    ag::Var<T> diff = coarse_diff(f1, f2);
    if (!cfg_.spatial_weight && !cfg_.channel_weight)
      return proj_(fuse_conv_(diff));
    ag::Var<T> w1, w2, wc;
    if (cfg_.spatial_weight) {
      w1 = spatial_weight(diff, f1);
      w2 = spatial_weight(diff, f2);
    }
    if (cfg_.channel_weight) wc = temporal_channel_weight(diff);
    return proj_(fuse(f1, f2, w1, w2, wc));
  }

  const nn::DSConv<T>& fuse_conv() const { return fuse_conv_; }
  const nn::Conv2d<T>& projection() const { return proj_; }

 private:
  ExtractorConfig cfg_;
  int channels_ = 0;
  nn::DSConv<T> spatial_conv_;
  std::vector<nn::Linear<T>> dmlp_;
  nn::Linear<T> channel_fc_;
  nn::DSConv<T> fuse_conv_;
  nn::Conv2d<T> proj_;
};

template <typename T>
class ChangeExtractor {
 public:
  ChangeExtractor(nn::ParamStore<T>& ps, const std::array<int, 4>& level_channels,
                  int out_channels, const ExtractorConfig& cfg, Rng& rng) {
    cfg.validate();
    for (int i = 0; i < 4; ++i)
      levels_[i] = LevelExtractor<T>(ps, "extractor.level" + std::to_string(i),
                                     level_channels[i], out_channels, cfg, rng);
  }

  ChangeRepresentation<T> extract_changes(const FeaturePyramid<T>& p1,
                                          const FeaturePyramid<T>& p2) const {
    ChangeRepresentation<T> rep;
    for (int i = 0; i < 4; ++i) {
      check(p1.levels[i].value().same_shape(p2.levels[i].value()),
            "extract_changes: pyramids not structurally identical");
      rep.levels[i] = levels_[i](p1.levels[i], p2.levels[i]);
    }
    return rep;
  }

  const LevelExtractor<T>& level(int i) const { return levels_[i]; }

 private:
  std::array<LevelExtractor<T>, 4> levels_;
};

}  // namespace cdmask
