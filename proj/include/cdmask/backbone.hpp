// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>

#include "cdmask/nn.hpp"

namespace cdmask {

/// Hierarchical features of one temporal image, fine to coarse:
/// levels[0..3] at strides 4, 8, 16, 32 of the (padded) input resolution.
template <typename T>
struct FeaturePyramid {
  std::array<ag::Var<T>, 4> levels;
  static constexpr std::array<int, 4> kStrides{4, 8, 16, 32};
};

struct BackboneConfig {
  enum class Variant { kReferenceSmall, kPluggableExternal };
  Variant variant = Variant::kReferenceSmall;
  std::array<int, 4> widths{32, 64, 128, 256};
  int in_channels = 3;
  std::string external_name;  // registry key when variant is pluggable

  void validate() const {
    check(in_channels > 0, "BackboneConfig: in_channels must be positive");
    for (size_t i = 0; i < widths.size(); ++i) {
      check(widths[i] > 0, "BackboneConfig: widths must be positive");
      if (i) check(widths[i] >= widths[i - 1], "BackboneConfig: widths must be nondecreasing");
    }
  }
};

/// Contract every backbone implementation satisfies: a 4-level pyramid at
/// strides 4/8/16/32 for an input divisible by 32.
template <typename T>
class BackboneBase {
 public:
  virtual ~BackboneBase() = default;
  virtual FeaturePyramid<T> extract(const ag::Var<T>& image) const = 0;
  virtual std::array<int, 4> level_channels() const = 0;
};

namespace detail {

template <typename T>
struct ResidualBlock {
  nn::Conv2d<T> conv1, conv2;
  nn::GroupNorm<T> gn1, gn2;

  ResidualBlock() = default;
  ResidualBlock(nn::ParamStore<T>& ps, const std::string& name, int c, Rng& rng)
      : conv1(ps, name + ".conv1", c, c, 3, 1, 1, rng),
        conv2(ps, name + ".conv2", c, c, 3, 1, 1, rng),
        gn1(ps, name + ".gn1", c, std::min(8, c)),
        gn2(ps, name + ".gn2", c, std::min(8, c)) {}

  ag::Var<T> operator()(const ag::Var<T>& x) const {
    auto h = ag::relu(gn1(conv1(x)));
    h = gn2(conv2(h));
    return ag::relu(ag::add(x, h));
  }
};

}  // namespace detail

/// Small 4-stage convolutional reference backbone: each stage is one strided
/// conv followed by two residual blocks. Stage 1 downsamples by 4, the rest
/// by 2, which yields the 4/8/16/32 stride ladder.
template <typename T>
class ReferenceBackbone : public BackboneBase<T> {
 public:
  ReferenceBackbone(nn::ParamStore<T>& ps, const std::string& name,
                    const BackboneConfig& cfg, Rng& rng)
      : widths_(cfg.widths) {
    stem_ = nn::Conv2d<T>(ps, name + ".stem", cfg.in_channels, cfg.widths[0], 7, 4, 3, rng);
    stem_gn_ = nn::GroupNorm<T>(ps, name + ".stem_gn", cfg.widths[0], std::min(8, cfg.widths[0]));
    for (int s = 1; s < 4; ++s) {
      down_[s - 1] = nn::Conv2d<T>(ps, name + ".down" + std::to_string(s),
                                   cfg.widths[s - 1], cfg.widths[s], 3, 2, 1, rng);
      down_gn_[s - 1] = nn::GroupNorm<T>(ps, name + ".down_gn" + std::to_string(s),
                                         cfg.widths[s], std::min(8, cfg.widths[s]));
    }
    for (int s = 0; s < 4; ++s)
      for (int b = 0; b < 2; ++b)
        blocks_[s][b] = detail::ResidualBlock<T>(
            ps, name + ".stage" + std::to_string(s) + ".block" + std::to_string(b),
            cfg.widths[s], rng);
  }

  FeaturePyramid<T> extract(const ag::Var<T>& image) const override {
    FeaturePyramid<T> pyr;
    ag::Var<T> x = ag::relu(stem_gn_(stem_(image)));
    x = blocks_[0][1](blocks_[0][0](x));
    pyr.levels[0] = x;
    for (int s = 1; s < 4; ++s) {
      x = ag::relu(down_gn_[s - 1](down_[s - 1](x)));
      x = blocks_[s][1](blocks_[s][0](x));
      pyr.levels[s] = x;
    }
    return pyr;
  }

  std::array<int, 4> level_channels() const override { return widths_; }

 private:
  std::array<int, 4> widths_;
  nn::Conv2d<T> stem_;
  nn::GroupNorm<T> stem_gn_;
  std::array<nn::Conv2d<T>, 3> down_;
  std::array<nn::GroupNorm<T>, 3> down_gn_;
  std::array<std::array<detail::ResidualBlock<T>, 2>, 4> blocks_;
};

/// Factory hook for external pretrained backbones: anything registered here
/// can be selected by name through BackboneConfig::external_name, as long as
/// it honors the FeaturePyramid contract.
template <typename T>
class BackboneRegistry {
 public:
  using Factory = std::function<std::unique_ptr<BackboneBase<T>>(
      nn::ParamStore<T>&, const std::string&, const BackboneConfig&, Rng&)>;

  static BackboneRegistry& instance() {
    static BackboneRegistry reg;
    return reg;
  }

  void add(const std::string& key, Factory f) { factories_[key] = std::move(f); }

  std::unique_ptr<BackboneBase<T>> create(nn::ParamStore<T>& ps, const std::string& name,
                                          const BackboneConfig& cfg, Rng& rng) const {
    auto it = factories_.find(cfg.external_name);
    check(it != factories_.end(),
          "BackboneRegistry: no external backbone registered under '" +
              cfg.external_name + "'");
    return it->second(ps, name, cfg, rng);
  }

 private:
  std::map<std::string, Factory> factories_;
};

/// Weight-shared siamese wrapper. Both temporal images are processed by the
/// same parameter set; inputs with sides not divisible by 32 are grown by
/// reflect padding before the stem (consumers crop back).
template <typename T>
class Backbone {
 public:
  Backbone(nn::ParamStore<T>& ps, const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    if (cfg.variant == BackboneConfig::Variant::kReferenceSmall)
      impl_ = std::make_unique<ReferenceBackbone<T>>(ps, "backbone", cfg, rng);
    else
      impl_ = BackboneRegistry<T>::instance().create(ps, "backbone", cfg, rng);
  }

  static int padded_extent(int n) {
    const int m = std::max(n, 32);
    return (m + 31) / 32 * 32;
  }

  FeaturePyramid<T> extract_features(const ag::Var<T>& image) const {
    const auto& v = image.value();
    check(v.rank() == 3 && v.dim(0) == cfg_.in_channels,
          "extract_features: want [" + std::to_string(cfg_.in_channels) + ",H,W] input");
    check(v.all_finite(), "extract_features: non-finite input values");
    const int H = v.dim(1), W = v.dim(2);
    const int Hp = padded_extent(H), Wp = padded_extent(W);
    ag::Var<T> x = image;
    if (Hp != H || Wp != W) x = ag::pad_bottom_right_reflect(image, Hp, Wp);
    return impl_->extract(x);
  }

  std::pair<FeaturePyramid<T>, FeaturePyramid<T>> siamese_apply(
      const ag::Var<T>& t1, const ag::Var<T>& t2) const {
    check(t1.value().same_shape(t2.value()), "siamese_apply: shape mismatch");
    return {extract_features(t1), extract_features(t2)};
  }

  std::array<int, 4> level_channels() const { return impl_->level_channels(); }
  const BackboneConfig& config() const { return cfg_; }

 private:
  BackboneConfig cfg_;
  std::unique_ptr<BackboneBase<T>> impl_;
};

}  // namespace cdmask
