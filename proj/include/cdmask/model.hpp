// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "cdmask/backbone.hpp"
#include "cdmask/change_extractor.hpp"
#include "cdmask/detector_head.hpp"
#include "cdmask/pixel_decoder.hpp"
#include "cdmask/transformer_decoder.hpp"

namespace cdmask {

struct ModelConfig {
  BackboneConfig backbone;
  ExtractorConfig extractor;
  PixelDecoderConfig pixel_decoder;
  DecoderConfig decoder;
  int channels = 128;  // unified change-representation width

  void validate() const {
    backbone.validate();
    extractor.validate();
    pixel_decoder.validate(channels);
    decoder.validate(channels);
    check(channels % 4 == 0, "ModelConfig: channels must be divisible by 4");
  }
};

template <typename T>
struct ModelOutputs {
  std::vector<PredictionSet<T>> predictions;  // initial + one per decoder block
  ag::Var<T> prototypes;                      // [m, C]
  ag::Var<T> mask_features;                   // [C, Hp/4, Wp/4]
  int input_h = 0, input_w = 0;               // caller-provided size
  int padded_h = 0, padded_w = 0;             // size after /32 padding
};

template <typename T>
struct PredictOutput {
  Tensor<uint8_t> change_mask;  // [H, W], values in {0,1}
  Tensor<T> score_map;          // [H, W], min-max normalized F_seg
};

/// The full mask-classification change detector: weight-shared siamese
/// backbone, spatial-temporal convolutional-attention change extractor,
/// deformable-attention pixel decoder, masked-attention + scene-guided
/// axial-attention transformer decoder, and the normalized detector.
template <typename T>
class CDMaskFormer {
 public:
  CDMaskFormer(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(seed);
    backbone_ = std::make_unique<Backbone<T>>(params_, cfg.backbone, rng);
    extractor_ = std::make_unique<ChangeExtractor<T>>(
        params_, backbone_->level_channels(), cfg.channels, cfg.extractor, rng);
    pixel_decoder_ =
        std::make_unique<PixelDecoder<T>>(params_, cfg.channels, cfg.pixel_decoder, rng);
    decoder_ =
        std::make_unique<TransformerDecoder<T>>(params_, cfg.channels, cfg.decoder, rng);
    head_ = std::make_unique<DetectorHead<T>>(params_, cfg.channels, rng);
  }

  ModelOutputs<T> forward(const ag::Var<T>& t1, const ag::Var<T>& t2) const {
    check(t1.value().same_shape(t2.value()), "forward: temporal shapes differ");
    ModelOutputs<T> out;
    out.input_h = t1.value().dim(1);
    out.input_w = t1.value().dim(2);
    auto [p1, p2] = backbone_->siamese_apply(t1, t2);
    ChangeRepresentation<T> changes = extractor_->extract_changes(p1, p2);
    RefinedFeatures<T> refined = pixel_decoder_->refine(changes);
    DecodeResult<T> dec = decoder_->decode(refined, *head_);
    out.predictions = std::move(dec.predictions);
    out.prototypes = dec.prototypes;
    out.mask_features = refined.mask_features;
    out.padded_h = refined.mask_features.value().dim(1) * 4;
    out.padded_w = refined.mask_features.value().dim(2) * 4;
    return out;
  }

  ModelOutputs<T> forward(const Tensor<T>& t1, const Tensor<T>& t2) const {
    return forward(ag::constant(t1), ag::constant(t2));
  }

  /// Full inference: forward, combine + drop the no-change channel, 4x
  /// bilinear upsample, crop away the /32 padding, min-max normalize per
  /// image, and threshold.
  PredictOutput<T> predict(const Tensor<T>& t1, const Tensor<T>& t2,
                           double threshold = 0.5) const {
    typename ag::Var<T>::NoGradGuard guard;
    ModelOutputs<T> out = forward(t1, t2);
    const auto& last = out.predictions.back();
    Tensor<T> fseg =
        combine_drop_null(last.cls_logits.value(), last.mask_logits.value());
    Tensor<T> full = ag::resize_bilinear(
        fseg.reshaped({1, fseg.dim(0), fseg.dim(1)}), out.padded_h, out.padded_w);
    // Crop to the caller's size before normalizing so padding cannot shift
    // the per-image range.
    Tensor<T> cropped({out.input_h, out.input_w});
    for (int i = 0; i < out.input_h; ++i)
      for (int j = 0; j < out.input_w; ++j)
        cropped.at(i, j) = full.at(0, i, j);
    PredictOutput<T> res;
    res.score_map = normalize_minmax(cropped);
    res.change_mask = threshold_map(res.score_map, threshold);
    return res;
  }

  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }
  const ModelConfig& config() const { return cfg_; }

  const Backbone<T>& backbone() const { return *backbone_; }
  const ChangeExtractor<T>& extractor() const { return *extractor_; }
  const PixelDecoder<T>& pixel_decoder() const { return *pixel_decoder_; }
  const TransformerDecoder<T>& decoder() const { return *decoder_; }
  const DetectorHead<T>& head() const { return *head_; }

 private:
  ModelConfig cfg_;
  nn::ParamStore<T> params_;
  std::unique_ptr<Backbone<T>> backbone_;
  std::unique_ptr<ChangeExtractor<T>> extractor_;
  std::unique_ptr<PixelDecoder<T>> pixel_decoder_;
  std::unique_ptr<TransformerDecoder<T>> decoder_;
  std::unique_ptr<DetectorHead<T>> head_;
};

}  // namespace cdmask
