// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cdmask/detector_head.hpp"
#include "cdmask/nn.hpp"
#include "cdmask/pixel_decoder.hpp"

namespace cdmask {

struct DecoderConfig {
  enum class Variant { kMab3Saab, kMab3, kMab4, kMab3SaabV1 };
  Variant variant = Variant::kMab3Saab;
  int num_queries = 5;
  int heads = 8;
  int ffn_mult = 2;
  int rounds = 1;  // repetitions of the block sequence

  void validate(int channels) const {
    check(num_queries >= 1, "DecoderConfig: need at least one change query");
    check(heads >= 1 && channels % heads == 0, "DecoderConfig: heads must divide channels");
    check(rounds >= 1, "DecoderConfig: rounds must be >= 1");
  }

  int blocks_per_round() const {
    return variant == Variant::kMab3 ? 3 : 4;
  }
};

/// Scene gate: G = sigmoid(Linear(GlobalAvgPool(R4))), entries in (0,1).
template <typename T>
ag::Var<T> scene_context(const ag::Var<T>& mask_features, const nn::Linear<T>& fc) {
  check(mask_features.value().all_finite(), "scene_context: non-finite input");
  return ag::sigmoid(fc(ag::gap(mask_features)));
}

/// Axial key compression of [C,H,W]: width-mean K_h [H,C], height-mean K_w [W,C].
template <typename T>
std::pair<ag::Var<T>, ag::Var<T>> axial_compress(const ag::Var<T>& k_chw) {
  return {ag::mean_over_width(k_chw), ag::mean_over_height(k_chw)};
}

/// Tandem scene-guided axial attention.
///   A_h = softmax_H(Q (G*K_h)^T / sqrt(C)), A_w = softmax_W(Q (G*K_w)^T / sqrt(C))
///   out[q] = sum_h A_h[q,h] * (sum_w A_w[q,w] * V[:,h,w])
/// Pass an undefined G for plain axial attention (the v1 ablation).
template <typename T>
ag::Var<T> scene_guided_axial_attention(const ag::Var<T>& q, const ag::Var<T>& k_h,
                                        const ag::Var<T>& k_w, const ag::Var<T>& v_chw,
                                        const ag::Var<T>& gate) {
  const int C = q.value().dim(1);
  check(k_h.value().dim(1) == C && k_w.value().dim(1) == C && v_chw.value().dim(0) == C,
        "scene_guided_axial_attention: channel mismatch");
  ag::Var<T> kh = gate.defined() ? ag::mul_rowvec(k_h, gate) : k_h;
  ag::Var<T> kw = gate.defined() ? ag::mul_rowvec(k_w, gate) : k_w;
  const double s = 1.0 / std::sqrt(static_cast<double>(C));
  ag::Var<T> a_h = ag::softmax_rows(ag::scale(ag::matmul(q, ag::transpose(kh)), s));
  ag::Var<T> a_w = ag::softmax_rows(ag::scale(ag::matmul(q, ag::transpose(kw)), s));
  ag::Var<T> v_whc = ag::chw_to_w_hc(v_chw);       // [W, H*C]
  ag::Var<T> v_w = ag::matmul(a_w, v_whc);         // [m, H*C]
  return ag::rowwise_block_contract(a_h, v_w, C);  // [m, C]
}

/// Boolean attention mask from the previous layer's mask prediction:
/// sigmoid, bilinear-resize to the level grid, keep positions above 0.5.
/// A query with no kept position falls back to attending everywhere.
template <typename T>
Tensor<T> attention_mask_from_logits(const Tensor<T>& mask_logits, int Hl, int Wl) {
  const int m = mask_logits.dim(0);
  Tensor<T> probs(mask_logits.shape());
  for (int64_t i = 0; i < probs.numel(); ++i)
    probs[i] = T(1) / (T(1) + std::exp(-mask_logits[i]));
  Tensor<T> resized = ag::resize_bilinear(probs, Hl, Wl);  // queries act as channels
  const T ninf = -std::numeric_limits<T>::infinity();
  Tensor<T> out({m, Hl * Wl});
  for (int q = 0; q < m; ++q) {
    bool any = false;
    for (int p = 0; p < Hl * Wl; ++p) {
      const bool keep = resized[static_cast<int64_t>(q) * Hl * Wl + p] > T(0.5);
      out.at(q, p) = keep ? T(0) : ninf;
      any = any || keep;
    }
    if (!any)
      for (int p = 0; p < Hl * Wl; ++p) out.at(q, p) = T(0);
  }
  return out;
}

/// Masked attention block: masked cross-attention, then query self-attention,
/// then FFN, each with residual + LayerNorm.
template <typename T>
class MaskedAttentionBlock {
 public:
  MaskedAttentionBlock() = default;
  MaskedAttentionBlock(nn::ParamStore<T>& ps, const std::string& name, int c, int heads,
                       int ffn_mult, Rng& rng)
      : cross_(ps, name + ".cross", c, heads, rng),
        self_(ps, name + ".self", c, heads, rng),
        norm1_(ps, name + ".norm1", c),
        norm2_(ps, name + ".norm2", c),
        norm3_(ps, name + ".norm3", c),
        ffn1_(ps, name + ".ffn1", c, c * ffn_mult, rng),
        ffn2_(ps, name + ".ffn2", c * ffn_mult, c, rng) {}

  // Pre-norm residual layout: a zero-initialized output projection makes
  // every sublayer an exact identity.
  ag::Var<T> operator()(const ag::Var<T>& queries, const ag::Var<T>& query_pos,
                        const ag::Var<T>& feat_tokens, const Tensor<T>& pos2d,
                        const ag::Var<T>& level_embed,
                        const Tensor<T>* attn_mask) const {
    ag::Var<T> k_in = ag::add_const(feat_tokens, pos2d);
    if (level_embed.defined()) k_in = ag::add_rowvec(k_in, level_embed);
    ag::Var<T> xn = norm1_(queries);
    ag::Var<T> x =
        ag::add(queries, cross_(ag::add(xn, query_pos), k_in, feat_tokens, attn_mask));
    xn = norm2_(x);
    ag::Var<T> q2 = ag::add(xn, query_pos);
    x = ag::add(x, self_(q2, q2, xn));
    xn = norm3_(x);
    return ag::add(x, ffn2_(ag::relu(ffn1_(xn))));
  }

 private:
  nn::MultiheadAttention<T> cross_, self_;
  nn::LayerNorm<T> norm1_, norm2_, norm3_;
  nn::Linear<T> ffn1_, ffn2_;
};

/// SAAB: the MAB layout with cross-attention replaced by single-head
/// scene-guided axial attention against the stride-4 features.
template <typename T>
class SceneAxialBlock {
 public:
  SceneAxialBlock() = default;
  SceneAxialBlock(nn::ParamStore<T>& ps, const std::string& name, int c, int heads,
                  int ffn_mult, bool scene_guided, Rng& rng)
      : q_fc_(ps, name + ".q", c, c, rng),
        k_fc_(ps, name + ".k", c, c, rng),
        v_fc_(ps, name + ".v", c, c, rng),
        out_fc_(ps, name + ".out", c, c, rng),
        scene_fc_(ps, name + ".scene", c, c, rng),
        self_(ps, name + ".self", c, heads, rng),
        norm1_(ps, name + ".norm1", c),
        norm2_(ps, name + ".norm2", c),
        norm3_(ps, name + ".norm3", c),
        ffn1_(ps, name + ".ffn1", c, c * ffn_mult, rng),
        ffn2_(ps, name + ".ffn2", c * ffn_mult, c, rng),
        scene_guided_(scene_guided) {}

  ag::Var<T> gate(const ag::Var<T>& mask_features) const {
    return scene_context(mask_features, scene_fc_);
  }

  ag::Var<T> operator()(const ag::Var<T>& queries, const ag::Var<T>& query_pos,
                        const ag::Var<T>& mask_features) const {
    const auto& r4 = mask_features.value();
    const int h = r4.dim(1), w = r4.dim(2);
    ag::Var<T> tokens = ag::chw_to_tokens(mask_features);
    Tensor<T> pos2d = nn::sine_pos_embed_2d<T>(h, w, r4.dim(0));
    ag::Var<T> k_tokens = k_fc_(ag::add_const(tokens, pos2d));
    auto [k_h, k_w] = axial_compress(ag::tokens_to_chw(k_tokens, h, w));
    ag::Var<T> v_chw = ag::tokens_to_chw(v_fc_(tokens), h, w);
    ag::Var<T> xn = norm1_(queries);
    ag::Var<T> q = q_fc_(ag::add(xn, query_pos));
    ag::Var<T> g;
    if (scene_guided_) g = gate(mask_features);
    ag::Var<T> upd = out_fc_(scene_guided_axial_attention(q, k_h, k_w, v_chw, g));
    ag::Var<T> x = ag::add(queries, upd);
    xn = norm2_(x);
    ag::Var<T> q2 = ag::add(xn, query_pos);
    x = ag::add(x, self_(q2, q2, xn));
    xn = norm3_(x);
    return ag::add(x, ffn2_(ag::relu(ffn1_(xn))));
  }

  bool scene_guided() const { return scene_guided_; }

 private:
  nn::Linear<T> q_fc_, k_fc_, v_fc_, out_fc_, scene_fc_;
  nn::MultiheadAttention<T> self_;
  nn::LayerNorm<T> norm1_, norm2_, norm3_;
  nn::Linear<T> ffn1_, ffn2_;
  bool scene_guided_ = true;
};

template <typename T>
struct DecodeResult {
  std::vector<PredictionSet<T>> predictions;  // initial + one per block
  ag::Var<T> prototypes;                      // final query state [m,C]
};

/// Updates the learnable change queries against the refined features:
/// MAB at strides 32/16/8 and, depending on the variant, a fourth block at
/// stride 4 (SAAB, plain-axial SAAB, or a fourth MAB). Prediction heads run
/// before the first block and after every block; each prediction supplies
/// the attention mask for the next MAB.
template <typename T>
class TransformerDecoder {
 public:
  TransformerDecoder(nn::ParamStore<T>& ps, int channels, const DecoderConfig& cfg,
                     Rng& rng)
      : cfg_(cfg), channels_(channels) {
    cfg.validate(channels);
    query_feat_ = ps.add("decoder.query_feat",
                         nn::init::normal<T>({cfg.num_queries, channels}, 0.0, 1.0, rng));
    query_pos_ = ps.add("decoder.query_pos",
                        nn::init::normal<T>({cfg.num_queries, channels}, 0.0, 1.0, rng));
    level_embed_ = ps.add("decoder.level_embed",
                          nn::init::normal<T>({4, channels}, 0.0, 1.0, rng));
    const int n_mabs = cfg.variant == DecoderConfig::Variant::kMab4 ? 4 : 3;
    for (int i = 0; i < n_mabs; ++i)
      mabs_.emplace_back(ps, "decoder.mab" + std::to_string(i), channels, cfg.heads,
                         cfg.ffn_mult, rng);
    if (cfg.variant == DecoderConfig::Variant::kMab3Saab ||
        cfg.variant == DecoderConfig::Variant::kMab3SaabV1)
      saab_ = SceneAxialBlock<T>(
          ps, "decoder.saab", channels, cfg.heads, cfg.ffn_mult,
          cfg.variant == DecoderConfig::Variant::kMab3Saab, rng);
  }

  DecodeResult<T> decode(const RefinedFeatures<T>& refined,
                         const DetectorHead<T>& head) const {
    DecodeResult<T> res;
    ag::Var<T> q = query_feat_;
    res.predictions.push_back(head.predict_set(q, refined.mask_features));

    std::array<ag::Var<T>, 3> tokens;
    std::array<Tensor<T>, 3> pos;
    for (int i = 0; i < 3; ++i) {
      tokens[i] = ag::chw_to_tokens(refined.decoder_levels[i]);
      pos[i] = nn::sine_pos_embed_2d<T>(refined.level_h[i], refined.level_w[i], channels_);
    }
    const auto& r4 = refined.mask_features.value();
    const int h4 = r4.dim(1), w4 = r4.dim(2);
    ag::Var<T> tokens4, lvl4_embed;
    Tensor<T> pos4;
    const bool has_mab4 = cfg_.variant == DecoderConfig::Variant::kMab4;
    if (has_mab4) {
      tokens4 = ag::chw_to_tokens(refined.mask_features);
      pos4 = nn::sine_pos_embed_2d<T>(h4, w4, channels_);
    }

    for (int round = 0; round < cfg_.rounds; ++round) {
      for (int b = 0; b < cfg_.blocks_per_round(); ++b) {
        const Tensor<T>& last_mask = res.predictions.back().mask_logits.value();
        if (b < 3) {
          Tensor<T> attn_mask = attention_mask_from_logits(
              last_mask, refined.level_h[b], refined.level_w[b]);
          q = mabs_[b](q, query_pos_, tokens[b], pos[b], level_row(b), &attn_mask);
        } else if (has_mab4) {
          Tensor<T> attn_mask = attention_mask_from_logits(last_mask, h4, w4);
          q = mabs_[3](q, query_pos_, tokens4, pos4, level_row(3), &attn_mask);
        } else {
          q = saab_(q, query_pos_, refined.mask_features);
        }
        res.predictions.push_back(head.predict_set(q, refined.mask_features));
      }
    }
    res.prototypes = q;
    return res;
  }

  const ag::Var<T>& query_feat() const { return query_feat_; }
  const ag::Var<T>& query_pos() const { return query_pos_; }
  const SceneAxialBlock<T>& saab() const { return saab_; }
  const DecoderConfig& config() const { return cfg_; }

 private:
  ag::Var<T> level_row(int i) const {
    return ag::reshape(ag::slice_rows(level_embed_, i, 1), {channels_});
  }

  DecoderConfig cfg_;
  int channels_;
  ag::Var<T> query_feat_, query_pos_, level_embed_;
  std::vector<MaskedAttentionBlock<T>> mabs_;
  SceneAxialBlock<T> saab_;
};

}  // namespace cdmask
