// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string>
#include <vector>

#include "cdmask/change_extractor.hpp"
#include "cdmask/nn.hpp"

namespace cdmask {

/// Pixel-decoder outputs: coarse-to-fine transformer-decoder inputs at
/// strides 32/16/8 plus the high-resolution stride-4 mask features.
template <typename T>
struct RefinedFeatures {
  std::array<ag::Var<T>, 3> decoder_levels;  // strides 32, 16, 8
  ag::Var<T> mask_features;                  // stride 4
  std::array<int, 3> level_h{};
  std::array<int, 3> level_w{};
  static constexpr std::array<int, 3> kStrides{32, 16, 8};
};

struct PixelDecoderConfig {
  enum class Kind { kDeformable, kFpn };
  Kind kind = Kind::kDeformable;
  int layers = 3;  // deformable encoder layers (0 = projection only)
  int heads = 8;
  int points = 4;  // sampling points per level per head
  int ffn_mult = 2;

  void validate(int channels) const {
    check(layers >= 0, "PixelDecoderConfig: layers must be >= 0");
    check(heads >= 1 && channels % heads == 0,
          "PixelDecoderConfig: heads must divide channels");
    check(points >= 1, "PixelDecoderConfig: points must be >= 1");
  }
};

/// One self deformable-attention encoder layer over multi-level tokens.
template <typename T>
class DeformableLayer {
 public:
  DeformableLayer() = default;
  DeformableLayer(nn::ParamStore<T>& ps, const std::string& name, int c, int heads,
                  int levels, int points, int ffn_mult, Rng& rng)
      : heads_(heads), levels_(levels), points_(points) {
    const int lp = heads * levels * points;
    offset_fc_ = nn::Linear<T>(ps, name + ".offsets", c, lp * 2, rng);
    attn_fc_ = nn::Linear<T>(ps, name + ".attn", c, lp, rng);
    value_fc_ = nn::Linear<T>(ps, name + ".value", c, c, rng);
    out_fc_ = nn::Linear<T>(ps, name + ".out", c, c, rng);
    norm1_ = nn::LayerNorm<T>(ps, name + ".norm1", c);
    norm2_ = nn::LayerNorm<T>(ps, name + ".norm2", c);
    ffn1_ = nn::Linear<T>(ps, name + ".ffn1", c, c * ffn_mult, rng);
    ffn2_ = nn::Linear<T>(ps, name + ".ffn2", c * ffn_mult, c, rng);

    // Offset head starts at a per-head ring of sampling points and the
    // attention head starts uniform: zero weights, structured biases.
    offset_fc_.w.value().fill(T(0));
    attn_fc_.w.value().fill(T(0));
    Tensor<T>& ob = offset_fc_.b.value();
    for (int h = 0; h < heads; ++h) {
      const double theta = 2.0 * M_PI * h / heads;
      for (int l = 0; l < levels; ++l)
        for (int p = 0; p < points; ++p) {
          const int flat = (h * levels + l) * points + p;
          ob[flat * 2] = static_cast<T>((p + 1) * std::cos(theta));
          ob[flat * 2 + 1] = static_cast<T>((p + 1) * std::sin(theta));
        }
    }
  }

  ag::Var<T> operator()(const ag::Var<T>& src, const Tensor<T>& pos,
                        const Tensor<T>& refs,
                        const std::vector<ag::LevelShape>& shapes) const {
    ag::Var<T> xn = norm1_(src);
    ag::Var<T> q = ag::add_const(xn, pos);
    ag::Var<T> offsets = offset_fc_(q);
    ag::Var<T> attn_logits = attn_fc_(q);
    // Softmax over (levels x points) per head.
    const int group = levels_ * points_;
    std::vector<ag::Var<T>> per_head;
    per_head.reserve(heads_);
    for (int h = 0; h < heads_; ++h)
      per_head.push_back(ag::softmax_rows(ag::slice_cols(attn_logits, h * group, group)));
    ag::Var<T> attn = ag::concat_cols(per_head);
    ag::Var<T> value = value_fc_(xn);
    ag::Var<T> sampled = ag::ms_deform_sample(value, offsets, attn, refs, shapes, heads_);
    ag::Var<T> x = ag::add(src, out_fc_(sampled));
    xn = norm2_(x);
    return ag::add(x, ffn2_(ag::relu(ffn1_(xn))));
  }

 private:
  int heads_ = 8, levels_ = 3, points_ = 4;
  nn::Linear<T> offset_fc_, attn_fc_, value_fc_, out_fc_;
  nn::LayerNorm<T> norm1_, norm2_;
  nn::Linear<T> ffn1_, ffn2_;
};

template <typename T>
class PixelDecoder {
 public:
  PixelDecoder(nn::ParamStore<T>& ps, int channels, const PixelDecoderConfig& cfg,
               Rng& rng)
      : cfg_(cfg), channels_(channels) {
    cfg.validate(channels);
    for (int i = 0; i < 3; ++i)
      input_proj_[i] = nn::Conv2d<T>(ps, "pixel_decoder.input_proj" + std::to_string(i),
                                     channels, channels, 1, 1, 0, rng);
    if (cfg.kind == PixelDecoderConfig::Kind::kDeformable) {
      level_embed_ = ps.add("pixel_decoder.level_embed",
                            nn::init::normal<T>({3, channels}, 0.0, 1.0, rng));
      for (int l = 0; l < cfg.layers; ++l)
        layers_.emplace_back(ps, "pixel_decoder.layer" + std::to_string(l), channels,
                             cfg.heads, 3, cfg.points, cfg.ffn_mult, rng);
    } else {
      for (int i = 0; i < 3; ++i) {
        fpn_out_[i] = nn::Conv2d<T>(ps, "pixel_decoder.fpn_out" + std::to_string(i),
                                    channels, channels, 3, 1, 1, rng);
        fpn_gn_[i] = nn::GroupNorm<T>(ps, "pixel_decoder.fpn_gn" + std::to_string(i),
                                      channels, std::min(8, channels));
      }
    }
    lateral4_ = nn::Conv2d<T>(ps, "pixel_decoder.lateral4", channels, channels, 1, 1, 0,
                              rng);
    mask_conv_ = nn::Conv2d<T>(ps, "pixel_decoder.mask_conv", channels, channels, 3, 1,
                               1, rng);
  }

  /// Refines strides {32,16,8} (deformable self-attention or FPN) and fuses
  /// the stride-4 input with the refined stride-8 map into mask features.
  RefinedFeatures<T> refine(const ChangeRepresentation<T>& rep) const {
    RefinedFeatures<T> out;
    // rep.levels are fine-to-coarse (4,8,16,32); decoder order is 32,16,8.
    std::array<ag::Var<T>, 3> proj;
    for (int i = 0; i < 3; ++i) {
      const auto& src = rep.levels[3 - i];
      proj[i] = input_proj_[i](src);
      out.level_h[i] = src.value().dim(1);
      out.level_w[i] = src.value().dim(2);
    }

    if (cfg_.kind == PixelDecoderConfig::Kind::kDeformable) {
      std::vector<ag::LevelShape> shapes;
      int total = 0;
      for (int i = 0; i < 3; ++i) {
        shapes.push_back({out.level_h[i], out.level_w[i]});
        total += out.level_h[i] * out.level_w[i];
      }
      std::vector<ag::Var<T>> tok_parts;
      for (int i = 0; i < 3; ++i) tok_parts.push_back(ag::chw_to_tokens(proj[i]));
      // Stack level tokens into one [N,C] matrix.
      ag::Var<T> src = stack_tokens(tok_parts, total);

      Tensor<T> pos({total, channels_});
      Tensor<T> refs({total, 2});
      {
        int off = 0;
        for (int i = 0; i < 3; ++i) {
          const int Hl = out.level_h[i], Wl = out.level_w[i];
          Tensor<T> sine = nn::sine_pos_embed_2d<T>(Hl, Wl, channels_);
          for (int h = 0; h < Hl; ++h)
            for (int w = 0; w < Wl; ++w) {
              const int tok = off + h * Wl + w;
              for (int c = 0; c < channels_; ++c)
                pos.at(tok, c) = sine.at(h * Wl + w, c) + level_embed_.value().at(i, c);
              refs.at(tok, 0) = static_cast<T>((w + 0.5) / Wl);
              refs.at(tok, 1) = static_cast<T>((h + 0.5) / Hl);
            }
          off += Hl * Wl;
        }
      }
      for (const auto& layer : layers_) src = layer(src, pos, refs, shapes);

      int off = 0;
      for (int i = 0; i < 3; ++i) {
        const int n = out.level_h[i] * out.level_w[i];
        out.decoder_levels[i] =
            ag::tokens_to_chw(ag::slice_rows(src, off, n), out.level_h[i], out.level_w[i]);
        off += n;
      }
    } else {
      // FPN: lateral projections with top-down upsample-add, then output convs.
      ag::Var<T> p = proj[0];
      out.decoder_levels[0] = ag::relu(fpn_gn_[0](fpn_out_[0](p)));
      for (int i = 1; i < 3; ++i) {
        p = ag::add(proj[i], ag::upsample_bilinear(p, out.level_h[i], out.level_w[i]));
        out.decoder_levels[i] = ag::relu(fpn_gn_[i](fpn_out_[i](p)));
      }
    }

    const auto& f4 = rep.levels[0];
    const int h4 = f4.value().dim(1), w4 = f4.value().dim(2);
    ag::Var<T> fused =
        ag::add(lateral4_(f4), ag::upsample_bilinear(out.decoder_levels[2], h4, w4));
    out.mask_features = mask_conv_(fused);
    return out;
  }

  const nn::Conv2d<T>& input_proj(int i) const { return input_proj_[i]; }

 private:
  static ag::Var<T> stack_tokens(const std::vector<ag::Var<T>>& parts, int total) {
    // Row-concat of [Ni,C] token blocks via transpose-free copy.
    const int C = parts[0].value().dim(1);
    Tensor<T> out({total, C});
    int64_t off = 0;
    for (const auto& p : parts) {
      std::copy(p.value().data(), p.value().data() + p.value().numel(),
                out.data() + off);
      off += p.value().numel();
    }
    std::vector<int> sizes;
    for (const auto& p : parts) sizes.push_back(p.value().dim(0));
    return ag::Var<T>::make(std::move(out), parts,
                            [parts, sizes, C](typename ag::Var<T>::Node& n) mutable {
      int64_t off = 0;
      for (size_t k = 0; k < parts.size(); ++k) {
        Tensor<T> g({sizes[k], C});
        std::copy(n.grad.data() + off, n.grad.data() + off + g.numel(), g.data());
        parts[k].accum_grad(g);
        off += g.numel();
      }
    });
  }

  PixelDecoderConfig cfg_;
  int channels_;
  std::array<nn::Conv2d<T>, 3> input_proj_;
  ag::Var<T> level_embed_;
  std::vector<DeformableLayer<T>> layers_;
  std::array<nn::Conv2d<T>, 3> fpn_out_;
  std::array<nn::GroupNorm<T>, 3> fpn_gn_;
  nn::Conv2d<T> lateral4_;
  nn::Conv2d<T> mask_conv_;
};

}  // namespace cdmask
