// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "cdmask/ops.hpp"
#include "cdmask/random.hpp"

namespace cdmask::nn {

template <typename T>
struct NamedParam {
  std::string name;
  ag::Var<T> var;
};

/// Flat registry of learnable parameters. Modules register here at
/// construction; the optimizer and checkpoint code iterate it by name.
/// Registration order is deterministic and defines checkpoint layout.
template <typename T>
class ParamStore {
 public:
  ag::Var<T> add(const std::string& name, Tensor<T> init) {
    ag::Var<T> v(std::move(init), true);
    params_.push_back({name, v});
    return v;
  }

  std::vector<NamedParam<T>>& params() { return params_; }
  const std::vector<NamedParam<T>>& params() const { return params_; }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.var.value().numel();
    return n;
  }

 private:
  std::vector<NamedParam<T>> params_;
};

namespace init {

template <typename T>
Tensor<T> normal(std::vector<int> shape, double mean, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(rng.normal(mean, stddev));
  return t;
}

template <typename T>
Tensor<T> uniform(std::vector<int> shape, double a, double b, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(a, b));
  return t;
}

template <typename T>
Tensor<T> kaiming(std::vector<int> shape, int fan_in, Rng& rng) {
  return normal<T>(std::move(shape), 0.0, std::sqrt(2.0 / fan_in), rng);
}

template <typename T>
Tensor<T> xavier(std::vector<int> shape, int fan_in, int fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  return uniform<T>(std::move(shape), -bound, bound, rng);
}

}  // namespace init

template <typename T>
struct Linear {
  ag::Var<T> w, b;

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, int in, int out, Rng& rng) {
    w = ps.add(name + ".weight", init::xavier<T>({out, in}, in, out, rng));
    b = ps.add(name + ".bias", Tensor<T>({out}));
  }

  ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::linear(x, w, b); }
};

template <typename T>
struct Conv2d {
  ag::Var<T> w, b;
  int stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(ParamStore<T>& ps, const std::string& name, int cin, int cout, int k,
         int stride_, int pad_, Rng& rng)
      : stride(stride_), pad(pad_) {
    w = ps.add(name + ".weight", init::kaiming<T>({cout, cin, k, k}, cin * k * k, rng));
    b = ps.add(name + ".bias", Tensor<T>({cout}));
  }

  ag::Var<T> operator()(const ag::Var<T>& x) const {
    return ag::conv2d(x, w, b, stride, pad);
  }
};

template <typename T>
struct DepthwiseConv2d {
  ag::Var<T> w, b;
  int pad = 1;

  DepthwiseConv2d() = default;
  DepthwiseConv2d(ParamStore<T>& ps, const std::string& name, int c, int k, int pad_,
                  Rng& rng)
      : pad(pad_) {
    w = ps.add(name + ".weight", init::kaiming<T>({c, k, k}, k * k, rng));
    b = ps.add(name + ".bias", Tensor<T>({c}));
  }

  ag::Var<T> operator()(const ag::Var<T>& x) const {
    return ag::depthwise_conv2d(x, w, b, pad);
  }
};

/// Depth-wise 3x3 followed by point-wise 1x1.
template <typename T>
struct DSConv {
  DepthwiseConv2d<T> dw;
  Conv2d<T> pw;

  DSConv() = default;
  DSConv(ParamStore<T>& ps, const std::string& name, int cin, int cout, Rng& rng)
      : dw(ps, name + ".dw", cin, 3, 1, rng),
        pw(ps, name + ".pw", cin, cout, 1, 1, 0, rng) {}

  ag::Var<T> operator()(const ag::Var<T>& x) const { return pw(dw(x)); }
};

template <typename T>
struct LayerNorm {
  ag::Var<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& name, int c) {
    gamma = ps.add(name + ".weight", Tensor<T>::full({c}, T(1)));
    beta = ps.add(name + ".bias", Tensor<T>({c}));
  }

  ag::Var<T> operator()(const ag::Var<T>& x) const {
    return ag::layer_norm(x, gamma, beta);
  }
};

template <typename T>
struct GroupNorm {
  ag::Var<T> gamma, beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(ParamStore<T>& ps, const std::string& name, int c, int groups_)
      : groups(groups_) {
    gamma = ps.add(name + ".weight", Tensor<T>::full({c}, T(1)));
    beta = ps.add(name + ".bias", Tensor<T>({c}));
  }

  ag::Var<T> operator()(const ag::Var<T>& x) const {
    return ag::group_norm(x, groups, gamma, beta);
  }
};

/// Stack of Linear layers with ReLU between them (none after the last).
template <typename T>
struct Mlp {
  std::vector<Linear<T>> layers;

  Mlp() = default;
  Mlp(ParamStore<T>& ps, const std::string& name, const std::vector<int>& dims,
      Rng& rng) {
    for (size_t i = 0; i + 1 < dims.size(); ++i)
      layers.emplace_back(ps, name + ".fc" + std::to_string(i), dims[i], dims[i + 1],
                          rng);
  }

  ag::Var<T> operator()(ag::Var<T> x) const {
    for (size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (i + 1 < layers.size()) x = ag::relu(x);
    }
    return x;
  }
};

/// Standard multi-head attention. The additive mask (0 / -inf, shape [m,N])
/// is shared across heads; callers guarantee no fully masked row.
template <typename T>
struct MultiheadAttention {
  Linear<T> wq, wk, wv, wo;
  int heads = 8;
  int channels = 0;

  MultiheadAttention() = default;
  MultiheadAttention(ParamStore<T>& ps, const std::string& name, int c, int heads_,
                     Rng& rng)
      : wq(ps, name + ".q", c, c, rng),
        wk(ps, name + ".k", c, c, rng),
        wv(ps, name + ".v", c, c, rng),
        wo(ps, name + ".out", c, c, rng),
        heads(heads_),
        channels(c) {
    check(c % heads_ == 0, "MultiheadAttention: channels not divisible by heads");
  }

  ag::Var<T> operator()(const ag::Var<T>& q_in, const ag::Var<T>& k_in,
                        const ag::Var<T>& v_in,
                        const Tensor<T>* additive_mask = nullptr) const {
    const int dh = channels / heads;
    ag::Var<T> q = wq(q_in), k = wk(k_in), v = wv(v_in);
    std::vector<ag::Var<T>> head_outs;
    head_outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
      ag::Var<T> qh = ag::slice_cols(q, h * dh, dh);
      ag::Var<T> kh = ag::slice_cols(k, h * dh, dh);
      ag::Var<T> vh = ag::slice_cols(v, h * dh, dh);
      ag::Var<T> scores =
          ag::scale(ag::matmul(qh, ag::transpose(kh)), 1.0 / std::sqrt(double(dh)));
      ag::Var<T> probs = ag::softmax_rows(scores, additive_mask);
      head_outs.push_back(ag::matmul(probs, vh));
    }
    return wo(ag::concat_cols(head_outs));
  }
};

/// 2D sinusoidal position encoding as a [H*W, C] token matrix
/// (y features first, then x; temperature 10000, normalized to 2*pi).
template <typename T>
Tensor<T> sine_pos_embed_2d(int H, int W, int C) {
  check(C % 4 == 0, "sine_pos_embed_2d: channels must be divisible by 4");
  const int feats = C / 2;
  const double two_pi = 2.0 * M_PI;
  Tensor<T> out({H * W, C});
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w) {
      const int tok = h * W + w;
      const double ye = (h + 0.5) / H * two_pi;
      const double xe = (w + 0.5) / W * two_pi;
      for (int i = 0; i < feats; ++i) {
        const double dim_t = std::pow(10000.0, 2.0 * (i / 2) / feats);
        const double py = ye / dim_t;
        const double px = xe / dim_t;
        out.at(tok, i) = static_cast<T>(i % 2 == 0 ? std::sin(py) : std::cos(py));
        out.at(tok, feats + i) = static_cast<T>(i % 2 == 0 ? std::sin(px) : std::cos(px));
      }
    }
  return out;
}

}  // namespace cdmask::nn
