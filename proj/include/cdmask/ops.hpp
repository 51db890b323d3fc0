// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "cdmask/autograd.hpp"
#include "cdmask/tensor.hpp"

namespace cdmask::ag {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
Var<T> constant(Tensor<T> t) {
  return Var<T>(std::move(t), false);
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check(a.value().same_shape(b.value()), "add: shape mismatch");
  Tensor<T> out = a.value();
  out.add_(b.value());
  return Var<T>::make(std::move(out), {a, b}, [a, b](typename Var<T>::Node& n) mutable {
    a.accum_grad(n.grad);
    b.accum_grad(n.grad);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check(a.value().same_shape(b.value()), "sub: shape mismatch");
  Tensor<T> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return Var<T>::make(std::move(out), {a, b}, [a, b](typename Var<T>::Node& n) mutable {
    a.accum_grad(n.grad);
    Tensor<T> gb = n.grad;
    for (int64_t i = 0; i < gb.numel(); ++i) gb[i] = -gb[i];
    b.accum_grad(gb);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check(a.value().same_shape(b.value()), "mul: shape mismatch");
  Tensor<T> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return Var<T>::make(std::move(out), {a, b}, [a, b](typename Var<T>::Node& n) mutable {
    Tensor<T> ga = n.grad;
    for (int64_t i = 0; i < ga.numel(); ++i) ga[i] *= b.value()[i];
    a.accum_grad(ga);
    Tensor<T> gb = n.grad;
    for (int64_t i = 0; i < gb.numel(); ++i) gb[i] *= a.value()[i];
    b.accum_grad(gb);
  });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  check(a.value().same_shape(b.value()), "div: shape mismatch");
  Tensor<T> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] /= b.value()[i];
  return Var<T>::make(std::move(out), {a, b}, [a, b](typename Var<T>::Node& n) mutable {
    Tensor<T> ga = n.grad;
    for (int64_t i = 0; i < ga.numel(); ++i) ga[i] /= b.value()[i];
    a.accum_grad(ga);
    Tensor<T> gb = n.grad;
    for (int64_t i = 0; i < gb.numel(); ++i) {
      const T bv = b.value()[i];
      gb[i] *= -a.value()[i] / (bv * bv);
    }
    b.accum_grad(gb);
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, double s) {
  Tensor<T> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= static_cast<T>(s);
  return Var<T>::make(std::move(out), {a}, [a, s](typename Var<T>::Node& n) mutable {
    Tensor<T> g = n.grad;
    for (int64_t i = 0; i < g.numel(); ++i) g[i] *= static_cast<T>(s);
    a.accum_grad(g);
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, double s) {
  Tensor<T> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += static_cast<T>(s);
  return Var<T>::make(std::move(out), {a},
                      [a](typename Var<T>::Node& n) mutable { a.accum_grad(n.grad); });
}

/// x + c with a non-differentiated constant tensor (positional encodings).
template <typename T>
Var<T> add_const(const Var<T>& a, const Tensor<T>& c) {
  check(a.value().same_shape(c), "add_const: shape mismatch");
  Tensor<T> out = a.value();
  out.add_(c);
  return Var<T>::make(std::move(out), {a},
                      [a](typename Var<T>::Node& n) mutable { a.accum_grad(n.grad); });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > T(0) ? out[i] : T(0);
  return Var<T>::make(std::move(out), {a}, [a](typename Var<T>::Node& n) mutable {
    Tensor<T> g = n.grad;
    for (int64_t i = 0; i < g.numel(); ++i)
      if (a.value()[i] <= T(0)) g[i] = T(0);
    a.accum_grad(g);
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = T(1) / (T(1) + std::exp(-out[i]));
  Tensor<T> y = out;
  return Var<T>::make(std::move(out), {a}, [a, y](typename Var<T>::Node& n) mutable {
    Tensor<T> g = n.grad;
    for (int64_t i = 0; i < g.numel(); ++i) g[i] *= y[i] * (T(1) - y[i]);
    a.accum_grad(g);
  });
}

// ---------------------------------------------------------------------------
// Shape
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
  std::vector<int> old_shape = a.value().shape();
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return Var<T>::make(std::move(out), {a}, [a, old_shape](typename Var<T>::Node& n) mutable {
    a.accum_grad(n.grad.reshaped(old_shape));
  });
}

/// [C,H,W] -> [H*W, C] token matrix; token index n = h*W + w.
template <typename T>
Var<T> chw_to_tokens(const Var<T>& x) {
  const auto& v = x.value();
  check(v.rank() == 3, "chw_to_tokens: want rank-3");
  const int C = v.dim(0), H = v.dim(1), W = v.dim(2);
  Tensor<T> out({H * W, C});
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < H * W; ++p) out.at(p, c) = v[static_cast<int64_t>(c) * H * W + p];
  return Var<T>::make(std::move(out), {x}, [x, C, H, W](typename Var<T>::Node& n) mutable {
    Tensor<T> g({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < H * W; ++p)
        g[static_cast<int64_t>(c) * H * W + p] = n.grad.at(p, c);
    x.accum_grad(g);
  });
}

template <typename T>
Var<T> tokens_to_chw(const Var<T>& x, int H, int W) {
  const auto& v = x.value();
  check(v.rank() == 2 && v.dim(0) == H * W, "tokens_to_chw: shape mismatch");
  const int C = v.dim(1);
  Tensor<T> out({C, H, W});
  for (int c = 0; c < C; ++c)
    for (int p = 0; p < H * W; ++p) out[static_cast<int64_t>(c) * H * W + p] = v.at(p, c);
  return Var<T>::make(std::move(out), {x}, [x, C, H, W](typename Var<T>::Node& n) mutable {
    Tensor<T> g({H * W, C});
    for (int c = 0; c < C; ++c)
      for (int p = 0; p < H * W; ++p)
        g.at(p, c) = n.grad[static_cast<int64_t>(c) * H * W + p];
    x.accum_grad(g);
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const auto& va = a.value();
  const auto& vb = b.value();
  check(va.rank() == 3 && vb.rank() == 3 && va.dim(1) == vb.dim(1) &&
            va.dim(2) == vb.dim(2),
        "concat_channels: shape mismatch");
  const int Ca = va.dim(0), Cb = vb.dim(0), H = va.dim(1), W = va.dim(2);
  Tensor<T> out({Ca + Cb, H, W});
  std::copy(va.data(), va.data() + va.numel(), out.data());
  std::copy(vb.data(), vb.data() + vb.numel(), out.data() + va.numel());
  return Var<T>::make(std::move(out), {a, b}, [a, b, Ca, Cb, H, W](typename Var<T>::Node& n) mutable {
    const int64_t na = static_cast<int64_t>(Ca) * H * W;
    Tensor<T> ga({Ca, H, W});
    std::copy(n.grad.data(), n.grad.data() + na, ga.data());
    a.accum_grad(ga);
    Tensor<T> gb({Cb, H, W});
    std::copy(n.grad.data() + na, n.grad.data() + n.grad.numel(), gb.data());
    b.accum_grad(gb);
  });
}

template <typename T>
Var<T> concat_vecs(const std::vector<Var<T>>& parts) {
  check(!parts.empty(), "concat_vecs: empty");
  int total = 0;
  for (const auto& p : parts) {
    check(p.value().rank() == 1, "concat_vecs: want rank-1 parts");
    total += p.value().dim(0);
  }
  Tensor<T> out({total});
  int off = 0;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    offsets.push_back(off);
    std::copy(p.value().data(), p.value().data() + p.value().numel(), out.data() + off);
    off += p.value().dim(0);
  }
  return Var<T>::make(std::move(out), parts, [parts, offsets](typename Var<T>::Node& n) mutable {
    for (size_t i = 0; i < parts.size(); ++i) {
      const int len = parts[i].value().dim(0);
      Tensor<T> g({len});
      std::copy(n.grad.data() + offsets[i], n.grad.data() + offsets[i] + len, g.data());
      parts[i].accum_grad(g);
    }
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& x, int c0, int len) {
  const auto& v = x.value();
  check(v.rank() == 2 && c0 >= 0 && c0 + len <= v.dim(1), "slice_cols: bad range");
  const int M = v.dim(0), N = v.dim(1);
  Tensor<T> out({M, len});
  for (int i = 0; i < M; ++i)
    std::copy(&v.at(i, c0), &v.at(i, c0) + len, &out.at(i, 0));
  return Var<T>::make(std::move(out), {x}, [x, c0, len, M, N](typename Var<T>::Node& n) mutable {
    Tensor<T> g({M, N});
    for (int i = 0; i < M; ++i)
      std::copy(&n.grad.at(i, 0), &n.grad.at(i, 0) + len, &g.at(i, c0));
    x.accum_grad(g);
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, int r0, int len) {
  const auto& v = x.value();
  check(v.rank() == 2 && r0 >= 0 && r0 + len <= v.dim(0), "slice_rows: bad range");
  const int M = v.dim(0), N = v.dim(1);
  Tensor<T> out({len, N});
  std::copy(v.data() + static_cast<int64_t>(r0) * N,
            v.data() + static_cast<int64_t>(r0 + len) * N, out.data());
  return Var<T>::make(std::move(out), {x}, [x, r0, len, M, N](typename Var<T>::Node& n) mutable {
    Tensor<T> g({M, N});
    std::copy(n.grad.data(), n.grad.data() + n.grad.numel(),
              g.data() + static_cast<int64_t>(r0) * N);
    x.accum_grad(g);
  });
}

/// [C,H,W] -> [W, H*C] with out[w, h*C+c] = x[c,h,w]; pairs with
/// rowwise_block_contract to express tandem axial attention as matmuls.
template <typename T>
Var<T> chw_to_w_hc(const Var<T>& x) {
  const auto& v = x.value();
  check(v.rank() == 3, "chw_to_w_hc: want rank-3");
  const int C = v.dim(0), H = v.dim(1), W = v.dim(2);
  Tensor<T> out({W, H * C});
  for (int c = 0; c < C; ++c)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w) out.at(w, h * C + c) = v.at(c, h, w);
  return Var<T>::make(std::move(out), {x}, [x, C, H, W](typename Var<T>::Node& n) mutable {
    Tensor<T> g({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) g.at(c, h, w) = n.grad.at(w, h * C + c);
    x.accum_grad(g);
  });
}

/// Grows [C,H,W] to [C,Hp,Wp] by reflect-101 continuation on the bottom and
/// right edges (index folding handles pads larger than the image).
template <typename T>
Var<T> pad_bottom_right_reflect(const Var<T>& x, int Hp, int Wp) {
  const auto& v = x.value();
  check(v.rank() == 3 && Hp >= v.dim(1) && Wp >= v.dim(2), "pad: target too small");
  const int C = v.dim(0), H = v.dim(1), W = v.dim(2);
  auto fold = [](int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
  };
  std::vector<int> fy(Hp), fx(Wp);
  for (int i = 0; i < Hp; ++i) fy[i] = fold(i, H);
  for (int j = 0; j < Wp; ++j) fx[j] = fold(j, W);
  Tensor<T> out({C, Hp, Wp});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < Hp; ++i)
      for (int j = 0; j < Wp; ++j) out.at(c, i, j) = v.at(c, fy[i], fx[j]);
  return Var<T>::make(std::move(out), {x},
                      [x, fy, fx, C, H, W, Hp, Wp](typename Var<T>::Node& n) mutable {
    Tensor<T> g({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < Hp; ++i)
        for (int j = 0; j < Wp; ++j) g.at(c, fy[i], fx[j]) += n.grad.at(c, i, j);
    x.accum_grad(g);
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  check(!parts.empty(), "concat_cols: empty");
  const int M = parts[0].value().dim(0);
  int total = 0;
  for (const auto& p : parts) {
    check(p.value().rank() == 2 && p.value().dim(0) == M, "concat_cols: shape mismatch");
    total += p.value().dim(1);
  }
  Tensor<T> out({M, total});
  int off = 0;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const int len = p.value().dim(1);
    for (int i = 0; i < M; ++i)
      std::copy(&p.value().at(i, 0), &p.value().at(i, 0) + len, &out.at(i, off));
    off += len;
  }
  return Var<T>::make(std::move(out), parts, [parts, offsets, M](typename Var<T>::Node& n) mutable {
    for (size_t k = 0; k < parts.size(); ++k) {
      const int len = parts[k].value().dim(1);
      Tensor<T> g({M, len});
      for (int i = 0; i < M; ++i)
        std::copy(&n.grad.at(i, offsets[k]), &n.grad.at(i, offsets[k]) + len, &g.at(i, 0));
      parts[k].accum_grad(g);
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const auto& A = a.value();
  const auto& B = b.value();
  check(A.rank() == 2 && B.rank() == 2 && A.dim(1) == B.dim(0), "matmul: shape mismatch");
  const int M = A.dim(0), K = A.dim(1), N = B.dim(1);
  Tensor<T> out({M, N});
  MatMap<T>(out.data(), M, N).noalias() =
      ConstMatMap<T>(A.data(), M, K) * ConstMatMap<T>(B.data(), K, N);
  return Var<T>::make(std::move(out), {a, b}, [a, b, M, K, N](typename Var<T>::Node& n) mutable {
    ConstMatMap<T> g(n.grad.data(), M, N);
    Tensor<T> ga({M, K});
    MatMap<T>(ga.data(), M, K).noalias() =
        g * ConstMatMap<T>(b.value().data(), K, N).transpose();
    a.accum_grad(ga);
    Tensor<T> gb({K, N});
    MatMap<T>(gb.data(), K, N).noalias() =
        ConstMatMap<T>(a.value().data(), M, K).transpose() * g;
    b.accum_grad(gb);
  });
}

template <typename T>
Var<T> transpose(const Var<T>& x) {
  const auto& v = x.value();
  check(v.rank() == 2, "transpose: want rank-2");
  const int M = v.dim(0), N = v.dim(1);
  Tensor<T> out({N, M});
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) out.at(j, i) = v.at(i, j);
  return Var<T>::make(std::move(out), {x}, [x, M, N](typename Var<T>::Node& n) mutable {
    Tensor<T> g({M, N});
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < N; ++j) g.at(i, j) = n.grad.at(j, i);
    x.accum_grad(g);
  });
}

/// y = x W^T + b with W stored [out,in]. Accepts [N,in] or rank-1 [in].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto& X = x.value();
  const auto& W = w.value();
  const bool vec = X.rank() == 1;
  const int N = vec ? 1 : X.dim(0);
  const int in = vec ? X.dim(0) : X.dim(1);
  const int out_dim = W.dim(0);
  check(W.rank() == 2 && W.dim(1) == in, "linear: weight shape mismatch");
  check(b.value().rank() == 1 && b.value().dim(0) == out_dim, "linear: bias shape mismatch");
  Tensor<T> out(vec ? std::vector<int>{out_dim} : std::vector<int>{N, out_dim});
  MatMap<T>(out.data(), N, out_dim).noalias() =
      ConstMatMap<T>(X.data(), N, in) * ConstMatMap<T>(W.data(), out_dim, in).transpose();
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < out_dim; ++j) out[static_cast<int64_t>(i) * out_dim + j] += b.value()[j];
  return Var<T>::make(std::move(out), {x, w, b},
                      [x, w, b, N, in, out_dim, vec](typename Var<T>::Node& n) mutable {
    ConstMatMap<T> g(n.grad.data(), N, out_dim);
    Tensor<T> gx(vec ? std::vector<int>{in} : std::vector<int>{N, in});
    MatMap<T>(gx.data(), N, in).noalias() =
        g * ConstMatMap<T>(w.value().data(), out_dim, in);
    x.accum_grad(gx);
    Tensor<T> gw({out_dim, in});
    MatMap<T>(gw.data(), out_dim, in).noalias() =
        g.transpose() * ConstMatMap<T>(x.value().data(), N, in);
    w.accum_grad(gw);
    Tensor<T> gb({out_dim});
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < out_dim; ++j) gb[j] += n.grad[static_cast<int64_t>(i) * out_dim + j];
    b.accum_grad(gb);
  });
}

// ---------------------------------------------------------------------------
// Broadcast
// ---------------------------------------------------------------------------

/// [C,H,W] * [C]: per-channel gate.
template <typename T>
Var<T> mul_channel(const Var<T>& x, const Var<T>& v) {
  const auto& X = x.value();
  check(X.rank() == 3 && v.value().rank() == 1 && v.value().dim(0) == X.dim(0),
        "mul_channel: shape mismatch");
  const int C = X.dim(0);
  const int64_t hw = static_cast<int64_t>(X.dim(1)) * X.dim(2);
  Tensor<T> out = X;
  for (int c = 0; c < C; ++c) {
    const T s = v.value()[c];
    for (int64_t p = 0; p < hw; ++p) out[c * hw + p] *= s;
  }
  return Var<T>::make(std::move(out), {x, v}, [x, v, C, hw](typename Var<T>::Node& n) mutable {
    Tensor<T> gx = n.grad;
    Tensor<T> gv({C});
    for (int c = 0; c < C; ++c) {
      const T s = v.value()[c];
      T acc = T(0);
      for (int64_t p = 0; p < hw; ++p) {
        acc += n.grad[c * hw + p] * x.value()[c * hw + p];
        gx[c * hw + p] *= s;
      }
      gv[c] = acc;
    }
    x.accum_grad(gx);
    v.accum_grad(gv);
  });
}

/// [N,C] * [C]: each row gated elementwise by v.
template <typename T>
Var<T> mul_rowvec(const Var<T>& x, const Var<T>& v) {
  const auto& X = x.value();
  check(X.rank() == 2 && v.value().rank() == 1 && v.value().dim(0) == X.dim(1),
        "mul_rowvec: shape mismatch");
  const int N = X.dim(0), C = X.dim(1);
  Tensor<T> out = X;
  for (int i = 0; i < N; ++i)
    for (int c = 0; c < C; ++c) out.at(i, c) *= v.value()[c];
  return Var<T>::make(std::move(out), {x, v}, [x, v, N, C](typename Var<T>::Node& n) mutable {
    Tensor<T> gx = n.grad;
    Tensor<T> gv({C});
    for (int i = 0; i < N; ++i)
      for (int c = 0; c < C; ++c) {
        gv[c] += n.grad.at(i, c) * x.value().at(i, c);
        gx.at(i, c) *= v.value()[c];
      }
    x.accum_grad(gx);
    v.accum_grad(gv);
  });
}

template <typename T>
Var<T> add_rowvec(const Var<T>& x, const Var<T>& v) {
  const auto& X = x.value();
  check(X.rank() == 2 && v.value().rank() == 1 && v.value().dim(0) == X.dim(1),
        "add_rowvec: shape mismatch");
  const int N = X.dim(0), C = X.dim(1);
  Tensor<T> out = X;
  for (int i = 0; i < N; ++i)
    for (int c = 0; c < C; ++c) out.at(i, c) += v.value()[c];
  return Var<T>::make(std::move(out), {x, v}, [x, v, N, C](typename Var<T>::Node& n) mutable {
    x.accum_grad(n.grad);
    Tensor<T> gv({C});
    for (int i = 0; i < N; ++i)
      for (int c = 0; c < C; ++c) gv[c] += n.grad.at(i, c);
    v.accum_grad(gv);
  });
}

// ---------------------------------------------------------------------------
// Reductions / pooling
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& x) {
  T s = T(0);
  for (int64_t i = 0; i < x.value().numel(); ++i) s += x.value()[i];
  const int64_t n_el = x.value().numel();
  auto shape = x.value().shape();
  return Var<T>::make(Tensor<T>::scalar(s), {x}, [x, shape, n_el](typename Var<T>::Node& n) mutable {
    Tensor<T> g(shape, n.grad[0]);
    (void)n_el;
    x.accum_grad(g);
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.value().numel()));
}

/// Global average pool: [C,H,W] -> [C].
template <typename T>
Var<T> gap(const Var<T>& x) {
  const auto& v = x.value();
  check(v.rank() == 3, "gap: want rank-3");
  const int C = v.dim(0);
  const int64_t hw = static_cast<int64_t>(v.dim(1)) * v.dim(2);
  Tensor<T> out({C});
  for (int c = 0; c < C; ++c) {
    T s = T(0);
    for (int64_t p = 0; p < hw; ++p) s += v[c * hw + p];
    out[c] = s / static_cast<T>(hw);
  }
  return Var<T>::make(std::move(out), {x}, [x, C, hw](typename Var<T>::Node& n) mutable {
    Tensor<T> g(x.value().shape());
    for (int c = 0; c < C; ++c) {
      const T gc = n.grad[c] / static_cast<T>(hw);
      for (int64_t p = 0; p < hw; ++p) g[c * hw + p] = gc;
    }
    x.accum_grad(g);
  });
}

/// Width-mean of [C,H,W] -> [H,C] (axial key compression along rows).
template <typename T>
Var<T> mean_over_width(const Var<T>& x) {
  const auto& v = x.value();
  check(v.rank() == 3, "mean_over_width: want rank-3");
  const int C = v.dim(0), H = v.dim(1), W = v.dim(2);
  Tensor<T> out({H, C});
  for (int c = 0; c < C; ++c)
    for (int h = 0; h < H; ++h) {
      T s = T(0);
      for (int w = 0; w < W; ++w) s += v.at(c, h, w);
      out.at(h, c) = s / static_cast<T>(W);
    }
  return Var<T>::make(std::move(out), {x}, [x, C, H, W](typename Var<T>::Node& n) mutable {
    Tensor<T> g({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int h = 0; h < H; ++h) {
        const T gv = n.grad.at(h, c) / static_cast<T>(W);
        for (int w = 0; w < W; ++w) g.at(c, h, w) = gv;
      }
    x.accum_grad(g);
  });
}

/// Height-mean of [C,H,W] -> [W,C] (axial key compression along columns).
template <typename T>
Var<T> mean_over_height(const Var<T>& x) {
  const auto& v = x.value();
  check(v.rank() == 3, "mean_over_height: want rank-3");
  const int C = v.dim(0), H = v.dim(1), W = v.dim(2);
  Tensor<T> out({W, C});
  for (int c = 0; c < C; ++c)
    for (int w = 0; w < W; ++w) {
      T s = T(0);
      for (int h = 0; h < H; ++h) s += v.at(c, h, w);
      out.at(w, c) = s / static_cast<T>(H);
    }
  return Var<T>::make(std::move(out), {x}, [x, C, H, W](typename Var<T>::Node& n) mutable {
    Tensor<T> g({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int w = 0; w < W; ++w) {
        const T gv = n.grad.at(w, c) / static_cast<T>(H);
        for (int h = 0; h < H; ++h) g.at(c, h, w) = gv;
      }
    x.accum_grad(g);
  });
}

// ---------------------------------------------------------------------------
// Softmax / normalization
// ---------------------------------------------------------------------------

/// Row softmax of [M,N]. `additive_mask` (same shape, entries 0 or -inf) is
/// applied to the logits first; rows must keep at least one finite entry.
template <typename T>
Var<T> softmax_rows(const Var<T>& x, const Tensor<T>* additive_mask = nullptr) {
  const auto& v = x.value();
  check(v.rank() == 2, "softmax_rows: want rank-2");
  const int M = v.dim(0), N = v.dim(1);
  if (additive_mask) check(v.same_shape(*additive_mask), "softmax_rows: mask shape mismatch");
  Tensor<T> out({M, N});
  for (int i = 0; i < M; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < N; ++j) {
      T e = v.at(i, j) + (additive_mask ? additive_mask->at(i, j) : T(0));
      mx = std::max(mx, e);
    }
    check(std::isfinite(static_cast<double>(mx)), "softmax_rows: fully masked row");
    T denom = T(0);
    for (int j = 0; j < N; ++j) {
      T e = v.at(i, j) + (additive_mask ? additive_mask->at(i, j) : T(0));
      T ev = std::exp(e - mx);
      out.at(i, j) = ev;
      denom += ev;
    }
    for (int j = 0; j < N; ++j) out.at(i, j) /= denom;
  }
  Tensor<T> y = out;
  return Var<T>::make(std::move(out), {x}, [x, y, M, N](typename Var<T>::Node& n) mutable {
    Tensor<T> g({M, N});
    for (int i = 0; i < M; ++i) {
      T dot = T(0);
      for (int j = 0; j < N; ++j) dot += n.grad.at(i, j) * y.at(i, j);
      for (int j = 0; j < N; ++j)
        g.at(i, j) = y.at(i, j) * (n.grad.at(i, j) - dot);
    }
    x.accum_grad(g);
  });
}

/// Per-row LayerNorm of [N,C] (rank-1 input treated as one row).
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  double eps = 1e-5) {
  const auto& v = x.value();
  const bool vec = v.rank() == 1;
  const int N = vec ? 1 : v.dim(0);
  const int C = vec ? v.dim(0) : v.dim(1);
  check(gamma.value().dim(0) == C && beta.value().dim(0) == C, "layer_norm: shape");
  Tensor<T> out(v.shape());
  Tensor<T> xhat(v.shape());
  std::vector<T> inv_std(N);
  for (int i = 0; i < N; ++i) {
    const T* row = v.data() + static_cast<int64_t>(i) * C;
    T mu = T(0);
    for (int c = 0; c < C; ++c) mu += row[c];
    mu /= static_cast<T>(C);
    T var = T(0);
    for (int c = 0; c < C; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(C);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    inv_std[i] = is;
    for (int c = 0; c < C; ++c) {
      const T xh = (row[c] - mu) * is;
      xhat[static_cast<int64_t>(i) * C + c] = xh;
      out[static_cast<int64_t>(i) * C + c] = xh * gamma.value()[c] + beta.value()[c];
    }
  }
  return Var<T>::make(std::move(out), {x, gamma, beta},
                      [x, gamma, beta, xhat, inv_std, N, C](typename Var<T>::Node& n) mutable {
    Tensor<T> gx(x.value().shape());
    Tensor<T> ggamma({C});
    Tensor<T> gbeta({C});
    for (int i = 0; i < N; ++i) {
      const int64_t base = static_cast<int64_t>(i) * C;
      T sum_dxh = T(0), sum_dxh_xh = T(0);
      for (int c = 0; c < C; ++c) {
        const T dy = n.grad[base + c];
        const T dxh = dy * gamma.value()[c];
        sum_dxh += dxh;
        sum_dxh_xh += dxh * xhat[base + c];
        ggamma[c] += dy * xhat[base + c];
        gbeta[c] += dy;
      }
      for (int c = 0; c < C; ++c) {
        const T dxh = n.grad[base + c] * gamma.value()[c];
        gx[base + c] = inv_std[i] *
            (dxh - sum_dxh / static_cast<T>(C) - xhat[base + c] * sum_dxh_xh / static_cast<T>(C));
      }
    }
    x.accum_grad(gx);
    gamma.accum_grad(ggamma);
    beta.accum_grad(gbeta);
  });
}

/// GroupNorm over [C,H,W]: statistics per group of C/groups channels.
template <typename T>
Var<T> group_norm(const Var<T>& x, int groups, const Var<T>& gamma, const Var<T>& beta,
                  double eps = 1e-5) {
  const auto& v = x.value();
  check(v.rank() == 3, "group_norm: want rank-3");
  const int C = v.dim(0), H = v.dim(1), W = v.dim(2);
  check(C % groups == 0, "group_norm: channels not divisible by groups");
  const int cpg = C / groups;
  const int64_t hw = static_cast<int64_t>(H) * W;
  const int64_t gsz = cpg * hw;
  Tensor<T> out({C, H, W});
  Tensor<T> xhat({C, H, W});
  std::vector<T> inv_std(groups);
  for (int g = 0; g < groups; ++g) {
    const int64_t base = static_cast<int64_t>(g) * gsz;
    T mu = T(0);
    for (int64_t p = 0; p < gsz; ++p) mu += v[base + p];
    mu /= static_cast<T>(gsz);
    T var = T(0);
    for (int64_t p = 0; p < gsz; ++p) var += (v[base + p] - mu) * (v[base + p] - mu);
    var /= static_cast<T>(gsz);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    inv_std[g] = is;
    for (int64_t p = 0; p < gsz; ++p) xhat[base + p] = (v[base + p] - mu) * is;
  }
  for (int c = 0; c < C; ++c)
    for (int64_t p = 0; p < hw; ++p)
      out[c * hw + p] = xhat[c * hw + p] * gamma.value()[c] + beta.value()[c];
  return Var<T>::make(std::move(out), {x, gamma, beta},
                      [x, gamma, beta, xhat, inv_std, C, groups, cpg, hw, gsz](typename Var<T>::Node& n) mutable {
    Tensor<T> gx(x.value().shape());
    Tensor<T> ggamma({C});
    Tensor<T> gbeta({C});
    for (int c = 0; c < C; ++c)
      for (int64_t p = 0; p < hw; ++p) {
        ggamma[c] += n.grad[c * hw + p] * xhat[c * hw + p];
        gbeta[c] += n.grad[c * hw + p];
      }
    for (int g = 0; g < groups; ++g) {
      const int64_t base = static_cast<int64_t>(g) * gsz;
      T sum_dxh = T(0), sum_dxh_xh = T(0);
      for (int cc = 0; cc < cpg; ++cc) {
        const int c = g * cpg + cc;
        for (int64_t p = 0; p < hw; ++p) {
          const T dxh = n.grad[c * hw + p] * gamma.value()[c];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xhat[c * hw + p];
        }
      }
      for (int cc = 0; cc < cpg; ++cc) {
        const int c = g * cpg + cc;
        for (int64_t p = 0; p < hw; ++p) {
          const T dxh = n.grad[c * hw + p] * gamma.value()[c];
          gx[c * hw + p] = inv_std[g] *
              (dxh - sum_dxh / static_cast<T>(gsz) -
               xhat[c * hw + p] * sum_dxh_xh / static_cast<T>(gsz));
        }
      }
    }
    x.accum_grad(gx);
    gamma.accum_grad(ggamma);
    beta.accum_grad(gbeta);
  });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const Tensor<T>& x, int kh, int kw, int stride, int pad, int Ho, int Wo,
            Tensor<T>& col) {
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  // col has shape [C*kh*kw, Ho*Wo]
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        const int row = (c * kh + ki) * kw + kj;
        T* dst = col.data() + static_cast<int64_t>(row) * Ho * Wo;
        for (int ho = 0; ho < Ho; ++ho) {
          const int hi = ho * stride - pad + ki;
          for (int wo = 0; wo < Wo; ++wo) {
            const int wi = wo * stride - pad + kj;
            dst[ho * Wo + wo] = (hi >= 0 && hi < H && wi >= 0 && wi < W)
                                    ? x.at(c, hi, wi)
                                    : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const Tensor<T>& col, int C, int H, int W, int kh, int kw, int stride,
            int pad, int Ho, int Wo, Tensor<T>& x) {
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj) {
        const int row = (c * kh + ki) * kw + kj;
        const T* src = col.data() + static_cast<int64_t>(row) * Ho * Wo;
        for (int ho = 0; ho < Ho; ++ho) {
          const int hi = ho * stride - pad + ki;
          if (hi < 0 || hi >= H) continue;
          for (int wo = 0; wo < Wo; ++wo) {
            const int wi = wo * stride - pad + kj;
            if (wi < 0 || wi >= W) continue;
            x.at(c, hi, wi) += src[ho * Wo + wo];
          }
        }
      }
}

}  // namespace detail

/// conv2d on [Cin,H,W] with weight [Cout,Cin,kh,kw], zero padding.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride, int pad) {
  const auto& X = x.value();
  const auto& W_ = w.value();
  check(X.rank() == 3 && W_.rank() == 4 && W_.dim(1) == X.dim(0), "conv2d: shape mismatch");
  const int Cin = X.dim(0), H = X.dim(1), W = X.dim(2);
  const int Cout = W_.dim(0), kh = W_.dim(2), kw = W_.dim(3);
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  check(Ho > 0 && Wo > 0, "conv2d: output collapses to zero");
  Tensor<T> col({Cin * kh * kw, Ho * Wo});
  detail::im2col(X, kh, kw, stride, pad, Ho, Wo, col);
  Tensor<T> out({Cout, Ho, Wo});
  MatMap<T>(out.data(), Cout, Ho * Wo).noalias() =
      ConstMatMap<T>(W_.data(), Cout, Cin * kh * kw) *
      ConstMatMap<T>(col.data(), Cin * kh * kw, Ho * Wo);
  for (int co = 0; co < Cout; ++co) {
    const T bias = b.value()[co];
    for (int64_t p = 0; p < static_cast<int64_t>(Ho) * Wo; ++p)
      out[co * static_cast<int64_t>(Ho) * Wo + p] += bias;
  }
  return Var<T>::make(
      std::move(out), {x, w, b},
      [x, w, b, col, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo](typename Var<T>::Node& n) mutable {
        const int K = Cin * kh * kw;
        const int P = Ho * Wo;
        ConstMatMap<T> g(n.grad.data(), Cout, P);
        Tensor<T> gw({Cout, Cin, kh, kw});
        MatMap<T>(gw.data(), Cout, K).noalias() =
            g * ConstMatMap<T>(col.data(), K, P).transpose();
        w.accum_grad(gw);
        Tensor<T> gb({Cout});
        for (int co = 0; co < Cout; ++co) {
          T s = T(0);
          for (int p = 0; p < P; ++p) s += n.grad[static_cast<int64_t>(co) * P + p];
          gb[co] = s;
        }
        b.accum_grad(gb);
        Tensor<T> gcol({K, P});
        MatMap<T>(gcol.data(), K, P).noalias() =
            ConstMatMap<T>(w.value().data(), Cout, K).transpose() * g;
        Tensor<T> gx({Cin, H, W});
        detail::col2im(gcol, Cin, H, W, kh, kw, stride, pad, Ho, Wo, gx);
        x.accum_grad(gx);
      });
}

/// Depth-wise conv on [C,H,W] with weight [C,kh,kw], stride 1, zero padding.
template <typename T>
Var<T> depthwise_conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int pad) {
  const auto& X = x.value();
  const auto& W_ = w.value();
  check(X.rank() == 3 && W_.rank() == 3 && W_.dim(0) == X.dim(0),
        "depthwise_conv2d: shape mismatch");
  const int C = X.dim(0), H = X.dim(1), W = X.dim(2);
  const int kh = W_.dim(1), kw = W_.dim(2);
  const int Ho = H + 2 * pad - kh + 1;
  const int Wo = W + 2 * pad - kw + 1;
  check(Ho > 0 && Wo > 0, "depthwise_conv2d: output collapses to zero");
  Tensor<T> out({C, Ho, Wo});
  for (int c = 0; c < C; ++c) {
    const T bias = b.value()[c];
    for (int ho = 0; ho < Ho; ++ho)
      for (int wo = 0; wo < Wo; ++wo) {
        T s = bias;
        for (int ki = 0; ki < kh; ++ki) {
          const int hi = ho - pad + ki;
          if (hi < 0 || hi >= H) continue;
          for (int kj = 0; kj < kw; ++kj) {
            const int wi = wo - pad + kj;
            if (wi < 0 || wi >= W) continue;
            s += X.at(c, hi, wi) * W_.at(c, ki, kj);
          }
        }
        out.at(c, ho, wo) = s;
      }
  }
  return Var<T>::make(
      std::move(out), {x, w, b},
      [x, w, b, C, H, W, kh, kw, pad, Ho, Wo](typename Var<T>::Node& n) mutable {
        Tensor<T> gx({C, H, W});
        Tensor<T> gw({C, kh, kw});
        Tensor<T> gb({C});
        for (int c = 0; c < C; ++c) {
          for (int ho = 0; ho < Ho; ++ho)
            for (int wo = 0; wo < Wo; ++wo) {
              const T gv = n.grad.at(c, ho, wo);
              gb[c] += gv;
              for (int ki = 0; ki < kh; ++ki) {
                const int hi = ho - pad + ki;
                if (hi < 0 || hi >= H) continue;
                for (int kj = 0; kj < kw; ++kj) {
                  const int wi = wo - pad + kj;
                  if (wi < 0 || wi >= W) continue;
                  gx.at(c, hi, wi) += gv * w.value().at(c, ki, kj);
                  gw.at(c, ki, kj) += gv * x.value().at(c, hi, wi);
                }
              }
            }
        }
        x.accum_grad(gx);
        w.accum_grad(gw);
        b.accum_grad(gb);
      });
}

// ---------------------------------------------------------------------------
// Interpolation
// ---------------------------------------------------------------------------

/// Bilinear resize of [C,H,W] (align_corners=false, border-clamped).
template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, int out_h, int out_w) {
  const auto& v = x.value();
  check(v.rank() == 3, "upsample_bilinear: want rank-3");
  const int C = v.dim(0), H = v.dim(1), W = v.dim(2);
  struct Tap {
    int i0, i1;
    T f;
  };
  auto make_taps = [](int in, int out) {
    std::vector<Tap> taps(out);
    const double s = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
      double src = (o + 0.5) * s - 0.5;
      src = std::max(0.0, std::min(src, static_cast<double>(in - 1)));
      const int i0 = static_cast<int>(std::floor(src));
      const int i1 = std::min(i0 + 1, in - 1);
      taps[o] = {i0, i1, static_cast<T>(src - i0)};
    }
    return taps;
  };
  const auto ty = make_taps(H, out_h);
  const auto tx = make_taps(W, out_w);
  Tensor<T> out({C, out_h, out_w});
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < out_h; ++oy)
      for (int ox = 0; ox < out_w; ++ox) {
        const auto& a = ty[oy];
        const auto& bb = tx[ox];
        const T v00 = v.at(c, a.i0, bb.i0), v01 = v.at(c, a.i0, bb.i1);
        const T v10 = v.at(c, a.i1, bb.i0), v11 = v.at(c, a.i1, bb.i1);
        out.at(c, oy, ox) = (T(1) - a.f) * ((T(1) - bb.f) * v00 + bb.f * v01) +
                            a.f * ((T(1) - bb.f) * v10 + bb.f * v11);
      }
  return Var<T>::make(std::move(out), {x},
                      [x, ty, tx, C, H, W, out_h, out_w](typename Var<T>::Node& n) mutable {
    Tensor<T> g({C, H, W});
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < out_h; ++oy)
        for (int ox = 0; ox < out_w; ++ox) {
          const auto& a = ty[oy];
          const auto& bb = tx[ox];
          const T gv = n.grad.at(c, oy, ox);
          g.at(c, a.i0, bb.i0) += gv * (T(1) - a.f) * (T(1) - bb.f);
          g.at(c, a.i0, bb.i1) += gv * (T(1) - a.f) * bb.f;
          g.at(c, a.i1, bb.i0) += gv * a.f * (T(1) - bb.f);
          g.at(c, a.i1, bb.i1) += gv * a.f * bb.f;
        }
    x.accum_grad(g);
  });
}

/// Plain-tensor bilinear resize (no gradients); used for attention-mask
/// preparation and image-space utilities.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& v, int out_h, int out_w) {
  Var<T> tmp(v, false);
  typename Var<T>::NoGradGuard guard;
  return upsample_bilinear(tmp, out_h, out_w).value();
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Numerically stable mean binary cross-entropy on logits.
template <typename T>
Var<T> bce_with_logits_mean(const Var<T>& logits, const Tensor<T>& target) {
  const auto& v = logits.value();
  check(v.same_shape(target), "bce_with_logits_mean: shape mismatch");
  const int64_t n_el = v.numel();
  T acc = T(0);
  for (int64_t i = 0; i < n_el; ++i) {
    const T xv = v[i];
    const T t = target[i];
    acc += std::max(xv, T(0)) - xv * t + std::log1p(std::exp(-std::abs(xv)));
  }
  acc /= static_cast<T>(n_el);
  return Var<T>::make(Tensor<T>::scalar(acc), {logits},
                      [logits, target, n_el](typename Var<T>::Node& n) mutable {
    Tensor<T> g(logits.value().shape());
    const T gscale = n.grad[0] / static_cast<T>(n_el);
    for (int64_t i = 0; i < n_el; ++i) {
      const T p = T(1) / (T(1) + std::exp(-logits.value()[i]));
      g[i] = gscale * (p - target[i]);
    }
    logits.accum_grad(g);
  });
}

/// Weighted-mean cross entropy over rows of [M,K] against integer targets.
/// loss = sum_i w_i * (logsumexp(x_i) - x_i[t_i]) / sum_i w_i
template <typename T>
Var<T> cross_entropy_rows(const Var<T>& logits, const std::vector<int>& targets,
                          const std::vector<double>& weights) {
  const auto& v = logits.value();
  check(v.rank() == 2, "cross_entropy_rows: want rank-2");
  const int M = v.dim(0), K = v.dim(1);
  check(static_cast<int>(targets.size()) == M && targets.size() == weights.size(),
        "cross_entropy_rows: target size mismatch");
  double wsum = 0;
  for (double w : weights) wsum += w;
  check(wsum > 0, "cross_entropy_rows: zero total weight");
  T acc = T(0);
  for (int i = 0; i < M; ++i) {
    T mx = v.at(i, 0);
    for (int k = 1; k < K; ++k) mx = std::max(mx, v.at(i, k));
    T lse = T(0);
    for (int k = 0; k < K; ++k) lse += std::exp(v.at(i, k) - mx);
    lse = mx + std::log(lse);
    acc += static_cast<T>(weights[i]) * (lse - v.at(i, targets[i]));
  }
  acc /= static_cast<T>(wsum);
  return Var<T>::make(Tensor<T>::scalar(acc), {logits},
                      [logits, targets, weights, wsum, M, K](typename Var<T>::Node& n) mutable {
    Tensor<T> g({M, K});
    const T gv = n.grad[0];
    for (int i = 0; i < M; ++i) {
      T mx = logits.value().at(i, 0);
      for (int k = 1; k < K; ++k) mx = std::max(mx, logits.value().at(i, k));
      T denom = T(0);
      for (int k = 0; k < K; ++k) denom += std::exp(logits.value().at(i, k) - mx);
      for (int k = 0; k < K; ++k) {
        const T p = std::exp(logits.value().at(i, k) - mx) / denom;
        g.at(i, k) = gv * static_cast<T>(weights[i] / wsum) *
                     (p - (k == targets[i] ? T(1) : T(0)));
      }
    }
    logits.accum_grad(g);
  });
}

// ---------------------------------------------------------------------------
// Attention specials
// ---------------------------------------------------------------------------

/// Tandem axial contraction: out[q,c] = sum_h A[q,h] * V[q, h*C + c].
template <typename T>
Var<T> rowwise_block_contract(const Var<T>& a, const Var<T>& v, int C) {
  const auto& A = a.value();
  const auto& V = v.value();
  check(A.rank() == 2 && V.rank() == 2 && A.dim(0) == V.dim(0) &&
            A.dim(1) * C == V.dim(1),
        "rowwise_block_contract: shape mismatch");
  const int M = A.dim(0), H = A.dim(1);
  Tensor<T> out({M, C});
  for (int q = 0; q < M; ++q)
    for (int h = 0; h < H; ++h) {
      const T w = A.at(q, h);
      for (int c = 0; c < C; ++c) out.at(q, c) += w * V.at(q, h * C + c);
    }
  return Var<T>::make(std::move(out), {a, v}, [a, v, M, H, C](typename Var<T>::Node& n) mutable {
    Tensor<T> ga({M, H});
    Tensor<T> gv({M, H * C});
    for (int q = 0; q < M; ++q)
      for (int h = 0; h < H; ++h) {
        T dot = T(0);
        const T w = a.value().at(q, h);
        for (int c = 0; c < C; ++c) {
          dot += n.grad.at(q, c) * v.value().at(q, h * C + c);
          gv.at(q, h * C + c) = w * n.grad.at(q, c);
        }
        ga.at(q, h) = dot;
      }
    a.accum_grad(ga);
    v.accum_grad(gv);
  });
}

struct LevelShape {
  int h = 0;
  int w = 0;
};

/// Multi-scale deformable sampling.
///   value   [Nv, C]        flattened tokens, level-major
///   offsets [Nq, nh*L*P*2] pixel-space offsets predicted from the queries
///   attn    [Nq, nh*L*P]   post-softmax weights (softmax over L*P per head)
///   refs    [Nq, 2]        normalized (x,y) reference point per query
/// Sampling location for (q,h,l,p): ref scaled to level-l pixel space plus the
/// offset. Out-of-bounds bilinear corners contribute zero.
template <typename T>
Var<T> ms_deform_sample(const Var<T>& value, const Var<T>& offsets, const Var<T>& attn,
                        const Tensor<T>& refs, const std::vector<LevelShape>& shapes,
                        int n_heads) {
  const auto& V = value.value();
  const int Nv = V.dim(0), C = V.dim(1);
  const int L = static_cast<int>(shapes.size());
  const int Nq = offsets.value().dim(0);
  check(C % n_heads == 0, "ms_deform_sample: channels not divisible by heads");
  const int dh = C / n_heads;
  const int P = attn.value().dim(1) / (n_heads * L);
  check(attn.value().dim(1) == n_heads * L * P &&
            offsets.value().dim(1) == n_heads * L * P * 2,
        "ms_deform_sample: offsets/attn width mismatch");
  std::vector<int> level_start(L, 0);
  {
    int acc = 0;
    for (int l = 0; l < L; ++l) {
      level_start[l] = acc;
      acc += shapes[l].h * shapes[l].w;
    }
    check(acc == Nv, "ms_deform_sample: token count mismatch");
  }

  // One bilinear sample with zero padding; returns corner indices/weights so
  // forward and backward share the arithmetic.
  struct Corner {
    int idx;
    T w;
  };
  auto corners = [](T px, T py, int Hl, int Wl, int base, Corner out4[4]) {
    const int x0 = static_cast<int>(std::floor(px));
    const int y0 = static_cast<int>(std::floor(py));
    const T fx = px - x0, fy = py - y0;
    const int xs[2] = {x0, x0 + 1};
    const int ys[2] = {y0, y0 + 1};
    const T wx[2] = {T(1) - fx, fx};
    const T wy[2] = {T(1) - fy, fy};
    int k = 0;
    for (int a = 0; a < 2; ++a)
      for (int bidx = 0; bidx < 2; ++bidx) {
        const int yy = ys[a], xx = xs[bidx];
        const bool in = yy >= 0 && yy < Hl && xx >= 0 && xx < Wl;
        out4[k].idx = in ? base + yy * Wl + xx : -1;
        out4[k].w = wy[a] * wx[bidx];
        ++k;
      }
  };

  Tensor<T> out({Nq, C});
  for (int q = 0; q < Nq; ++q)
    for (int h = 0; h < n_heads; ++h)
      for (int l = 0; l < L; ++l) {
        const int Hl = shapes[l].h, Wl = shapes[l].w;
        for (int p = 0; p < P; ++p) {
          const int flat = (h * L + l) * P + p;
          const T a = attn.value().at(q, flat);
          const T px = refs.at(q, 0) * Wl - T(0.5) + offsets.value().at(q, flat * 2);
          const T py = refs.at(q, 1) * Hl - T(0.5) + offsets.value().at(q, flat * 2 + 1);
          Corner c4[4];
          corners(px, py, Hl, Wl, level_start[l], c4);
          for (int k = 0; k < 4; ++k) {
            if (c4[k].idx < 0) continue;
            const T w = a * c4[k].w;
            const T* src = &V.at(c4[k].idx, h * dh);
            T* dst = &out.at(q, h * dh);
            for (int d = 0; d < dh; ++d) dst[d] += w * src[d];
          }
        }
      }

  return Var<T>::make(
      std::move(out), {value, offsets, attn},
      [value, offsets, attn, refs, shapes, n_heads, level_start, Nq, Nv, C, dh,
       corners](typename Var<T>::Node& n) mutable {
        const int L = static_cast<int>(shapes.size());
        const int P = attn.value().dim(1) / (n_heads * L);
        Tensor<T> gval({Nv, C});
        Tensor<T> goff(offsets.value().shape());
        Tensor<T> gattn(attn.value().shape());
        for (int q = 0; q < Nq; ++q)
          for (int h = 0; h < n_heads; ++h)
            for (int l = 0; l < L; ++l) {
              const int Hl = shapes[l].h, Wl = shapes[l].w;
              for (int p = 0; p < P; ++p) {
                const int flat = (h * L + l) * P + p;
                const T a = attn.value().at(q, flat);
                const T px =
                    refs.at(q, 0) * Wl - T(0.5) + offsets.value().at(q, flat * 2);
                const T py =
                    refs.at(q, 1) * Hl - T(0.5) + offsets.value().at(q, flat * 2 + 1);
                const int x0 = static_cast<int>(std::floor(px));
                const int y0 = static_cast<int>(std::floor(py));
                const T fx = px - x0, fy = py - y0;
                const T* g = &n.grad.at(q, h * dh);
                // Gather the four corner feature vectors (zero outside).
                T corner_dot[4] = {T(0), T(0), T(0), T(0)};
                const int xs[2] = {x0, x0 + 1};
                const int ys[2] = {y0, y0 + 1};
                const T wx[2] = {T(1) - fx, fx};
                const T wy[2] = {T(1) - fy, fy};
                int k = 0;
                T sample_dot_g = T(0);
                T dpx = T(0), dpy = T(0);
                for (int ai = 0; ai < 2; ++ai)
                  for (int bi = 0; bi < 2; ++bi, ++k) {
                    const int yy = ys[ai], xx = xs[bi];
                    if (yy < 0 || yy >= Hl || xx < 0 || xx >= Wl) continue;
                    const int idx = level_start[l] + yy * Wl + xx;
                    const T* src = &value.value().at(idx, h * dh);
                    T dot = T(0);
                    for (int d = 0; d < dh; ++d) dot += g[d] * src[d];
                    corner_dot[k] = dot;
                    const T w = wy[ai] * wx[bi];
                    sample_dot_g += w * dot;
                    // d(sample)/dpx uses sign of the x weight derivative.
                    dpx += (bi == 0 ? -wy[ai] : wy[ai]) * dot;
                    dpy += (ai == 0 ? -wx[bi] : wx[bi]) * dot;
                    // dvalue
                    T* gv = &gval.at(idx, h * dh);
                    const T aw = a * w;
                    for (int d = 0; d < dh; ++d) gv[d] += aw * g[d];
                  }
                gattn.at(q, flat) += sample_dot_g;
                goff.at(q, flat * 2) += a * dpx;
                goff.at(q, flat * 2 + 1) += a * dpy;
              }
            }
        value.accum_grad(gval);
        offsets.accum_grad(goff);
        attn.accum_grad(gattn);
      });
}

}  // namespace cdmask::ag
