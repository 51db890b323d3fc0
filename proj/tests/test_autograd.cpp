// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cdmask/nn.hpp"
#include "cdmask/ops.hpp"
#include "test_util.hpp"

using namespace cdmask;
using namespace cdmask::testutil;
namespace agx = cdmask::ag;

namespace {

// Naive dense conv used as the convolution oracle.
Tensor<double> conv_reference(const Tensor<double>& x, const Tensor<double>& w,
                              const Tensor<double>& b, int stride, int pad) {
  const int Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor<double> out({Cout, Ho, Wo});
  for (int co = 0; co < Cout; ++co)
    for (int ho = 0; ho < Ho; ++ho)
      for (int wo = 0; wo < Wo; ++wo) {
        double s = b[co];
        for (int ci = 0; ci < Cin; ++ci)
          for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
              const int hi = ho * stride - pad + ki;
              const int wi = wo * stride - pad + kj;
              if (hi < 0 || hi >= H || wi < 0 || wi >= W) continue;
              s += x.at(ci, hi, wi) * w.at(co, ci, ki, kj);
            }
        out.at(co, ho, wo) = s;
      }
  return out;
}

}  // namespace

TEST_CASE("elementwise ops and their gradients") {
  Rng rng(7);
  DVar a(random_tensor({3, 4}, rng), true);
  DVar b(random_tensor({3, 4}, rng, 0.5, 2.0), true);

  auto res = gradcheck(
      [&] {
        auto y = agx::mul(agx::add(a, b), agx::sub(a, b));
        y = agx::add(y, agx::div(a, b));
        y = agx::relu(agx::add_scalar(y, 0.05));
        return agx::sum_all(agx::sigmoid(agx::scale(y, 0.7)));
      },
      {a, b});
  CHECK(res.ok);
}

TEST_CASE("matmul, linear, transpose gradients") {
  Rng rng(11);
  DVar A(random_tensor({3, 5}, rng), true);
  DVar B(random_tensor({5, 4}, rng), true);
  DVar W(random_tensor({6, 4}, rng), true);
  DVar bias(random_tensor({6}, rng), true);

  auto res = gradcheck(
      [&] {
        auto y = agx::matmul(A, B);
        y = agx::linear(y, W, bias);
        return agx::mean_all(agx::mul(y, y));
      },
      {A, B, W, bias});
  CHECK(res.ok);

  // Rank-1 linear path.
  DVar v(random_tensor({4}, rng), true);
  auto res2 = gradcheck([&] { return agx::sum_all(agx::linear(v, W, bias)); }, {v, W, bias});
  CHECK(res2.ok);
}

TEST_CASE("softmax rows: normalization, masking, gradient") {
  Rng rng(13);
  DVar x(random_tensor({4, 6}, rng, -2, 2), true);

  auto y = agx::softmax_rows(x);
  for (int i = 0; i < 4; ++i) {
    double s = 0;
    for (int j = 0; j < 6; ++j) s += y.value().at(i, j);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }

  Tensor<double> mask({4, 6});
  const double ninf = -std::numeric_limits<double>::infinity();
  mask.at(0, 2) = ninf;
  mask.at(0, 3) = ninf;
  mask.at(2, 0) = ninf;
  auto ym = agx::softmax_rows(x, &mask);
  CHECK(ym.value().at(0, 2) == 0.0);
  CHECK(ym.value().at(0, 3) == 0.0);
  CHECK(ym.value().at(2, 0) == 0.0);

  auto res = gradcheck(
      [&] { return agx::mean_all(agx::mul(agx::softmax_rows(x, &mask), x)); }, {x});
  CHECK(res.ok);

  // All-true additive mask equals no mask bitwise.
  Tensor<double> zero_mask({4, 6});
  auto y0 = agx::softmax_rows(x);
  auto y1 = agx::softmax_rows(x, &zero_mask);
  for (int64_t i = 0; i < y0.value().numel(); ++i)
    CHECK(y0.value()[i] == y1.value()[i]);
}

TEST_CASE("layer_norm and group_norm gradients") {
  Rng rng(17);
  DVar x(random_tensor({3, 8}, rng), true);
  DVar g(random_tensor({8}, rng, 0.5, 1.5), true);
  DVar b(random_tensor({8}, rng), true);
  auto res = gradcheck([&] { return agx::sum_all(agx::mul(agx::layer_norm(x, g, b),
                                                          agx::layer_norm(x, g, b))); },
                       {x, g, b});
  CHECK(res.ok);

  DVar xc(random_tensor({4, 3, 3}, rng), true);
  DVar gg(random_tensor({4}, rng, 0.5, 1.5), true);
  DVar gb(random_tensor({4}, rng), true);
  auto res2 = gradcheck(
      [&] {
        auto y = agx::group_norm(xc, 2, gg, gb);
        return agx::sum_all(agx::mul(y, agx::relu(y)));
      },
      {xc, gg, gb});
  CHECK(res2.ok);
}

TEST_CASE("conv2d matches the naive oracle and gradchecks") {
  Rng rng(19);
  for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 1}, std::pair{2, 0}}) {
    DVar x(random_tensor({3, 6, 5}, rng), true);
    DVar w(random_tensor({4, 3, 3, 3}, rng), true);
    DVar b(random_tensor({4}, rng), true);
    auto y = agx::conv2d(x, w, b, stride, pad);
    auto ref = conv_reference(x.value(), w.value(), b.value(), stride, pad);
    REQUIRE(y.value().same_shape(ref));
    for (int64_t i = 0; i < ref.numel(); ++i)
      CHECK(y.value()[i] == doctest::Approx(ref[i]).epsilon(1e-10));

    auto res = gradcheck(
        [&, s = stride, p = pad] {
          return agx::mean_all(agx::mul(agx::conv2d(x, w, b, s, p),
                                        agx::conv2d(x, w, b, s, p)));
        },
        {x, w, b});
    CHECK(res.ok);
  }
}

TEST_CASE("depthwise conv gradient") {
  Rng rng(23);
  DVar x(random_tensor({3, 5, 5}, rng), true);
  DVar w(random_tensor({3, 3, 3}, rng), true);
  DVar b(random_tensor({3}, rng), true);
  auto res = gradcheck(
      [&] {
        auto y = agx::depthwise_conv2d(x, w, b, 1);
        return agx::sum_all(agx::mul(y, y));
      },
      {x, w, b});
  CHECK(res.ok);
}

TEST_CASE("broadcast ops") {
  Rng rng(29);
  DVar x(random_tensor({3, 4, 4}, rng), true);
  DVar v(random_tensor({3}, rng), true);
  auto res = gradcheck(
      [&] { return agx::sum_all(agx::mul(agx::mul_channel(x, v), x)); }, {x, v});
  CHECK(res.ok);

  DVar m(random_tensor({5, 3}, rng), true);
  auto res2 = gradcheck(
      [&] {
        auto y = agx::add_rowvec(agx::mul_rowvec(m, v), v);
        return agx::mean_all(agx::mul(y, y));
      },
      {m, v});
  CHECK(res2.ok);
}

TEST_CASE("pooling and axial means") {
  Rng rng(31);
  DVar x(random_tensor({2, 3, 4}, rng), true);

  auto g = agx::gap(x);
  double manual = 0;
  for (int h = 0; h < 3; ++h)
    for (int w = 0; w < 4; ++w) manual += x.value().at(0, h, w);
  CHECK(g.value()[0] == doctest::Approx(manual / 12.0));

  auto kh = agx::mean_over_width(x);
  CHECK(kh.value().shape() == std::vector<int>{3, 2});
  auto kw = agx::mean_over_height(x);
  CHECK(kw.value().shape() == std::vector<int>{4, 2});

  // Mean decomposition: width-means averaged over rows equal the global mean.
  double rowmean = 0;
  for (int h = 0; h < 3; ++h) rowmean += kh.value().at(h, 0);
  CHECK(rowmean / 3.0 == doctest::Approx(g.value()[0]).epsilon(1e-12));

  auto res = gradcheck(
      [&] {
        auto a = agx::mean_over_width(x);
        auto b = agx::mean_over_height(x);
        return agx::add(agx::sum_all(agx::mul(a, a)),
                        agx::add(agx::sum_all(agx::mul(b, b)),
                                 agx::sum_all(agx::mul(agx::gap(x), agx::gap(x)))));
      },
      {x});
  CHECK(res.ok);
}

TEST_CASE("shape ops roundtrip and gradients") {
  Rng rng(37);
  DVar x(random_tensor({3, 2, 4}, rng), true);
  auto tok = agx::chw_to_tokens(x);
  CHECK(tok.value().shape() == std::vector<int>{8, 3});
  CHECK(tok.value().at(1, 2) == x.value().at(2, 0, 1));
  auto back = agx::tokens_to_chw(tok, 2, 4);
  for (int64_t i = 0; i < x.value().numel(); ++i)
    CHECK(back.value()[i] == x.value()[i]);

  DVar a(random_tensor({2, 3, 3}, rng), true);
  DVar b(random_tensor({4, 3, 3}, rng), true);
  auto res = gradcheck(
      [&] {
        auto c = agx::concat_channels(a, b);
        auto t = agx::chw_to_tokens(c);
        auto s = agx::slice_cols(t, 1, 4);
        return agx::sum_all(agx::mul(s, s));
      },
      {a, b});
  CHECK(res.ok);

  DVar v1(random_tensor({3}, rng), true);
  DVar v2(random_tensor({2}, rng), true);
  auto res2 = gradcheck(
      [&] {
        auto c = agx::concat_vecs<double>({v1, v2});
        return agx::sum_all(agx::mul(c, c));
      },
      {v1, v2});
  CHECK(res2.ok);
}

TEST_CASE("upsample_bilinear: values and gradient") {
  Rng rng(41);
  DVar x(random_tensor({2, 2, 2}, rng), true);
  auto y = agx::upsample_bilinear(x, 4, 4);
  CHECK(y.value().shape() == std::vector<int>{2, 4, 4});
  // Center of mass preserved for constant input.
  DVar c(Tensor<double>::full({1, 2, 2}, 3.5), false);
  auto yc = agx::upsample_bilinear(c, 5, 7);
  for (int64_t i = 0; i < yc.value().numel(); ++i)
    CHECK(yc.value()[i] == doctest::Approx(3.5));

  auto res = gradcheck(
      [&] {
        auto u = agx::upsample_bilinear(x, 5, 3);
        return agx::sum_all(agx::mul(u, u));
      },
      {x});
  CHECK(res.ok);
}

TEST_CASE("bce_with_logits and cross_entropy gradients") {
  Rng rng(43);
  DVar logits(random_tensor({6}, rng, -2, 2), true);
  Tensor<double> target({6});
  for (int i = 0; i < 6; ++i) target[i] = (i % 2) ? 1.0 : 0.0;
  auto res = gradcheck([&] { return agx::bce_with_logits_mean(logits, target); },
                       {logits});
  CHECK(res.ok);

  DVar cls(random_tensor({4, 2}, rng), true);
  std::vector<int> tgt{0, 1, 1, 0};
  std::vector<double> wts{1.0, 0.1, 0.1, 1.0};
  auto res2 = gradcheck([&] { return agx::cross_entropy_rows(cls, tgt, wts); }, {cls});
  CHECK(res2.ok);
}

TEST_CASE("rowwise_block_contract oracle and gradient") {
  Rng rng(47);
  const int m = 2, H = 3, C = 4;
  DVar A(random_tensor({m, H}, rng), true);
  DVar V(random_tensor({m, H * C}, rng), true);
  auto out = agx::rowwise_block_contract(A, V, C);
  for (int q = 0; q < m; ++q)
    for (int c = 0; c < C; ++c) {
      double s = 0;
      for (int h = 0; h < H; ++h) s += A.value().at(q, h) * V.value().at(q, h * C + c);
      CHECK(out.value().at(q, c) == doctest::Approx(s).epsilon(1e-12));
    }
  auto res = gradcheck(
      [&] {
        auto y = agx::rowwise_block_contract(A, V, C);
        return agx::sum_all(agx::mul(y, y));
      },
      {A, V});
  CHECK(res.ok);
}

TEST_CASE("ms_deform_sample: identity sampling, oracle, gradient") {
  Rng rng(53);
  // Identity: single level, single point, zero offset, weight 1 ->
  // output equals the bilinear sample at the reference point itself,
  // and at a pixel center that is the pixel value.
  {
    const int H = 3, W = 3, C = 2;
    DVar value(random_tensor({H * W, C}, rng), false);
    Tensor<double> refs({1, 2});
    refs.at(0, 0) = (1 + 0.5) / W;  // pixel (1,1) center
    refs.at(0, 1) = (1 + 0.5) / H;
    DVar offsets(Tensor<double>({1, 2}), false);
    DVar attn(Tensor<double>::full({1, 1}, 1.0), false);
    auto out = agx::ms_deform_sample(value, offsets, attn, refs, {{H, W}}, 1);
    for (int c = 0; c < C; ++c)
      CHECK(out.value().at(0, c) == doctest::Approx(value.value().at(1 * W + 1, c)));
  }

  // Two-level toy against a brute-force gather oracle.
  {
    const int C = 4, nh = 2, P = 2;
    std::vector<agx::LevelShape> shapes{{3, 3}, {2, 2}};
    const int Nv = 9 + 4;
    DVar value(random_tensor({Nv, C}, rng), true);
    DVar offsets(random_tensor({2, nh * 2 * P * 2}, rng, -1.0, 1.0), true);
    Tensor<double> raw = random_tensor({2, nh * 2 * P}, rng);
    // Softmax over L*P per head so the weight rows sum to one.
    Tensor<double> attn_t({2, nh * 2 * P});
    for (int q = 0; q < 2; ++q)
      for (int h = 0; h < nh; ++h) {
        double denom = 0;
        for (int i = 0; i < 2 * P; ++i) denom += std::exp(raw.at(q, h * 2 * P + i));
        for (int i = 0; i < 2 * P; ++i)
          attn_t.at(q, h * 2 * P + i) = std::exp(raw.at(q, h * 2 * P + i)) / denom;
      }
    DVar attn(attn_t, true);
    Tensor<double> refs({2, 2});
    refs.at(0, 0) = 0.3;
    refs.at(0, 1) = 0.6;
    refs.at(1, 0) = 0.8;
    refs.at(1, 1) = 0.2;

    auto out = agx::ms_deform_sample(value, offsets, attn, refs, shapes, nh);

    auto bilinear = [&](int lvl, double px, double py, int c) {
      const int Hl = shapes[lvl].h, Wl = shapes[lvl].w;
      const int base = lvl == 0 ? 0 : 9;
      const int x0 = (int)std::floor(px), y0 = (int)std::floor(py);
      const double fx = px - x0, fy = py - y0;
      double s = 0;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
          const int yy = y0 + a, xx = x0 + b;
          if (yy < 0 || yy >= Hl || xx < 0 || xx >= Wl) continue;
          const double w = (a ? fy : 1 - fy) * (b ? fx : 1 - fx);
          s += w * value.value().at(base + yy * Wl + xx, c);
        }
      return s;
    };

    const int dh = C / nh;
    for (int q = 0; q < 2; ++q)
      for (int h = 0; h < nh; ++h)
        for (int d = 0; d < dh; ++d) {
          double s = 0;
          for (int l = 0; l < 2; ++l)
            for (int p = 0; p < P; ++p) {
              const int flat = (h * 2 + l) * P + p;
              const double px = refs.at(q, 0) * shapes[l].w - 0.5 +
                                offsets.value().at(q, flat * 2);
              const double py = refs.at(q, 1) * shapes[l].h - 0.5 +
                                offsets.value().at(q, flat * 2 + 1);
              s += attn.value().at(q, flat) * bilinear(l, px, py, h * dh + d);
            }
          CHECK(out.value().at(q, h * dh + d) == doctest::Approx(s).epsilon(1e-10));
        }

    auto res = gradcheck(
        [&] {
          auto y = agx::ms_deform_sample(value, offsets, attn, refs, shapes, nh);
          return agx::sum_all(agx::mul(y, y));
        },
        {value, offsets, attn});
    CHECK(res.ok);
  }
}

TEST_CASE("no-grad guard detaches") {
  DVar a(Tensor<double>::scalar(2.0), true);
  {
    agx::Var<double>::NoGradGuard guard;
    auto y = agx::scale(a, 3.0);
    CHECK_FALSE(y.requires_grad());
  }
  auto y = agx::scale(a, 3.0);
  CHECK(y.requires_grad());
}

TEST_CASE("multihead attention: full additive-zero mask equals unmasked bitwise") {
  Rng rng(59);
  nn::ParamStore<double> ps;
  nn::MultiheadAttention<double> mha(ps, "mha", 8, 2, rng);
  DVar q(random_tensor({3, 8}, rng), false);
  DVar kv(random_tensor({5, 8}, rng), false);
  Tensor<double> zero_mask({3, 5});
  auto a = mha(q, kv, kv, nullptr);
  auto b = mha(q, kv, kv, &zero_mask);
  for (int64_t i = 0; i < a.value().numel(); ++i)
    CHECK(a.value()[i] == b.value()[i]);
}

TEST_CASE("multihead attention matches dense single-head oracle") {
  // One head so the oracle is a plain softmax(QK^T/sqrt(d))V with -inf masking.
  Rng rng(61);
  nn::ParamStore<double> ps;
  const int C = 4;
  nn::MultiheadAttention<double> mha(ps, "mha", C, 1, rng);
  DVar q_in(random_tensor({2, C}, rng), false);
  DVar kv_in(random_tensor({4, C}, rng), false);
  Tensor<double> mask({2, 4});
  mask.at(0, 1) = -std::numeric_limits<double>::infinity();
  mask.at(1, 3) = -std::numeric_limits<double>::infinity();

  auto out = mha(q_in, kv_in, kv_in, &mask);

  auto apply_linear = [&](const Tensor<double>& x, const agx::Var<double>& w,
                          const agx::Var<double>& b) {
    const int N = x.dim(0), in = x.dim(1), o = w.value().dim(0);
    Tensor<double> y({N, o});
    for (int i = 0; i < N; ++i)
      for (int j = 0; j < o; ++j) {
        double s = b.value()[j];
        for (int k = 0; k < in; ++k) s += x.at(i, k) * w.value().at(j, k);
        y.at(i, j) = s;
      }
    return y;
  };
  Tensor<double> Q = apply_linear(q_in.value(), mha.wq.w, mha.wq.b);
  Tensor<double> K = apply_linear(kv_in.value(), mha.wk.w, mha.wk.b);
  Tensor<double> V = apply_linear(kv_in.value(), mha.wv.w, mha.wv.b);
  Tensor<double> att({2, C});
  for (int i = 0; i < 2; ++i) {
    std::vector<double> sc(4);
    double mx = -1e300;
    for (int j = 0; j < 4; ++j) {
      double s = 0;
      for (int k = 0; k < C; ++k) s += Q.at(i, k) * K.at(j, k);
      sc[j] = s / std::sqrt(double(C)) + mask.at(i, j);
      mx = std::max(mx, sc[j]);
    }
    double denom = 0;
    for (int j = 0; j < 4; ++j) denom += std::exp(sc[j] - mx);
    for (int j = 0; j < 4; ++j) {
      const double p = std::exp(sc[j] - mx) / denom;
      for (int k = 0; k < C; ++k) att.at(i, k) += p * V.at(j, k);
    }
  }
  Tensor<double> ref = apply_linear(att, mha.wo.w, mha.wo.b);
  for (int64_t i = 0; i < ref.numel(); ++i)
    CHECK(out.value()[i] == doctest::Approx(ref[i]).epsilon(1e-10));
}
