// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "cdmask/matching.hpp"
#include "test_util.hpp"

using namespace cdmask;
using namespace cdmask::testutil;

namespace {

// Exhaustive minimum over all injections of targets into queries.
double exhaustive_best(const std::vector<double>& cost, int n, int m,
                       std::vector<int>* best_assign = nullptr) {
  std::vector<int> perm(m);
  for (int i = 0; i < m; ++i) perm[i] = i;
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> idx(n);
  std::function<void(int, double, uint32_t)> rec = [&](int t, double acc, uint32_t used) {
    if (t == n) {
      if (acc < best) {
        best = acc;
        if (best_assign) *best_assign = idx;
      }
      return;
    }
    for (int q = 0; q < m; ++q) {
      if (used & (1u << q)) continue;
      idx[t] = q;
      rec(t + 1, acc + cost[t * m + q], used | (1u << q));
    }
  };
  rec(0, 0.0, 0);
  return best;
}

}  // namespace

TEST_CASE("dice_loss: perfect overlap, disjoint limit, direct value, bounds") {
  Tensor<double> g({4}, {1, 0, 0, 0});
  DVar p_perfect(Tensor<double>({4}, {1, 0, 0, 0}), false);
  auto d0 = dice_loss(p_perfect, Tensor<double>({4}, {1, 0, 0, 0}));
  CHECK(d0.value()[0] == doctest::Approx(0.0));

  // Disjoint with large mass: approaches 1.
  const int n = 4096;
  Tensor<double> big_p({n}), big_g({n});
  for (int i = 0; i < n / 2; ++i) big_p[i] = 1.0;
  for (int i = n / 2; i < n; ++i) big_g[i] = 1.0;
  auto d1 = dice_loss(DVar(big_p, false), big_g);
  CHECK(d1.value()[0] > 0.999);
  CHECK(d1.value()[0] < 1.0);

  DVar p(Tensor<double>({4}, {1, 1, 0, 0}), false);
  auto d = dice_loss(p, g);
  CHECK(d.value()[0] == doctest::Approx(0.25).epsilon(1e-12));

  // Gradient of the dice composition.
  Rng rng(3);
  DVar probs(random_tensor({6}, rng, 0.05, 0.95), true);
  Tensor<double> tgt({6}, {1, 0, 1, 0, 0, 1});
  auto res = gradcheck([&] { return dice_loss(probs, tgt); }, {probs});
  CHECK(res.ok);
}

TEST_CASE("match_cost: limiting case, clamped finiteness, hand value") {
  LossWeights w;
  // Perfect confident prediction: probability ~1 and exact mask.
  Tensor<double> cls({1, 2});
  cls.at(0, kChangeClass) = 50.0;
  cls.at(0, kNullClass) = -50.0;
  Tensor<double> target({4}, {1, 1, 0, 0});
  Tensor<double> mask({1, 2, 2});
  mask[0] = mask[1] = 40.0;
  mask[2] = mask[3] = -40.0;
  const double c = match_cost(cls, mask, 0, target, w);
  CHECK(c == doctest::Approx(-w.cls).epsilon(1e-4));

  // Extreme logits stay finite through clamping.
  Tensor<double> wild({1, 2, 2});
  wild[0] = 1e4;
  wild[1] = -1e4;
  wild[2] = 1e4;
  wild[3] = -1e4;
  Tensor<double> anti({4}, {0, 1, 0, 1});
  CHECK(std::isfinite(match_cost(cls, wild, 0, anti, w)));

  // Hand evaluation on a 2x2 toy.
  Tensor<double> cls2({1, 2});
  cls2.at(0, 0) = 0.4;
  cls2.at(0, 1) = -0.1;
  Tensor<double> mk({1, 2, 2}, {0.5, -0.25, 1.0, -2.0});
  Tensor<double> tg({4}, {1, 0, 1, 0});
  const double pc = std::exp(0.4) / (std::exp(0.4) + std::exp(-0.1));
  double bce = 0, inter = 0, ps = 0, gs = 0;
  for (int i = 0; i < 4; ++i) {
    double p = 1.0 / (1.0 + std::exp(-mk[i]));
    bce += -(tg[i] * std::log(p) + (1 - tg[i]) * std::log(1 - p));
    inter += p * tg[i];
    ps += p;
    gs += tg[i];
  }
  bce /= 4;
  const double dice = 1.0 - (2 * inter + 1) / (ps + gs + 1);
  const double expect = w.cls * (-pc) + w.ce * bce + w.dice * dice;
  CHECK(match_cost(cls2, mk, 0, tg, w) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("hungarian: single target, diagonal dominance, exhaustive oracle") {
  // n=1: argmin over the row.
  std::vector<double> row{3.0, 1.5, 2.0, 0.25, 7.0};
  auto a = hungarian_match(row, 1, 5);
  CHECK(a == std::vector<int>{3});

  // Identity-favoring diagonal.
  std::vector<double> diag(3 * 4, 10.0);
  for (int i = 0; i < 3; ++i) diag[i * 4 + i] = 0.1 * (i + 1);
  CHECK(hungarian_match(diag, 3, 4) == std::vector<int>{0, 1, 2});

  // More targets than queries is invalid.
  CHECK_THROWS(hungarian_match(std::vector<double>(6, 1.0), 3, 2));

  // Random rectangular matrices against exhaustive search.
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + trial % 3, m = 5;
    std::vector<double> cost(n * m);
    for (auto& c : cost) c = rng.uniform(-3.0, 3.0);
    auto got = hungarian_match(cost, n, m);
    double total = 0;
    std::vector<char> used(m, 0);
    for (int t = 0; t < n; ++t) {
      REQUIRE(got[t] >= 0);
      REQUIRE(!used[got[t]]);
      used[got[t]] = 1;
      total += cost[t * m + got[t]];
    }
    const double best = exhaustive_best(cost, n, m);
    CHECK(total == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("total_loss: empty targets leave only the null classification term") {
  Rng rng(9);
  const int m = 3, h = 2, w = 2;
  PredictionSet<double> pred{DVar(random_tensor({m, 2}, rng), true),
                             DVar(random_tensor({m, h, w}, rng), true)};
  TargetSet<double> targets;  // nothing changed
  LossWeights lw;
  LossBreakdown bd;
  auto loss = total_loss<double>({pred}, targets, lw, &bd);
  CHECK(bd.bce == 0.0);
  CHECK(bd.dice == 0.0);
  CHECK(bd.cls > 0.0);
  CHECK(loss.value()[0] == doctest::Approx(lw.cls * bd.cls).epsilon(1e-12));
}

TEST_CASE("total_loss gradients match finite differences") {
  Rng rng(11);
  const int m = 3, h = 2, w = 2;
  // Well-separated masks keep the matching stable under perturbation.
  Tensor<double> mask_logits({m, h, w});
  for (int64_t i = 0; i < mask_logits.numel(); ++i)
    mask_logits[i] = rng.uniform(-0.5, 0.5);
  mask_logits.at(0, 0, 0) += 6.0;
  mask_logits.at(1, 1, 1) += 6.0;

  PredictionSet<double> pred{DVar(random_tensor({m, 2}, rng), true),
                             DVar(mask_logits, true)};
  TargetSet<double> targets;
  Tensor<double> t0({h, w});
  t0.at(0, 0) = 1.0;
  Tensor<double> t1({h, w});
  t1.at(1, 1) = 1.0;
  targets.masks = {t0, t1};
  LossWeights lw;

  auto res = gradcheck(
      [&] { return total_loss<double>({pred}, targets, lw, nullptr); },
      {pred.cls_logits, pred.mask_logits});
  CHECK(res.ok);
}

TEST_CASE("total_loss: deep supervision sums across prediction sets") {
  Rng rng(13);
  const int m = 2, h = 2, w = 2;
  PredictionSet<double> p1{DVar(random_tensor({m, 2}, rng), false),
                           DVar(random_tensor({m, h, w}, rng), false)};
  PredictionSet<double> p2{DVar(random_tensor({m, 2}, rng), false),
                           DVar(random_tensor({m, h, w}, rng), false)};
  TargetSet<double> targets;
  Tensor<double> t({h, w});
  t.at(0, 1) = 1.0;
  targets.masks = {t};
  LossWeights lw;
  auto l1 = total_loss<double>({p1}, targets, lw, nullptr);
  auto l2 = total_loss<double>({p2}, targets, lw, nullptr);
  auto both = total_loss<double>({p1, p2}, targets, lw, nullptr);
  CHECK(both.value()[0] ==
        doctest::Approx(l1.value()[0] + l2.value()[0]).epsilon(1e-12));
}

TEST_CASE("loss weight defaults match the best-performing triple") {
  LossWeights w;
  CHECK(w.cls == 1.0);
  CHECK(w.dice == 10.0);
  CHECK(w.ce == 10.0);
}
