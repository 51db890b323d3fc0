// Copyright 2026 the cdmask authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cdmask/metrics.hpp"
#include "cdmask/random.hpp"

#include <vector>

using namespace cdmask;

namespace {

ConfusionCounts count_oracle(const std::vector<uint8_t>& p, const std::vector<uint8_t>& g) {
  ConfusionCounts c;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 1 && g[i] == 1) c.tp++;
    if (p[i] == 0 && g[i] == 0) c.tn++;
    if (p[i] == 1 && g[i] == 0) c.fp++;
    if (p[i] == 0 && g[i] == 1) c.fn++;
  }
  return c;
}

}  // namespace

TEST_CASE("accumulate: perfect positive, total disagreement, oracle, validation") {
  ConfusionCounts c;
  std::vector<uint8_t> ones(16, 1);
  accumulate(ones.data(), ones.data(), 16, c);
  CHECK(c.tp == 16);
  CHECK(c.tn + c.fp + c.fn == 0);

  ConfusionCounts d;
  std::vector<uint8_t> zeros(16, 0);
  accumulate(ones.data(), zeros.data(), 16, d);
  CHECK(d.fp == 16);
  accumulate(zeros.data(), ones.data(), 16, d);
  CHECK(d.fn == 16);
  CHECK(d.tp == 0);

  Rng rng(3);
  std::vector<uint8_t> p(16), g(16);
  for (int i = 0; i < 16; ++i) {
    p[i] = rng.bernoulli(0.5);
    g[i] = rng.bernoulli(0.5);
  }
  ConfusionCounts got;
  accumulate(p.data(), g.data(), 16, got);
  ConfusionCounts want = count_oracle(p, g);
  CHECK(got.tp == want.tp);
  CHECK(got.tn == want.tn);
  CHECK(got.fp == want.fp);
  CHECK(got.fn == want.fn);
  CHECK(got.total() == 16);

  std::vector<uint8_t> bad(4, 2);
  ConfusionCounts e;
  CHECK_THROWS(accumulate(bad.data(), bad.data(), 4, e));
}

TEST_CASE("compute: fixtures and conventions") {
  ConfusionCounts perfect{16, 0, 0, 0};
  MetricReport r = compute(perfect);
  CHECK(r.precision == 1.0);
  CHECK(r.recall == 1.0);
  CHECK(r.f1 == 1.0);
  CHECK(r.iou == 1.0);
  CHECK(r.oa == 1.0);

  ConfusionCounts fixture{2, 0, 1, 1};
  r = compute(fixture);
  CHECK(r.precision == doctest::Approx(2.0 / 3));
  CHECK(r.recall == doctest::Approx(2.0 / 3));
  CHECK(r.f1 == doctest::Approx(2.0 / 3));
  CHECK(r.iou == doctest::Approx(0.5));
  CHECK(r.oa == doctest::Approx(0.5));

  // Zero TP with positives present.
  ConfusionCounts zero_tp{0, 4, 2, 2};
  r = compute(zero_tp);
  CHECK(r.precision == 0.0);
  CHECK(r.recall == 0.0);
  CHECK(r.f1 == 0.0);
  CHECK(r.iou == 0.0);

  // Correct "no change" verdict scores 1.
  ConfusionCounts all_neg{0, 8, 0, 0};
  r = compute(all_neg);
  CHECK(r.precision == 1.0);
  CHECK(r.recall == 1.0);
  CHECK(r.f1 == 1.0);
  CHECK(r.iou == 1.0);
  CHECK(r.oa == 1.0);

  CHECK_THROWS(compute(ConfusionCounts{}));
}

TEST_CASE("metric bounds and relations on random counts") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    ConfusionCounts c{uint64_t(rng.uniform_int(0, 50)), uint64_t(rng.uniform_int(0, 50)),
                      uint64_t(rng.uniform_int(0, 50)), uint64_t(rng.uniform_int(0, 50))};
    if (c.total() == 0) continue;
    MetricReport r = compute(c);
    for (double v : {r.precision, r.recall, r.f1, r.iou, r.oa}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    if (c.tp > 0) {
      CHECK(r.f1 <= std::max(r.precision, r.recall) + 1e-12);
      CHECK(r.f1 >= std::min(r.precision, r.recall) - 1e-12);
      CHECK(r.iou <= r.f1 + 1e-12);
    }
  }
}

TEST_CASE("accumulation is order independent and counts merge") {
  Rng rng(11);
  std::vector<std::pair<std::vector<uint8_t>, std::vector<uint8_t>>> samples;
  for (int s = 0; s < 5; ++s) {
    std::vector<uint8_t> p(64), g(64);
    for (int i = 0; i < 64; ++i) {
      p[i] = rng.bernoulli(0.3);
      g[i] = rng.bernoulli(0.3);
    }
    samples.push_back({p, g});
  }
  ConfusionCounts forward, backward, merged;
  for (const auto& [p, g] : samples) accumulate(p.data(), g.data(), 64, forward);
  for (auto it = samples.rbegin(); it != samples.rend(); ++it)
    accumulate(it->first.data(), it->second.data(), 64, backward);
  for (const auto& [p, g] : samples) {
    ConfusionCounts one;
    accumulate(p.data(), g.data(), 64, one);
    merged += one;
  }
  CHECK(forward.tp == backward.tp);
  CHECK(forward.fn == merged.fn);
  CHECK(compute(forward).f1 == compute(merged).f1);
}

TEST_CASE("report formatting uses two-decimal percentages") {
  MetricReport r;
  r.f1 = 0.74748;
  r.precision = 0.7596;
  r.recall = 0.7357;
  r.iou = 0.5968;
  r.oa = 0.9155;
  const std::string s = format_report(r);
  CHECK(s.find("F1   74.75") != std::string::npos);
  CHECK(s.find("Pre  75.96") != std::string::npos);
  CHECK(s.find("OA   91.55") != std::string::npos);
}
