#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "qseg/metrics.hpp"
#include "qseg/rng.hpp"

using qseg::Tensor;

TEST(Confusion, ExactAndComplementCases) {
  Tensor<float> gt(1, 1, 4, 4);
  qseg::Rng rng(1);
  for (std::size_t i = 0; i < gt.numel(); ++i) gt.data()[i] = rng.bernoulli(0.4) ? 1.f : 0.f;
  auto c = qseg::confusion(gt, gt, 0.5);
  EXPECT_EQ(c.fp, 0);
  EXPECT_EQ(c.fn, 0);
  Tensor<float> inv(1, 1, 4, 4);
  for (std::size_t i = 0; i < gt.numel(); ++i) inv.data()[i] = 1.f - gt.data()[i];
  auto c2 = qseg::confusion(inv, gt, 0.5);
  EXPECT_EQ(c2.tp, 0);
  EXPECT_EQ(c2.tn, 0);
}

TEST(Confusion, MatchesCountingOracle) {
  qseg::Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<float> probs(1, 1, 16, 16), gt(1, 1, 16, 16);
    for (std::size_t i = 0; i < probs.numel(); ++i) {
      probs.data()[i] = static_cast<float>(rng.uniform());
      gt.data()[i] = rng.bernoulli(0.5) ? 1.f : 0.f;
    }
    auto got = qseg::confusion(probs, gt, 0.5);
    auto want = oracle::confusion(
        std::vector<float>(probs.data(), probs.data() + probs.numel()),
        std::vector<float>(gt.data(), gt.data() + gt.numel()), 0.5);
    EXPECT_EQ(got.tp, want.tp);
    EXPECT_EQ(got.tn, want.tn);
    EXPECT_EQ(got.fp, want.fp);
    EXPECT_EQ(got.fn, want.fn);
  }
}

TEST(Confusion, ThresholdExtremes) {
  qseg::Rng rng(3);
  Tensor<float> probs(1, 1, 8, 8), gt(1, 1, 8, 8);
  for (std::size_t i = 0; i < probs.numel(); ++i) {
    probs.data()[i] = static_cast<float>(rng.uniform());
    gt.data()[i] = rng.bernoulli(0.5) ? 1.f : 0.f;
  }
  auto lo = qseg::confusion(probs, gt, 0.0);
  EXPECT_EQ(lo.fn, 0);
  EXPECT_EQ(lo.tn, 0);
  auto hi = qseg::confusion(probs, gt, 1.5);
  EXPECT_EQ(hi.tp, 0);
  EXPECT_EQ(hi.fp, 0);
}

TEST(Confusion, AdditiveOverPartitions) {
  qseg::Rng rng(4);
  Tensor<float> p1(1, 1, 8, 8), g1(1, 1, 8, 8), p2(1, 1, 8, 8), g2(1, 1, 8, 8);
  for (std::size_t i = 0; i < p1.numel(); ++i) {
    p1.data()[i] = static_cast<float>(rng.uniform());
    g1.data()[i] = rng.bernoulli(0.5) ? 1.f : 0.f;
    p2.data()[i] = static_cast<float>(rng.uniform());
    g2.data()[i] = rng.bernoulli(0.5) ? 1.f : 0.f;
  }
  auto a = qseg::confusion(p1, g1, 0.5);
  auto b = qseg::confusion(p2, g2, 0.5);
  qseg::ConfusionCounts sum = a;
  sum += b;
  // same pixels pooled into one call via evaluate's accumulation path
  Tensor<float> pall(2, 1, 8, 8), gall(2, 1, 8, 8);
  for (std::size_t i = 0; i < p1.numel(); ++i) {
    pall.data()[i] = p1.data()[i];
    gall.data()[i] = g1.data()[i];
    pall.data()[p1.numel() + i] = p2.data()[i];
    gall.data()[p1.numel() + i] = g2.data()[i];
  }
  auto whole = qseg::confusion(pall, gall, 0.5);
  EXPECT_EQ(whole.tp, sum.tp);
  EXPECT_EQ(whole.tn, sum.tn);
  EXPECT_EQ(whole.fp, sum.fp);
  EXPECT_EQ(whole.fn, sum.fn);
}

TEST(DiceAccuracy, Extremes) {
  qseg::ConfusionCounts perfect{10, 20, 0, 0};
  EXPECT_DOUBLE_EQ(qseg::dice_from_counts(perfect), 1.0);
  EXPECT_DOUBLE_EQ(qseg::accuracy_from_counts(perfect), 1.0);
  qseg::ConfusionCounts disjoint{0, 0, 16, 16};
  EXPECT_DOUBLE_EQ(qseg::dice_from_counts(disjoint), 0.0);
  EXPECT_DOUBLE_EQ(qseg::accuracy_from_counts(disjoint), 0.0);
  qseg::ConfusionCounts empty_both{0, 32, 0, 0};
  EXPECT_DOUBLE_EQ(qseg::dice_from_counts(empty_both), 1.0);
}

TEST(DiceAccuracy, DiceSymmetricAccuracyComplementInvariant) {
  // swapping pred/gt swaps fp<->fn, leaving dice unchanged; complementing both
  // swaps tp<->tn and fp<->fn, leaving accuracy unchanged
  qseg::ConfusionCounts c{7, 40, 5, 12};
  qseg::ConfusionCounts swapped{7, 40, 12, 5};
  EXPECT_DOUBLE_EQ(qseg::dice_from_counts(c), qseg::dice_from_counts(swapped));
  qseg::ConfusionCounts comp{40, 7, 12, 5};
  EXPECT_DOUBLE_EQ(qseg::accuracy_from_counts(c), qseg::accuracy_from_counts(comp));
}

TEST(Auc, PerfectAndChance) {
  EXPECT_DOUBLE_EQ(qseg::auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(qseg::auc({0.9, 0.1, 0.9, 0.1}, {1, 1, 0, 0}), 0.5);
  EXPECT_THROW(qseg::auc({0.5, 0.6}, {1, 1}), std::invalid_argument);
}

TEST(Auc, MatchesPairwiseOracle) {
  qseg::Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = rng.range_int(10, 1000);
    std::vector<double> scores(n);
    std::vector<std::uint8_t> labels(n);
    std::vector<int> labels_i(n);
    bool has_pos = false, has_neg = false;
    for (int i = 0; i < n; ++i) {
      // coarse grid forces plenty of ties
      scores[i] = rng.range_int(0, 20) / 20.0;
      labels[i] = rng.bernoulli(0.4) ? 1 : 0;
      labels_i[i] = labels[i];
      (labels[i] ? has_pos : has_neg) = true;
    }
    if (!has_pos || !has_neg) continue;
    const double got = qseg::auc(scores, labels);
    const double want = oracle::auc_pairwise(scores, labels_i);
    ASSERT_NEAR(got, want, 1e-9);
  }
}

TEST(Auc, InvariantUnderMonotoneTransform) {
  qseg::Rng rng(6);
  std::vector<double> scores(200);
  std::vector<std::uint8_t> labels(200);
  for (int i = 0; i < 200; ++i) {
    scores[i] = rng.uniform(-3, 3);
    labels[i] = rng.bernoulli(0.5) ? 1 : 0;
  }
  labels[0] = 1;
  labels[1] = 0;
  std::vector<double> warped = scores;
  for (auto& s : warped) s = std::exp(0.7 * s) + 2.0;
  EXPECT_NEAR(qseg::auc(scores, labels), qseg::auc(warped, labels), 1e-12);
}

TEST(Report, JsonKeysExact) {
  qseg::Rng rng(7);
  std::vector<Tensor<float>> probs, gts;
  Tensor<float> p(1, 1, 8, 8), g(1, 1, 8, 8);
  for (std::size_t i = 0; i < p.numel(); ++i) {
    p.data()[i] = static_cast<float>(rng.uniform());
    g.data()[i] = rng.bernoulli(0.4) ? 1.f : 0.f;
  }
  probs.push_back(p);
  gts.push_back(g);
  auto report = qseg::evaluate(probs, gts);
  auto j = nlohmann::json::parse(report.to_json());
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  std::vector<std::string> want = {"accuracy", "auc",       "dice", "fn",      "fp",
                                   "n_images", "threshold", "tn",   "tp"};
  std::sort(want.begin(), want.end());
  EXPECT_EQ(keys, want);
  EXPECT_EQ(j["n_images"], 1);
  EXPECT_EQ(j["tp"].get<std::int64_t>() + j["tn"].get<std::int64_t>() +
                j["fp"].get<std::int64_t>() + j["fn"].get<std::int64_t>(),
            64);
}
