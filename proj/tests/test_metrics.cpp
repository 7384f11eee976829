#include "doctest.h"

#include <algorithm>
#include <numeric>
#include <random>

#include "semshift/metrics.hpp"
#include "support/oracles.hpp"

using namespace semshift;
using semshift::testing::brute_force_iou;

namespace {

LabelMap map2x2(std::uint8_t a, std::uint8_t b, std::uint8_t c, std::uint8_t d) {
  LabelMap m(2, 2);
  m.labels = {a, b, c, d};
  return m;
}

LabelMap random_map(std::size_t h, std::size_t w, std::size_t c, std::mt19937_64& rng, double ignore = 0.0) {
  std::uniform_int_distribution<int> cls(0, static_cast<int>(c) - 1);
  std::bernoulli_distribution ign(ignore);
  LabelMap m(h, w);
  for (auto& k : m.labels) k = ign(rng) ? kIgnoreLabel : static_cast<std::uint8_t>(cls(rng));
  return m;
}

}  // namespace

TEST_CASE("worked 2x2 example gives 7/12") {
  ConfusionMatrix cm(2);
  cm.accumulate(map2x2(0, 1, 1, 1), map2x2(0, 0, 1, 1));
  const auto r = miou(cm);
  CHECK(r.per_class.at(0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(r.per_class.at(1) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(std::abs(r.mean - 7.0 / 12.0) <= 1e-15);
}

TEST_CASE("perfect prediction and empty support") {
  std::mt19937_64 rng(1);
  const auto gt = random_map(5, 7, 4, rng);
  ConfusionMatrix cm(4);
  cm.accumulate(gt, gt);
  std::uint64_t diag = 0;
  for (std::size_t k = 0; k < 4; ++k) diag += cm.at(k, k);
  CHECK(diag == 35);
  CHECK(cm.total() == 35);
  CHECK(miou(cm).mean == 1.0);

  ConfusionMatrix empty(4);
  empty.accumulate(gt, LabelMap(5, 7, kIgnoreLabel));
  CHECK(empty.total() == 0);
  CHECK_THROWS_AS(miou(empty), std::invalid_argument);
}

TEST_CASE("accumulation is order-independent and partition-additive") {
  std::mt19937_64 rng(2);
  std::vector<LabelMap> preds, gts;
  for (int i = 0; i < 6; ++i) {
    preds.push_back(random_map(4, 4, 3, rng));
    gts.push_back(random_map(4, 4, 3, rng, 0.2));
  }
  ConfusionMatrix fwd(3), rev(3), left(3), right(3);
  for (std::size_t i = 0; i < 6; ++i) fwd.accumulate(preds[i], gts[i]);
  for (std::size_t i = 6; i-- > 0;) rev.accumulate(preds[i], gts[i]);
  for (std::size_t i = 0; i < 2; ++i) left.accumulate(preds[i], gts[i]);
  for (std::size_t i = 2; i < 6; ++i) right.accumulate(preds[i], gts[i]);
  CHECK(fwd == rev);
  left.merge(right);
  CHECK(left == fwd);
}

TEST_CASE("miou matches a brute-force set computation on 100 random maps") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    const std::size_t c = 2 + t % 5;
    std::vector<LabelMap> preds, gts;
    const int images = 1 + t % 3;
    for (int i = 0; i < images; ++i) {
      preds.push_back(random_map(3 + t % 4, 4, c, rng));
      gts.push_back(random_map(3 + t % 4, 4, c, rng, 0.1));
    }
    ConfusionMatrix cm(c);
    for (int i = 0; i < images; ++i) cm.accumulate(preds[i], gts[i]);
    const auto ref = brute_force_iou(preds, gts, c);
    if (ref.empty()) {
      CHECK_THROWS_AS(miou(cm), std::invalid_argument);
      continue;
    }
    const auto r = miou(cm);
    REQUIRE(r.per_class.size() == ref.size());
    double mean = 0;
    for (const auto& [k, v] : ref) {
      CHECK(std::abs(r.per_class.at(k) - v) <= 1e-12);
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      mean += v;
    }
    mean /= static_cast<double>(ref.size());
    CHECK(std::abs(r.mean - mean) <= 1e-12);
  }
}

TEST_CASE("class permutation leaves mIoU unchanged") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 20; ++t) {
    const auto pred = random_map(6, 6, 4, rng);
    const auto gt = random_map(6, 6, 4, rng, 0.1);
    std::vector<std::uint8_t> perm{0, 1, 2, 3};
    std::shuffle(perm.begin(), perm.end(), rng);
    auto relabel = [&](LabelMap m) {
      for (auto& k : m.labels)
        if (k != kIgnoreLabel) k = perm[k];
      return m;
    };
    ConfusionMatrix a(4), b(4);
    a.accumulate(pred, gt);
    b.accumulate(relabel(pred), relabel(gt));
    CHECK(std::abs(miou(a).mean - miou(b).mean) <= 1e-15);
  }
}

TEST_CASE("class subsets and zero-union exclusion") {
  ConfusionMatrix cm(4);
  // Class 3 never appears; class 2 only in predictions.
  cm.accumulate(map2x2(0, 2, 1, 1), map2x2(0, 0, 1, 1));
  const auto all = miou(cm);
  CHECK(all.per_class.count(3) == 0);
  CHECK(all.per_class.at(2) == 0.0);
  CHECK(all.mean == doctest::Approx((0.5 + 1.0 + 0.0) / 3.0));
  const auto sub = miou(cm, {1, 3});
  CHECK(sub.per_class.size() == 1);
  CHECK(sub.mean == 1.0);
  CHECK_THROWS_AS(miou(cm, {}), std::invalid_argument);
  CHECK_THROWS_AS(miou(cm, {3}), std::invalid_argument);
  CHECK_THROWS_AS(miou(cm, {7}), std::invalid_argument);
}

TEST_CASE("accumulate rejects invalid maps without side effects") {
  ConfusionMatrix cm(3);
  CHECK_THROWS_AS(cm.accumulate(map2x2(0, 3, 0, 0), map2x2(0, 0, 0, 0)), std::invalid_argument);
  CHECK_THROWS_AS(cm.accumulate(map2x2(0, kIgnoreLabel, 0, 0), map2x2(0, 0, 0, 0)), std::invalid_argument);
  CHECK_THROWS_AS(cm.accumulate(map2x2(0, 0, 0, 0), map2x2(0, 4, 0, 0)), std::invalid_argument);
  CHECK_THROWS_AS(cm.accumulate(LabelMap(2, 3), LabelMap(2, 2)), std::invalid_argument);
  CHECK(cm.total() == 0);
  CHECK_THROWS_AS(ConfusionMatrix(0), std::invalid_argument);
}
