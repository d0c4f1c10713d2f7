#include "alseg/metrics.hpp"

#include "helpers.hpp"

#include <gtest/gtest.h>

#include <numeric>

using namespace alseg;

namespace {

ClassPixelHistogram hist(std::initializer_list<std::int64_t> v) {
  ClassPixelHistogram h(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (auto c : v) h(i++) = c;
  return h;
}

// Probability that two distinct pixels differ, by walking every unordered pair.
double pair_enumeration(const std::vector<int>& pixels) {
  std::int64_t pairs = 0, cross = 0;
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    for (std::size_t j = i + 1; j < pixels.size(); ++j) {
      ++pairs;
      cross += pixels[i] != pixels[j];
    }
  }
  return static_cast<double>(cross) / static_cast<double>(pairs);
}

// IoU per class from raw masks, no confusion matrix.
double naive_miou(const std::vector<int>& gt, const std::vector<int>& pred, int k) {
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    int inter = 0, uni = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == kIgnore) continue;
      inter += gt[i] == c && pred[i] == c;
      uni += gt[i] == c || pred[i] == c;
    }
    if (uni == 0) continue;
    sum += static_cast<double>(inter) / uni;
    ++present;
  }
  return sum / present;
}

}  // namespace

TEST(Miou, IdentityIsOne) {
  const PixelMask m(3, 3, 4, std::vector<int>{0, 1, 2, 3, 0, 1, 2, 3, 0});
  EXPECT_DOUBLE_EQ(miou(accumulate_confusion(m, m, 4)), 1.0);
}

TEST(Miou, HandCountedTwoByTwo) {
  const PixelMask gt(2, 2, 2, std::vector<int>{0, 0, 1, 1});
  const PixelMask pred(2, 2, 2, std::vector<int>{0, 1, 1, 1});
  const auto cm = accumulate_confusion(pred, gt, 2);
  const Eigen::VectorXd iou = per_class_iou(cm);
  EXPECT_EQ(iou(0), 0.5);
  EXPECT_EQ(iou(1), 2.0 / 3.0);
  EXPECT_EQ(miou(cm), (0.5 + 2.0 / 3.0) / 2.0);
  EXPECT_NEAR(miou(cm), 7.0 / 12.0, 1e-15);
}

TEST(Miou, AbsentClassesAreSkipped) {
  const PixelMask gt(1, 2, 5, std::vector<int>{0, 1});
  const PixelMask pred(1, 2, 5, std::vector<int>{0, 1});
  const auto iou = per_class_iou(accumulate_confusion(pred, gt, 5));
  EXPECT_TRUE(std::isnan(iou(4)));
  EXPECT_DOUBLE_EQ(miou(accumulate_confusion(pred, gt, 5)), 1.0);
}

TEST(Miou, IgnorePixelsAreSkipped) {
  const PixelMask gt(1, 3, 2, std::vector<int>{0, kIgnore, 1});
  const PixelMask pred(1, 3, 2, std::vector<int>{0, 0, 1});
  const auto cm = accumulate_confusion(pred, gt, 2);
  EXPECT_EQ(cm.total(), 2);
  EXPECT_DOUBLE_EQ(miou(cm), 1.0);
}

TEST(Miou, MatchesNaiveAndIsInvariantUnderRelabeling) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = std::uniform_int_distribution<int>(2, 6)(rng);
    std::uniform_int_distribution<int> cls(0, k - 1);
    std::vector<int> gt(64), pred(64);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      gt[i] = cls(rng);
      pred[i] = std::uniform_int_distribution<int>(0, 2)(rng) == 0 ? cls(rng) : gt[i];
    }
    const double base = miou(accumulate_confusion(PixelMask(8, 8, k, pred), PixelMask(8, 8, k, gt), k));
    EXPECT_NEAR(base, naive_miou(gt, pred, k), 1e-12);

    std::vector<int> perm(static_cast<std::size_t>(k));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> gt2(gt.size()), pred2(pred.size());
    for (std::size_t i = 0; i < gt.size(); ++i) {
      gt2[i] = perm[static_cast<std::size_t>(gt[i])];
      pred2[i] = perm[static_cast<std::size_t>(pred[i])];
    }
    EXPECT_NEAR(miou(accumulate_confusion(PixelMask(8, 8, k, pred2), PixelMask(8, 8, k, gt2), k)), base, 1e-12);
  }
}

TEST(Miou, EmptyConfusionIsAnError) { EXPECT_THROW(miou(ConfusionMatrix(3)), std::invalid_argument); }

TEST(Confusion, MergeAndValidation) {
  ConfusionMatrix a(2);
  a.add(0, 1, 3);
  ConfusionMatrix b(2);
  b.add(1, 1, 2);
  a += b;
  EXPECT_EQ(a.total(), 5);
  EXPECT_EQ(a.counts()(0, 1), 3);
  EXPECT_THROW(a += ConfusionMatrix(3), std::invalid_argument);
  ConfusionMatrix::Counts neg = ConfusionMatrix::Counts::Zero(2, 2);
  neg(0, 0) = -1;
  EXPECT_THROW(ConfusionMatrix{neg}, std::invalid_argument);
}

TEST(Shannon, KnownValues) {
  EXPECT_EQ(shannon_index(hist({0, 12, 0, 0})), 0.0);
  EXPECT_NEAR(shannon_index(hist({5, 5, 5, 5})), std::log(4.0), 1e-9);
  const double expect = -(0.1 * std::log(0.1) + 0.3 * std::log(0.3) + 0.6 * std::log(0.6));
  EXPECT_NEAR(shannon_index(hist({10, 30, 60})), expect, 1e-12);
  EXPECT_NEAR(shannon_index(hist({10, 30, 60})), 0.8979, 5e-5);
  EXPECT_THROW(shannon_index(hist({0, 0})), std::invalid_argument);
}

TEST(Simpson, KnownValues) {
  EXPECT_EQ(simpson_inverse_index(hist({9, 0, 0})), 0.0);
  EXPECT_NEAR(simpson_inverse_index(hist({2, 2})), 2.0 / 3.0, 1e-9);
  EXPECT_NEAR(simpson_inverse_index(hist({2, 2})), pair_enumeration({0, 0, 1, 1}), 1e-15);
  EXPECT_THROW(simpson_inverse_index(hist({1, 0})), std::invalid_argument);
}

TEST(Simpson, MatchesPairEnumerationOnSmallSamples) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<int> px(std::uniform_int_distribution<std::size_t>(2, 40)(rng));
    ClassPixelHistogram h = ClassPixelHistogram::Zero(4);
    for (auto& p : px) {
      p = std::uniform_int_distribution<int>(0, 3)(rng);
      ++h(p);
    }
    EXPECT_NEAR(simpson_inverse_index(h), pair_enumeration(px), 1e-12);
  }
}

TEST(Simpson, ApproachesGiniSimpsonForLargeCounts) {
  const ClassPixelHistogram h = hist({50000, 30000, 15000, 5000});
  const Eigen::ArrayXd p = h.cast<double>().array() / 1e5;
  EXPECT_NEAR(simpson_inverse_index(h), 1.0 - p.square().sum(), 1e-3);
}

TEST(Diversity, ReportPoolsManifestPixels) {
  const Dataset ds = test::tiny_dataset(6, 4, 4, 3, 1);
  const auto ids = ds.ids();
  const auto r = diversity_report(std::span(ids).first(3), ds);
  ClassPixelHistogram h = ClassPixelHistogram::Zero(3);
  for (std::size_t i = 0; i < 3; ++i) {
    for (int c : ds.sample(ids[i]).mask->classes()) ++h(c);
  }
  EXPECT_EQ(r.histogram, h);
  EXPECT_DOUBLE_EQ(r.shannon, shannon_index(h));
  EXPECT_DOUBLE_EQ(r.simpson, simpson_inverse_index(h));
}
