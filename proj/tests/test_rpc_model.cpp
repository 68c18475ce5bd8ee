#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gbrt_data.hpp"
#include "sembid/error.hpp"
#include "sembid/rpc_model.hpp"
#include "test_util.hpp"

using namespace sembid;
using sembid::test_support::make_regression_set;

namespace {

Ad fed_ad(const std::string& id, std::optional<double> clicks, std::optional<double> revenue,
          std::optional<double> bounce = std::nullopt) {
  Ad ad;
  ad.ad_id = id;
  ad.items = {{"t", "d", 1}};
  ad.feedback.clicks = clicks;
  ad.feedback.revenue = revenue;
  ad.feedback.bounce_rate = bounce;
  return ad;
}

std::vector<double> training_wmse_curve(const TreeEnsemble& m, std::span<const GroupSample> s) {
  std::vector<double> curve;
  for (std::size_t t = 0; t <= m.trees.size(); ++t) {
    std::vector<double> p;
    for (const auto& g : s) p.push_back(m.predict_row(m.schema.row(g.features), t));
    curve.push_back(score(p, s).wmse);
  }
  return curve;
}

}  // namespace

TEST(Aggregate, SumsAndRatio) {
  const std::vector<Ad> ads = {fed_ad("a", 2, 4, 0.5), fed_ad("b", 3, 6, 0.0)};
  const auto idx = index_ads(ads);
  AdGroup g{"g_0", "t", {"a", "b"}, {0.6, 0.8}};
  const auto s = aggregate_features(g, idx);
  ASSERT_TRUE(s.rpc);
  EXPECT_DOUBLE_EQ(*s.rpc, 2.0);
  EXPECT_DOUBLE_EQ(s.clicks_weight, 5.0);
  EXPECT_DOUBLE_EQ(*s.features.revenue, 10.0);
  EXPECT_DOUBLE_EQ(*s.features.bounce_rate, (2 * 0.5) / 5.0);
  EXPECT_FALSE(s.features.spend);
  EXPECT_EQ(s.features.contextual, g.centroid);
}

TEST(Aggregate, SingletonIsIdentity) {
  Ad a = fed_ad("a", 3, 7.3, 0.123456789);
  a.feedback.spend = 1.1;
  a.feedback.extra = {{"avg_position", 2.7}, {"impressions", 40.0}};
  const std::vector<Ad> ads = {a};
  const auto s = aggregate_features(AdGroup{"g", "t", {"a"}, {1.0}}, index_ads(ads));
  FeatureVector expect = a.feedback;
  expect.contextual = {1.0};
  EXPECT_EQ(s.features, expect);
  EXPECT_DOUBLE_EQ(*s.rpc, 7.3 / 3);
}

TEST(Aggregate, MissingnessPropagates) {
  const std::vector<Ad> ads = {fed_ad("a", 2, std::nullopt), fed_ad("b", std::nullopt, std::nullopt)};
  const auto s = aggregate_features(AdGroup{"g", "t", {"a", "b"}, {}}, index_ads(ads));
  EXPECT_FALSE(s.features.bounce_rate);
  EXPECT_FALSE(s.features.revenue);
  EXPECT_FALSE(s.rpc);
  const std::vector<Ad> none = {fed_ad("a", 0, 0)};
  EXPECT_FALSE(aggregate_features(AdGroup{"g", "t", {"a"}, {}}, index_ads(none)).rpc);
}

TEST(Aggregate, ResponsesFromSeparatePeriod) {
  const std::vector<Ad> hist = {fed_ad("a", 1, 1), fed_ad("b", 1, 1)};
  const std::vector<Ad> later = {fed_ad("a", 4, 12)};
  const auto hi = index_ads(hist);
  const auto li = index_ads(later);
  const auto s = aggregate_features(AdGroup{"g", "t", {"a", "b"}, {}}, hi, &li);
  EXPECT_DOUBLE_EQ(*s.features.clicks, 2.0);
  EXPECT_DOUBLE_EQ(s.clicks_weight, 4.0);
  EXPECT_DOUBLE_EQ(*s.rpc, 3.0);
  EXPECT_THROW(aggregate_features(AdGroup{"g", "t", {"zz"}, {}}, hi), Error);
}

TEST(Schema, RowLayoutAndMissing) {
  FeatureVector f;
  f.clicks = 4;
  f.revenue = 2;
  f.extra = {{"avg_x", 1.5}};
  f.contextual = {0.1, 0.2};
  GroupSample s{"g", f, 1.0, 4.0};
  const auto schema = FeatureSchema::from_samples(std::span<const GroupSample>(&s, 1));
  ASSERT_EQ(schema.width(), 9u);
  EXPECT_EQ(schema.names()[5], "hist_rpc");
  const auto r = schema.row(f);
  EXPECT_EQ(r[0], 4.0);
  EXPECT_TRUE(std::isnan(r[1]));
  EXPECT_EQ(r[5], 0.5);
  EXPECT_EQ(r[6], 1.5);
  EXPECT_EQ(r[8], 0.2);
  FeatureVector empty;
  for (double v : schema.row(empty)) EXPECT_TRUE(std::isnan(v));
  empty.contextual = {1.0};
  EXPECT_THROW(schema.row(empty), Error);
}

namespace {

GroupSample xsample(double x, double y, double w) {
  GroupSample s;
  s.group_id = "g";
  s.features.extra = {{"x", x}};
  s.rpc = y;
  s.clicks_weight = w;
  return s;
}

// Extra column "x" is the only observed feature; it sits at row index 6.
constexpr std::size_t kX = 6;

}  // namespace

TEST(Linear, HandSolvedWeightedFit) {
  const std::vector<GroupSample> s = {xsample(0, 1, 1), xsample(1, 5, 3)};
  EXPECT_THROW(fit_linear(s, 0.0), Error);  // all-missing columns make the system singular
  const auto m = fit_linear(s, 1.0);
  // Normal equations with the objective normalized by total weight:
  //   4 b0 + 3 b1 = 16,  1.5 b0 + 3.5 b1 = 7.5.
  EXPECT_NEAR(m.intercept, 67.0 / 19.0, 1e-12);
  EXPECT_NEAR(m.coef[kX], 12.0 / 19.0, 1e-12);
}

TEST(Linear, ExactLineRecovered) {
  std::vector<GroupSample> s;
  for (int i = 0; i < 12; ++i) {
    GroupSample g = xsample(i * 0.5, 3.0 - 2.0 * (i * 0.5), 1.0 + i % 4);
    g.features.clicks = 10.0 * i * i + 1.0;  // a second, independent column
    g.rpc = *g.rpc + 0.01 * *g.features.clicks;
    s.push_back(g);
  }
  // The never-observed columns impute to zero, so l2 = 0 is singular.
  EXPECT_THROW(fit_linear(s, 0.0), Error);
  const auto m = fit_linear(s, 1e-13);
  EXPECT_NEAR(m.coef[kX], -2.0, 1e-6);
  EXPECT_NEAR(m.coef[0], 0.01, 1e-8);
  EXPECT_NEAR(m.intercept, 3.0, 1e-6);
}

TEST(Linear, InterpolatesWithoutPenaltyWhenFullRank) {
  std::vector<GroupSample> s;
  Rng rng = make_rng(4, "test.linear");
  for (int i = 0; i < 30; ++i) {
    GroupSample g;
    g.group_id = "g" + std::to_string(i);
    auto& f = g.features;
    f.clicks = 1 + uniform01(rng);
    f.conversions = uniform01(rng);
    f.spend = uniform01(rng);
    f.revenue = uniform01(rng);
    f.bounce_rate = uniform01(rng);
    const double y = 1.0 + 2.0 * *f.clicks - *f.conversions + 0.5 * *f.spend + 3.0 * *f.revenue - *f.bounce_rate +
                     0.25 * (*f.revenue / *f.clicks);
    g.rpc = y;
    g.clicks_weight = 1 + uniform_index(rng, 7);
    s.push_back(g);
  }
  const auto m = fit_linear(s, 0.0);
  const std::vector<double> want = {2.0, -1.0, 0.5, 3.0, -1.0, 0.25};
  for (std::size_t j = 0; j < want.size(); ++j) EXPECT_NEAR(m.coef[j], want[j], 1e-8) << j;
  EXPECT_NEAR(m.intercept, 1.0, 1e-8);
  FeatureVector zero;
  zero.clicks = 0;
  zero.conversions = 0;
  zero.spend = 0;
  zero.revenue = 0;
  zero.bounce_rate = 0;
  // hist_rpc is undefined at zero clicks and falls back to its training mean
  EXPECT_NEAR(m.predict(zero), m.intercept + m.coef[5] * m.impute[5], 1e-12);
}

TEST(Linear, HeavyRidgeGivesWeightedMean) {
  const std::vector<GroupSample> s = {xsample(0, 1, 1), xsample(1, 5, 3), xsample(2, 2, 2)};
  const auto m = fit_linear(s, 1e12);
  EXPECT_NEAR(m.coef[kX], 0.0, 1e-9);
  EXPECT_NEAR(m.intercept, (1 * 1 + 3 * 5 + 2 * 2) / 6.0, 1e-9);
}

TEST(Linear, SerializationRoundTrips) {
  const std::vector<GroupSample> s = {xsample(0, 1, 1), xsample(1, 5, 3), xsample(2, 2, 2)};
  const RpcModel m = fit_linear(s, 0.5);
  const auto text = serialize_model(m);
  const auto back = deserialize_model(text);
  EXPECT_EQ(serialize_model(back), text);
  EXPECT_EQ(predict(back, s[1].features), predict(m, s[1].features));
}

TEST(Gbrt, SingleStumpHandFit) {
  const std::vector<GroupSample> s = {xsample(0, 0, 1), xsample(1, 2, 1)};
  GbrtConfig cfg;
  cfg.n_trees = 1;
  cfg.max_depth = 1;
  cfg.learning_rate = 1.0;
  const auto m = fit_gbrt(s, cfg);
  EXPECT_EQ(m.predict(s[0].features), 0.0);
  EXPECT_EQ(m.predict(s[1].features), 2.0);
  ASSERT_EQ(m.trees[0].nodes.size(), 3u);
  EXPECT_EQ(m.trees[0].nodes[0].feature, static_cast<int>(kX));
  EXPECT_EQ(m.trees[0].nodes[0].threshold, 0.5);
}

TEST(Gbrt, ConstantResponse) {
  std::vector<GroupSample> s;
  for (int i = 0; i < 20; ++i) s.push_back(xsample(i, 3.25, 1 + i % 3));
  const auto m = fit_gbrt(s, GbrtConfig{});
  for (const auto& g : s) EXPECT_NEAR(m.predict(g.features), 3.25, 1e-14);
  EXPECT_NEAR(training_wmse_curve(m, s)[1], 0.0, 1e-28);
}

TEST(Gbrt, TrainingLossNonIncreasing) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto s = make_regression_set(150, seed);
    GbrtConfig cfg;
    cfg.n_trees = 40;
    cfg.max_depth = 3;
    cfg.learning_rate = seed % 2 ? 1.0 : 0.3;
    const auto curve = training_wmse_curve(fit_gbrt(s, cfg), s);
    for (std::size_t t = 1; t < curve.size(); ++t) EXPECT_LE(curve[t], curve[t - 1] * (1 + 1e-12)) << t;
    EXPECT_LT(curve.back(), 0.5 * curve.front());
  }
}

TEST(Gbrt, UniformWeightsMatchUnweighted) {
  auto s = make_regression_set(120, 9);
  for (auto& g : s) g.clicks_weight = 1.0;
  GbrtConfig cfg;
  cfg.n_trees = 30;
  const auto ref = fit_gbrt(s, cfg);
  for (double w : {0.3, 7.0, 1234.5}) {
    for (auto& g : s) g.clicks_weight = w;
    const auto m = fit_gbrt(s, cfg);
    for (const auto& g : s) EXPECT_NEAR(m.predict(g.features), ref.predict(g.features), 1e-10);
  }
}

TEST(Gbrt, MissingValuesRoutedByGain) {
  // x observed for low responses, missing for high ones.
  std::vector<GroupSample> s;
  for (int i = 0; i < 10; ++i) s.push_back(xsample(i, 1.0, 1.0));
  for (int i = 0; i < 10; ++i) {
    GroupSample g = xsample(0, 9.0, 1.0);
    g.features.extra[0].value = std::nullopt;
    s.push_back(g);
  }
  GbrtConfig cfg;
  cfg.n_trees = 1;
  cfg.max_depth = 1;
  cfg.learning_rate = 1.0;
  const auto m = fit_gbrt(s, cfg);
  EXPECT_DOUBLE_EQ(m.predict(s[0].features), 1.0);
  EXPECT_DOUBLE_EQ(m.predict(s[15].features), 9.0);
  EXPECT_TRUE(std::isfinite(m.predict(FeatureVector{})));
}

TEST(Gbrt, AllMissingPredictionIsTotal) {
  const auto s = make_regression_set(80, 3);
  const auto m = fit_gbrt(s, GbrtConfig{});
  FeatureVector nothing;
  EXPECT_TRUE(std::isfinite(m.predict(nothing)));
  nothing.contextual.assign(m.schema.contextual_dim, std::nan(""));
  EXPECT_TRUE(std::isfinite(m.predict(nothing)));
}

TEST(Gbrt, DeterministicAndSerializable) {
  const auto s = make_regression_set(100, 5);
  GbrtConfig cfg;
  cfg.n_trees = 25;
  cfg.subsample = 0.7;
  cfg.seed = 3;
  const auto a = fit_gbrt(s, cfg);
  const auto b = fit_gbrt(s, cfg);
  EXPECT_EQ(a, b);
  const auto text = a.serialize();
  const auto back = TreeEnsemble::deserialize(text);
  EXPECT_EQ(back, a);
  EXPECT_EQ(back.serialize(), text);
  cfg.seed = 4;
  EXPECT_NE(fit_gbrt(s, cfg), a);
  EXPECT_THROW(TreeEnsemble::deserialize("sembid-gbrt 1\nschema 0 0\nbase_score 0x0p+0\n"), Error);
}

TEST(Gbrt, MinLeafWeightLimitsSplits) {
  const std::vector<GroupSample> s = {xsample(0, 0, 1), xsample(1, 2, 1)};
  GbrtConfig cfg;
  cfg.n_trees = 1;
  cfg.min_leaf_weight = 1.5;
  const auto m = fit_gbrt(s, cfg);
  EXPECT_EQ(m.trees[0].nodes.size(), 1u);
}

TEST(Score, HandExample) {
  const std::vector<double> p = {1, 2}, y = {1, 4}, w = {1, 3};
  const auto sc = score(p, y, w);
  EXPECT_DOUBLE_EQ(sc.wmse, 3.0);
  EXPECT_DOUBLE_EQ(sc.wmae, 1.5);
  EXPECT_EQ(score(y, y, w).wmse, 0.0);
  EXPECT_EQ(score(y, y, w).wmae, 0.0);
  const std::vector<double> one_p = {2.5}, one_y = {1.0}, one_w = {7};
  EXPECT_DOUBLE_EQ(score(one_p, one_y, one_w).wmse, 2.25);
  EXPECT_DOUBLE_EQ(score(one_p, one_y, one_w).wmae, 1.5);
  EXPECT_THROW(score(p, one_y, one_w), Error);
}

TEST(Split, SizesAndDeterminism) {
  const auto a = split_indices(100, 7);
  EXPECT_EQ(a.train.size(), 80u);
  EXPECT_EQ(a.val.size(), 10u);
  EXPECT_EQ(a.test.size(), 10u);
  const auto b = split_indices(100, 7);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  std::vector<int> seen(100, 0);
  for (const auto* part : {&a.train, &a.val, &a.test}) {
    for (auto i : *part) ++seen[i];
  }
  for (int c : seen) EXPECT_EQ(c, 1);
  const auto c = split_indices(10, 1);
  EXPECT_EQ(c.train.size(), 8u);
  EXPECT_EQ(c.val.size(), 1u);
  EXPECT_EQ(c.test.size(), 1u);
  EXPECT_EQ(split_indices(37, 1).train.size(), 31u);
  EXPECT_THROW(split_indices(9, 1), Error);
  const std::vector<int> items = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  const auto s = split_dataset(std::span<const int>(items), 1);
  EXPECT_EQ(s.train.size(), 8u);
}

TEST(Predictions, CsvRoundTrip) {
  test_support::TempDir dir;
  const std::vector<std::pair<std::string, double>> p = {{"g_0", 0.1}, {"g_1", 2.0 / 3.0}};
  write_predictions(dir.file("p.csv"), p);
  EXPECT_EQ(read_predictions(dir.file("p.csv")), p);
}
