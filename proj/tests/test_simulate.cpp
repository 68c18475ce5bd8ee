#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "sembid/error.hpp"
#include "sembid/ingest.hpp"
#include "sembid/simulate.hpp"

using namespace sembid;

namespace {

WorldConfig small_world(double sparsity, std::uint64_t seed = 5) {
  WorldConfig c;
  c.n_ads = 400;
  c.n_product_types = 2;
  c.themes_per_type = 2;
  c.queries_per_theme = 20;
  c.feedback_sparsity = sparsity;
  c.seed = seed;
  return c;
}

PipelineSettings quick_settings() {
  PipelineSettings s = PipelineSettings::desk_scale();
  s.embed.shape.d_model = 16;
  s.embed.shape.d_ff = 32;
  s.embed.epochs = 2;
  s.classifier.epochs = 10;
  s.gbrt.n_trees = 50;
  s.tree_grid = {10, 25, 50};
  s.l2_grid = {1e-4, 1.0};
  return s;
}

struct Fixture {
  World world;
  Pipeline pipeline;
  PipelineSettings settings;
};

const Fixture& sparse_fixture() {
  static const Fixture f = [] {
    Fixture x{generate_world(small_world(0.5)), {}, quick_settings()};
    x.pipeline = build_pipeline(x.world, x.settings);
    return x;
  }();
  return f;
}

const Fixture& null_fixture() {
  static const Fixture f = [] {
    Fixture x{generate_world(small_world(0.0, 6)), {}, quick_settings()};
    x.settings.cluster_threshold = -1.0;  // below any cosine distance
    x.pipeline = build_pipeline(x.world, x.settings);
    return x;
  }();
  return f;
}

bool same(const ArmMetrics& a, const ArmMetrics& b) {
  return a.ads == b.ads && a.spend == b.spend && a.revenue == b.revenue && a.clicks == b.clicks;
}

}  // namespace

TEST(WorldConfig, Validation) {
  WorldConfig c;
  EXPECT_NO_THROW(c.validate());
  c.feedback_sparsity = 1.2;
  EXPECT_THROW(c.validate(), Error);
  c = WorldConfig{};
  c.n_ads = 0;
  EXPECT_THROW(c.validate(), Error);
  c = WorldConfig{};
  c.queries_per_ad = c.queries_per_theme + 1;
  EXPECT_THROW(c.validate(), Error);
  c = WorldConfig{};
  c.noise_scale = -1.0;
  EXPECT_THROW(generate_world(c), Error);
}

TEST(GenerateWorld, DeterministicPerSeed) {
  const World a = generate_world(small_world(0.3, 9));
  const World b = generate_world(small_world(0.3, 9));
  const World c = generate_world(small_world(0.3, 10));
  EXPECT_EQ(format_catalog(a.catalog), format_catalog(b.catalog));
  EXPECT_EQ(a.search_terms, b.search_terms);
  EXPECT_NE(format_catalog(a.catalog), format_catalog(c.catalog));
}

TEST(GenerateWorld, CatalogAndReportAreValid) {
  const World w = generate_world(small_world(0.3));
  ASSERT_EQ(w.catalog.size(), 400u);
  ASSERT_EQ(w.truth.size(), 400u);
  for (std::size_t i = 0; i < w.catalog.size(); ++i) {
    EXPECT_NO_THROW(validate_ad(w.catalog[i]));
    EXPECT_EQ(w.catalog[i].ad_id, w.truth[i].ad_id);
    if (i > 0) EXPECT_LT(w.catalog[i - 1].ad_id, w.catalog[i].ad_id);
    if (w.catalog[i].items.size() == 1) {
      EXPECT_EQ(w.catalog[i].product_type, w.truth[i].product_type);
    } else {
      EXPECT_FALSE(w.catalog[i].product_type);
    }
  }
  EXPECT_NO_THROW(validate_report(w.search_terms, w.catalog));
  EXPECT_EQ(parse_catalog_text(format_catalog(w.catalog)), w.catalog);
}

TEST(GenerateWorld, SparsityHidesHistory) {
  const World dense = generate_world(small_world(0.0));
  for (const auto& ad : dense.catalog) EXPECT_TRUE(ad.feedback.clicks.has_value());
  const World hidden = generate_world(small_world(1.0));
  for (const auto& ad : hidden.catalog) EXPECT_EQ(ad.feedback, FeatureVector{});
  const World half = generate_world(small_world(0.5));
  std::size_t missing = 0;
  for (const auto& ad : half.catalog) missing += ad.feedback.clicks ? 0 : 1;
  EXPECT_GT(missing, 140u);
  EXPECT_LT(missing, 260u);
}

TEST(GenerateWorld, DisjointThemesNeverCoClick) {
  WorldConfig c = small_world(0.0);
  c.n_product_types = 1;
  const World w = generate_world(c);
  std::map<std::string, std::set<std::size_t>> query_themes;
  for (const auto& r : w.search_terms) query_themes[r.query].insert(w.truth_of(r.ad_id).theme);
  for (const auto& [q, themes] : query_themes) EXPECT_EQ(themes.size(), 1u) << q;
  const auto pairs = build_pairs(w.search_terms, w.catalog, 3);
  std::size_t positives = 0;
  for (const auto& p : pairs) {
    if (p.im < 0.0) continue;
    ++positives;
    EXPECT_EQ(w.truth_of(p.ad_i).theme, w.truth_of(p.ad_j).theme);
  }
  EXPECT_GT(positives, 0u);
}

TEST(GenerateWorld, NoDriftKeepsRpc) {
  WorldConfig c = small_world(0.0);
  c.rpc_drift_log_sd = 0.0;
  for (const auto& t : generate_world(c).truth) EXPECT_EQ(t.true_rpc, t.history_rpc);
}

TEST(SimulatePeriod, ZeroBidAndDeterministicIdentities) {
  const World w = generate_world(small_world(0.0));
  PeriodOptions o;
  o.deterministic = true;
  o.noise_scale = 0.0;
  o.duration = 2.5;
  std::map<std::string, double> bids, doubled;
  for (std::size_t i = 0; i < 50; ++i) {
    bids[w.truth[i].ad_id] = i == 0 ? 0.0 : 0.3 + 0.05 * static_cast<double>(i);
    doubled[w.truth[i].ad_id] = 2.0 * bids[w.truth[i].ad_id];
  }
  const auto out = simulate_period(bids, w, 1, o);
  const auto out2 = simulate_period(doubled, w, 1, o);
  const AdOutcome& zero = out.at(w.truth[0].ad_id);
  EXPECT_EQ(zero.clicks, 0.0);
  EXPECT_EQ(zero.spend, 0.0);
  EXPECT_EQ(zero.revenue, 0.0);
  for (std::size_t i = 1; i < 50; ++i) {
    const auto& t = w.truth[i];
    const double b = bids[t.ad_id];
    const AdOutcome& r = out.at(t.ad_id);
    EXPECT_NEAR(r.spend, t.click_slope * b * b * o.duration, 1e-12 * r.spend);
    EXPECT_NEAR(r.revenue, t.click_slope * b * o.duration * t.true_rpc, 1e-12 * r.revenue);
    EXPECT_NEAR(out2.at(t.ad_id).spend, 4.0 * r.spend, 1e-12 * r.spend);
    EXPECT_NEAR(out2.at(t.ad_id).revenue, 2.0 * r.revenue, 1e-12 * r.revenue);
  }
  std::map<std::string, double> negative{{w.truth[0].ad_id, -1.0}};
  EXPECT_THROW(simulate_period(negative, w, 1, o), Error);
  std::map<std::string, double> unknown{{"nope", 1.0}};
  EXPECT_THROW(simulate_period(unknown, w, 1, o), Error);
}

TEST(SimulatePeriod, PoissonClicksFirstPriceSpend) {
  WorldConfig c = small_world(0.0);
  c.n_ads = 4000;
  const World w = generate_world(c);
  for (double bid : {0.2, 4.0}) {  // small and large means
    std::map<std::string, double> bids;
    for (const auto& t : w.truth) bids[t.ad_id] = bid;
    const auto out = simulate_period(bids, w, 77, period_options(c));
    double clicks = 0.0, expected = 0.0, sq = 0.0;
    for (const auto& t : w.truth) {
      const AdOutcome& o = out.at(t.ad_id);
      EXPECT_EQ(o.spend, o.clicks * bid);
      EXPECT_EQ(o.clicks, std::floor(o.clicks));
      const double mean = t.click_slope * bid;
      clicks += o.clicks;
      expected += mean;
      sq += (o.clicks - mean) * (o.clicks - mean);
    }
    EXPECT_NEAR(clicks / expected, 1.0, 0.03) << bid;
    EXPECT_NEAR(sq / expected, 1.0, 0.1) << bid;  // Poisson: variance = mean
  }
}

TEST(SimulatePeriod, StreamsAreKeyedByAd) {
  const World w = generate_world(small_world(0.0));
  std::map<std::string, double> all, some;
  for (std::size_t i = 0; i < w.truth.size(); ++i) {
    all[w.truth[i].ad_id] = 1.0;
    if (i % 3 == 0) some[w.truth[i].ad_id] = 1.0;
  }
  const auto a = simulate_period(all, w, 4, period_options(w.config));
  const auto b = simulate_period(some, w, 4, period_options(w.config));
  const auto c = simulate_period(all, w, 5, period_options(w.config));
  std::size_t differs = 0;
  for (const auto& [id, o] : b) {
    EXPECT_EQ(o.clicks, a.at(id).clicks);
    EXPECT_EQ(o.revenue, a.at(id).revenue);
  }
  for (const auto& [id, o] : a) differs += o.clicks != c.at(id).clicks;
  EXPECT_GT(differs, 0u);
}

TEST(StratifiedSplit, ProportionsMatchAtScale) {
  std::vector<std::string> ids, strata;
  const std::vector<std::string> types = {"a", "b", "c", "d", "e"};
  for (std::size_t i = 0; i < 12000; ++i) {
    ids.push_back("ad" + std::to_string(i));
    strata.push_back(types[(i * i + 3 * i) % 7 % types.size()]);  // uneven sizes
  }
  const auto is_test = stratified_split(ids, strata, 3);
  std::map<std::string, std::pair<double, double>> counts;
  double n_test = 0.0, n_control = 0.0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    (is_test[i] ? counts[strata[i]].second : counts[strata[i]].first) += 1.0;
    (is_test[i] ? n_test : n_control) += 1.0;
  }
  EXPECT_LE(std::abs(n_test - n_control), static_cast<double>(types.size()));
  for (const auto& [t, c] : counts) EXPECT_LT(std::abs(c.first / n_control - c.second / n_test), 0.02) << t;
  EXPECT_EQ(is_test, stratified_split(ids, strata, 3));
  EXPECT_NE(is_test, stratified_split(ids, strata, 4));
  EXPECT_THROW(stratified_split(ids, {"x"}, 1), Error);
}

TEST(Pipeline, GroupsCoverEveryAd) {
  const auto& f = sparse_fixture();
  EXPECT_EQ(f.pipeline.singletons.size(), f.world.catalog.size());
  std::size_t members = 0;
  for (const auto& g : f.pipeline.clusters) members += g.members.size();
  EXPECT_EQ(members, f.world.catalog.size());
  EXPECT_LT(f.pipeline.clusters.size(), f.world.catalog.size());
  EXPECT_EQ(f.pipeline.embeddings.size(), f.world.catalog.size());
  EXPECT_FALSE(f.pipeline.loss_curve.empty());
}

TEST(OfflineEval, ReferenceCellAndDeterminism) {
  const auto& f = sparse_fixture();
  const auto r = offline_eval(f.world, f.pipeline, f.settings);
  EXPECT_EQ(r.cells[0][0].rel_wmse, 100.0);
  EXPECT_EQ(r.cells[0][0].rel_wmae, 100.0);
  for (const auto& row : r.cells) {
    for (const auto& c : row) {
      EXPECT_GT(c.wmse, 0.0);
      EXPECT_TRUE(std::isfinite(c.rel_wmse));
    }
  }
  EXPECT_GT(r.scored_ads, 0u);
  EXPECT_NEAR(r.overview[0].missing_feedback_fraction, 0.5, 0.1);
  EXPECT_EQ(offline_report_csv(r), offline_report_csv(offline_eval(f.world, f.pipeline, f.settings)));
  const auto table = format_offline_report(r);
  EXPECT_NE(table.find("GBRT"), std::string::npos);
  EXPECT_NE(table.find("100.0%"), std::string::npos);
}

TEST(OfflineEval, SingletonClustersMatchSingularExactly) {
  const auto& f = null_fixture();
  ASSERT_EQ(f.pipeline.clusters, f.pipeline.singletons);
  const auto r = offline_eval(f.world, f.pipeline, f.settings);
  for (int m = 0; m < 2; ++m) {
    EXPECT_EQ(r.cells[m][0].wmse, r.cells[m][1].wmse);
    EXPECT_EQ(r.cells[m][0].wmae, r.cells[m][1].wmae);
    EXPECT_EQ(r.cells[m][0].chosen, r.cells[m][1].chosen);
  }
}

TEST(RunAb, NullExperimentIsBitIdentical) {
  const auto& f = null_fixture();
  AbOptions o;
  o.split = ArmSplit::Traffic;
  const auto r = run_ab(f.world, f.pipeline, f.settings, o);
  EXPECT_TRUE(same(r.aa.control, r.aa.test));
  EXPECT_TRUE(same(r.ab.control, r.ab.test));
  EXPECT_EQ(r.spend_multiplier, 1.0);
  EXPECT_EQ(r.ab.relative_rps(), 100.0);
  EXPECT_EQ(r.ab.relative_spend(), 100.0);
  EXPECT_GT(r.ab.control.spend, 0.0);
}

TEST(RunAb, StratifiedArmsAndSpendMatching) {
  const auto& f = sparse_fixture();
  AbOptions o;
  o.deterministic = true;
  const auto r = run_ab(f.world, f.pipeline, f.settings, o);
  EXPECT_EQ(r.aa.control.ads + r.aa.test.ads, f.world.catalog.size());
  EXPECT_LE(std::abs(static_cast<double>(r.aa.control.ads) - static_cast<double>(r.aa.test.ads)), 2.0);
  EXPECT_NEAR(r.ab.relative_spend(), 100.0, 1e-9);
  EXPECT_GT(r.spend_multiplier, 0.0);

  const auto stochastic = run_ab(f.world, f.pipeline, f.settings);
  EXPECT_EQ(experiment_report_csv(stochastic), experiment_report_csv(run_ab(f.world, f.pipeline, f.settings)));
  const auto csv = experiment_report_csv(stochastic);
  EXPECT_NE(csv.find("aa,control"), std::string::npos);
  const auto table = format_experiment_report(stochastic);
  EXPECT_NE(table.find("AB test"), std::string::npos);
}
