#include <gtest/gtest.h>

#include <cmath>

#include "bid_instances.hpp"
#include "sembid/bid_opt.hpp"
#include "sembid/csv.hpp"
#include "sembid/error.hpp"
#include "test_util.hpp"

using namespace sembid;

namespace {

std::vector<GroupEconomics> econ(const std::vector<double>& c, const std::vector<double>& rpc) {
  std::vector<GroupEconomics> g;
  for (std::size_t i = 0; i < c.size(); ++i) g.push_back({"g" + std::to_string(i), rpc[i], c[i]});
  return g;
}

}  // namespace

TEST(TargetRps, DirectDivision) {
  const auto g = econ({1, 1, 1}, {2, 1, 0});
  const auto p = bid_target_rps(g, 1.0);
  EXPECT_EQ(p.bids, (std::vector<double>{2, 1, 0}));
  EXPECT_EQ(bid_target_rps(g, 2.0).bids, (std::vector<double>{1, 0.5, 0}));
  EXPECT_EQ(p.common_rps, 1.0);
  EXPECT_DOUBLE_EQ(p.spend, 5.0);
  EXPECT_THROW(bid_target_rps(g, 0.0), Error);
  EXPECT_THROW(bid_target_rps(g, -1.0), Error);
}

TEST(TargetRps, ScaleEquivariance) {
  const auto g = econ({1, 2, 3}, {0.7, 1.9, 0.2});
  auto scaled = g;
  for (auto& x : scaled) x.rpc *= 3.0;
  const auto a = bid_target_rps(g, 1.3);
  const auto b = bid_target_rps(scaled, 1.3);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(b.bids[i], 3.0 * a.bids[i], 1e-15);
}

TEST(Budget, ClosedFormExamples) {
  const auto g1 = econ({1, 1}, {2, 1});
  const auto p1 = bid_budget(g1, 5.0);
  EXPECT_NEAR(p1.common_rps, 1.0, 1e-12);
  EXPECT_NEAR(p1.bids[0], 2.0, 1e-9);
  EXPECT_NEAR(p1.bids[1], 1.0, 1e-9);
  EXPECT_NEAR(p1.spend, 5.0, 1e-9);
  EXPECT_NEAR(p1.revenue, 5.0, 1e-9);
  EXPECT_EQ(plan_summary(p1), "budget,1,5,5,5");

  const auto p2 = bid_budget(econ({1, 2}, {3, 1}), 11.0);
  EXPECT_NEAR(p2.bids[0], 3.0, 1e-9);
  EXPECT_NEAR(p2.bids[1], 1.0, 1e-9);
  EXPECT_NEAR(p2.spend, 11.0, 1e-9);
}

TEST(Budget, QuadrupledBudgetDoublesBids) {
  const auto g = econ({0.7, 1.3, 2.0}, {1.1, 0.4, 2.5});
  const auto a = bid_budget(g, 2.0);
  const auto b = bid_budget(g, 8.0);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(b.bids[i], 2.0 * a.bids[i], 1e-12);
}

TEST(Budget, EqualRpsAndExactSpend) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto inst = test_support::random_bid_instance(seed);
    for (auto solver : {BudgetSolver::ClosedForm, BudgetSolver::Bisection}) {
      const auto p = bid_budget(inst.groups, inst.budget, solver);
      EXPECT_NEAR(p.spend, inst.budget, 1e-9 * inst.budget);
      for (std::size_t i = 0; i < p.bids.size(); ++i) {
        EXPECT_NEAR(inst.groups[i].rpc / p.bids[i], p.common_rps, 1e-9 * p.common_rps);
      }
      EXPECT_LE(kkt_check(p, inst.groups), 1e-9);
    }
  }
}

TEST(Budget, SolversAgree) {
  const auto g = econ({0.3, 4, 1}, {5, 0.01, 1});
  const auto a = bid_budget(g, 3.3);
  const auto b = bid_budget(g, 3.3, BudgetSolver::Bisection);
  EXPECT_NEAR(a.common_rps, b.common_rps, 1e-11 * a.common_rps);
}

TEST(Budget, ExclusionsAndErrors) {
  std::vector<GroupEconomics> g = {{"a", 2.0, 1.0}, {"b", 1.0, std::nullopt}, {"c", 0.0, 1.0}};
  const auto p = bid_budget(g, 4.0);
  EXPECT_EQ(p.bids[1], 0.0);
  EXPECT_EQ(p.bids[2], 0.0);
  EXPECT_NEAR(p.bids[0], 2.0, 1e-12);
  ASSERT_EQ(p.warnings.size(), 1u);
  EXPECT_NE(p.warnings[0].find("'b'"), std::string::npos);
  EXPECT_THROW(bid_budget(econ({1, 1}, {0, 0}), 1.0), Error);
  EXPECT_THROW(bid_budget(econ({1}, {1}), 0.0), Error);
  EXPECT_THROW(bid_budget(econ({1}, {-1}), 1.0), Error);
  EXPECT_THROW(bid_budget(econ({0}, {1}), 1.0), Error);
}

TEST(Kkt, PerturbationAndSingleGroup) {
  const auto g = econ({1, 1}, {2, 1});
  auto p = bid_budget(g, 5.0);
  EXPECT_LE(kkt_check(p, g), 1e-12);
  p.bids[0] *= 1.1;
  const double dev = kkt_check(p, g);
  EXPECT_GT(dev, 0.04);
  EXPECT_NEAR(dev, 0.5 * (0.5 - 0.5 / 1.1) / (0.5 * (0.5 + 0.5 / 1.1)), 1e-12);
  const auto one = econ({2}, {3});
  EXPECT_EQ(kkt_check(bid_budget(one, 1.0), one), 0.0);
}

TEST(BruteForce, MatchesClosedFormExample) {
  const auto g = econ({1, 1}, {2, 1});
  const auto bf = brute_force_optimum(g, 5.0, 0.01);
  const auto p = bid_budget(g, 5.0);
  EXPECT_LE(bf.spend, 5.0);
  EXPECT_LE(bf.revenue, p.revenue * (1 + 1e-12));
  EXPECT_GE(bf.revenue, p.revenue * (1 - 0.005));
}

TEST(BruteForce, ZeroBudgetAndDominantGroup) {
  const auto g = econ({1, 1}, {2, 1});
  const auto z = brute_force_optimum(g, 0.0, 0.01);
  EXPECT_EQ(z.bids, (std::vector<double>{0, 0}));
  const auto d = econ({1, 1}, {100, 0.01});
  const auto p = bid_budget(d, 4.0);
  // Any single-group allocation of the whole budget earns at most this.
  EXPECT_GE(p.revenue, 2.0 * 100);
  EXPECT_GE(p.revenue, 2.0 * 0.01);
  const auto bf = brute_force_optimum(d, 4.0, 0.01);
  EXPECT_LE(bf.revenue, p.revenue * (1 + 1e-12));
  EXPECT_GT(bf.bids[0], 1.99);
}

TEST(BruteForce, NeverBeatsSolverOnRandomInstances) {
  for (std::uint64_t seed = 100; seed < 115; ++seed) {
    const auto inst = test_support::random_bid_instance(seed);
    const auto p = bid_budget(inst.groups, inst.budget);
    const auto bf = brute_force_optimum(inst.groups, inst.budget, 0.01);
    EXPECT_LE(bf.spend, inst.budget);
    EXPECT_LE(bf.revenue, p.revenue * 1.005);
    EXPECT_GE(bf.revenue, p.revenue * 0.99);
  }
  EXPECT_THROW(brute_force_optimum(econ({1, 1, 1, 1}, {1, 1, 1, 1}), 1.0, 0.1), Error);
}

TEST(ClickSlope, Estimator) {
  // 20 clicks costing 40: average bid 2, slope 20 / 2 = 10.
  EXPECT_DOUBLE_EQ(*estimate_click_slope(20.0, 40.0), 10.0);
  EXPECT_FALSE(estimate_click_slope(0.0, 1.0));
  EXPECT_FALSE(estimate_click_slope(std::nullopt, 1.0));
  EXPECT_FALSE(estimate_click_slope(3.0, 0.0));
}

TEST(BidFiles, RoundTripAndFormats) {
  test_support::TempDir dir;
  std::vector<GroupEconomics> g = {{"a", 2.0, 1.0}, {"b", 1.0, std::nullopt}};
  write_economics(dir.file("e.csv"), g);
  const auto back = read_economics(dir.file("e.csv"));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].click_slope, 1.0);
  EXPECT_FALSE(back[1].click_slope);
  csv::write_text_file(dir.file("p.csv"), "group_id,rpc_pred\nx,1.5\n");
  EXPECT_EQ(read_economics(dir.file("p.csv"))[0].rpc, 1.5);
  csv::write_text_file(dir.file("bad.csv"), "group_id,rpc\nx,-1\n");
  EXPECT_THROW(read_economics(dir.file("bad.csv")), ParseError);
  const auto plan = bid_target_rps(g, 2.0);
  write_bids(dir.file("bids.csv"), plan);
  EXPECT_EQ(csv::read_text_file(dir.file("bids.csv")), "group_id,bid\na,1\nb,0.5\n");
  EXPECT_EQ(plan_summary(plan), "target_rps,2,1,2,");
}
