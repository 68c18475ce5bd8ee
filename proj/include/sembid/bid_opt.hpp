#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sembid {

// Expected clicks at bid b are click_slope * b, so under first-price
// accounting expected spend is click_slope * b^2.
struct GroupEconomics {
  std::string group_id;
  double rpc = 0.0;
  std::optional<double> click_slope;
};

enum class BidMode { TargetRps, Budget };
const char* to_string(BidMode mode);

struct BidPlan {
  std::vector<std::string> group_ids;  // input order
  std::vector<double> bids;
  BidMode mode = BidMode::TargetRps;
  double common_rps = 0.0;
  double spend = 0.0;    // projected, over groups with a click slope
  double revenue = 0.0;  // projected, same groups
  std::optional<double> budget;
  std::vector<std::string> warnings;
};

// b_g = rpc_g / rps_target.
BidPlan bid_target_rps(std::span<const GroupEconomics> groups, double rps_target);

enum class BudgetSolver { ClosedForm, Bisection };

// Maximizes projected revenue subject to projected spend <= budget. The
// optimum equalizes rpc / bid across revenue-positive groups at
// s* = sqrt(sum c rpc^2 / budget). Groups with rpc > 0 but no click slope
// are left at bid 0 with a warning.
BidPlan bid_budget(std::span<const GroupEconomics> groups, double budget,
                   BudgetSolver solver = BudgetSolver::ClosedForm);

// Bisection for the s with spend(s) == budget, spend strictly decreasing.
double solve_common_rps(double budget, const std::vector<double>& c, const std::vector<double>& rpc,
                        double tolerance = 1e-12);

// max_g |q_g - mean q| / mean q with q_g = rpc_g / (2 b_g) over groups with
// rpc > 0. Zero for an optimal plan.
double kkt_check(const BidPlan& plan, std::span<const GroupEconomics> groups);

struct GridOptimum {
  std::vector<double> bids;
  double revenue = 0.0;
  double spend = 0.0;
};

// Exhaustive search over multiples of grid_step (at most 3 groups, every
// group needs a click slope). The last group takes the largest feasible
// grid bid, which is optimal for it since revenue grows with its bid.
GridOptimum brute_force_optimum(std::span<const GroupEconomics> groups, double budget, double grid_step);

// Under first-price accounting the historical bid is spend / clicks, so the
// slope estimate clicks / bid becomes clicks^2 / spend.
std::optional<double> estimate_click_slope(std::optional<double> clicks, std::optional<double> spend);

// CSV with group_id, rpc (or rpc_pred) and an optional click_slope column.
std::vector<GroupEconomics> read_economics(const std::string& path);
void write_economics(const std::string& path, std::span<const GroupEconomics> groups);
void write_bids(const std::string& path, const BidPlan& plan);
// mode,common_rps,spend,revenue,budget
std::string plan_summary(const BidPlan& plan);
void write_plan_summary(const std::string& path, const BidPlan& plan);

}  // namespace sembid
