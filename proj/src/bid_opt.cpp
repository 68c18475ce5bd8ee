#include "sembid/bid_opt.hpp"

#include <algorithm>
#include <cmath>

#include "sembid/csv.hpp"
#include "sembid/error.hpp"

namespace sembid {

namespace {

void check_groups(std::span<const GroupEconomics> groups) {
  for (const auto& g : groups) {
    if (!std::isfinite(g.rpc) || g.rpc < 0.0) throw Error("group '" + g.group_id + "' has an invalid rpc");
    if (g.click_slope && (!std::isfinite(*g.click_slope) || !(*g.click_slope > 0.0))) {
      throw Error("group '" + g.group_id + "' has a non-positive click slope");
    }
  }
}

void project(BidPlan& plan, std::span<const GroupEconomics> groups) {
  plan.spend = 0.0;
  plan.revenue = 0.0;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (!groups[i].click_slope) continue;
    const double c = *groups[i].click_slope;
    plan.spend += c * plan.bids[i] * plan.bids[i];
    plan.revenue += c * plan.bids[i] * groups[i].rpc;
  }
}

double spend_at(double s, const std::vector<double>& c, const std::vector<double>& rpc) {
  double total = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const double b = rpc[i] / s;
    total += c[i] * b * b;
  }
  return total;
}

}  // namespace

const char* to_string(BidMode mode) { return mode == BidMode::Budget ? "budget" : "target_rps"; }

BidPlan bid_target_rps(std::span<const GroupEconomics> groups, double rps_target) {
  if (!(rps_target > 0.0) || !std::isfinite(rps_target)) throw Error("rps target must be positive");
  check_groups(groups);
  BidPlan plan;
  plan.mode = BidMode::TargetRps;
  plan.common_rps = rps_target;
  for (const auto& g : groups) {
    plan.group_ids.push_back(g.group_id);
    plan.bids.push_back(g.rpc > 0.0 ? g.rpc / rps_target : 0.0);
  }
  project(plan, groups);
  return plan;
}

double solve_common_rps(double budget, const std::vector<double>& c, const std::vector<double>& rpc,
                        double tolerance) {
  if (!(budget > 0.0)) throw Error("budget must be positive");
  // spend(s) falls as 1/s^2; grow the bracket until it straddles the budget.
  double lo = 1.0, hi = 1.0;
  while (spend_at(lo, c, rpc) < budget) lo *= 0.5;
  while (spend_at(hi, c, rpc) > budget) hi *= 2.0;
  for (int it = 0; it < 2000; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    const double s = spend_at(mid, c, rpc);
    if (std::abs(s - budget) <= tolerance * budget) return mid;
    (s > budget ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

BidPlan bid_budget(std::span<const GroupEconomics> groups, double budget, BudgetSolver solver) {
  if (!(budget > 0.0) || !std::isfinite(budget)) throw Error("budget must be positive");
  check_groups(groups);
  BidPlan plan;
  plan.mode = BidMode::Budget;
  plan.budget = budget;
  std::vector<double> c, rpc;
  for (const auto& g : groups) {
    plan.group_ids.push_back(g.group_id);
    if (g.rpc > 0.0 && !g.click_slope) {
      plan.warnings.push_back("group '" + g.group_id + "' has no click slope; excluded from budget allocation");
    } else if (g.rpc > 0.0) {
      c.push_back(*g.click_slope);
      rpc.push_back(g.rpc);
    }
  }
  if (c.empty()) throw Error("no revenue-positive groups with a click slope to allocate budget to");
  double weight = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) weight += c[i] * rpc[i] * rpc[i];
  plan.common_rps = solver == BudgetSolver::ClosedForm ? std::sqrt(weight / budget) : solve_common_rps(budget, c, rpc);
  for (const auto& g : groups) {
    plan.bids.push_back(g.rpc > 0.0 && g.click_slope ? g.rpc / plan.common_rps : 0.0);
  }
  project(plan, groups);
  return plan;
}

double kkt_check(const BidPlan& plan, std::span<const GroupEconomics> groups) {
  if (plan.bids.size() != groups.size()) throw Error("plan and groups differ in length");
  std::vector<double> q;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (!(groups[i].rpc > 0.0)) continue;
    if (plan.mode == BidMode::Budget && !groups[i].click_slope) continue;
    if (!(plan.bids[i] > 0.0)) throw Error("group '" + groups[i].group_id + "' has rpc > 0 but no positive bid");
    q.push_back(groups[i].rpc / (2.0 * plan.bids[i]));
  }
  if (q.empty()) return 0.0;
  double mean = 0.0;
  for (double v : q) mean += v;
  mean /= static_cast<double>(q.size());
  double dev = 0.0;
  for (double v : q) dev = std::max(dev, std::abs(v - mean) / mean);
  return dev;
}

GridOptimum brute_force_optimum(std::span<const GroupEconomics> groups, double budget, double grid_step) {
  if (groups.empty() || groups.size() > 3) throw Error("brute force handles 1 to 3 groups");
  if (!(grid_step > 0.0) || !(budget >= 0.0)) throw Error("grid_step must be positive and budget non-negative");
  check_groups(groups);
  const std::size_t k = groups.size();
  std::vector<double> c(k), rpc(k);
  for (std::size_t i = 0; i < k; ++i) {
    if (!groups[i].click_slope) throw Error("brute force needs a click slope for every group");
    c[i] = *groups[i].click_slope;
    rpc[i] = groups[i].rpc;
  }
  GridOptimum best;
  best.bids.assign(k, 0.0);
  std::vector<double> b(k, 0.0);
  const auto max_steps = [&](std::size_t g, double remaining) {
    if (remaining <= 0.0) return 0LL;
    auto n = static_cast<long long>(std::floor(std::sqrt(remaining / c[g]) / grid_step));
    while (n > 0 && c[g] * (n * grid_step) * (n * grid_step) > remaining) --n;
    return n;
  };
  const auto recurse = [&](auto&& self, std::size_t g, double remaining) -> void {
    if (g + 1 == k) {
      b[g] = static_cast<double>(max_steps(g, remaining)) * grid_step;
      double rev = 0.0, sp = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        rev += c[i] * b[i] * rpc[i];
        sp += c[i] * b[i] * b[i];
      }
      if (rev > best.revenue) best = {b, rev, sp};
      return;
    }
    const long long n = max_steps(g, remaining);
    for (long long s = 0; s <= n; ++s) {
      b[g] = static_cast<double>(s) * grid_step;
      self(self, g + 1, remaining - c[g] * b[g] * b[g]);
    }
  };
  recurse(recurse, 0, budget);
  return best;
}

std::optional<double> estimate_click_slope(std::optional<double> clicks, std::optional<double> spend) {
  if (!clicks || !spend || !(*clicks > 0.0) || !(*spend > 0.0)) return std::nullopt;
  return *clicks * *clicks / *spend;
}

std::vector<GroupEconomics> read_economics(const std::string& path) {
  const auto t = csv::read_file(path);
  csv::require_rectangular(t);
  const auto id = t.column("group_id");
  auto rpc = t.column("rpc");
  if (!rpc) rpc = t.column("rpc_pred");
  const auto slope = t.column("click_slope");
  if (!id) throw ParseError(path, 1, "group_id", "missing group_id column");
  if (!rpc) throw ParseError(path, 1, "rpc", "missing rpc (or rpc_pred) column");
  std::vector<GroupEconomics> out;
  for (const auto& row : t.rows) {
    GroupEconomics g;
    g.group_id = row.fields[*id];
    if (g.group_id.empty()) throw ParseError(path, row.line, "group_id", "empty group id");
    const auto field = [&](std::size_t col, const char* name) {
      try {
        return csv::parse_optional_double(row.fields[col]);
      } catch (const Error& e) {
        throw ParseError(path, row.line, name, e.what());
      }
    };
    const auto r = field(*rpc, "rpc");
    if (!r) throw ParseError(path, row.line, "rpc", "missing rpc");
    if (*r < 0.0) throw ParseError(path, row.line, "rpc", "rpc must be non-negative");
    g.rpc = *r;
    if (slope) {
      g.click_slope = field(*slope, "click_slope");
      if (g.click_slope && !(*g.click_slope > 0.0)) {
        throw ParseError(path, row.line, "click_slope", "click_slope must be positive");
      }
    }
    out.push_back(std::move(g));
  }
  return out;
}

void write_economics(const std::string& path, std::span<const GroupEconomics> groups) {
  csv::Writer w(path);
  w.row({"group_id", "rpc", "click_slope"});
  for (const auto& g : groups) w.row({g.group_id, csv::format_double(g.rpc), csv::format_optional(g.click_slope)});
  w.close();
}

void write_bids(const std::string& path, const BidPlan& plan) {
  csv::Writer w(path);
  w.row({"group_id", "bid"});
  for (std::size_t i = 0; i < plan.bids.size(); ++i) w.row({plan.group_ids[i], csv::format_double(plan.bids[i])});
  w.close();
}

std::string plan_summary(const BidPlan& plan) {
  return csv::join({to_string(plan.mode), csv::format_double(plan.common_rps), csv::format_double(plan.spend),
                    csv::format_double(plan.revenue), csv::format_optional(plan.budget)});
}

void write_plan_summary(const std::string& path, const BidPlan& plan) {
  csv::write_text_file(path, "mode,common_rps,spend,revenue,budget\n" + plan_summary(plan) + "\n");
}

}  // namespace sembid
