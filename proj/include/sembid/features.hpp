#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace sembid {

// Observed statistics for an ad or an ad group. Every statistic may be
// missing; missing is never folded into zero.
struct FeatureVector {
  struct Extra {
    std::string name;
    std::optional<double> value;
    bool operator==(const Extra&) const = default;
  };

  // Historical feedback.
  std::optional<double> clicks;
  std::optional<double> conversions;
  std::optional<double> spend;
  std::optional<double> revenue;
  // Landing-page activity.
  std::optional<double> bounce_rate;
  // Catalog columns beyond the known ones, in header order.
  std::vector<Extra> extra;
  // Contextual: embedding or group centroid components.
  std::vector<double> contextual;

  bool operator==(const FeatureVector&) const = default;
};

// Known feedback columns, in the order they appear in files.
inline const std::vector<std::string>& known_feedback_columns() {
  static const std::vector<std::string> cols = {"clicks", "conversions", "spend", "revenue", "bounce_rate"};
  return cols;
}

// Columns aggregated as click-weighted means rather than sums.
inline bool is_rate_column(std::string_view name) {
  return (name.size() >= 5 && name.substr(name.size() - 5) == "_rate") || name.rfind("avg_", 0) == 0;
}

}  // namespace sembid
