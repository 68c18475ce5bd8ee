#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "sembid/cluster.hpp"
#include "sembid/features.hpp"
#include "sembid/ingest.hpp"

namespace sembid {

struct GroupSample {
  std::string group_id;
  FeatureVector features;
  std::optional<double> rpc;  // missing when the group has no clicks
  double clicks_weight = 0.0;
  bool operator==(const GroupSample&) const = default;
};

using AdIndex = std::map<std::string, const Ad*>;
AdIndex index_ads(std::span<const Ad> ads);

// Additive stats summed over members that have them, rate stats averaged
// with click weights, contextual = group centroid. The response (rpc and
// clicks_weight) is taken from `responses` when given, else from the same
// feedback, e.g. to pair last period's features with this period's outcome.
GroupSample aggregate_features(const AdGroup& group, const AdIndex& ads, const AdIndex* responses = nullptr);
std::vector<GroupSample> aggregate_groups(std::span<const AdGroup> groups, const AdIndex& ads,
                                          const AdIndex* responses = nullptr);

// Column layout of a design row: the known feedback columns, derived
// hist_rpc (revenue / clicks), catalog extras, then contextual components.
// Missing values are NaN.
struct FeatureSchema {
  std::vector<std::string> extra;
  std::size_t contextual_dim = 0;

  static FeatureSchema from_samples(std::span<const GroupSample> samples);
  std::vector<std::string> names() const;
  std::size_t width() const { return 6 + extra.size() + contextual_dim; }
  std::vector<double> row(const FeatureVector& f) const;
  bool operator==(const FeatureSchema&) const = default;
};

struct LinearModel {
  FeatureSchema schema;
  std::vector<double> impute;  // per-column training means
  double intercept = 0.0;
  std::vector<double> coef;

  double predict(const FeatureVector& f) const;
  double predict_row(std::span<const double> row) const;
  std::string serialize() const;
  static LinearModel deserialize(const std::string& text, const std::string& source = "<linear model>");
};

// Minimizes sum_g C_g (y_g - b0 - x_g.b)^2 / sum_g C_g + l2 * |b|^2 with the
// intercept unpenalized. Samples without a response or with zero weight are
// ignored.
LinearModel fit_linear(std::span<const GroupSample> samples, double l2);

struct GbrtConfig {
  int n_trees = 200;
  int max_depth = 6;
  double learning_rate = 0.1;
  double min_leaf_weight = 1.0;  // in units of the mean sample weight
  double subsample = 1.0;        // row fraction per tree, without replacement
  std::uint64_t seed = 1;

  void validate() const;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;  // x <= threshold goes left
  bool missing_left = false;
  int left = -1;
  int right = -1;
  double value = 0.0;  // leaf value
  bool operator==(const TreeNode&) const = default;
};

struct RegressionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root
  double predict_row(std::span<const double> row) const;
  bool operator==(const RegressionTree&) const = default;
};

struct TreeEnsemble {
  FeatureSchema schema;
  double base_score = 0.0;
  double learning_rate = 0.1;
  std::vector<RegressionTree> trees;

  double predict(const FeatureVector& f) const;
  double predict_row(std::span<const double> row, std::size_t n_trees) const;
  double predict_row(std::span<const double> row) const { return predict_row(row, trees.size()); }
  std::string serialize() const;
  static TreeEnsemble deserialize(const std::string& text, const std::string& source = "<gbrt model>");
  bool operator==(const TreeEnsemble&) const = default;
};

// Squared-loss boosting with clicks_weight as the sample weight. Splits are
// exact greedy on weighted variance reduction; missing values follow the
// gain-maximizing side (the heavier child when a node saw none).
TreeEnsemble fit_gbrt(std::span<const GroupSample> samples, const GbrtConfig& cfg);

using RpcModel = std::variant<LinearModel, TreeEnsemble>;
double predict(const RpcModel& model, const FeatureVector& f);
std::string serialize_model(const RpcModel& model);
RpcModel deserialize_model(const std::string& text, const std::string& source = "<rpc model>");
void save_model(const std::string& path, const RpcModel& model);
RpcModel load_model(const std::string& path);

struct Score {
  double wmse = 0.0;
  double wmae = 0.0;
};
Score score(std::span<const double> preds, std::span<const double> y, std::span<const double> w);
// Samples must all carry a response.
Score score(std::span<const double> preds, std::span<const GroupSample> samples);

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};
// Seeded shuffle then contiguous blocks; val and test get floor(ratio * n)
// and train keeps the remainder.
SplitIndices split_indices(std::size_t n, std::uint64_t seed, double val_ratio = 0.1, double test_ratio = 0.1);

template <class T>
struct Split {
  std::vector<T> train, val, test;
};
template <class T>
Split<T> split_dataset(std::span<const T> items, std::uint64_t seed, double val_ratio = 0.1, double test_ratio = 0.1) {
  const auto idx = split_indices(items.size(), seed, val_ratio, test_ratio);
  Split<T> s;
  for (auto i : idx.train) s.train.push_back(items[i]);
  for (auto i : idx.val) s.val.push_back(items[i]);
  for (auto i : idx.test) s.test.push_back(items[i]);
  return s;
}

void write_predictions(const std::string& path, const std::vector<std::pair<std::string, double>>& preds);
std::vector<std::pair<std::string, double>> read_predictions(const std::string& path);

}  // namespace sembid
