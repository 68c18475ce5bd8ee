#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sembid/cluster.hpp"
#include "sembid/ingest.hpp"
#include "sembid/intent_embed.hpp"
#include "sembid/rpc_model.hpp"
#include "sembid/tokenize.hpp"

namespace sembid {

// A synthetic SEM account. Themes nest inside product types; ads of a theme
// share its words and its query pool, so co-clicks only happen within a
// theme. Revenue per click is theme-level with a landing-page penalty and
// per-ad noise, and drifts by a theme-level factor after the history period.
struct WorldConfig {
  std::size_t n_ads = 3000;
  std::size_t n_product_types = 6;
  std::size_t themes_per_type = 5;
  double multi_item_fraction = 0.2;  // these ads carry no catalog product type

  // true_rpc = theme_rpc * penalty(bounce) * exp(N(0, rpc_ad_log_sd))
  double rpc_log_mean = 0.0;
  double rpc_theme_log_sd = 0.5;
  double rpc_ad_log_sd = 0.1;
  double bounce_threshold = 0.5;
  double bounce_penalty = 0.6;  // rpc multiplier above the threshold
  double bounce_ad_sd = 0.05;   // per-ad jitter around the theme's bounce rate
  double rpc_drift_log_sd = 0.3;  // theme-level change from history to later periods

  double slope_log_mean = 3.0;  // log clicks per unit bid per period
  double slope_log_sd = 0.5;
  double feedback_sparsity = 0.0;  // share of ads whose history is hidden
  double sparse_exposure = 0.1;    // click slope multiplier for those ads

  // Per-click revenue noise; a period's revenue is lognormal around
  // clicks * rpc with log-sd noise_scale / sqrt(clicks).
  double noise_scale = 1.0;
  double conversion_rate = 0.05;  // conversions per click per unit rpc, capped at 1

  std::size_t words_per_theme = 8;
  std::size_t queries_per_theme = 60;
  std::size_t queries_per_ad = 3;

  double history_bid = 1.0;
  double history_bid_log_sd = 0.3;
  double history_duration = 1.0;   // periods of history behind the catalog
  double response_duration = 1.0;  // length of the response period
  std::uint64_t seed = 1;

  std::size_t n_themes() const { return n_product_types * themes_per_type; }
  void validate() const;
};

struct AdTruth {
  std::string ad_id;
  std::string product_type;
  std::size_t theme = 0;
  double true_rpc = 0.0;     // from the response period on
  double history_rpc = 0.0;  // during the history period
  double click_slope = 0.0;  // already includes the sparse exposure
  double bounce_rate = 0.0;
  double history_bid = 0.0;
  bool sparse = false;
};

struct World {
  WorldConfig config;
  std::vector<Ad> catalog;  // sorted by ad_id, feedback from the history period
  std::vector<SearchTermRecord> search_terms;
  std::vector<AdTruth> truth;  // parallel to catalog
  std::vector<std::string> product_types;

  const AdTruth& truth_of(const std::string& ad_id) const;
  std::map<std::string, double> history_bids() const;
};

World generate_world(const WorldConfig& cfg);

struct PeriodOptions {
  double duration = 1.0;
  bool deterministic = false;  // clicks at their expectation, no revenue noise
  double noise_scale = 1.0;
  double conversion_rate = 0.05;
  double traffic_share = 1.0;  // fraction of each ad's traffic seen by this arm
  bool history = false;        // price clicks at history_rpc
};

struct AdOutcome {
  double clicks = 0.0;
  double spend = 0.0;
  double revenue = 0.0;
  double conversions = 0.0;
  double bounces = 0.0;
};

// Clicks ~ Poisson(click_slope * bid * duration * traffic_share), spend =
// clicks * bid, revenue = clicks * rpc * lognormal noise with mean 1.
// Each ad draws from its own stream keyed by (seed, ad_id), so two arms that
// share a seed share their randomness ad by ad.
std::map<std::string, AdOutcome> simulate_period(const std::map<std::string, double>& bids, const World& world,
                                                 std::uint64_t seed, const PeriodOptions& opts);
PeriodOptions period_options(const WorldConfig& cfg);

// Observable feedback for one outcome; bounce_rate is missing without clicks.
FeatureVector outcome_feedback(const AdOutcome& o);

// The period right after the history period at the history bids: the
// response used for training and offline scoring.
std::vector<Ad> response_period(const World& world);

struct PipelineSettings {
  std::size_t vocab_size = 1000;
  std::size_t seq_len = kDefaultSequenceLength;
  TrainConfig embed;
  ClassifierConfig classifier;
  double cluster_threshold = kDefaultClusterThreshold;
  GbrtConfig gbrt;
  std::vector<int> tree_grid = {25, 50, 100, 200, 400};
  std::vector<double> l2_grid = {1e-6, 1e-4, 1e-2, 1.0};
  double rps_target = 1.0;
  std::uint64_t seed = 1;
  int threads = 1;

  // Small network and short training sized for a single core.
  static PipelineSettings desk_scale();
  void validate() const;
};

struct Pipeline {
  Vocabulary vocab;
  std::optional<EmbeddingNet> net;
  std::vector<double> loss_curve;
  PairStats pair_stats;
  std::map<std::string, Embedding> embeddings;
  std::optional<ProductTypeClassifier> classifier;
  double classifier_holdout_accuracy = 0.0;
  std::vector<AdGroup> clusters;
  std::vector<AdGroup> singletons;
  GroupingStats grouping;
};

// Vocabulary, pairs, embedding training, product-type classifier, then both
// the cluster grouping and the singleton grouping.
Pipeline build_pipeline(const World& world, const PipelineSettings& settings);

enum class GroupingMode { Singular, Cluster };
const char* to_string(GroupingMode mode);

struct EvalCell {
  double wmse = 0.0;
  double wmae = 0.0;
  double rel_wmse = 0.0;  // percent of linear-singular
  double rel_wmae = 0.0;
  double chosen = 0.0;  // l2 for the linear model, tree count for GBRT
};

struct DataOverview {
  std::size_t samples = 0;
  double missing_feedback_fraction = 0.0;  // samples without any history
  double nonempty_response_fraction = 0.0;
  double response_variance = 0.0;  // click-weighted
};

struct OfflineReport {
  // [model][mode]: model 0 = LR, 1 = GBRT; mode 0 = singular, 1 = cluster.
  EvalCell cells[2][2];
  DataOverview overview[2];
  std::size_t scored_ads = 0;  // test ads with response clicks
  std::size_t groups[2] = {0, 0};
};

// Ad-level 80/10/10 split. Group features aggregate every member's history,
// group responses only the training members. Hyperparameters are picked on
// the validation ads; each test ad is scored with its group's prediction.
OfflineReport offline_eval(const World& world, const Pipeline& pipeline, const PipelineSettings& settings);
std::string format_offline_report(const OfflineReport& report);
std::string offline_report_csv(const OfflineReport& report);

enum class ArmSplit {
  Ads,      // stratified ad-level split by product type
  Traffic,  // every ad in both arms with half its traffic each
};

struct ArmMetrics {
  std::size_t ads = 0;
  double spend = 0.0;
  double revenue = 0.0;
  double clicks = 0.0;
  double rps() const { return spend > 0.0 ? revenue / spend : 0.0; }
};

struct PeriodReport {
  ArmMetrics control, test;
  double relative_spend() const;  // test / control in percent
  double relative_rps() const;
};

struct ExperimentReport {
  ArmSplit split = ArmSplit::Ads;
  PeriodReport aa, ab;
  double spend_multiplier = 1.0;  // applied to the test arm's bids in AB
};

struct AbOptions {
  ArmSplit split = ArmSplit::Ads;
  bool match_spend = true;
  bool deterministic = false;  // expected clicks in the AA/AB periods
  // Both arms draw from the same per-ad streams. Without it each arm gets
  // its own period seed, as two campaigns would see independent traffic.
  bool common_random_numbers = true;
};

// Stratified control/test assignment: within each product type the ads are
// shuffled and dealt alternately, the first arm rotating between types.
// Returns true for test-arm ads, parallel to `ads`.
std::vector<bool> stratified_split(const std::vector<std::string>& ads, const std::vector<std::string>& strata,
                                   std::uint64_t seed);

// One AA period with singular-ad bidding on both arms, then one AB period
// with singular (control) against cluster-based (test) bidding at a common
// RPS target. Models are fit on the full history/response data.
ExperimentReport run_ab(const World& world, const Pipeline& pipeline, const PipelineSettings& settings,
                        const AbOptions& opts = {});
std::string format_experiment_report(const ExperimentReport& report);
std::string experiment_report_csv(const ExperimentReport& report);

}  // namespace sembid
