#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sembid/bid_opt.hpp"
#include "sembid/simulate.hpp"

namespace sembid {

// Everything a CLI stage reads besides its input files. The text form is one
// `key = value` per line; '#' starts a comment. A persisted config replays
// every stage exactly.
struct RunConfig {
  std::uint64_t seed = 1;  // global; stages derive their own streams from it
  int threads = 1;
  std::string out_dir = "out";

  std::string catalog_path;       // raw inputs for `ingest`
  std::string search_terms_path;
  std::string response_path;  // optional next-period catalog for train-rpc and eval

  // Shared with the simulator: tokenizer, embedding, classifier, grouping,
  // models and the RPS target. Its seed and threads mirror the globals.
  PipelineSettings pipeline;

  std::string rpc_model = "gbrt";  // gbrt | linear
  double l2 = 1e-4;                // ridge penalty for the linear model

  BidMode bid_mode = BidMode::TargetRps;
  std::optional<double> budget;

  WorldConfig world;  // world.seed follows the global seed
  std::size_t sim_seeds = 1;
  ArmSplit sim_split = ArmSplit::Ads;
  bool sim_match_spend = true;
  bool sim_deterministic = false;
  bool sim_common_random_numbers = true;

  void validate() const;
  // Copies seed and threads into the pipeline and world.
  void sync();
};

std::vector<std::string> run_config_keys();
std::string get_config_value(const RunConfig& cfg, const std::string& key);
// Raises Error for unknown keys and malformed values.
void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);
// "key=value"
void apply_override(RunConfig& cfg, const std::string& assignment);

std::string serialize_run_config(const RunConfig& cfg);
// Keys not present keep their value from `base`.
RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>",
                           const RunConfig& base = {});
RunConfig load_run_config(const std::string& path, const RunConfig& base = {});
void save_run_config(const std::string& path, const RunConfig& cfg);

// Named starting points for `simulate`: "table2" (offline comparison),
// "table3" (AA/AB experiment) and "null" (identical arms).
RunConfig preset_config(const std::string& name);
std::vector<std::string> preset_names();

const char* to_string(ArmSplit split);
ArmSplit parse_arm_split(const std::string& name);
BidMode parse_bid_mode(const std::string& name);

}  // namespace sembid
