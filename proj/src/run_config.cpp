#include "sembid/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <functional>
#include <limits>
#include <sstream>
#include <type_traits>

#include "sembid/csv.hpp"
#include "sembid/error.hpp"

namespace sembid {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_unsigned(const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || v.empty()) throw Error("expected a non-negative integer");
  return out;
}

int parse_int(const std::string& v) {
  const long long x = csv::parse_integer(v);
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) throw Error("integer out of range");
  return static_cast<int>(x);
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error("expected true or false");
}

template <class T, class F>
std::string join_list(const std::vector<T>& xs, F fmt) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + fmt(xs[i]);
  return out;
}

template <class T, class F>
std::vector<T> split_list(const std::string& v, F parse) {
  std::vector<T> out;
  std::stringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse(trim(item)));
  if (out.empty()) throw Error("expected a comma-separated list");
  return out;
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

// `ref` maps a config to the member; the getter reuses it through a copy.
template <class Ref>
Field make(std::string key, Ref ref) {
  using T = std::remove_reference_t<decltype(ref(std::declval<RunConfig&>()))>;
  Field f;
  f.key = std::move(key);
  f.get = [ref](const RunConfig& c) {
    RunConfig copy = c;
    const T& v = ref(copy);
    if constexpr (std::is_same_v<T, bool>) {
      return std::string(v ? "true" : "false");
    } else if constexpr (std::is_same_v<T, double>) {
      return csv::format_double(v);
    } else if constexpr (std::is_same_v<T, std::optional<double>>) {
      return csv::format_optional(v);
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      return join_list(v, [](int x) { return std::to_string(x); });
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      return join_list(v, [](double x) { return csv::format_double(x); });
    } else if constexpr (std::is_same_v<T, NegativeTerm> || std::is_same_v<T, ArmSplit> ||
                         std::is_same_v<T, BidMode>) {
      return std::string(to_string(v));
    } else {
      return std::to_string(v);
    }
  };
  f.set = [ref](RunConfig& c, const std::string& s) {
    T& v = ref(c);
    if constexpr (std::is_same_v<T, bool>) {
      v = parse_bool(s);
    } else if constexpr (std::is_same_v<T, double>) {
      v = csv::parse_double(s);
    } else if constexpr (std::is_same_v<T, std::optional<double>>) {
      v = csv::parse_optional_double(s);
    } else if constexpr (std::is_same_v<T, std::string>) {
      v = s;
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      v = split_list<int>(s, parse_int);
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      v = split_list<double>(s, [](const std::string& x) { return csv::parse_double(x); });
    } else if constexpr (std::is_same_v<T, NegativeTerm>) {
      v = parse_negative_term(s);
    } else if constexpr (std::is_same_v<T, ArmSplit>) {
      v = parse_arm_split(s);
    } else if constexpr (std::is_same_v<T, BidMode>) {
      v = parse_bid_mode(s);
    } else if constexpr (std::is_same_v<T, int>) {
      v = parse_int(s);
    } else {
      v = parse_unsigned<T>(s);
    }
  };
  return f;
}

#define SEMBID_FIELD(key, expr) make(key, [](RunConfig& c) -> auto& { return expr; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      SEMBID_FIELD("seed", c.seed),
      SEMBID_FIELD("threads", c.threads),
      SEMBID_FIELD("out", c.out_dir),
      SEMBID_FIELD("input.catalog", c.catalog_path),
      SEMBID_FIELD("input.search_terms", c.search_terms_path),
      SEMBID_FIELD("input.response", c.response_path),

      SEMBID_FIELD("tokenize.vocab_size", c.pipeline.vocab_size),
      SEMBID_FIELD("tokenize.seq_len", c.pipeline.seq_len),

      SEMBID_FIELD("embed.layers", c.pipeline.embed.shape.layers),
      SEMBID_FIELD("embed.heads", c.pipeline.embed.shape.heads),
      SEMBID_FIELD("embed.d_model", c.pipeline.embed.shape.d_model),
      SEMBID_FIELD("embed.d_ff", c.pipeline.embed.shape.d_ff),
      SEMBID_FIELD("embed.d_hidden", c.pipeline.embed.shape.d_hidden),
      SEMBID_FIELD("embed.d_out", c.pipeline.embed.shape.d_out),
      SEMBID_FIELD("embed.learning_rate", c.pipeline.embed.learning_rate),
      SEMBID_FIELD("embed.adam_beta1", c.pipeline.embed.adam_beta1),
      SEMBID_FIELD("embed.adam_beta2", c.pipeline.embed.adam_beta2),
      SEMBID_FIELD("embed.adam_epsilon", c.pipeline.embed.adam_epsilon),
      SEMBID_FIELD("embed.batch_size", c.pipeline.embed.batch_size),
      SEMBID_FIELD("embed.epochs", c.pipeline.embed.epochs),
      SEMBID_FIELD("embed.negative_term", c.pipeline.embed.negative_term),

      SEMBID_FIELD("classifier.hidden", c.pipeline.classifier.hidden),
      SEMBID_FIELD("classifier.learning_rate", c.pipeline.classifier.learning_rate),
      SEMBID_FIELD("classifier.batch_size", c.pipeline.classifier.batch_size),
      SEMBID_FIELD("classifier.epochs", c.pipeline.classifier.epochs),
      SEMBID_FIELD("classifier.holdout_fraction", c.pipeline.classifier.holdout_fraction),

      SEMBID_FIELD("cluster.threshold", c.pipeline.cluster_threshold),

      SEMBID_FIELD("rpc.model", c.rpc_model),
      SEMBID_FIELD("rpc.l2", c.l2),
      SEMBID_FIELD("rpc.tree_grid", c.pipeline.tree_grid),
      SEMBID_FIELD("rpc.l2_grid", c.pipeline.l2_grid),
      SEMBID_FIELD("gbrt.n_trees", c.pipeline.gbrt.n_trees),
      SEMBID_FIELD("gbrt.max_depth", c.pipeline.gbrt.max_depth),
      SEMBID_FIELD("gbrt.learning_rate", c.pipeline.gbrt.learning_rate),
      SEMBID_FIELD("gbrt.min_leaf_weight", c.pipeline.gbrt.min_leaf_weight),
      SEMBID_FIELD("gbrt.subsample", c.pipeline.gbrt.subsample),

      SEMBID_FIELD("bid.mode", c.bid_mode),
      SEMBID_FIELD("bid.rps_target", c.pipeline.rps_target),
      SEMBID_FIELD("bid.budget", c.budget),

      SEMBID_FIELD("world.n_ads", c.world.n_ads),
      SEMBID_FIELD("world.n_product_types", c.world.n_product_types),
      SEMBID_FIELD("world.themes_per_type", c.world.themes_per_type),
      SEMBID_FIELD("world.multi_item_fraction", c.world.multi_item_fraction),
      SEMBID_FIELD("world.rpc_log_mean", c.world.rpc_log_mean),
      SEMBID_FIELD("world.rpc_theme_log_sd", c.world.rpc_theme_log_sd),
      SEMBID_FIELD("world.rpc_ad_log_sd", c.world.rpc_ad_log_sd),
      SEMBID_FIELD("world.bounce_threshold", c.world.bounce_threshold),
      SEMBID_FIELD("world.bounce_penalty", c.world.bounce_penalty),
      SEMBID_FIELD("world.bounce_ad_sd", c.world.bounce_ad_sd),
      SEMBID_FIELD("world.rpc_drift_log_sd", c.world.rpc_drift_log_sd),
      SEMBID_FIELD("world.slope_log_mean", c.world.slope_log_mean),
      SEMBID_FIELD("world.slope_log_sd", c.world.slope_log_sd),
      SEMBID_FIELD("world.feedback_sparsity", c.world.feedback_sparsity),
      SEMBID_FIELD("world.sparse_exposure", c.world.sparse_exposure),
      SEMBID_FIELD("world.noise_scale", c.world.noise_scale),
      SEMBID_FIELD("world.conversion_rate", c.world.conversion_rate),
      SEMBID_FIELD("world.words_per_theme", c.world.words_per_theme),
      SEMBID_FIELD("world.queries_per_theme", c.world.queries_per_theme),
      SEMBID_FIELD("world.queries_per_ad", c.world.queries_per_ad),
      SEMBID_FIELD("world.history_bid", c.world.history_bid),
      SEMBID_FIELD("world.history_bid_log_sd", c.world.history_bid_log_sd),
      SEMBID_FIELD("world.history_duration", c.world.history_duration),
      SEMBID_FIELD("world.response_duration", c.world.response_duration),

      SEMBID_FIELD("sim.seeds", c.sim_seeds),
      SEMBID_FIELD("sim.split", c.sim_split),
      SEMBID_FIELD("sim.match_spend", c.sim_match_spend),
      SEMBID_FIELD("sim.deterministic", c.sim_deterministic),
      SEMBID_FIELD("sim.common_random_numbers", c.sim_common_random_numbers),
  };
  return table;
}

#undef SEMBID_FIELD

const Field& find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw Error("unknown config key '" + key + "'");
}

}  // namespace

const char* to_string(ArmSplit split) { return split == ArmSplit::Traffic ? "traffic" : "ads"; }

ArmSplit parse_arm_split(const std::string& name) {
  if (name == "ads") return ArmSplit::Ads;
  if (name == "traffic") return ArmSplit::Traffic;
  throw Error("unknown arm split '" + name + "' (expected ads or traffic)");
}

BidMode parse_bid_mode(const std::string& name) {
  if (name == "target_rps") return BidMode::TargetRps;
  if (name == "budget") return BidMode::Budget;
  throw Error("unknown bid mode '" + name + "' (expected target_rps or budget)");
}

void RunConfig::sync() {
  pipeline.seed = seed;
  pipeline.threads = threads;
  world.seed = seed;
}

void RunConfig::validate() const {
  if (threads < 1) throw Error("threads must be at least 1");
  if (out_dir.empty()) throw Error("out directory must be set");
  pipeline.validate();
  world.validate();
  if (rpc_model != "gbrt" && rpc_model != "linear") throw Error("rpc.model must be gbrt or linear");
  if (!(l2 >= 0.0)) throw Error("rpc.l2 must be non-negative");
  if (budget && !(*budget > 0.0)) throw Error("bid.budget must be positive");
  if (sim_seeds < 1) throw Error("sim.seeds must be at least 1");
}

std::vector<std::string> run_config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

std::string get_config_value(const RunConfig& cfg, const std::string& key) { return find_field(key).get(cfg); }

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const Field& f = find_field(key);
  try {
    f.set(cfg, value);
  } catch (const Error& e) {
    throw Error("config key '" + key + "': " + e.what() + " (got '" + value + "')");
  }
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw Error("override '" + assignment + "' is not of the form key=value");
  set_config_value(cfg, trim(std::string_view(assignment).substr(0, eq)),
                   trim(std::string_view(assignment).substr(eq + 1)));
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::string out = "# sembid run config\n";
  std::string section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string s = dot == std::string::npos ? "" : f.key.substr(0, dot);
    if (s != section) {
      out += "\n";
      section = s;
    }
    out += f.key + " = " + f.get(cfg) + "\n";
  }
  return out;
}

RunConfig parse_run_config(const std::string& text, const std::string& source, const RunConfig& base) {
  RunConfig cfg = base;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ParseError(source, n, "", "expected key = value");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    try {
      set_config_value(cfg, key, trim(std::string_view(body).substr(eq + 1)));
    } catch (const ParseError&) {
      throw;
    } catch (const Error& e) {
      throw ParseError(source, n, key, e.what());
    }
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path, const RunConfig& base) {
  return parse_run_config(csv::read_text_file(path), path, base);
}

void save_run_config(const std::string& path, const RunConfig& cfg) {
  csv::write_text_file(path, serialize_run_config(cfg));
}

std::vector<std::string> preset_names() { return {"table2", "table3", "null"}; }

RunConfig preset_config(const std::string& name) {
  RunConfig c;
  c.pipeline = PipelineSettings::desk_scale();
  if (name == "table2" || name == "table3") {
    c.world.feedback_sparsity = 0.9;
    c.world.themes_per_type = 12;
    c.world.sparse_exposure = 0.5;
    c.pipeline.embed.epochs = 3;
    c.pipeline.cluster_threshold = 0.1;
    // Two campaigns over the same ads, each with its own traffic.
    c.sim_split = ArmSplit::Traffic;
    c.sim_common_random_numbers = false;
    c.sim_seeds = name == "table2" ? 10 : 20;
  } else if (name == "null") {
    // Every ad alone in its group and both arms on the same ads and seeds.
    c.world.feedback_sparsity = 0.0;
    c.pipeline.cluster_threshold = -1.0;
    c.sim_split = ArmSplit::Traffic;
  } else {
    std::string known;
    for (const auto& p : preset_names()) known += (known.empty() ? "" : ", ") + p;
    throw Error("unknown preset '" + name + "' (known: " + known + ")");
  }
  c.sync();
  return c;
}

}  // namespace sembid
