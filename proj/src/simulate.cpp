#include "sembid/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>

#include "sembid/csv.hpp"
#include "sembid/error.hpp"
#include "sembid/random.hpp"

namespace sembid {

namespace {

double normal01(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng);  // (0, 1]
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// Knuth's product method for small means, Hormann's PTRS otherwise.
double poisson(Rng& rng, double mean) {
  if (!(mean > 0.0)) return 0.0;
  if (mean < 10.0) {
    const double limit = std::exp(-mean);
    double prod = uniform01(rng);
    double k = 0.0;
    while (prod > limit) {
      prod *= uniform01(rng);
      k += 1.0;
    }
    return k;
  }
  const double smu = std::sqrt(mean);
  const double b = 0.931 + 2.53 * smu;
  const double a = -0.059 + 0.02483 * b;
  const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
  const double vr = 0.9277 - 3.6224 / (b - 2.0);
  const double log_mean = std::log(mean);
  for (;;) {
    const double u = uniform01(rng) - 0.5;
    const double v = uniform01(rng);
    const double us = 0.5 - std::abs(u);
    const double k = std::floor((2.0 * a / us + b) * u + mean + 0.43);
    if (us >= 0.07 && v <= vr) return k;
    if (k < 0.0 || (us < 0.013 && v > us)) continue;
    if (std::log(v) + std::log(inv_alpha) - std::log(a / (us * us) + b) <= -mean + k * log_mean - std::lgamma(k + 1.0)) {
      return k;
    }
  }
}

double binomial(Rng& rng, double n, double p) {
  double k = 0.0;
  for (double i = 0.0; i < n; i += 1.0) k += uniform01(rng) < p ? 1.0 : 0.0;
  return k;
}

class WordMaker {
 public:
  explicit WordMaker(Rng& rng) : rng_(rng) {}
  std::string next() {
    static const char* const syl[] = {"ka", "lo", "mi", "ne", "ru", "ta", "vo", "si", "pe", "du",
                                      "fa", "gi", "ho", "ja", "ze", "bu", "ri", "mo", "te", "san"};
    for (;;) {
      std::string w;
      const auto n = 2 + uniform_index(rng_, 2);
      for (std::uint64_t i = 0; i < n; ++i) w += syl[uniform_index(rng_, std::size(syl))];
      if (used_.insert(w).second) return w;
    }
  }
  void reserve(const std::string& w) { used_.insert(w); }

 private:
  Rng& rng_;
  std::set<std::string> used_;
};

const std::vector<std::string>& type_names() {
  static const std::vector<std::string> names = {"lamps", "chairs", "rugs",    "desks",   "sofas",  "beds",
                                                 "mirrors", "shelves", "curtains", "tables", "clocks", "vases"};
  return names;
}

const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> words = {"new", "best", "sale", "modern", "classic", "home", "deal",
                                                 "premium", "value", "shop", "top", "free", "shipping", "quality"};
  return words;
}

struct Theme {
  std::size_t type = 0;
  double rpc = 0.0;
  double drift = 1.0;
  double bounce = 0.0;
  std::vector<std::string> words;
  std::vector<std::string> queries;
};

template <class T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[uniform_index(rng, v.size())];
}

std::string pad_id(std::size_t i, std::size_t n) {
  const std::size_t width = std::max<std::size_t>(6, std::to_string(n).size());
  std::string s = std::to_string(i);
  return "ad" + std::string(width - s.size(), '0') + s;
}

void check_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw Error(std::string(name) + " must be in [0, 1]");
}

void check_positive(double v, const char* name) {
  if (!(v > 0.0) || !std::isfinite(v)) throw Error(std::string(name) + " must be positive");
}

void check_non_negative(double v, const char* name) {
  if (!(v >= 0.0) || !std::isfinite(v)) throw Error(std::string(name) + " must be non-negative");
}

}  // namespace

void WorldConfig::validate() const {
  if (n_ads == 0 || n_product_types == 0 || themes_per_type == 0) throw Error("world counts must be positive");
  if (words_per_theme < 2 || queries_per_theme == 0 || queries_per_ad == 0) {
    throw Error("themes need at least 2 words, one query, and ads at least one query");
  }
  if (queries_per_ad > queries_per_theme) throw Error("queries_per_ad exceeds queries_per_theme");
  check_probability(multi_item_fraction, "multi_item_fraction");
  check_probability(feedback_sparsity, "feedback_sparsity");
  check_probability(bounce_threshold, "bounce_threshold");
  check_positive(bounce_penalty, "bounce_penalty");
  check_positive(sparse_exposure, "sparse_exposure");
  check_positive(history_bid, "history_bid");
  check_positive(history_duration, "history_duration");
  check_positive(response_duration, "response_duration");
  check_non_negative(rpc_theme_log_sd, "rpc_theme_log_sd");
  check_non_negative(rpc_ad_log_sd, "rpc_ad_log_sd");
  check_non_negative(bounce_ad_sd, "bounce_ad_sd");
  check_non_negative(rpc_drift_log_sd, "rpc_drift_log_sd");
  check_non_negative(slope_log_sd, "slope_log_sd");
  check_non_negative(noise_scale, "noise_scale");
  check_non_negative(conversion_rate, "conversion_rate");
  check_non_negative(history_bid_log_sd, "history_bid_log_sd");
  if (!std::isfinite(rpc_log_mean) || !std::isfinite(slope_log_mean)) throw Error("log means must be finite");
}

const AdTruth& World::truth_of(const std::string& ad_id) const {
  const auto it = std::lower_bound(truth.begin(), truth.end(), ad_id,
                                   [](const AdTruth& t, const std::string& id) { return t.ad_id < id; });
  if (it == truth.end() || it->ad_id != ad_id) throw Error("unknown ad '" + ad_id + "'");
  return *it;
}

std::map<std::string, double> World::history_bids() const {
  std::map<std::string, double> bids;
  for (const auto& t : truth) bids.emplace(t.ad_id, t.history_bid);
  return bids;
}

PeriodOptions period_options(const WorldConfig& cfg) {
  PeriodOptions o;
  o.noise_scale = cfg.noise_scale;
  o.conversion_rate = cfg.conversion_rate;
  return o;
}

std::map<std::string, AdOutcome> simulate_period(const std::map<std::string, double>& bids, const World& world,
                                                 std::uint64_t seed, const PeriodOptions& opts) {
  check_positive(opts.duration, "duration");
  check_probability(opts.traffic_share, "traffic_share");
  check_non_negative(opts.noise_scale, "noise_scale");
  std::map<std::string, AdOutcome> out;
  for (const auto& [id, bid] : bids) {
    if (!(bid >= 0.0) || !std::isfinite(bid)) throw Error("bid for '" + id + "' must be finite and non-negative");
    const AdTruth& t = world.truth_of(id);
    const double mean = t.click_slope * bid * opts.duration * opts.traffic_share;
    const double rpc = opts.history ? t.history_rpc : t.true_rpc;
    const double conv_p = std::min(1.0, opts.conversion_rate * rpc);
    Rng rng(derive_seed(seed, id));
    AdOutcome o;
    if (opts.deterministic) {
      o.clicks = mean;
      o.conversions = mean * conv_p;
      o.bounces = mean * t.bounce_rate;
    } else {
      o.clicks = poisson(rng, mean);
      o.conversions = binomial(rng, o.clicks, conv_p);
      o.bounces = binomial(rng, o.clicks, t.bounce_rate);
    }
    o.spend = o.clicks * bid;
    o.revenue = o.clicks * rpc;
    if (o.clicks > 0.0 && opts.noise_scale > 0.0) {
      const double sigma = opts.noise_scale / std::sqrt(o.clicks);
      o.revenue *= std::exp(sigma * normal01(rng) - 0.5 * sigma * sigma);
    }
    out.emplace(id, o);
  }
  return out;
}

FeatureVector outcome_feedback(const AdOutcome& o) {
  FeatureVector f;
  f.clicks = o.clicks;
  f.conversions = o.conversions;
  f.spend = o.spend;
  f.revenue = o.revenue;
  if (o.clicks > 0.0) f.bounce_rate = o.bounces / o.clicks;
  return f;
}

World generate_world(const WorldConfig& cfg) {
  cfg.validate();
  World world;
  world.config = cfg;
  Rng rng = make_rng(cfg.seed, "sim.world");
  WordMaker words(rng);
  for (const auto& w : filler_words()) words.reserve(w);

  std::vector<std::vector<std::string>> type_words(cfg.n_product_types);
  for (std::size_t p = 0; p < cfg.n_product_types; ++p) {
    const std::string name = p < type_names().size() ? type_names()[p] : words.next();
    words.reserve(name);
    world.product_types.push_back(name);
    type_words[p] = {name, words.next(), words.next()};
  }

  std::vector<Theme> themes(cfg.n_themes());
  for (std::size_t t = 0; t < themes.size(); ++t) {
    Theme& th = themes[t];
    th.type = t / cfg.themes_per_type;
    th.rpc = std::exp(cfg.rpc_log_mean + cfg.rpc_theme_log_sd * normal01(rng));
    th.drift = std::exp(cfg.rpc_drift_log_sd * normal01(rng));
    th.bounce = 0.15 + 0.7 * uniform01(rng);
    for (std::size_t k = 0; k < cfg.words_per_theme; ++k) th.words.push_back(words.next());
    std::set<std::string> seen;
    std::size_t attempts = 0;
    while (th.queries.size() < cfg.queries_per_theme) {
      std::string q = pick(th.words, rng) + " " + pick(th.words, rng);
      if (uniform01(rng) < 0.5) q += " " + pick(type_words[th.type], rng);
      if (seen.insert(q).second) th.queries.push_back(q);
      if (++attempts > 100 * cfg.queries_per_theme) throw Error("theme vocabulary too small for its query pool");
    }
  }

  struct AdQueries {
    std::vector<std::string> queries;
    std::vector<double> weights;
  };
  std::vector<AdQueries> ad_queries(cfg.n_ads);
  for (std::size_t i = 0; i < cfg.n_ads; ++i) {
    const std::size_t t = uniform_index(rng, themes.size());
    const Theme& th = themes[t];
    const auto& tw = type_words[th.type];
    Ad ad;
    ad.ad_id = pad_id(i, cfg.n_ads);
    const std::size_t n_items = uniform01(rng) < cfg.multi_item_fraction ? 2 + uniform_index(rng, 3) : 1;
    for (std::size_t k = 0; k < n_items; ++k) {
      Item item;
      item.revenue_rank = static_cast<int>(k + 1);
      item.title = pick(th.words, rng) + " " + pick(th.words, rng) + " " + pick(tw, rng);
      item.description = pick(th.words, rng) + " " + pick(th.words, rng) + " " + pick(th.words, rng) + " " +
                         pick(filler_words(), rng);
      ad.items.push_back(std::move(item));
    }
    if (n_items == 1) ad.product_type = world.product_types[th.type];

    AdTruth truth;
    truth.ad_id = ad.ad_id;
    truth.product_type = world.product_types[th.type];
    truth.theme = t;
    truth.sparse = uniform01(rng) < cfg.feedback_sparsity;
    truth.bounce_rate = std::clamp(th.bounce + cfg.bounce_ad_sd * normal01(rng), 0.0, 1.0);
    truth.history_rpc = th.rpc * (truth.bounce_rate > cfg.bounce_threshold ? cfg.bounce_penalty : 1.0) *
                        std::exp(cfg.rpc_ad_log_sd * normal01(rng));
    truth.true_rpc = truth.history_rpc * th.drift;
    truth.click_slope =
        std::exp(cfg.slope_log_mean + cfg.slope_log_sd * normal01(rng)) * (truth.sparse ? cfg.sparse_exposure : 1.0);
    truth.history_bid = cfg.history_bid * std::exp(cfg.history_bid_log_sd * normal01(rng));

    std::vector<std::size_t> pool(th.queries.size());
    for (std::size_t k = 0; k < pool.size(); ++k) pool[k] = k;
    shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t k = 0; k < cfg.queries_per_ad; ++k) {
      ad_queries[i].queries.push_back(th.queries[pool[k]]);
      ad_queries[i].weights.push_back(0.2 + 0.8 * uniform01(rng));
    }
    // A long-tail query nobody else clicks.
    ad_queries[i].queries.push_back(pick(th.words, rng) + " " + tw[0] + " " + ad.ad_id);
    ad_queries[i].weights.push_back(0.3);

    world.catalog.push_back(std::move(ad));
    world.truth.push_back(std::move(truth));
  }

  PeriodOptions hist_opts = period_options(cfg);
  hist_opts.history = true;
  hist_opts.duration = cfg.history_duration;
  const auto history =
      simulate_period(world.history_bids(), world, derive_seed(cfg.seed, "sim.period.history"), hist_opts);
  for (std::size_t i = 0; i < cfg.n_ads; ++i) {
    Ad& ad = world.catalog[i];
    const AdOutcome& o = history.at(ad.ad_id);
    ad.total_clicks = static_cast<std::uint64_t>(o.clicks);
    if (!world.truth[i].sparse) ad.feedback = outcome_feedback(o);

    const auto& aq = ad_queries[i];
    std::vector<std::uint64_t> counts(aq.queries.size(), 0);
    double total_w = 0.0;
    for (double w : aq.weights) total_w += w;
    Rng click_rng(derive_seed(cfg.seed, "sim.report", i));
    for (std::uint64_t c = 0; c < ad.total_clicks; ++c) {
      double u = uniform01(click_rng) * total_w;
      std::size_t k = 0;
      while (k + 1 < aq.weights.size() && u >= aq.weights[k]) u -= aq.weights[k++];
      ++counts[k];
    }
    for (std::size_t k = 0; k < counts.size(); ++k) {
      if (counts[k] > 0) world.search_terms.push_back({ad.ad_id, aq.queries[k], counts[k]});
    }
  }
  return world;
}

std::vector<Ad> response_period(const World& world) {
  PeriodOptions opts = period_options(world.config);
  opts.duration = world.config.response_duration;
  const auto outcome =
      simulate_period(world.history_bids(), world, derive_seed(world.config.seed, "sim.period.response"), opts);
  std::vector<Ad> ads = world.catalog;
  for (auto& ad : ads) {
    const AdOutcome& o = outcome.at(ad.ad_id);
    ad.total_clicks = static_cast<std::uint64_t>(o.clicks);
    ad.feedback = outcome_feedback(o);
  }
  return ads;
}

PipelineSettings PipelineSettings::desk_scale() {
  PipelineSettings s;
  s.embed.shape.layers = 1;
  s.embed.shape.heads = 2;
  s.seq_len = 16;
  s.embed.shape.d_model = 32;
  s.embed.shape.d_ff = 64;
  s.embed.shape.d_out = 16;
  s.embed.learning_rate = 1e-3;
  s.embed.epochs = 4;
  s.embed.negative_term = NegativeTerm::Logistic;
  s.embed.batch_size = 32;
  s.classifier.epochs = 30;
  s.gbrt.n_trees = 200;
  s.gbrt.max_depth = 4;
  s.gbrt.learning_rate = 0.05;
  s.gbrt.min_leaf_weight = 1.0;
  return s;
}

void PipelineSettings::validate() const {
  if (vocab_size < 3) throw Error("vocab_size must be at least 3");
  if (seq_len == 0) throw Error("seq_len must be positive");
  embed.validate();
  classifier.validate();
  gbrt.validate();
  if (std::isnan(cluster_threshold)) throw Error("cluster_threshold is NaN");
  if (tree_grid.empty() || l2_grid.empty()) throw Error("hyperparameter grids must be non-empty");
  for (int t : tree_grid) {
    if (t < 1) throw Error("tree counts must be positive");
  }
  for (double l : l2_grid) check_non_negative(l, "l2");
  check_positive(rps_target, "rps_target");
  if (threads < 1) throw Error("threads must be at least 1");
}

Pipeline build_pipeline(const World& world, const PipelineSettings& settings) {
  settings.validate();
  Pipeline p;
  std::vector<std::string> corpus;
  corpus.reserve(world.catalog.size());
  for (const auto& ad : world.catalog) corpus.push_back(ad_text(ad));
  p.vocab = build_vocab(corpus, settings.vocab_size);

  std::map<std::string, TokenSequence> tokens;
  for (const auto& ad : world.catalog) tokens.emplace(ad.ad_id, tokenize_ad(ad, p.vocab, settings.seq_len));
  const auto pairs = build_pairs(world.search_terms, world.catalog, derive_seed(settings.seed, "sim.pairs"),
                                 &p.pair_stats);
  TrainConfig cfg = settings.embed;
  cfg.seed = derive_seed(settings.seed, "sim.embed");
  if (pairs.empty()) {
    p.net.emplace(p.vocab.size(), settings.seq_len, cfg.shape, cfg.seed, p.vocab.hash());
  } else {
    auto trained = train_embedding(pairs, tokens, cfg, p.vocab.size(), p.vocab.hash());
    p.loss_curve = std::move(trained.loss_curve);
    p.net.emplace(std::move(trained.net));
  }
  p.embeddings = embed_catalog(*p.net, world.catalog, p.vocab, settings.threads);

  ClassifierConfig ccfg = settings.classifier;
  ccfg.seed = derive_seed(settings.seed, "sim.classifier");
  auto fitted = fit_catalog_classifier(world.catalog, p.embeddings, ccfg);
  p.classifier = std::move(fitted.classifier);
  p.classifier_holdout_accuracy = fitted.holdout_accuracy;
  const ProductTypeClassifier* clf = p.classifier ? &*p.classifier : nullptr;
  p.clusters = build_groups(world.catalog, p.embeddings, clf, settings.cluster_threshold, settings.threads, &p.grouping);
  p.singletons = singleton_groups(world.catalog, p.embeddings, clf);
  return p;
}

const char* to_string(GroupingMode mode) { return mode == GroupingMode::Cluster ? "cluster" : "singular"; }

namespace {

struct ScoredAd {
  std::size_t group = 0;
  double y = 0.0;
  double w = 0.0;
};

Score score_ads(const std::vector<double>& group_preds, const std::vector<ScoredAd>& ads) {
  std::vector<double> p, y, w;
  for (const auto& a : ads) {
    p.push_back(group_preds[a.group]);
    y.push_back(a.y);
    w.push_back(a.w);
  }
  return score(p, y, w);
}

std::map<std::string, std::size_t> member_index(const std::vector<AdGroup>& groups) {
  std::map<std::string, std::size_t> m;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (const auto& id : groups[g].members) m.emplace(id, g);
  }
  return m;
}

std::vector<GroupSample> trainable(const std::vector<GroupSample>& samples) {
  std::vector<GroupSample> out;
  for (const auto& s : samples) {
    if (s.rpc && s.clicks_weight > 0.0) out.push_back(s);
  }
  if (out.empty()) throw Error("no group has a response to train on");
  return out;
}

DataOverview overview_of(const std::vector<GroupSample>& samples) {
  DataOverview o;
  o.samples = samples.size();
  double sw = 0.0, swy = 0.0, swyy = 0.0;
  std::size_t missing = 0, nonempty = 0;
  for (const auto& s : samples) {
    if (!s.features.clicks) ++missing;
    if (s.rpc && s.clicks_weight > 0.0) {
      ++nonempty;
      sw += s.clicks_weight;
      swy += s.clicks_weight * *s.rpc;
      swyy += s.clicks_weight * *s.rpc * *s.rpc;
    }
  }
  if (!samples.empty()) {
    o.missing_feedback_fraction = static_cast<double>(missing) / static_cast<double>(samples.size());
    o.nonempty_response_fraction = static_cast<double>(nonempty) / static_cast<double>(samples.size());
  }
  if (sw > 0.0) o.response_variance = std::max(0.0, swyy / sw - (swy / sw) * (swy / sw));
  return o;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f%%", v);
  return buf;
}

}  // namespace

OfflineReport offline_eval(const World& world, const Pipeline& pipeline, const PipelineSettings& settings) {
  settings.validate();
  const auto resp_ads = response_period(world);
  const AdIndex hist = index_ads(world.catalog);
  const auto split = split_indices(world.catalog.size(), derive_seed(settings.seed, "sim.offline.split"));
  AdIndex train_resp;
  for (auto i : split.train) train_resp.emplace(resp_ads[i].ad_id, &resp_ads[i]);

  OfflineReport report;
  for (int m = 0; m < 2; ++m) {
    const auto& groups = m == 0 ? pipeline.singletons : pipeline.clusters;
    const auto samples = aggregate_groups(groups, hist, &train_resp);
    const auto train = trainable(samples);
    const auto owner = member_index(groups);
    report.groups[m] = groups.size();
    report.overview[m] = overview_of(samples);

    const auto scored = [&](const std::vector<std::size_t>& idx) {
      std::vector<ScoredAd> out;
      for (auto i : idx) {
        const Ad& r = resp_ads[i];
        if (!r.feedback.clicks || !(*r.feedback.clicks > 0.0) || !r.feedback.revenue) continue;
        out.push_back({owner.at(r.ad_id), *r.feedback.revenue / *r.feedback.clicks, *r.feedback.clicks});
      }
      return out;
    };
    const auto val = scored(split.val);
    const auto test = scored(split.test);
    if (val.empty() || test.empty()) throw Error("validation or test split has no ad with response clicks");
    report.scored_ads = test.size();

    const auto preds_of = [&](auto&& predict_one) {
      std::vector<double> preds;
      preds.reserve(samples.size());
      for (const auto& s : samples) preds.push_back(predict_one(s.features));
      return preds;
    };

    // Linear baseline over the l2 grid.
    {
      double best = std::numeric_limits<double>::infinity();
      for (double l2 : settings.l2_grid) {
        const LinearModel lm = fit_linear(train, l2);
        const auto preds = preds_of([&](const FeatureVector& f) { return lm.predict(f); });
        const Score v = score_ads(preds, val);
        if (v.wmse < best) {
          best = v.wmse;
          const Score t = score_ads(preds, test);
          report.cells[0][m] = {t.wmse, t.wmae, 0.0, 0.0, l2};
        }
      }
    }
    // One boosted fit, truncated at each grid size.
    {
      GbrtConfig cfg = settings.gbrt;
      cfg.n_trees = *std::max_element(settings.tree_grid.begin(), settings.tree_grid.end());
      cfg.seed = derive_seed(settings.seed, "sim.gbrt");
      const TreeEnsemble model = fit_gbrt(train, cfg);
      std::vector<std::vector<double>> rows;
      for (const auto& s : samples) rows.push_back(model.schema.row(s.features));
      double best = std::numeric_limits<double>::infinity();
      for (int n : settings.tree_grid) {
        std::vector<double> preds;
        for (const auto& r : rows) preds.push_back(model.predict_row(r, static_cast<std::size_t>(n)));
        const Score v = score_ads(preds, val);
        if (v.wmse < best) {
          best = v.wmse;
          const Score t = score_ads(preds, test);
          report.cells[1][m] = {t.wmse, t.wmae, 0.0, 0.0, static_cast<double>(n)};
        }
      }
    }
  }
  const EvalCell ref = report.cells[0][0];
  for (auto& row : report.cells) {
    for (auto& c : row) {
      c.rel_wmse = ref.wmse > 0.0 ? 100.0 * c.wmse / ref.wmse : 100.0;
      c.rel_wmae = ref.wmae > 0.0 ? 100.0 * c.wmae / ref.wmae : 100.0;
    }
  }
  report.cells[0][0].rel_wmse = 100.0;
  report.cells[0][0].rel_wmae = 100.0;
  return report;
}

std::string format_offline_report(const OfflineReport& r) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-6s %20s %20s\n", "", "singular", "cluster");
  os << line;
  std::snprintf(line, sizeof line, "%-6s %10s %9s %10s %9s\n", "model", "WMSE", "WMAE", "WMSE", "WMAE");
  os << line;
  const char* names[2] = {"LR", "GBRT"};
  for (int m = 0; m < 2; ++m) {
    std::snprintf(line, sizeof line, "%-6s %10s %9s %10s %9s\n", names[m], pct(r.cells[m][0].rel_wmse).c_str(),
                  pct(r.cells[m][0].rel_wmae).c_str(), pct(r.cells[m][1].rel_wmse).c_str(),
                  pct(r.cells[m][1].rel_wmae).c_str());
    os << line;
  }
  std::snprintf(line, sizeof line, "groups: singular %zu, cluster %zu; scored test ads %zu\n", r.groups[0], r.groups[1],
                r.scored_ads);
  os << line;
  return os.str();
}

std::string offline_report_csv(const OfflineReport& r) {
  std::string out = "model,mode,wmse,wmae,rel_wmse,rel_wmae,chosen\n";
  const char* names[2] = {"lr", "gbrt"};
  for (int m = 0; m < 2; ++m) {
    for (int g = 0; g < 2; ++g) {
      const auto& c = r.cells[m][g];
      out += csv::join({names[m], to_string(g == 0 ? GroupingMode::Singular : GroupingMode::Cluster),
                        csv::format_double(c.wmse), csv::format_double(c.wmae), csv::format_double(c.rel_wmse),
                        csv::format_double(c.rel_wmae), csv::format_double(c.chosen)}) +
             "\n";
    }
  }
  return out;
}

double PeriodReport::relative_spend() const {
  return control.spend > 0.0 ? 100.0 * test.spend / control.spend : 100.0;
}

double PeriodReport::relative_rps() const {
  const double c = control.rps();
  return c > 0.0 ? 100.0 * test.rps() / c : 100.0;
}

std::vector<bool> stratified_split(const std::vector<std::string>& ads, const std::vector<std::string>& strata,
                                   std::uint64_t seed) {
  if (ads.size() != strata.size()) throw Error("ads and strata differ in length");
  std::map<std::string, std::vector<std::size_t>> by_stratum;
  for (std::size_t i = 0; i < ads.size(); ++i) by_stratum[strata[i]].push_back(i);
  Rng rng = make_rng(seed, "sim.ab.split");
  std::vector<bool> is_test(ads.size(), false);
  bool first_test = false;
  for (auto& [name, idx] : by_stratum) {
    shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < idx.size(); ++k) is_test[idx[k]] = (k % 2 == 0) == first_test;
    first_test = !first_test;
  }
  return is_test;
}

namespace {

std::vector<double> fit_and_predict(const std::vector<AdGroup>& groups, const AdIndex& hist, const AdIndex& resp,
                                    const PipelineSettings& settings) {
  const auto samples = aggregate_groups(groups, hist, &resp);
  GbrtConfig cfg = settings.gbrt;
  cfg.seed = derive_seed(settings.seed, "sim.gbrt");
  const TreeEnsemble model = fit_gbrt(trainable(samples), cfg);
  std::vector<double> preds;
  for (const auto& s : samples) preds.push_back(std::max(0.0, model.predict(s.features)));
  return preds;
}

ArmMetrics run_arm(const std::map<std::string, double>& bids, const World& world, std::uint64_t seed,
                   const PeriodOptions& opts) {
  ArmMetrics m;
  m.ads = bids.size();
  for (const auto& [id, o] : simulate_period(bids, world, seed, opts)) {
    m.spend += o.spend;
    m.revenue += o.revenue;
    m.clicks += o.clicks;
  }
  return m;
}

double expected_spend(const std::map<std::string, double>& bids, const World& world, double share) {
  double s = 0.0;
  for (const auto& [id, b] : bids) s += world.truth_of(id).click_slope * b * b * share;
  return s;
}

}  // namespace

ExperimentReport run_ab(const World& world, const Pipeline& pipeline, const PipelineSettings& settings,
                        const AbOptions& opts) {
  settings.validate();
  const auto resp_ads = response_period(world);
  const AdIndex hist = index_ads(world.catalog);
  const AdIndex resp = index_ads(resp_ads);

  std::map<std::string, double> singular_bid, cluster_bid;
  const auto bids_from = [&](const std::vector<AdGroup>& groups, std::map<std::string, double>& out) {
    const auto preds = fit_and_predict(groups, hist, resp, settings);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      for (const auto& id : groups[g].members) out[id] = preds[g] / settings.rps_target;
    }
  };
  bids_from(pipeline.singletons, singular_bid);
  bids_from(pipeline.clusters, cluster_bid);

  std::vector<std::string> ids, strata;
  for (const auto& g : pipeline.singletons) {
    ids.push_back(g.members.front());
    strata.push_back(g.product_type);
  }

  PeriodOptions po = period_options(world.config);
  po.deterministic = opts.deterministic;
  std::vector<bool> in_control(ids.size(), true), in_test(ids.size(), true);
  if (opts.split == ArmSplit::Ads) {
    const auto is_test = stratified_split(ids, strata, settings.seed);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      in_control[i] = !is_test[i];
      in_test[i] = is_test[i];
    }
  } else {
    po.traffic_share = 0.5;
  }
  const auto arm_bids = [&](const std::map<std::string, double>& policy, const std::vector<bool>& member,
                            double scale) {
    std::map<std::string, double> b;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (member[i]) b.emplace(ids[i], scale * policy.at(ids[i]));
    }
    return b;
  };

  ExperimentReport report;
  report.split = opts.split;
  const std::uint64_t aa_seed = derive_seed(world.config.seed, "sim.period.aa");
  const std::uint64_t ab_seed = derive_seed(world.config.seed, "sim.period.ab");
  const auto arm_seed = [&](std::uint64_t period, const char* arm) {
    return opts.common_random_numbers ? period : derive_seed(period, arm);
  };
  report.aa.control = run_arm(arm_bids(singular_bid, in_control, 1.0), world, arm_seed(aa_seed, "control"), po);
  report.aa.test = run_arm(arm_bids(singular_bid, in_test, 1.0), world, arm_seed(aa_seed, "test"), po);

  const auto control_ab = arm_bids(singular_bid, in_control, 1.0);
  if (opts.match_spend) {
    const double target = expected_spend(control_ab, world, po.traffic_share);
    const double current = expected_spend(arm_bids(cluster_bid, in_test, 1.0), world, po.traffic_share);
    if (current > 0.0 && target > 0.0) report.spend_multiplier = std::sqrt(target / current);
  }
  report.ab.control = run_arm(control_ab, world, arm_seed(ab_seed, "control"), po);
  report.ab.test =
      run_arm(arm_bids(cluster_bid, in_test, report.spend_multiplier), world, arm_seed(ab_seed, "test"), po);
  return report;
}

std::string format_experiment_report(const ExperimentReport& r) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-8s %10s %10s %10s %10s\n", "metric", "AA ctrl", "AA test", "AB ctrl", "AB test");
  os << line;
  std::snprintf(line, sizeof line, "%-8s %10s %10s %10s %10s\n", "spend", "100.0%", pct(r.aa.relative_spend()).c_str(),
                "100.0%", pct(r.ab.relative_spend()).c_str());
  os << line;
  std::snprintf(line, sizeof line, "%-8s %10s %10s %10s %10s\n", "rps", "100.0%", pct(r.aa.relative_rps()).c_str(),
                "100.0%", pct(r.ab.relative_rps()).c_str());
  os << line;
  return os.str();
}

std::string experiment_report_csv(const ExperimentReport& r) {
  std::string out = "period,arm,ads,spend,revenue,clicks,rps,rel_spend,rel_rps\n";
  const auto add = [&](const char* period, const char* arm, const ArmMetrics& m, double rel_spend, double rel_rps) {
    out += csv::join({period, arm, std::to_string(m.ads), csv::format_double(m.spend), csv::format_double(m.revenue),
                      csv::format_double(m.clicks), csv::format_double(m.rps()), csv::format_double(rel_spend),
                      csv::format_double(rel_rps)}) +
           "\n";
  };
  add("aa", "control", r.aa.control, 100.0, 100.0);
  add("aa", "test", r.aa.test, r.aa.relative_spend(), r.aa.relative_rps());
  add("ab", "control", r.ab.control, 100.0, 100.0);
  add("ab", "test", r.ab.test, r.ab.relative_spend(), r.ab.relative_rps());
  return out;
}

}  // namespace sembid
