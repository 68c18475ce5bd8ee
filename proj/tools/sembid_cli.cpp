// sembid: staged command-line pipeline. Each subcommand reads its inputs from
// the output directory of the previous stage and writes its own files there.

#include <CLI11.hpp>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <thread>

#include "sembid/bid_opt.hpp"
#include "sembid/cluster.hpp"
#include "sembid/csv.hpp"
#include "sembid/error.hpp"
#include "sembid/ingest.hpp"
#include "sembid/intent_embed.hpp"
#include "sembid/random.hpp"
#include "sembid/rpc_model.hpp"
#include "sembid/run_config.hpp"
#include "sembid/simulate.hpp"
#include "sembid/tokenize.hpp"

namespace fs = std::filesystem;
using namespace sembid;

namespace {

struct Globals {
  std::string config_path;
  std::string preset;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<std::string> out;
};

struct StageFlags {
  std::optional<std::string> catalog, search_terms, response, groups, model, mode, split;
  std::optional<double> budget, rps_target, threshold;
  std::optional<int> epochs;
  std::optional<std::size_t> seeds;
  bool emit_world = false;
};

std::string out_file(const RunConfig& c, const std::string& name) { return (fs::path(c.out_dir) / name).string(); }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string stage_seed_note(const RunConfig& c) { return "seed " + std::to_string(c.seed); }

void require_file(const std::string& path, const std::string& hint) {
  if (!fs::exists(path)) throw Error("missing input " + path + " (" + hint + ")");
}

std::map<std::string, TokenSequence> tokenize_catalog(const std::vector<Ad>& ads, const Vocabulary& vocab,
                                                      std::size_t seq_len) {
  std::map<std::string, TokenSequence> tokens;
  for (const auto& ad : ads) tokens.emplace(ad.ad_id, tokenize_ad(ad, vocab, seq_len));
  return tokens;
}

std::vector<Ad> load_catalog(const RunConfig& c) {
  const auto path = out_file(c, "catalog.csv");
  require_file(path, "run ingest first");
  return parse_catalog(path);
}

std::vector<SearchTermRecord> load_search_terms(const RunConfig& c) {
  const auto path = out_file(c, "search_terms.csv");
  require_file(path, "run ingest first");
  return parse_search_terms(path);
}

Vocabulary load_vocab(const RunConfig& c) {
  const auto path = out_file(c, "vocab.txt");
  require_file(path, "run ingest first");
  return Vocabulary::load(path);
}

std::map<std::string, Embedding> load_embeddings(const RunConfig& c) {
  const auto path = out_file(c, "embeddings.csv");
  require_file(path, "run embed first");
  return read_embeddings(path);
}

std::vector<AdGroup> load_groups(const RunConfig& c, const std::map<std::string, Embedding>& emb) {
  const auto path = out_file(c, "groups.csv");
  require_file(path, "run cluster first");
  return read_groups(path, &emb);
}

// ---- stages -------------------------------------------------------------

std::string run_ingest(const RunConfig& c) {
  if (c.catalog_path.empty() || c.search_terms_path.empty()) {
    throw Error("ingest needs input.catalog and input.search_terms (or --catalog/--search-terms)");
  }
  const auto ads = parse_catalog(c.catalog_path);
  const auto records = parse_search_terms(c.search_terms_path);
  validate_report(records, ads);
  std::vector<std::string> corpus;
  for (const auto& ad : ads) corpus.push_back(ad_text(ad));
  const Vocabulary vocab = build_vocab(corpus, c.pipeline.vocab_size);
  write_catalog(out_file(c, "catalog.csv"), ads);
  write_search_terms(out_file(c, "search_terms.csv"), records);
  vocab.save(out_file(c, "vocab.txt"));
  return "ingest: " + std::to_string(ads.size()) + " ads, " + std::to_string(records.size()) +
         " search-term rows, vocabulary " + std::to_string(vocab.size());
}

std::string run_pairs(const RunConfig& c) {
  const auto ads = load_catalog(c);
  const auto records = load_search_terms(c);
  PairStats stats;
  const auto pairs = build_pairs(records, ads, derive_seed(c.seed, "stage.pairs"), &stats);
  write_pairs(out_file(c, "pairs.csv"), pairs);
  return "pairs: " + std::to_string(stats.positives) + " positive, " + std::to_string(stats.negatives) +
         " negative, mean positive im " + fmt(stats.mean_positive_im);
}

std::string run_train_embed(const RunConfig& c) {
  const auto ads = load_catalog(c);
  const Vocabulary vocab = load_vocab(c);
  const auto pairs_path = out_file(c, "pairs.csv");
  require_file(pairs_path, "run pairs first");
  const auto pairs = parse_pairs(pairs_path);
  if (pairs.empty()) throw Error("no training pairs: the search-term report has no co-clicked queries");
  const auto tokens = tokenize_catalog(ads, vocab, c.pipeline.seq_len);
  TrainConfig cfg = c.pipeline.embed;
  cfg.seed = derive_seed(c.seed, "stage.embed");
  const auto result = train_embedding(pairs, tokens, cfg, vocab.size(), vocab.hash());
  result.net.save(out_file(c, "embed_model.txt"));
  csv::Writer w(out_file(c, "loss_curve.csv"));
  w.row({"epoch", "loss"});
  for (std::size_t e = 0; e < result.loss_curve.size(); ++e) {
    w.row({std::to_string(e + 1), csv::format_double(result.loss_curve[e])});
  }
  w.close();
  const double last = result.loss_curve.empty() ? 0.0 : result.loss_curve.back();
  return "train-embed: " + std::to_string(pairs.size()) + " pairs, " + std::to_string(cfg.epochs) +
         " epochs, final loss " + fmt(last) + ", " + std::to_string(result.net.parameter_count()) + " parameters";
}

std::string run_embed(const RunConfig& c) {
  const auto ads = load_catalog(c);
  const Vocabulary vocab = load_vocab(c);
  const auto model_path = out_file(c, "embed_model.txt");
  require_file(model_path, "run train-embed first");
  const EmbeddingNet net = EmbeddingNet::load(model_path);
  if (net.vocab_hash() != vocab.hash()) throw Error("embedding model was trained on a different vocabulary");
  const auto emb = embed_catalog(net, ads, vocab, c.threads);
  write_embeddings(out_file(c, "embeddings.csv"), emb);
  return "embed: " + std::to_string(emb.size()) + " ads, dimension " + std::to_string(net.shape().d_out);
}

std::string run_cluster(const RunConfig& c) {
  const auto ads = load_catalog(c);
  const auto emb = load_embeddings(c);
  ClassifierConfig ccfg = c.pipeline.classifier;
  ccfg.seed = derive_seed(c.seed, "stage.classifier");
  const auto fitted = fit_catalog_classifier(ads, emb, ccfg);
  const auto clf_path = out_file(c, "classifier.txt");
  if (fitted.classifier) {
    fitted.classifier->save(clf_path);
  } else if (fs::exists(clf_path)) {
    fs::remove(clf_path);
  }
  GroupingStats stats;
  const auto groups = build_groups(ads, emb, fitted.classifier ? &*fitted.classifier : nullptr,
                                   c.pipeline.cluster_threshold, c.threads, &stats);
  write_groups(out_file(c, "groups.csv"), groups);
  return "cluster: " + std::to_string(stats.ads) + " ads in " + std::to_string(stats.groups) + " groups over " +
         std::to_string(stats.product_types) + " product types, " + std::to_string(stats.classified) +
         " classified (holdout accuracy " + fmt(fitted.holdout_accuracy) + ")";
}

std::string run_train_rpc(const RunConfig& c) {
  const auto ads = load_catalog(c);
  const auto emb = load_embeddings(c);
  const auto groups = load_groups(c, emb);
  const AdIndex hist = index_ads(ads);
  std::vector<Ad> response;
  AdIndex resp;
  if (!c.response_path.empty()) {
    response = parse_catalog(c.response_path);
    resp = index_ads(response);
  }
  const auto samples = aggregate_groups(groups, hist, c.response_path.empty() ? nullptr : &resp);
  std::vector<GroupSample> train;
  for (const auto& s : samples) {
    if (s.rpc && s.clicks_weight > 0.0) train.push_back(s);
  }
  if (train.empty()) throw Error("no group has response clicks to train on");
  RpcModel model;
  if (c.rpc_model == "linear") {
    model = fit_linear(train, c.l2);
  } else {
    GbrtConfig g = c.pipeline.gbrt;
    g.seed = derive_seed(c.seed, "stage.gbrt");
    model = fit_gbrt(train, g);
  }
  save_model(out_file(c, "rpc_model.txt"), model);

  std::vector<std::pair<std::string, double>> preds;
  std::vector<GroupEconomics> econ;
  std::vector<double> train_preds;
  for (const auto& s : samples) {
    const double p = std::max(0.0, predict(model, s.features));
    preds.emplace_back(s.group_id, p);
    econ.push_back({s.group_id, p, estimate_click_slope(s.features.clicks, s.features.spend)});
    if (s.rpc && s.clicks_weight > 0.0) train_preds.push_back(p);
  }
  write_predictions(out_file(c, "group_predictions.csv"), preds);
  write_economics(out_file(c, "economics.csv"), econ);
  const Score fit = score(train_preds, train);
  return "train-rpc: " + c.rpc_model + " on " + std::to_string(train.size()) + " of " +
         std::to_string(samples.size()) + " groups, training wmse " + fmt(fit.wmse) + ", wmae " + fmt(fit.wmae);
}

std::string run_eval(const RunConfig& c) {
  const auto emb = load_embeddings(c);
  const auto groups = load_groups(c, emb);
  const auto preds_path = out_file(c, "group_predictions.csv");
  require_file(preds_path, "run train-rpc first");
  std::map<std::string, double> group_pred;
  for (const auto& [id, p] : read_predictions(preds_path)) group_pred[id] = p;
  const auto ads = c.response_path.empty() ? load_catalog(c) : parse_catalog(c.response_path);
  const AdIndex idx = index_ads(ads);
  std::vector<double> p, y, w;
  for (const auto& g : groups) {
    const auto it = group_pred.find(g.group_id);
    if (it == group_pred.end()) throw Error("group '" + g.group_id + "' has no prediction");
    for (const auto& id : g.members) {
      const auto a = idx.find(id);
      if (a == idx.end()) throw Error("ad '" + id + "' missing from the evaluation catalog");
      const auto& f = a->second->feedback;
      if (!f.clicks || !(*f.clicks > 0.0) || !f.revenue) continue;
      p.push_back(it->second);
      y.push_back(*f.revenue / *f.clicks);
      w.push_back(*f.clicks);
    }
  }
  if (p.empty()) throw Error("no ad with clicks and revenue to evaluate against");
  const Score s = score(p, y, w);
  csv::write_text_file(out_file(c, "eval.csv"), "ads,wmse,wmae\n" + std::to_string(p.size()) + "," +
                                                    csv::format_double(s.wmse) + "," + csv::format_double(s.wmae) +
                                                    "\n");
  return "eval: " + std::to_string(p.size()) + " ads, wmse " + fmt(s.wmse) + ", wmae " + fmt(s.wmae);
}

std::string run_bid(const RunConfig& c, const std::string& groups_path) {
  require_file(groups_path, "pass --groups or run train-rpc first");
  const auto econ = read_economics(groups_path);
  if (econ.empty()) throw Error(groups_path + " lists no groups");
  BidPlan plan;
  if (c.bid_mode == BidMode::Budget) {
    if (!c.budget) throw Error("budget mode needs bid.budget (or --budget)");
    plan = bid_budget(econ, *c.budget);
  } else {
    plan = bid_target_rps(econ, c.pipeline.rps_target);
  }
  for (const auto& w : plan.warnings) std::cerr << "warning: " << w << "\n";
  write_bids(out_file(c, "bids.csv"), plan);
  write_plan_summary(out_file(c, "bid_summary.csv"), plan);
  std::string bids;
  for (std::size_t i = 0; i < plan.bids.size() && i < 10; ++i) {
    bids += (i ? " " : "") + plan.group_ids[i] + "=" + fmt(plan.bids[i]);
  }
  if (plan.bids.size() > 10) bids += " ...";
  return "bid: " + std::string(to_string(plan.mode)) + ", " + std::to_string(plan.bids.size()) + " groups, rps " +
         fmt(plan.common_rps) + ", spend " + fmt(plan.spend) + ", revenue " + fmt(plan.revenue) + "; bids " + bids;
}

struct SeedResult {
  std::uint64_t seed = 0;
  OfflineReport offline;
  ExperimentReport experiment;
};

std::string prefix_rows(const std::string& csv_text, const std::string& prefix, bool keep_header) {
  std::string out;
  std::size_t start = 0;
  bool header = true;
  while (start < csv_text.size()) {
    const auto end = csv_text.find('\n', start);
    const std::string line = csv_text.substr(start, end - start);
    if (header) {
      if (keep_header) out += "seed," + line + "\n";
      header = false;
    } else {
      out += prefix + "," + line + "\n";
    }
    start = end == std::string::npos ? csv_text.size() : end + 1;
  }
  return out;
}

std::string simulate_summary(const std::vector<SeedResult>& results) {
  const double n = static_cast<double>(results.size());
  double rel[2][2] = {{0, 0}, {0, 0}};
  int cluster_beats = 0, gbrt_beats_singular = 0, gbrt_beats_cluster = 0;
  double aa_rps = 0, aa_spend = 0, ab_rps = 0, ab_spend = 0;
  int ab_wins = 0;
  for (const auto& r : results) {
    for (int m = 0; m < 2; ++m) {
      for (int g = 0; g < 2; ++g) rel[m][g] += r.offline.cells[m][g].rel_wmse / n;
    }
    cluster_beats += r.offline.cells[1][1].wmse < r.offline.cells[1][0].wmse;
    gbrt_beats_singular += r.offline.cells[1][0].wmse < r.offline.cells[0][0].wmse;
    gbrt_beats_cluster += r.offline.cells[1][1].wmse < r.offline.cells[0][1].wmse;
    aa_rps += r.experiment.aa.relative_rps() / n;
    aa_spend += r.experiment.aa.relative_spend() / n;
    ab_rps += r.experiment.ab.relative_rps() / n;
    ab_spend += r.experiment.ab.relative_spend() / n;
    ab_wins += r.experiment.ab.relative_rps() > 100.0;
  }
  char buf[1024];
  const int seeds = static_cast<int>(results.size());
  std::snprintf(buf, sizeof buf,
                "mean relative WMSE over %d seeds (LR singular = 100%%)\n"
                "%-6s %10s %10s\n%-6s %9.1f%% %9.1f%%\n%-6s %9.1f%% %9.1f%%\n"
                "seeds where cluster GBRT < singular GBRT: %d/%d\n"
                "seeds where GBRT < LR: singular %d/%d, cluster %d/%d\n\n"
                "mean relative to control over %d seeds\n"
                "%-6s %10s %10s\n%-6s %9.1f%% %9.1f%%\n%-6s %9.1f%% %9.1f%%\n"
                "seeds where the cluster arm's RPS beats control: %d/%d\n",
                seeds, "", "singular", "cluster", "LR", rel[0][0], rel[0][1], "GBRT", rel[1][0], rel[1][1],
                cluster_beats, seeds, gbrt_beats_singular, seeds, gbrt_beats_cluster, seeds, seeds, "", "spend", "rps",
                "AA", aa_spend, aa_rps, "AB", ab_spend, ab_rps, ab_wins, seeds);
  return buf;
}

std::string run_simulate(const RunConfig& c, bool emit_world) {
  if (emit_world) {
    const World world = generate_world(c.world);
    const fs::path dir = fs::path(c.out_dir) / "world";
    fs::create_directories(dir);
    write_catalog((dir / "catalog.csv").string(), world.catalog);
    write_search_terms((dir / "search_terms.csv").string(), world.search_terms);
    write_catalog((dir / "response.csv").string(), response_period(world));
    csv::Writer w((dir / "truth.csv").string());
    w.row({"ad_id", "product_type", "theme", "true_rpc", "history_rpc", "click_slope", "bounce_rate", "sparse"});
    for (const auto& t : world.truth) {
      w.row({t.ad_id, t.product_type, std::to_string(t.theme), csv::format_double(t.true_rpc),
             csv::format_double(t.history_rpc), csv::format_double(t.click_slope), csv::format_double(t.bounce_rate),
             t.sparse ? "1" : "0"});
    }
    w.close();
    return "simulate: world with " + std::to_string(world.catalog.size()) + " ads and " +
           std::to_string(world.search_terms.size()) + " search-term rows written to " + dir.string();
  }

  std::vector<SeedResult> results(c.sim_seeds);
  AbOptions ab;
  ab.split = c.sim_split;
  ab.match_spend = c.sim_match_spend;
  ab.deterministic = c.sim_deterministic;
  ab.common_random_numbers = c.sim_common_random_numbers;
  // Seeds are independent; each worker runs whole seeds single-threaded.
  std::atomic<std::size_t> next{0};
  std::vector<std::string> errors(results.size());
  const auto worker = [&] {
    for (std::size_t k; (k = next.fetch_add(1)) < results.size();) {
      try {
        WorldConfig wc = c.world;
        wc.seed = c.seed + k;
        PipelineSettings ps = c.pipeline;
        ps.seed = wc.seed;
        ps.threads = 1;
        const World world = generate_world(wc);
        const Pipeline pipeline = build_pipeline(world, ps);
        results[k] = {wc.seed, offline_eval(world, pipeline, ps), run_ab(world, pipeline, ps, ab)};
      } catch (const std::exception& e) {
        errors[k] = e.what();
      }
    }
  };
  const std::size_t n_workers = std::min<std::size_t>(static_cast<std::size_t>(c.threads), results.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_workers; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (std::size_t k = 0; k < errors.size(); ++k) {
    if (!errors[k].empty()) throw Error("seed " + std::to_string(c.seed + k) + ": " + errors[k]);
  }

  std::string offline, experiment, report;
  for (std::size_t k = 0; k < results.size(); ++k) {
    const auto& r = results[k];
    const std::string s = std::to_string(r.seed);
    offline += prefix_rows(offline_report_csv(r.offline), s, k == 0);
    experiment += prefix_rows(experiment_report_csv(r.experiment), s, k == 0);
    report += "seed " + s + "\n" + format_offline_report(r.offline) + "\n" + format_experiment_report(r.experiment) +
              "\n";
  }
  const std::string summary = simulate_summary(results);
  csv::write_text_file(out_file(c, "offline.csv"), offline);
  csv::write_text_file(out_file(c, "experiment.csv"), experiment);
  csv::write_text_file(out_file(c, "simulate_report.txt"), report + summary);
  std::cout << summary;
  double ab_rps = 0.0;
  for (const auto& r : results) ab_rps += r.experiment.ab.relative_rps() / static_cast<double>(results.size());
  return "simulate: " + std::to_string(results.size()) + " seeds from " + std::to_string(c.seed) +
         ", mean AB relative rps " + fmt(ab_rps) + "%";
}

RunConfig resolve_config(const Globals& g, const StageFlags& f) {
  RunConfig c = g.preset.empty() ? RunConfig{} : preset_config(g.preset);
  if (!g.config_path.empty()) c = load_run_config(g.config_path, c);
  for (const auto& s : g.sets) apply_override(c, s);
  if (g.seed) c.seed = *g.seed;
  if (g.threads) c.threads = *g.threads;
  if (g.out) c.out_dir = *g.out;
  if (f.catalog) c.catalog_path = *f.catalog;
  if (f.search_terms) c.search_terms_path = *f.search_terms;
  if (f.response) c.response_path = *f.response;
  if (f.model) c.rpc_model = *f.model;
  if (f.mode) c.bid_mode = parse_bid_mode(*f.mode);
  if (f.budget) c.budget = *f.budget;
  if (f.rps_target) c.pipeline.rps_target = *f.rps_target;
  if (f.threshold) c.pipeline.cluster_threshold = *f.threshold;
  if (f.epochs) c.pipeline.embed.epochs = *f.epochs;
  if (f.seeds) c.sim_seeds = *f.seeds;
  if (f.split) c.sim_split = parse_arm_split(*f.split);
  c.sync();
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sembid: intent-clustered search-ad bidding pipeline", "sembid"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  Globals g;
  StageFlags f;
  app.add_option("--config", g.config_path, "run config file (key = value)")->check(CLI::ExistingFile);
  app.add_option("--preset", g.preset, "start from a named config: table2, table3, null");
  app.add_option("--set", g.sets, "override one config key, key=value (repeatable)");
  app.add_option("--seed", g.seed, "global seed");
  app.add_option("--threads", g.threads, "worker cap")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "output directory");

  auto* ingest = app.add_subcommand("ingest", "validate inputs, write the canonical catalog and vocabulary");
  ingest->add_option("--catalog", f.catalog, "catalog CSV");
  ingest->add_option("--search-terms", f.search_terms, "search-term report CSV");
  auto* pairs = app.add_subcommand("pairs", "build interactive-metric training pairs");
  auto* train_embed = app.add_subcommand("train-embed", "train the intention embedding network");
  train_embed->add_option("--epochs", f.epochs, "training epochs");
  auto* embed = app.add_subcommand("embed", "embed every ad in the catalog");
  auto* cluster = app.add_subcommand("cluster", "assign product types and cluster ads into groups");
  cluster->add_option("--threshold", f.threshold, "cosine-distance merge threshold");
  auto* train_rpc = app.add_subcommand("train-rpc", "fit the group RPC model and write group economics");
  train_rpc->add_option("--model", f.model, "gbrt or linear");
  train_rpc->add_option("--response", f.response, "next-period catalog used as the response");
  auto* bid = app.add_subcommand("bid", "compute group bids");
  bid->add_option("--mode", f.mode, "target_rps or budget");
  bid->add_option("--budget", f.budget, "spend budget for budget mode");
  bid->add_option("--rps-target", f.rps_target, "revenue per spend target");
  bid->add_option("--groups", f.groups, "group economics CSV (group_id,rpc,click_slope)");
  auto* simulate = app.add_subcommand("simulate", "run offline and AA/AB experiments on synthetic worlds");
  simulate->add_option("--seeds", f.seeds, "number of consecutive seeds");
  simulate->add_option("--split", f.split, "ads or traffic");
  simulate->add_flag("--emit-world", f.emit_world, "only write the synthetic world's input files");
  auto* eval = app.add_subcommand("eval", "score group predictions against per-ad RPC");
  eval->add_option("--response", f.response, "catalog holding the outcome to score against");

  if (argc <= 1) {
    std::cerr << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    const RunConfig c = resolve_config(g, f);
    fs::create_directories(c.out_dir);
    const std::string name = app.get_subcommands().front()->get_name();
    save_run_config(out_file(c, "config." + name + ".txt"), c);
    std::string summary;
    if (ingest->parsed()) summary = run_ingest(c);
    if (pairs->parsed()) summary = run_pairs(c);
    if (train_embed->parsed()) summary = run_train_embed(c);
    if (embed->parsed()) summary = run_embed(c);
    if (cluster->parsed()) summary = run_cluster(c);
    if (train_rpc->parsed()) summary = run_train_rpc(c);
    if (bid->parsed()) summary = run_bid(c, f.groups ? *f.groups : out_file(c, "economics.csv"));
    if (simulate->parsed()) summary = run_simulate(c, f.emit_world);
    if (eval->parsed()) summary = run_eval(c);
    std::cout << summary << " (" << stage_seed_note(c) << ")\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
