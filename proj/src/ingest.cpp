#include "sembid/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_set>
#include <utility>

#include "sembid/csv.hpp"
#include "sembid/error.hpp"
#include "sembid/random.hpp"

namespace sembid {

namespace {

const std::vector<std::string> kCatalogPrefix = {"ad_id", "product_type", "total_clicks"};
const std::vector<std::string> kSearchTermHeader = {"ad_id", "query", "clicks"};
const std::vector<std::string> kPairsHeader = {"ad_i", "ad_j", "im"};

std::optional<double>* known_slot(FeatureVector& f, const std::string& name) {
  if (name == "clicks") return &f.clicks;
  if (name == "conversions") return &f.conversions;
  if (name == "spend") return &f.spend;
  if (name == "revenue") return &f.revenue;
  if (name == "bounce_rate") return &f.bounce_rate;
  return nullptr;
}

const std::optional<double>* known_slot(const FeatureVector& f, const std::string& name) {
  return known_slot(const_cast<FeatureVector&>(f), name);
}

void check_feedback_value(const std::string& name, double v) {
  if (v < 0.0) throw Error("feedback '" + name + "' must be non-negative");
  if (is_rate_column(name) && name.rfind("avg_", 0) != 0 && v > 1.0) {
    throw Error("rate '" + name + "' must lie in [0, 1]");
  }
}

}  // namespace

void validate_ad(const Ad& ad) {
  if (ad.ad_id.empty()) throw Error("ad_id must be non-empty");
  if (ad.items.empty()) throw Error("ad '" + ad.ad_id + "' has no items");
  std::set<int> ranks;
  for (const auto& item : ad.items) {
    if (item.revenue_rank < 1) throw Error("ad '" + ad.ad_id + "': revenue_rank must be positive");
    if (!ranks.insert(item.revenue_rank).second) {
      throw Error("ad '" + ad.ad_id + "': duplicate revenue_rank " + std::to_string(item.revenue_rank));
    }
  }
  for (const auto& name : known_feedback_columns()) {
    if (const auto* slot = known_slot(ad.feedback, name); slot && *slot) check_feedback_value(name, **slot);
  }
  for (const auto& e : ad.feedback.extra) {
    if (e.value) check_feedback_value(e.name, *e.value);
  }
}

std::vector<Ad> parse_catalog_text(const std::string& text, const std::string& source) {
  const auto table = csv::parse(text, source);
  const auto& h = table.header;
  for (std::size_t i = 0; i < kCatalogPrefix.size(); ++i) {
    if (i >= h.size() || h[i] != kCatalogPrefix[i]) {
      throw ParseError(source, 1, kCatalogPrefix[i], "catalog header must start with ad_id,product_type,total_clicks");
    }
  }
  std::size_t col = kCatalogPrefix.size();
  int n_items = 0;
  while (col < h.size() && h[col] == "item_title_" + std::to_string(n_items + 1)) {
    if (col + 1 >= h.size() || h[col + 1] != "item_desc_" + std::to_string(n_items + 1)) {
      throw ParseError(source, 1, h[col], "item title column must be followed by its description column");
    }
    ++n_items;
    col += 2;
  }
  if (n_items == 0) throw ParseError(source, 1, "item_title_1", "catalog needs at least one item column pair");

  std::set<std::string> seen_cols(h.begin(), h.begin() + static_cast<std::ptrdiff_t>(col));
  const std::size_t feedback_begin = col;
  for (std::size_t c = feedback_begin; c < h.size(); ++c) {
    if (h[c].empty()) throw ParseError(source, 1, "", "empty header column " + std::to_string(c + 1));
    if (!seen_cols.insert(h[c]).second) throw ParseError(source, 1, h[c], "duplicate header column");
  }
  csv::require_rectangular(table);

  std::vector<Ad> ads;
  ads.reserve(table.rows.size());
  std::set<std::string> ids;
  for (const auto& row : table.rows) {
    const auto& f = row.fields;
    Ad ad;
    ad.ad_id = f[0];
    if (ad.ad_id.empty()) throw ParseError(source, row.line, "ad_id", "empty ad_id");
    if (!f[1].empty()) ad.product_type = f[1];
    try {
      const auto clicks = csv::parse_integer(f[2]);
      if (clicks < 0) throw Error("must be non-negative");
      ad.total_clicks = static_cast<std::uint64_t>(clicks);
    } catch (const Error& e) {
      throw ParseError(source, row.line, "total_clicks", e.what());
    }
    for (int k = 0; k < n_items; ++k) {
      const auto& title = f[kCatalogPrefix.size() + 2 * static_cast<std::size_t>(k)];
      const auto& desc = f[kCatalogPrefix.size() + 2 * static_cast<std::size_t>(k) + 1];
      if (title.empty() && desc.empty()) continue;
      ad.items.push_back(Item{title, desc, k + 1});
    }
    if (ad.items.empty()) throw ParseError(source, row.line, "item_title_1", "ad has no items");
    for (std::size_t c = feedback_begin; c < h.size(); ++c) {
      std::optional<double> value;
      try {
        value = csv::parse_optional_double(f[c]);
        if (value) check_feedback_value(h[c], *value);
      } catch (const Error& e) {
        throw ParseError(source, row.line, h[c], e.what());
      }
      if (auto* slot = known_slot(ad.feedback, h[c])) {
        *slot = value;
      } else {
        ad.feedback.extra.push_back({h[c], value});
      }
    }
    if (!ids.insert(ad.ad_id).second) {
      throw ParseError(source, row.line, "ad_id", "duplicate ad_id '" + ad.ad_id + "'");
    }
    ads.push_back(std::move(ad));
  }
  return ads;
}

std::vector<Ad> parse_catalog(const std::string& path) { return parse_catalog_text(csv::read_text_file(path), path); }

std::string format_catalog(std::span<const Ad> ads) {
  std::size_t n_items = 1;
  std::vector<std::string> extras;
  for (const auto& ad : ads) {
    n_items = std::max(n_items, ad.items.size());
    for (const auto& e : ad.feedback.extra) {
      if (std::find(extras.begin(), extras.end(), e.name) == extras.end()) extras.push_back(e.name);
    }
  }
  std::vector<std::string> header = kCatalogPrefix;
  for (std::size_t k = 1; k <= n_items; ++k) {
    header.push_back("item_title_" + std::to_string(k));
    header.push_back("item_desc_" + std::to_string(k));
  }
  for (const auto& c : known_feedback_columns()) header.push_back(c);
  for (const auto& c : extras) header.push_back(c);

  std::string out = csv::join(header) + "\n";
  for (const auto& ad : ads) {
    std::vector<std::string> f;
    f.reserve(header.size());
    f.push_back(ad.ad_id);
    f.push_back(ad.product_type.value_or(""));
    f.push_back(std::to_string(ad.total_clicks));
    auto items = ad.items;
    std::stable_sort(items.begin(), items.end(),
                     [](const Item& a, const Item& b) { return a.revenue_rank < b.revenue_rank; });
    for (std::size_t k = 0; k < n_items; ++k) {
      f.push_back(k < items.size() ? items[k].title : "");
      f.push_back(k < items.size() ? items[k].description : "");
    }
    for (const auto& c : known_feedback_columns()) f.push_back(csv::format_optional(*known_slot(ad.feedback, c)));
    for (const auto& name : extras) {
      std::optional<double> v;
      for (const auto& e : ad.feedback.extra) {
        if (e.name == name) v = e.value;
      }
      f.push_back(csv::format_optional(v));
    }
    out += csv::join(f) + "\n";
  }
  return out;
}

void write_catalog(const std::string& path, std::span<const Ad> ads) {
  csv::write_text_file(path, format_catalog(ads));
}

std::vector<SearchTermRecord> parse_search_terms_text(const std::string& text, const std::string& source) {
  const auto table = csv::parse(text, source);
  csv::require_header(table, kSearchTermHeader);
  csv::require_rectangular(table);
  std::vector<SearchTermRecord> out;
  out.reserve(table.rows.size());
  std::set<std::pair<std::string, std::string>> keys;
  for (const auto& row : table.rows) {
    SearchTermRecord r;
    r.ad_id = row.fields[0];
    r.query = row.fields[1];
    if (r.ad_id.empty()) throw ParseError(source, row.line, "ad_id", "empty ad_id");
    try {
      const auto c = csv::parse_integer(row.fields[2]);
      if (c < 0) throw Error("must be non-negative");
      r.clicks = static_cast<std::uint64_t>(c);
    } catch (const Error& e) {
      throw ParseError(source, row.line, "clicks", e.what());
    }
    if (!keys.emplace(r.ad_id, r.query).second) {
      throw ParseError(source, row.line, "query", "duplicate (ad_id, query) '" + r.ad_id + "', '" + r.query + "'");
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<SearchTermRecord> parse_search_terms(const std::string& path) {
  return parse_search_terms_text(csv::read_text_file(path), path);
}

void write_search_terms(const std::string& path, std::span<const SearchTermRecord> records) {
  csv::Writer w(path);
  w.row(kSearchTermHeader);
  for (const auto& r : records) w.row({r.ad_id, r.query, std::to_string(r.clicks)});
  w.close();
}

void validate_report(std::span<const SearchTermRecord> records, std::span<const Ad> ads) {
  std::map<std::string, std::uint64_t> totals;
  for (const auto& ad : ads) totals[ad.ad_id] = ad.total_clicks;
  std::map<std::string, std::uint64_t> sums;
  for (const auto& r : records) {
    if (!totals.count(r.ad_id)) throw Error("search-term report references unknown ad '" + r.ad_id + "'");
    sums[r.ad_id] += r.clicks;
  }
  for (const auto& [id, sum] : sums) {
    if (sum > totals[id]) {
      throw Error("ad '" + id + "': report clicks " + std::to_string(sum) + " exceed total_clicks " +
                  std::to_string(totals[id]));
    }
  }
}

double interactive_metric(std::uint64_t clk_1co2, std::uint64_t clk_2co1, std::uint64_t clk_1,
                          std::uint64_t clk_2) {
  if (clk_1 == 0 || clk_2 == 0) throw Error("interactive metric undefined for an ad with zero total clicks");
  if (clk_1co2 > clk_1 || clk_2co1 > clk_2) throw Error("co-clicks exceed total clicks");
  const double r1 = static_cast<double>(clk_1co2) / static_cast<double>(clk_1);
  const double r2 = static_cast<double>(clk_2co1) / static_cast<double>(clk_2);
  return std::sqrt(r1 * r2);
}

std::vector<AdPair> build_pairs(std::span<const SearchTermRecord> records,
                                const std::map<std::string, std::uint64_t>& total_clicks, std::uint64_t neg_seed,
                                PairStats* stats) {
  // Eligible ads in lexicographic order; index order is canonical pair order.
  std::vector<std::string> ids;
  std::map<std::string, std::uint32_t> index;
  for (const auto& [id, total] : total_clicks) {
    if (total == 0) continue;
    index.emplace(id, static_cast<std::uint32_t>(ids.size()));
    ids.push_back(id);
  }
  const std::uint64_t n = ids.size();

  std::map<std::string, std::vector<std::pair<std::uint32_t, std::uint64_t>>> by_query;
  for (const auto& r : records) {
    if (r.clicks == 0) continue;
    auto it = index.find(r.ad_id);
    if (it == index.end()) {
      if (!total_clicks.count(r.ad_id)) throw Error("search-term record references unknown ad '" + r.ad_id + "'");
      throw Error("ad '" + r.ad_id + "' has report clicks but zero total_clicks");
    }
    by_query[r.query].emplace_back(it->second, r.clicks);
  }

  std::map<std::pair<std::uint32_t, std::uint32_t>, std::pair<std::uint64_t, std::uint64_t>> co;
  for (auto& [query, hits] : by_query) {
    std::sort(hits.begin(), hits.end());
    for (std::size_t a = 0; a < hits.size(); ++a) {
      for (std::size_t b = a + 1; b < hits.size(); ++b) {
        auto& acc = co[{hits[a].first, hits[b].first}];
        acc.first += hits[a].second;
        acc.second += hits[b].second;
      }
    }
  }

  std::vector<AdPair> out;
  out.reserve(co.size() * 2);
  double im_sum = 0.0;
  for (const auto& [key, clicks] : co) {
    const double im = interactive_metric(clicks.first, clicks.second, total_clicks.at(ids[key.first]),
                                         total_clicks.at(ids[key.second]));
    im_sum += im;
    out.push_back({ids[key.first], ids[key.second], im});
  }
  const std::size_t n_pos = out.size();
  const double mean_im = n_pos ? im_sum / static_cast<double>(n_pos) : 0.0;
  const std::uint64_t all_pairs = n * (n - (n ? 1 : 0)) / 2;
  const std::uint64_t candidates = all_pairs - n_pos;
  std::uint64_t wanted = 0;
  if (n_pos > 0 && mean_im > 0.0) {
    wanted = static_cast<std::uint64_t>(std::llround(static_cast<double>(n_pos) / mean_im));
  }
  wanted = std::min(wanted, candidates);

  auto encode = [n](std::uint64_t i, std::uint64_t j) { return i * n + j; };
  std::unordered_set<std::uint64_t> positive_keys;
  positive_keys.reserve(co.size() * 2);
  for (const auto& [key, _] : co) positive_keys.insert(encode(key.first, key.second));

  Rng rng = make_rng(neg_seed, "ingest.negatives");
  std::vector<std::uint64_t> chosen;
  if (wanted > 0 && wanted * 2 > candidates) {
    std::vector<std::uint64_t> pool;
    pool.reserve(candidates);
    for (std::uint64_t i = 0; i < n; ++i) {
      for (std::uint64_t j = i + 1; j < n; ++j) {
        if (!positive_keys.count(encode(i, j))) pool.push_back(encode(i, j));
      }
    }
    for (std::uint64_t k = 0; k < wanted; ++k) {
      const auto pick = k + uniform_index(rng, pool.size() - k);
      std::swap(pool[k], pool[pick]);
    }
    chosen.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(wanted));
  } else if (wanted > 0) {
    std::unordered_set<std::uint64_t> taken;
    taken.reserve(wanted * 2);
    while (chosen.size() < wanted) {
      auto i = uniform_index(rng, n);
      auto j = uniform_index(rng, n - 1);
      if (j >= i) ++j;
      if (i > j) std::swap(i, j);
      const auto key = encode(i, j);
      if (positive_keys.count(key) || !taken.insert(key).second) continue;
      chosen.push_back(key);
    }
  }
  std::sort(chosen.begin(), chosen.end());
  for (const auto key : chosen) out.push_back({ids[key / n], ids[key % n], -1.0});

  if (stats) {
    stats->positives = n_pos;
    stats->negatives = chosen.size();
    stats->candidate_negatives = candidates;
    stats->mean_positive_im = mean_im;
  }
  return out;
}

std::vector<AdPair> build_pairs(std::span<const SearchTermRecord> records, std::span<const Ad> ads,
                                std::uint64_t neg_seed, PairStats* stats) {
  std::map<std::string, std::uint64_t> totals;
  for (const auto& ad : ads) totals[ad.ad_id] = ad.total_clicks;
  return build_pairs(records, totals, neg_seed, stats);
}

void write_pairs(const std::string& path, std::span<const AdPair> pairs) {
  csv::Writer w(path);
  w.row(kPairsHeader);
  for (const auto& p : pairs) w.row({p.ad_i, p.ad_j, csv::format_double(p.im)});
  w.close();
}

std::vector<AdPair> parse_pairs(const std::string& path) {
  const auto table = csv::read_file(path);
  csv::require_header(table, kPairsHeader);
  csv::require_rectangular(table);
  std::vector<AdPair> out;
  out.reserve(table.rows.size());
  for (const auto& row : table.rows) {
    AdPair p{row.fields[0], row.fields[1], 0.0};
    try {
      p.im = csv::parse_double(row.fields[2]);
    } catch (const Error& e) {
      throw ParseError(path, row.line, "im", e.what());
    }
    if (p.ad_i.empty() || p.ad_j.empty() || p.ad_i == p.ad_j) {
      throw ParseError(path, row.line, "ad_j", "pair must reference two distinct ads");
    }
    if (!(p.ad_i < p.ad_j)) throw ParseError(path, row.line, "ad_i", "pair not in canonical order (ad_i < ad_j)");
    if (p.im < -1.0 || p.im > 1.0) throw ParseError(path, row.line, "im", "im must lie in [-1, 1]");
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace sembid
