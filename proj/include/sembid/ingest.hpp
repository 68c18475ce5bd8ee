#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sembid/features.hpp"

namespace sembid {

struct Item {
  std::string title;
  std::string description;
  int revenue_rank = 1;

  bool operator==(const Item&) const = default;
};

struct Ad {
  std::string ad_id;
  std::vector<Item> items;
  std::optional<std::string> product_type;
  std::uint64_t total_clicks = 0;
  FeatureVector feedback;

  bool operator==(const Ad&) const = default;
};

struct SearchTermRecord {
  std::string ad_id;
  std::string query;
  std::uint64_t clicks = 0;

  bool operator==(const SearchTermRecord&) const = default;
};

// Two ads and their interactive metric. ad_i < ad_j; im == -1 marks a
// sampled negative.
struct AdPair {
  std::string ad_i;
  std::string ad_j;
  double im = 0.0;

  bool operator==(const AdPair&) const = default;
};

// Throws Error if an Ad invariant is broken (empty id, no items, duplicate
// revenue ranks, negative or out-of-range feedback).
void validate_ad(const Ad& ad);

// Catalog CSV: ad_id,product_type,total_clicks,item_title_1,item_desc_1,...,
// item_title_K,item_desc_K,<feedback columns>. K >= 1. Item k carries
// revenue_rank k. Empty cells are missing values.
std::vector<Ad> parse_catalog(const std::string& path);
std::vector<Ad> parse_catalog_text(const std::string& text, const std::string& source = "<catalog>");
// Writes with as many item columns as the widest ad and the union of the
// feedback columns (known first, then extras in first-seen order).
void write_catalog(const std::string& path, std::span<const Ad> ads);
std::string format_catalog(std::span<const Ad> ads);

std::vector<SearchTermRecord> parse_search_terms(const std::string& path);
std::vector<SearchTermRecord> parse_search_terms_text(const std::string& text,
                                                      const std::string& source = "<search-terms>");
void write_search_terms(const std::string& path, std::span<const SearchTermRecord> records);

// Cross-checks a report against its catalog: every ad_id known, per-ad click
// sums within total_clicks.
void validate_report(std::span<const SearchTermRecord> records, std::span<const Ad> ads);

// sqrt((clk_1co2 * clk_2co1) / (clk_1 * clk_2)).
double interactive_metric(std::uint64_t clk_1co2, std::uint64_t clk_2co1, std::uint64_t clk_1,
                          std::uint64_t clk_2);

struct PairStats {
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::size_t candidate_negatives = 0;  // non-co-clicked pairs available
  double mean_positive_im = 0.0;
};

// Positive pairs for every two ads sharing a clicked query (clicks summed
// over all shared queries), then uniformly sampled non-co-clicked pairs with
// im = -1 so that positives / negatives ~ mean positive im. Ads with zero
// total clicks are skipped. Output: positives then negatives, each sorted.
std::vector<AdPair> build_pairs(std::span<const SearchTermRecord> records,
                                const std::map<std::string, std::uint64_t>& total_clicks,
                                std::uint64_t neg_seed, PairStats* stats = nullptr);
std::vector<AdPair> build_pairs(std::span<const SearchTermRecord> records, std::span<const Ad> ads,
                                std::uint64_t neg_seed, PairStats* stats = nullptr);

void write_pairs(const std::string& path, std::span<const AdPair> pairs);
std::vector<AdPair> parse_pairs(const std::string& path);

}  // namespace sembid
