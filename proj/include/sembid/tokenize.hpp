#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sembid/ingest.hpp"

namespace sembid {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnkId = 1;
inline constexpr int kDefaultSequenceLength = 64;
inline constexpr std::size_t kTopItems = 3;

// Lowercases ASCII letters and turns ASCII punctuation into separators, then
// splits on whitespace. Non-ASCII bytes are kept inside tokens.
std::vector<std::string> normalize_tokens(std::string_view text);

class Vocabulary {
 public:
  Vocabulary();  // pad + unk only

  std::int32_t id(std::string_view token) const;  // kUnkId when absent
  const std::string& token(std::int32_t id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  // FNV-1a over the persisted text form; stored in model checkpoints.
  std::uint64_t hash() const;

  std::string serialize() const;
  static Vocabulary deserialize(const std::string& text, const std::string& source = "<vocab>");
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  friend Vocabulary build_vocab(std::span<const std::string>, std::size_t);
  void add(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

// Tokens ranked by descending frequency, ties lexicographic; keeps the top
// max_size - 2 after the reserved pad/unk entries.
Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t max_size);

struct TokenSequence {
  std::vector<std::int32_t> ids;

  std::size_t length() const { return ids.size(); }
  // Count of leading non-pad ids (padding is always a trailing suffix).
  std::size_t content_length() const;
  bool operator==(const TokenSequence&) const = default;
};

// Title + description of up to three items in ascending revenue_rank.
std::string ad_text(const Ad& ad);

TokenSequence tokenize_text(std::string_view text, const Vocabulary& vocab,
                            std::size_t length = kDefaultSequenceLength);
TokenSequence tokenize_ad(const Ad& ad, const Vocabulary& vocab, std::size_t length = kDefaultSequenceLength);

}  // namespace sembid
