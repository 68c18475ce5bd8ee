#include "sembid/tokenize.hpp"

#include <algorithm>
#include <map>
#include <sstream>

#include "sembid/csv.hpp"
#include "sembid/error.hpp"
#include "sembid/random.hpp"

namespace sembid {

namespace {

const std::string kPadToken = "[PAD]";
const std::string kUnkToken = "[UNK]";

}  // namespace

std::vector<std::string> normalize_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (unsigned char c : text) {
    if (c >= 0x80) {
      cur.push_back(static_cast<char>(c));
    } else if (c >= 'A' && c <= 'Z') {
      cur.push_back(static_cast<char>(c - 'A' + 'a'));
    } else if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) {
      cur.push_back(static_cast<char>(c));
    } else {
      flush();
    }
  }
  flush();
  return out;
}

Vocabulary::Vocabulary() {
  add(kPadToken);
  add(kUnkToken);
}

void Vocabulary::add(std::string token) {
  index_.emplace(token, static_cast<std::int32_t>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

std::int32_t Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end() || it->second < 2) return kUnkId;
  return it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw Error("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::uint64_t Vocabulary::hash() const { return fnv1a64(serialize()); }

std::string Vocabulary::serialize() const {
  std::string out;
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    out += tokens_[i];
    out += '\t';
    out += std::to_string(i);
    out += '\n';
  }
  return out;
}

Vocabulary Vocabulary::deserialize(const std::string& text, const std::string& source) {
  Vocabulary v;
  v.tokens_.clear();
  v.index_.clear();
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) throw ParseError(source, lineno, "", "expected token<TAB>id");
    const std::string tok = line.substr(0, tab);
    long long id = 0;
    try {
      id = csv::parse_integer(line.substr(tab + 1));
    } catch (const Error& e) {
      throw ParseError(source, lineno, "id", e.what());
    }
    if (id != static_cast<long long>(v.tokens_.size())) {
      throw ParseError(source, lineno, "id", "ids must be contiguous from 0");
    }
    if (id == kPadId && tok != kPadToken) throw ParseError(source, lineno, "token", "id 0 is reserved for [PAD]");
    if (id == kUnkId && tok != kUnkToken) throw ParseError(source, lineno, "token", "id 1 is reserved for [UNK]");
    if (v.index_.count(tok)) throw ParseError(source, lineno, "token", "duplicate token '" + tok + "'");
    v.add(tok);
  }
  if (v.tokens_.size() < 2) throw ParseError(source, lineno, "", "vocabulary must contain [PAD] and [UNK]");
  return v;
}

void Vocabulary::save(const std::string& path) const { csv::write_text_file(path, serialize()); }

Vocabulary Vocabulary::load(const std::string& path) { return deserialize(csv::read_text_file(path), path); }

Vocabulary build_vocab(std::span<const std::string> corpus, std::size_t max_size) {
  if (corpus.empty()) throw Error("vocabulary corpus is empty");
  if (max_size < 2) throw Error("vocabulary max_size must be at least 2");
  std::map<std::string, std::uint64_t> counts;
  for (const auto& text : corpus) {
    for (auto& tok : normalize_tokens(text)) ++counts[std::move(tok)];
  }
  std::vector<std::pair<std::string, std::uint64_t>> ranked(counts.begin(), counts.end());
  // counts is already lexicographic, so a stable sort on frequency keeps the tie-break.
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (auto& [tok, _] : ranked) {
    if (v.size() >= max_size) break;
    if (tok == kPadToken || tok == kUnkToken) continue;
    v.add(tok);
  }
  return v;
}

std::size_t TokenSequence::content_length() const {
  std::size_t n = 0;
  while (n < ids.size() && ids[n] != kPadId) ++n;
  return n;
}

std::string ad_text(const Ad& ad) {
  std::vector<const Item*> items;
  for (const auto& it : ad.items) items.push_back(&it);
  std::stable_sort(items.begin(), items.end(),
                   [](const Item* a, const Item* b) { return a->revenue_rank < b->revenue_rank; });
  std::string text;
  for (std::size_t i = 0; i < items.size() && i < kTopItems; ++i) {
    if (!text.empty()) text.push_back(' ');
    text += items[i]->title;
    text.push_back(' ');
    text += items[i]->description;
  }
  return text;
}

TokenSequence tokenize_text(std::string_view text, const Vocabulary& vocab, std::size_t length) {
  if (length == 0) throw Error("sequence length must be positive");
  TokenSequence seq;
  seq.ids.assign(length, kPadId);
  std::size_t n = 0;
  for (const auto& tok : normalize_tokens(text)) {
    if (n == length) break;
    seq.ids[n++] = vocab.id(tok);
  }
  return seq;
}

TokenSequence tokenize_ad(const Ad& ad, const Vocabulary& vocab, std::size_t length) {
  if (ad.items.empty()) throw Error("ad '" + ad.ad_id + "' has no items to tokenize");
  return tokenize_text(ad_text(ad), vocab, length);
}

}  // namespace sembid
