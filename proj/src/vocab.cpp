#include "chartrans/vocab.hpp"

#include <algorithm>
#include <array>
#include <istream>
#include <map>
#include <ostream>

#include "chartrans/errors.hpp"
#include "chartrans/text.hpp"

namespace chartrans {

namespace {

const std::array<std::string, kNumSpecials> kSpecialNames = {"<pad>", "<s>", "</s>", "<unk>"};

bool is_special_name(std::string_view token) {
  return std::find(kSpecialNames.begin(), kSpecialNames.end(), token) != kSpecialNames.end();
}

template <typename Key>
std::vector<std::string> rank_by_frequency(const std::map<Key, std::size_t>& counts,
                                           std::size_t keep,
                                           std::string (*spell)(const Key&)) {
  std::vector<std::pair<Key, std::size_t>> items(counts.begin(), counts.end());
  // std::map order supplies the tie-break; stable_sort preserves it.
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (items.size() > keep) items.resize(keep);
  std::vector<std::string> out;
  out.reserve(items.size());
  for (const auto& [key, count] : items) out.push_back(spell(key));
  return out;
}

}  // namespace

const std::string& special_token_name(std::int32_t id) { return kSpecialNames.at(std::size_t(id)); }

Vocab::Vocab() {
  for (const auto& name : kSpecialNames) append(name);
}

void Vocab::append(std::string token) {
  const auto id = std::int32_t(id_to_token_.size());
  if (!token_to_id_.emplace(token, id).second) {
    throw VocabError("duplicate vocabulary token '" + escape_token(token) + "'");
  }
  id_to_token_.push_back(std::move(token));
}

Vocab Vocab::from_tokens(std::span<const std::string> tokens) {
  Vocab v;
  for (const auto& t : tokens) {
    if (is_special_name(t)) {
      throw VocabError("corpus token '" + t + "' collides with a special token");
    }
    v.append(t);
  }
  return v;
}

std::optional<std::int32_t> Vocab::find(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

std::int32_t Vocab::id(std::string_view token) const {
  if (is_special_name(token)) return kUnk;
  return find(token).value_or(kUnk);
}

const std::string& Vocab::token(std::int32_t id) const {
  if (id < 0 || std::size_t(id) >= id_to_token_.size()) {
    throw VocabError("id " + std::to_string(id) + " outside vocabulary of size " +
                     std::to_string(id_to_token_.size()));
  }
  return id_to_token_[std::size_t(id)];
}

void Vocab::save(std::ostream& out) const {
  for (const auto& t : id_to_token_) out << escape_token(t) << '\n';
}

Vocab Vocab::load(std::istream& in) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(unescape_token(line));
  if (lines.size() < kNumSpecials) throw DataError("vocabulary file shorter than the specials");
  for (std::size_t i = 0; i < kNumSpecials; ++i) {
    if (lines[i] != kSpecialNames[i]) {
      throw DataError("vocabulary line " + std::to_string(i) + " must be " + kSpecialNames[i]);
    }
  }
  return from_tokens(std::span<const std::string>(lines).subspan(kNumSpecials));
}

Vocab build_char_vocab(std::span<const std::string> corpus, std::size_t max_size) {
  if (corpus.empty()) throw DataError("cannot build a character vocabulary from an empty corpus");
  if (max_size < kNumSpecials + 1) {
    throw DataError("character vocabulary size must be at least " +
                    std::to_string(kNumSpecials + 1));
  }
  // keyed by (code point, spelling) so the map order is code point order and
  // the token keeps its original bytes
  using Key = std::pair<char32_t, std::string>;
  std::map<Key, std::size_t> counts;
  for (const auto& sentence : corpus) {
    for (auto& ch : utf8_chars(sentence)) {
      const char32_t cp = utf8_to_u32(ch).front();
      ++counts[Key(cp, std::move(ch))];
    }
  }
  auto tokens = rank_by_frequency<Key>(counts, max_size - kNumSpecials,
                                       [](const Key& k) { return k.second; });
  return Vocab::from_tokens(tokens);
}

Vocab build_token_vocab(std::span<const std::vector<std::string>> segmented,
                        std::size_t max_size) {
  std::map<std::string, std::size_t> counts;
  for (const auto& sentence : segmented) {
    for (const auto& tok : sentence) {
      if (!is_special_name(tok)) ++counts[tok];
    }
  }
  const std::size_t keep = max_size == 0 ? counts.size() : max_size - std::min(max_size, kNumSpecials);
  auto tokens = rank_by_frequency<std::string>(counts, keep, [](const std::string& s) { return s; });
  return Vocab::from_tokens(tokens);
}

}  // namespace chartrans
