#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace chartrans {

inline constexpr std::string_view kEndOfWord = "</w>";
inline constexpr std::size_t kDefaultBpeOps = 20000;

// Ordered merge rules; a rule's index is its priority (lower applies first).
class BpeMerges {
 public:
  using Pair = std::pair<std::string, std::string>;

  BpeMerges() = default;
  explicit BpeMerges(std::vector<Pair> merges);

  std::size_t count() const { return merges_.size(); }
  const std::vector<Pair>& merges() const { return merges_; }
  // Priority of a pair, or -1 when it is not a rule.
  long rank(std::string_view left, std::string_view right) const;

  // "#bpe v1 <count>" header, then one "left right" pair per line.
  void save(std::ostream& out) const;
  static BpeMerges load(std::istream& in);

  bool operator==(const BpeMerges& other) const { return merges_ == other.merges_; }

 private:
  std::vector<Pair> merges_;
  std::unordered_map<std::string, long> ranks_;
};

// Learns up to num_ops merges from whitespace-separated words. The most
// frequent adjacent pair wins, ties going to the lexicographically smallest
// pair; learning stops once no pair occurs at least twice.
BpeMerges learn_bpe(std::span<const std::string> corpus, std::size_t num_ops = kDefaultBpeOps);

// Segments one word: characters with "</w>" attached to the last, then the
// highest-priority applicable rule is applied repeatedly.
std::vector<std::string> apply_bpe_word(std::string_view word, const BpeMerges& merges);

// Segments every whitespace-separated word of a sentence.
std::vector<std::string> apply_bpe(std::string_view sentence, const BpeMerges& merges);

}  // namespace chartrans
