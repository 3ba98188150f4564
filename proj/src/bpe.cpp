#include "chartrans/bpe.hpp"

#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <tuple>

#include "chartrans/errors.hpp"
#include "chartrans/text.hpp"

namespace chartrans {

namespace {

std::string pair_key(std::string_view left, std::string_view right) {
  std::string key;
  key.reserve(left.size() + right.size() + 1);
  key.append(left);
  key.push_back(' ');  // symbols never contain spaces
  key.append(right);
  return key;
}

std::vector<std::string> initial_symbols(std::string_view word) {
  auto symbols = utf8_chars(word);
  if (!symbols.empty()) symbols.back().append(kEndOfWord);
  return symbols;
}

// Merges every non-overlapping occurrence of (left, right), scanning left to right.
std::vector<std::string> merge_pair(const std::vector<std::string>& symbols,
                                    const std::string& left, const std::string& right) {
  std::vector<std::string> out;
  out.reserve(symbols.size());
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
      out.push_back(left + right);
      ++i;
    } else {
      out.push_back(symbols[i]);
    }
  }
  return out;
}

}  // namespace

BpeMerges::BpeMerges(std::vector<Pair> merges) : merges_(std::move(merges)) {
  for (std::size_t i = 0; i < merges_.size(); ++i) {
    const auto& [l, r] = merges_[i];
    if (l.empty() || r.empty() || l.find(' ') != std::string::npos ||
        r.find(' ') != std::string::npos) {
      throw DataError("invalid merge rule at index " + std::to_string(i));
    }
    ranks_.emplace(pair_key(l, r), long(i));  // a repeated rule keeps its first priority
  }
}

long BpeMerges::rank(std::string_view left, std::string_view right) const {
  auto it = ranks_.find(pair_key(left, right));
  return it == ranks_.end() ? -1 : it->second;
}

void BpeMerges::save(std::ostream& out) const {
  out << "#bpe v1 " << merges_.size() << '\n';
  for (const auto& [l, r] : merges_) out << l << ' ' << r << '\n';
}

BpeMerges BpeMerges::load(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw DataError("merges file is empty");
  std::istringstream hs(header);
  std::string tag, version;
  std::size_t count = 0;
  if (!(hs >> tag >> version >> count) || tag != "#bpe" || version != "v1") {
    throw DataError("merges file header must be '#bpe v1 <count>', got '" + header + "'");
  }
  std::vector<Pair> merges;
  merges.reserve(count);
  std::string line;
  while (std::getline(in, line)) {
    const auto space = line.find(' ');
    if (space == std::string::npos || line.find(' ', space + 1) != std::string::npos) {
      throw DataError("malformed merge line " + std::to_string(merges.size() + 2) + ": '" + line +
                      "'");
    }
    merges.emplace_back(line.substr(0, space), line.substr(space + 1));
  }
  if (merges.size() != count) {
    throw DataError("merges header announces " + std::to_string(count) + " rules, file has " +
                    std::to_string(merges.size()));
  }
  return BpeMerges(std::move(merges));
}

BpeMerges learn_bpe(std::span<const std::string> corpus, std::size_t num_ops) {
  if (corpus.empty()) throw DataError("cannot learn BPE from an empty corpus");

  std::map<std::string, long> word_counts;
  for (const auto& sentence : corpus) {
    for (auto& w : split_whitespace(sentence)) ++word_counts[std::move(w)];
  }
  if (word_counts.empty()) throw DataError("cannot learn BPE from a corpus without words");

  std::vector<std::vector<std::string>> words;
  std::vector<long> freqs;
  for (const auto& [w, c] : word_counts) {
    words.push_back(initial_symbols(w));
    freqs.push_back(c);
  }

  // pair -> weighted count, pair -> words containing it, and a priority set
  // ordered by (descending count, pair).
  using Pair = BpeMerges::Pair;
  std::map<Pair, long> counts;
  std::map<Pair, std::set<std::size_t>> where;
  std::set<std::tuple<long, Pair>> queue;

  auto adjust = [&](const Pair& p, long delta, std::size_t word) {
    long& c = counts[p];
    if (c > 0) queue.erase({-c, p});
    c += delta;
    if (c > 0) {
      queue.insert({-c, p});
    } else {
      counts.erase(p);
    }
    if (delta > 0) where[p].insert(word);
  };
  auto add_word = [&](std::size_t w, long sign) {
    const auto& sym = words[w];
    for (std::size_t i = 0; i + 1 < sym.size(); ++i) adjust({sym[i], sym[i + 1]}, sign * freqs[w], w);
  };
  for (std::size_t w = 0; w < words.size(); ++w) add_word(w, +1);

  std::vector<Pair> merges;
  while (merges.size() < num_ops && !queue.empty()) {
    const auto [neg_count, best] = *queue.begin();
    if (-neg_count < 2) break;
    merges.push_back(best);
    const auto affected = std::move(where[best]);
    where.erase(best);
    for (std::size_t w : affected) {
      add_word(w, -1);
      words[w] = merge_pair(words[w], best.first, best.second);
      add_word(w, +1);
    }
  }
  return BpeMerges(std::move(merges));
}

std::vector<std::string> apply_bpe_word(std::string_view word, const BpeMerges& merges) {
  auto symbols = initial_symbols(word);
  while (symbols.size() > 1) {
    long best = -1;
    std::size_t at = 0;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      const long r = merges.rank(symbols[i], symbols[i + 1]);
      if (r >= 0 && (best < 0 || r < best)) {
        best = r;
        at = i;
      }
    }
    if (best < 0) break;
    const std::string left = symbols[at];
    const std::string right = symbols[at + 1];
    symbols = merge_pair(symbols, left, right);
  }
  return symbols;
}

std::vector<std::string> apply_bpe(std::string_view sentence, const BpeMerges& merges) {
  std::vector<std::string> out;
  for (const auto& w : split_whitespace(sentence)) {
    auto pieces = apply_bpe_word(w, merges);
    out.insert(out.end(), std::make_move_iterator(pieces.begin()),
               std::make_move_iterator(pieces.end()));
  }
  return out;
}

}  // namespace chartrans
