#pragma once

// Corpus-level translation metrics: BLEU-4, chrF and CharacTER.
// All are case-sensitive and apply no normalization beyond what is stated.

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace chartrans {

struct MetricScore {
  std::string name;  // "bleu", "chrf" or "character"
  double value = 0;  // 0..100; CharacTER may exceed 100
  std::vector<std::pair<std::string, double>> components;

  double component(const std::string& key) const;  // DataError if absent
};

// Whitespace-split words, clipped n-gram precisions for n = 1..4, geometric
// mean and brevity penalty min(1, exp(1 - r/c)). No smoothing: any zero
// precision gives 0.
MetricScore bleu4(std::span<const std::string> hyps, std::span<const std::string> refs);

// Character n-grams (n = 1..max_n) with whitespace removed first, so n-grams
// run across word boundaries. Matches and totals are summed over the corpus
// per order; P and R are averaged over the orders present in either side and
// combined as (1+b^2)PR / (b^2 P + R). beta may be +infinity (score = 100 R).
MetricScore chrf(std::span<const std::string> hyps, std::span<const std::string> refs,
                 double beta = 3.0, std::size_t max_n = 6);

struct CharacterDetail {
  std::size_t shifts = 0;
  std::size_t edits = 0;       // character edit distance after shifting
  std::size_t hyp_chars = 0;   // code points of the hypothesis words joined by spaces
  std::vector<std::string> shifted;  // hypothesis words after shifting

  // (shifts + edits) / hyp_chars, with an empty hypothesis counted as length 1.
  double score() const;
};

// Greedy shift search for one sentence. Each round tries every move of a
// contiguous hypothesis word block that also occurs as a contiguous span of
// the reference, and applies the move that lowers shifts + edit distance the
// most (first found on ties). Stops when no move lowers it.
CharacterDetail character_sentence(std::string_view hyp, std::string_view ref);

// Mean of per-sentence scores, times 100. Lower is better.
MetricScore character_score(std::span<const std::string> hyps,
                            std::span<const std::string> refs);

// Unit-cost edit distance over code points.
std::size_t levenshtein(std::u32string_view a, std::u32string_view b);
std::size_t levenshtein(std::string_view a, std::string_view b);

enum class Metric { kBleu, kChrf, kCharacter };

// Comma-separated names: bleu, chrf, character. UsageError on unknown names,
// duplicates or an empty selection.
std::vector<Metric> parse_metrics(std::string_view list);

struct ScoreReport {
  std::vector<MetricScore> scores;  // in request order

  // "name=value" per metric, each followed by "# name.key=value" lines.
  std::string key_values() const;
  // Column table with arrows marking the better direction.
  std::string table() const;
};

ScoreReport score_corpus(std::span<const std::string> hyps, std::span<const std::string> refs,
                         std::span<const Metric> metrics, double chrf_beta = 3.0);

// DataError when the files have different line counts.
ScoreReport score_files(const std::string& hyp_path, const std::string& ref_path,
                        std::span<const Metric> metrics, double chrf_beta = 3.0);

}  // namespace chartrans
