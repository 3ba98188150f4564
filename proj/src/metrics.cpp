#include "chartrans/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>

#include "chartrans/errors.hpp"
#include "chartrans/io.hpp"
#include "chartrans/text.hpp"

namespace chartrans {

double MetricScore::component(const std::string& key) const {
  for (const auto& [k, v] : components) {
    if (k == key) return v;
  }
  throw DataError(name + " has no component '" + key + "'");
}

namespace {

void check_corpus(std::span<const std::string> hyps, std::span<const std::string> refs) {
  if (hyps.size() != refs.size()) {
    throw DataError("hypothesis/reference count mismatch: " + std::to_string(hyps.size()) +
                    " vs " + std::to_string(refs.size()));
  }
  if (hyps.empty()) throw DataError("cannot score an empty corpus");
}

template <typename Seq>
std::map<Seq, std::size_t> ngram_counts(const std::vector<typename Seq::value_type>& items,
                                        std::size_t n) {
  std::map<Seq, std::size_t> counts;
  for (std::size_t i = 0; i + n <= items.size(); ++i) {
    ++counts[Seq(items.begin() + std::ptrdiff_t(i), items.begin() + std::ptrdiff_t(i + n))];
  }
  return counts;
}

template <typename Map>
std::size_t clipped_matches(const Map& hyp, const Map& ref) {
  std::size_t m = 0;
  for (const auto& [gram, count] : hyp) {
    auto it = ref.find(gram);
    if (it != ref.end()) m += std::min(count, it->second);
  }
  return m;
}

std::u32string join_words(std::span<const std::string> words) {
  std::u32string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += U' ';
    out += utf8_to_u32(words[i]);
  }
  return out;
}

bool is_space(char32_t c) { return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' ||
                                   c == U'\f' || c == U'\v'; }

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

MetricScore bleu4(std::span<const std::string> hyps, std::span<const std::string> refs) {
  check_corpus(hyps, refs);
  using Gram = std::vector<std::string>;
  std::size_t matches[4] = {}, totals[4] = {};
  std::size_t hyp_len = 0, ref_len = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto h = split_whitespace(hyps[s]);
    const auto r = split_whitespace(refs[s]);
    hyp_len += h.size();
    ref_len += r.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto hc = ngram_counts<Gram>(h, n);
      matches[n - 1] += clipped_matches(hc, ngram_counts<Gram>(r, n));
      totals[n - 1] += h.size() >= n ? h.size() - n + 1 : 0;
    }
  }
  MetricScore out{"bleu", 0.0, {}};
  double log_sum = 0;
  bool zero = false;
  for (std::size_t n = 0; n < 4; ++n) {
    const double p = totals[n] ? double(matches[n]) / double(totals[n]) : 0.0;
    out.components.emplace_back("p" + std::to_string(n + 1), p);
    if (p == 0) zero = true;
    else log_sum += std::log(p);
  }
  const double bp =
      hyp_len == 0 ? 0.0 : std::min(1.0, std::exp(1.0 - double(ref_len) / double(hyp_len)));
  out.components.emplace_back("bp", bp);
  out.components.emplace_back("hyp_len", double(hyp_len));
  out.components.emplace_back("ref_len", double(ref_len));
  out.value = zero ? 0.0 : 100.0 * bp * std::exp(log_sum / 4.0);
  return out;
}

MetricScore chrf(std::span<const std::string> hyps, std::span<const std::string> refs,
                 double beta, std::size_t max_n) {
  check_corpus(hyps, refs);
  if (!(beta > 0)) throw UsageError("chrF beta must be positive");
  if (max_n == 0) throw UsageError("chrF order must be at least 1");
  std::vector<std::size_t> matches(max_n), hyp_total(max_n), ref_total(max_n);
  auto strip = [](const std::string& s) {
    std::vector<char32_t> out;
    for (char32_t c : utf8_to_u32(s)) {
      if (!is_space(c)) out.push_back(c);
    }
    return out;
  };
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto h = strip(hyps[s]);
    const auto r = strip(refs[s]);
    for (std::size_t n = 1; n <= max_n; ++n) {
      const auto hc = ngram_counts<std::u32string>(h, n);
      matches[n - 1] += clipped_matches(hc, ngram_counts<std::u32string>(r, n));
      hyp_total[n - 1] += h.size() >= n ? h.size() - n + 1 : 0;
      ref_total[n - 1] += r.size() >= n ? r.size() - n + 1 : 0;
    }
  }
  double p_sum = 0, r_sum = 0;
  std::size_t orders = 0;
  for (std::size_t n = 0; n < max_n; ++n) {
    if (hyp_total[n] == 0 && ref_total[n] == 0) continue;
    ++orders;
    if (hyp_total[n]) p_sum += double(matches[n]) / double(hyp_total[n]);
    if (ref_total[n]) r_sum += double(matches[n]) / double(ref_total[n]);
  }
  MetricScore out{"chrf", 0.0, {}};
  // Both sides empty everywhere: the hypotheses equal the references.
  const double p = orders ? p_sum / double(orders) : 1.0;
  const double r = orders ? r_sum / double(orders) : 1.0;
  double f = 0;
  if (std::isinf(beta)) {
    f = r;
  } else {
    const double b2 = beta * beta;
    const double denom = b2 * p + r;
    f = denom > 0 ? (1 + b2) * p * r / denom : 0.0;
  }
  out.value = 100.0 * f;
  out.components = {{"P", p}, {"R", r}, {"beta", beta}, {"orders", double(orders)}};
  return out;
}

std::size_t levenshtein(std::u32string_view a, std::u32string_view b) {
  if (a.size() < b.size()) std::swap(a, b);
  std::vector<std::size_t> row(b.size() + 1);
  std::iota(row.begin(), row.end(), 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({up + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

std::size_t levenshtein(std::string_view a, std::string_view b) {
  return levenshtein(std::u32string_view(utf8_to_u32(a)), std::u32string_view(utf8_to_u32(b)));
}

double CharacterDetail::score() const {
  return double(shifts + edits) / double(std::max<std::size_t>(hyp_chars, 1));
}

CharacterDetail character_sentence(std::string_view hyp, std::string_view ref) {
  auto words = split_whitespace(hyp);
  const auto ref_words = split_whitespace(ref);
  const std::u32string ref_text = join_words(ref_words);

  CharacterDetail d;
  const std::u32string hyp_text = join_words(words);
  d.hyp_chars = hyp_text.size();
  std::size_t dist = levenshtein(hyp_text, ref_text);

  auto in_reference = [&](std::size_t i, std::size_t j) {
    const std::size_t len = j - i;
    for (std::size_t s = 0; s + len <= ref_words.size(); ++s) {
      if (std::equal(words.begin() + std::ptrdiff_t(i), words.begin() + std::ptrdiff_t(j),
                     ref_words.begin() + std::ptrdiff_t(s))) {
        return true;
      }
    }
    return false;
  };

  for (;;) {
    const std::size_t n = words.size();
    std::size_t best_dist = dist;
    std::vector<std::string> best;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j <= n; ++j) {
        if (!in_reference(i, j)) continue;
        std::vector<std::string> rest(words.begin(), words.begin() + std::ptrdiff_t(i));
        rest.insert(rest.end(), words.begin() + std::ptrdiff_t(j), words.end());
        for (std::size_t k = 0; k <= rest.size(); ++k) {
          if (k == i) continue;  // same place
          std::vector<std::string> moved(rest.begin(), rest.begin() + std::ptrdiff_t(k));
          moved.insert(moved.end(), words.begin() + std::ptrdiff_t(i),
                       words.begin() + std::ptrdiff_t(j));
          moved.insert(moved.end(), rest.begin() + std::ptrdiff_t(k), rest.end());
          const std::size_t nd = levenshtein(join_words(moved), ref_text);
          // A shift costs 1, so it must save at least 2 edits to pay off.
          if (nd + 1 < best_dist) {
            best_dist = nd + 1;
            best = std::move(moved);
          }
        }
      }
    }
    if (best.empty()) break;
    words = std::move(best);
    dist = best_dist - 1;
    ++d.shifts;
  }
  d.edits = dist;
  d.shifted = std::move(words);
  return d;
}

MetricScore character_score(std::span<const std::string> hyps,
                            std::span<const std::string> refs) {
  check_corpus(hyps, refs);
  double sum = 0;
  std::size_t shifts = 0, edits = 0, empty = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto d = character_sentence(hyps[s], refs[s]);
    sum += d.score();
    shifts += d.shifts;
    edits += d.edits;
    if (d.hyp_chars == 0) ++empty;
  }
  MetricScore out{"character", 100.0 * sum / double(hyps.size()), {}};
  out.components = {{"shifts", double(shifts)},
                    {"edits", double(edits)},
                    {"empty_hypotheses", double(empty)},
                    {"sentences", double(hyps.size())}};
  return out;
}

std::vector<Metric> parse_metrics(std::string_view list) {
  std::vector<Metric> out;
  std::size_t start = 0;
  while (start <= list.size()) {
    std::size_t end = list.find(',', start);
    if (end == std::string_view::npos) end = list.size();
    std::string name(list.substr(start, end - start));
    name.erase(0, name.find_first_not_of(" \t"));
    name.erase(name.find_last_not_of(" \t") + 1);
    if (!name.empty()) {
      Metric m;
      if (name == "bleu") m = Metric::kBleu;
      else if (name == "chrf") m = Metric::kChrf;
      else if (name == "character") m = Metric::kCharacter;
      else throw UsageError("unknown metric '" + name + "' (expected bleu, chrf, character)");
      if (std::find(out.begin(), out.end(), m) != out.end()) {
        throw UsageError("metric '" + name + "' requested twice");
      }
      out.push_back(m);
    }
    start = end + 1;
  }
  if (out.empty()) throw UsageError("no metrics selected");
  return out;
}

std::string ScoreReport::key_values() const {
  std::string out;
  for (const auto& s : scores) {
    out += s.name + "=" + fmt(s.value) + "\n";
    for (const auto& [k, v] : s.components) out += "# " + s.name + "." + k + "=" + fmt(v) + "\n";
  }
  return out;
}

std::string ScoreReport::table() const {
  // Column order of the usual results table; only requested metrics appear.
  static const std::pair<const char*, const char*> kColumns[] = {
      {"bleu", "BLEU↑"}, {"character", "C-TER↓"}, {"chrf", "CHRF↑"}};
  std::string head, values;
  for (const auto& [name, label] : kColumns) {
    for (const auto& s : scores) {
      if (s.name != name) continue;
      const std::string v = fmt(s.value).substr(0, fmt(s.value).size() - 2);
      const std::size_t width = std::max<std::size_t>(utf8_length(label), v.size()) + 2;
      head += std::string(width - utf8_length(label), ' ') + label;
      values += std::string(width - v.size(), ' ') + v;
    }
  }
  return head + "\n" + values + "\n";
}

ScoreReport score_corpus(std::span<const std::string> hyps, std::span<const std::string> refs,
                         std::span<const Metric> metrics, double chrf_beta) {
  if (metrics.empty()) throw UsageError("no metrics selected");
  ScoreReport r;
  for (const auto m : metrics) {
    switch (m) {
      case Metric::kBleu: r.scores.push_back(bleu4(hyps, refs)); break;
      case Metric::kChrf: r.scores.push_back(chrf(hyps, refs, chrf_beta)); break;
      case Metric::kCharacter: r.scores.push_back(character_score(hyps, refs)); break;
    }
  }
  return r;
}

ScoreReport score_files(const std::string& hyp_path, const std::string& ref_path,
                        std::span<const Metric> metrics, double chrf_beta) {
  const auto hyps = read_lines(hyp_path);
  const auto refs = read_lines(ref_path);
  if (hyps.size() != refs.size()) {
    throw DataError("'" + hyp_path + "' has " + std::to_string(hyps.size()) + " lines but '" +
                    ref_path + "' has " + std::to_string(refs.size()));
  }
  return score_corpus(hyps, refs, metrics, chrf_beta);
}

}  // namespace chartrans
