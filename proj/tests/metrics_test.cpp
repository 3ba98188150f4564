#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "chartrans/errors.hpp"
#include "chartrans/metrics.hpp"
#include "chartrans/text.hpp"

using namespace chartrans;

namespace {

using Corpus = std::vector<std::string>;

std::string random_sentence(std::mt19937_64& rng, const std::vector<std::string>& words,
                            std::size_t max_words) {
  std::string s;
  const std::size_t n = rng() % (max_words + 1);
  for (std::size_t i = 0; i < n; ++i) {
    if (i) s += ' ';
    s += words[rng() % words.size()];
  }
  return s;
}

// Textbook corpus BLEU with n-grams keyed as space-joined strings.
double bleu_oracle(const Corpus& hyps, const Corpus& refs) {
  double logp = 0;
  double c = 0, r = 0;
  for (int n = 1; n <= 4; ++n) {
    double match = 0, total = 0;
    for (std::size_t s = 0; s < hyps.size(); ++s) {
      auto grams = [n](const std::string& line) {
        std::map<std::string, int> m;
        auto w = split_whitespace(line);
        for (int i = 0; i + n <= int(w.size()); ++i) {
          std::string g;
          for (int k = 0; k < n; ++k) g += w[i + k] + "\x01";
          ++m[g];
        }
        return m;
      };
      auto h = grams(hyps[s]), rf = grams(refs[s]);
      for (auto& [g, cnt] : h) {
        total += cnt;
        match += std::min(cnt, rf.count(g) ? rf[g] : 0);
      }
      if (n == 1) {
        c += double(split_whitespace(hyps[s]).size());
        r += double(split_whitespace(refs[s]).size());
      }
    }
    if (match == 0) return 0;
    logp += std::log(match / total) / 4;
  }
  const double bp = c < r ? std::exp(1 - r / c) : 1.0;
  return 100 * bp * std::exp(logp);
}

// chrF straight from the definition, character by character.
double chrf_oracle(const Corpus& hyps, const Corpus& refs, double beta, int max_n) {
  double p = 0, r = 0;
  int orders = 0;
  for (int n = 1; n <= max_n; ++n) {
    double match = 0, ht = 0, rt = 0;
    for (std::size_t s = 0; s < hyps.size(); ++s) {
      auto grams = [n](const std::string& line) {
        std::u32string t;
        for (char32_t ch : utf8_to_u32(line)) {
          if (ch != U' ') t += ch;
        }
        std::map<std::u32string, int> m;
        for (int i = 0; i + n <= int(t.size()); ++i) ++m[t.substr(i, n)];
        return m;
      };
      auto h = grams(hyps[s]), rf = grams(refs[s]);
      for (auto& [g, cnt] : h) {
        ht += cnt;
        match += std::min(cnt, rf.count(g) ? rf[g] : 0);
      }
      for (auto& [g, cnt] : rf) rt += cnt;
    }
    if (ht == 0 && rt == 0) continue;
    ++orders;
    p += ht ? match / ht : 0;
    r += rt ? match / rt : 0;
  }
  if (!orders) return 100;
  p /= orders;
  r /= orders;
  const double b2 = beta * beta;
  return b2 * p + r > 0 ? 100 * (1 + b2) * p * r / (b2 * p + r) : 0;
}

// Memoized recursion over suffixes.
std::size_t edit_oracle(const std::u32string& a, const std::u32string& b) {
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
  std::function<std::size_t(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) {
    if (i == a.size()) return b.size() - j;
    if (j == b.size()) return a.size() - i;
    auto key = std::make_pair(i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    std::size_t best = std::min(go(i + 1, j) + 1, go(i, j + 1) + 1);
    best = std::min(best, go(i + 1, j + 1) + (a[i] == b[j] ? 0 : 1));
    return memo[key] = best;
  };
  return go(0, 0);
}

std::u32string joined(const std::vector<std::string>& w) {
  std::string s;
  for (std::size_t i = 0; i < w.size(); ++i) s += (i ? " " : "") + w[i];
  return utf8_to_u32(s);
}

// Smallest shifts + edit distance over every sequence of up to `depth` block
// moves (blocks restricted to reference spans, as in the scorer).
std::size_t character_brute_force(const std::string& hyp, const std::string& ref, int depth) {
  const auto rw = split_whitespace(ref);
  const auto rt = joined(rw);
  std::set<std::string> spans;
  for (std::size_t i = 0; i < rw.size(); ++i) {
    std::string s;
    for (std::size_t j = i; j < rw.size(); ++j) {
      s += rw[j] + "\x01";
      spans.insert(s);
    }
  }
  std::size_t best = edit_oracle(joined(split_whitespace(hyp)), rt);
  std::function<void(const std::vector<std::string>&, int)> go =
      [&](const std::vector<std::string>& w, int used) {
        best = std::min(best, std::size_t(used) + edit_oracle(joined(w), rt));
        if (used == depth) return;
        for (std::size_t i = 0; i < w.size(); ++i) {
          std::string key;
          for (std::size_t j = i + 1; j <= w.size(); ++j) {
            key += w[j - 1] + "\x01";
            if (!spans.count(key)) continue;
            std::vector<std::string> rest(w.begin(), w.begin() + i);
            rest.insert(rest.end(), w.begin() + j, w.end());
            for (std::size_t k = 0; k <= rest.size(); ++k) {
              if (k == i) continue;
              std::vector<std::string> m(rest.begin(), rest.begin() + k);
              m.insert(m.end(), w.begin() + i, w.begin() + j);
              m.insert(m.end(), rest.begin() + k, rest.end());
              go(m, used + 1);
            }
          }
        }
      };
  go(split_whitespace(hyp), 0);
  return best;
}

const std::vector<std::string> kWords{"the", "cat", "sat", "on", "mat", "a", "dog", "ran"};

}  // namespace

TEST(Bleu, IdenticalIsHundred) {
  Corpus c{"the cat sat on the mat", "a dog ran over the hill today"};
  auto s = bleu4(c, c);
  EXPECT_DOUBLE_EQ(s.value, 100.0);
  EXPECT_DOUBLE_EQ(s.component("bp"), 1.0);
}

TEST(Bleu, ClippedUnigramPrecision) {
  Corpus h{"the the the the the the the"}, r{"the cat is on the mat"};
  auto s = bleu4(h, r);
  EXPECT_DOUBLE_EQ(s.component("p1"), 2.0 / 7.0);
  EXPECT_EQ(s.value, 0.0);  // no matching bigram
}

TEST(Bleu, BrevityPenaltyBelowOneForShortHypothesis) {
  Corpus h{"the cat sat on the"}, r{"the cat sat on the mat"};
  auto s = bleu4(h, r);
  EXPECT_DOUBLE_EQ(s.component("p1"), 1.0);
  EXPECT_DOUBLE_EQ(s.component("p4"), 1.0);
  EXPECT_LT(s.component("bp"), 1.0);
  EXPECT_NEAR(s.component("bp"), std::exp(1.0 - 6.0 / 5.0), 1e-15);
  EXPECT_NEAR(s.value, 100 * std::exp(1.0 - 6.0 / 5.0), 1e-12);
}

TEST(Bleu, MatchesOracleOnRandomCorpora) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 200; ++t) {
    Corpus h, r;
    const std::size_t n = 1 + rng() % 6;
    for (std::size_t i = 0; i < n; ++i) {
      r.push_back(random_sentence(rng, kWords, 12));
      h.push_back(rng() % 3 ? r.back() : random_sentence(rng, kWords, 12));
      if (rng() % 2 && !h.back().empty()) h.back() += " cat";
    }
    EXPECT_NEAR(bleu4(h, r).value, bleu_oracle(h, r), 1e-9) << t;
  }
}

TEST(Bleu, PermutationInvariant) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    Corpus h, r;
    for (int i = 0; i < 6; ++i) {
      r.push_back(random_sentence(rng, kWords, 10));
      h.push_back(random_sentence(rng, kWords, 10));
    }
    std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5};
    std::shuffle(idx.begin(), idx.end(), rng);
    Corpus h2, r2;
    for (auto i : idx) {
      h2.push_back(h[i]);
      r2.push_back(r[i]);
    }
    EXPECT_NEAR(bleu4(h, r).value, bleu4(h2, r2).value, 1e-9);
    EXPECT_NEAR(chrf(h, r).value, chrf(h2, r2).value, 1e-9);
    EXPECT_NEAR(character_score(h, r).value, character_score(h2, r2).value, 1e-9);
  }
}

TEST(Bleu, Errors) {
  Corpus a{"x"}, b{"x", "y"}, empty;
  EXPECT_THROW(bleu4(a, b), DataError);
  EXPECT_THROW(bleu4(empty, empty), DataError);
  EXPECT_THROW(chrf(a, b), DataError);
  EXPECT_THROW(character_score(a, b), DataError);
}

TEST(Chrf, IdenticalIsHundred) {
  Corpus c{"ab", "hello world", "x"};
  EXPECT_NEAR(chrf(c, c).value, 100.0, 1e-12);
}

TEST(Chrf, UnigramExample) {
  Corpus h{"abc"}, r{"abd"};
  auto s = chrf(h, r, 3.0, 1);
  EXPECT_DOUBLE_EQ(s.component("P"), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(s.component("R"), 2.0 / 3.0);
}

TEST(Chrf, SpacesAreIgnored) {
  Corpus h{"a b c"}, r{"abc"};
  EXPECT_NEAR(chrf(h, r).value, 100.0, 1e-12);
}

TEST(Chrf, MatchesOracleOnRandomCorpora) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 200; ++t) {
    Corpus h, r;
    const std::size_t n = 1 + rng() % 5;
    for (std::size_t i = 0; i < n; ++i) {
      r.push_back(random_sentence(rng, kWords, 6));
      h.push_back(random_sentence(rng, kWords, 6));
    }
    const double beta = 0.5 + double(rng() % 5);
    EXPECT_NEAR(chrf(h, r, beta).value, chrf_oracle(h, r, beta, 6), 1e-9) << t;
  }
}

TEST(Chrf, LargeBetaApproachesRecall) {
  Corpus h{"the cat sat"}, r{"the cat sat on the mat"};
  auto s = chrf(h, r, 1e6);
  EXPECT_NEAR(s.value, 100 * s.component("R"), 1e-6);
  EXPECT_NEAR(chrf(h, r, INFINITY).value, 100 * s.component("R"), 1e-12);
}

TEST(Chrf, BetweenPrecisionAndRecall) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 200; ++t) {
    Corpus h{random_sentence(rng, kWords, 8)}, r{random_sentence(rng, kWords, 8)};
    for (double beta : {0.25, 1.0, 3.0, 10.0}) {
      auto s = chrf(h, r, beta);
      const double p = s.component("P"), rr = s.component("R");
      EXPECT_LE(std::min(p, rr) - 1e-12, s.value / 100);
      EXPECT_GE(std::max(p, rr) + 1e-12, s.value / 100);
    }
  }
}

TEST(Levenshtein, Examples) {
  EXPECT_EQ(levenshtein(std::string_view(""), std::string_view("abc")), 3u);
  EXPECT_EQ(levenshtein(std::string_view("kitten"), std::string_view("sitting")), 3u);
  EXPECT_EQ(levenshtein(std::string_view("é"), std::string_view("e")), 1u);
}

TEST(Levenshtein, MatchesOracleSymmetricAndTriangle) {
  std::mt19937_64 rng(5);
  auto rand_str = [&] {
    std::u32string s;
    const std::size_t n = rng() % 9;
    for (std::size_t i = 0; i < n; ++i) s += char32_t(U'a' + rng() % 3);
    return s;
  };
  for (int t = 0; t < 300; ++t) {
    auto a = rand_str(), b = rand_str(), c = rand_str();
    const auto ab = levenshtein(a, b);
    EXPECT_EQ(ab, edit_oracle(a, b));
    EXPECT_EQ(ab, levenshtein(b, a));
    EXPECT_LE(levenshtein(a, c), ab + levenshtein(b, c));
  }
}

TEST(Character, Examples) {
  EXPECT_NEAR(character_score(Corpus{"b a"}, Corpus{"a b"}).value, 100.0 / 3, 0.01);
  EXPECT_NEAR(character_score(Corpus{"abc"}, Corpus{"axc"}).value, 100.0 / 3, 0.01);
  Corpus c{"the cat", "x y z"};
  EXPECT_EQ(character_score(c, c).value, 0.0);
  const auto d = character_sentence("b a", "a b");
  EXPECT_EQ(d.shifts, 1u);
  EXPECT_EQ(d.edits, 0u);
  EXPECT_EQ(d.hyp_chars, 3u);
  EXPECT_EQ(character_brute_force("b a", "a b", 3), 1u);
}

TEST(Character, EmptyHypothesisIsFlagged) {
  auto s = character_score(Corpus{""}, Corpus{"abc"});
  EXPECT_DOUBLE_EQ(s.value, 300.0);
  EXPECT_EQ(s.component("empty_hypotheses"), 1.0);
}

TEST(Character, GreedyBoundedByPlainEditsAndBruteForce) {
  std::mt19937_64 rng(6);
  const std::vector<std::string> words{"ab", "c", "abc", "d", "ba"};
  std::size_t agree = 0, total = 0;
  for (int t = 0; t < 150; ++t) {
    const std::string r = random_sentence(rng, words, 4);
    std::string h;
    {
      auto w = split_whitespace(r);
      std::shuffle(w.begin(), w.end(), rng);
      if (rng() % 2 && !w.empty()) w[rng() % w.size()] = words[rng() % words.size()];
      for (std::size_t i = 0; i < w.size(); ++i) h += (i ? " " : "") + w[i];
    }
    const auto d = character_sentence(h, r);
    const auto plain = edit_oracle(joined(split_whitespace(h)), joined(split_whitespace(r)));
    EXPECT_LE(d.shifts + d.edits, plain);
    EXPECT_EQ(d.edits, edit_oracle(joined(d.shifted), joined(split_whitespace(r))));
    const auto optimum = character_brute_force(h, r, 2);
    EXPECT_GE(d.shifts + d.edits, std::min<std::size_t>(optimum, plain));
    agree += (d.shifts + d.edits == optimum);
    ++total;
  }
  // Greedy is a heuristic, but on short sentences it nearly always finds the
  // optimum.
  EXPECT_GE(double(agree) / double(total), 0.9);
}

TEST(Metrics, OptimumOnlyWhenIdentical) {
  Corpus r{"the cat sat on the mat", "hello there"};
  Corpus h{"the cat sat on the mat", "hello therE"};
  EXPECT_LT(bleu4(h, r).value, 100.0);
  EXPECT_LT(chrf(h, r).value, 100.0);
  EXPECT_GT(character_score(h, r).value, 0.0);
}

TEST(Metrics, ParseSelection) {
  EXPECT_EQ(parse_metrics("bleu,chrf,character"),
            (std::vector<Metric>{Metric::kBleu, Metric::kChrf, Metric::kCharacter}));
  EXPECT_EQ(parse_metrics("chrf"), (std::vector<Metric>{Metric::kChrf}));
  EXPECT_THROW(parse_metrics(""), UsageError);
  EXPECT_THROW(parse_metrics("bleu,ter"), UsageError);
  EXPECT_THROW(parse_metrics("bleu,bleu"), UsageError);
  std::vector<Metric> none;
  Corpus c{"a"};
  EXPECT_THROW(score_corpus(c, c, none), UsageError);
}

TEST(Metrics, ReportFormats) {
  Corpus c{"the cat sat on the mat"};
  const auto all = parse_metrics("bleu,chrf,character");
  auto r = score_corpus(c, c, all);
  const auto kv = r.key_values();
  EXPECT_NE(kv.find("bleu=100.0000\n"), std::string::npos);
  EXPECT_NE(kv.find("chrf=100.0000\n"), std::string::npos);
  EXPECT_NE(kv.find("character=0.0000\n"), std::string::npos);
  EXPECT_NE(kv.find("# bleu.p1=1.0000\n"), std::string::npos);
  const auto table = r.table();
  const auto b = table.find("BLEU↑"), t = table.find("C-TER↓"), f = table.find("CHRF↑");
  ASSERT_NE(b, std::string::npos);
  ASSERT_NE(t, std::string::npos);
  ASSERT_NE(f, std::string::npos);
  EXPECT_LT(b, t);
  EXPECT_LT(t, f);
}

TEST(Metrics, ScoreFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "ctnmt_metrics_files";
  std::filesystem::create_directories(dir);
  const auto a = (dir / "a.txt").string(), b = (dir / "b.txt").string(),
             c = (dir / "c.txt").string();
  std::ofstream(a) << "the cat\nsat on the mat\n";
  std::ofstream(b) << "the cat\nsat on the mat\n";
  std::ofstream(c) << "the cat\n";
  const auto all = parse_metrics("bleu,chrf,character");
  auto r = score_files(a, b, all);
  EXPECT_DOUBLE_EQ(r.scores[0].value, 100.0);
  EXPECT_DOUBLE_EQ(r.scores[1].value, 100.0);
  EXPECT_DOUBLE_EQ(r.scores[2].value, 0.0);
  EXPECT_THROW(score_files(a, c, all), DataError);
  EXPECT_THROW(score_files((dir / "missing").string(), b, all), IoError);
  std::filesystem::remove_all(dir);
}
