#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <map>
#include <random>

#include "chartrans/decode.hpp"
#include "chartrans/errors.hpp"
#include "chartrans/random.hpp"
#include "test_util.hpp"

using namespace chartrans;
using testing_util::micro_config;

namespace {

using Prefix = std::vector<std::int32_t>;  // generated tokens, BOS excluded
using Dist = std::function<std::vector<double>(const Prefix&)>;

// Tracks the prefix of every row and asks `dist` for its log-probabilities.
class PrefixScorer : public StepScorer {
 public:
  PrefixScorer(std::size_t vocab, Dist dist) : vocab_(vocab), dist_(std::move(dist)) {}
  std::size_t vocab_size() const override { return vocab_; }
  void reset() override {
    rows_.clear();
    started_ = false;
  }
  std::vector<std::vector<double>> step(std::span<const std::size_t> parents,
                                        std::span<const std::int32_t> tokens) override {
    std::vector<Prefix> next;
    for (std::size_t i = 0; i < parents.size(); ++i) {
      if (!started_) {
        EXPECT_EQ(tokens[i], kBos);
        next.push_back({});
      } else {
        Prefix p = rows_.at(parents[i]);
        p.push_back(tokens[i]);
        next.push_back(std::move(p));
      }
    }
    started_ = true;
    rows_ = std::move(next);
    ++calls;
    std::vector<std::vector<double>> out;
    for (const auto& p : rows_) out.push_back(dist_(p));
    return out;
  }
  std::size_t calls = 0;

 private:
  std::size_t vocab_;
  Dist dist_;
  std::vector<Prefix> rows_;
  bool started_ = false;
};

std::vector<double> log_softmax(std::vector<double> z) {
  double mx = -INFINITY;
  for (double x : z) mx = std::max(mx, x);
  double s = 0;
  for (double x : z) s += std::exp(x - mx);
  for (auto& x : z) x -= mx + std::log(s);
  return z;
}

// A fixed pseudo-random next-token distribution per prefix.
Dist random_dist(std::size_t vocab, std::uint64_t seed, double spread = 2.0) {
  return [=](const Prefix& p) {
    std::uint64_t h = seed;
    for (auto t : p) h = derive_seed(h, std::uint64_t(t) + 1);
    std::mt19937_64 rng(derive_seed(h, p.size()));
    std::normal_distribution<double> n(0.0, spread);
    std::vector<double> z(vocab);
    for (auto& x : z) x = n(rng);
    return log_softmax(z);
  };
}

struct Best {
  Prefix tokens;
  double logprob = -INFINITY;
};

// Exhaustive search: every EOS-terminated sequence up to max_len tokens plus
// every unterminated sequence of exactly max_len tokens. PAD and BOS are never
// emitted.
Best brute_force(const Dist& dist, std::size_t vocab, std::size_t max_len) {
  Best best;
  std::function<void(Prefix&, double)> walk = [&](Prefix& p, double lp) {
    const auto d = dist(p);
    for (std::int32_t id = 0; id < std::int32_t(vocab); ++id) {
      if (id == kPad || id == kBos) continue;
      const double total = lp + d[id];
      if (id == kEos) {
        if (total > best.logprob) best = {p, total};
        continue;
      }
      p.push_back(id);
      if (p.size() == max_len) {
        if (total > best.logprob) best = {p, total};
      } else {
        walk(p, total);
      }
      p.pop_back();
    }
  };
  Prefix root;
  walk(root, 0.0);
  return best;
}

double sequence_logprob(const Dist& dist, const Prefix& tokens, bool finished) {
  double lp = 0;
  Prefix p;
  for (auto t : tokens) {
    lp += dist(p)[t];
    p.push_back(t);
  }
  if (finished) lp += dist(p)[kEos];
  return lp;
}

// Straightforward beam: expands every token of every live hypothesis.
SearchResult reference_beam(const Dist& dist, std::size_t vocab, std::size_t k,
                            std::size_t max_len) {
  struct Hyp {
    Prefix p;
    double lp;
  };
  std::vector<Hyp> live{{{}, 0.0}};
  std::vector<std::pair<Hyp, bool>> done;
  for (std::size_t t = 1; t <= max_len && !live.empty(); ++t) {
    struct C {
      double lp;
      std::size_t parent;
      std::int32_t id;
    };
    std::vector<C> cs;
    for (std::size_t h = 0; h < live.size(); ++h) {
      const auto d = dist(live[h].p);
      for (std::int32_t id = 0; id < std::int32_t(vocab); ++id) {
        if (id == kPad || id == kBos) continue;
        cs.push_back({live[h].lp + d[id], h, id});
      }
    }
    std::stable_sort(cs.begin(), cs.end(), [](const C& a, const C& b) { return a.lp > b.lp; });
    cs.resize(std::min(k, cs.size()));
    std::vector<Hyp> next;
    for (const auto& c : cs) {
      Hyp h{live[c.parent].p, c.lp};
      if (c.id == kEos) {
        done.push_back({h, true});
      } else {
        h.p.push_back(c.id);
        next.push_back(h);
      }
    }
    live = std::move(next);
    double best_done = -INFINITY, best_live = -INFINITY;
    for (auto& d : done) best_done = std::max(best_done, d.first.lp);
    for (auto& h : live) best_live = std::max(best_live, h.lp);
    if (!done.empty() && best_done >= best_live) live.clear();
  }
  for (auto& h : live) done.push_back({h, false});
  SearchResult r;
  r.logprob = -INFINITY;
  for (auto& [h, fin] : done) {
    if (h.lp > r.logprob) {
      r.tokens = h.p;
      r.logprob = h.lp;
      r.finished = fin;
    }
  }
  return r;
}

std::map<Prefix, std::vector<double>> suboptimal_table() {
  // ids: EOS = 2, A = 4, B = 5; vocab 6.
  auto row = [](double eos, double a, double b) {
    auto l = [](double x) { return x > 0 ? std::log(x) : -INFINITY; };
    return std::vector<double>{-INFINITY, -INFINITY, l(eos), -INFINITY, l(a), l(b)};
  };
  return {
      {{}, row(0.0, 0.55, 0.45)},
      {{4}, row(0.3, 0.4, 0.3)},
      {{5}, row(0.05, 0.05, 0.9)},
  };
}

Dist table_dist(std::map<Prefix, std::vector<double>> table) {
  return [table = std::move(table)](const Prefix& p) {
    auto it = table.find(p);
    if (it != table.end()) return it->second;
    return std::vector<double>{-INFINITY, -INFINITY, 0.0, -INFINITY, -INFINITY, -INFINITY};
  };
}

}  // namespace

TEST(BeamSearch, BeatsGreedyOnSuboptimalExample) {
  const auto dist = table_dist(suboptimal_table());
  PrefixScorer s(6, dist);
  const auto g = greedy_decode(s, 5);
  EXPECT_EQ(g.tokens, (Prefix{4, 4}));
  EXPECT_NEAR(std::exp(g.logprob), 0.55 * 0.4, 1e-12);
  const auto b = beam_search(s, 2, 5);
  EXPECT_EQ(b.tokens, (Prefix{5, 5}));
  EXPECT_NEAR(std::exp(b.logprob), 0.45 * 0.9, 1e-12);
  EXPECT_TRUE(b.finished);
  const auto bf = brute_force(dist, 6, 3);
  EXPECT_EQ(b.tokens, bf.tokens);
}

TEST(BeamSearch, ExhaustiveBeamMatchesBruteForce) {
  for (std::size_t vocab : {5u, 6u, 7u}) {
    for (std::size_t max_len = 1; max_len <= 4; ++max_len) {
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto dist = random_dist(vocab, seed * 31 + vocab);
        PrefixScorer s(vocab, dist);
        std::size_t width = 1;
        for (std::size_t i = 0; i < max_len; ++i) width *= vocab;
        const auto got = beam_search(s, width, max_len);
        const auto want = brute_force(dist, vocab, max_len);
        EXPECT_EQ(got.tokens, want.tokens) << vocab << " " << max_len << " " << seed;
        EXPECT_NEAR(got.logprob, want.logprob, 1e-12);
      }
    }
  }
}

TEST(BeamSearch, TopKExpansionMatchesFullExpansion) {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const std::size_t vocab = 6 + seed % 8, k = 1 + seed % 5, max_len = 2 + seed % 5;
    const auto dist = random_dist(vocab, seed, 1.0 + double(seed % 3));
    PrefixScorer s(vocab, dist);
    auto got = beam_search(s, k, max_len);
    auto want = reference_beam(dist, vocab, k, max_len);
    PrefixScorer g(vocab, dist);
    const auto greedy = greedy_decode(g, max_len);
    if (greedy.logprob > want.logprob) want = greedy;
    EXPECT_EQ(got.tokens, want.tokens) << seed;
    EXPECT_NEAR(got.logprob, want.logprob, 1e-12);
  }
}

TEST(BeamSearch, NeverWorseThanGreedy) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const std::size_t vocab = 5 + seed % 10, max_len = 1 + seed % 8;
    const auto dist = random_dist(vocab, 1000 + seed);
    PrefixScorer s(vocab, dist);
    const auto g = greedy_decode(s, max_len);
    for (std::size_t k = 1; k <= 6; ++k) {
      const auto b = beam_search(s, k, max_len);
      EXPECT_GE(b.logprob, g.logprob) << seed << " k=" << k;
      EXPECT_NEAR(b.logprob, sequence_logprob(dist, b.tokens, b.finished), 1e-9);
    }
  }
}

TEST(BeamSearch, OutputHasNoSpecialsExceptUnk) {
  // PAD and BOS are the most likely tokens everywhere.
  auto dist = [](const Prefix& p) {
    std::vector<double> z{5.0, 4.0, p.size() >= 3 ? 3.0 : -1.0, 0.5, 1.0, 0.2};
    return log_softmax(z);
  };
  PrefixScorer s(6, dist);
  for (std::size_t k : {1u, 3u}) {
    const auto r = beam_search(s, k, 10);
    EXPECT_TRUE(r.finished);
    for (auto t : r.tokens) {
      EXPECT_NE(t, kPad);
      EXPECT_NE(t, kBos);
      EXPECT_NE(t, kEos);
    }
  }
}

TEST(BeamSearch, LengthPenaltyChangesPreference) {
  // Short: EOS now (p 0.4). Long: A A A EOS with p 0.6 * 0.9^3 ~ 0.44 but
  // with per-token normalization the long one wins by a wider margin.
  std::map<Prefix, std::vector<double>> t;
  auto row = [](double eos, double a) {
    return std::vector<double>{-INFINITY, -INFINITY, std::log(eos), -INFINITY, std::log(a)};
  };
  t[{}] = row(0.5, 0.5);
  t[{4}] = row(0.1, 0.9);
  t[{4, 4}] = row(0.1, 0.9);
  t[{4, 4, 4}] = row(0.9, 0.1);
  t[{4, 4, 4, 4}] = row(1.0 - 1e-9, 1e-9);
  auto dist = [t](const Prefix& p) {
    auto it = t.find(p);
    return it != t.end() ? it->second
                         : std::vector<double>{-INFINITY, -INFINITY, 0.0, -INFINITY, -INFINITY};
  };
  PrefixScorer s(5, dist);
  EXPECT_TRUE(beam_search(s, 3, 6, 0.0).tokens.empty());
  const auto normalized = beam_search(s, 3, 6, 1.0);
  EXPECT_EQ(normalized.tokens, (Prefix{4, 4, 4}));
  EXPECT_NEAR(normalized.score, normalized.logprob / 4.0, 1e-12);
}

TEST(BeamSearch, RejectsBadArguments) {
  PrefixScorer s(5, random_dist(5, 1));
  EXPECT_THROW(beam_search(s, 0, 3), UsageError);
  EXPECT_THROW(beam_search(s, 2, 0), UsageError);
  EXPECT_THROW(greedy_decode(s, 0), UsageError);
}

TEST(Greedy, StopsAtEosAndHonorsMaxLen) {
  auto eos_at_two = [](const Prefix& p) {
    std::vector<double> z{0, 0, p.size() == 2 ? 9.0 : -9.0, 0, 3.0, 2.0};
    return log_softmax(z);
  };
  PrefixScorer s(6, eos_at_two);
  auto r = greedy_decode(s, 10);
  EXPECT_EQ(r.tokens, (Prefix{4, 4}));
  EXPECT_TRUE(r.finished);
  EXPECT_EQ(s.calls, 3u);
  r = greedy_decode(s, 1);
  EXPECT_EQ(r.tokens, (Prefix{4}));
  EXPECT_FALSE(r.finished);
}

TEST(Greedy, TiesGoToLowestId) {
  auto flat = [](const Prefix& p) {
    std::vector<double> z{0, 0, p.empty() ? -5.0 : 5.0, 1.0, 1.0, 1.0};
    return log_softmax(z);
  };
  PrefixScorer s(6, flat);
  EXPECT_EQ(greedy_decode(s, 4).tokens, (Prefix{kUnk}));
  EXPECT_EQ(beam_search(s, 1, 4).tokens, (Prefix{kUnk}));
}

TEST(ModelDecode, BeamOneEqualsGreedyOnMicroModels) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    const auto mode = static_cast<ModelMode>(trial % 3);
    auto cfg = micro_config(mode);
    Seq2Seq<double> model(cfg, 500 + trial / 10);
    std::vector<std::int32_t> src;
    const std::size_t len = 1 + rng() % 12;
    for (std::size_t i = 0; i < len; ++i) {
      src.push_back(std::int32_t(kNumSpecials + rng() % (cfg.src_vocab - kNumSpecials)));
    }
    src.push_back(kEos);
    ModelScorer<double> scorer(model, src);
    const auto g = greedy_decode(scorer, 12);
    const auto b = beam_search(scorer, 1, 12);
    EXPECT_EQ(g.tokens, b.tokens) << trial;
    EXPECT_DOUBLE_EQ(g.logprob, b.logprob);
    const auto wide = beam_search(scorer, 4, 12);
    EXPECT_GE(wide.logprob, g.logprob - 1e-12);
  }
}

TEST(ModelDecode, Deterministic) {
  auto cfg = micro_config(ModelMode::kCharReduction);
  Seq2Seq<float> model(cfg, 4);
  std::vector<std::int32_t> src{5, 6, 7, 8, 9, kEos};
  ModelScorer<float> a(model, src), b(model, src);
  EXPECT_EQ(beam_search(a, 5, 20).tokens, beam_search(b, 5, 20).tokens);
}

TEST(Decode, DefaultBeamSizes) {
  EXPECT_EQ(default_beam_size(Segmentation::kChar), 20u);
  EXPECT_EQ(default_beam_size(Segmentation::kBpe), 5u);
}

TEST(Decode, MaxLen) {
  EXPECT_EQ(decode_max_len(450, Segmentation::kChar), 500u);
  EXPECT_EQ(decode_max_len(10, Segmentation::kChar), 30u);
  EXPECT_EQ(decode_max_len(50, Segmentation::kBpe), 60u);
  EXPECT_EQ(decode_max_len(0, Segmentation::kBpe), 10u);
}

TEST(Detokenize, CharMode) {
  std::vector<std::string> toks{"a", " ", "b"};
  auto v = Vocab::from_tokens(toks);
  auto ids = encode("a b", Segmentation::kChar, v);
  ids.pop_back();
  EXPECT_EQ(detokenize(ids, Segmentation::kChar, v), "a b");
  ids.push_back(kUnk);
  EXPECT_EQ(detokenize(ids, Segmentation::kChar, v), "a b⁇");
}

TEST(Detokenize, BpeMode) {
  std::vector<std::string> toks{"lo", "w</w>", "it</w>"};
  auto v = Vocab::from_tokens(toks);
  std::vector<std::int32_t> ids{4, 5, 6};
  EXPECT_EQ(detokenize(ids, Segmentation::kBpe, v), "low it");
  ids.insert(ids.begin() + 2, kUnk);
  EXPECT_EQ(detokenize(ids, Segmentation::kBpe, v), "low ⁇it");
}

TEST(Detokenize, RoundTripsCharStrings) {
  std::vector<std::string> alphabet{"a", "b", "c", " ", "é", "z"};
  auto v = Vocab::from_tokens(alphabet);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 100; ++i) {
    std::string s;
    const std::size_t n = rng() % 20;
    for (std::size_t k = 0; k < n; ++k) s += alphabet[rng() % alphabet.size()];
    auto ids = encode(s, Segmentation::kChar, v);
    ids.pop_back();
    EXPECT_EQ(detokenize(ids, Segmentation::kChar, v), s);
  }
}
