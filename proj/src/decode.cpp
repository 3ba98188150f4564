#include "chartrans/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "chartrans/errors.hpp"

namespace chartrans {

std::size_t default_beam_size(Segmentation mode) {
  return mode == Segmentation::kBpe ? kBpeBeamSize : kCharBeamSize;
}

template <typename T>
ModelScorer<T>::ModelScorer(Seq2Seq<T>& model, std::vector<std::int32_t> src)
    : model_(model), src_(std::move(src)) {
  if (src_.empty()) throw DataError("cannot decode an empty source (expected at least EOS)");
}

template <typename T>
void ModelScorer<T>::reset() {
  stepper_ = std::make_unique<typename Seq2Seq<T>::Stepper>(model_.start(src_));
}

template <typename T>
std::vector<std::vector<double>> ModelScorer<T>::step(std::span<const std::size_t> parents,
                                                      std::span<const std::int32_t> tokens) {
  if (!stepper_) reset();
  return stepper_->step(parents, tokens);
}

template class ModelScorer<float>;
template class ModelScorer<double>;

double hypothesis_score(double logprob, std::size_t length, double alpha) {
  if (alpha == 0.0) return logprob;
  return logprob / std::pow(double(std::max<std::size_t>(length, 1)), alpha);
}

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool emittable(std::int32_t id) { return id != kPad && id != kBos; }

SearchResult to_result(const BeamHypothesis& h, double alpha) {
  SearchResult r;
  r.tokens.assign(h.tokens.begin() + 1, h.tokens.end() - (h.finished ? 1 : 0));
  r.logprob = h.logprob;
  r.score = hypothesis_score(h.logprob, h.tokens.size() - 1, alpha);
  r.finished = h.finished;
  return r;
}

void check_rows(const std::vector<std::vector<double>>& rows, std::size_t n, std::size_t vocab) {
  if (rows.size() != n) throw ShapeError("scorer returned the wrong number of rows");
  for (const auto& r : rows) {
    if (r.size() != vocab) throw ShapeError("scorer returned a row of the wrong width");
  }
}

struct Candidate {
  double score;
  double logprob;
  std::size_t parent;
  std::int32_t token;
};

// Higher score first; ties go to the earlier hypothesis, then the lower id.
bool better(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.parent != b.parent) return a.parent < b.parent;
  return a.token < b.token;
}

SearchResult run_beam(StepScorer& scorer, std::size_t beam_size, std::size_t max_len,
                      double alpha) {
  const std::size_t vocab = scorer.vocab_size();
  scorer.reset();
  std::vector<BeamHypothesis> live{{{kBos}, 0.0, false}};
  std::vector<BeamHypothesis> finished;
  std::vector<std::size_t> parents{0};
  std::vector<std::int32_t> tokens{kBos};

  for (std::size_t t = 1; t <= max_len && !live.empty(); ++t) {
    const auto rows = scorer.step(parents, tokens);
    check_rows(rows, live.size(), vocab);

    // Only the beam_size best tokens of each hypothesis are expanded. This
    // loses nothing: every candidate from one parent has the same length, so
    // its score order is its log-probability order. If a token ranks below
    // beam_size others from the same parent, those beam_size candidates all
    // beat it, and it cannot be among the beam_size best overall. The same
    // tie order is used in both places, so ties do not break the argument.
    std::vector<Candidate> cands;
    std::vector<std::int32_t> order;
    for (std::size_t h = 0; h < live.size(); ++h) {
      order.resize(vocab);
      std::iota(order.begin(), order.end(), 0);
      const auto& lp = rows[h];
      auto by_prob = [&](std::int32_t a, std::int32_t b) {
        if (lp[a] != lp[b]) return lp[a] > lp[b];
        return a < b;
      };
      order.erase(std::remove_if(order.begin(), order.end(),
                                 [&](std::int32_t id) { return !emittable(id) || std::isnan(lp[id]); }),
                  order.end());
      const std::size_t k = std::min(beam_size, order.size());
      std::partial_sort(order.begin(), order.begin() + std::ptrdiff_t(k), order.end(), by_prob);
      for (std::size_t i = 0; i < k; ++i) {
        const std::int32_t id = order[i];
        const double total = live[h].logprob + lp[id];
        if (total == kNegInf) continue;
        cands.push_back({hypothesis_score(total, t, alpha), total, h, id});
      }
    }
    const std::size_t keep = std::min(beam_size, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + std::ptrdiff_t(keep), cands.end(), better);
    cands.resize(keep);

    std::vector<BeamHypothesis> next;
    parents.clear();
    tokens.clear();
    for (const auto& c : cands) {
      BeamHypothesis h{live[c.parent].tokens, c.logprob, c.token == kEos};
      h.tokens.push_back(c.token);
      if (h.finished) {
        finished.push_back(std::move(h));
      } else {
        parents.push_back(c.parent);
        tokens.push_back(c.token);
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);

    // Stop once no live hypothesis can still overtake the best finished one.
    // Log-probabilities only fall, so a live score is bounded by its current
    // log-probability spread over the longest possible length.
    if (!finished.empty() && !live.empty()) {
      double best = kNegInf;
      for (const auto& f : finished) {
        best = std::max(best, hypothesis_score(f.logprob, f.tokens.size() - 1, alpha));
      }
      double bound = kNegInf;
      for (const auto& h : live) {
        bound = std::max(bound, alpha > 0 ? hypothesis_score(h.logprob, max_len, alpha)
                                          : h.logprob);
      }
      if (best >= bound) live.clear();
    }
  }

  // Hypotheses cut off by max_len compete with the finished ones.
  std::vector<BeamHypothesis> pool = std::move(finished);
  for (auto& h : live) pool.push_back(std::move(h));
  if (pool.empty()) return to_result(BeamHypothesis{{kBos}, 0.0, false}, alpha);
  std::size_t best = 0;
  for (std::size_t i = 1; i < pool.size(); ++i) {
    const double a = hypothesis_score(pool[i].logprob, pool[i].tokens.size() - 1, alpha);
    const double b = hypothesis_score(pool[best].logprob, pool[best].tokens.size() - 1, alpha);
    if (a > b) best = i;
  }
  return to_result(pool[best], alpha);
}

}  // namespace

SearchResult greedy_decode(StepScorer& scorer, std::size_t max_len) {
  if (max_len == 0) throw UsageError("max_len must be at least 1");
  const std::size_t vocab = scorer.vocab_size();
  scorer.reset();
  BeamHypothesis h{{kBos}, 0.0, false};
  const std::size_t parent = 0;
  std::int32_t token = kBos;
  for (std::size_t t = 1; t <= max_len; ++t) {
    const auto rows = scorer.step(std::span(&parent, 1), std::span(&token, 1));
    check_rows(rows, 1, vocab);
    std::int32_t arg = -1;
    for (std::size_t id = 0; id < vocab; ++id) {
      if (!emittable(std::int32_t(id)) || std::isnan(rows[0][id])) continue;
      if (arg < 0 || rows[0][id] > rows[0][arg]) arg = std::int32_t(id);
    }
    if (arg < 0) break;
    h.logprob += rows[0][arg];
    h.tokens.push_back(arg);
    token = arg;
    if (arg == kEos) {
      h.finished = true;
      break;
    }
  }
  return to_result(h, 0.0);
}

SearchResult beam_search(StepScorer& scorer, std::size_t beam_size, std::size_t max_len,
                         double alpha) {
  if (beam_size == 0) throw UsageError("beam size must be at least 1");
  if (max_len == 0) throw UsageError("max_len must be at least 1");
  if (alpha < 0) throw UsageError("length penalty alpha must be non-negative");
  auto result = run_beam(scorer, beam_size, max_len, alpha);
  if (beam_size == 1) return result;
  // Beam search can prune the greedy path early and end below it. Falling back
  // to greedy in that case keeps the returned score at least the greedy one.
  auto greedy = greedy_decode(scorer, max_len);
  const std::size_t len = greedy.tokens.size() + (greedy.finished ? 1 : 0);
  greedy.score = hypothesis_score(greedy.logprob, len, alpha);
  return greedy.score > result.score ? greedy : result;
}

std::size_t decode_max_len(std::size_t src_len, Segmentation mode) {
  const std::size_t cap = mode == Segmentation::kBpe ? 60 : 500;
  return std::min(2 * src_len + 10, cap);
}

std::string detokenize(std::span<const std::int32_t> tokens, Segmentation mode,
                       const Vocab& vocab) {
  std::string out;
  for (const auto id : tokens) {
    if (id == kUnk) {
      out += kUnkSurface;
    } else if (id >= std::int32_t(kNumSpecials) && std::size_t(id) < vocab.size()) {
      out += vocab.token(id);
    }
  }
  if (mode == Segmentation::kBpe) {
    static const std::string marker = "</w>";
    std::string spaced;
    for (std::size_t i = 0; i < out.size();) {
      if (out.compare(i, marker.size(), marker) == 0) {
        spaced += ' ';
        i += marker.size();
      } else {
        spaced += out[i++];
      }
    }
    while (!spaced.empty() && spaced.back() == ' ') spaced.pop_back();
    out = std::move(spaced);
  }
  return out;
}

}  // namespace chartrans
