#pragma once

// Beam search and greedy decoding over any next-token scorer, and the
// conversion of output ids back to text.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "chartrans/corpus.hpp"
#include "chartrans/model.hpp"
#include "chartrans/vocab.hpp"

namespace chartrans {

inline constexpr std::size_t kCharBeamSize = 20;
inline constexpr std::size_t kBpeBeamSize = 5;

std::size_t default_beam_size(Segmentation mode);

// Per-step next-token log-probabilities for a set of hypotheses.
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  // Forget all hypotheses; the next step() starts from the root.
  virtual void reset() = 0;
  // Row i extends the hypothesis in row parents[i] of the previous call with
  // tokens[i]. The first call after reset() has a single row (parent 0, BOS).
  virtual std::vector<std::vector<double>> step(std::span<const std::size_t> parents,
                                                std::span<const std::int32_t> tokens) = 0;
};

// Incremental decoder of a model for one source sentence.
template <typename T>
class ModelScorer : public StepScorer {
 public:
  ModelScorer(Seq2Seq<T>& model, std::vector<std::int32_t> src);
  std::size_t vocab_size() const override { return model_.config().tgt_vocab; }
  void reset() override;
  std::vector<std::vector<double>> step(std::span<const std::size_t> parents,
                                        std::span<const std::int32_t> tokens) override;

 private:
  Seq2Seq<T>& model_;
  std::vector<std::int32_t> src_;
  std::unique_ptr<typename Seq2Seq<T>::Stepper> stepper_;
};

struct BeamHypothesis {
  std::vector<std::int32_t> tokens;  // BOS first; EOS last when finished
  double logprob = 0;
  bool finished = false;
};

struct SearchResult {
  std::vector<std::int32_t> tokens;  // without BOS and EOS
  double logprob = 0;
  double score = 0;    // logprob / length^alpha, length counting EOS
  bool finished = false;  // false when cut off by max_len
};

// logprob / length^alpha; alpha 0 gives the plain log-probability.
double hypothesis_score(double logprob, std::size_t length, double alpha);

// Never emits PAD or BOS. The result scores at least as well as greedy
// decoding with the same max_len.
SearchResult beam_search(StepScorer& scorer, std::size_t beam_size, std::size_t max_len,
                         double alpha = 0.0);

// Argmax at every step (lowest id on ties) until EOS or max_len tokens.
SearchResult greedy_decode(StepScorer& scorer, std::size_t max_len);

// Source length counts tokens without EOS.
std::size_t decode_max_len(std::size_t src_len, Segmentation mode);

inline constexpr const char* kUnkSurface = "⁇";

// Special ids other than UNK are skipped.
std::string detokenize(std::span<const std::int32_t> tokens, Segmentation mode,
                       const Vocab& vocab);

}  // namespace chartrans
