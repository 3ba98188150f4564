#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "chartrans/bpe.hpp"
#include "chartrans/vocab.hpp"

namespace chartrans {

enum class Segmentation { kChar, kBpe };

std::string_view segmentation_name(Segmentation s);
Segmentation parse_segmentation(std::string_view name);

// Turns raw sentences into token strings. Character mode consumes the raw
// line code point by code point (spaces included); BPE mode pretokenizes and
// then applies the merge rules.
class Segmenter {
 public:
  static Segmenter chars();
  static Segmenter bpe(BpeMerges merges);

  Segmentation mode() const { return mode_; }
  const BpeMerges* merges() const { return merges_.get(); }
  std::vector<std::string> tokens(std::string_view sentence) const;

 private:
  Segmentation mode_ = Segmentation::kChar;
  std::shared_ptr<const BpeMerges> merges_;
};

// Token ids of a sentence followed by EOS; unknown tokens become UNK.
std::vector<std::int32_t> encode(std::string_view sentence, const Vocab& vocab,
                                 const Segmenter& segmenter);

// Same, selecting the segmentation explicitly. BPE mode requires merges;
// passing none throws UsageError.
std::vector<std::int32_t> encode(std::string_view sentence, Segmentation mode, const Vocab& vocab,
                                 const BpeMerges* merges = nullptr);

struct SentencePair {
  std::string src;
  std::string tgt;
  bool operator==(const SentencePair&) const = default;
};

struct LengthLimits {
  std::size_t max_chars = 450;
  std::size_t max_tokens = 50;
};

// Drops pairs where either side is longer than the limit: code points for
// character segmentation, tokens for BPE. Limits are inclusive.
std::vector<SentencePair> filter_corpus(std::span<const SentencePair> pairs,
                                        const Segmenter& src, const Segmenter& tgt,
                                        const LengthLimits& limits = {});

struct EncodedPair {
  std::vector<std::int32_t> src;  // ends with EOS
  std::vector<std::int32_t> tgt;  // ends with EOS
};

// A padded mini-batch. Target rows are BOS y_1 .. y_n EOS PAD..; the decoder
// reads columns [0, tgt_len - 1) and predicts columns [1, tgt_len).
struct Batch {
  std::size_t size = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  std::vector<std::int32_t> src_ids;       // size x src_len
  std::vector<std::int32_t> tgt_ids;       // size x tgt_len
  std::vector<std::uint8_t> src_pad_mask;  // 1 where src is PAD
  std::vector<std::uint8_t> tgt_pad_mask;  // 1 where tgt is PAD
  std::size_t token_count = 0;             // predicted (non-pad, non-BOS) target tokens
};

inline constexpr std::size_t kDefaultTokenBudget = 6144;

// Pads the pairs into one batch; source rows are PAD-extended to a multiple of
// stride.
Batch make_batch(std::span<const EncodedPair> pairs, std::size_t stride = 1);

// Sorts pairs into length-similar order (seeded shuffle, then stable sort by
// target and source length), packs them greedily so each batch predicts at
// most token_budget target tokens, and shuffles the batch order. Throws
// DataError if a single pair exceeds the budget.
std::vector<Batch> make_batches(std::span<const EncodedPair> pairs, std::size_t token_budget,
                                std::size_t stride, std::uint64_t seed);

}  // namespace chartrans
