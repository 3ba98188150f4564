#include "chartrans/corpus.hpp"

#include <algorithm>
#include <numeric>

#include "chartrans/errors.hpp"
#include "chartrans/random.hpp"
#include "chartrans/text.hpp"

namespace chartrans {

std::string_view segmentation_name(Segmentation s) {
  return s == Segmentation::kChar ? "char" : "bpe";
}

Segmentation parse_segmentation(std::string_view name) {
  if (name == "char") return Segmentation::kChar;
  if (name == "bpe") return Segmentation::kBpe;
  throw UsageError("unknown segmentation '" + std::string(name) + "' (expected char or bpe)");
}

Segmenter Segmenter::chars() { return Segmenter(); }

Segmenter Segmenter::bpe(BpeMerges merges) {
  Segmenter s;
  s.mode_ = Segmentation::kBpe;
  s.merges_ = std::make_shared<const BpeMerges>(std::move(merges));
  return s;
}

std::vector<std::string> Segmenter::tokens(std::string_view sentence) const {
  if (mode_ == Segmentation::kChar) return utf8_chars(sentence);
  return apply_bpe(pretokenize(sentence), *merges_);
}

std::vector<std::int32_t> encode(std::string_view sentence, const Vocab& vocab,
                                 const Segmenter& segmenter) {
  std::vector<std::int32_t> ids;
  for (const auto& tok : segmenter.tokens(sentence)) ids.push_back(vocab.id(tok));
  ids.push_back(kEos);
  return ids;
}

std::vector<std::int32_t> encode(std::string_view sentence, Segmentation mode, const Vocab& vocab,
                                 const BpeMerges* merges) {
  if (mode == Segmentation::kChar) return encode(sentence, vocab, Segmenter::chars());
  if (merges == nullptr) throw UsageError("BPE encoding requires merge rules");
  return encode(sentence, vocab, Segmenter::bpe(*merges));
}

namespace {

std::size_t segment_length(std::string_view s, const Segmenter& seg) {
  if (seg.mode() == Segmentation::kChar) return utf8_length(s);
  return seg.tokens(s).size();
}

std::size_t limit_for(const Segmenter& seg, const LengthLimits& limits) {
  return seg.mode() == Segmentation::kChar ? limits.max_chars : limits.max_tokens;
}

}  // namespace

std::vector<SentencePair> filter_corpus(std::span<const SentencePair> pairs,
                                        const Segmenter& src, const Segmenter& tgt,
                                        const LengthLimits& limits) {
  std::vector<SentencePair> kept;
  kept.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (segment_length(p.src, src) > limit_for(src, limits)) continue;
    if (segment_length(p.tgt, tgt) > limit_for(tgt, limits)) continue;
    kept.push_back(p);
  }
  return kept;
}

Batch make_batch(std::span<const EncodedPair> pairs, std::size_t stride) {
  if (pairs.empty()) throw DataError("cannot build an empty batch");
  if (stride == 0) throw DataError("batch stride must be positive");
  Batch b;
  b.size = pairs.size();
  for (const auto& p : pairs) {
    if (p.src.empty() || p.src.back() != kEos || p.tgt.empty() || p.tgt.back() != kEos) {
      throw DataError("encoded sentences must end with EOS");
    }
    b.src_len = std::max(b.src_len, p.src.size());
    b.tgt_len = std::max(b.tgt_len, p.tgt.size() + 1);
    b.token_count += p.tgt.size();
  }
  b.src_len = (b.src_len + stride - 1) / stride * stride;
  b.src_ids.assign(b.size * b.src_len, kPad);
  b.tgt_ids.assign(b.size * b.tgt_len, kPad);
  b.src_pad_mask.assign(b.size * b.src_len, 1);
  b.tgt_pad_mask.assign(b.size * b.tgt_len, 1);
  for (std::size_t r = 0; r < b.size; ++r) {
    const auto& p = pairs[r];
    std::copy(p.src.begin(), p.src.end(), b.src_ids.begin() + r * b.src_len);
    std::fill_n(b.src_pad_mask.begin() + r * b.src_len, p.src.size(), 0);
    b.tgt_ids[r * b.tgt_len] = kBos;
    std::copy(p.tgt.begin(), p.tgt.end(), b.tgt_ids.begin() + r * b.tgt_len + 1);
    std::fill_n(b.tgt_pad_mask.begin() + r * b.tgt_len, p.tgt.size() + 1, 0);
  }
  return b;
}

std::vector<Batch> make_batches(std::span<const EncodedPair> pairs, std::size_t token_budget,
                                std::size_t stride, std::uint64_t seed) {
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].tgt.size() > token_budget) {
      throw DataError("pair " + std::to_string(i) + " has " + std::to_string(pairs[i].tgt.size()) +
                      " target tokens, above the batch budget of " + std::to_string(token_budget));
    }
  }
  Rng rng(seed);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(std::span<std::size_t>(order));
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (pairs[a].tgt.size() != pairs[b].tgt.size()) return pairs[a].tgt.size() < pairs[b].tgt.size();
    return pairs[a].src.size() < pairs[b].src.size();
  });

  std::vector<Batch> batches;
  std::vector<EncodedPair> current;
  std::size_t tokens = 0;
  for (std::size_t idx : order) {
    const std::size_t n = pairs[idx].tgt.size();
    if (!current.empty() && tokens + n > token_budget) {
      batches.push_back(make_batch(current, stride));
      current.clear();
      tokens = 0;
    }
    current.push_back(pairs[idx]);
    tokens += n;
  }
  if (!current.empty()) batches.push_back(make_batch(current, stride));
  rng.shuffle(std::span<Batch>(batches));
  return batches;
}

}  // namespace chartrans
