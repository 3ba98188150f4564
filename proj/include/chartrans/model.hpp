#pragma once

// The three translation architectures:
//   bpe-transformer             subword tokens -> Transformer
//   char-transformer            characters -> Transformer
//   char-reduction-transformer  characters -> conv bank, max-pool, highway,
//                               projection -> Transformer (CharTransformer)
// All share the post-norm Transformer encoder/decoder below.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "chartrans/corpus.hpp"
#include "chartrans/ops.hpp"
#include "chartrans/tensor.hpp"

namespace chartrans {

enum class ModelMode { kBpeTransformer, kCharTransformer, kCharReduction };

std::string mode_name(ModelMode mode);
ModelMode parse_mode(const std::string& name);  // UsageError on unknown names
Segmentation mode_segmentation(ModelMode mode);

struct ModelConfig {
  ModelMode mode = ModelMode::kCharReduction;
  std::size_t src_vocab = 0;
  std::size_t tgt_vocab = 0;
  std::size_t enc_emb = 128;
  std::size_t dec_emb = 512;
  std::size_t d_model = 512;
  std::size_t heads = 8;
  std::size_t d_ff = 2048;
  std::size_t enc_layers = 6;
  std::size_t dec_layers = 6;
  std::map<std::size_t, std::size_t> conv_filters;  // width -> count
  std::size_t pool_stride = 5;
  std::size_t highway_layers = 2;
  double dropout = 0.0;
  std::size_t max_positions = 512;

  static ModelConfig paper(ModelMode mode, std::size_t src_vocab, std::size_t tgt_vocab);
  static ModelConfig desk(ModelMode mode, std::size_t src_vocab, std::size_t tgt_vocab);

  bool reduces() const { return mode == ModelMode::kCharReduction; }
  // 1 when the source is not reduced.
  std::size_t source_stride() const { return reduces() ? pool_stride : 1; }
  std::size_t conv_channels() const;

  // Throws DataError describing the first violated constraint.
  void validate() const;

  // key=value lines; parse accepts exactly the keys that to_text writes.
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

extern const std::map<std::size_t, std::size_t> kPaperConvFilters;

// Named parameters in creation order.
template <typename T>
class ParamSet {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> tensor);
  const Tensor<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return items_.size(); }
  std::vector<std::pair<std::string, Tensor<T>>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& items() const { return items_; }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
std::size_t count_params(const ParamSet<T>& params);

// Uniform in [-a, a], a = sqrt(6 / (fan_in + fan_out)). Rank-3 shapes are
// conv filters [width x in x out]: fan_in = width*in, fan_out = width*out.
template <typename T>
Tensor<T> glorot_init(const Shape& shape, std::mt19937_64& rng);

double glorot_bound(const Shape& shape);

// Sinusoidal table [length x d_model].
template <typename T>
Tensor<T> positional_encoding(std::size_t length, std::size_t d_model);

// y = g*relu(x Wh + bh) + (1-g)*x, g = sigmoid(x Wt + bt). Square weights.
template <typename T>
Tensor<T> highway_forward(const Tensor<T>& x, const Tensor<T>& wh, const Tensor<T>& bh,
                          const Tensor<T>& wt, const Tensor<T>& bt);

template <typename T>
struct AttentionWeights {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

// [B x L x d] <-> [B*heads x L x d/heads]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads);
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads, std::size_t batch,
                      std::size_t length);

// Scaled dot-product attention over per-head tensors [N x Lq x dk] and
// [N x Lk x dk].
template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                 const AttentionMask& mask);

// q_in [B x Lq x d], kv_in [B x Lk x d]; key_pad is B*Lk flags or empty.
template <typename T>
Tensor<T> multihead_attention(const Tensor<T>& q_in, const Tensor<T>& kv_in,
                              const AttentionWeights<T>& w, std::size_t heads,
                              std::span<const std::uint8_t> key_pad, bool causal);

template <typename T>
struct EncoderStates {
  Tensor<T> states;                   // [B x L' x d_model]
  std::vector<std::uint8_t> pad_mask;  // B*L', 1 = PAD
  std::size_t batch = 0;
  std::size_t length = 0;
};

// Reduced mask: a window of `stride` positions is PAD iff all of it is PAD.
std::vector<std::uint8_t> reduce_pad_mask(std::span<const std::uint8_t> mask, std::size_t batch,
                                          std::size_t length, std::size_t stride);

template <typename T>
class Seq2Seq {
 public:
  // Fresh model with Glorot-initialized parameters.
  Seq2Seq(ModelConfig cfg, std::uint64_t seed);
  // Model around existing parameters; names and shapes must match cfg.
  Seq2Seq(ModelConfig cfg, ParamSet<T> params);

  const ModelConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  // Dropout is active only while training is on and the rate is positive.
  void set_training(bool on, std::uint64_t dropout_seed = 0);

  // src_ids/src_pad: B*L row-major. In reduction mode L must be divisible by
  // the pooling stride.
  EncoderStates<T> encode(std::span<const std::int32_t> src_ids,
                          std::span<const std::uint8_t> src_pad, std::size_t batch,
                          std::size_t length);

  // Conv bank, pooling, highway and projection only: [B x L/stride x d_model].
  Tensor<T> reduce_source(std::span<const std::int32_t> src_ids,
                          std::span<const std::uint8_t> src_pad, std::size_t batch,
                          std::size_t length);

  // Logits [B x Lt x tgt_vocab] for decoder inputs tgt_ids (B*Lt, BOS first).
  Tensor<T> decode(std::span<const std::int32_t> tgt_ids, std::size_t batch, std::size_t length,
                   const EncoderStates<T>& enc);

  Tensor<T> forward(const Batch& batch);

  // Encoder stack on already embedded input; exposed for tests.
  Tensor<T> encoder_stack(Tensor<T> x, std::span<const std::uint8_t> pad_mask);

  // Incremental decoding for search: one step for a set of hypotheses that
  // share a single encoded source.
  class Stepper {
   public:
    // Log-probabilities [n x tgt_vocab] after feeding `tokens` to the
    // hypotheses formed by extending rows `parents` of the previous step.
    // The first call must have every parent 0 (a single root) and BOS tokens.
    std::vector<std::vector<double>> step(std::span<const std::size_t> parents,
                                          std::span<const std::int32_t> tokens);
    std::size_t vocab_size() const { return model_->cfg_.tgt_vocab; }

   private:
    friend class Seq2Seq;
    Stepper(Seq2Seq* model, EncoderStates<T> enc);
    Seq2Seq* model_;
    EncoderStates<T> enc_;
    std::vector<Tensor<T>> cross_k_, cross_v_;  // per layer [heads x Ls x dk]
    std::vector<std::vector<T>> self_k_, self_v_;  // per layer rows [n x t x d]
    std::size_t rows_ = 0;
    std::size_t position_ = 0;
  };

  Stepper start(std::span<const std::int32_t> src_ids);

 private:
  Tensor<T> attention(const std::string& prefix, const Tensor<T>& q_in, const Tensor<T>& kv_in,
                      std::span<const std::uint8_t> key_pad, bool causal);
  Tensor<T> feed_forward(const std::string& prefix, const Tensor<T>& x);
  Tensor<T> sublayer(const std::string& norm, const Tensor<T>& x, const Tensor<T>& y);
  Tensor<T> embed(const std::string& table, std::span<const std::int32_t> ids, std::size_t batch,
                  std::size_t length, bool scale);
  Tensor<T> add_positions(const Tensor<T>& x, std::size_t offset = 0);
  AttentionWeights<T> attention_weights(const std::string& prefix) const;
  Tensor<T> maybe_dropout(const Tensor<T>& x);
  const Tensor<T>& p(const std::string& name) const { return params_.get(name); }

  ModelConfig cfg_;
  ParamSet<T> params_;
  Tensor<T> pe_;
  bool training_ = false;
  std::uint64_t dropout_seed_ = 0;
  std::uint64_t dropout_calls_ = 0;
};

// Teacher forcing views of a batch, B*(tgt_len-1) each: decoder inputs drop
// the last column, targets drop BOS.
std::vector<std::int32_t> decoder_inputs(const Batch& batch);
std::vector<std::int32_t> decoder_targets(const Batch& batch);

// Expected parameter names and shapes for a configuration, in creation order.
std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& cfg);

// Binary checkpoint: magic, precision, config record, parameters, then
// optional named metadata strings and extra tensors (optimizer state).
template <typename T>
struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor<T>>> params;
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor<T>>> extra;
};

template <typename T>
void write_checkpoint(std::ostream& out, const Checkpoint<T>& ckpt);
// Values stored in the other precision are converted.
template <typename T>
Checkpoint<T> read_checkpoint(std::istream& in);

// Writes to path via a temporary file and rename.
template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ckpt);
template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path);

}  // namespace chartrans
