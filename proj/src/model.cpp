#include "chartrans/model.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "chartrans/errors.hpp"
#include "chartrans/random.hpp"
#include "chartrans/text.hpp"
#include "chartrans/vocab.hpp"

namespace chartrans {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

const std::map<std::size_t, std::size_t> kPaperConvFilters = {
    {1, 200}, {2, 200}, {3, 250}, {4, 250}, {5, 300}, {6, 300}, {7, 300}, {8, 300}};

std::string mode_name(ModelMode mode) {
  switch (mode) {
    case ModelMode::kBpeTransformer:
      return "bpe-transformer";
    case ModelMode::kCharTransformer:
      return "char-transformer";
    case ModelMode::kCharReduction:
      return "char-reduction-transformer";
  }
  return "?";
}

ModelMode parse_mode(const std::string& name) {
  for (auto m : {ModelMode::kBpeTransformer, ModelMode::kCharTransformer,
                 ModelMode::kCharReduction}) {
    if (mode_name(m) == name) return m;
  }
  throw UsageError("unknown model mode '" + name +
                   "' (expected bpe-transformer, char-transformer or char-reduction-transformer)");
}

Segmentation mode_segmentation(ModelMode mode) {
  return mode == ModelMode::kBpeTransformer ? Segmentation::kBpe : Segmentation::kChar;
}

ModelConfig ModelConfig::paper(ModelMode mode, std::size_t src_vocab, std::size_t tgt_vocab) {
  ModelConfig c;
  c.mode = mode;
  c.src_vocab = src_vocab;
  c.tgt_vocab = tgt_vocab;
  c.d_model = 512;
  c.dec_emb = 512;
  c.heads = 8;
  c.d_ff = 2048;
  c.enc_layers = c.dec_layers = 6;
  c.pool_stride = 5;
  c.highway_layers = 2;
  c.max_positions = 512;
  if (mode == ModelMode::kCharReduction) {
    c.enc_emb = 128;
    c.conv_filters = kPaperConvFilters;
  } else {
    c.enc_emb = 512;
  }
  c.dropout = mode == ModelMode::kBpeTransformer ? 0.1 : 0.0;
  return c;
}

ModelConfig ModelConfig::desk(ModelMode mode, std::size_t src_vocab, std::size_t tgt_vocab) {
  ModelConfig c = paper(mode, src_vocab, tgt_vocab);
  c.d_model = c.dec_emb = 64;
  c.heads = 2;
  c.d_ff = 128;
  c.enc_layers = c.dec_layers = 2;
  c.dropout = 0.0;
  if (mode == ModelMode::kCharReduction) {
    c.enc_emb = 32;
    c.conv_filters.clear();
    for (std::size_t w = 1; w <= 8; ++w) c.conv_filters[w] = 16;
  } else {
    c.enc_emb = 64;
  }
  return c;
}

std::size_t ModelConfig::conv_channels() const {
  std::size_t total = 0;
  for (const auto& [w, n] : conv_filters) total += n;
  return total;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw DataError("model config: " + msg); };
  if (src_vocab < kNumSpecials || tgt_vocab < kNumSpecials) {
    fail("vocabulary sizes must be at least " + std::to_string(kNumSpecials));
  }
  if (d_model == 0 || heads == 0 || d_ff == 0 || enc_layers == 0 || dec_layers == 0) {
    fail("dimensions and layer counts must be positive");
  }
  if (d_model % heads != 0) {
    fail("d_model " + std::to_string(d_model) + " not divisible by heads " +
         std::to_string(heads));
  }
  if (d_model % 2 != 0) fail("d_model must be even for positional encoding");
  if (dec_emb != d_model) fail("dec_emb must equal d_model");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  if (max_positions == 0) fail("max_positions must be positive");
  if (reduces()) {
    if (enc_emb == 0) fail("enc_emb must be positive");
    if (conv_filters.empty()) fail("reduction mode needs conv_filters");
    for (const auto& [w, n] : conv_filters) {
      if (w < 1 || w > 8) fail("conv filter width " + std::to_string(w) + " outside 1..8");
      if (n == 0) fail("conv filter count for width " + std::to_string(w) + " is zero");
    }
    if (pool_stride == 0) fail("pool_stride must be positive");
    if (highway_layers != 2) fail("reduction mode uses exactly 2 highway layers");
  } else {
    if (!conv_filters.empty()) fail("conv_filters only apply to char-reduction-transformer");
    if (enc_emb != d_model) fail("enc_emb must equal d_model without source reduction");
  }
}

namespace {

std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  std::size_t out = 0;
  auto r = std::from_chars(value.data(), value.data() + value.size(), out);
  if (r.ec != std::errc() || r.ptr != value.data() + value.size()) {
    throw DataError("model config: " + key + " expects a non-negative integer, got '" + value +
                    "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  double out = 0;
  auto r = std::from_chars(value.data(), value.data() + value.size(), out);
  if (r.ec != std::errc() || r.ptr != value.data() + value.size()) {
    throw DataError("model config: " + key + " expects a number, got '" + value + "'");
  }
  return out;
}

}  // namespace

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "mode=" << mode_name(mode) << '\n'
     << "src_vocab=" << src_vocab << '\n'
     << "tgt_vocab=" << tgt_vocab << '\n'
     << "enc_emb=" << enc_emb << '\n'
     << "dec_emb=" << dec_emb << '\n'
     << "d_model=" << d_model << '\n'
     << "heads=" << heads << '\n'
     << "d_ff=" << d_ff << '\n'
     << "enc_layers=" << enc_layers << '\n'
     << "dec_layers=" << dec_layers << '\n'
     << "conv_filters=";
  bool first = true;
  for (const auto& [w, n] : conv_filters) {
    os << (first ? "" : ",") << w << ':' << n;
    first = false;
  }
  os << '\n'
     << "pool_stride=" << pool_stride << '\n'
     << "highway_layers=" << highway_layers << '\n'
     << "dropout=" << format_double(dropout) << '\n'
     << "max_positions=" << max_positions << '\n';
  return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig c;
  bool have_mode = false;
  for (const auto& [key, value] : parse_key_values(text, "model config")) {
    if (key == "mode") {
      c.mode = parse_mode(value);
      have_mode = true;
    } else if (key == "src_vocab") {
      c.src_vocab = parse_size(key, value);
    } else if (key == "tgt_vocab") {
      c.tgt_vocab = parse_size(key, value);
    } else if (key == "enc_emb") {
      c.enc_emb = parse_size(key, value);
    } else if (key == "dec_emb") {
      c.dec_emb = parse_size(key, value);
    } else if (key == "d_model") {
      c.d_model = parse_size(key, value);
    } else if (key == "heads") {
      c.heads = parse_size(key, value);
    } else if (key == "d_ff") {
      c.d_ff = parse_size(key, value);
    } else if (key == "enc_layers") {
      c.enc_layers = parse_size(key, value);
    } else if (key == "dec_layers") {
      c.dec_layers = parse_size(key, value);
    } else if (key == "conv_filters") {
      c.conv_filters.clear();
      std::istringstream is(value);
      std::string item;
      while (std::getline(is, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) {
          throw DataError("model config: conv_filters entries look like width:count");
        }
        const auto w = parse_size(key, item.substr(0, colon));
        if (!c.conv_filters.emplace(w, parse_size(key, item.substr(colon + 1))).second) {
          throw DataError("model config: conv filter width " + std::to_string(w) + " repeated");
        }
      }
    } else if (key == "pool_stride") {
      c.pool_stride = parse_size(key, value);
    } else if (key == "highway_layers") {
      c.highway_layers = parse_size(key, value);
    } else if (key == "dropout") {
      c.dropout = parse_real(key, value);
    } else if (key == "max_positions") {
      c.max_positions = parse_size(key, value);
    } else {
      throw DataError("model config: unknown key '" + key + "'");
    }
  }
  if (!have_mode) throw DataError("model config: missing mode");
  c.validate();
  return c;
}

template <typename T>
Tensor<T>& ParamSet<T>::add(const std::string& name, Tensor<T> tensor) {
  if (!index_.emplace(name, items_.size()).second) {
    throw DataError("duplicate parameter name '" + name + "'");
  }
  items_.emplace_back(name, std::move(tensor));
  return items_.back().second;
}

template <typename T>
const Tensor<T>& ParamSet<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw DataError("no parameter named '" + name + "'");
  return items_[it->second].second;
}

template <typename T>
std::size_t count_params(const ParamSet<T>& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params.items()) n += t.numel();
  return n;
}

double glorot_bound(const Shape& shape) {
  if (shape.size() < 2) throw ShapeError("glorot_init needs rank >= 2, got " + shape_str(shape));
  for (auto d : shape) {
    if (d == 0) throw ShapeError("glorot_init: zero dimension in " + shape_str(shape));
  }
  double fan_in = 0, fan_out = 0;
  if (shape.size() == 2) {
    fan_in = double(shape[0]);
    fan_out = double(shape[1]);
  } else {
    double field = 1;
    for (std::size_t i = 0; i + 2 < shape.size(); ++i) field *= double(shape[i]);
    fan_in = field * double(shape[shape.size() - 2]);
    fan_out = field * double(shape.back());
  }
  return std::sqrt(6.0 / (fan_in + fan_out));
}

template <typename T>
Tensor<T> glorot_init(const Shape& shape, std::mt19937_64& rng) {
  const double a = glorot_bound(shape);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = T((double(rng() >> 11) * 0x1.0p-53 * 2.0 - 1.0) * a);
  return Tensor<T>::from(shape, std::move(values));
}

template <typename T>
Tensor<T> positional_encoding(std::size_t length, std::size_t d_model) {
  if (d_model % 2 != 0) {
    throw ShapeError("positional_encoding: d_model must be even, got " + std::to_string(d_model));
  }
  std::vector<T> values(length * d_model);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double angle = double(pos) / std::pow(10000.0, double(2 * i) / double(d_model));
      values[pos * d_model + 2 * i] = T(std::sin(angle));
      values[pos * d_model + 2 * i + 1] = T(std::cos(angle));
    }
  }
  return Tensor<T>::from({length, d_model}, std::move(values));
}

std::vector<std::uint8_t> reduce_pad_mask(std::span<const std::uint8_t> mask, std::size_t batch,
                                          std::size_t length, std::size_t stride) {
  if (stride == 0 || length % stride != 0) {
    throw ShapeError("source length " + std::to_string(length) +
                     " is not a multiple of the pooling stride " + std::to_string(stride));
  }
  if (mask.size() != batch * length) throw ShapeError("pad mask size does not match batch");
  const std::size_t reduced = length / stride;
  std::vector<std::uint8_t> out(batch * reduced);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j < reduced; ++j) {
      bool all_pad = true;
      for (std::size_t k = 0; k < stride; ++k) {
        all_pad = all_pad && mask[b * length + j * stride + k] != 0;
      }
      out[b * reduced + j] = all_pad ? 1 : 0;
    }
  }
  return out;
}

std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<std::pair<std::string, Shape>> out;
  const std::size_t d = cfg.d_model;
  auto attention = [&](const std::string& prefix) {
    for (const char* m : {"q", "k", "v", "o"}) {
      out.push_back({prefix + ".w" + m, {d, d}});
      out.push_back({prefix + ".b" + m, {d}});
    }
  };
  auto norm = [&](const std::string& prefix) {
    out.push_back({prefix + ".g", {d}});
    out.push_back({prefix + ".b", {d}});
  };
  auto ffn = [&](const std::string& prefix) {
    out.push_back({prefix + ".w1", {d, cfg.d_ff}});
    out.push_back({prefix + ".b1", {cfg.d_ff}});
    out.push_back({prefix + ".w2", {cfg.d_ff, d}});
    out.push_back({prefix + ".b2", {d}});
  };

  if (cfg.reduces()) {
    const std::size_t c = cfg.conv_channels();
    out.push_back({"enc.emb", {cfg.src_vocab, cfg.enc_emb}});
    for (const auto& [w, n] : cfg.conv_filters) {
      out.push_back({"enc.conv.w" + std::to_string(w), {w, cfg.enc_emb, n}});
      out.push_back({"enc.conv.b" + std::to_string(w), {n}});
    }
    for (std::size_t i = 0; i < cfg.highway_layers; ++i) {
      const auto h = "enc.highway" + std::to_string(i);
      out.push_back({h + ".wh", {c, c}});
      out.push_back({h + ".bh", {c}});
      out.push_back({h + ".wt", {c, c}});
      out.push_back({h + ".bt", {c}});
    }
    out.push_back({"enc.proj.w", {c, d}});
    out.push_back({"enc.proj.b", {d}});
  } else {
    out.push_back({"enc.emb", {cfg.src_vocab, d}});
  }
  for (std::size_t i = 0; i < cfg.enc_layers; ++i) {
    const auto l = "enc.layer" + std::to_string(i);
    attention(l + ".attn");
    norm(l + ".ln1");
    ffn(l + ".ffn");
    norm(l + ".ln2");
  }
  out.push_back({"dec.emb", {cfg.tgt_vocab, d}});
  for (std::size_t i = 0; i < cfg.dec_layers; ++i) {
    const auto l = "dec.layer" + std::to_string(i);
    attention(l + ".self");
    norm(l + ".ln1");
    attention(l + ".cross");
    norm(l + ".ln2");
    ffn(l + ".ffn");
    norm(l + ".ln3");
  }
  out.push_back({"dec.out.w", {d, cfg.tgt_vocab}});
  out.push_back({"dec.out.b", {cfg.tgt_vocab}});
  return out;
}

namespace {
bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}
}  // namespace

std::vector<std::int32_t> decoder_inputs(const Batch& batch) {
  std::vector<std::int32_t> out;
  out.reserve(batch.size * (batch.tgt_len - 1));
  for (std::size_t r = 0; r < batch.size; ++r) {
    for (std::size_t c = 0; c + 1 < batch.tgt_len; ++c) out.push_back(batch.tgt_ids[r * batch.tgt_len + c]);
  }
  return out;
}

std::vector<std::int32_t> decoder_targets(const Batch& batch) {
  std::vector<std::int32_t> out;
  out.reserve(batch.size * (batch.tgt_len - 1));
  for (std::size_t r = 0; r < batch.size; ++r) {
    for (std::size_t c = 1; c < batch.tgt_len; ++c) out.push_back(batch.tgt_ids[r * batch.tgt_len + c]);
  }
  return out;
}

template <typename T>
Tensor<T> highway_forward(const Tensor<T>& x, const Tensor<T>& wh, const Tensor<T>& bh,
                          const Tensor<T>& wt, const Tensor<T>& bt) {
  const std::size_t d = x.dim(x.rank() - 1);
  if (wh.shape() != Shape{d, d} || wt.shape() != Shape{d, d}) {
    throw ShapeError("highway: weights must be " + shape_str({d, d}) + ", got " +
                     shape_str(wh.shape()) + " and " + shape_str(wt.shape()));
  }
  auto gate = activation(linear(x, wt, bt), Activation::kSigmoid);
  auto transform = activation(linear(x, wh, bh), Activation::kRelu);
  // g*H(x) + (1-g)*x
  return add(x, mul(gate, sub(transform, x)));
}

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("split_heads: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  return reshape(swap_middle_axes(reshape(x, {b, l, heads, d / heads})), {b * heads, l, d / heads});
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads, std::size_t batch,
                      std::size_t length) {
  const std::size_t dk = x.dim(2);
  return reshape(swap_middle_axes(reshape(x, {batch, heads, length, dk})),
                 {batch, length, heads * dk});
}

template <typename T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                 const AttentionMask& mask) {
  const double dk = double(q.dim(2));
  auto scores = bmm(affine(q, T(1.0 / std::sqrt(dk)), T(0)), k, true);
  return bmm(masked_softmax(scores, mask), v);
}

template <typename T>
Tensor<T> multihead_attention(const Tensor<T>& q_in, const Tensor<T>& kv_in,
                              const AttentionWeights<T>& w, std::size_t heads,
                              std::span<const std::uint8_t> key_pad, bool causal) {
  if (q_in.rank() != 3 || kv_in.rank() != 3 || q_in.dim(0) != kv_in.dim(0)) {
    throw ShapeError("attention: inputs " + shape_str(q_in.shape()) + " and " +
                     shape_str(kv_in.shape()) + " are not [B x L x d] with equal B");
  }
  const std::size_t b = q_in.dim(0), lq = q_in.dim(1), lk = kv_in.dim(1);
  if (!key_pad.empty() && key_pad.size() != b * lk) {
    throw ShapeError("attention: key mask has " + std::to_string(key_pad.size()) +
                     " entries, expected " + std::to_string(b * lk));
  }
  auto q = split_heads(linear(q_in, w.wq, w.bq), heads);
  auto k = split_heads(linear(kv_in, w.wk, w.bk), heads);
  auto v = split_heads(linear(kv_in, w.wv, w.bv), heads);
  auto o = attend(q, k, v, AttentionMask{key_pad, heads, causal});
  return linear(merge_heads(o, heads, b, lq), w.wo, w.bo);
}

template <typename T>
Seq2Seq<T>::Seq2Seq(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  std::mt19937_64 rng(seed);
  for (const auto& [name, shape] : parameter_shapes(cfg_)) {
    Tensor<T> t;
    if (shape.size() >= 2) {
      t = glorot_init<T>(shape, rng);
    } else if (ends_with(name, ".g")) {
      t = Tensor<T>::full(shape, T(1));
    } else if (ends_with(name, ".bt")) {
      // transform gate starts mostly closed, so highway layers begin near carry
      t = Tensor<T>::full(shape, T(-2));
    } else {
      t = Tensor<T>::zeros(shape);
    }
    t.set_requires_grad(true);
    params_.add(name, std::move(t));
  }
  pe_ = positional_encoding<T>(cfg_.max_positions, cfg_.d_model);
}

template <typename T>
Seq2Seq<T>::Seq2Seq(ModelConfig cfg, ParamSet<T> params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  const auto expected = parameter_shapes(cfg_);
  if (expected.size() != params_.size()) {
    throw DataError("parameter set has " + std::to_string(params_.size()) + " tensors, config needs " +
                    std::to_string(expected.size()));
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& [name, shape] = expected[i];
    const auto& [have_name, tensor] = params_.items()[i];
    if (have_name != name || tensor.shape() != shape) {
      throw DataError("parameter " + std::to_string(i) + " is '" + have_name + "' " +
                      shape_str(tensor.shape()) + ", expected '" + name + "' " + shape_str(shape));
    }
  }
  for (auto& [name, t] : params_.items()) t.set_requires_grad(true);
  pe_ = positional_encoding<T>(cfg_.max_positions, cfg_.d_model);
}

template <typename T>
void Seq2Seq<T>::set_training(bool on, std::uint64_t dropout_seed) {
  training_ = on;
  dropout_seed_ = dropout_seed;
  dropout_calls_ = 0;
}

template <typename T>
Tensor<T> Seq2Seq<T>::maybe_dropout(const Tensor<T>& x) {
  if (!training_ || cfg_.dropout == 0.0) return x;
  return dropout(x, cfg_.dropout, derive_seed(dropout_seed_, dropout_calls_++));
}

template <typename T>
Tensor<T> Seq2Seq<T>::embed(const std::string& table, std::span<const std::int32_t> ids,
                            std::size_t batch, std::size_t length, bool scale) {
  auto x = embedding_lookup(p(table), ids, {batch, length});
  if (scale) x = affine(x, T(std::sqrt(double(cfg_.d_model))), T(0));
  return x;
}

template <typename T>
Tensor<T> Seq2Seq<T>::add_positions(const Tensor<T>& x, std::size_t offset) {
  const std::size_t length = x.dim(x.rank() - 2);
  if (offset + length > cfg_.max_positions) {
    throw DataError("sequence of " + std::to_string(offset + length) +
                    " positions exceeds max_positions " + std::to_string(cfg_.max_positions));
  }
  const std::size_t d = cfg_.d_model;
  const auto table = pe_.data().subspan(offset * d, length * d);
  return add(x, Tensor<T>::from({length, d}, std::vector<T>(table.begin(), table.end())));
}

template <typename T>
AttentionWeights<T> Seq2Seq<T>::attention_weights(const std::string& prefix) const {
  return {p(prefix + ".wq"), p(prefix + ".bq"), p(prefix + ".wk"), p(prefix + ".bk"),
          p(prefix + ".wv"), p(prefix + ".bv"), p(prefix + ".wo"), p(prefix + ".bo")};
}

template <typename T>
Tensor<T> Seq2Seq<T>::attention(const std::string& prefix, const Tensor<T>& q_in,
                                const Tensor<T>& kv_in, std::span<const std::uint8_t> key_pad,
                                bool causal) {
  return multihead_attention(q_in, kv_in, attention_weights(prefix), cfg_.heads, key_pad, causal);
}

template <typename T>
Tensor<T> Seq2Seq<T>::feed_forward(const std::string& prefix, const Tensor<T>& x) {
  auto h = activation(linear(x, p(prefix + ".w1"), p(prefix + ".b1")), Activation::kRelu);
  return linear(h, p(prefix + ".w2"), p(prefix + ".b2"));
}

template <typename T>
Tensor<T> Seq2Seq<T>::sublayer(const std::string& norm, const Tensor<T>& x, const Tensor<T>& y) {
  return layer_norm(add(x, maybe_dropout(y)), p(norm + ".g"), p(norm + ".b"));
}

template <typename T>
Tensor<T> Seq2Seq<T>::encoder_stack(Tensor<T> x, std::span<const std::uint8_t> pad_mask) {
  for (std::size_t i = 0; i < cfg_.enc_layers; ++i) {
    const auto l = "enc.layer" + std::to_string(i);
    x = sublayer(l + ".ln1", x, attention(l + ".attn", x, x, pad_mask, false));
    x = sublayer(l + ".ln2", x, feed_forward(l + ".ffn", x));
  }
  return x;
}

template <typename T>
Tensor<T> Seq2Seq<T>::reduce_source(std::span<const std::int32_t> src_ids,
                                    std::span<const std::uint8_t> src_pad, std::size_t batch,
                                    std::size_t length) {
  if (!cfg_.reduces()) throw UsageError(mode_name(cfg_.mode) + " does not reduce its source");
  if (length % cfg_.pool_stride != 0) {
    throw ShapeError("source length " + std::to_string(length) +
                     " is not a multiple of the pooling stride " +
                     std::to_string(cfg_.pool_stride));
  }
  // PAD positions are zeroed so they look exactly like the convolution's own
  // boundary padding and cannot leak into real windows.
  std::vector<T> keep(batch * length);
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = src_pad[i] ? T(0) : T(1);
  auto x = scale_rows(embed("enc.emb", src_ids, batch, length, false), std::span<const T>(keep));

  std::vector<Tensor<T>> banks;
  for (const auto& [w, n] : cfg_.conv_filters) {
    const auto ws = std::to_string(w);
    banks.push_back(add(conv1d_same(x, p("enc.conv.w" + ws), w), p("enc.conv.b" + ws)));
  }
  auto h = activation(concat_lastdim(std::span<const Tensor<T>>(banks)), Activation::kRelu);
  h = maxpool1d(h, cfg_.pool_stride);
  for (std::size_t i = 0; i < cfg_.highway_layers; ++i) {
    const auto l = "enc.highway" + std::to_string(i);
    h = highway_forward(h, p(l + ".wh"), p(l + ".bh"), p(l + ".wt"), p(l + ".bt"));
  }
  return linear(h, p("enc.proj.w"), p("enc.proj.b"));
}

template <typename T>
EncoderStates<T> Seq2Seq<T>::encode(std::span<const std::int32_t> src_ids,
                                    std::span<const std::uint8_t> src_pad, std::size_t batch,
                                    std::size_t length) {
  if (src_ids.size() != batch * length || src_pad.size() != batch * length) {
    throw ShapeError("encode: ids/mask sizes do not match batch " + std::to_string(batch) + "x" +
                     std::to_string(length));
  }
  EncoderStates<T> out;
  out.batch = batch;
  Tensor<T> x;
  if (cfg_.reduces()) {
    x = add_positions(reduce_source(src_ids, src_pad, batch, length));
    out.pad_mask = reduce_pad_mask(src_pad, batch, length, cfg_.pool_stride);
    out.length = length / cfg_.pool_stride;
  } else {
    x = add_positions(embed("enc.emb", src_ids, batch, length, true));
    out.pad_mask.assign(src_pad.begin(), src_pad.end());
    out.length = length;
  }
  out.states = encoder_stack(maybe_dropout(x), out.pad_mask);
  return out;
}

template <typename T>
Tensor<T> Seq2Seq<T>::decode(std::span<const std::int32_t> tgt_ids, std::size_t batch,
                             std::size_t length, const EncoderStates<T>& enc) {
  if (tgt_ids.size() != batch * length || enc.batch != batch) {
    throw ShapeError("decode: target ids do not match batch " + std::to_string(batch) + "x" +
                     std::to_string(length));
  }
  auto x = maybe_dropout(add_positions(embed("dec.emb", tgt_ids, batch, length, true)));
  for (std::size_t i = 0; i < cfg_.dec_layers; ++i) {
    const auto l = "dec.layer" + std::to_string(i);
    x = sublayer(l + ".ln1", x, attention(l + ".self", x, x, {}, true));
    x = sublayer(l + ".ln2", x, attention(l + ".cross", x, enc.states, enc.pad_mask, false));
    x = sublayer(l + ".ln3", x, feed_forward(l + ".ffn", x));
  }
  return linear(x, p("dec.out.w"), p("dec.out.b"));
}

template <typename T>
Tensor<T> Seq2Seq<T>::forward(const Batch& batch) {
  if (batch.src_len % cfg_.source_stride() != 0) {
    throw DataError("batch source length " + std::to_string(batch.src_len) +
                    " was not padded for " + mode_name(cfg_.mode));
  }
  auto enc = encode(batch.src_ids, batch.src_pad_mask, batch.size, batch.src_len);
  const auto inputs = decoder_inputs(batch);
  return decode(inputs, batch.size, batch.tgt_len - 1, enc);
}

template <typename T>
typename Seq2Seq<T>::Stepper Seq2Seq<T>::start(std::span<const std::int32_t> src_ids) {
  NoGradGuard no_grad;
  const std::size_t stride = cfg_.source_stride();
  std::vector<std::int32_t> ids(src_ids.begin(), src_ids.end());
  if (ids.empty()) ids.push_back(kEos);
  std::vector<std::uint8_t> pad(ids.size(), 0);
  while (ids.size() % stride != 0) {
    ids.push_back(kPad);
    pad.push_back(1);
  }
  const bool was_training = training_;
  training_ = false;
  auto enc = encode(ids, pad, 1, ids.size());
  training_ = was_training;
  return Stepper(this, std::move(enc));
}

template <typename T>
Seq2Seq<T>::Stepper::Stepper(Seq2Seq* model, EncoderStates<T> enc)
    : model_(model), enc_(std::move(enc)) {
  NoGradGuard no_grad;
  const auto& cfg = model_->cfg_;
  const std::size_t h = cfg.heads, dk = cfg.d_model / h, ls = enc_.length;
  // Source keys/values laid out [heads x Ls x dk] once; every hypothesis
  // shares them.
  auto heads_first = [&](const Tensor<T>& x) {
    return reshape(swap_middle_axes(reshape(x, {1, ls, h, dk})), {h, ls, dk});
  };
  for (std::size_t i = 0; i < cfg.dec_layers; ++i) {
    const auto l = "dec.layer" + std::to_string(i) + ".cross";
    cross_k_.push_back(heads_first(linear(enc_.states, model_->p(l + ".wk"), model_->p(l + ".bk"))));
    cross_v_.push_back(heads_first(linear(enc_.states, model_->p(l + ".wv"), model_->p(l + ".bv"))));
  }
  self_k_.resize(cfg.dec_layers);
  self_v_.resize(cfg.dec_layers);
}

template <typename T>
std::vector<std::vector<double>> Seq2Seq<T>::Stepper::step(std::span<const std::size_t> parents,
                                                           std::span<const std::int32_t> tokens) {
  NoGradGuard no_grad;
  const auto& cfg = model_->cfg_;
  const std::size_t n = tokens.size(), d = cfg.d_model, t = position_;
  const std::size_t h = cfg.heads, dk = d / h;
  if (parents.size() != n || n == 0) throw ShapeError("step: parents and tokens differ in size");
  const std::size_t prev_rows = t == 0 ? 1 : rows_;
  for (auto parent : parents) {
    if (parent >= prev_rows) throw ShapeError("step: parent index out of range");
  }

  auto x = model_->add_positions(model_->embed("dec.emb", tokens, n, 1, true), t);
  for (std::size_t i = 0; i < cfg.dec_layers; ++i) {
    const auto l = "dec.layer" + std::to_string(i);
    const auto& P = [&](const std::string& s) -> const Tensor<T>& { return model_->p(l + s); };

    auto q = split_heads(linear(x, P(".self.wq"), P(".self.bq")), h);
    const auto k_step = linear(x, P(".self.wk"), P(".self.bk"));
    const auto v_step = linear(x, P(".self.wv"), P(".self.bv"));
    const auto k_new = k_step.data(), v_new = v_step.data();
    std::vector<T> k_all(n * (t + 1) * d), v_all(n * (t + 1) * d);
    for (std::size_t r = 0; r < n; ++r) {
      T* kd = k_all.data() + r * (t + 1) * d;
      T* vd = v_all.data() + r * (t + 1) * d;
      if (t > 0) {
        std::memcpy(kd, self_k_[i].data() + parents[r] * t * d, t * d * sizeof(T));
        std::memcpy(vd, self_v_[i].data() + parents[r] * t * d, t * d * sizeof(T));
      }
      std::memcpy(kd + t * d, k_new.data() + r * d, d * sizeof(T));
      std::memcpy(vd + t * d, v_new.data() + r * d, d * sizeof(T));
    }
    auto k = split_heads(Tensor<T>::from({n, t + 1, d}, k_all), h);
    auto v = split_heads(Tensor<T>::from({n, t + 1, d}, v_all), h);
    self_k_[i] = std::move(k_all);
    self_v_[i] = std::move(v_all);
    auto a = attend(q, k, v, AttentionMask{{}, h, false});
    x = model_->sublayer(l + ".ln1", x,
                         linear(merge_heads(a, h, n, 1), P(".self.wo"), P(".self.bo")));

    // Hypotheses become the query axis of a single batch: [heads x n x dk].
    auto cq = linear(x, P(".cross.wq"), P(".cross.bq"));
    cq = reshape(swap_middle_axes(reshape(cq, {1, n, h, dk})), {h, n, dk});
    auto co = attend(cq, cross_k_[i], cross_v_[i],
                             AttentionMask{enc_.pad_mask, h, false});
    co = reshape(swap_middle_axes(reshape(co, {1, h, n, dk})), {n, 1, d});
    x = model_->sublayer(l + ".ln2", x, linear(co, P(".cross.wo"), P(".cross.bo")));
    x = model_->sublayer(l + ".ln3", x, model_->feed_forward(l + ".ffn", x));
  }
  const auto out_layer = linear(x, model_->p("dec.out.w"), model_->p("dec.out.b"));
  const auto logits = out_layer.data();
  rows_ = n;
  ++position_;

  const std::size_t vocab = cfg.tgt_vocab;
  std::vector<std::vector<double>> out(n, std::vector<double>(vocab));
  for (std::size_t r = 0; r < n; ++r) {
    const T* z = logits.data() + r * vocab;
    double mx = -INFINITY;
    for (std::size_t c = 0; c < vocab; ++c) mx = std::max(mx, double(z[c]));
    double total = 0;
    for (std::size_t c = 0; c < vocab; ++c) total += std::exp(double(z[c]) - mx);
    const double log_z = mx + std::log(total);
    for (std::size_t c = 0; c < vocab; ++c) out[r][c] = double(z[c]) - log_z;
  }
  return out;
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[6] = {'C', 'T', 'N', 'M', 'T', '1'};

template <typename U>
void put(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), std::streamsize(s.size()));
}

template <typename U>
U get(std::istream& in) {
  U v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw DataError("checkpoint is truncated");
  return v;
}

std::string get_string(std::istream& in, std::size_t limit = std::size_t(1) << 32) {
  const auto n = get<std::uint64_t>(in);
  if (n > limit) throw DataError("checkpoint string length is implausible");
  std::string s(n, '\0');
  if (n && !in.read(s.data(), std::streamsize(n))) throw DataError("checkpoint is truncated");
  return s;
}

template <typename T>
void put_tensors(std::ostream& out, const std::vector<std::pair<std::string, Tensor<T>>>& items) {
  put<std::uint64_t>(out, items.size());
  for (const auto& [name, t] : items) {
    put_string(out, name);
    put<std::uint32_t>(out, std::uint32_t(t.rank()));
    for (auto dim : t.shape()) put<std::uint64_t>(out, dim);
    out.write(reinterpret_cast<const char*>(t.data().data()),
              std::streamsize(t.numel() * sizeof(T)));
  }
}

template <typename T, typename Stored>
std::vector<T> get_values(std::istream& in, std::size_t count) {
  std::vector<Stored> raw(count);
  if (count && !in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(count * sizeof(Stored)))) {
    throw DataError("checkpoint is truncated");
  }
  if constexpr (std::is_same_v<T, Stored>) {
    return raw;
  } else {
    return std::vector<T>(raw.begin(), raw.end());
  }
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> get_tensors(std::istream& in, std::uint8_t width) {
  const auto count = get<std::uint64_t>(in);
  if (count > (std::uint64_t(1) << 24)) throw DataError("checkpoint tensor count is implausible");
  std::vector<std::pair<std::string, Tensor<T>>> items;
  for (std::uint64_t i = 0; i < count; ++i) {
    auto name = get_string(in, 4096);
    const auto rank = get<std::uint32_t>(in);
    if (rank > 8) throw DataError("checkpoint tensor '" + name + "' has implausible rank");
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& dim : shape) {
      dim = get<std::uint64_t>(in);
      if (dim == 0 || dim > (std::uint64_t(1) << 32)) {
        throw DataError("checkpoint tensor '" + name + "' has a bad dimension");
      }
      numel *= dim;
    }
    auto values = width == 4 ? get_values<T, float>(in, numel) : get_values<T, double>(in, numel);
    items.emplace_back(std::move(name), Tensor<T>::from(std::move(shape), std::move(values)));
  }
  return items;
}

}  // namespace

template <typename T>
void write_checkpoint(std::ostream& out, const Checkpoint<T>& ckpt) {
  out.write(kMagic, sizeof kMagic);
  put<std::uint8_t>(out, std::uint8_t(sizeof(T)));
  const auto cfg = ckpt.config.to_text();
  put<std::uint32_t>(out, std::uint32_t(cfg.size()));
  out.write(cfg.data(), std::streamsize(cfg.size()));
  put_tensors(out, ckpt.params);
  put<std::uint64_t>(out, ckpt.meta.size());
  for (const auto& [k, v] : ckpt.meta) {
    put_string(out, k);
    put_string(out, v);
  }
  put_tensors(out, ckpt.extra);
  if (!out) throw IoError("failed writing checkpoint");
}

template <typename T>
Checkpoint<T> read_checkpoint(std::istream& in) {
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw DataError("not a checkpoint file (bad magic)");
  }
  const auto width = get<std::uint8_t>(in);
  if (width != 4 && width != 8) throw DataError("checkpoint has unknown precision flag");
  const auto cfg_len = get<std::uint32_t>(in);
  std::string cfg(cfg_len, '\0');
  if (cfg_len && !in.read(cfg.data(), cfg_len)) throw DataError("checkpoint is truncated");

  Checkpoint<T> ckpt;
  ckpt.config = ModelConfig::from_text(cfg);
  ckpt.params = get_tensors<T>(in, width);
  const auto meta = get<std::uint64_t>(in);
  if (meta > 4096) throw DataError("checkpoint metadata count is implausible");
  for (std::uint64_t i = 0; i < meta; ++i) {
    auto k = get_string(in, 4096);
    ckpt.meta[k] = get_string(in);
  }
  ckpt.extra = get_tensors<T>(in, width);
  if (in.peek() != std::char_traits<char>::eof()) throw DataError("checkpoint has trailing bytes");
  return ckpt;
}

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ckpt) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp);
    write_checkpoint(out, ckpt);
    out.flush();
    if (!out) throw IoError("failed writing checkpoint " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  return read_checkpoint<T>(in);
}

#define CHARTRANS_INSTANTIATE_MODEL(T)                                          \
  template class ParamSet<T>;                                                   \
  template class Seq2Seq<T>;                                                    \
  template Tensor<T> highway_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                     const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> split_heads(const Tensor<T>&, std::size_t);                \
  template Tensor<T> merge_heads(const Tensor<T>&, std::size_t, std::size_t, std::size_t);      \
  template Tensor<T> attend(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                            const AttentionMask&);                              \
  template Tensor<T> multihead_attention(const Tensor<T>&, const Tensor<T>&,                   \
                                         const AttentionWeights<T>&, std::size_t,              \
                                         std::span<const std::uint8_t>, bool);                 \
  template std::size_t count_params(const ParamSet<T>&);                        \
  template Tensor<T> glorot_init(const Shape&, std::mt19937_64&);               \
  template Tensor<T> positional_encoding(std::size_t, std::size_t);             \
  template void write_checkpoint(std::ostream&, const Checkpoint<T>&);          \
  template Checkpoint<T> read_checkpoint(std::istream&);                        \
  template void save_checkpoint(const std::string&, const Checkpoint<T>&);      \
  template Checkpoint<T> load_checkpoint(const std::string&);

CHARTRANS_INSTANTIATE_MODEL(float)
CHARTRANS_INSTANTIATE_MODEL(double)

}  // namespace chartrans
