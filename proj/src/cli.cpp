#include "chartrans/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <new>
#include <optional>
#include <random>
#include <ostream>
#include <sstream>

#include "chartrans/bpe.hpp"
#include "chartrans/corpus.hpp"
#include "chartrans/decode.hpp"
#include "chartrans/errors.hpp"
#include "chartrans/io.hpp"
#include "chartrans/metrics.hpp"
#include "chartrans/model.hpp"
#include "chartrans/random.hpp"
#include "chartrans/text.hpp"
#include "chartrans/train.hpp"
#include "chartrans/vocab.hpp"

namespace chartrans {
namespace {

constexpr std::uint64_t kDefaultSeed = 13;

// Reference timings of the full-size models on a GPU, for comparison.
struct SpeedReference {
  const char* model;
  double sec_per_update;
  double hours;
  double percent;
};
constexpr SpeedReference kSpeedReference[] = {
    {"char-transformer", 1.362, 37.71, 100.0},
    {"char-reduction-transformer", 0.894, 24.76, 66.0},
};

// Ordered key=value settings for one subcommand. Every key must be declared;
// values are resolved from defaults, then the config file, then flags.
class Settings {
 public:
  void define(const std::string& key, std::string value) {
    if (!values_.count(key)) order_.push_back(key);
    values_[key] = std::move(value);
  }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value, const std::string& source) {
    if (!has(key)) throw DataError(source + ": unknown key '" + key + "'");
    values_[key] = value;
  }
  const std::string& str(const std::string& key) const { return values_.at(key); }

  std::size_t size(const std::string& key) const {
    const auto& v = str(key);
    std::size_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
      throw DataError("setting " + key + ": expected a non-negative integer, got '" + v + "'");
    }
    return out;
  }
  double real(const std::string& key) const {
    const auto& v = str(key);
    double out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
      throw DataError("setting " + key + ": expected a number, got '" + v + "'");
    }
    return out;
  }
  bool flag(const std::string& key) const {
    const auto& v = str(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw DataError("setting " + key + ": expected true or false, got '" + v + "'");
  }
  const std::string& required(const std::string& key) const {
    if (str(key).empty()) throw UsageError("missing required setting '" + key + "'");
    return str(key);
  }

  std::string echo() const {
    std::string out;
    for (const auto& k : order_) out += k + "=" + values_.at(k) + "\n";
    return out;
  }
  const std::vector<std::string>& keys() const { return order_; }

 private:
  std::vector<std::string> order_;
  std::map<std::string, std::string> values_;
};

std::string format_number(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string dashed(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

// Flag values given for one subcommand, keyed by setting name.
using Overrides = std::map<std::string, std::string>;

void add_setting_flags(CLI::App* cmd, const std::vector<std::pair<std::string, std::string>>& keys,
                       Overrides& overrides) {
  for (const auto& [key, help] : keys) {
    cmd->add_option_function<std::string>(
        "--" + dashed(key), [&overrides, key = key](const std::string& v) { overrides[key] = v; },
        help)
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }
}

std::vector<std::pair<std::string, std::string>> file_settings(const Globals& g) {
  if (g.config_path.empty()) return {};
  return parse_key_values(read_file(g.config_path), g.config_path);
}

std::string file_value(const std::vector<std::pair<std::string, std::string>>& file,
                       const std::string& key) {
  for (const auto& [k, v] : file) {
    if (k == key) return v;
  }
  return {};
}

// Defaults < config file < flags. The seed flag wins over everything.
void resolve(Settings& s, const Globals& g, const Overrides& overrides) {
  for (const auto& [k, v] : file_settings(g)) s.set(k, v, g.config_path);
  for (const auto& [k, v] : overrides) s.set(k, v, "command line");
  if (g.seed) s.set("seed", std::to_string(*g.seed), "command line");
}

std::vector<std::string> read_corpus_files(const std::string& list) {
  std::vector<std::string> lines;
  std::stringstream ss(list);
  std::string path;
  while (std::getline(ss, path, ',')) {
    if (path.empty()) continue;
    auto part = read_lines(path);
    lines.insert(lines.end(), std::make_move_iterator(part.begin()),
                 std::make_move_iterator(part.end()));
  }
  return lines;
}

std::string vocab_text(const Vocab& v) {
  std::ostringstream os;
  v.save(os);
  return os.str();
}

std::string merges_text(const BpeMerges& m) {
  std::ostringstream os;
  m.save(os);
  return os.str();
}

Vocab vocab_from_text(const std::string& text) {
  std::istringstream is(text);
  return Vocab::load(is);
}

BpeMerges merges_from_text(const std::string& text) {
  std::istringstream is(text);
  return BpeMerges::load(is);
}

BpeMerges load_merges(const std::string& path) { return merges_from_text(read_file(path)); }

std::vector<std::string> pretokenized(const std::vector<std::string>& lines) {
  std::vector<std::string> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(pretokenize(l));
  return out;
}

// ---------------------------------------------------------------- bpe-learn

const std::vector<std::pair<std::string, std::string>> kBpeKeys = {
    {"train", "corpus files, comma separated"},
    {"num_ops", "number of merge operations"},
    {"output", "merges file to write"},
    {"seed", "random seed (unused, recorded)"},
};

int cmd_bpe_learn(const Globals& g, const Overrides& o, std::ostream& out, std::ostream& err) {
  Settings s;
  s.define("train", "");
  s.define("num_ops", std::to_string(kDefaultBpeOps));
  s.define("output", "");
  s.define("seed", std::to_string(kDefaultSeed));
  resolve(s, g, o);
  if (!g.quiet) err << s.echo();

  const auto lines = pretokenized(read_corpus_files(s.required("train")));
  const auto merges = learn_bpe(lines, s.size("num_ops"));
  write_file_atomic(s.required("output"), merges_text(merges));

  std::map<std::string, std::size_t> symbols;
  for (const auto& l : lines) {
    for (auto& t : apply_bpe(l, merges)) ++symbols[t];
  }
  out << "merges=" << merges.count() << "\n"
      << "vocabulary=" << symbols.size() << "\n"
      << "sentences=" << lines.size() << "\n";
  return 0;
}

// -------------------------------------------------------------------- vocab

const std::vector<std::pair<std::string, std::string>> kVocabKeys = {
    {"train", "corpus files, comma separated"},
    {"mode", "bpe-transformer, char-transformer or char-reduction-transformer"},
    {"merges", "merges file (bpe mode)"},
    {"max_size", "vocabulary size limit including specials (0 = all, bpe only)"},
    {"output", "vocabulary file to write"},
    {"seed", "random seed (unused, recorded)"},
};

Vocab build_vocab(const std::vector<std::string>& lines, Segmentation seg,
                  const BpeMerges* merges, std::size_t max_size) {
  if (seg == Segmentation::kChar) return build_char_vocab(lines, max_size);
  const auto segmenter = Segmenter::bpe(*merges);
  std::vector<std::vector<std::string>> segmented;
  segmented.reserve(lines.size());
  for (const auto& l : lines) segmented.push_back(segmenter.tokens(l));
  return build_token_vocab(segmented, max_size);
}

int cmd_vocab(const Globals& g, const Overrides& o, std::ostream& out, std::ostream& err) {
  Settings s;
  s.define("train", "");
  s.define("mode", "char-reduction-transformer");
  s.define("merges", "");
  s.define("max_size", "");
  s.define("output", "");
  s.define("seed", std::to_string(kDefaultSeed));
  resolve(s, g, o);
  const auto seg = mode_segmentation(parse_mode(s.str("mode")));
  if (s.str("max_size").empty()) {
    s.set("max_size", seg == Segmentation::kChar ? std::to_string(kDefaultCharVocabSize) : "0",
          "default");
  }
  if (!g.quiet) err << s.echo();

  std::optional<BpeMerges> merges;
  if (seg == Segmentation::kBpe) merges = load_merges(s.required("merges"));
  const auto lines = read_corpus_files(s.required("train"));
  const auto vocab = build_vocab(lines, seg, merges ? &*merges : nullptr, s.size("max_size"));
  write_file_atomic(s.required("output"), vocab_text(vocab));
  out << "size=" << vocab.size() << "\n";
  return 0;
}

// -------------------------------------------------------------------- train

const std::vector<std::pair<std::string, std::string>> kTrainKeys = {
    {"mode", "bpe-transformer, char-transformer or char-reduction-transformer"},
    {"preset", "paper or desk"},
    {"precision", "float or double"},
    {"train_src", "training source file"},
    {"train_tgt", "training target file"},
    {"dev_src", "development source file (default: first training pairs)"},
    {"dev_tgt", "development target file"},
    {"out_dir", "directory for checkpoints, vocabularies and the log"},
    {"merges", "existing merges file (bpe mode; learned when empty)"},
    {"bpe_ops", "merge operations when learning BPE"},
    {"char_vocab_size", "character vocabulary size including specials"},
    {"max_chars", "length filter for character segmentation"},
    {"max_tokens", "length filter for subword segmentation"},
    {"dev_pairs", "training pairs reused as dev set when none is given"},
    {"resume", "continue from out_dir/latest.ckpt when present"},
    {"enc_emb", "character embedding size (reduction mode only)"},
    {"d_model", "model width"},
    {"heads", "attention heads"},
    {"d_ff", "feed-forward width"},
    {"enc_layers", "encoder layers"},
    {"dec_layers", "decoder layers"},
    {"conv_filters", "width:count list for the conv bank (reduction mode only)"},
    {"pool_stride", "max-pooling stride"},
    {"highway_layers", "highway layers"},
    {"dropout", "dropout rate"},
    {"max_positions", "positional table length"},
    {"lr_factor", "Noam schedule factor"},
    {"warmup_steps", "Noam warmup updates"},
    {"beta1", "Adam beta1"},
    {"beta2", "Adam beta2"},
    {"eps", "Adam epsilon"},
    {"label_smoothing", "label smoothing"},
    {"max_updates", "number of optimizer updates"},
    {"accum_count", "micro-batches per update"},
    {"batch_tokens", "target tokens per micro-batch"},
    {"eval_interval", "updates between dev evaluations"},
    {"seed", "root random seed"},
};

void define_model_and_opt(Settings& s, ModelMode mode, bool paper) {
  const auto m = paper ? ModelConfig::paper(mode, kNumSpecials, kNumSpecials)
                       : ModelConfig::desk(mode, kNumSpecials, kNumSpecials);
  const auto o = paper ? OptConfig::paper(mode) : OptConfig::desk(mode);
  s.define("enc_emb", std::to_string(m.enc_emb));
  s.define("d_model", std::to_string(m.d_model));
  s.define("heads", std::to_string(m.heads));
  s.define("d_ff", std::to_string(m.d_ff));
  s.define("enc_layers", std::to_string(m.enc_layers));
  s.define("dec_layers", std::to_string(m.dec_layers));
  std::string filters;
  for (const auto& [w, n] : m.conv_filters) {
    filters += (filters.empty() ? "" : ",") + std::to_string(w) + ":" + std::to_string(n);
  }
  s.define("conv_filters", filters);
  s.define("pool_stride", std::to_string(m.pool_stride));
  s.define("highway_layers", std::to_string(m.highway_layers));
  s.define("dropout", format_number(m.dropout));
  s.define("max_positions", std::to_string(m.max_positions));
  s.define("lr_factor", format_number(o.lr_factor));
  s.define("warmup_steps", std::to_string(o.warmup_steps));
  s.define("beta1", format_number(o.beta1));
  s.define("beta2", format_number(o.beta2));
  s.define("eps", format_number(o.eps));
  s.define("label_smoothing", format_number(o.label_smoothing));
  s.define("max_updates", std::to_string(o.max_updates));
  s.define("accum_count", std::to_string(o.accum_count));
  s.define("batch_tokens", std::to_string(o.batch_tokens));
  s.define("eval_interval", std::to_string(o.eval_interval));
}

ModelConfig model_config_from(const Settings& s, ModelMode mode, std::size_t src_vocab,
                              std::size_t tgt_vocab) {
  const bool reduces = mode == ModelMode::kCharReduction;
  std::string text = "mode=" + mode_name(mode) + "\n";
  text += "src_vocab=" + std::to_string(src_vocab) + "\n";
  text += "tgt_vocab=" + std::to_string(tgt_vocab) + "\n";
  const std::string emb = reduces ? s.str("enc_emb") : s.str("d_model");
  text += "enc_emb=" + emb + "\n";
  text += "dec_emb=" + s.str("d_model") + "\n";
  for (const char* k : {"d_model", "heads", "d_ff", "enc_layers", "dec_layers", "pool_stride",
                        "highway_layers", "dropout", "max_positions"}) {
    text += std::string(k) + "=" + s.str(k) + "\n";
  }
  text += "conv_filters=" + (reduces ? s.str("conv_filters") : std::string()) + "\n";
  return ModelConfig::from_text(text);
}

OptConfig opt_config_from(const Settings& s) {
  OptConfig o;
  o.lr_factor = s.real("lr_factor");
  o.warmup_steps = s.size("warmup_steps");
  o.beta1 = s.real("beta1");
  o.beta2 = s.real("beta2");
  o.eps = s.real("eps");
  o.label_smoothing = s.real("label_smoothing");
  o.max_updates = s.size("max_updates");
  o.accum_count = s.size("accum_count");
  o.batch_tokens = s.size("batch_tokens");
  o.eval_interval = s.size("eval_interval");
  o.validate();
  return o;
}

std::vector<SentencePair> read_parallel(const std::string& src_path, const std::string& tgt_path) {
  const auto src = read_lines(src_path);
  const auto tgt = read_lines(tgt_path);
  if (src.size() != tgt.size()) {
    throw DataError("'" + src_path + "' has " + std::to_string(src.size()) + " lines but '" +
                    tgt_path + "' has " + std::to_string(tgt.size()));
  }
  std::vector<SentencePair> pairs;
  pairs.reserve(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) pairs.push_back({src[i], tgt[i]});
  return pairs;
}

std::vector<EncodedPair> encode_pairs(std::span<const SentencePair> pairs, Segmentation seg,
                                      const Vocab& src_vocab, const Vocab& tgt_vocab,
                                      const BpeMerges* merges) {
  std::vector<EncodedPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    out.push_back({encode(p.src, seg, src_vocab, merges), encode(p.tgt, seg, tgt_vocab, merges)});
  }
  return out;
}

const std::string kMetaMode = "data.mode";
const std::string kMetaSrcVocab = "data.src_vocab";
const std::string kMetaTgtVocab = "data.tgt_vocab";
const std::string kMetaMerges = "data.merges";
const std::string kMetaRunConfig = "run.config";

template <typename T>
int train_with(const Settings& s, const Globals& g, std::ostream& out, std::ostream& err) {
  const auto mode = parse_mode(s.str("mode"));
  const auto seg = mode_segmentation(mode);
  const std::filesystem::path dir = s.required("out_dir");
  std::filesystem::create_directories(dir);
  const std::uint64_t seed = s.size("seed");

  auto train_raw = read_parallel(s.required("train_src"), s.required("train_tgt"));
  if (train_raw.empty()) throw DataError("training corpus is empty");

  std::optional<BpeMerges> merges;
  if (seg == Segmentation::kBpe) {
    if (!s.str("merges").empty()) {
      merges = load_merges(s.str("merges"));
    } else {
      std::vector<std::string> joint;
      for (const auto& p : train_raw) {
        joint.push_back(pretokenize(p.src));
        joint.push_back(pretokenize(p.tgt));
      }
      merges = learn_bpe(joint, s.size("bpe_ops"));
    }
    write_file_atomic((dir / "merges.txt").string(), merges_text(*merges));
  }
  const Segmenter segmenter = merges ? Segmenter::bpe(*merges) : Segmenter::chars();
  LengthLimits limits{s.size("max_chars"), s.size("max_tokens")};
  const auto kept = filter_corpus(train_raw, segmenter, segmenter, limits);
  if (kept.empty()) throw DataError("no training pair survives the length filter");

  std::vector<std::string> src_lines, tgt_lines;
  for (const auto& p : kept) {
    src_lines.push_back(p.src);
    tgt_lines.push_back(p.tgt);
  }
  const std::size_t vocab_limit = seg == Segmentation::kChar ? s.size("char_vocab_size") : 0;
  const auto* mp = merges ? &*merges : nullptr;
  const Vocab src_vocab = build_vocab(src_lines, seg, mp, vocab_limit);
  const Vocab tgt_vocab = build_vocab(tgt_lines, seg, mp, vocab_limit);
  write_file_atomic((dir / "src.vocab").string(), vocab_text(src_vocab));
  write_file_atomic((dir / "tgt.vocab").string(), vocab_text(tgt_vocab));

  const auto train = encode_pairs(kept, seg, src_vocab, tgt_vocab, mp);
  std::vector<EncodedPair> dev;
  if (!s.str("dev_src").empty()) {
    const auto dev_raw = read_parallel(s.str("dev_src"), s.required("dev_tgt"));
    dev = encode_pairs(filter_corpus(dev_raw, segmenter, segmenter, limits), seg, src_vocab,
                       tgt_vocab, mp);
  } else {
    dev.assign(train.begin(),
               train.begin() + std::ptrdiff_t(std::min(train.size(), s.size("dev_pairs"))));
  }

  const auto cfg = model_config_from(s, mode, src_vocab.size(), tgt_vocab.size());
  const auto opt = opt_config_from(s);

  TrainHooks hooks;
  hooks.meta = {{kMetaMode, mode_name(mode)},
                {kMetaSrcVocab, vocab_text(src_vocab)},
                {kMetaTgtVocab, vocab_text(tgt_vocab)},
                {kMetaMerges, merges ? merges_text(*merges) : std::string()},
                {kMetaRunConfig, s.echo()}};

  const std::string latest = (dir / "latest.ckpt").string();
  const std::string best = (dir / "best.ckpt").string();
  std::optional<Seq2Seq<T>> model;
  TrainState<T> state;
  const bool resuming = s.flag("resume") && std::filesystem::exists(latest);
  if (resuming) {
    auto ck = load_checkpoint<T>(latest);
    if (!(ck.config == cfg)) {
      throw DataError("'" + latest + "' was trained with a different model configuration");
    }
    ParamSet<T> params;
    for (auto& [name, t] : ck.params) params.add(name, t);
    model.emplace(ck.config, std::move(params));
    state = restore_state(ck, model->params(), derive_seed(seed, 2));
  } else {
    model.emplace(cfg, derive_seed(seed, 1));
    state = TrainState<T>::fresh(model->params(), derive_seed(seed, 2));
  }
  write_file_atomic((dir / "config.resolved").string(), s.echo());

  std::ofstream log((dir / "train.log").string(),
                    resuming ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot open '" + (dir / "train.log").string() + "'");
  hooks.log = &log;
  hooks.on_update = [&](const UpdateMetrics& m) {
    if (!g.quiet) err << format_log_line(m) << '\n';
    return true;
  };
  hooks.on_eval = [&](std::size_t step, double loss) {
    if (!g.quiet) err << "dev\t" << step << '\t' << format_number(loss) << '\n';
    return true;
  };
  if (!g.quiet) {
    err << "# pairs=" << train.size() << " dev=" << dev.size() << " src_vocab=" << src_vocab.size()
        << " tgt_vocab=" << tgt_vocab.size() << " params=" << count_params(model->params())
        << '\n';
  }
  const auto result = train_loop(*model, state, train, dev, opt, {latest, best}, hooks);
  out << "updates=" << state.step << "\n"
      << "last_loss=" << format_number(result.last_loss) << "\n"
      << "best_dev_loss=" << format_number(result.best_dev_loss) << "\n";
  return 0;
}

int cmd_train(const Globals& g, const Overrides& o, std::ostream& out, std::ostream& err) {
  const auto file = file_settings(g);
  auto pick = [&](const std::string& key, const std::string& fallback) {
    if (auto it = o.find(key); it != o.end()) return it->second;
    const auto v = file_value(file, key);
    return v.empty() ? fallback : v;
  };
  const auto mode = parse_mode(pick("mode", "char-reduction-transformer"));
  const auto preset = pick("preset", "desk");
  if (preset != "paper" && preset != "desk") {
    throw UsageError("unknown preset '" + preset + "' (expected paper or desk)");
  }
  Settings s;
  s.define("mode", mode_name(mode));
  s.define("preset", preset);
  s.define("precision", "float");
  for (const char* k : {"train_src", "train_tgt", "dev_src", "dev_tgt", "out_dir", "merges"}) {
    s.define(k, "");
  }
  s.define("bpe_ops", std::to_string(preset == "paper" ? kDefaultBpeOps : 2000));
  s.define("char_vocab_size", std::to_string(kDefaultCharVocabSize));
  s.define("max_chars", "450");
  s.define("max_tokens", "50");
  s.define("dev_pairs", "500");
  s.define("resume", "false");
  define_model_and_opt(s, mode, preset == "paper");
  s.define("seed", std::to_string(kDefaultSeed));
  resolve(s, g, o);
  if (!g.quiet) err << s.echo();

  const auto& precision = s.str("precision");
  if (precision == "float") return train_with<float>(s, g, out, err);
  if (precision == "double") return train_with<double>(s, g, out, err);
  throw UsageError("precision must be float or double");
}

// ---------------------------------------------------------------- translate

const std::vector<std::pair<std::string, std::string>> kTranslateKeys = {
    {"checkpoint", "checkpoint written by train"},
    {"input", "source sentences, one per line"},
    {"output", "file to write translations to"},
    {"beam", "beam size (0 = 20 for character models, 5 for subword models)"},
    {"alpha", "length normalization exponent"},
    {"max_len", "output length cap (0 = from source length)"},
    {"seed", "random seed (unused, recorded)"},
};

int cmd_translate(const Globals& g, const Overrides& o, std::ostream& out, std::ostream& err) {
  Settings s;
  s.define("checkpoint", "");
  s.define("input", "");
  s.define("output", "");
  s.define("beam", "0");
  s.define("alpha", "0");
  s.define("max_len", "0");
  s.define("seed", std::to_string(kDefaultSeed));
  resolve(s, g, o);

  auto ck = load_checkpoint<float>(s.required("checkpoint"));
  const auto need = [&](const std::string& key) -> const std::string& {
    auto it = ck.meta.find(key);
    if (it == ck.meta.end()) {
      throw DataError("checkpoint '" + s.str("checkpoint") + "' has no " + key + " record");
    }
    return it->second;
  };
  const auto mode = parse_mode(need(kMetaMode));
  if (mode != ck.config.mode) throw DataError("checkpoint mode record disagrees with its model");
  const auto seg = mode_segmentation(mode);
  const Vocab src_vocab = vocab_from_text(need(kMetaSrcVocab));
  const Vocab tgt_vocab = vocab_from_text(need(kMetaTgtVocab));
  std::optional<BpeMerges> merges;
  if (seg == Segmentation::kBpe) merges = merges_from_text(need(kMetaMerges));
  if (s.size("beam") == 0) s.set("beam", std::to_string(default_beam_size(seg)), "default");
  if (!g.quiet) err << s.echo();

  ParamSet<float> params;
  for (auto& [name, t] : ck.params) params.add(name, t);
  Seq2Seq<float> model(ck.config, std::move(params));
  const std::size_t beam = s.size("beam");
  const double alpha = s.real("alpha");
  const auto lines = read_lines(s.required("input"));
  std::string result;
  for (const auto& line : lines) {
    const auto src = encode(line, seg, src_vocab, merges ? &*merges : nullptr);
    const std::size_t max_len =
        s.size("max_len") ? s.size("max_len") : decode_max_len(src.size() - 1, seg);
    ModelScorer<float> scorer(model, src);
    const auto hyp = beam_search(scorer, beam, max_len, alpha);
    result += detokenize(hyp.tokens, seg, tgt_vocab);
    result += '\n';
  }
  write_file_atomic(s.required("output"), result);
  out << "sentences=" << lines.size() << "\n";
  return 0;
}

// -------------------------------------------------------------------- score

const std::vector<std::pair<std::string, std::string>> kScoreKeys = {
    {"hyp", "hypothesis file"},
    {"ref", "reference file"},
    {"metrics", "comma-separated: bleu, chrf, character"},
    {"chrf_beta", "chrF recall weight"},
    {"output", "also write the key=value report to this file"},
    {"seed", "random seed (unused, recorded)"},
};

int cmd_score(const Globals& g, const Overrides& o, std::ostream& out, std::ostream& err) {
  Settings s;
  s.define("hyp", "");
  s.define("ref", "");
  s.define("metrics", "bleu,chrf,character");
  s.define("chrf_beta", "3");
  s.define("output", "");
  s.define("seed", std::to_string(kDefaultSeed));
  resolve(s, g, o);
  const auto metrics = parse_metrics(s.str("metrics"));
  const auto report =
      score_files(s.required("hyp"), s.required("ref"), metrics, s.real("chrf_beta"));
  if (!g.quiet) err << report.table();
  out << report.key_values();
  if (!s.str("output").empty()) write_file_atomic(s.str("output"), report.key_values());
  return 0;
}

// ---------------------------------------------------------------- benchmark

const std::vector<std::pair<std::string, std::string>> kBenchmarkKeys = {
    {"preset", "paper or desk model dimensions"},
    {"d_model", "override model width (0 = preset)"},
    {"layers", "override encoder and decoder depth (0 = preset)"},
    {"length", "characters per synthetic sentence"},
    {"batch_sentences", "sentences per micro-batch"},
    {"accum_count", "micro-batches per update"},
    {"updates", "timed updates per model (at least 5)"},
    {"vocab", "character vocabulary size"},
    {"total_updates", "updates used to project total training time"},
    {"seed", "root random seed"},
};

std::vector<Batch> synthetic_batches(std::size_t vocab, std::size_t length, std::size_t rows,
                                     std::size_t count, std::size_t stride, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Batch> out;
  for (std::size_t b = 0; b < count; ++b) {
    std::vector<EncodedPair> pairs(rows);
    for (auto& p : pairs) {
      for (std::size_t i = 0; i < length; ++i) {
        p.src.push_back(std::int32_t(kNumSpecials + rng() % (vocab - kNumSpecials)));
        p.tgt.push_back(std::int32_t(kNumSpecials + rng() % (vocab - kNumSpecials)));
      }
      p.src.push_back(kEos);
      p.tgt.push_back(kEos);
    }
    out.push_back(make_batch(pairs, stride));
  }
  return out;
}

int cmd_benchmark(const Globals& g, const Overrides& o, std::ostream& out, std::ostream& err) {
  Settings s;
  s.define("preset", "paper");
  s.define("d_model", "0");
  s.define("layers", "0");
  s.define("length", "450");
  s.define("batch_sentences", "1");
  s.define("accum_count", "4");
  s.define("updates", "20");
  s.define("vocab", std::to_string(kDefaultCharVocabSize));
  s.define("total_updates", "100000");
  s.define("seed", std::to_string(kDefaultSeed));
  resolve(s, g, o);
  if (!g.quiet) err << s.echo();
  const auto& preset = s.str("preset");
  if (preset != "paper" && preset != "desk") {
    throw UsageError("unknown preset '" + preset + "' (expected paper or desk)");
  }
  const std::size_t updates = s.size("updates");
  if (updates < 5) throw UsageError("benchmark needs at least 5 timed updates");

  auto build = [&](ModelMode mode) {
    const std::size_t v = s.size("vocab");
    auto c = preset == "paper" ? ModelConfig::paper(mode, v, v) : ModelConfig::desk(mode, v, v);
    if (const auto d = s.size("d_model")) {
      c.d_model = c.dec_emb = d;
      if (!c.reduces()) c.enc_emb = d;
    }
    if (const auto l = s.size("layers")) c.enc_layers = c.dec_layers = l;
    c.dropout = 0.0;
    c.max_positions = std::max(c.max_positions, s.size("length") + 2);
    c.validate();
    return c;
  };
  OptConfig opt;
  opt.accum_count = s.size("accum_count");
  const std::uint64_t seed = s.size("seed");

  double seconds[2] = {};
  const ModelMode modes[2] = {ModelMode::kCharTransformer, ModelMode::kCharReduction};
  try {
    const auto plain_cfg = build(modes[0]);
    const auto reduce_cfg = build(modes[1]);
    // Padded to the pooling stride so both models read identical batches.
    const auto batches =
        synthetic_batches(plain_cfg.src_vocab, s.size("length"), s.size("batch_sentences"),
                          opt.accum_count, reduce_cfg.source_stride(), derive_seed(seed, 3));
    Seq2Seq<float> plain(plain_cfg, derive_seed(seed, 1));
    Seq2Seq<float> reduce(reduce_cfg, derive_seed(seed, 1));
    const auto report =
        benchmark_updates(plain, reduce, std::span<const Batch>(batches), updates, opt);
    seconds[0] = report.seconds_a;
    seconds[1] = report.seconds_b;
  } catch (const std::bad_alloc&) {
    throw DataError(
        "benchmark ran out of memory; lower --d-model, --layers, --length or --batch-sentences");
  }

  const double total = double(s.size("total_updates"));
  char line[256];
  std::snprintf(line, sizeof line, "%-28s %12s %12s %8s\n", "model", "sec/update", "total_hours",
                "percent");
  out << line;
  for (int i = 0; i < 2; ++i) {
    std::snprintf(line, sizeof line, "%-28s %12.4f %12.2f %8.1f\n", mode_name(modes[i]).c_str(),
                  seconds[i], seconds[i] * total / 3600.0, 100.0 * seconds[i] / seconds[0]);
    out << line;
  }
  out << "ratio=" << format_number(seconds[1] / seconds[0]) << "\n";
  if (!g.quiet) {
    err << "# reference (GPU, full corpus):\n";
    for (const auto& r : kSpeedReference) {
      std::snprintf(line, sizeof line, "# %-26s %12.3f %12.2f %8.0f\n", r.model, r.sec_per_update,
                    r.hours, r.percent);
      err << line;
    }
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Character-level neural machine translation toolkit", "chartrans"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = kDefaultSeed;
  app.add_option("--config", g.config_path, "key=value settings file");
  auto* seed_opt = app.add_option("--seed", seed, "root random seed (default 13)");
  app.add_flag("--quiet", g.quiet, "only print results");

  struct Command {
    const char* name;
    const char* help;
    const std::vector<std::pair<std::string, std::string>>* keys;
    int (*run)(const Globals&, const Overrides&, std::ostream&, std::ostream&);
  };
  const Command commands[] = {
      {"bpe-learn", "learn BPE merge operations", &kBpeKeys, cmd_bpe_learn},
      {"vocab", "build a vocabulary file", &kVocabKeys, cmd_vocab},
      {"train", "train a translation model", &kTrainKeys, cmd_train},
      {"translate", "translate a file with a checkpoint", &kTranslateKeys, cmd_translate},
      {"score", "score translations against references", &kScoreKeys, cmd_score},
      {"benchmark", "time updates of the two character models", &kBenchmarkKeys, cmd_benchmark},
  };
  std::vector<Overrides> overrides(std::size(commands));
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < std::size(commands); ++i) {
    auto* sub = app.add_subcommand(commands[i].name, commands[i].help);
    sub->fallthrough();
    std::vector<std::pair<std::string, std::string>> keys;
    for (const auto& kv : *commands[i].keys) {
      if (kv.first != "seed") keys.push_back(kv);  // --seed is global
    }
    add_setting_flags(sub, keys, overrides[i]);
    subs.push_back(sub);
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return int(ExitCode::kUsage);
  }
  if (seed_opt->count()) g.seed = seed;

  try {
    for (std::size_t i = 0; i < subs.size(); ++i) {
      if (subs[i]->parsed()) return commands[i].run(g, overrides[i], out, err);
    }
    err << "error: no subcommand given\n";
    return int(ExitCode::kUsage);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return int(e.exit_code());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return int(ExitCode::kIo);
  } catch (const std::bad_alloc&) {
    err << "error: out of memory\n";
    return int(ExitCode::kNumeric);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return int(ExitCode::kData);
  }
}

}  // namespace chartrans
