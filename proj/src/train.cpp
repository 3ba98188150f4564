#include "chartrans/train.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <ostream>

#include "chartrans/errors.hpp"
#include "chartrans/ops.hpp"
#include "chartrans/random.hpp"
#include "chartrans/vocab.hpp"

namespace chartrans {

OptConfig OptConfig::paper(ModelMode mode) {
  OptConfig c;
  c.max_updates = 100000;
  c.eval_interval = 1000;
  if (mode == ModelMode::kBpeTransformer) {
    c.batch_tokens = 4096;
    c.accum_count = 2;
  }
  return c;
}

OptConfig OptConfig::desk(ModelMode) {
  OptConfig c;
  c.max_updates = 2000;
  c.eval_interval = 100;
  c.batch_tokens = 1024;
  c.accum_count = 1;
  c.warmup_steps = 400;
  c.lr_factor = 1.0;
  return c;
}

void OptConfig::validate() const {
  auto fail = [](const std::string& msg) { throw DataError("training config: " + msg); };
  if (!(lr_factor > 0)) fail("lr_factor must be positive");
  if (warmup_steps == 0) fail("warmup_steps must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("betas must be in [0, 1)");
  if (!(eps > 0)) fail("eps must be positive");
  if (!(label_smoothing >= 0 && label_smoothing < 1)) fail("label_smoothing must be in [0, 1)");
  if (accum_count == 0) fail("accum_count must be positive");
  if (batch_tokens == 0) fail("batch_tokens must be positive");
  if (eval_interval == 0) fail("eval_interval must be positive");
}

template <typename T>
TrainState<T> TrainState<T>::fresh(const ParamSet<T>& params, std::uint64_t seed) {
  TrainState s;
  s.rng_seed = seed;
  for (const auto& [name, t] : params.items()) {
    s.m.emplace_back(t.numel(), T(0));
    s.v.emplace_back(t.numel(), T(0));
  }
  return s;
}

template <typename T>
NllLoss<T> nll_loss(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                    double smoothing) {
  const auto tokens = std::size_t(std::count_if(targets.begin(), targets.end(),
                                                [](std::int32_t t) { return t != kPad; }));
  if (tokens == 0) throw DataError("loss over a batch whose targets are all PAD");
  return {cross_entropy(logits, targets, smoothing, kPad), tokens};
}

double noam_lr(std::size_t step, std::size_t d_model, double factor, std::size_t warmup) {
  if (step == 0) throw DataError("noam_lr: steps count from 1");
  const double s = double(step);
  return factor * std::pow(double(d_model), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(double(warmup), -1.5));
}

template <typename T>
void adam_step(ParamSet<T>& params, TrainState<T>& state, double lr, const OptConfig& cfg) {
  auto& items = params.items();
  if (state.m.size() != items.size() || state.v.size() != items.size()) {
    throw ShapeError("optimizer state covers " + std::to_string(state.m.size()) +
                     " parameters, model has " + std::to_string(items.size()));
  }
  // The step counter used for bias correction is the one being completed.
  const double t = double(state.step + 1);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < items.size(); ++i) {
    auto& param = items[i].second;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != param.numel() || v.size() != param.numel()) {
      throw ShapeError("optimizer moments for '" + items[i].first + "' do not match its shape");
    }
    auto w = param.mutable_data();
    const auto g = param.grad();
    const bool has = !g.empty();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = has ? double(g[k]) : 0.0;
      const double mk = cfg.beta1 * double(m[k]) + (1.0 - cfg.beta1) * gk;
      const double vk = cfg.beta2 * double(v[k]) + (1.0 - cfg.beta2) * gk * gk;
      m[k] = T(mk);
      v[k] = T(vk);
      w[k] = T(double(w[k]) - lr * (mk / c1) / (std::sqrt(vk / c2) + cfg.eps));
    }
    param.zero_grad();
  }
}

template <typename T>
UpdateMetrics train_update(Seq2Seq<T>& model, std::span<const Batch> micro_batches,
                           TrainState<T>& state, const OptConfig& cfg) {
  if (micro_batches.empty()) throw DataError("train_update needs at least one micro-batch");
  const auto start = std::chrono::steady_clock::now();
  std::size_t total = 0;
  for (const auto& b : micro_batches) total += b.token_count;
  if (total == 0) throw DataError("update group has no target tokens");

  double loss_sum = 0;
  model.set_training(true, derive_seed(state.rng_seed, state.step));
  for (const auto& batch : micro_batches) {
    const auto targets = decoder_targets(batch);
    auto loss = nll_loss(model.forward(batch), targets, cfg.label_smoothing);
    loss_sum += double(loss.sum.item());
    backward(affine(loss.sum, T(1.0 / double(total)), T(0)));
    state.accum = (state.accum + 1) % std::max<std::size_t>(micro_batches.size(), 1);
  }
  model.set_training(false);
  if (!std::isfinite(loss_sum)) {
    throw NumericError("non-finite loss at update " + std::to_string(state.step + 1));
  }
  const double lr =
      noam_lr(state.step + 1, model.config().d_model, cfg.lr_factor, cfg.warmup_steps);
  adam_step(model.params(), state, lr, cfg);
  ++state.step;
  state.accum = 0;

  UpdateMetrics m;
  m.step = state.step;
  m.loss_per_token = loss_sum / double(total);
  m.lr = lr;
  m.tokens = total;
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

template <typename T>
double evaluate_loss(Seq2Seq<T>& model, std::span<const Batch> batches) {
  NoGradGuard no_grad;
  model.set_training(false);
  double total = 0;
  std::size_t tokens = 0;
  for (const auto& batch : batches) {
    const auto targets = decoder_targets(batch);
    auto loss = nll_loss(model.forward(batch), targets, 0.0);
    total += double(loss.sum.item());
    tokens += loss.tokens;
  }
  if (tokens == 0) throw DataError("dev set has no target tokens");
  return total / double(tokens);
}

BatchStream::BatchStream(std::vector<EncodedPair> pairs, std::size_t budget, std::size_t stride,
                         std::uint64_t seed)
    : pairs_(std::move(pairs)), budget_(budget), stride_(stride), seed_(seed) {
  if (pairs_.empty()) throw DataError("training corpus is empty");
  load_epoch(0);
}

void BatchStream::load_epoch(std::size_t epoch) {
  epoch_ = epoch;
  offset_ = 0;
  current_ = make_batches(pairs_, budget_, stride_, derive_seed(seed_, epoch));
}

const Batch& BatchStream::next() {
  if (offset_ == current_.size()) load_epoch(epoch_ + 1);
  ++position_;
  return current_[offset_++];
}

void BatchStream::seek(std::size_t position) {
  load_epoch(0);
  position_ = 0;
  while (position_ + (current_.size() - offset_) <= position) {
    position_ += current_.size() - offset_;
    load_epoch(epoch_ + 1);
  }
  offset_ += position - position_;
  position_ = position;
}

namespace {
const std::string kStep = "train.step";
const std::string kSeed = "train.rng_seed";
const std::string kBest = "train.best_dev_loss";

std::string number(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
}  // namespace

template <typename T>
Checkpoint<T> make_checkpoint(const Seq2Seq<T>& model, const TrainState<T>& state,
                              const std::map<std::string, std::string>& meta) {
  Checkpoint<T> ck;
  ck.config = model.config();
  ck.params = model.params().items();
  ck.meta = meta;
  ck.meta[kStep] = std::to_string(state.step);
  ck.meta[kSeed] = std::to_string(state.rng_seed);
  ck.meta[kBest] = number(state.best_dev_loss);
  const auto& items = model.params().items();
  for (std::size_t i = 0; i < items.size() && i < state.m.size(); ++i) {
    ck.extra.emplace_back("adam.m:" + items[i].first,
                          Tensor<T>::from(items[i].second.shape(), state.m[i]));
    ck.extra.emplace_back("adam.v:" + items[i].first,
                          Tensor<T>::from(items[i].second.shape(), state.v[i]));
  }
  return ck;
}

template <typename T>
TrainState<T> restore_state(const Checkpoint<T>& ckpt, const ParamSet<T>& params,
                            std::uint64_t seed) {
  auto state = TrainState<T>::fresh(params, seed);
  if (!ckpt.meta.count(kStep)) return state;
  try {
    state.step = std::stoull(ckpt.meta.at(kStep));
    state.rng_seed = std::stoull(ckpt.meta.at(kSeed));
    state.best_dev_loss = std::stod(ckpt.meta.at(kBest));
  } catch (const std::exception&) {
    throw DataError("checkpoint training state is malformed");
  }
  const auto& items = params.items();
  if (ckpt.extra.size() != 2 * items.size()) {
    throw DataError("checkpoint optimizer state does not match the model");
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& m = ckpt.extra[2 * i];
    const auto& v = ckpt.extra[2 * i + 1];
    if (m.first != "adam.m:" + items[i].first || v.first != "adam.v:" + items[i].first ||
        m.second.numel() != items[i].second.numel() ||
        v.second.numel() != items[i].second.numel()) {
      throw DataError("checkpoint optimizer state does not match parameter '" + items[i].first +
                      "'");
    }
    state.m[i].assign(m.second.data().begin(), m.second.data().end());
    state.v[i].assign(v.second.data().begin(), v.second.data().end());
  }
  return state;
}

std::string format_log_line(const UpdateMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6e\t%.4f\t%.1f", m.step, m.loss_per_token, m.lr,
                m.seconds, m.seconds > 0 ? double(m.tokens) / m.seconds : 0.0);
  return buf;
}

template <typename T>
TrainResult train_loop(Seq2Seq<T>& model, TrainState<T>& state,
                       const std::vector<EncodedPair>& train, const std::vector<EncodedPair>& dev,
                       const OptConfig& cfg, const TrainPaths& paths, const TrainHooks& hooks) {
  cfg.validate();
  const std::size_t stride = model.config().source_stride();
  BatchStream stream(train, cfg.batch_tokens, stride, state.rng_seed);
  stream.seek(state.step * cfg.accum_count);
  const auto dev_batches =
      dev.empty() ? std::vector<Batch>{} : make_batches(dev, cfg.batch_tokens, stride, 0);

  TrainResult result;
  result.best_dev_loss = state.best_dev_loss;
  auto save = [&](const std::string& path) {
    if (!path.empty()) save_checkpoint(path, make_checkpoint(model, state, hooks.meta));
  };
  auto evaluate = [&]() -> bool {
    if (dev_batches.empty()) {
      save(paths.latest);
      return true;
    }
    const double loss = evaluate_loss(model, std::span<const Batch>(dev_batches));
    result.dev_history.emplace_back(state.step, loss);
    if (loss < state.best_dev_loss) {
      state.best_dev_loss = loss;
      result.best_dev_loss = loss;
      save(paths.best);
    }
    save(paths.latest);
    return hooks.on_eval ? hooks.on_eval(state.step, loss) : true;
  };

  std::vector<Batch> group(cfg.accum_count);
  bool evaluated_last = false;
  while (state.step < cfg.max_updates) {
    for (auto& b : group) b = stream.next();
    const auto m = train_update(model, std::span<const Batch>(group), state, cfg);
    ++result.updates;
    result.last_loss = m.loss_per_token;
    if (hooks.log) *hooks.log << format_log_line(m) << '\n';
    bool go = hooks.on_update ? hooks.on_update(m) : true;
    evaluated_last = false;
    if (state.step % cfg.eval_interval == 0) {
      go = evaluate() && go;
      evaluated_last = true;
    }
    if (!go) break;
  }
  if (!evaluated_last && result.updates > 0) evaluate();
  if (hooks.log) hooks.log->flush();
  return result;
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

template <typename T>
double time_updates(Seq2Seq<T>& model, std::span<const Batch> micro_batches,
                    std::size_t n_updates, const OptConfig& cfg) {
  auto state = TrainState<T>::fresh(model.params(), 0);
  for (int i = 0; i < 3; ++i) train_update(model, micro_batches, state, cfg);
  std::vector<double> seconds;
  for (std::size_t i = 0; i < n_updates; ++i) {
    seconds.push_back(train_update(model, micro_batches, state, cfg).seconds);
  }
  return median(std::move(seconds));
}

template <typename T>
BenchmarkReport benchmark_updates(Seq2Seq<T>& model_a, Seq2Seq<T>& model_b,
                                  std::span<const Batch> micro_batches, std::size_t n_updates,
                                  const OptConfig& cfg) {
  if (n_updates < 5) throw UsageError("benchmark needs at least 5 timed updates");
  auto state_a = TrainState<T>::fresh(model_a.params(), 0);
  auto state_b = TrainState<T>::fresh(model_b.params(), 0);
  for (int i = 0; i < 3; ++i) {
    train_update(model_a, micro_batches, state_a, cfg);
    train_update(model_b, micro_batches, state_b, cfg);
  }
  // Alternating updates expose both models to the same machine load.
  std::vector<double> a, b;
  for (std::size_t i = 0; i < n_updates; ++i) {
    a.push_back(train_update(model_a, micro_batches, state_a, cfg).seconds);
    b.push_back(train_update(model_b, micro_batches, state_b, cfg).seconds);
  }
  return {median(std::move(a)), median(std::move(b))};
}

#define CHARTRANS_INSTANTIATE_TRAIN(T)                                                          \
  template struct TrainState<T>;                                                                \
  template NllLoss<T> nll_loss(const Tensor<T>&, std::span<const std::int32_t>, double);        \
  template void adam_step(ParamSet<T>&, TrainState<T>&, double, const OptConfig&);              \
  template UpdateMetrics train_update(Seq2Seq<T>&, std::span<const Batch>, TrainState<T>&,      \
                                      const OptConfig&);                                        \
  template double evaluate_loss(Seq2Seq<T>&, std::span<const Batch>);                           \
  template Checkpoint<T> make_checkpoint(const Seq2Seq<T>&, const TrainState<T>&,               \
                                         const std::map<std::string, std::string>&);            \
  template TrainState<T> restore_state(const Checkpoint<T>&, const ParamSet<T>&,                \
                                       std::uint64_t);                                          \
  template TrainResult train_loop(Seq2Seq<T>&, TrainState<T>&, const std::vector<EncodedPair>&, \
                                  const std::vector<EncodedPair>&, const OptConfig&,            \
                                  const TrainPaths&, const TrainHooks&);                        \
  template double time_updates(Seq2Seq<T>&, std::span<const Batch>, std::size_t,                \
                               const OptConfig&);                                               \
  template BenchmarkReport benchmark_updates(Seq2Seq<T>&, Seq2Seq<T>&, std::span<const Batch>,  \
                                             std::size_t, const OptConfig&);

CHARTRANS_INSTANTIATE_TRAIN(float)
CHARTRANS_INSTANTIATE_TRAIN(double)

}  // namespace chartrans
