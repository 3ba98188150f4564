#pragma once

// Training: label-smoothed NLL, Adam with the Noam schedule, gradient
// accumulation over micro-batches, checkpointing and resumption.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "chartrans/corpus.hpp"
#include "chartrans/model.hpp"

namespace chartrans {

struct OptConfig {
  double lr_factor = 2.0;
  std::size_t warmup_steps = 8000;
  double beta1 = 0.9;
  double beta2 = 0.998;
  double eps = 1e-9;
  double label_smoothing = 0.1;
  std::size_t max_updates = 100000;
  std::size_t accum_count = 4;
  std::size_t batch_tokens = kDefaultTokenBudget;
  std::size_t eval_interval = 100;

  // Character modes: 6144-token batches, accumulation 4, 100k updates.
  // Subword mode keeps the common Transformer-base recipe (4096 x 2).
  static OptConfig paper(ModelMode mode);
  // Small batches, short warmup and 2000 updates for single-core runs.
  static OptConfig desk(ModelMode mode);

  void validate() const;  // DataError on violation
};

template <typename T>
struct TrainState {
  std::size_t step = 0;
  std::size_t accum = 0;
  std::vector<std::vector<T>> m, v;  // one per parameter, same order
  std::uint64_t rng_seed = 13;
  double best_dev_loss = INFINITY;

  static TrainState fresh(const ParamSet<T>& params, std::uint64_t seed);
};

// Summed cross-entropy over non-PAD targets. `tokens` is the count of those.
template <typename T>
struct NllLoss {
  Tensor<T> sum;
  std::size_t tokens = 0;
};

// logits [B x Lt x V], targets B*Lt ids (PAD = ignore). DataError when every
// target is PAD.
template <typename T>
NllLoss<T> nll_loss(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                    double smoothing);

// factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5); step >= 1.
double noam_lr(std::size_t step, std::size_t d_model, double factor, std::size_t warmup);

// Adam with bias correction, then clears gradients. Parameters without a
// gradient are treated as having gradient zero.
template <typename T>
void adam_step(ParamSet<T>& params, TrainState<T>& state, double lr, const OptConfig& cfg);

struct UpdateMetrics {
  std::size_t step = 0;
  double loss_per_token = 0;
  double lr = 0;
  double seconds = 0;
  std::size_t tokens = 0;
};

// One optimizer update from a group of micro-batches. Each micro-batch loss
// is divided by the token total of the whole group before backward, so the
// accumulated gradient equals that of the concatenated batch.
template <typename T>
UpdateMetrics train_update(Seq2Seq<T>& model, std::span<const Batch> micro_batches,
                           TrainState<T>& state, const OptConfig& cfg);

// Mean per-token cross-entropy without smoothing.
template <typename T>
double evaluate_loss(Seq2Seq<T>& model, std::span<const Batch> batches);

// Endless sequence of micro-batches: each epoch is a fresh shuffle seeded by
// (seed, epoch). Position k is reproducible without replaying updates.
class BatchStream {
 public:
  BatchStream(std::vector<EncodedPair> pairs, std::size_t budget, std::size_t stride,
              std::uint64_t seed);
  const Batch& next();
  void seek(std::size_t position);
  std::size_t position() const { return position_; }

 private:
  void load_epoch(std::size_t epoch);
  std::vector<EncodedPair> pairs_;
  std::size_t budget_, stride_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::size_t offset_ = 0;
  std::size_t position_ = 0;
  std::vector<Batch> current_;
};

struct TrainPaths {
  std::string latest;  // empty = do not save
  std::string best;
};

struct TrainResult {
  std::size_t updates = 0;
  double last_loss = 0;
  double best_dev_loss = INFINITY;
  std::vector<std::pair<std::size_t, double>> dev_history;
};

template <typename T>
Checkpoint<T> make_checkpoint(const Seq2Seq<T>& model, const TrainState<T>& state,
                              const std::map<std::string, std::string>& meta);
// Restores TrainState from a checkpoint written by make_checkpoint; a
// checkpoint without optimizer state yields a fresh state.
template <typename T>
TrainState<T> restore_state(const Checkpoint<T>& ckpt, const ParamSet<T>& params,
                            std::uint64_t seed);

struct TrainHooks {
  std::ostream* log = nullptr;  // one tab-separated line per update
  // Called after every update; return false to stop early.
  std::function<bool(const UpdateMetrics&)> on_update;
  // Called after each dev evaluation.
  std::function<bool(std::size_t step, double dev_loss)> on_eval;
  std::map<std::string, std::string> meta;  // stored in every checkpoint
};

// Runs updates from state.step until cfg.max_updates. Dev loss is measured
// every eval_interval updates and at the end; "best" is written whenever it
// improves and "latest" after each evaluation.
template <typename T>
TrainResult train_loop(Seq2Seq<T>& model, TrainState<T>& state,
                       const std::vector<EncodedPair>& train, const std::vector<EncodedPair>& dev,
                       const OptConfig& cfg, const TrainPaths& paths, const TrainHooks& hooks);

std::string format_log_line(const UpdateMetrics& m);

// Median seconds per update over n_updates after 3 untimed warmup updates.
template <typename T>
double time_updates(Seq2Seq<T>& model, std::span<const Batch> micro_batches,
                    std::size_t n_updates, const OptConfig& cfg);

struct BenchmarkReport {
  double seconds_a = 0;
  double seconds_b = 0;
  double ratio() const { return seconds_a / seconds_b; }
};

// Both models get 3 warmup updates, then n_updates timed updates taken in
// alternation; each side reports its median.
template <typename T>
BenchmarkReport benchmark_updates(Seq2Seq<T>& model_a, Seq2Seq<T>& model_b,
                                  std::span<const Batch> micro_batches, std::size_t n_updates,
                                  const OptConfig& cfg);

}  // namespace chartrans
