#pragma once

// Optimization machinery shared by all training stages, the supervised
// stage that produces the first target network, and cross-lingual
// self-training (twin forward passes, similarity loss, moving-average
// target refinement).

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "xlst/augmenter.hpp"
#include "xlst/corpus.hpp"
#include "xlst/train_state.hpp"

namespace xlst {

// (epochs, lr, warmup, hold, decay): linear warmup from 0 to lr, constant
// hold, then exponential decay from lr to lr * decay_floor_ratio. The
// three phase fractions must sum to one.
struct TrainSchedule {
  int epochs = 10;
  double lr = 1e-3;
  double warmup = 0.2;
  double hold = 0.0;
  double decay = 0.8;
  double decay_floor_ratio = 0.01;

  void validate() const;

  static TrainSchedule supervised_reference();  // (100, 1e-3, 20%, 0, 80%)
  static TrainSchedule xlst_multi_reference();  // (50, 5e-4, 0, 50%, 50%)
};

// Learning rate at a position in [0, 1] of the run.
double lr_at(const TrainSchedule& schedule, double progress);
// Learning rate at step in [0, total_steps].
double lr_at(const TrainSchedule& schedule, std::int64_t step, std::int64_t total_steps);

template <typename Scalar>
struct ParamGroup {
  ParamMap<Scalar>* params;
  const ParamMap<Scalar>* grads;  // parameters absent here are left untouched
};

// One bias-corrected Adam update over all groups. Gradients are checked
// before anything is modified; a non-finite entry raises
// TrainingDivergenceError naming the parameter. max_grad_norm > 0 rescales
// the joint gradient to at most that L2 norm.
template <typename Scalar>
void adam_step(std::span<const ParamGroup<Scalar>> groups, OptimizerState<Scalar>& state, double lr,
               double max_grad_norm = 0);

template <typename Scalar>
void adam_step(ParamMap<Scalar>& params, const ParamMap<Scalar>& grads, OptimizerState<Scalar>& state, double lr,
               double max_grad_norm = 0);

// theta_o <- a * theta_o + b * theta for weights and batch-norm buffers,
// with a = Scalar(lambda) and b = Scalar(1 - lambda).
template <typename Scalar>
void ema_update(EmaState<Scalar>& ema, const EncoderParams<Scalar>& main);

struct LanguageCorpus {
  int language = 0;
  std::vector<int> utterances;  // indices into the owning dataset
  double size = 0;              // frames
};

struct CorpusSet {
  std::vector<LanguageCorpus> languages;
  double tau = 0.5;

  // Groups utterances by language, in increasing language id.
  static CorpusSet from_dataset(const Dataset& data, double tau);
};

// p_l proportional to size_l ^ tau.
std::vector<double> language_probabilities(const CorpusSet& corpus);

struct SampleDraw {
  int language = 0;  // position in CorpusSet::languages
  int utterance = 0;
};

// Draws a language from p_l, then the next utterance of that language's
// current shuffled pass; a language is reshuffled when its pass ends.
class BalancedSampler {
 public:
  BalancedSampler(CorpusSet corpus, std::uint64_t seed);

  SampleDraw next();
  std::vector<SampleDraw> batch(int size);

  const std::vector<double>& probabilities() const { return probs_; }
  const std::vector<std::int64_t>& draws_per_language() const { return draws_; }
  const CorpusSet& corpus() const { return corpus_; }

  std::string save_state() const;
  void load_state(const std::string& state);

 private:
  void reshuffle(std::size_t lang);

  CorpusSet corpus_;
  std::vector<double> probs_;
  Rng rng_;
  std::vector<std::vector<int>> order_;
  std::vector<std::size_t> cursor_;
  std::vector<std::int64_t> draws_;
};

constexpr double not_measured = std::numeric_limits<double>::quiet_NaN();

struct StepMetrics {
  std::int64_t step = 0;  // steps completed, counted across offline rounds
  std::int64_t epoch = 0;
  std::int64_t round = 0;
  double lr = 0;
  double loss = 0;
  double frame_acc = not_measured;
  double collapse_cosine = not_measured;
  std::vector<std::int64_t> language_draws;
};

template <typename Scalar>
struct TrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(const Checkpoint<Scalar>&)> on_checkpoint;
  std::int64_t checkpoint_every = 0;  // steps; 0 disables
  std::int64_t stop_after = -1;       // stop once this many steps are done
};

struct TrainReport {
  std::vector<double> epoch_losses;  // mean loss of every epoch touched by this call
  double last_loss = not_measured;
  double max_collapse_cosine = not_measured;
  bool collapse_detected = false;
  std::int64_t steps_run = 0;
  std::int64_t skipped_utterances = 0;
};

std::int64_t steps_per_epoch(std::size_t utterances, int batch_size);

// ---- supervised stage --------------------------------------------------

struct SupervisedOptions {
  TrainSchedule schedule;
  AugmentSpec augment;  // time mask, frequency mask and mixup all used
  int batch_size = 8;
  int num_classes = 0;
  std::uint64_t seed = 0;
  double max_grad_norm = 0;
};

// Fresh encoder plus linear frame classifier ("classifier.weight",
// "classifier.bias") on top of the embeddings.
template <typename Scalar>
Checkpoint<Scalar> init_supervised(const EncoderConfig& config, const Dataset& data, const SupervisedOptions& options);

// Frame-level cross entropy against frame labels. Continues from
// state.step, so a loaded checkpoint resumes the run.
template <typename Scalar>
TrainReport supervised_train(Checkpoint<Scalar>& state, const Dataset& data, const SupervisedOptions& options,
                             const TrainHooks<Scalar>& hooks = {});

// Eval-mode frame accuracy of the encoder plus classifier head.
template <typename Scalar>
double frame_accuracy(const Checkpoint<Scalar>& model, const Dataset& data);

// ---- cross-lingual self-training ---------------------------------------

struct XlstStepOptions {
  bool freeze_main_batch_norm = false;  // main network uses running statistics
  double max_grad_norm = 0;
};

// Target pass (eval mode, clean input) -> main pass (train mode, masked
// input) -> similarity loss -> backward -> Adam -> running statistics ->
// moving-average update of the target. Returns the batch loss, the mean
// over utterances of the per-frame mean loss.
template <typename Scalar>
double xlst_step(const EncoderConfig& config, EncoderParams<Scalar>& main, EmaState<Scalar>& ema,
                 std::span<const Matrix<Scalar>> batch, const AugmentSpec& spec, OptimizerState<Scalar>& optimizer,
                 double lr, Rng& rng, const XlstStepOptions& options = {});

struct XlstOptions {
  TrainSchedule schedule;
  AugmentSpec augment;  // time and frequency masks on the main view
  int batch_size = 8;
  double lambda = 0.9999;
  double tau = 0.5;
  // Above 1: run the schedule this many times, copying the main network
  // into the target between runs (offline refinement, normally lambda = 1).
  int offline_rounds = 1;
  bool freeze_main_batch_norm = false;
  std::uint64_t seed = 0;
  double max_grad_norm = 0;
  // Collapse monitor over labeled probe utterances; 0 disables.
  std::int64_t monitor_every = 0;
  const Dataset* probe = nullptr;
  double collapse_threshold = 0.99;
};

// Main and target networks both start from the encoder of a trained
// checkpoint (kind "supervised" or "xlst").
template <typename Scalar>
Checkpoint<Scalar> init_xlst(const Checkpoint<Scalar>& trained, const Dataset& data, const XlstOptions& options);

template <typename Scalar>
TrainReport xlst_pretrain(Checkpoint<Scalar>& state, const Dataset& data, const XlstOptions& options,
                          const TrainHooks<Scalar>& hooks = {});

// Mean pairwise cosine between the per-phone centroids of eval-mode
// embeddings. Probe labels are treated as phone identities.
template <typename Scalar>
double collapse_cosine(const EncoderConfig& config, const EncoderParams<Scalar>& params, const Dataset& probe);

// Linear map with U(-1/sqrt(in), 1/sqrt(in)) weights and zero bias, stored
// as prefix + ".weight" (in x out) and prefix + ".bias" (1 x out).
template <typename Scalar>
ParamMap<Scalar> init_linear(const std::string& prefix, int in, int out, std::uint64_t seed);

}  // namespace xlst
