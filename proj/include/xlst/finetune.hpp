#pragma once

// Downstream phone recognition: a linear classifier over pairs of
// successive embedding frames trained with CTC on transcripts, greedy
// decoding, and phone error rate scoring.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "xlst/trainer.hpp"

namespace xlst {

// "downstream.weight" (2d x V+1) and "downstream.bias" (1 x V+1).
template <typename Scalar>
ParamMap<Scalar> init_downstream_head(int embedding_dim, int vocab, std::uint64_t seed);

// Frames (2k, 2k+1) are concatenated and mapped to V+1 logits; an odd last
// frame is dropped. T' x d -> floor(T'/2) x (V+1).
template <typename Scalar>
Var<Scalar> head_forward(const Var<Scalar>& weight, const Var<Scalar>& bias, const Var<Scalar>& embeddings);

template <typename Scalar>
Matrix<Scalar> head_forward(const ParamMap<Scalar>& head, const Matrix<Scalar>& embeddings);

// Head output frames for an input of `frames` feature frames.
int output_frames(const EncoderConfig& config, int frames);

struct FinetuneOptions {
  TrainSchedule schedule{40, 1e-3, 0.1, 0.4, 0.5, 0.01};
  AugmentSpec augment = [] {
    AugmentSpec s;
    s.mixup = false;
    return s;
  }();
  int batch_size = 8;
  int vocab = 0;                    // phones; CTC labels are 1..vocab
  bool freeze_encoder = false;      // head only for the whole run
  double head_only_fraction = 0.2;  // head only for this leading share of steps
  std::uint64_t seed = 0;
  double max_grad_norm = 0;
};

// Pretrained encoder (the main network of an XLST checkpoint) plus a fresh
// downstream head.
template <typename Scalar>
Checkpoint<Scalar> init_finetune(const Checkpoint<Scalar>& pretrained, const Dataset& data,
                                 const FinetuneOptions& options);

// CTC training. Utterances whose transcript cannot fit the head's output
// frames are skipped and counted in the report.
template <typename Scalar>
TrainReport finetune(Checkpoint<Scalar>& state, const Dataset& data, const FinetuneOptions& options,
                     const TrainHooks<Scalar>& hooks = {});

struct EditCounts {
  std::int64_t substitutions = 0;
  std::int64_t deletions = 0;
  std::int64_t insertions = 0;

  std::int64_t total() const { return substitutions + deletions + insertions; }
  EditCounts& operator+=(const EditCounts& o);
  bool operator==(const EditCounts&) const = default;
};

// Unit-cost Levenshtein alignment; on ties the backtrace prefers
// substitution (or match), then insertion, then deletion.
EditCounts edit_distance(const std::vector<int>& ref, const std::vector<int>& hyp);

struct UtteranceScore {
  std::string id;
  std::int64_t reference_length = 0;
  EditCounts counts;
  std::vector<int> hypothesis;  // phone indices
};

struct PerReport {
  EditCounts counts;
  std::int64_t reference_length = 0;
  std::vector<UtteranceScore> utterances;

  // Pooled (S + D + I) / reference length.
  double per() const;
};

// Maps an utterance to a phone index sequence.
using Recognizer = std::function<std::vector<int>(const Utterance&)>;

PerReport evaluate_per(const Recognizer& recognize, const Dataset& test);

// Greedy CTC decoding with the checkpoint's encoder (eval mode) and head.
template <typename Scalar>
std::vector<int> recognize(const Checkpoint<Scalar>& model, const Matrix<double>& features);

template <typename Scalar>
PerReport evaluate_per(const Checkpoint<Scalar>& model, const Dataset& test);

}  // namespace xlst
