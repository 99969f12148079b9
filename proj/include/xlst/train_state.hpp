#pragma once

// Plain state carried between training steps and persisted in checkpoints.

#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include "xlst/encoder.hpp"

namespace xlst {

template <typename Scalar>
struct OptimizerState {
  ParamMap<Scalar> m;  // first moments, by parameter name
  ParamMap<Scalar> v;  // second moments
  // Updates seen by each parameter; bias correction uses these so that a
  // parameter joining late (staged unfreezing) starts from its own step 1.
  std::map<std::string, std::int64_t> updates;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
struct EmaState {
  EncoderParams<Scalar> target;  // theta_o, weights and batch-norm buffers
  double lambda = 0.9999;
};

// Everything needed to resume a run at a step boundary.
template <typename Scalar>
struct Checkpoint {
  std::string kind;  // "supervised", "xlst" or "finetune"
  EncoderConfig encoder_config;
  EncoderParams<Scalar> encoder;
  ParamMap<Scalar> head;  // classifier or downstream head; may be empty
  OptimizerState<Scalar> optimizer;
  std::optional<EmaState<Scalar>> ema;
  std::int64_t step = 0;  // completed optimizer steps in the current round
  std::int64_t total_steps = 0;
  std::int64_t round = 0;  // offline self-training round
  std::string rng_state;
  std::string sampler_state;
  std::string config_hash;
};

}  // namespace xlst
