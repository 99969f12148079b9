#pragma once

// CNN blocks -> Transformer blocks -> nonlinear projector.
//
// The same architecture backs both the trainable main network and the
// frozen target network; they differ only in the parameter values bound
// into an EncoderGraph and in the mode (train/eval) used for the pass.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "xlst/rng.hpp"
#include "xlst/tensor.hpp"

namespace xlst {

struct EncoderConfig {
  int input_dim = 8;
  std::vector<int> cnn_channels = {4};  // one entry per CNN block
  int downsample_factor = 2;
  int transformer_blocks = 2;
  int attention_dim = 32;
  int attention_heads = 4;
  int ffn_dim = 64;
  int projector_hidden_dim = 64;
  int projector_output_dim = 32;
  bool positional_encoding = true;
  double dropout = 0.1;  // transformer blocks only
  double batch_norm_momentum = 0.99;

  void validate() const;

  // Full-size network: 2 VGG blocks, 12 transformer blocks of width 512.
  static EncoderConfig reference_preset();
  // Small network for desk-scale experiments and tests.
  static EncoderConfig desk_preset();
};

template <typename Scalar>
using ParamMap = std::map<std::string, Matrix<Scalar>>;

template <typename Scalar>
struct EncoderParams {
  ParamMap<Scalar> weights;  // trainable
  ParamMap<Scalar> buffers;  // batch-norm running statistics
};

template <typename Scalar>
struct EmbeddingSequence {
  Matrix<Scalar> frames;  // T' x d
  int frame_stride = 2;
};

// Names and shapes of every trainable tensor, in initialization order.
std::vector<std::pair<std::string, std::pair<int, int>>> encoder_weight_schema(const EncoderConfig& config);
std::vector<std::pair<std::string, std::pair<int, int>>> encoder_buffer_schema(const EncoderConfig& config);

// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and norm shifts 0;
// norm scales 1; running mean 0 and running variance 1.
template <typename Scalar>
EncoderParams<Scalar> init_params(const EncoderConfig& config, std::uint64_t seed);

std::size_t parameter_count(const EncoderConfig& config);

// Throws StateError if params do not match the config-derived schema.
template <typename Scalar>
void check_params(const EncoderConfig& config, const EncoderParams<Scalar>& params);

template <typename To, typename From>
EncoderParams<To> cast_params(const EncoderParams<From>& params) {
  EncoderParams<To> out;
  for (const auto& [k, v] : params.weights) out.weights[k] = v.template cast<To>();
  for (const auto& [k, v] : params.buffers) out.buffers[k] = v.template cast<To>();
  return out;
}

// Binds one set of parameters onto a tape and runs the network stages.
// Parameters are added to the tape on first use, as variables when
// trainable and as constants otherwise.
template <typename Scalar>
class EncoderGraph {
 public:
  EncoderGraph(const EncoderConfig& config, const EncoderParams<Scalar>& params, Tape<Scalar>& tape,
               bool trainable);

  const Var<Scalar>& param(const std::string& name);

  // T x F -> floor(T/2) x attention_dim
  Var<Scalar> cnn_forward(const Var<Scalar>& x);
  // Pre-norm multi-head self-attention blocks. Dropout draws from rng in
  // train mode; rng may be null when dropout is zero or in eval mode.
  Var<Scalar> transformer_forward(const Var<Scalar>& h, bool train_mode, Rng* rng);
  // linear -> frame batch norm -> relu -> linear over stacked frames.
  // normalized, when given, receives the batch-norm output before relu.
  Var<Scalar> projector_forward(const Var<Scalar>& h, bool train_mode, BatchNormStats<Scalar>* stats,
                                Var<Scalar>* normalized = nullptr);

  // Full network over a batch. Each sequence passes the CNN and transformer
  // on its own; the projector sees all frames of the batch at once so that
  // batch-norm statistics pool over the batch. With freeze_batch_norm the
  // projector uses running statistics even in train mode.
  std::vector<Var<Scalar>> encode_batch(std::span<const Var<Scalar>> inputs, bool train_mode, Rng* rng,
                                        BatchNormStats<Scalar>* stats, bool freeze_batch_norm = false);

  // Gradients for every bound trainable parameter, zeros for the rest.
  ParamMap<Scalar> gradients() const;

  Tape<Scalar>& tape() { return tape_; }
  const EncoderConfig& config() const { return config_; }

 private:
  Var<Scalar> linear(const Var<Scalar>& x, const std::string& prefix);
  Var<Scalar> conv3x3(const Var<Scalar>& map, int frames, int bins, int in_ch, const std::string& prefix);
  Var<Scalar> dropout(const Var<Scalar>& x, bool train_mode, Rng* rng);

  const EncoderConfig& config_;
  const EncoderParams<Scalar>& params_;
  Tape<Scalar>& tape_;
  bool trainable_;
  std::map<std::string, Var<Scalar>> bound_;
};

// Eval-mode or train-mode pass over one sequence without gradients.
template <typename Scalar>
EmbeddingSequence<Scalar> encode(const EncoderConfig& config, const EncoderParams<Scalar>& params,
                                 const Matrix<Scalar>& x, bool train_mode = false, Rng* rng = nullptr);

// running <- momentum * running + (1 - momentum) * batch
template <typename Scalar>
void update_running_stats(EncoderParams<Scalar>& params, const BatchNormStats<Scalar>& stats, double momentum);

Matrix<double> sinusoidal_positions(int frames, int dim);

}  // namespace xlst
