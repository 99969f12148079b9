#include "xlst/encoder.hpp"

#include <cmath>

namespace xlst {

void EncoderConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v < 1) throw ConfigError(std::string("encoder: ") + what + " must be >= 1");
  };
  positive(input_dim, "input_dim");
  if (cnn_channels.empty()) throw ConfigError("encoder: at least one CNN block is required");
  for (int c : cnn_channels) positive(c, "cnn channel count");
  if (downsample_factor != 2) throw ConfigError("encoder: downsample_factor must be 2");
  if (transformer_blocks < 0) throw ConfigError("encoder: transformer_blocks must be >= 0");
  positive(attention_dim, "attention_dim");
  positive(attention_heads, "attention_heads");
  if (attention_dim % attention_heads != 0) {
    throw ConfigError("encoder: attention_dim must be divisible by attention_heads");
  }
  positive(ffn_dim, "ffn_dim");
  positive(projector_hidden_dim, "projector_hidden_dim");
  positive(projector_output_dim, "projector_output_dim");
  if (dropout < 0 || dropout >= 1) throw ConfigError("encoder: dropout must be in [0, 1)");
  if (batch_norm_momentum < 0 || batch_norm_momentum > 1) {
    throw ConfigError("encoder: batch_norm_momentum must be in [0, 1]");
  }
}

EncoderConfig EncoderConfig::reference_preset() {
  EncoderConfig c;
  c.input_dim = 83;
  c.cnn_channels = {64, 128};
  c.transformer_blocks = 12;
  c.attention_dim = 512;
  c.attention_heads = 8;
  c.ffn_dim = 2048;
  c.projector_hidden_dim = 2048;
  c.projector_output_dim = 256;
  return c;
}

EncoderConfig EncoderConfig::desk_preset() {
  return EncoderConfig{};
}

std::vector<std::pair<std::string, std::pair<int, int>>> encoder_weight_schema(const EncoderConfig& c) {
  c.validate();
  std::vector<std::pair<std::string, std::pair<int, int>>> s;
  int in_ch = 1;
  for (std::size_t b = 0; b < c.cnn_channels.size(); ++b) {
    const int out_ch = c.cnn_channels[b];
    const std::string p = "cnn." + std::to_string(b) + ".";
    s.push_back({p + "conv1.weight", {9 * in_ch, out_ch}});
    s.push_back({p + "conv1.bias", {1, out_ch}});
    s.push_back({p + "conv2.weight", {9 * out_ch, out_ch}});
    s.push_back({p + "conv2.bias", {1, out_ch}});
    in_ch = out_ch;
  }
  const int a = c.attention_dim;
  s.push_back({"cnn.proj.weight", {c.input_dim * in_ch, a}});
  s.push_back({"cnn.proj.bias", {1, a}});
  for (int l = 0; l < c.transformer_blocks; ++l) {
    const std::string p = "transformer." + std::to_string(l) + ".";
    s.push_back({p + "ln1.gamma", {1, a}});
    s.push_back({p + "ln1.beta", {1, a}});
    for (const char* m : {"q", "k", "v", "o"}) {
      s.push_back({p + "attn." + m + ".weight", {a, a}});
      s.push_back({p + "attn." + m + ".bias", {1, a}});
    }
    s.push_back({p + "ln2.gamma", {1, a}});
    s.push_back({p + "ln2.beta", {1, a}});
    s.push_back({p + "ffn.fc1.weight", {a, c.ffn_dim}});
    s.push_back({p + "ffn.fc1.bias", {1, c.ffn_dim}});
    s.push_back({p + "ffn.fc2.weight", {c.ffn_dim, a}});
    s.push_back({p + "ffn.fc2.bias", {1, a}});
  }
  s.push_back({"transformer.final_ln.gamma", {1, a}});
  s.push_back({"transformer.final_ln.beta", {1, a}});
  const int h = c.projector_hidden_dim;
  s.push_back({"projector.fc1.weight", {a, h}});
  s.push_back({"projector.fc1.bias", {1, h}});
  s.push_back({"projector.bn.gamma", {1, h}});
  s.push_back({"projector.bn.beta", {1, h}});
  s.push_back({"projector.fc2.weight", {h, c.projector_output_dim}});
  s.push_back({"projector.fc2.bias", {1, c.projector_output_dim}});
  return s;
}

std::vector<std::pair<std::string, std::pair<int, int>>> encoder_buffer_schema(const EncoderConfig& c) {
  return {{"projector.bn.running_mean", {1, c.projector_hidden_dim}},
          {"projector.bn.running_var", {1, c.projector_hidden_dim}}};
}

std::size_t parameter_count(const EncoderConfig& config) {
  std::size_t n = 0;
  for (const auto& [name, shape] : encoder_weight_schema(config)) {
    n += static_cast<std::size_t>(shape.first) * static_cast<std::size_t>(shape.second);
  }
  return n;
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

template <typename Scalar>
EncoderParams<Scalar> init_params(const EncoderConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  EncoderParams<Scalar> p;
  for (const auto& [name, shape] : encoder_weight_schema(config)) {
    const auto [rows, cols] = shape;
    Matrix<Scalar> m;
    if (ends_with(name, ".gamma")) {
      m = Matrix<Scalar>::Ones(rows, cols);
    } else if (ends_with(name, ".weight")) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
      m.resize(rows, cols);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
    } else {
      m = Matrix<Scalar>::Zero(rows, cols);
    }
    p.weights.emplace(name, std::move(m));
  }
  for (const auto& [name, shape] : encoder_buffer_schema(config)) {
    const auto [rows, cols] = shape;
    p.buffers.emplace(name, ends_with(name, "running_var") ? Matrix<Scalar>::Ones(rows, cols)
                                                           : Matrix<Scalar>::Zero(rows, cols));
  }
  return p;
}

template <typename Scalar>
void check_params(const EncoderConfig& config, const EncoderParams<Scalar>& params) {
  auto check = [](const auto& schema, const ParamMap<Scalar>& m, const char* kind) {
    if (m.size() != schema.size()) {
      throw StateError(std::string("encoder ") + kind + ": expected " + std::to_string(schema.size()) +
                       " tensors, found " + std::to_string(m.size()));
    }
    for (const auto& [name, shape] : schema) {
      auto it = m.find(name);
      if (it == m.end()) throw StateError(std::string("encoder ") + kind + ": missing " + name);
      if (it->second.rows() != shape.first || it->second.cols() != shape.second) {
        throw StateError(std::string("encoder ") + kind + ": wrong shape for " + name);
      }
      if (!it->second.allFinite()) throw StateError(std::string("encoder ") + kind + ": non-finite " + name);
    }
  };
  check(encoder_weight_schema(config), params.weights, "weights");
  check(encoder_buffer_schema(config), params.buffers, "buffers");
}

Matrix<double> sinusoidal_positions(int frames, int dim) {
  Matrix<double> pe(frames, dim);
  for (int t = 0; t < frames; ++t) {
    for (int i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / dim);
      pe(t, i) = (i % 2 == 0) ? std::sin(t * rate) : std::cos(t * rate);
    }
  }
  return pe;
}

template <typename Scalar>
EncoderGraph<Scalar>::EncoderGraph(const EncoderConfig& config, const EncoderParams<Scalar>& params,
                                   Tape<Scalar>& tape, bool trainable)
    : config_(config), params_(params), tape_(tape), trainable_(trainable) {
  config_.validate();
}

template <typename Scalar>
const Var<Scalar>& EncoderGraph<Scalar>::param(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  auto src = params_.weights.find(name);
  if (src == params_.weights.end()) throw StateError("encoder: unknown parameter " + name);
  Var<Scalar> v = trainable_ ? tape_.variable(src->second) : tape_.constant(src->second);
  return bound_.emplace(name, v).first->second;
}

template <typename Scalar>
Var<Scalar> EncoderGraph<Scalar>::linear(const Var<Scalar>& x, const std::string& prefix) {
  return add_row(matmul(x, param(prefix + ".weight")), param(prefix + ".bias"));
}

// map: (frames*bins) x in_ch, rows ordered (t, f). Same-padded 3x3 kernel.
template <typename Scalar>
Var<Scalar> EncoderGraph<Scalar>::conv3x3(const Var<Scalar>& map, int frames, int bins, int in_ch,
                                          const std::string& prefix) {
  const Eigen::Index rows = static_cast<Eigen::Index>(frames) * bins;
  const Eigen::Index cols = 9 * in_ch;
  std::vector<Eigen::Index> index(static_cast<std::size_t>(rows * cols));
  std::size_t k = 0;
  for (int t = 0; t < frames; ++t) {
    for (int f = 0; f < bins; ++f) {
      for (int dt = -1; dt <= 1; ++dt) {
        for (int df = -1; df <= 1; ++df) {
          const int tt = t + dt, ff = f + df;
          const bool inside = tt >= 0 && tt < frames && ff >= 0 && ff < bins;
          for (int c = 0; c < in_ch; ++c) {
            index[k++] = inside ? (static_cast<Eigen::Index>(tt) * bins + ff) * in_ch + c : -1;
          }
        }
      }
    }
  }
  auto patches = gather(map, std::move(index), rows, cols);
  return relu(linear(patches, prefix));
}

template <typename Scalar>
Var<Scalar> EncoderGraph<Scalar>::cnn_forward(const Var<Scalar>& x) {
  const int frames = static_cast<int>(x.rows());
  const int bins = static_cast<int>(x.cols());
  if (bins != config_.input_dim) {
    throw DimensionError("cnn_forward: expected " + std::to_string(config_.input_dim) + " feature bins, got " +
                         std::to_string(bins));
  }
  if (frames < 2) throw InputTooShortError("cnn_forward: need at least 2 frames, got " + std::to_string(frames));
  Var<Scalar> map = reshape(x, static_cast<Eigen::Index>(frames) * bins, 1);
  int in_ch = 1;
  for (std::size_t b = 0; b < config_.cnn_channels.size(); ++b) {
    const std::string p = "cnn." + std::to_string(b) + ".";
    map = conv3x3(map, frames, bins, in_ch, p + "conv1");
    in_ch = config_.cnn_channels[b];
    map = conv3x3(map, frames, bins, in_ch, p + "conv2");
  }
  // 2x max-pool over time; a trailing odd frame is dropped.
  const int out_frames = frames / 2;
  const Eigen::Index plane = static_cast<Eigen::Index>(bins) * in_ch;
  std::vector<Eigen::Index> index(static_cast<std::size_t>(out_frames * plane));
  const Scalar* v = map.value().data();
  for (int t = 0; t < out_frames; ++t) {
    for (Eigen::Index j = 0; j < plane; ++j) {
      const Eigen::Index a = (2 * static_cast<Eigen::Index>(t)) * plane + j;
      const Eigen::Index b = a + plane;
      index[static_cast<std::size_t>(t * plane + j)] = v[b] > v[a] ? b : a;
    }
  }
  Var<Scalar> pooled = gather(map, std::move(index), out_frames, plane);
  Var<Scalar> h = linear(pooled, "cnn.proj");
  if (config_.positional_encoding) {
    h = add_constant(h, Matrix<Scalar>(sinusoidal_positions(out_frames, config_.attention_dim).cast<Scalar>()));
  }
  return h;
}

template <typename Scalar>
Var<Scalar> EncoderGraph<Scalar>::dropout(const Var<Scalar>& x, bool train_mode, Rng* rng) {
  if (!train_mode || config_.dropout <= 0) return x;
  if (rng == nullptr) throw ContractError("dropout in train mode needs an rng");
  const double keep = 1.0 - config_.dropout;
  Matrix<Scalar> mask(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = rng->uniform() < keep ? static_cast<Scalar>(1.0 / keep) : Scalar(0);
  }
  return mul_constant(x, mask);
}

template <typename Scalar>
Var<Scalar> EncoderGraph<Scalar>::transformer_forward(const Var<Scalar>& h_in, bool train_mode, Rng* rng) {
  const int a = config_.attention_dim;
  const int heads = config_.attention_heads;
  const int dh = a / heads;
  if (h_in.cols() != a) throw DimensionError("transformer_forward: width mismatch");
  const Scalar inv_sqrt = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dh)));
  Var<Scalar> h = h_in;
  for (int l = 0; l < config_.transformer_blocks; ++l) {
    const std::string p = "transformer." + std::to_string(l) + ".";
    Var<Scalar> n = layer_norm_rows(h, param(p + "ln1.gamma"), param(p + "ln1.beta"));
    Var<Scalar> q = linear(n, p + "attn.q");
    Var<Scalar> k = linear(n, p + "attn.k");
    Var<Scalar> v = linear(n, p + "attn.v");
    std::vector<Var<Scalar>> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int hd = 0; hd < heads; ++hd) {
      Var<Scalar> qh = slice_cols(q, hd * dh, dh);
      Var<Scalar> kh = slice_cols(k, hd * dh, dh);
      Var<Scalar> vh = slice_cols(v, hd * dh, dh);
      Var<Scalar> att = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
      outs.push_back(matmul(att, vh));
    }
    Var<Scalar> mixed = linear(concat_cols<Scalar>(outs), p + "attn.o");
    h = add(h, dropout(mixed, train_mode, rng));
    Var<Scalar> n2 = layer_norm_rows(h, param(p + "ln2.gamma"), param(p + "ln2.beta"));
    Var<Scalar> ff = linear(relu(linear(n2, p + "ffn.fc1")), p + "ffn.fc2");
    h = add(h, dropout(ff, train_mode, rng));
  }
  return layer_norm_rows(h, param("transformer.final_ln.gamma"), param("transformer.final_ln.beta"));
}

template <typename Scalar>
Var<Scalar> EncoderGraph<Scalar>::projector_forward(const Var<Scalar>& h, bool train_mode,
                                                    BatchNormStats<Scalar>* stats, Var<Scalar>* normalized) {
  Var<Scalar> hidden = linear(h, "projector.fc1");
  const RowVector<Scalar> running_mean = params_.buffers.at("projector.bn.running_mean").row(0);
  const RowVector<Scalar> running_var = params_.buffers.at("projector.bn.running_var").row(0);
  hidden = batch_norm_frames(hidden, param("projector.bn.gamma"), param("projector.bn.beta"), train_mode,
                             running_mean, running_var, stats);
  if (normalized != nullptr) *normalized = hidden;
  return linear(relu(hidden), "projector.fc2");
}

template <typename Scalar>
std::vector<Var<Scalar>> EncoderGraph<Scalar>::encode_batch(std::span<const Var<Scalar>> inputs, bool train_mode,
                                                            Rng* rng, BatchNormStats<Scalar>* stats,
                                                            bool freeze_batch_norm) {
  std::vector<Var<Scalar>> hidden;
  hidden.reserve(inputs.size());
  for (const auto& x : inputs) {
    if (!x.value().allFinite()) throw NumericError("encode: non-finite input");
    hidden.push_back(transformer_forward(cnn_forward(x), train_mode, rng));
  }
  Var<Scalar> stacked = hidden.size() == 1 ? hidden[0] : concat_rows<Scalar>(hidden);
  Var<Scalar> projected = projector_forward(stacked, train_mode && !freeze_batch_norm, stats);
  if (hidden.size() == 1) return {projected};
  std::vector<Var<Scalar>> out;
  out.reserve(hidden.size());
  Eigen::Index r = 0;
  for (const auto& hd : hidden) {
    out.push_back(slice_rows(projected, r, hd.rows()));
    r += hd.rows();
  }
  return out;
}

template <typename Scalar>
ParamMap<Scalar> EncoderGraph<Scalar>::gradients() const {
  ParamMap<Scalar> g;
  for (const auto& [name, value] : params_.weights) {
    auto it = bound_.find(name);
    g[name] = (it != bound_.end() && trainable_) ? tape_.grad(it->second)
                                                 : Matrix<Scalar>::Zero(value.rows(), value.cols());
  }
  return g;
}

template <typename Scalar>
EmbeddingSequence<Scalar> encode(const EncoderConfig& config, const EncoderParams<Scalar>& params,
                                 const Matrix<Scalar>& x, bool train_mode, Rng* rng) {
  Tape<Scalar> tape;
  EncoderGraph<Scalar> graph(config, params, tape, false);
  std::vector<Var<Scalar>> in{tape.constant(x)};
  auto out = graph.encode_batch(in, train_mode, rng, nullptr);
  return EmbeddingSequence<Scalar>{out[0].value(), config.downsample_factor};
}

template <typename Scalar>
void update_running_stats(EncoderParams<Scalar>& params, const BatchNormStats<Scalar>& stats, double momentum) {
  auto& mean = params.buffers.at("projector.bn.running_mean");
  auto& var = params.buffers.at("projector.bn.running_var");
  const Scalar m = static_cast<Scalar>(momentum);
  mean = m * mean + (Scalar(1) - m) * stats.mean;
  var = m * var + (Scalar(1) - m) * stats.var;
}

#define XLST_INSTANTIATE(S)                                                                                  \
  template EncoderParams<S> init_params<S>(const EncoderConfig&, std::uint64_t);                            \
  template void check_params<S>(const EncoderConfig&, const EncoderParams<S>&);                             \
  template class EncoderGraph<S>;                                                                           \
  template EmbeddingSequence<S> encode<S>(const EncoderConfig&, const EncoderParams<S>&, const Matrix<S>&, \
                                          bool, Rng*);                                                      \
  template void update_running_stats<S>(EncoderParams<S>&, const BatchNormStats<S>&, double);

XLST_INSTANTIATE(float)
XLST_INSTANTIATE(double)

#undef XLST_INSTANTIATE

}  // namespace xlst
