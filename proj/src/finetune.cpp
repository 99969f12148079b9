#include "xlst/finetune.hpp"

#include <cmath>
#include <limits>
#include <map>

#include "xlst/error.hpp"
#include "xlst/losses.hpp"

namespace xlst {

template <typename Scalar>
ParamMap<Scalar> init_downstream_head(int embedding_dim, int vocab, std::uint64_t seed) {
  if (vocab < 1) throw ConfigError("downstream head: vocab must be >= 1");
  return init_linear<Scalar>("downstream", 2 * embedding_dim, vocab + 1, seed);
}

template <typename Scalar>
Var<Scalar> head_forward(const Var<Scalar>& weight, const Var<Scalar>& bias, const Var<Scalar>& embeddings) {
  const Eigen::Index frames = embeddings.rows(), d = embeddings.cols();
  if (frames < 2) throw InputTooShortError("head_forward: need at least 2 embedding frames, got " +
                                           std::to_string(frames));
  if (weight.rows() != 2 * d) {
    throw DimensionError("head_forward: weight expects input " + std::to_string(weight.rows()) + ", got 2 x " +
                         std::to_string(d));
  }
  const Eigen::Index pairs = frames / 2;
  const auto even = pairs * 2 == frames ? embeddings : slice_rows(embeddings, 0, pairs * 2);
  return add_row(matmul(reshape(even, pairs, 2 * d), weight), bias);
}

template <typename Scalar>
Matrix<Scalar> head_forward(const ParamMap<Scalar>& head, const Matrix<Scalar>& embeddings) {
  Tape<Scalar> tape;
  return head_forward(tape.constant(head.at("downstream.weight")), tape.constant(head.at("downstream.bias")),
                      tape.constant(embeddings))
      .value();
}

int output_frames(const EncoderConfig& config, int frames) { return frames / config.downsample_factor / 2; }

namespace {

bool fits(const EncoderConfig& config, const Utterance& u) {
  const int frames = static_cast<int>(u.features.rows());
  return frames >= 2 * config.downsample_factor &&
         ctc_min_frames(ctc_targets(u.transcript)) <= output_frames(config, frames);
}

}  // namespace

template <typename Scalar>
Checkpoint<Scalar> init_finetune(const Checkpoint<Scalar>& pretrained, const Dataset& data,
                                 const FinetuneOptions& opt) {
  opt.schedule.validate();
  if (opt.vocab < 1) throw ConfigError("finetune: vocab must be >= 1");
  if (!(opt.head_only_fraction >= 0 && opt.head_only_fraction <= 1)) {
    throw ConfigError("finetune: head_only_fraction must be in [0, 1]");
  }
  check_params(pretrained.encoder_config, pretrained.encoder);
  Checkpoint<Scalar> st;
  st.kind = "finetune";
  st.encoder_config = pretrained.encoder_config;
  st.encoder = pretrained.encoder;
  st.head = init_downstream_head<Scalar>(pretrained.encoder_config.projector_output_dim, opt.vocab, opt.seed);
  std::size_t usable = 0;
  for (const auto& u : data) usable += fits(st.encoder_config, u);
  st.total_steps = opt.schedule.epochs * steps_per_epoch(usable, opt.batch_size);
  return st;
}

template <typename Scalar>
TrainReport finetune(Checkpoint<Scalar>& st, const Dataset& data, const FinetuneOptions& opt,
                     const TrainHooks<Scalar>& hooks) {
  opt.schedule.validate();
  opt.augment.validate(st.encoder_config.input_dim);
  check_params(st.encoder_config, st.encoder);
  const auto& cfg = st.encoder_config;

  TrainReport report;
  Dataset usable;
  for (const auto& u : data) {
    if (u.transcript.empty()) {
      throw DataError("finetune: utterance " + u.id + " has no transcript");
    }
    for (int p : u.transcript) {
      if (p < 0 || p >= opt.vocab) throw LabelError("finetune: phone " + std::to_string(p) + " outside vocabulary");
    }
    if (fits(cfg, u)) {
      usable.push_back(u);
    } else {
      ++report.skipped_utterances;
    }
  }
  if (usable.empty()) throw DataError("finetune: no utterance fits its transcript");
  const std::int64_t per_epoch = steps_per_epoch(usable.size(), opt.batch_size);

  BalancedSampler sampler(CorpusSet::from_dataset(usable, 1.0), opt.seed);
  if (!st.sampler_state.empty()) sampler.load_state(st.sampler_state);
  Rng rng(opt.seed + 2);
  if (!st.rng_state.empty()) rng.load_state(st.rng_state);
  const auto head_only_steps =
      static_cast<std::int64_t>(std::ceil(opt.head_only_fraction * static_cast<double>(st.total_steps)));

  std::map<std::int64_t, std::pair<double, std::int64_t>> epochs;
  while (st.step < st.total_steps && (hooks.stop_after < 0 || st.step < hooks.stop_after)) {
    const bool frozen = opt.freeze_encoder || st.step < head_only_steps;
    const double lr = lr_at(opt.schedule, st.step + 1, st.total_steps);
    const auto draws = sampler.batch(opt.batch_size);

    Tape<Scalar> tape;
    EncoderGraph<Scalar> graph(cfg, st.encoder, tape, !frozen);
    std::vector<Var<Scalar>> in;
    std::vector<std::vector<int>> targets;
    for (const auto& d : draws) {
      const auto& u = usable[static_cast<std::size_t>(d.utterance)];
      Matrix<Scalar> x = u.features.template cast<Scalar>();
      in.push_back(tape.constant(augment(x, opt.augment, AugmentStage::supervised, rng).first));
      targets.push_back(ctc_targets(u.transcript));
    }
    BatchNormStats<Scalar> stats;
    const auto emb = graph.encode_batch(in, !frozen, frozen ? nullptr : &rng, &stats);
    const auto w = tape.variable(st.head.at("downstream.weight"));
    const auto b = tape.variable(st.head.at("downstream.bias"));
    std::vector<Var<Scalar>> losses;
    for (std::size_t i = 0; i < emb.size(); ++i) losses.push_back(ctc_loss(head_forward(w, b, emb[i]), targets[i]));
    Var<Scalar> loss = losses.size() == 1 ? losses[0] : sum(concat_rows<Scalar>(losses));
    loss = scale(loss, static_cast<Scalar>(1.0 / static_cast<double>(losses.size())));
    const double loss_value = static_cast<double>(loss.item());
    if (!std::isfinite(loss_value)) throw TrainingDivergenceError("finetune: non-finite loss");
    tape.backward(loss);

    const ParamMap<Scalar> head_grads{{"downstream.weight", tape.grad(w)}, {"downstream.bias", tape.grad(b)}};
    if (frozen) {
      adam_step(st.head, head_grads, st.optimizer, lr, opt.max_grad_norm);
    } else {
      const ParamMap<Scalar> enc_grads = graph.gradients();
      const ParamGroup<Scalar> groups[] = {{&st.encoder.weights, &enc_grads}, {&st.head, &head_grads}};
      adam_step<Scalar>(groups, st.optimizer, lr, opt.max_grad_norm);
      update_running_stats(st.encoder, stats, cfg.batch_norm_momentum);
    }
    ++st.step;

    StepMetrics m;
    m.step = st.step;
    m.epoch = (st.step - 1) / per_epoch + 1;
    m.lr = lr;
    m.loss = loss_value;
    m.language_draws = sampler.draws_per_language();
    auto& [s, n] = epochs[m.epoch];
    s += loss_value;
    ++n;
    report.last_loss = loss_value;
    ++report.steps_run;
    if (hooks.on_step) hooks.on_step(m);
    if (hooks.on_checkpoint && hooks.checkpoint_every > 0 && st.step % hooks.checkpoint_every == 0) {
      st.rng_state = rng.save_state();
      st.sampler_state = sampler.save_state();
      hooks.on_checkpoint(st);
    }
  }
  st.rng_state = rng.save_state();
  st.sampler_state = sampler.save_state();
  for (const auto& [e, sn] : epochs) report.epoch_losses.push_back(sn.first / static_cast<double>(sn.second));
  return report;
}

EditCounts& EditCounts::operator+=(const EditCounts& o) {
  substitutions += o.substitutions;
  deletions += o.deletions;
  insertions += o.insertions;
  return *this;
}

EditCounts edit_distance(const std::vector<int>& ref, const std::vector<int>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::vector<std::int64_t>> d(n + 1, std::vector<std::int64_t>(m + 1, 0));
  for (std::size_t i = 0; i <= n; ++i) d[i][0] = static_cast<std::int64_t>(i);
  for (std::size_t j = 0; j <= m; ++j) d[0][j] = static_cast<std::int64_t>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      d[i][j] = std::min({d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]), d[i][j - 1] + 1, d[i - 1][j] + 1});
    }
  }
  EditCounts c;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])) {
      c.substitutions += ref[i - 1] != hyp[j - 1];
      --i;
      --j;
    } else if (j > 0 && d[i][j] == d[i][j - 1] + 1) {
      ++c.insertions;
      --j;
    } else {
      ++c.deletions;
      --i;
    }
  }
  return c;
}

double PerReport::per() const {
  if (reference_length > 0) return static_cast<double>(counts.total()) / static_cast<double>(reference_length);
  return counts.total() == 0 ? 0.0 : std::numeric_limits<double>::infinity();
}

PerReport evaluate_per(const Recognizer& recognize_fn, const Dataset& test) {
  if (test.empty()) throw DataError("evaluate_per: empty test set");
  PerReport report;
  for (const auto& u : test) {
    UtteranceScore s;
    s.id = u.id;
    s.hypothesis = recognize_fn(u);
    s.reference_length = static_cast<std::int64_t>(u.transcript.size());
    s.counts = edit_distance(u.transcript, s.hypothesis);
    report.counts += s.counts;
    report.reference_length += s.reference_length;
    report.utterances.push_back(std::move(s));
  }
  return report;
}

template <typename Scalar>
std::vector<int> recognize(const Checkpoint<Scalar>& model, const Matrix<double>& features) {
  const auto emb = encode(model.encoder_config, model.encoder, Matrix<Scalar>(features.cast<Scalar>()));
  if (emb.frames.rows() < 2) return {};
  auto labels = ctc_greedy_decode(head_forward(model.head, emb.frames));
  for (auto& l : labels) --l;
  return labels;
}

template <typename Scalar>
PerReport evaluate_per(const Checkpoint<Scalar>& model, const Dataset& test) {
  return evaluate_per([&](const Utterance& u) { return recognize(model, u.features); }, test);
}

#define XLST_INSTANTIATE(S)                                                                                 \
  template ParamMap<S> init_downstream_head<S>(int, int, std::uint64_t);                                   \
  template Var<S> head_forward<S>(const Var<S>&, const Var<S>&, const Var<S>&);                            \
  template Matrix<S> head_forward<S>(const ParamMap<S>&, const Matrix<S>&);                                \
  template Checkpoint<S> init_finetune<S>(const Checkpoint<S>&, const Dataset&, const FinetuneOptions&);   \
  template TrainReport finetune<S>(Checkpoint<S>&, const Dataset&, const FinetuneOptions&, const TrainHooks<S>&); \
  template std::vector<int> recognize<S>(const Checkpoint<S>&, const Matrix<double>&);                     \
  template PerReport evaluate_per<S>(const Checkpoint<S>&, const Dataset&);

XLST_INSTANTIATE(float)
XLST_INSTANTIATE(double)

#undef XLST_INSTANTIATE

}  // namespace xlst
