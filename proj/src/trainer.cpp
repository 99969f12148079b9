#include "xlst/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "xlst/error.hpp"
#include "xlst/losses.hpp"

namespace xlst {

// ---- schedule ----------------------------------------------------------

void TrainSchedule::validate() const {
  if (epochs < 0) throw ConfigError("schedule: epochs must be >= 0");
  if (!(lr > 0)) throw ConfigError("schedule: lr must be positive");
  if (warmup < 0 || hold < 0 || decay < 0) throw ConfigError("schedule: phase fractions must be >= 0");
  if (std::abs(warmup + hold + decay - 1.0) > 1e-9) {
    throw ConfigError("schedule: warmup + hold + decay must equal 1");
  }
  if (!(decay_floor_ratio > 0 && decay_floor_ratio <= 1)) {
    throw ConfigError("schedule: decay_floor_ratio must be in (0, 1]");
  }
}

TrainSchedule TrainSchedule::supervised_reference() { return {100, 1e-3, 0.2, 0.0, 0.8, 0.01}; }

TrainSchedule TrainSchedule::xlst_multi_reference() { return {50, 5e-4, 0.0, 0.5, 0.5, 0.01}; }

double lr_at(const TrainSchedule& s, double progress) {
  if (!(progress >= 0 && progress <= 1)) throw ContractError("lr_at: progress must be in [0, 1]");
  if (progress < s.warmup) return s.lr * progress / s.warmup;
  if (progress < s.warmup + s.hold || s.decay <= 0) return s.lr;
  const double u = std::min(1.0, (progress - s.warmup - s.hold) / s.decay);
  return s.lr * std::pow(s.decay_floor_ratio, u);
}

double lr_at(const TrainSchedule& s, std::int64_t step, std::int64_t total_steps) {
  if (step < 0 || step > total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  }
  if (total_steps == 0) return lr_at(s, 0.0);
  return lr_at(s, static_cast<double>(step) / static_cast<double>(total_steps));
}

// ---- Adam --------------------------------------------------------------

template <typename Scalar>
void adam_step(std::span<const ParamGroup<Scalar>> groups, OptimizerState<Scalar>& st, double lr,
               double max_grad_norm) {
  double sq = 0;
  for (const auto& g : groups) {
    for (const auto& [name, grad] : *g.grads) {
      if (!grad.allFinite()) throw TrainingDivergenceError("adam: non-finite gradient for " + name);
      auto it = g.params->find(name);
      if (it == g.params->end()) throw StateError("adam: gradient for unknown parameter " + name);
      if (it->second.rows() != grad.rows() || it->second.cols() != grad.cols()) {
        throw StateError("adam: gradient shape mismatch for " + name);
      }
      sq += grad.template cast<double>().squaredNorm();
    }
  }
  double clip = 1;
  if (max_grad_norm > 0 && std::sqrt(sq) > max_grad_norm) clip = max_grad_norm / std::sqrt(sq);

  ++st.step;
  const auto b1 = static_cast<Scalar>(st.beta1), b2 = static_cast<Scalar>(st.beta2);
  const auto eps = static_cast<Scalar>(st.eps), rate = static_cast<Scalar>(lr), scale = static_cast<Scalar>(clip);
  for (const auto& g : groups) {
    for (const auto& [name, raw] : *g.grads) {
      auto& p = g.params->at(name);
      auto& m = st.m[name];
      auto& v = st.v[name];
      if (m.size() == 0) m = Matrix<Scalar>::Zero(p.rows(), p.cols());
      if (v.size() == 0) v = Matrix<Scalar>::Zero(p.rows(), p.cols());
      if (m.rows() != p.rows() || m.cols() != p.cols() || v.rows() != p.rows() || v.cols() != p.cols()) {
        throw StateError("adam: moment shape mismatch for " + name);
      }
      const auto t = static_cast<double>(++st.updates[name]);
      const auto c1 = static_cast<Scalar>(1 - std::pow(st.beta1, t));
      const auto c2 = static_cast<Scalar>(1 - std::pow(st.beta2, t));
      const Matrix<Scalar> grad = clip == 1 ? raw : Matrix<Scalar>(raw * scale);
      m = b1 * m + (Scalar(1) - b1) * grad;
      v = b2 * v + (Scalar(1) - b2) * grad.cwiseProduct(grad);
      p.array() -= rate * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    }
  }
}

template <typename Scalar>
void adam_step(ParamMap<Scalar>& params, const ParamMap<Scalar>& grads, OptimizerState<Scalar>& st, double lr,
               double max_grad_norm) {
  const ParamGroup<Scalar> group{&params, &grads};
  adam_step<Scalar>(std::span<const ParamGroup<Scalar>>(&group, 1), st, lr, max_grad_norm);
}

// ---- moving average ----------------------------------------------------

namespace {

template <typename Scalar>
void blend(ParamMap<Scalar>& target, const ParamMap<Scalar>& main, Scalar a, Scalar b) {
  if (target.size() != main.size()) throw StateError("ema: target and main parameter sets differ");
  for (auto& [name, t] : target) {
    auto it = main.find(name);
    if (it == main.end()) throw StateError("ema: main network lacks " + name);
    if (it->second.rows() != t.rows() || it->second.cols() != t.cols()) {
      throw StateError("ema: shape mismatch for " + name);
    }
    t = a * t + b * it->second;
  }
}

}  // namespace

template <typename Scalar>
void ema_update(EmaState<Scalar>& ema, const EncoderParams<Scalar>& main) {
  if (!(ema.lambda >= 0 && ema.lambda <= 1)) throw ConfigError("ema: lambda must be in [0, 1]");
  const auto a = static_cast<Scalar>(ema.lambda);
  const auto b = static_cast<Scalar>(1 - ema.lambda);
  blend(ema.target.weights, main.weights, a, b);
  blend(ema.target.buffers, main.buffers, a, b);
}

// ---- balanced sampling -------------------------------------------------

CorpusSet CorpusSet::from_dataset(const Dataset& data, double tau) {
  std::map<int, LanguageCorpus> by_lang;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto& lc = by_lang[data[i].language];
    lc.language = data[i].language;
    lc.utterances.push_back(static_cast<int>(i));
    lc.size += static_cast<double>(data[i].features.rows());
  }
  CorpusSet out;
  out.tau = tau;
  for (auto& [id, lc] : by_lang) out.languages.push_back(std::move(lc));
  return out;
}

std::vector<double> language_probabilities(const CorpusSet& corpus) {
  if (!(corpus.tau >= 0)) throw ConfigError("sampler: tau must be >= 0");
  if (corpus.languages.empty()) throw DataError("sampler: empty corpus");
  std::vector<double> p;
  for (const auto& lc : corpus.languages) {
    if (lc.utterances.empty() || !(lc.size > 0)) {
      throw DataError("sampler: language " + std::to_string(lc.language) + " has no data");
    }
    p.push_back(std::pow(lc.size, corpus.tau));
  }
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  for (auto& x : p) x /= total;
  return p;
}

BalancedSampler::BalancedSampler(CorpusSet corpus, std::uint64_t seed)
    : corpus_(std::move(corpus)), probs_(language_probabilities(corpus_)), rng_(seed) {
  const std::size_t n = corpus_.languages.size();
  order_.resize(n);
  cursor_.assign(n, 0);
  draws_.assign(n, 0);
  for (std::size_t l = 0; l < n; ++l) reshuffle(l);
}

void BalancedSampler::reshuffle(std::size_t lang) {
  order_[lang] = corpus_.languages[lang].utterances;
  rng_.shuffle(order_[lang]);
  cursor_[lang] = 0;
}

SampleDraw BalancedSampler::next() {
  const double u = rng_.uniform();
  std::size_t lang = 0;
  double acc = probs_[0];
  while (u >= acc && lang + 1 < probs_.size()) acc += probs_[++lang];
  if (cursor_[lang] == order_[lang].size()) reshuffle(lang);
  ++draws_[lang];
  return {static_cast<int>(lang), order_[lang][cursor_[lang]++]};
}

std::vector<SampleDraw> BalancedSampler::batch(int size) {
  if (size < 1) throw ConfigError("sampler: batch size must be >= 1");
  std::vector<SampleDraw> out;
  out.reserve(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) out.push_back(next());
  return out;
}

std::string BalancedSampler::save_state() const {
  std::ostringstream os;
  os << rng_.save_state() << '\n' << order_.size() << '\n';
  for (std::size_t l = 0; l < order_.size(); ++l) {
    os << cursor_[l] << ' ' << draws_[l] << ' ' << order_[l].size();
    for (int i : order_[l]) os << ' ' << i;
    os << '\n';
  }
  return os.str();
}

void BalancedSampler::load_state(const std::string& state) {
  std::istringstream is(state);
  std::string rng_line;
  std::getline(is, rng_line);
  std::size_t n = 0;
  is >> n;
  if (!is || n != order_.size()) throw StateError("sampler: state does not match the corpus");
  auto order = order_;
  auto cursor = cursor_;
  auto draws = draws_;
  for (std::size_t l = 0; l < n; ++l) {
    std::size_t len = 0;
    is >> cursor[l] >> draws[l] >> len;
    if (!is || len != corpus_.languages[l].utterances.size() || cursor[l] > len) {
      throw StateError("sampler: state does not match the corpus");
    }
    order[l].resize(len);
    for (auto& i : order[l]) is >> i;
    if (!is) throw StateError("sampler: truncated state");
  }
  rng_.load_state(rng_line);
  order_ = std::move(order);
  cursor_ = std::move(cursor);
  draws_ = std::move(draws);
}

std::int64_t steps_per_epoch(std::size_t utterances, int batch_size) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  return static_cast<std::int64_t>((utterances + static_cast<std::size_t>(batch_size) - 1) /
                                   static_cast<std::size_t>(batch_size));
}

// ---- shared helpers ----------------------------------------------------

template <typename Scalar>
ParamMap<Scalar> init_linear(const std::string& prefix, int in, int out, std::uint64_t seed) {
  if (in < 1 || out < 1) throw ConfigError("init_linear: dimensions must be positive");
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Matrix<Scalar> w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
  ParamMap<Scalar> p;
  p[prefix + ".weight"] = std::move(w);
  p[prefix + ".bias"] = Matrix<Scalar>::Zero(1, out);
  return p;
}

namespace {

struct EpochLosses {
  std::map<std::int64_t, std::pair<double, std::int64_t>> sums;

  void add(std::int64_t epoch, double loss) {
    auto& [s, n] = sums[epoch];
    s += loss;
    ++n;
  }
  std::vector<double> means() const {
    std::vector<double> out;
    for (const auto& [e, sn] : sums) out.push_back(sn.first / static_cast<double>(sn.second));
    return out;
  }
};

template <typename Scalar>
Var<Scalar> mean_of(std::vector<Var<Scalar>>& terms) {
  Var<Scalar> total = terms.size() == 1 ? terms[0] : sum(concat_rows<Scalar>(terms));
  return scale(total, static_cast<Scalar>(1.0 / static_cast<double>(terms.size())));
}

int argmax_row(const auto& row) {
  Eigen::Index k = 0;
  row.maxCoeff(&k);
  return static_cast<int>(k);
}

Rng restore_rng(const std::string& state, std::uint64_t seed) {
  Rng rng(seed);
  if (!state.empty()) rng.load_state(state);
  return rng;
}

void require_labels(const Dataset& data, const char* who) {
  if (data.empty()) throw DataError(std::string(who) + ": empty dataset");
  for (const auto& u : data) {
    if (!u.has_labels()) throw DataError(std::string(who) + ": utterance " + u.id + " has no frame labels");
    if (static_cast<Eigen::Index>(u.frame_labels.size()) != u.features.rows()) {
      throw DataError(std::string(who) + ": utterance " + u.id + " label count differs from frame count");
    }
  }
}

}  // namespace

// ---- supervised stage --------------------------------------------------

template <typename Scalar>
Checkpoint<Scalar> init_supervised(const EncoderConfig& config, const Dataset& data, const SupervisedOptions& opt) {
  config.validate();
  opt.schedule.validate();
  if (opt.num_classes < 1) throw ConfigError("supervised: num_classes must be >= 1");
  require_labels(data, "supervised");
  Checkpoint<Scalar> st;
  st.kind = "supervised";
  st.encoder_config = config;
  st.encoder = init_params<Scalar>(config, opt.seed);
  st.head = init_linear<Scalar>("classifier", config.projector_output_dim, opt.num_classes, opt.seed + 1);
  st.total_steps = opt.schedule.epochs * steps_per_epoch(data.size(), opt.batch_size);
  return st;
}

template <typename Scalar>
TrainReport supervised_train(Checkpoint<Scalar>& st, const Dataset& data, const SupervisedOptions& opt,
                             const TrainHooks<Scalar>& hooks) {
  opt.schedule.validate();
  opt.augment.validate(st.encoder_config.input_dim);
  require_labels(data, "supervised");
  check_params(st.encoder_config, st.encoder);
  const auto& cfg = st.encoder_config;
  const int stride = cfg.downsample_factor;

  BalancedSampler sampler(CorpusSet::from_dataset(data, 1.0), opt.seed);
  if (!st.sampler_state.empty()) sampler.load_state(st.sampler_state);
  Rng rng = restore_rng(st.rng_state, opt.seed + 2);
  const std::int64_t per_epoch = steps_per_epoch(data.size(), opt.batch_size);

  TrainReport report;
  EpochLosses epochs;
  while (st.step < st.total_steps && (hooks.stop_after < 0 || st.step < hooks.stop_after)) {
    const double lr = lr_at(opt.schedule, st.step + 1, st.total_steps);
    const auto draws = sampler.batch(opt.batch_size);
    const std::size_t n = draws.size();

    std::vector<Matrix<Scalar>> views(n);
    std::vector<std::vector<int>> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& u = data[static_cast<std::size_t>(draws[i].utterance)];
      views[i] = augment(Matrix<Scalar>(u.features.cast<Scalar>()), opt.augment, AugmentStage::supervised, rng).first;
      labels[i] = downsample_labels(u.frame_labels, stride);
    }
    std::vector<int> partner(n);
    std::iota(partner.begin(), partner.end(), 0);
    std::vector<double> weight(n, 1.0);
    std::vector<Matrix<Scalar>> inputs = views;
    if (opt.augment.mixup && n > 1) {
      partner = random_derangement(static_cast<int>(n), rng);
      for (std::size_t i = 0; i < n; ++i) {
        auto [mixed, beta] = mixup(views[i], views[static_cast<std::size_t>(partner[i])], opt.augment.mixup_alpha, rng);
        inputs[i] = std::move(mixed);
        weight[i] = beta;
      }
    }

    Tape<Scalar> tape;
    EncoderGraph<Scalar> graph(cfg, st.encoder, tape, true);
    std::vector<Var<Scalar>> in;
    for (const auto& x : inputs) in.push_back(tape.constant(x));
    BatchNormStats<Scalar> stats;
    const auto emb = graph.encode_batch(in, true, &rng, &stats);
    const auto w = tape.variable(st.head.at("classifier.weight"));
    const auto b = tape.variable(st.head.at("classifier.bias"));

    std::vector<Var<Scalar>> losses;
    std::int64_t correct = 0, counted = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto logits = add_row(matmul(emb[i], w), b);
      const auto& y2 = labels[static_cast<std::size_t>(partner[i])];
      losses.push_back(frame_cross_entropy_mixup(logits, labels[i], y2, weight[i]));
      const auto& dominant = weight[i] >= 0.5 ? labels[i] : y2;
      for (std::size_t k = 0; k < dominant.size(); ++k) {
        correct += argmax_row(logits.value().row(static_cast<Eigen::Index>(k))) == dominant[k];
        ++counted;
      }
    }
    const auto loss = mean_of(losses);
    const double loss_value = static_cast<double>(loss.item());
    if (!std::isfinite(loss_value)) throw TrainingDivergenceError("supervised: non-finite loss");
    tape.backward(loss);

    const ParamMap<Scalar> enc_grads = graph.gradients();
    const ParamMap<Scalar> head_grads{{"classifier.weight", tape.grad(w)}, {"classifier.bias", tape.grad(b)}};
    const ParamGroup<Scalar> groups[] = {{&st.encoder.weights, &enc_grads}, {&st.head, &head_grads}};
    adam_step<Scalar>(groups, st.optimizer, lr, opt.max_grad_norm);
    update_running_stats(st.encoder, stats, cfg.batch_norm_momentum);
    ++st.step;

    StepMetrics m;
    m.step = st.step;
    m.epoch = (st.step - 1) / per_epoch + 1;
    m.lr = lr;
    m.loss = loss_value;
    m.frame_acc = counted > 0 ? static_cast<double>(correct) / static_cast<double>(counted) : not_measured;
    m.language_draws = sampler.draws_per_language();
    epochs.add(m.epoch, loss_value);
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
  report.epoch_losses = epochs.means();
  return report;
}

template <typename Scalar>
double frame_accuracy(const Checkpoint<Scalar>& model, const Dataset& data) {
  require_labels(data, "frame_accuracy");
  const auto& w = model.head.at("classifier.weight");
  const auto& b = model.head.at("classifier.bias");
  std::int64_t correct = 0, counted = 0;
  for (const auto& u : data) {
    const auto emb = encode(model.encoder_config, model.encoder, Matrix<Scalar>(u.features.cast<Scalar>()));
    const Matrix<Scalar> logits = (emb.frames * w).rowwise() + b.row(0);
    const auto y = downsample_labels(u.frame_labels, model.encoder_config.downsample_factor);
    for (std::size_t k = 0; k < y.size(); ++k) {
      correct += argmax_row(logits.row(static_cast<Eigen::Index>(k))) == y[k];
      ++counted;
    }
  }
  return counted > 0 ? static_cast<double>(correct) / static_cast<double>(counted) : 0.0;
}

// ---- cross-lingual self-training ---------------------------------------

template <typename Scalar>
double xlst_step(const EncoderConfig& cfg, EncoderParams<Scalar>& main, EmaState<Scalar>& ema,
                 std::span<const Matrix<Scalar>> batch, const AugmentSpec& spec, OptimizerState<Scalar>& optimizer,
                 double lr, Rng& rng, const XlstStepOptions& options) {
  if (batch.empty()) throw DataError("xlst_step: empty batch");
  std::vector<Matrix<Scalar>> targets;
  {
    Tape<Scalar> tape;
    EncoderGraph<Scalar> target(cfg, ema.target, tape, false);
    std::vector<Var<Scalar>> in;
    for (const auto& x : batch) in.push_back(tape.constant(x));
    for (const auto& z : target.encode_batch(in, false, nullptr, nullptr)) targets.push_back(z.value());
  }

  Tape<Scalar> tape;
  EncoderGraph<Scalar> graph(cfg, main, tape, true);
  std::vector<Var<Scalar>> in;
  for (const auto& x : batch) in.push_back(tape.constant(augment(x, spec, AugmentStage::xlst_main, rng).first));
  BatchNormStats<Scalar> stats;
  const auto emb = graph.encode_batch(in, true, &rng, &stats, options.freeze_main_batch_norm);
  std::vector<Var<Scalar>> losses;
  for (std::size_t i = 0; i < emb.size(); ++i) losses.push_back(similarity_loss(emb[i], targets[i], Reduction::mean));
  const auto loss = mean_of(losses);
  const double loss_value = static_cast<double>(loss.item());
  if (!std::isfinite(loss_value)) throw TrainingDivergenceError("xlst_step: non-finite loss");
  tape.backward(loss);

  adam_step(main.weights, graph.gradients(), optimizer, lr, options.max_grad_norm);
  if (!options.freeze_main_batch_norm) update_running_stats(main, stats, cfg.batch_norm_momentum);
  ema_update(ema, main);
  return loss_value;
}

template <typename Scalar>
Checkpoint<Scalar> init_xlst(const Checkpoint<Scalar>& trained, const Dataset& data, const XlstOptions& opt) {
  if (trained.kind != "supervised" && trained.kind != "xlst") {
    throw StateError("xlst: the target must start from a trained supervised or self-trained checkpoint, got '" +
                     trained.kind + "'");
  }
  if (!(opt.lambda >= 0 && opt.lambda <= 1)) throw ConfigError("xlst: lambda must be in [0, 1]");
  if (opt.offline_rounds < 1) throw ConfigError("xlst: offline_rounds must be >= 1");
  opt.schedule.validate();
  if (data.empty()) throw DataError("xlst: empty dataset");
  check_params(trained.encoder_config, trained.encoder);
  Checkpoint<Scalar> st;
  st.kind = "xlst";
  st.encoder_config = trained.encoder_config;
  st.encoder = trained.encoder;
  st.ema = EmaState<Scalar>{trained.encoder, opt.lambda};
  st.total_steps = opt.schedule.epochs * steps_per_epoch(data.size(), opt.batch_size);
  return st;
}

template <typename Scalar>
TrainReport xlst_pretrain(Checkpoint<Scalar>& st, const Dataset& data, const XlstOptions& opt,
                          const TrainHooks<Scalar>& hooks) {
  if (!st.ema) throw StateError("xlst: checkpoint carries no target network");
  opt.schedule.validate();
  opt.augment.validate(st.encoder_config.input_dim);
  if (opt.offline_rounds < 1) throw ConfigError("xlst: offline_rounds must be >= 1");
  if (opt.monitor_every > 0 && opt.probe == nullptr) throw ConfigError("xlst: collapse monitor needs a probe set");
  check_params(st.encoder_config, st.encoder);
  check_params(st.encoder_config, st.ema->target);
  const auto& cfg = st.encoder_config;

  BalancedSampler sampler(CorpusSet::from_dataset(data, opt.tau), opt.seed);
  if (!st.sampler_state.empty()) sampler.load_state(st.sampler_state);
  Rng rng = restore_rng(st.rng_state, opt.seed + 2);
  const std::int64_t per_epoch = steps_per_epoch(data.size(), opt.batch_size);
  const XlstStepOptions step_options{opt.freeze_main_batch_norm, opt.max_grad_norm};

  TrainReport report;
  EpochLosses epochs;
  auto monitor = [&]() {
    const double c = collapse_cosine(cfg, st.encoder, *opt.probe);
    report.max_collapse_cosine = std::isnan(report.max_collapse_cosine) ? c : std::max(report.max_collapse_cosine, c);
    if (c >= opt.collapse_threshold) report.collapse_detected = true;
    return c;
  };
  if (opt.monitor_every > 0 && st.step == 0 && st.round == 0) monitor();

  auto global_step = [&]() { return st.round * st.total_steps + st.step; };
  for (;;) {
    if (st.step == st.total_steps) {
      if (st.round + 1 >= opt.offline_rounds) break;
      st.ema->target = st.encoder;
      st.optimizer = OptimizerState<Scalar>{};
      st.step = 0;
      ++st.round;
      if (st.total_steps == 0) continue;
    }
    if (hooks.stop_after >= 0 && global_step() >= hooks.stop_after) break;

    const double lr = lr_at(opt.schedule, st.step + 1, st.total_steps);
    std::vector<Matrix<Scalar>> batch;
    for (const auto& d : sampler.batch(opt.batch_size)) {
      batch.push_back(data[static_cast<std::size_t>(d.utterance)].features.template cast<Scalar>());
    }
    const double loss = xlst_step<Scalar>(cfg, st.encoder, *st.ema, batch, opt.augment, st.optimizer, lr, rng,
                                          step_options);
    ++st.step;

    StepMetrics m;
    m.step = global_step();
    m.round = st.round;
    m.epoch = (st.step - 1) / per_epoch + 1;
    m.lr = lr;
    m.loss = loss;
    m.language_draws = sampler.draws_per_language();
    if (opt.monitor_every > 0 && (st.step % opt.monitor_every == 0 || st.step == st.total_steps)) {
      m.collapse_cosine = monitor();
    }
    epochs.add(st.round * opt.schedule.epochs + m.epoch, loss);
    report.last_loss = loss;
    ++report.steps_run;
    if (hooks.on_step) hooks.on_step(m);
    if (hooks.on_checkpoint && hooks.checkpoint_every > 0 && m.step % hooks.checkpoint_every == 0) {
      st.rng_state = rng.save_state();
      st.sampler_state = sampler.save_state();
      hooks.on_checkpoint(st);
    }
  }
  st.rng_state = rng.save_state();
  st.sampler_state = sampler.save_state();
  report.epoch_losses = epochs.means();
  return report;
}

template <typename Scalar>
double collapse_cosine(const EncoderConfig& cfg, const EncoderParams<Scalar>& params, const Dataset& probe) {
  std::map<int, RowVector<double>> sums;
  for (const auto& u : probe) {
    if (!u.has_labels()) throw DataError("collapse monitor: probe utterance " + u.id + " has no labels");
    const auto emb = encode(cfg, params, Matrix<Scalar>(u.features.cast<Scalar>()));
    const auto y = downsample_labels(u.frame_labels, cfg.downsample_factor);
    for (std::size_t k = 0; k < y.size() && static_cast<Eigen::Index>(k) < emb.frames.rows(); ++k) {
      auto& s = sums[y[k]];
      if (s.size() == 0) s = RowVector<double>::Zero(emb.frames.cols());
      s += emb.frames.row(static_cast<Eigen::Index>(k)).template cast<double>();
    }
  }
  if (sums.size() < 2) throw DataError("collapse monitor: probe must contain at least two phones");
  std::vector<RowVector<double>> dirs;
  for (const auto& [label, s] : sums) {
    const double n = s.norm();
    dirs.push_back(n > 0 ? RowVector<double>(s / n) : s);
  }
  double total = 0;
  std::int64_t pairs = 0;
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    for (std::size_t j = i + 1; j < dirs.size(); ++j) {
      total += dirs[i].dot(dirs[j]);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

#define XLST_INSTANTIATE(S)                                                                                       \
  template void adam_step<S>(std::span<const ParamGroup<S>>, OptimizerState<S>&, double, double);                \
  template void adam_step<S>(ParamMap<S>&, const ParamMap<S>&, OptimizerState<S>&, double, double);              \
  template void ema_update<S>(EmaState<S>&, const EncoderParams<S>&);                                            \
  template ParamMap<S> init_linear<S>(const std::string&, int, int, std::uint64_t);                              \
  template Checkpoint<S> init_supervised<S>(const EncoderConfig&, const Dataset&, const SupervisedOptions&);     \
  template TrainReport supervised_train<S>(Checkpoint<S>&, const Dataset&, const SupervisedOptions&,             \
                                           const TrainHooks<S>&);                                                \
  template double frame_accuracy<S>(const Checkpoint<S>&, const Dataset&);                                       \
  template double xlst_step<S>(const EncoderConfig&, EncoderParams<S>&, EmaState<S>&,                            \
                               std::span<const Matrix<S>>, const AugmentSpec&, OptimizerState<S>&, double, Rng&, \
                               const XlstStepOptions&);                                                          \
  template Checkpoint<S> init_xlst<S>(const Checkpoint<S>&, const Dataset&, const XlstOptions&);                 \
  template TrainReport xlst_pretrain<S>(Checkpoint<S>&, const Dataset&, const XlstOptions&, const TrainHooks<S>&); \
  template double collapse_cosine<S>(const EncoderConfig&, const EncoderParams<S>&, const Dataset&);

XLST_INSTANTIATE(float)
XLST_INSTANTIATE(double)

#undef XLST_INSTANTIATE

}  // namespace xlst
