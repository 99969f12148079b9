#include "xlst/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <optional>
#include <ostream>
#include <set>

#include "CLI11.hpp"
#include "xlst/config.hpp"
#include "xlst/error.hpp"
#include "xlst/finetune.hpp"
#include "xlst/io.hpp"
#include "xlst/runlog.hpp"

namespace xlst {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct Args {
  std::string command;
  std::string config;
  std::string init;
  std::string resume;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> precision;
};

struct Run {
  Args args;
  RunConfig config;
  fs::path dir;
  std::string hash;
  std::ostream& out;
};

std::string step_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step-%08lld.ckpt", static_cast<long long>(step));
  return buf;
}

void write_json(const fs::path& path, const ordered_json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

fs::path corpus_file(const RunConfig& c, const std::string& name) {
  if (c.corpus_dir.empty()) throw ConfigError("corpus.dir is required");
  return fs::path(c.corpus_dir) / (name + ".tsv");
}

std::vector<int> languages_in(const Dataset& data) {
  std::set<int> s;
  for (const auto& u : data) s.insert(u.language);
  return {s.begin(), s.end()};
}

// Configured languages, or every language present except the
// high-resource language 0 (falling back to 0 when it is alone).
std::vector<int> target_languages(const RunConfig& c, const Dataset& data) {
  const auto present = languages_in(data);
  if (!c.languages.empty()) {
    for (int l : c.languages) {
      if (!std::binary_search(present.begin(), present.end(), l)) {
        throw DataError("language " + std::to_string(l) + " has no utterances in the corpus");
      }
    }
    return c.languages;
  }
  std::vector<int> out;
  for (int l : present) {
    if (l != 0) out.push_back(l);
  }
  return out.empty() ? present : out;
}

Dataset select_languages(const Dataset& data, const std::vector<int>& langs) {
  Dataset out;
  for (const auto& u : data) {
    if (std::find(langs.begin(), langs.end(), u.language) != langs.end()) out.push_back(u);
  }
  return out;
}

int max_label(const Dataset& data) {
  int m = -1;
  for (const auto& u : data) {
    for (int p : u.frame_labels) m = std::max(m, p);
    for (int p : u.transcript) m = std::max(m, p);
  }
  return m;
}

void check_feature_dim(const EncoderConfig& e, const Dataset& data) {
  for (const auto& u : data) {
    if (u.features.cols() != e.input_dim) {
      throw ConfigError("utterance " + u.id + " has " + std::to_string(u.features.cols()) +
                        " feature bins but the encoder expects " + std::to_string(e.input_dim));
    }
  }
}

ordered_json report_json(const PerReport& r, bool with_utterances) {
  ordered_json j;
  j["per"] = r.per();
  j["reference_length"] = r.reference_length;
  j["substitutions"] = r.counts.substitutions;
  j["deletions"] = r.counts.deletions;
  j["insertions"] = r.counts.insertions;
  if (with_utterances) {
    j["utterances"] = ordered_json::array();
    for (const auto& u : r.utterances) {
      ordered_json ju;
      ju["id"] = u.id;
      ju["reference_length"] = u.reference_length;
      ju["substitutions"] = u.counts.substitutions;
      ju["deletions"] = u.counts.deletions;
      ju["insertions"] = u.counts.insertions;
      ju["hypothesis"] = u.hypothesis;
      j["utterances"].push_back(std::move(ju));
    }
  }
  return j;
}

template <typename Scalar>
Checkpoint<Scalar> load_resume(const Run& run, const std::string& kind) {
  auto st = load_checkpoint<Scalar>(run.args.resume);
  if (st.kind != kind) throw StateError(run.args.resume + ": expected a " + kind + " checkpoint, got " + st.kind);
  if (st.config_hash != run.hash) {
    throw StateError(run.args.resume + ": checkpoint was written under a different config (hash " + st.config_hash +
                     ", now " + run.hash + ")");
  }
  return st;
}

template <typename Scalar>
TrainHooks<Scalar> checkpoint_hooks(const Run& run, const fs::path& dir) {
  TrainHooks<Scalar> hooks;
  hooks.checkpoint_every = run.config.checkpoint_every;
  hooks.on_checkpoint = [dir](const Checkpoint<Scalar>& c) {
    save_checkpoint(dir / "checkpoints" / step_name(c.round * c.total_steps + c.step), c);
  };
  return hooks;
}

std::int64_t global_step(std::int64_t round, std::int64_t total, std::int64_t step) { return round * total + step; }

// ---- commands ----------------------------------------------------------

void cmd_synth_data(Run& run) {
  auto& c = run.config;
  c.data.family.seed = c.seed;
  const auto b = make_benchmark(c.data);
  auto concat = [](const std::vector<Dataset>& sets) {
    Dataset all;
    for (const auto& s : sets) all.insert(all.end(), s.begin(), s.end());
    return all;
  };
  const std::vector<std::pair<std::string, Dataset>> sets = {{"supervised", b.supervised},
                                                             {"heldout", b.heldout},
                                                             {"unlabeled", concat(b.unlabeled)},
                                                             {"finetune", concat(b.finetune)},
                                                             {"test", concat(b.test)}};
  ordered_json summary;
  for (const auto& [name, data] : sets) {
    const auto manifest = write_corpus(data, run.dir, name);
    const auto hash = file_sha256(manifest);
    summary[name] = {{"manifest", manifest.filename().string()}, {"utterances", data.size()}, {"sha256", hash}};
    run.out << name << ": " << data.size() << " utterances, manifest sha256 " << hash << "\n";
  }
  write_json(run.dir / "summary.json", summary);
}

template <typename Scalar>
void cmd_pretrain_sup(Run& run) {
  const auto& c = run.config;
  const auto data = read_corpus(corpus_file(c, "supervised"));
  if (data.empty()) throw DataError("supervised corpus is empty");
  check_feature_dim(c.encoder, data);

  SupervisedOptions opt;
  opt.schedule = c.schedule;
  opt.augment = c.augment;
  opt.augment.rng_seed = c.seed;
  opt.batch_size = c.batch_size;
  opt.num_classes = c.vocab > 0 ? c.vocab : max_label(data) + 1;
  opt.seed = c.seed;
  opt.max_grad_norm = c.max_grad_norm;

  Checkpoint<Scalar> st;
  std::optional<MetricsLog> log;
  if (!run.args.resume.empty()) {
    st = load_resume<Scalar>(run, "supervised");
    log.emplace(run.dir / "metrics.jsonl", st.step);
  } else {
    st = init_supervised<Scalar>(c.encoder, data, opt);
    st.config_hash = run.hash;
    log.emplace(run.dir / "metrics.jsonl");
  }
  auto hooks = checkpoint_hooks<Scalar>(run, run.dir);
  hooks.on_step = [&](const StepMetrics& m) {
    auto j = step_record(m);
    j.erase("collapse_cosine");
    log->write(j);
  };
  const auto report = supervised_train(st, data, opt, hooks);
  save_checkpoint(run.dir / "final.ckpt", st);

  ordered_json summary;
  summary["steps"] = st.step;
  summary["last_loss"] = report.last_loss;
  const auto heldout_path = corpus_file(c, "heldout");
  if (fs::exists(heldout_path)) {
    const auto heldout = read_corpus(heldout_path);
    if (!heldout.empty()) summary["heldout_frame_acc"] = frame_accuracy(st, heldout);
  }
  summary["checkpoint_sha256"] = file_sha256(run.dir / "final.ckpt");
  write_json(run.dir / "summary.json", summary);
  run.out << summary.dump() << "\n";
}

template <typename Scalar>
void cmd_pretrain_xlst(Run& run, const Checkpoint<Scalar>* init) {
  const auto& c = run.config;
  const auto all = read_corpus(corpus_file(c, "unlabeled"));
  std::vector<int> langs;
  if (c.xlst_mode == "mono") {
    if (c.languages.size() != 1) throw ConfigError("xlst.mode = mono needs exactly one language in corpus.languages");
    langs = target_languages(c, all);
  } else {
    langs = c.languages.empty() ? languages_in(all) : target_languages(c, all);
  }
  const auto data = select_languages(all, langs);
  if (data.empty()) throw DataError("no un-annotated utterances for the selected languages");
  check_feature_dim(c.encoder, data);

  Dataset probe;
  XlstOptions opt;
  opt.schedule = c.schedule;
  opt.augment = c.augment;
  opt.augment.rng_seed = c.seed;
  opt.batch_size = c.batch_size;
  opt.lambda = c.lambda;
  opt.tau = c.tau;
  opt.offline_rounds = c.offline_rounds;
  opt.freeze_main_batch_norm = c.freeze_main_batch_norm;
  opt.seed = c.seed;
  opt.max_grad_norm = c.max_grad_norm;
  opt.monitor_every = c.monitor_every;
  opt.collapse_threshold = c.collapse_threshold;
  if (c.monitor_every > 0) {
    probe = read_corpus(corpus_file(c, "heldout"));
    opt.probe = &probe;
  }

  Checkpoint<Scalar> st;
  std::optional<MetricsLog> log;
  if (init == nullptr) {
    st = load_resume<Scalar>(run, "xlst");
    log.emplace(run.dir / "metrics.jsonl", global_step(st.round, st.total_steps, st.step));
  } else {
    st = init_xlst(*init, data, opt);
    st.config_hash = run.hash;
    log.emplace(run.dir / "metrics.jsonl");
  }

  const auto corpus = CorpusSet::from_dataset(data, c.tau);
  const auto probs = language_probabilities(corpus);
  std::vector<int> ids;
  for (const auto& l : corpus.languages) ids.push_back(l.language);
  const std::int64_t per_epoch = steps_per_epoch(data.size(), c.batch_size);

  auto hooks = checkpoint_hooks<Scalar>(run, run.dir);
  hooks.on_step = [&](const StepMetrics& m) {
    auto j = step_record(m);
    j.erase("frame_acc");
    log->write(j);
    const std::int64_t in_round = m.step - m.round * st.total_steps;
    if (in_round % per_epoch == 0 || in_round == st.total_steps) {
      ordered_json e;
      e["type"] = "epoch";
      e["step"] = m.step;
      e["round"] = m.round;
      e["epoch"] = m.epoch;
      e["languages"] = ids;
      e["probabilities"] = probs;
      e["draws"] = m.language_draws;
      log->write(e);
    }
  };
  const auto report = xlst_pretrain(st, data, opt, hooks);
  save_checkpoint(run.dir / "final.ckpt", st);

  ordered_json summary;
  summary["mode"] = c.xlst_mode;
  summary["languages"] = ids;
  summary["lambda"] = c.lambda;
  summary["steps"] = global_step(st.round, st.total_steps, st.step);
  summary["last_loss"] = report.last_loss;
  if (c.monitor_every > 0) {
    summary["max_collapse_cosine"] = report.max_collapse_cosine;
    summary["collapse_detected"] = report.collapse_detected;
  }
  summary["checkpoint_sha256"] = file_sha256(run.dir / "final.ckpt");
  write_json(run.dir / "summary.json", summary);
  run.out << summary.dump() << "\n";
}

template <typename Scalar>
void cmd_finetune(Run& run, const Checkpoint<Scalar>* pretrained) {
  const auto& c = run.config;
  const auto train_all = read_corpus(corpus_file(c, "finetune"));
  const auto test_all = read_corpus(corpus_file(c, "test"));
  const auto langs = target_languages(c, train_all);
  if (pretrained == nullptr && langs.size() != 1) {
    throw ConfigError("finetune --resume continues one language; set corpus.languages to it");
  }
  check_feature_dim(c.encoder, train_all);

  const bool resuming = pretrained == nullptr;
  std::optional<MetricsLog> log;
  ordered_json summary;
  summary["languages"] = ordered_json::array();
  double per_sum = 0;
  for (int lang : langs) {
    const auto train = filter_language(train_all, lang);
    const auto test = filter_language(test_all, lang);
    if (test.empty()) throw DataError("language " + std::to_string(lang) + " has no test utterances");
    FinetuneOptions opt;
    opt.schedule = c.schedule;
    opt.augment = c.augment;
    opt.augment.rng_seed = c.seed;
    opt.batch_size = c.batch_size;
    opt.vocab = c.vocab > 0 ? c.vocab : std::max(max_label(train), max_label(test)) + 1;
    opt.freeze_encoder = c.freeze_encoder;
    opt.head_only_fraction = c.head_only_fraction;
    opt.seed = c.seed;
    opt.max_grad_norm = c.max_grad_norm;

    const fs::path dir = run.dir / ("l" + std::to_string(lang));
    Checkpoint<Scalar> st;
    if (resuming) {
      st = load_resume<Scalar>(run, "finetune");
      log.emplace(run.dir / "metrics.jsonl", st.step);
    } else {
      st = init_finetune(*pretrained, train, opt);
      st.config_hash = run.hash;
      if (!log) log.emplace(run.dir / "metrics.jsonl");
    }
    auto hooks = checkpoint_hooks<Scalar>(run, dir);
    hooks.on_step = [&](const StepMetrics& m) {
      auto j = step_record(m);
      j.erase("frame_acc");
      j.erase("collapse_cosine");
      j["language"] = lang;
      log->write(j);
    };
    const auto train_report = finetune(st, train, opt, hooks);
    save_checkpoint(dir / "final.ckpt", st);

    const auto per = evaluate_per(st, test);
    auto j = report_json(per, true);
    j["language"] = lang;
    j["skipped_utterances"] = train_report.skipped_utterances;
    write_json(dir / "report.json", j);

    ordered_json row;
    row["language"] = lang;
    row["per"] = per.per();
    row["reference_length"] = per.reference_length;
    row["checkpoint_sha256"] = file_sha256(dir / "final.ckpt");
    summary["languages"].push_back(row);
    per_sum += per.per();
    char line[96];
    std::snprintf(line, sizeof(line), "language %d: PER %.2f%% over %lld phones\n", lang, 100 * per.per(),
                  static_cast<long long>(per.reference_length));
    run.out << line;
  }
  summary["average_per"] = per_sum / static_cast<double>(langs.size());
  write_json(run.dir / "summary.json", summary);
  char line[64];
  std::snprintf(line, sizeof(line), "avg: PER %.2f%%\n", 100 * summary["average_per"].get<double>());
  run.out << line;
}

template <typename Scalar>
void cmd_eval(Run& run, const Checkpoint<Scalar>& model) {
  const auto& c = run.config;
  if (model.kind != "finetune") throw StateError("eval needs a fine-tuned checkpoint, got " + model.kind);
  const auto test_all = read_corpus(corpus_file(c, "test"));
  if (c.languages.empty()) throw ConfigError("eval needs corpus.languages");
  const auto langs = target_languages(c, test_all);
  ordered_json summary;
  summary["model_sha256"] = file_sha256(run.args.init);
  summary["languages"] = ordered_json::array();
  for (int lang : langs) {
    const auto per = evaluate_per(model, filter_language(test_all, lang));
    auto j = report_json(per, true);
    j["language"] = lang;
    write_json(run.dir / ("eval-l" + std::to_string(lang) + ".json"), j);
    summary["languages"].push_back({{"language", lang}, {"per", per.per()}});
    char line[96];
    std::snprintf(line, sizeof(line), "language %d: PER %.2f%% over %lld phones\n", lang, 100 * per.per(),
                  static_cast<long long>(per.reference_length));
    run.out << line;
  }
  write_json(run.dir / "eval-summary.json", summary);
}

// ---- dispatch ----------------------------------------------------------

template <typename Scalar>
void dispatch(Run& run, const std::optional<Checkpoint<Scalar>>& input) {
  const auto& cmd = run.args.command;
  const Checkpoint<Scalar>* init = run.args.init.empty() ? nullptr : &*input;
  if (cmd == "pretrain-sup") cmd_pretrain_sup<Scalar>(run);
  else if (cmd == "pretrain-xlst") cmd_pretrain_xlst<Scalar>(run, init);
  else if (cmd == "finetune") cmd_finetune<Scalar>(run, init);
  else if (cmd == "eval") cmd_eval<Scalar>(run, *input);
}

template <typename Scalar>
void execute(Args& args, std::ostream& out) {
  RunConfig cfg = default_config(args.command);
  if (!args.config.empty()) cfg = parse_config(read_file(args.config), cfg);
  if (args.seed) cfg.seed = *args.seed;
  cfg.precision = std::is_same_v<Scalar, float> ? 32 : 64;

  // The encoder shape of a run that starts from a checkpoint is the
  // checkpoint's; the resolved config records it.
  std::optional<Checkpoint<Scalar>> input;
  const std::string& source = !args.init.empty() ? args.init : args.resume;
  if (!source.empty()) {
    input = load_checkpoint<Scalar>(source);
    cfg.encoder = input->encoder_config;
  }

  if (!args.out.empty()) cfg.out = args.out;
  if (cfg.out.empty()) {
    const char* root = std::getenv(out_root_env);
    cfg.out = (fs::path(root != nullptr && *root != '\0' ? root : "runs") / args.command).string();
  }
  cfg.validate();

  Run run{args, cfg, fs::path(cfg.out), config_hash(cfg), out};
  RunLock lock(run.dir);
  write_file_atomic(run.dir / "config.ini", render_config(cfg));
  if (args.command == "synth-data") cmd_synth_data(run);
  else dispatch<Scalar>(run, input);
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-lingual self-training on synthetic speech features"};
  app.require_subcommand(1);
  Args args;
  std::uint64_t seed = 0;
  int precision = 32;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"synth-data", "write a synthetic multilingual corpus"},
      {"pretrain-sup", "supervised pretraining on language 0"},
      {"pretrain-xlst", "self-training on un-annotated speech from a trained target"},
      {"finetune", "CTC fine-tuning per language, with PER on the test set"},
      {"eval", "PER of a fine-tuned model"}};
  std::map<std::string, std::pair<CLI::Option*, CLI::Option*>> flags;
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", args.config, "INI config file")->check(CLI::ExistingFile);
    sub->add_option("--out", args.out, "output directory");
    auto* s = sub->add_option("--seed", seed, "run seed");
    auto* p = sub->add_option("--precision", precision, "32 or 64")->check(CLI::IsMember({32, 64}));
    flags[name] = {s, p};
    if (name != "synth-data") {
      sub->add_option("--init", args.init, "checkpoint to start from")->check(CLI::ExistingFile);
      sub->add_option("--resume", args.resume, "checkpoint of this run to continue")->check(CLI::ExistingFile);
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  args.command = app.get_subcommands().front()->get_name();
  if (flags[args.command].first->count() > 0) args.seed = seed;
  if (flags[args.command].second->count() > 0) args.precision = precision;

  try {
    const bool needs_init = args.command == "pretrain-xlst" || args.command == "finetune" || args.command == "eval";
    if (!args.init.empty() && !args.resume.empty()) throw ConfigError("--init and --resume are exclusive");
    if (args.command == "pretrain-sup" && !args.init.empty()) throw ConfigError("pretrain-sup starts from scratch; use --resume");
    if (args.command == "eval" && !args.resume.empty()) throw ConfigError("eval takes the model with --init");
    if (needs_init && args.init.empty() && args.resume.empty()) {
      throw ConfigError(args.command + " needs --init" + (args.command == "eval" ? "" : " or --resume"));
    }
    // Precision follows the input checkpoint unless given.
    const std::string& source = !args.init.empty() ? args.init : args.resume;
    int bits = 32;
    if (args.precision) {
      bits = *args.precision;
    } else if (!args.config.empty()) {
      bits = parse_config(read_file(args.config), default_config(args.command)).precision;
    }
    if (!source.empty() && !args.precision) bits = checkpoint_precision(source);
    if (bits == 64) execute<double>(args, out);
    else execute<float>(args, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace xlst
