#pragma once

// Run configuration in INI form. Parsing is strict: an unknown section or
// key, a malformed value or a repeated key is a ConfigError.

#include <cstdint>
#include <string>
#include <vector>

#include "xlst/augmenter.hpp"
#include "xlst/encoder.hpp"
#include "xlst/synth.hpp"
#include "xlst/trainer.hpp"

namespace xlst {

struct RunConfig {
  // [run]
  std::uint64_t seed = 0;
  int precision = 32;
  std::string out;  // empty: derived from the environment and the command

  EncoderConfig encoder;
  AugmentSpec augment;
  TrainSchedule schedule;

  // [train]
  int batch_size = 8;
  double max_grad_norm = 0;
  std::int64_t checkpoint_every = 0;

  // [data], used by synth-data
  BenchmarkConfig data;

  // [corpus]
  std::string corpus_dir;
  std::vector<int> languages;  // empty: every language the command can use

  // [xlst]
  std::string xlst_mode = "multi";  // "mono" or "multi"
  double lambda = 0.9999;
  double tau = 0.5;
  int offline_rounds = 1;
  bool freeze_main_batch_norm = false;
  std::int64_t monitor_every = 0;
  double collapse_threshold = 0.99;

  // [finetune]
  bool freeze_encoder = false;
  double head_only_fraction = 0.2;
  int vocab = 0;  // 0: inferred from the labels

  void validate() const;
};

// Defaults for a command: synth-data, pretrain-sup, pretrain-xlst,
// finetune or eval.
RunConfig default_config(const std::string& command);

// Applies the INI text on top of `base`.
RunConfig parse_config(const std::string& text, RunConfig base);

// Every key with its resolved value. parse_config(render_config(c), x)
// reproduces c exactly.
std::string render_config(const RunConfig& config);

// SHA-256 of the rendered config without the output directory, so runs
// that differ only in where they write share a hash.
std::string config_hash(const RunConfig& config);

std::vector<int> parse_int_list(const std::string& text);

}  // namespace xlst
