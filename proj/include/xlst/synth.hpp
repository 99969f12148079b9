#pragma once

// Synthetic multilingual corpora. A global pool of Gaussian phone
// prototypes is shared by a family of toy languages; each language walks a
// Markov chain over its own inventory and emits prototype mean plus
// isotropic noise for a random duration per phone.

#include <cstdint>
#include <string>
#include <vector>

#include "xlst/corpus.hpp"
#include "xlst/rng.hpp"

namespace xlst {

struct FamilyConfig {
  std::uint64_t seed = 0;
  int languages = 4;
  int prototypes = 40;   // global pool size P
  int inventory = 12;    // phones per language
  double overlap = 0.5;  // fraction of each inventory shared with language 0
  int feature_dim = 16;
  double noise = 0.3;              // per-coordinate standard deviation
  double prototype_spread = 0.35;  // per-coordinate standard deviation of prototype means
  int min_duration = 5;            // frames per phone
  int max_duration = 12;
  double transition_concentration = 0.5;  // gamma shape of transition weights

  void validate() const;
};

struct LanguageSpec {
  int id = 0;
  std::vector<int> inventory;      // global prototype ids; local phone p is inventory[p]
  Matrix<double> means;            // inventory x F
  std::vector<int> min_duration;   // per local phone
  std::vector<int> max_duration;
  Matrix<double> transitions;      // rows sum to 1, zero diagonal
  double noise = 0.3;
};

struct PhoneFamily {
  Matrix<double> pool;  // P x F prototype means
  std::vector<LanguageSpec> languages;
};

// Language 0 is the high-resource language. Each other language takes
// ceil(overlap * inventory) phones from language 0 and the rest from the
// pool outside language 0, falling back to language 0 only when the pool
// runs out.
PhoneFamily make_language_family(const FamilyConfig& config);

// Utterance of exactly `frames` frames; every phone segment is at least
// the phone's minimum duration long.
Utterance sample_utterance(const LanguageSpec& spec, int frames, Rng& rng, const std::string& id);
Utterance sample_utterance(const LanguageSpec& spec, int min_frames, int max_frames, Rng& rng,
                           const std::string& id);

// Nearest prototype mean per frame, the Bayes rule under isotropic noise
// with uniform priors.
std::vector<int> nearest_prototype(const LanguageSpec& spec, const Matrix<double>& features);
double nearest_prototype_accuracy(const LanguageSpec& spec, const Dataset& data);

struct BenchmarkConfig {
  FamilyConfig family;
  int supervised_utterances = 1000;  // language 0, labeled
  int heldout_utterances = 200;      // language 0, labeled
  int unlabeled_per_language = 2000;
  int finetune_utterances = 50;      // per language, labeled
  int test_utterances = 200;         // per language, labeled
  int min_frames = 40;
  int max_frames = 120;

  void validate() const;
};

struct Benchmark {
  PhoneFamily family;
  Dataset supervised;
  Dataset heldout;
  std::vector<Dataset> unlabeled;  // per language, no labels
  std::vector<Dataset> finetune;   // per language
  std::vector<Dataset> test;       // per language
};

// Every set draws from its own seed derived from the family seed, the set
// name and the language, so sets do not depend on each other's sizes.
Benchmark make_benchmark(const BenchmarkConfig& config);

Dataset make_set(const LanguageSpec& spec, const std::string& name, int count, int min_frames, int max_frames,
                 std::uint64_t seed);

}  // namespace xlst
