#include "xlst/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "xlst/error.hpp"

namespace xlst {

namespace {

std::uint64_t mix_seed(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t set_seed(std::uint64_t seed, const std::string& name, int language) {
  std::uint64_t h = mix_seed(seed);
  for (char c : name) h = mix_seed(h ^ static_cast<unsigned char>(c));
  return mix_seed(h ^ static_cast<std::uint64_t>(language));
}

std::vector<int> pick(std::vector<int> from, int count, Rng& rng) {
  rng.shuffle(from);
  from.resize(static_cast<std::size_t>(std::min<int>(count, static_cast<int>(from.size()))));
  return from;
}

}  // namespace

void FamilyConfig::validate() const {
  if (languages < 1) throw ConfigError("family: languages must be >= 1");
  if (inventory < 2) throw ConfigError("family: inventory must be >= 2");
  if (prototypes < inventory) {
    throw ConfigError("family: pool of " + std::to_string(prototypes) + " prototypes cannot hold an inventory of " +
                      std::to_string(inventory));
  }
  if (!(overlap >= 0 && overlap <= 1)) throw ConfigError("family: overlap must be in [0, 1]");
  if (feature_dim < 1) throw ConfigError("family: feature_dim must be >= 1");
  if (!(noise >= 0)) throw ConfigError("family: noise must be >= 0");
  if (!(prototype_spread > 0)) throw ConfigError("family: prototype_spread must be positive");
  if (min_duration < 2 || max_duration < min_duration) {
    throw ConfigError("family: durations must satisfy 2 <= min_duration <= max_duration");
  }
  if (!(transition_concentration > 0)) throw ConfigError("family: transition_concentration must be positive");
}

PhoneFamily make_language_family(const FamilyConfig& c) {
  c.validate();
  Rng rng(mix_seed(c.seed));
  PhoneFamily fam;
  fam.pool.resize(c.prototypes, c.feature_dim);
  for (Eigen::Index i = 0; i < fam.pool.size(); ++i) fam.pool.data()[i] = rng.normal(0.0, c.prototype_spread);

  std::vector<int> all(static_cast<std::size_t>(c.prototypes));
  std::iota(all.begin(), all.end(), 0);
  const std::vector<int> base = pick(all, c.inventory, rng);
  std::vector<int> outside;
  for (int p : all) {
    if (std::find(base.begin(), base.end(), p) == base.end()) outside.push_back(p);
  }
  const int shared = static_cast<int>(std::ceil(c.overlap * c.inventory - 1e-9));

  for (int l = 0; l < c.languages; ++l) {
    LanguageSpec spec;
    spec.id = l;
    spec.noise = c.noise;
    if (l == 0) {
      spec.inventory = base;
    } else {
      spec.inventory = pick(base, shared, rng);
      for (int p : pick(outside, c.inventory - shared, rng)) spec.inventory.push_back(p);
      if (static_cast<int>(spec.inventory.size()) < c.inventory) {
        std::vector<int> rest;
        for (int p : base) {
          if (std::find(spec.inventory.begin(), spec.inventory.end(), p) == spec.inventory.end()) rest.push_back(p);
        }
        for (int p : pick(rest, c.inventory - static_cast<int>(spec.inventory.size()), rng)) {
          spec.inventory.push_back(p);
        }
      }
    }
    const auto n = static_cast<Eigen::Index>(spec.inventory.size());
    spec.means.resize(n, c.feature_dim);
    for (Eigen::Index p = 0; p < n; ++p) spec.means.row(p) = fam.pool.row(spec.inventory[static_cast<std::size_t>(p)]);
    spec.min_duration.assign(static_cast<std::size_t>(n), c.min_duration);
    spec.max_duration.assign(static_cast<std::size_t>(n), c.max_duration);
    spec.transitions = Matrix<double>::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (i != j) spec.transitions(i, j) = std::gamma_distribution<double>(c.transition_concentration)(rng.engine());
      }
      const double s = spec.transitions.row(i).sum();
      if (s > 0) {
        spec.transitions.row(i) /= s;
      } else {
        spec.transitions.row(i).setConstant(1.0 / static_cast<double>(n - 1));
        spec.transitions(i, i) = 0;
      }
    }
    fam.languages.push_back(std::move(spec));
  }
  return fam;
}

Utterance sample_utterance(const LanguageSpec& spec, int frames, Rng& rng, const std::string& id) {
  const auto n = static_cast<int>(spec.inventory.size());
  if (n < 2) throw ConfigError("sample_utterance: inventory too small");
  const int shortest = *std::min_element(spec.min_duration.begin(), spec.min_duration.end());
  if (frames < shortest) throw ConfigError("sample_utterance: utterance shorter than one phone");

  std::vector<std::pair<int, int>> segments;  // (phone, duration)
  int phone = static_cast<int>(rng.uniform_int(0, n - 1));
  int t = 0;
  while (t < frames) {
    const auto p = static_cast<std::size_t>(phone);
    int d = static_cast<int>(rng.uniform_int(spec.min_duration[p], spec.max_duration[p]));
    const int left = frames - t;
    if (d > left) {
      if (left >= spec.min_duration[p] || segments.empty()) {
        d = left;
      } else {
        segments.back().second += left;
        break;
      }
    }
    segments.emplace_back(phone, d);
    t += d;
    // next phone from the transition row
    const double u = rng.uniform();
    double acc = 0;
    int next = n - 1;
    for (int j = 0; j < n; ++j) {
      acc += spec.transitions(phone, j);
      if (u < acc) {
        next = j;
        break;
      }
    }
    if (next == phone) next = (phone + 1) % n;
    phone = next;
  }

  Utterance u;
  u.id = id;
  u.language = spec.id;
  u.features.resize(frames, spec.means.cols());
  Eigen::Index row = 0;
  for (const auto& [p, d] : segments) {
    for (int k = 0; k < d; ++k, ++row) {
      for (Eigen::Index f = 0; f < spec.means.cols(); ++f) {
        u.features(row, f) = spec.means(p, f) + (spec.noise > 0 ? rng.normal(0.0, spec.noise) : 0.0);
      }
      u.frame_labels.push_back(p);
    }
  }
  u.transcript = collapse_repeats(u.frame_labels);
  return u;
}

Utterance sample_utterance(const LanguageSpec& spec, int min_frames, int max_frames, Rng& rng,
                           const std::string& id) {
  if (min_frames < 1 || max_frames < min_frames) throw ConfigError("sample_utterance: bad frame bounds");
  return sample_utterance(spec, static_cast<int>(rng.uniform_int(min_frames, max_frames)), rng, id);
}

std::vector<int> nearest_prototype(const LanguageSpec& spec, const Matrix<double>& features) {
  if (features.cols() != spec.means.cols()) throw DimensionError("nearest_prototype: feature dimension mismatch");
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(features.rows()));
  for (Eigen::Index t = 0; t < features.rows(); ++t) {
    Eigen::Index best = 0;
    (spec.means.rowwise() - features.row(t)).rowwise().squaredNorm().minCoeff(&best);
    out.push_back(static_cast<int>(best));
  }
  return out;
}

double nearest_prototype_accuracy(const LanguageSpec& spec, const Dataset& data) {
  std::int64_t correct = 0, total = 0;
  for (const auto& u : data) {
    const auto guess = nearest_prototype(spec, u.features);
    for (std::size_t t = 0; t < guess.size(); ++t) correct += guess[t] == u.frame_labels[t];
    total += static_cast<std::int64_t>(guess.size());
  }
  if (total == 0) throw DataError("nearest_prototype_accuracy: no labeled frames");
  return static_cast<double>(correct) / static_cast<double>(total);
}

void BenchmarkConfig::validate() const {
  family.validate();
  if (supervised_utterances < 1 || heldout_utterances < 0 || unlabeled_per_language < 1 ||
      finetune_utterances < 1 || test_utterances < 1) {
    throw ConfigError("benchmark: set sizes must be positive");
  }
  if (min_frames < family.max_duration || max_frames < min_frames) {
    throw ConfigError("benchmark: need max_duration <= min_frames <= max_frames");
  }
}

Dataset make_set(const LanguageSpec& spec, const std::string& name, int count, int min_frames, int max_frames,
                 std::uint64_t seed) {
  Rng rng(set_seed(seed, name, spec.id));
  Dataset out;
  out.reserve(static_cast<std::size_t>(count));
  char id[64];
  for (int i = 0; i < count; ++i) {
    std::snprintf(id, sizeof id, "l%d-%s-%05d", spec.id, name.c_str(), i);
    out.push_back(sample_utterance(spec, min_frames, max_frames, rng, id));
  }
  return out;
}

Benchmark make_benchmark(const BenchmarkConfig& c) {
  c.validate();
  Benchmark b;
  b.family = make_language_family(c.family);
  const auto& langs = b.family.languages;
  const std::uint64_t s = c.family.seed;
  b.supervised = make_set(langs[0], "sup", c.supervised_utterances, c.min_frames, c.max_frames, s);
  b.heldout = make_set(langs[0], "heldout", c.heldout_utterances, c.min_frames, c.max_frames, s);
  for (const auto& spec : langs) {
    b.unlabeled.push_back(
        strip_labels(make_set(spec, "unlab", c.unlabeled_per_language, c.min_frames, c.max_frames, s)));
    b.finetune.push_back(make_set(spec, "ft", c.finetune_utterances, c.min_frames, c.max_frames, s));
    b.test.push_back(make_set(spec, "test", c.test_utterances, c.min_frames, c.max_frames, s));
  }
  return b;
}

}  // namespace xlst
