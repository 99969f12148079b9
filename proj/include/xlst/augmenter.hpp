#pragma once

// Random sequence augmenter: time-span masking, frequency-span masking and
// mixup. Masked entries are set to zero; unmasked entries are copied bit for
// bit.

#include <cstdint>
#include <utility>
#include <vector>

#include "xlst/rng.hpp"
#include "xlst/tensor.hpp"

namespace xlst {

struct AugmentSpec {
  int time_mask_len = 10;
  double time_mask_proportion = 0.40;
  int freq_num_windows = 2;
  int freq_max_width = 27;
  double mixup_alpha = 1.0;
  bool time_mask = true;
  bool freq_mask = true;
  bool mixup = true;
  std::uint64_t rng_seed = 0;

  // feature_dim < 0 skips the width check against F.
  void validate(int feature_dim = -1) const;
  static AugmentSpec all_off();
};

struct FreqBand {
  int start = 0;
  int width = 0;
  bool operator==(const FreqBand&) const = default;
};

struct AugmentRecord {
  std::vector<int> masked_frames;  // sorted, unique
  std::vector<FreqBand> masked_bands;
  int mixup_partner = -1;  // index within the batch, -1 when not mixed
  double mixup_weight = 1.0;
  bool operator==(const AugmentRecord&) const = default;
};

enum class AugmentStage { supervised, xlst_main, xlst_target };

// floor(proportion * T / len) distinct span starts, each masking up to len
// frames. Overlapping spans are allowed. Returns the sorted masked frames.
template <typename Scalar>
std::pair<Matrix<Scalar>, std::vector<int>> time_span_mask(const Matrix<Scalar>& x, int len, double proportion,
                                                           Rng& rng);

// num_windows bands, each width uniform on {0..max_width} and start uniform
// over the positions where the band fits.
template <typename Scalar>
std::pair<Matrix<Scalar>, std::vector<FreqBand>> freq_span_mask(const Matrix<Scalar>& x, int num_windows,
                                                                int max_width, Rng& rng);

// beta * x1 + (1 - beta) * x2 after zero-padding both to max(T1, T2) rows.
template <typename Scalar>
Matrix<Scalar> mix(const Matrix<Scalar>& x1, const Matrix<Scalar>& x2, double beta);

// mix() with beta ~ Beta(alpha, alpha).
template <typename Scalar>
std::pair<Matrix<Scalar>, double> mixup(const Matrix<Scalar>& x1, const Matrix<Scalar>& x2, double alpha, Rng& rng);

// Masking for one sequence. Mixup needs a partner and is applied by
// mixup_pairs at batch level; augment leaves it unset in the record.
template <typename Scalar>
std::pair<Matrix<Scalar>, AugmentRecord> augment(const Matrix<Scalar>& x, const AugmentSpec& spec,
                                                 AugmentStage stage, Rng& rng);

// Seeds a fresh stream from spec.rng_seed.
template <typename Scalar>
std::pair<Matrix<Scalar>, AugmentRecord> augment(const Matrix<Scalar>& x, const AugmentSpec& spec,
                                                 AugmentStage stage);

// Re-applies the masks of a record. With a partner sequence, the recorded
// mixup is applied afterwards to the masked input.
template <typename Scalar>
Matrix<Scalar> apply_record(const Matrix<Scalar>& x, const AugmentRecord& record,
                            const Matrix<Scalar>* partner = nullptr);

// Uniform random derangement of {0..n-1}; identity for n < 2.
std::vector<int> random_derangement(int n, Rng& rng);

}  // namespace xlst
