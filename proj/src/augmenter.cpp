#include "xlst/augmenter.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "xlst/error.hpp"

namespace xlst {

void AugmentSpec::validate(int feature_dim) const {
  if (time_mask_len < 1) throw ConfigError("augment: time_mask_len must be >= 1");
  if (!(time_mask_proportion >= 0 && time_mask_proportion <= 1)) {
    throw ConfigError("augment: time_mask_proportion must be in [0, 1]");
  }
  if (freq_num_windows < 0) throw ConfigError("augment: freq_num_windows must be >= 0");
  if (freq_max_width < 0) throw ConfigError("augment: freq_max_width must be >= 0");
  if (feature_dim >= 0 && freq_mask && freq_max_width >= feature_dim) {
    throw ConfigError("augment: freq_max_width " + std::to_string(freq_max_width) +
                      " must be smaller than the feature dimension " + std::to_string(feature_dim));
  }
  if (!(mixup_alpha > 0)) throw ConfigError("augment: mixup_alpha must be positive");
}

AugmentSpec AugmentSpec::all_off() {
  AugmentSpec s;
  s.time_mask = s.freq_mask = s.mixup = false;
  return s;
}

template <typename Scalar>
std::pair<Matrix<Scalar>, std::vector<int>> time_span_mask(const Matrix<Scalar>& x, int len, double proportion,
                                                           Rng& rng) {
  if (len < 1) throw ConfigError("time_span_mask: len must be >= 1");
  if (!(proportion >= 0 && proportion <= 1)) throw ConfigError("time_span_mask: proportion must be in [0, 1]");
  const int frames = static_cast<int>(x.rows());
  if (len > frames) {
    throw InputTooShortError("time_span_mask: mask length " + std::to_string(len) + " exceeds " +
                             std::to_string(frames) + " frames");
  }
  const int spans = static_cast<int>(std::floor(proportion * frames / len));
  // Partial Fisher-Yates: the first `spans` entries are distinct starts.
  std::vector<int> starts(static_cast<std::size_t>(frames));
  std::iota(starts.begin(), starts.end(), 0);
  for (int i = 0; i < spans; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(i, frames - 1));
    std::swap(starts[static_cast<std::size_t>(i)], starts[j]);
  }
  std::vector<char> masked(static_cast<std::size_t>(frames), 0);
  for (int i = 0; i < spans; ++i) {
    const int s = starts[static_cast<std::size_t>(i)];
    for (int t = s; t < std::min(frames, s + len); ++t) masked[static_cast<std::size_t>(t)] = 1;
  }
  Matrix<Scalar> out = x;
  std::vector<int> idx;
  for (int t = 0; t < frames; ++t) {
    if (masked[static_cast<std::size_t>(t)]) {
      out.row(t).setZero();
      idx.push_back(t);
    }
  }
  return {std::move(out), std::move(idx)};
}

template <typename Scalar>
std::pair<Matrix<Scalar>, std::vector<FreqBand>> freq_span_mask(const Matrix<Scalar>& x, int num_windows,
                                                                int max_width, Rng& rng) {
  const int bins = static_cast<int>(x.cols());
  if (max_width >= bins) {
    throw ConfigError("freq_span_mask: max_width " + std::to_string(max_width) + " must be below " +
                      std::to_string(bins) + " bins");
  }
  if (num_windows < 0 || max_width < 0) throw ConfigError("freq_span_mask: negative window setting");
  Matrix<Scalar> out = x;
  std::vector<FreqBand> bands;
  for (int w = 0; w < num_windows; ++w) {
    const int width = static_cast<int>(rng.uniform_int(0, max_width));
    const int start = static_cast<int>(rng.uniform_int(0, bins - width));
    if (width > 0) out.middleCols(start, width).setZero();
    bands.push_back({start, width});
  }
  return {std::move(out), std::move(bands)};
}

template <typename Scalar>
Matrix<Scalar> mix(const Matrix<Scalar>& x1, const Matrix<Scalar>& x2, double beta) {
  if (x1.cols() != x2.cols()) {
    throw DimensionError("mixup: feature dimensions differ (" + std::to_string(x1.cols()) + " vs " +
                         std::to_string(x2.cols()) + ")");
  }
  if (!(beta >= 0 && beta <= 1)) throw ContractError("mixup: weight must be in [0, 1]");
  const Eigen::Index rows = std::max(x1.rows(), x2.rows());
  Matrix<Scalar> out = Matrix<Scalar>::Zero(rows, x1.cols());
  const Scalar b = static_cast<Scalar>(beta);
  out.topRows(x1.rows()) += b * x1;
  out.topRows(x2.rows()) += (Scalar(1) - b) * x2;
  return out;
}

template <typename Scalar>
std::pair<Matrix<Scalar>, double> mixup(const Matrix<Scalar>& x1, const Matrix<Scalar>& x2, double alpha, Rng& rng) {
  if (!(alpha > 0)) throw ConfigError("mixup: alpha must be positive");
  if (x1.cols() != x2.cols()) throw DimensionError("mixup: feature dimensions differ");
  const double beta = rng.beta(alpha, alpha);
  return {mix(x1, x2, beta), beta};
}

template <typename Scalar>
std::pair<Matrix<Scalar>, AugmentRecord> augment(const Matrix<Scalar>& x, const AugmentSpec& spec,
                                                 AugmentStage stage, Rng& rng) {
  spec.validate(static_cast<int>(x.cols()));
  AugmentRecord rec;
  if (stage == AugmentStage::xlst_target) return {x, rec};
  Matrix<Scalar> out = x;
  if (spec.time_mask) {
    auto [masked, frames] = time_span_mask(out, spec.time_mask_len, spec.time_mask_proportion, rng);
    out = std::move(masked);
    rec.masked_frames = std::move(frames);
  }
  if (spec.freq_mask) {
    auto [masked, bands] = freq_span_mask(out, spec.freq_num_windows, spec.freq_max_width, rng);
    out = std::move(masked);
    rec.masked_bands = std::move(bands);
  }
  return {std::move(out), std::move(rec)};
}

template <typename Scalar>
std::pair<Matrix<Scalar>, AugmentRecord> augment(const Matrix<Scalar>& x, const AugmentSpec& spec,
                                                 AugmentStage stage) {
  Rng rng(spec.rng_seed);
  return augment(x, spec, stage, rng);
}

template <typename Scalar>
Matrix<Scalar> apply_record(const Matrix<Scalar>& x, const AugmentRecord& record, const Matrix<Scalar>* partner) {
  Matrix<Scalar> out = x;
  for (int t : record.masked_frames) {
    if (t < 0 || t >= out.rows()) throw DimensionError("apply_record: frame index out of range");
    out.row(t).setZero();
  }
  for (const auto& b : record.masked_bands) {
    if (b.start < 0 || b.width < 0 || b.start + b.width > out.cols()) {
      throw DimensionError("apply_record: band out of range");
    }
    if (b.width > 0) out.middleCols(b.start, b.width).setZero();
  }
  if (partner != nullptr && record.mixup_partner >= 0) out = mix(out, *partner, record.mixup_weight);
  return out;
}

std::vector<int> random_derangement(int n, Rng& rng) {
  std::vector<int> p(static_cast<std::size_t>(std::max(n, 0)));
  std::iota(p.begin(), p.end(), 0);
  if (n < 2) return p;
  for (;;) {
    rng.shuffle(p);
    bool fixed = false;
    for (int i = 0; i < n && !fixed; ++i) fixed = p[static_cast<std::size_t>(i)] == i;
    if (!fixed) return p;
  }
}

#define XLST_INSTANTIATE(S)                                                                                     \
  template std::pair<Matrix<S>, std::vector<int>> time_span_mask<S>(const Matrix<S>&, int, double, Rng&);      \
  template std::pair<Matrix<S>, std::vector<FreqBand>> freq_span_mask<S>(const Matrix<S>&, int, int, Rng&);    \
  template Matrix<S> mix<S>(const Matrix<S>&, const Matrix<S>&, double);                                       \
  template std::pair<Matrix<S>, double> mixup<S>(const Matrix<S>&, const Matrix<S>&, double, Rng&);            \
  template std::pair<Matrix<S>, AugmentRecord> augment<S>(const Matrix<S>&, const AugmentSpec&, AugmentStage, \
                                                          Rng&);                                               \
  template std::pair<Matrix<S>, AugmentRecord> augment<S>(const Matrix<S>&, const AugmentSpec&, AugmentStage); \
  template Matrix<S> apply_record<S>(const Matrix<S>&, const AugmentRecord&, const Matrix<S>*);

XLST_INSTANTIATE(float)
XLST_INSTANTIATE(double)

#undef XLST_INSTANTIATE

}  // namespace xlst
