#include "doctest.h"

#include <boost/math/distributions/chi_squared.hpp>
#include <cmath>

#include "xlst/augmenter.hpp"

using namespace xlst;
using Mat = Matrix<double>;

namespace {

Mat random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(0.5, 2.0);
  return m;
}

double log_choose(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

// Exact expected masked fraction: frame t escapes iff none of the n
// distinct starts falls in the min(t+1, len) positions that cover it.
double expected_time_coverage(int frames, int len, double proportion) {
  const int n = static_cast<int>(std::floor(proportion * frames / len));
  double total = 0;
  for (int t = 0; t < frames; ++t) {
    const int cover = std::min(t + 1, len);
    const double escape = frames - cover >= n ? std::exp(log_choose(frames - cover, n) - log_choose(frames, n)) : 0;
    total += 1 - escape;
  }
  return total / frames;
}

}  // namespace

TEST_CASE("time mask with zero proportion is the identity") {
  Rng rng(1);
  const Mat x = random_matrix(30, 6, rng);
  auto [y, idx] = time_span_mask(x, 10, 0.0, rng);
  CHECK(y == x);
  CHECK(idx.empty());
}

TEST_CASE("time mask span count and overlap bounds") {
  Rng rng(2);
  const Mat x = random_matrix(100, 4, rng);
  for (int trial = 0; trial < 200; ++trial) {
    auto [y, idx] = time_span_mask(x, 10, 0.4, rng);
    CHECK(idx.size() >= 10);
    CHECK(idx.size() <= 40);
    for (int t = 0; t < 100; ++t) {
      const bool masked = std::binary_search(idx.begin(), idx.end(), t);
      if (masked) {
        CHECK(y.row(t).isZero(0));
      } else {
        CHECK(y.row(t) == x.row(t));
      }
    }
  }
}

TEST_CASE("time mask longer than the sequence is rejected") {
  Rng rng(3);
  CHECK_THROWS_AS(time_span_mask(Mat(Mat::Ones(5, 3)), 10, 0.4, rng), InputTooShortError);
}

TEST_CASE("time mask coverage matches the exact expectation") {
  const double exact = expected_time_coverage(100, 10, 0.4);
  CHECK(exact > 0.30);
  CHECK(exact < 0.40);
  Rng rng(4);
  const Mat x = Mat::Ones(100, 1);
  double total = 0;
  for (int i = 0; i < 10000; ++i) total += static_cast<double>(time_span_mask(x, 10, 0.4, rng).second.size()) / 100;
  const double mc = total / 10000;
  CHECK(mc >= 0.30);
  CHECK(mc <= 0.40);
  CHECK(std::abs(mc - exact) < 0.005);
}

TEST_CASE("frequency mask with zero widths is the identity") {
  Rng rng(5);
  const Mat x = random_matrix(12, 10, rng);
  auto [y, bands] = freq_span_mask(x, 2, 0, rng);
  CHECK(y == x);
  REQUIRE(bands.size() == 2);
  CHECK(bands[0].width == 0);
}

TEST_CASE("frequency mask stays within bounds") {
  Rng rng(6);
  const Mat x = random_matrix(3, 83, rng);
  for (int trial = 0; trial < 2000; ++trial) {
    auto [y, bands] = freq_span_mask(x, 2, 27, rng);
    for (const auto& b : bands) {
      CHECK(b.start >= 0);
      CHECK(b.start + b.width <= 83);
    }
    for (Eigen::Index c = 0; c < 83; ++c) {
      bool in_band = false;
      for (const auto& b : bands) in_band = in_band || (c >= b.start && c < b.start + b.width);
      if (in_band) {
        CHECK(y.col(c).isZero(0));
      } else {
        CHECK(y.col(c) == x.col(c));
      }
    }
  }
}

TEST_CASE("frequency mask width at or above F is a config error") {
  Rng rng(7);
  CHECK_THROWS_AS(freq_span_mask(Mat(Mat::Ones(4, 8)), 2, 8, rng), ConfigError);
}

TEST_CASE("frequency mask widths are uniform on 0..27") {
  Rng rng(8);
  const Mat x = Mat::Ones(1, 83);
  const int draws = 28000;
  std::vector<int> counts(28, 0);
  double width_sum = 0;
  for (int i = 0; i < draws / 2; ++i) {
    for (const auto& b : freq_span_mask(x, 2, 27, rng).second) {
      ++counts[static_cast<std::size_t>(b.width)];
      width_sum += b.width;
    }
  }
  const double expected = draws / 28.0;
  double chi2 = 0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  const double critical = boost::math::quantile(boost::math::chi_squared(27), 0.99);
  CHECK(chi2 < critical);
  // Mean masked bins per window is max_width / 2.
  CHECK(std::abs(width_sum / draws - 13.5) < 0.5);
}

TEST_CASE("mixup with weight one returns the padded first input") {
  Rng rng(9);
  const Mat a = random_matrix(5, 3, rng), b = random_matrix(8, 3, rng);
  Mat m = mix(a, b, 1.0);
  REQUIRE(m.rows() == 8);
  CHECK(m.topRows(5) == a);
  CHECK(m.bottomRows(3).isZero(0));
}

TEST_CASE("mixup of a sequence with itself is a fixed point") {
  Rng rng(10);
  const Mat a = random_matrix(6, 4, rng);
  for (double beta : {0.0, 0.25, 0.5, 0.9}) CHECK((mix(a, a, beta) - a).cwiseAbs().maxCoeff() < 1e-15);
  auto [m, beta] = mixup(a, a, 1.0, rng);
  CHECK(beta >= 0);
  CHECK(beta <= 1);
  CHECK((m - a).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("mixup rejects mismatched feature dimensions") {
  Rng rng(11);
  CHECK_THROWS_AS(mixup(Mat(Mat::Ones(3, 4)), Mat(Mat::Ones(3, 5)), 1.0, rng), DimensionError);
}

TEST_CASE("Beta(1,1) mixing weight moments") {
  Rng rng(12);
  const int n = 100000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double b = rng.beta(1.0, 1.0);
    s += b;
    s2 += b * b;
  }
  const double mean = s / n;
  const double var = s2 / n - mean * mean;
  CHECK(std::abs(mean - 0.5) <= 0.01);
  CHECK(std::abs(var - 1.0 / 12.0) <= 0.005);
}

TEST_CASE("target stage is the identity") {
  Rng rng(13);
  const Mat x = random_matrix(40, 16, rng);
  AugmentSpec spec;
  spec.freq_max_width = 8;
  auto [y, rec] = augment(x, spec, AugmentStage::xlst_target, rng);
  CHECK(y == x);
  CHECK(rec == AugmentRecord{});
}

TEST_CASE("supervised stage with everything disabled is the identity") {
  Rng rng(14);
  const Mat x = random_matrix(40, 16, rng);
  auto [y, rec] = augment(x, AugmentSpec::all_off(), AugmentStage::supervised, rng);
  CHECK(y == x);
}

TEST_CASE("augment is deterministic in the spec seed and records reproduce it") {
  Rng rng(15);
  const Mat x = random_matrix(60, 16, rng);
  AugmentSpec spec;
  spec.freq_max_width = 6;
  spec.rng_seed = 77;
  auto [y1, r1] = augment(x, spec, AugmentStage::xlst_main);
  auto [y2, r2] = augment(x, spec, AugmentStage::xlst_main);
  CHECK(y1 == y2);
  CHECK(r1 == r2);
  CHECK(!r1.masked_frames.empty());
  CHECK(apply_record(x, r1) == y1);
  // Idempotent on already-masked input.
  CHECK(apply_record(y1, r1) == y1);
}

TEST_CASE("records with a mixup partner reproduce the mixed input") {
  Rng rng(16);
  const Mat x = random_matrix(30, 8, rng), partner = random_matrix(34, 8, rng);
  AugmentSpec spec;
  spec.freq_max_width = 3;
  auto [masked, rec] = augment(x, spec, AugmentStage::supervised, rng);
  auto [mixed, beta] = mixup(masked, partner, spec.mixup_alpha, rng);
  rec.mixup_partner = 1;
  rec.mixup_weight = beta;
  CHECK(apply_record(x, rec, &partner) == mixed);
}

TEST_CASE("derangements have no fixed points") {
  Rng rng(17);
  for (int n = 2; n < 12; ++n) {
    for (int trial = 0; trial < 20; ++trial) {
      auto p = random_derangement(n, rng);
      std::vector<int> sorted = p;
      std::sort(sorted.begin(), sorted.end());
      for (int i = 0; i < n; ++i) {
        CHECK(p[static_cast<std::size_t>(i)] != i);
        CHECK(sorted[static_cast<std::size_t>(i)] == i);
      }
    }
  }
  CHECK(random_derangement(1, rng) == std::vector<int>{0});
}
