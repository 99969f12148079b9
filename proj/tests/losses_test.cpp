#include "doctest.h"

#include <cmath>
#include <functional>

#include "xlst/encoder.hpp"
#include "xlst/losses.hpp"

using namespace xlst;
using Mat = Matrix<double>;

namespace {

Mat random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double lo = -1, double hi = 1) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

std::vector<int> random_labels(int len, int vocab, Rng& rng) {
  std::vector<int> l(static_cast<std::size_t>(len));
  for (auto& x : l) x = static_cast<int>(rng.uniform_int(1, vocab));
  return l;
}

// Every label sequence over 1..vocab of length <= max_len.
void all_sequences(int vocab, int max_len, std::vector<int>& prefix,
                   const std::function<void(const std::vector<int>&)>& visit) {
  visit(prefix);
  if (static_cast<int>(prefix.size()) == max_len) return;
  for (int k = 1; k <= vocab; ++k) {
    prefix.push_back(k);
    all_sequences(vocab, max_len, prefix, visit);
    prefix.pop_back();
  }
}

}  // namespace

TEST_CASE("similarity of identical embeddings is zero") {
  Rng rng(1);
  const Mat e = random_matrix(6, 5, rng);
  auto v = similarity_loss_value(e, e, Reduction::sum);
  CHECK(std::abs(v.total) < 1e-12);
}

TEST_CASE("similarity of opposite embeddings is four per frame") {
  Rng rng(2);
  const Mat e = random_matrix(3, 4, rng);
  auto v = similarity_loss_value(e, Mat(-e), Reduction::sum);
  CHECK(v.total == doctest::Approx(12.0).epsilon(1e-12));
  for (double f : v.per_frame) CHECK(f == doctest::Approx(4.0).epsilon(1e-12));
}

TEST_CASE("similarity of orthogonal embeddings is two per frame") {
  Mat e = Mat::Zero(5, 4), z = Mat::Zero(5, 4);
  for (int i = 0; i < 5; ++i) {
    e(i, i % 4) = 1.0 + i;
    z(i, (i + 1) % 4) = 0.5;
  }
  CHECK(similarity_loss_value(e, z, Reduction::sum).total == doctest::Approx(10.0));
  CHECK(similarity_loss_value(e, z, Reduction::mean).total == doctest::Approx(2.0));
}

TEST_CASE("similarity bounds and scale invariance") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const Mat e = random_matrix(7, 6, rng), z = random_matrix(7, 6, rng);
    auto base = similarity_loss_value(e, z, Reduction::sum);
    for (double f : base.per_frame) {
      CHECK(f >= 0);
      CHECK(f <= 4);
    }
    Mat es = e, zs = z;
    for (Eigen::Index i = 0; i < 7; ++i) {
      es.row(i) *= rng.uniform(0.01, 100);
      zs.row(i) *= rng.uniform(0.01, 100);
    }
    CHECK(std::abs(similarity_loss_value(es, z, Reduction::sum).total - base.total) < 1e-9);
    CHECK(std::abs(similarity_loss_value(e, zs, Reduction::sum).total - base.total) < 1e-9);
  }
}

TEST_CASE("degenerate frames are reported by index") {
  Mat e = Mat::Ones(4, 3), z = Mat::Ones(4, 3);
  z.row(2).setZero();
  try {
    similarity_loss_value(e, z, Reduction::mean);
    FAIL("expected DegenerateFrameError");
  } catch (const DegenerateFrameError& err) {
    CHECK(std::string(err.what()).find("frame 2") != std::string::npos);
  }
}

TEST_CASE("similarity gradient matches finite differences") {
  Rng rng(4);
  for (auto red : {Reduction::sum, Reduction::mean}) {
    const Mat z = random_matrix(5, 6, rng);
    auto f = [&](Tape<double>&, const Var<double>& e) { return similarity_loss(e, z, red); };
    CHECK(grad_check(f, random_matrix(5, 6, rng)) < 1e-5);
  }
}

TEST_CASE("no gradient reaches the target embeddings") {
  Rng rng(5);
  Tape<double> t;
  auto e = t.variable(random_matrix(3, 4, rng));
  auto z = t.variable(random_matrix(3, 4, rng));
  auto loss = similarity_loss(e, z.value(), Reduction::mean);
  t.backward(loss);
  CHECK(t.grad(z).isZero(0));
  CHECK(!t.grad(e).isZero(0));
}

TEST_CASE("cross entropy of uniform logits") {
  Tape<double> t;
  auto logits = t.constant(Mat::Zero(4, 5));
  CHECK(frame_cross_entropy(logits, {0, 1, 4, 2}).item() == doctest::Approx(std::log(5.0)));
  CHECK(frame_cross_entropy_mixup(logits, {0, 1, 4, 2}, {3, 3}, 0.5).item() == doctest::Approx(std::log(5.0)));
}

TEST_CASE("cross entropy of a confident correct prediction") {
  Tape<double> t;
  Mat l = Mat::Zero(3, 5);
  l(0, 2) = l(1, 0) = l(2, 4) = 30;
  CHECK(frame_cross_entropy(t.constant(l), {2, 0, 4}).item() < 1e-9);
}

TEST_CASE("cross entropy rejects labels outside the class range") {
  Tape<double> t;
  auto logits = t.constant(Mat::Zero(2, 5));
  CHECK_THROWS_AS(frame_cross_entropy(logits, {0, 5}), LabelError);
  CHECK_THROWS_AS(frame_cross_entropy(logits, {-1}), LabelError);
}

TEST_CASE("mixup cross entropy only scores each label range") {
  Rng rng(6);
  const Mat l = random_matrix(6, 4, rng);
  Tape<double> t;
  auto logits = t.constant(l);
  const std::vector<int> y1{1, 2, 3, 0, 1, 2}, y2{3, 3};
  const double ce1 = frame_cross_entropy(logits, y1).item();
  const double ce2 = frame_cross_entropy(logits, y2).item();
  CHECK(frame_cross_entropy_mixup(logits, y1, y2, 0.3).item() == doctest::Approx(0.3 * ce1 + 0.7 * ce2));
  auto f = [&](Tape<double>&, const Var<double>& x) { return frame_cross_entropy_mixup(x, y1, y2, 0.3); };
  CHECK(grad_check(f, l) < 1e-5);
}

TEST_CASE("ctc single frame single label") {
  Mat l = Mat::Zero(1, 3);
  CHECK(ctc_loss_value(l, {1}) == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(ctc_brute_force(l, {1}) == doctest::Approx(std::log(3.0)).epsilon(1e-12));
}

TEST_CASE("ctc with empty labels is the all-blank path") {
  Rng rng(7);
  const Mat l = random_matrix(2, 4, rng);
  double expected = 0;
  for (int t = 0; t < 2; ++t) {
    const double z = l.row(t).array().exp().sum();
    expected -= std::log(std::exp(l(t, 0)) / z);
  }
  CHECK(std::abs(ctc_loss_value(l, {}) - expected) < 1e-12);
}

TEST_CASE("ctc equals brute force on a hand instance") {
  Rng rng(8);
  const Mat l = random_matrix(4, 4, rng, -2, 2);
  CHECK(std::abs(ctc_loss_value(l, {1, 2}) - ctc_brute_force(l, {1, 2})) < 1e-10);
}

TEST_CASE("ctc equals brute force on random small instances") {
  Rng rng(9);
  for (int trial = 0; trial < 1000; ++trial) {
    const int frames = static_cast<int>(rng.uniform_int(1, 6));
    const int vocab = static_cast<int>(rng.uniform_int(1, 4));
    const int len = static_cast<int>(rng.uniform_int(0, 3));
    auto labels = random_labels(len, vocab, rng);
    const Mat l = random_matrix(frames, vocab + 1, rng, -3, 3);
    if (ctc_min_frames(labels) > frames) {
      CHECK_THROWS_AS(ctc_loss_value(l, labels), InfeasibleAlignmentError);
      CHECK_THROWS_AS(ctc_brute_force(l, labels), InfeasibleAlignmentError);
      continue;
    }
    CHECK(std::abs(ctc_loss_value(l, labels) - ctc_brute_force(l, labels)) < 1e-10);
  }
}

TEST_CASE("ctc lattice forward and backward likelihoods agree") {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const Mat l = random_matrix(20, 6, rng, -4, 4);
    auto labels = random_labels(static_cast<int>(rng.uniform_int(0, 8)), 5, rng);
    auto lat = ctc_lattice(l, labels);
    CHECK(std::abs(lat.forward_log_likelihood - lat.backward_log_likelihood) < 1e-8);
    CHECK(lat.extended.size() == 2 * labels.size() + 1);
  }
}

TEST_CASE("ctc infeasible alignments are errors") {
  CHECK(ctc_min_frames({1, 1, 2}) == 4);
  CHECK(ctc_min_frames({}) == 0);
  CHECK_THROWS_AS(ctc_loss_value(Mat(Mat::Zero(3, 3)), {1, 1, 2}), InfeasibleAlignmentError);
  CHECK_THROWS_AS(ctc_loss_value(Mat(Mat::Zero(3, 3)), {3}), LabelError);
  CHECK_THROWS_AS(ctc_brute_force(Mat(Mat::Zero(2, 3)), {1, 1, 1}), InfeasibleAlignmentError);
  CHECK_THROWS_AS(ctc_brute_force(Mat(Mat::Zero(9, 3)), {1}), OracleScaleError);
  CHECK_THROWS_AS(ctc_brute_force(Mat(Mat::Zero(3, 7)), {1}), OracleScaleError);
}

TEST_CASE("ctc gradient matches finite differences") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const int frames = static_cast<int>(rng.uniform_int(4, 12));
    auto labels = random_labels(static_cast<int>(rng.uniform_int(0, 3)), 4, rng);
    auto f = [&](Tape<double>&, const Var<double>& x) { return ctc_loss(x, labels); };
    CHECK(grad_check(f, random_matrix(frames, 5, rng, -2, 2)) < 1e-5);
  }
}

TEST_CASE("ctc probabilities normalize over label sequences") {
  Rng rng(12);
  for (int frames = 1; frames <= 3; ++frames) {
    for (int vocab = 1; vocab <= 2; ++vocab) {
      const Mat l = random_matrix(frames, vocab + 1, rng, -2, 2);
      double total = 0;
      std::vector<int> prefix;
      all_sequences(vocab, frames, prefix, [&](const std::vector<int>& seq) {
        if (ctc_min_frames(seq) <= frames) total += std::exp(-ctc_loss_value(l, seq));
      });
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("greedy decoding collapses repeats and drops blanks") {
  auto onehot = [](std::vector<int> path) {
    Mat l = Mat::Zero(static_cast<Eigen::Index>(path.size()), 4);
    for (std::size_t t = 0; t < path.size(); ++t) l(static_cast<Eigen::Index>(t), path[t]) = 5;
    return l;
  };
  CHECK(ctc_greedy_decode(onehot({0, 1, 1, 0, 2})) == std::vector<int>{1, 2});
  CHECK(ctc_greedy_decode(onehot({0, 0, 0})).empty());
  CHECK(ctc_greedy_decode(onehot({1, 0, 1})) == std::vector<int>{1, 1});
}

TEST_CASE("encoder plus similarity loss gradient on an 8x6 input") {
  EncoderConfig c = EncoderConfig::desk_preset();
  c.input_dim = 6;
  c.dropout = 0;
  const auto p = init_params<double>(c, 3);
  Rng rng(13);
  const Mat z = random_matrix(4, c.projector_output_dim, rng);
  auto f = [&](Tape<double>& t, const Var<double>& x) {
    EncoderGraph<double> g(c, p, t, false);
    std::vector<Var<double>> in{x};
    return similarity_loss(g.encode_batch(in, false, nullptr, nullptr)[0], z, Reduction::sum);
  };
  CHECK(grad_check(f, random_matrix(8, 6, rng)) < 1e-4);
}
