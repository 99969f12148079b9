#pragma once

// Training objectives: normalized frame similarity, frame cross entropy,
// and CTC (loss, brute-force oracle, greedy decoding). CTC uses blank = 0
// and labels 1..V.

#include <vector>

#include "xlst/tensor.hpp"

namespace xlst {

enum class Reduction { sum, mean };

template <typename Scalar>
struct SimilarityLossValue {
  Scalar total = 0;
  std::vector<Scalar> per_frame;  // each in [0, 4]
};

// Per frame 2 - 2 <z_i, e_i> / (|z_i| |e_i|). Throws DegenerateFrameError
// when a frame of either argument has norm <= 1e-12.
template <typename Scalar>
SimilarityLossValue<Scalar> similarity_loss_value(const Matrix<Scalar>& e, const Matrix<Scalar>& z,
                                                  Reduction reduction);

// Differentiable in e only; z enters as a constant.
template <typename Scalar>
Var<Scalar> similarity_loss(const Var<Scalar>& e, const Matrix<Scalar>& z, Reduction reduction);

// Mean over the first labels.size() frames of -log softmax(logits)[label].
// Frames past the label range (padding) do not contribute.
template <typename Scalar>
Var<Scalar> frame_cross_entropy(const Var<Scalar>& logits, const std::vector<int>& labels);

// beta * CE(labels1) + (1 - beta) * CE(labels2) on one set of logits.
template <typename Scalar>
Var<Scalar> frame_cross_entropy_mixup(const Var<Scalar>& logits, const std::vector<int>& labels1,
                                      const std::vector<int>& labels2, double beta);

// Fewest frames that can emit labels: one per label plus one blank
// between each pair of equal neighbours.
int ctc_min_frames(const std::vector<int>& labels);

struct CtcLattice {
  std::vector<int> extended;    // blank, l1, blank, l2, ..., blank
  Matrix<double> log_alpha;     // T x S, includes emission at t
  Matrix<double> log_beta;      // T x S, emissions after t only
  double forward_log_likelihood = 0;
  double backward_log_likelihood = 0;
};

// Log-space forward-backward over the blank-extended label sequence.
template <typename Scalar>
CtcLattice ctc_lattice(const Matrix<Scalar>& logits, const std::vector<int>& labels);

// -log p(labels | logits). Throws InfeasibleAlignmentError when the
// sequence is too short for the labels.
template <typename Scalar>
double ctc_loss_value(const Matrix<Scalar>& logits, const std::vector<int>& labels);

template <typename Scalar>
Var<Scalar> ctc_loss(const Var<Scalar>& logits, const std::vector<int>& labels);

// Enumerates every frame-level path; limited to T <= 8 and V <= 5.
double ctc_brute_force(const Matrix<double>& logits, const std::vector<int>& labels);

// Per-frame argmax, merge repeats, drop blanks.
template <typename Scalar>
std::vector<int> ctc_greedy_decode(const Matrix<Scalar>& logits);

}  // namespace xlst
