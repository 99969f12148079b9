#pragma once

// Dense 2-D tensors with a reverse-mode tape.
//
// Every value is an Eigen row-major matrix; scalars are 1x1. A Tape records
// one forward pass: each node keeps its value and a closure that pushes the
// node's gradient into its parents. backward() walks the nodes in reverse
// creation order, which is a reverse topological order by construction.

#include <Eigen/Dense>

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "xlst/error.hpp"

namespace xlst {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
class Tape;

// Handle to one node of a tape. Cheap to copy; valid while the tape lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix<Scalar>& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Scalar item() const;
  bool requires_grad() const;

  Tape<Scalar>* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  // Receives the gradient of the loss wrt this node's value.
  using BackwardFn = std::function<void(Tape&, const Mat&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Mat value);
  Var<Scalar> variable(Mat value);
  // Node computed from parents. The closure is kept only when at least one
  // parent requires a gradient.
  Var<Scalar> record(Mat value, std::initializer_list<Var<Scalar>> parents, BackwardFn backward);
  Var<Scalar> record(Mat value, std::span<const Var<Scalar>> parents, BackwardFn backward);

  // Gradients of a scalar loss wrt every node reachable from it.
  void backward(const Var<Scalar>& loss);

  const Mat& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient after backward(); zeros for nodes not on any path to the loss.
  Mat grad(const Var<Scalar>& v) const;

  // Used inside backward closures. Ignores nodes that do not need gradients.
  template <typename Derived>
  void accumulate(const Var<Scalar>& v, const Eigen::MatrixBase<Derived>& g) {
    Node& node = nodes_[v.id()];
    if (!node.requires_grad) return;
    if (!node.has_grad) {
      node.grad = g;
      node.has_grad = true;
    } else {
      node.grad += g;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

template <typename Scalar>
const Matrix<Scalar>& Var<Scalar>::value() const {
  return tape_->value(id_);
}

template <typename Scalar>
Scalar Var<Scalar>::item() const {
  const auto& v = value();
  if (v.size() != 1) throw DimensionError("item() on non-scalar tensor");
  return v(0, 0);
}

template <typename Scalar>
bool Var<Scalar>::requires_grad() const {
  return tape_->requires_grad(id_);
}

// Differentiable operations. All shapes are checked; mismatches throw
// DimensionError. Only two broadcasts exist: a 1xC row added to every row
// (add_row) and multiplication by a scalar (scale).
template <typename Scalar> Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> transpose(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b);
template <typename Scalar> Var<Scalar> add_row(const Var<Scalar>& a, const Var<Scalar>& row);
template <typename Scalar> Var<Scalar> add_constant(const Var<Scalar>& a, const Matrix<Scalar>& c);
template <typename Scalar> Var<Scalar> scale(const Var<Scalar>& a, Scalar s);
template <typename Scalar> Var<Scalar> mul_constant(const Var<Scalar>& a, const Matrix<Scalar>& m);
template <typename Scalar> Var<Scalar> relu(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> exp(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> log(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> softmax_rows(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> log_softmax_rows(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> sum(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> mean(const Var<Scalar>& a);
template <typename Scalar> Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts);
template <typename Scalar> Var<Scalar> concat_cols(std::span<const Var<Scalar>> parts);
template <typename Scalar> Var<Scalar> slice_rows(const Var<Scalar>& a, Eigen::Index start, Eigen::Index count);
template <typename Scalar> Var<Scalar> slice_cols(const Var<Scalar>& a, Eigen::Index start, Eigen::Index count);
// Row-major reinterpretation; the element count must be preserved.
template <typename Scalar> Var<Scalar> reshape(const Var<Scalar>& a, Eigen::Index rows, Eigen::Index cols);
// out.data()[k] = a.data()[index[k]], or 0 where index[k] < 0.
template <typename Scalar>
Var<Scalar> gather(const Var<Scalar>& a, std::vector<Eigen::Index> index, Eigen::Index rows, Eigen::Index cols);

// Per-row normalization with affine 1xC gamma/beta.
template <typename Scalar>
Var<Scalar> layer_norm_rows(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                            Scalar eps = Scalar(1e-5));

// Per-feature normalization over the frame (row) axis.
template <typename Scalar>
struct BatchNormStats {
  RowVector<Scalar> mean;
  RowVector<Scalar> var;  // biased
};

// Train mode normalizes with the statistics of x and returns them through
// batch_stats (when non-null); eval mode uses the supplied running statistics.
template <typename Scalar>
Var<Scalar> batch_norm_frames(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                              bool train_mode, const RowVector<Scalar>& running_mean,
                              const RowVector<Scalar>& running_var, BatchNormStats<Scalar>* batch_stats,
                              Scalar eps = Scalar(1e-5));

// Central-difference comparison of tape gradients for f at x. The error of
// element i is |tape_i - fd_i| / max(|tape_i|, |fd_i|, 1e-2 * max_j |fd_j|),
// so entries far below the gradient's own scale are judged against that scale.
template <typename Scalar>
using ScalarFunction = std::function<Var<Scalar>(Tape<Scalar>&, const Var<Scalar>&)>;

double grad_check(const ScalarFunction<double>& f, const Matrix<double>& x, double eps = 1e-6);

}  // namespace xlst
