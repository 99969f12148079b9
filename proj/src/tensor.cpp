#include "xlst/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace xlst {

namespace {

std::string shape_str(Eigen::Index r, Eigen::Index c) {
  std::ostringstream os;
  os << r << "x" << c;
  return os.str();
}

template <typename Scalar>
void require_same_shape(const char* op, const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) +
                         " vs " + shape_str(b.rows(), b.cols()));
  }
}

template <typename Scalar>
void require_finite(const char* op, const Matrix<Scalar>& m) {
  if (!m.allFinite()) throw NumericError(std::string(op) + ": non-finite result");
}

}  // namespace

template <typename Scalar>
Var<Scalar> Tape<Scalar>::constant(Mat value) {
  nodes_.push_back(Node{std::move(value), Mat(), false, false, nullptr});
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::variable(Mat value) {
  nodes_.push_back(Node{std::move(value), Mat(), true, false, nullptr});
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::record(Mat value, std::initializer_list<Var<Scalar>> parents, BackwardFn backward) {
  return record(std::move(value), std::span<const Var<Scalar>>(parents.begin(), parents.size()),
                std::move(backward));
}

template <typename Scalar>
Var<Scalar> Tape<Scalar>::record(Mat value, std::span<const Var<Scalar>> parents, BackwardFn backward) {
  bool needs = false;
  for (const auto& p : parents) {
    if (p.tape() != this) throw ContractError("operands recorded on different tapes");
    needs = needs || nodes_[p.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), Mat(), needs, false, needs ? std::move(backward) : nullptr});
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar>
void Tape<Scalar>::backward(const Var<Scalar>& loss) {
  if (loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  const Mat& lv = nodes_[loss.id()].value;
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_str(lv.rows(), lv.cols()));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  accumulate(loss, Mat::Ones(1, 1));
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward(*this, n.grad);
  }
}

template <typename Scalar>
typename Tape<Scalar>::Mat Tape<Scalar>::grad(const Var<Scalar>& v) const {
  const Node& n = nodes_[v.id()];
  if (!n.has_grad) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_str(a.rows(), a.cols()) + " * " +
                         shape_str(b.rows(), b.cols()));
  }
  Matrix<Scalar> out = a.value() * b.value();
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
  });
}

template <typename Scalar>
Var<Scalar> transpose(const Var<Scalar>& a) {
  Matrix<Scalar> out = a.value().transpose();
  return a.tape()->record(std::move(out), {a}, [a](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g.transpose());
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape("add", a, b);
  Matrix<Scalar> out = a.value() + b.value();
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape("sub", a, b);
  Matrix<Scalar> out = a.value() - b.value();
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape("mul", a, b);
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (a.requires_grad()) t.accumulate(a, g.cwiseProduct(b.value()));
    if (b.requires_grad()) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

template <typename Scalar>
Var<Scalar> add_row(const Var<Scalar>& a, const Var<Scalar>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: expected 1x" + std::to_string(a.cols()) + " row, got " +
                         shape_str(row.rows(), row.cols()));
  }
  Matrix<Scalar> out = a.value().rowwise() + row.value().row(0);
  return a.tape()->record(std::move(out), {a, row}, [a, row](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g);
    if (row.requires_grad()) t.accumulate(row, g.colwise().sum());
  });
}

template <typename Scalar>
Var<Scalar> add_constant(const Var<Scalar>& a, const Matrix<Scalar>& c) {
  if (c.rows() != a.rows() || c.cols() != a.cols()) throw DimensionError("add_constant: shape mismatch");
  Matrix<Scalar> out = a.value() + c;
  return a.tape()->record(std::move(out), {a}, [a](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g);
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  Matrix<Scalar> out = a.value() * s;
  return a.tape()->record(std::move(out), {a}, [a, s](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g * s);
  });
}

template <typename Scalar>
Var<Scalar> mul_constant(const Var<Scalar>& a, const Matrix<Scalar>& m) {
  if (m.rows() != a.rows() || m.cols() != a.cols()) throw DimensionError("mul_constant: shape mismatch");
  Matrix<Scalar> out = a.value().cwiseProduct(m);
  return a.tape()->record(std::move(out), {a}, [a, m](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g.cwiseProduct(m));
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  Matrix<Scalar> out = a.value().cwiseMax(Scalar(0));
  return a.tape()->record(std::move(out), {a}, [a](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, (a.value().array() > Scalar(0)).select(g.array(), Scalar(0)).matrix());
  });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& a) {
  Matrix<Scalar> out = a.value().array().exp().matrix();
  require_finite("exp", out);
  Matrix<Scalar> y = out;
  return a.tape()->record(std::move(out), {a}, [a, y](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g.cwiseProduct(y));
  });
}

template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& a) {
  if ((a.value().array() <= Scalar(0)).any()) throw NumericError("log: non-positive argument");
  Matrix<Scalar> out = a.value().array().log().matrix();
  return a.tape()->record(std::move(out), {a}, [a](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g.cwiseQuotient(a.value()));
  });
}

namespace {

template <typename Scalar>
Matrix<Scalar> softmax_values(const Matrix<Scalar>& x) {
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> log_softmax_values(const Matrix<Scalar>& x) {
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    const Scalar lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}

}  // namespace

template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& a) {
  require_finite("softmax", a.value());
  Matrix<Scalar> out = softmax_values(a.value());
  Matrix<Scalar> y = out;
  return a.tape()->record(std::move(out), {a}, [a, y](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    // dx = y * (g - <g, y>) per row
    Matrix<Scalar> dots = g.cwiseProduct(y).rowwise().sum();
    Matrix<Scalar> dx = y.cwiseProduct(g - dots.replicate(1, g.cols()));
    t.accumulate(a, dx);
  });
}

template <typename Scalar>
Var<Scalar> log_softmax_rows(const Var<Scalar>& a) {
  require_finite("log_softmax", a.value());
  Matrix<Scalar> out = log_softmax_values(a.value());
  Matrix<Scalar> y = out.array().exp().matrix();
  return a.tape()->record(std::move(out), {a}, [a, y](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    Matrix<Scalar> gs = g.rowwise().sum();
    t.accumulate(a, g - y.cwiseProduct(gs.replicate(1, g.cols())));
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->record(std::move(out), {a}, [a](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, Matrix<Scalar>::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  if (a.value().size() == 0) throw DimensionError("mean of empty tensor");
  const Scalar n = static_cast<Scalar>(a.value().size());
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum() / n;
  return a.tape()->record(std::move(out), {a}, [a, n](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, Matrix<Scalar>::Constant(a.rows(), a.cols(), g(0, 0) / n));
  });
}

template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no operands");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column count mismatch");
    rows += p.rows();
  }
  Matrix<Scalar> out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var<Scalar>> ps(parts.begin(), parts.end());
  return parts[0].tape()->record(std::move(out), parts, [ps](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    Eigen::Index r0 = 0;
    for (const auto& p : ps) {
      t.accumulate(p, g.middleRows(r0, p.rows()));
      r0 += p.rows();
    }
  });
}

template <typename Scalar>
Var<Scalar> concat_cols(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix<Scalar> out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var<Scalar>> ps(parts.begin(), parts.end());
  return parts[0].tape()->record(std::move(out), parts, [ps](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    Eigen::Index c0 = 0;
    for (const auto& p : ps) {
      t.accumulate(p, g.middleCols(c0, p.cols()));
      c0 += p.cols();
    }
  });
}

template <typename Scalar>
Var<Scalar> slice_rows(const Var<Scalar>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw DimensionError("slice_rows: out of range");
  Matrix<Scalar> out = a.value().middleRows(start, count);
  return a.tape()->record(std::move(out), {a}, [a, start, count](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    Matrix<Scalar> full = Matrix<Scalar>::Zero(a.rows(), a.cols());
    full.middleRows(start, count) = g;
    t.accumulate(a, full);
  });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw DimensionError("slice_cols: out of range");
  Matrix<Scalar> out = a.value().middleCols(start, count);
  return a.tape()->record(std::move(out), {a}, [a, start, count](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    Matrix<Scalar> full = Matrix<Scalar>::Zero(a.rows(), a.cols());
    full.middleCols(start, count) = g;
    t.accumulate(a, full);
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != a.value().size()) {
    throw DimensionError("reshape: " + shape_str(a.rows(), a.cols()) + " -> " + shape_str(rows, cols));
  }
  Matrix<Scalar> out = Eigen::Map<const Matrix<Scalar>>(a.value().data(), rows, cols);
  const Eigen::Index ar = a.rows(), ac = a.cols();
  return a.tape()->record(std::move(out), {a}, [a, ar, ac](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, Eigen::Map<const Matrix<Scalar>>(g.data(), ar, ac));
  });
}

template <typename Scalar>
Var<Scalar> gather(const Var<Scalar>& a, std::vector<Eigen::Index> index, Eigen::Index rows, Eigen::Index cols) {
  if (static_cast<Eigen::Index>(index.size()) != rows * cols) throw DimensionError("gather: index size");
  const Eigen::Index n = a.value().size();
  Matrix<Scalar> out(rows, cols);
  const Scalar* src = a.value().data();
  Scalar* dst = out.data();
  for (std::size_t k = 0; k < index.size(); ++k) {
    const Eigen::Index i = index[k];
    if (i >= n) throw DimensionError("gather: index out of range");
    dst[k] = i < 0 ? Scalar(0) : src[i];
  }
  return a.tape()->record(std::move(out), {a},
                          [a, idx = std::move(index)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            Matrix<Scalar> da = Matrix<Scalar>::Zero(a.rows(), a.cols());
                            Scalar* d = da.data();
                            const Scalar* gs = g.data();
                            for (std::size_t k = 0; k < idx.size(); ++k) {
                              if (idx[k] >= 0) d[idx[k]] += gs[k];
                            }
                            t.accumulate(a, da);
                          });
}

namespace {

// Shared backward of a normalization y = xhat * gamma + beta where xhat is
// standardized along one axis with n samples per group. Works on
// column-groups (batch norm); layer norm transposes into this layout.
template <typename Scalar>
Matrix<Scalar> normalize_backward(const Matrix<Scalar>& dxhat, const Matrix<Scalar>& xhat,
                                  const RowVector<Scalar>& inv_std) {
  const Scalar n = static_cast<Scalar>(xhat.rows());
  RowVector<Scalar> sum_d = dxhat.colwise().sum();
  RowVector<Scalar> sum_dx = dxhat.cwiseProduct(xhat).colwise().sum();
  Matrix<Scalar> dx = (n * dxhat).rowwise() - sum_d;
  dx -= (xhat.array().rowwise() * sum_dx.array()).matrix();
  dx = dx.array().rowwise() * (inv_std.array() / n);
  return dx;
}

}  // namespace

template <typename Scalar>
Var<Scalar> layer_norm_rows(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta, Scalar eps) {
  const Eigen::Index c = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c) {
    throw DimensionError("layer_norm: affine parameters must be 1x" + std::to_string(c));
  }
  // Work in the transposed layout so each original row is a column group.
  Matrix<Scalar> xt = x.value().transpose();
  RowVector<Scalar> mu = xt.colwise().mean();
  Matrix<Scalar> centered = xt.rowwise() - mu;
  RowVector<Scalar> var = centered.array().square().colwise().mean();
  RowVector<Scalar> inv_std = (var.array() + eps).rsqrt();
  Matrix<Scalar> xhat_t = centered.array().rowwise() * inv_std.array();
  Matrix<Scalar> xhat = xhat_t.transpose();
  Matrix<Scalar> out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  return x.tape()->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, xhat_t, inv_std](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        if (gamma.requires_grad()) t.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
        if (beta.requires_grad()) t.accumulate(beta, g.colwise().sum());
        if (x.requires_grad()) {
          Matrix<Scalar> dxhat = g.array().rowwise() * gamma.value().row(0).array();
          Matrix<Scalar> dxhat_t = dxhat.transpose();
          t.accumulate(x, normalize_backward<Scalar>(dxhat_t, xhat_t, inv_std).transpose());
        }
      });
}

template <typename Scalar>
Var<Scalar> batch_norm_frames(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                              bool train_mode, const RowVector<Scalar>& running_mean,
                              const RowVector<Scalar>& running_var, BatchNormStats<Scalar>* batch_stats,
                              Scalar eps) {
  const Eigen::Index c = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != c || beta.rows() != 1 || beta.cols() != c) {
    throw DimensionError("batch_norm: affine parameters must be 1x" + std::to_string(c));
  }
  if (!train_mode) {
    if (running_mean.cols() != c || running_var.cols() != c) throw DimensionError("batch_norm: running stats");
    RowVector<Scalar> inv_std = (running_var.array() + eps).rsqrt();
    Matrix<Scalar> xhat = (x.value().rowwise() - running_mean).array().rowwise() * inv_std.array();
    Matrix<Scalar> out = xhat.array().rowwise() * gamma.value().row(0).array();
    out.rowwise() += beta.value().row(0);
    return x.tape()->record(std::move(out), {x, gamma, beta},
                            [x, gamma, beta, xhat, inv_std](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                              if (gamma.requires_grad()) t.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                              if (beta.requires_grad()) t.accumulate(beta, g.colwise().sum());
                              if (x.requires_grad()) {
                                t.accumulate(x, (g.array().rowwise() *
                                                 (gamma.value().row(0).array() * inv_std.array()))
                                                    .matrix());
                              }
                            });
  }
  if (x.rows() < 1) throw DimensionError("batch_norm: empty batch");
  RowVector<Scalar> mu = x.value().colwise().mean();
  Matrix<Scalar> centered = x.value().rowwise() - mu;
  RowVector<Scalar> var = centered.array().square().colwise().mean();
  if (batch_stats != nullptr) {
    batch_stats->mean = mu;
    batch_stats->var = var;
  }
  RowVector<Scalar> inv_std = (var.array() + eps).rsqrt();
  Matrix<Scalar> xhat = centered.array().rowwise() * inv_std.array();
  Matrix<Scalar> out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return x.tape()->record(std::move(out), {x, gamma, beta},
                          [x, gamma, beta, xhat, inv_std](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                            if (gamma.requires_grad()) t.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                            if (beta.requires_grad()) t.accumulate(beta, g.colwise().sum());
                            if (x.requires_grad()) {
                              Matrix<Scalar> dxhat = g.array().rowwise() * gamma.value().row(0).array();
                              t.accumulate(x, normalize_backward<Scalar>(dxhat, xhat, inv_std));
                            }
                          });
}

double grad_check(const ScalarFunction<double>& f, const Matrix<double>& x, double eps) {
  if (!(eps > 0)) throw ContractError("grad_check: eps must be positive");
  Matrix<double> analytic;
  {
    Tape<double> tape;
    auto xv = tape.variable(x);
    auto loss = f(tape, xv);
    tape.backward(loss);
    analytic = tape.grad(xv);
  }
  auto eval = [&](const Matrix<double>& at) {
    Tape<double> tape;
    auto xv = tape.constant(at);
    return f(tape, xv).item();
  };
  Matrix<double> numeric(x.rows(), x.cols());
  Matrix<double> probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + eps;
    const double up = eval(probe);
    probe.data()[i] = orig - eps;
    const double down = eval(probe);
    probe.data()[i] = orig;
    numeric.data()[i] = (up - down) / (2 * eps);
  }
  const double scale_floor = 1e-2 * numeric.cwiseAbs().maxCoeff();
  double worst = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double a = analytic.data()[i], n = numeric.data()[i];
    const double denom = std::max({std::abs(a), std::abs(n), scale_floor});
    if (denom == 0) continue;
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

#define XLST_INSTANTIATE(S)                                                                              \
  template class Tape<S>;                                                                                \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                                  \
  template Var<S> transpose(const Var<S>&);                                                              \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                     \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                                     \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                                     \
  template Var<S> add_row(const Var<S>&, const Var<S>&);                                                 \
  template Var<S> add_constant(const Var<S>&, const Matrix<S>&);                                         \
  template Var<S> scale(const Var<S>&, S);                                                               \
  template Var<S> mul_constant(const Var<S>&, const Matrix<S>&);                                         \
  template Var<S> relu(const Var<S>&);                                                                   \
  template Var<S> exp(const Var<S>&);                                                                    \
  template Var<S> log(const Var<S>&);                                                                    \
  template Var<S> softmax_rows(const Var<S>&);                                                           \
  template Var<S> log_softmax_rows(const Var<S>&);                                                       \
  template Var<S> sum(const Var<S>&);                                                                    \
  template Var<S> mean(const Var<S>&);                                                                   \
  template Var<S> concat_rows(std::span<const Var<S>>);                                                  \
  template Var<S> concat_cols(std::span<const Var<S>>);                                                  \
  template Var<S> slice_rows(const Var<S>&, Eigen::Index, Eigen::Index);                                 \
  template Var<S> slice_cols(const Var<S>&, Eigen::Index, Eigen::Index);                                 \
  template Var<S> reshape(const Var<S>&, Eigen::Index, Eigen::Index);                                    \
  template Var<S> gather(const Var<S>&, std::vector<Eigen::Index>, Eigen::Index, Eigen::Index);          \
  template Var<S> layer_norm_rows(const Var<S>&, const Var<S>&, const Var<S>&, S);                       \
  template Var<S> batch_norm_frames(const Var<S>&, const Var<S>&, const Var<S>&, bool, const RowVector<S>&, \
                                    const RowVector<S>&, BatchNormStats<S>*, S);

XLST_INSTANTIATE(float)
XLST_INSTANTIATE(double)

#undef XLST_INSTANTIATE

}  // namespace xlst
