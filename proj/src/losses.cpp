#include "xlst/losses.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace xlst {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

template <typename Scalar>
Matrix<double> log_softmax_double(const Matrix<Scalar>& logits) {
  Matrix<double> x = logits.template cast<double>();
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    x.row(r).array() -= lse;
  }
  return x;
}

void check_labels(const std::vector<int>& labels, Eigen::Index classes, int lo, const char* op) {
  for (int l : labels) {
    if (l < lo || l >= classes) {
      throw LabelError(std::string(op) + ": label " + std::to_string(l) + " outside [" + std::to_string(lo) + ", " +
                       std::to_string(classes) + ")");
    }
  }
}

}  // namespace

template <typename Scalar>
SimilarityLossValue<Scalar> similarity_loss_value(const Matrix<Scalar>& e, const Matrix<Scalar>& z,
                                                  Reduction reduction) {
  if (e.rows() != z.rows() || e.cols() != z.cols()) throw DimensionError("similarity_loss: shape mismatch");
  SimilarityLossValue<Scalar> v;
  v.per_frame.resize(static_cast<std::size_t>(e.rows()));
  for (Eigen::Index i = 0; i < e.rows(); ++i) {
    const Scalar ne = e.row(i).norm(), nz = z.row(i).norm();
    if (!(ne > Scalar(1e-12)) || !(nz > Scalar(1e-12))) {
      throw DegenerateFrameError("similarity_loss: frame " + std::to_string(i) + " has zero norm");
    }
    const Scalar cos = e.row(i).dot(z.row(i)) / (ne * nz);
    v.per_frame[static_cast<std::size_t>(i)] = Scalar(2) - Scalar(2) * cos;
    v.total += v.per_frame[static_cast<std::size_t>(i)];
  }
  if (reduction == Reduction::mean && e.rows() > 0) v.total /= static_cast<Scalar>(e.rows());
  return v;
}

template <typename Scalar>
Var<Scalar> similarity_loss(const Var<Scalar>& e, const Matrix<Scalar>& z, Reduction reduction) {
  const auto value = similarity_loss_value(e.value(), z, reduction);
  Matrix<Scalar> out(1, 1);
  out(0, 0) = value.total;
  const Scalar norm = reduction == Reduction::mean && e.rows() > 0 ? Scalar(1) / static_cast<Scalar>(e.rows())
                                                                    : Scalar(1);
  return e.tape()->record(std::move(out), {e}, [e, z, norm](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const Matrix<Scalar>& ev = e.value();
    Matrix<Scalar> de(ev.rows(), ev.cols());
    for (Eigen::Index i = 0; i < ev.rows(); ++i) {
      const Scalar ne = ev.row(i).norm(), nz = z.row(i).norm();
      const Scalar cos = ev.row(i).dot(z.row(i)) / (ne * nz);
      // d/de (2 - 2 cos) = -2/|e| (z/|z| - cos e/|e|)
      de.row(i) = (Scalar(-2) / ne) * (z.row(i) / nz - cos * ev.row(i) / ne);
    }
    t.accumulate(e, de * (g(0, 0) * norm));
  });
}

template <typename Scalar>
Var<Scalar> frame_cross_entropy(const Var<Scalar>& logits, const std::vector<int>& labels) {
  if (labels.empty()) throw LabelError("frame_cross_entropy: no labelled frames");
  if (static_cast<Eigen::Index>(labels.size()) > logits.rows()) {
    throw DimensionError("frame_cross_entropy: more labels than frames");
  }
  check_labels(labels, logits.cols(), 0, "frame_cross_entropy");
  auto logp = log_softmax_rows(logits);
  std::vector<Eigen::Index> idx(labels.size());
  for (std::size_t r = 0; r < labels.size(); ++r) idx[r] = static_cast<Eigen::Index>(r) * logits.cols() + labels[r];
  auto picked = gather(logp, std::move(idx), static_cast<Eigen::Index>(labels.size()), 1);
  return scale(mean(picked), Scalar(-1));
}

template <typename Scalar>
Var<Scalar> frame_cross_entropy_mixup(const Var<Scalar>& logits, const std::vector<int>& labels1,
                                      const std::vector<int>& labels2, double beta) {
  if (!(beta >= 0 && beta <= 1)) throw ContractError("frame_cross_entropy: mixup weight outside [0, 1]");
  auto a = frame_cross_entropy(logits, labels1);
  auto b = frame_cross_entropy(logits, labels2);
  return add(scale(a, static_cast<Scalar>(beta)), scale(b, static_cast<Scalar>(1 - beta)));
}

int ctc_min_frames(const std::vector<int>& labels) {
  int n = static_cast<int>(labels.size());
  for (std::size_t i = 1; i < labels.size(); ++i) n += labels[i] == labels[i - 1] ? 1 : 0;
  return n;
}

template <typename Scalar>
CtcLattice ctc_lattice(const Matrix<Scalar>& logits, const std::vector<int>& labels) {
  const Eigen::Index frames = logits.rows();
  check_labels(labels, logits.cols(), 1, "ctc");
  if (frames < ctc_min_frames(labels) || frames == 0) {
    throw InfeasibleAlignmentError("ctc: " + std::to_string(frames) + " frames cannot emit " +
                                   std::to_string(labels.size()) + " labels (need " +
                                   std::to_string(std::max(1, ctc_min_frames(labels))) + ")");
  }
  CtcLattice lat;
  lat.extended.reserve(2 * labels.size() + 1);
  lat.extended.push_back(0);
  for (int l : labels) {
    lat.extended.push_back(l);
    lat.extended.push_back(0);
  }
  const auto states = static_cast<Eigen::Index>(lat.extended.size());
  const Matrix<double> logp = log_softmax_double(logits);
  auto skip_allowed = [&](Eigen::Index s) {
    return s >= 2 && lat.extended[static_cast<std::size_t>(s)] != 0 &&
           lat.extended[static_cast<std::size_t>(s)] != lat.extended[static_cast<std::size_t>(s - 2)];
  };
  auto emit = [&](Eigen::Index t, Eigen::Index s) { return logp(t, lat.extended[static_cast<std::size_t>(s)]); };

  lat.log_alpha = Matrix<double>::Constant(frames, states, kNegInf);
  lat.log_alpha(0, 0) = emit(0, 0);
  if (states > 1) lat.log_alpha(0, 1) = emit(0, 1);
  for (Eigen::Index t = 1; t < frames; ++t) {
    for (Eigen::Index s = 0; s < states; ++s) {
      double a = lat.log_alpha(t - 1, s);
      if (s >= 1) a = log_add(a, lat.log_alpha(t - 1, s - 1));
      if (skip_allowed(s)) a = log_add(a, lat.log_alpha(t - 1, s - 2));
      lat.log_alpha(t, s) = a == kNegInf ? kNegInf : a + emit(t, s);
    }
  }
  lat.log_beta = Matrix<double>::Constant(frames, states, kNegInf);
  lat.log_beta(frames - 1, states - 1) = 0;
  if (states > 1) lat.log_beta(frames - 1, states - 2) = 0;
  for (Eigen::Index t = frames - 1; t-- > 0;) {
    for (Eigen::Index s = 0; s < states; ++s) {
      double b = lat.log_beta(t + 1, s) + emit(t + 1, s);
      if (s + 1 < states) b = log_add(b, lat.log_beta(t + 1, s + 1) + emit(t + 1, s + 1));
      if (s + 2 < states && skip_allowed(s + 2)) b = log_add(b, lat.log_beta(t + 1, s + 2) + emit(t + 1, s + 2));
      lat.log_beta(t, s) = b;
    }
  }
  lat.forward_log_likelihood = lat.log_alpha(frames - 1, states - 1);
  if (states > 1) lat.forward_log_likelihood = log_add(lat.forward_log_likelihood, lat.log_alpha(frames - 1, states - 2));
  lat.backward_log_likelihood = emit(0, 0) + lat.log_beta(0, 0);
  if (states > 1) lat.backward_log_likelihood = log_add(lat.backward_log_likelihood, emit(0, 1) + lat.log_beta(0, 1));
  if (!std::isfinite(lat.forward_log_likelihood)) {
    throw InfeasibleAlignmentError("ctc: labels have zero probability under the logits");
  }
  return lat;
}

template <typename Scalar>
double ctc_loss_value(const Matrix<Scalar>& logits, const std::vector<int>& labels) {
  return -ctc_lattice(logits, labels).forward_log_likelihood;
}

template <typename Scalar>
Var<Scalar> ctc_loss(const Var<Scalar>& logits, const std::vector<int>& labels) {
  CtcLattice lat = ctc_lattice(logits.value(), labels);
  const double log_p = lat.forward_log_likelihood;
  Matrix<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(-log_p);
  // d(-log p)/d u_tk = softmax_tk - sum_{s: ext[s] = k} alpha_t(s) beta_t(s) / p
  Matrix<double> grad = log_softmax_double(logits.value()).array().exp().matrix();
  for (Eigen::Index t = 0; t < grad.rows(); ++t) {
    for (Eigen::Index s = 0; s < lat.log_alpha.cols(); ++s) {
      const double occ = lat.log_alpha(t, s) + lat.log_beta(t, s);
      if (occ == kNegInf) continue;
      grad(t, lat.extended[static_cast<std::size_t>(s)]) -= std::exp(occ - log_p);
    }
  }
  Matrix<Scalar> dlogits = grad.cast<Scalar>();
  return logits.tape()->record(std::move(out), {logits}, [logits, dlogits](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(logits, dlogits * g(0, 0));
  });
}

double ctc_brute_force(const Matrix<double>& logits, const std::vector<int>& labels) {
  const Eigen::Index frames = logits.rows();
  const Eigen::Index classes = logits.cols();
  if (frames > 8 || classes - 1 > 5) {
    throw OracleScaleError("ctc_brute_force: enumeration limited to T <= 8 and V <= 5");
  }
  check_labels(labels, classes, 1, "ctc_brute_force");
  const Matrix<double> logp = log_softmax_double(logits);
  std::vector<int> path(static_cast<std::size_t>(frames), 0);
  double total = kNegInf;
  bool any = false;
  for (;;) {
    std::vector<int> collapsed;
    int prev = -1;
    for (int k : path) {
      if (k != prev && k != 0) collapsed.push_back(k);
      prev = k;
    }
    if (collapsed == labels) {
      double lp = 0;
      for (Eigen::Index t = 0; t < frames; ++t) lp += logp(t, path[static_cast<std::size_t>(t)]);
      total = log_add(total, lp);
      any = true;
    }
    Eigen::Index pos = 0;
    while (pos < frames && ++path[static_cast<std::size_t>(pos)] == classes) path[static_cast<std::size_t>(pos++)] = 0;
    if (pos == frames) break;
  }
  if (!any) throw InfeasibleAlignmentError("ctc_brute_force: no path collapses to the labels");
  return -total;
}

template <typename Scalar>
std::vector<int> ctc_greedy_decode(const Matrix<Scalar>& logits) {
  std::vector<int> out;
  int prev = -1;
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    Eigen::Index best = 0;
    logits.row(t).maxCoeff(&best);
    const int k = static_cast<int>(best);
    if (k != prev && k != 0) out.push_back(k);
    prev = k;
  }
  return out;
}

#define XLST_INSTANTIATE(S)                                                                                     \
  template SimilarityLossValue<S> similarity_loss_value<S>(const Matrix<S>&, const Matrix<S>&, Reduction);     \
  template Var<S> similarity_loss<S>(const Var<S>&, const Matrix<S>&, Reduction);                              \
  template Var<S> frame_cross_entropy<S>(const Var<S>&, const std::vector<int>&);                              \
  template Var<S> frame_cross_entropy_mixup<S>(const Var<S>&, const std::vector<int>&, const std::vector<int>&, \
                                               double);                                                        \
  template CtcLattice ctc_lattice<S>(const Matrix<S>&, const std::vector<int>&);                               \
  template double ctc_loss_value<S>(const Matrix<S>&, const std::vector<int>&);                                \
  template Var<S> ctc_loss<S>(const Var<S>&, const std::vector<int>&);                                         \
  template std::vector<int> ctc_greedy_decode<S>(const Matrix<S>&);

XLST_INSTANTIATE(float)
XLST_INSTANTIATE(double)

#undef XLST_INSTANTIATE

}  // namespace xlst
