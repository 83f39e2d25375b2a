#pragma once

#include "sfda/common.hpp"
#include "sfda/config.hpp"
#include "sfda/image.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace sfda {

inline void check_finite_rows(const Matrix& m, const char* what) {
  for (Eigen::Index b = 0; b < m.rows(); ++b)
    for (Eigen::Index k = 0; k < m.cols(); ++k)
      if (!std::isfinite(m(b, k)))
        throw NumericError(std::string(what) + ": non-finite value in batch row " +
                           std::to_string(b));
}

inline void check_row_stochastic(const Matrix& m, const char* what, double tol = 1e-6) {
  for (Eigen::Index b = 0; b < m.rows(); ++b) {
    double sum = 0.0;
    for (Eigen::Index k = 0; k < m.cols(); ++k) {
      double v = m(b, k);
      if (!(v >= -1e-9 && v <= 1.0 + 1e-9))
        throw ValidationError(std::string(what) + ": entry out of [0,1] in row " +
                              std::to_string(b));
      sum += v;
    }
    if (std::abs(sum - 1.0) > tol)
      throw ValidationError(std::string(what) + ": row " + std::to_string(b) +
                            " sums to " + std::to_string(sum));
  }
}

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index b = 0; b < logits.rows(); ++b) {
    double mx = logits.row(b).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index k = 0; k < logits.cols(); ++k) {
      out(b, k) = std::exp(logits(b, k) - mx);
      sum += out(b, k);
    }
    out.row(b) /= sum;
  }
  return out;
}

inline Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index b = 0; b < logits.rows(); ++b) {
    double mx = logits.row(b).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index k = 0; k < logits.cols(); ++k) sum += std::exp(logits(b, k) - mx);
    double lse = mx + std::log(sum);
    for (Eigen::Index k = 0; k < logits.cols(); ++k) out(b, k) = logits(b, k) - lse;
  }
  return out;
}

// B x K row-stochastic matrix of softmax outputs for one batch.
struct ClassificationResponse {
  Matrix a;

  explicit ClassificationResponse(Matrix m) : a(std::move(m)) {
    if (a.cols() < 1) throw ValidationError("ClassificationResponse: needs at least one class");
    check_row_stochastic(a, "ClassificationResponse");
  }

  int batch_size() const { return static_cast<int>(a.rows()); }
  int num_classes() const { return static_cast<int>(a.cols()); }
};

inline double frobenius_norm(const ClassificationResponse& r) { return r.a.norm(); }

// Loss whose minimization maximizes the Frobenius approximation of the
// nuclear norm, sharpening predictions while preserving class spread.
inline double nm_loss(const ClassificationResponse& r) {
  if (r.batch_size() == 0) throw ValidationError("nm_loss: empty batch");
  return -frobenius_norm(r);
}

// Gradient of nm_loss with respect to the logits producing A = softmax(Z).
inline std::pair<double, Matrix> nm_loss_grad(const Matrix& logits) {
  if (logits.rows() == 0) throw ValidationError("nm_loss: empty batch");
  Matrix a = softmax_rows(logits);
  double fro = a.norm();
  Matrix dA = -a / fro;
  Matrix dZ(logits.rows(), logits.cols());
  for (Eigen::Index b = 0; b < logits.rows(); ++b) {
    double dot = dA.row(b).dot(a.row(b));
    dZ.row(b) = a.row(b).cwiseProduct(dA.row(b) - Eigen::RowVectorXd::Constant(logits.cols(), dot));
  }
  return {-fro, dZ};
}

struct NuclearCheck {
  double fro = 0.0;
  double nuc = 0.0;
  int rank = 0;
};

// Diagnostic: sum of singular values plus the sandwich check against the
// Frobenius norm. Never used in training gradients.
inline NuclearCheck nuclear_norm_check(const Matrix& a) {
  check_finite_rows(a, "nuclear_norm_check");
  Eigen::JacobiSVD<Matrix> svd(a);
  if (svd.info() != Eigen::Success) throw NumericError("nuclear_norm_check: SVD did not converge");
  const auto& sv = svd.singularValues();
  NuclearCheck out;
  out.fro = a.norm();
  out.nuc = sv.sum();
  double tol = sv.size() > 0
                   ? sv(0) * std::max(a.rows(), a.cols()) * std::numeric_limits<double>::epsilon()
                   : 0.0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > tol) ++out.rank;
  double upper = std::sqrt(static_cast<double>(out.rank)) * out.fro;
  if (out.fro > out.nuc + 1e-8 || out.nuc > upper + 1e-8)
    throw NumericError("nuclear_norm_check: norm sandwich violated");
  return out;
}

inline double soft_cross_entropy(const Matrix& logits, const Matrix& targets) {
  if (logits.rows() != targets.rows() || logits.cols() != targets.cols())
    throw ValidationError("soft_cross_entropy: shape mismatch");
  Matrix logp = log_softmax_rows(logits);
  double loss = 0.0;
  for (Eigen::Index b = 0; b < logits.rows(); ++b)
    for (Eigen::Index k = 0; k < logits.cols(); ++k)
      if (targets(b, k) != 0.0) loss -= targets(b, k) * logp(b, k);
  return loss / static_cast<double>(logits.rows());
}

inline std::pair<double, Matrix> soft_cross_entropy_grad(const Matrix& logits,
                                                         const Matrix& targets) {
  double loss = soft_cross_entropy(logits, targets);
  Matrix dZ = (softmax_rows(logits) - targets) / static_cast<double>(logits.rows());
  return {loss, dZ};
}

// Cross-entropy against hard pseudo labels (indicator targets).
inline double pseudo_ce_loss(const Matrix& logits, const std::vector<int>& hard) {
  if (static_cast<Eigen::Index>(hard.size()) != logits.rows())
    throw ValidationError("pseudo_ce_loss: label count does not match batch");
  Matrix logp = log_softmax_rows(logits);
  double loss = 0.0;
  for (Eigen::Index b = 0; b < logits.rows(); ++b) {
    int y = hard[static_cast<std::size_t>(b)];
    if (y < 0 || y >= logits.cols())
      throw ValidationError("pseudo_ce_loss: label " + std::to_string(y) + " out of range");
    loss -= logp(b, y);
  }
  return loss / static_cast<double>(logits.rows());
}

// Soft variant, used with refined pseudo labels.
inline double pseudo_ce_loss(const Matrix& logits, const Matrix& soft) {
  check_row_stochastic(soft, "pseudo_ce_loss targets");
  return soft_cross_entropy(logits, soft);
}

inline std::pair<double, Matrix> pseudo_ce_grad(const Matrix& logits, const Matrix& soft) {
  check_row_stochastic(soft, "pseudo_ce_loss targets");
  return soft_cross_entropy_grad(logits, soft);
}

inline std::pair<double, Matrix> pseudo_ce_grad(const Matrix& logits,
                                                const std::vector<int>& hard) {
  Matrix onehot = Matrix::Zero(logits.rows(), logits.cols());
  for (Eigen::Index b = 0; b < logits.rows(); ++b) {
    int y = hard[static_cast<std::size_t>(b)];
    if (y < 0 || y >= logits.cols())
      throw ValidationError("pseudo_ce_loss: label " + std::to_string(y) + " out of range");
    onehot(b, y) = 1.0;
  }
  return soft_cross_entropy_grad(logits, onehot);
}

// Elementwise quotient of dataset-level and batch-level mean predictions.
struct ExpectationRatio {
  Vector global_mean;
  Vector batch_mean;
  Vector ratio;

  ExpectationRatio(Vector global, Vector batch)
      : global_mean(std::move(global)), batch_mean(std::move(batch)) {
    if (global_mean.size() != batch_mean.size())
      throw ValidationError("ExpectationRatio: dimension mismatch");
    for (Eigen::Index k = 0; k < global_mean.size(); ++k) {
      if (global_mean(k) <= 0.0)
        throw ValidationError("ExpectationRatio: global mean of class " + std::to_string(k) +
                              " is not strictly positive");
      if (batch_mean(k) <= 0.0)
        throw NumericError("ExpectationRatio: batch mean of class " + std::to_string(k) +
                           " is zero");
    }
    ratio = global_mean.cwiseQuotient(batch_mean);
  }
};

// Exponential moving average of weak-branch batch means, refreshed by a
// full-dataset pass at epoch boundaries.
struct GlobalMeanTracker {
  double momentum = 0.9;
  Vector mean;

  explicit GlobalMeanTracker(double m = 0.9) : momentum(m) {}

  void reset(const Vector& full_mean) { mean = full_mean; }

  void update(const Vector& batch_mean) {
    if (mean.size() == 0)
      mean = batch_mean;
    else
      mean = momentum * mean + (1.0 - momentum) * batch_mean;
  }

  bool initialized() const { return mean.size() != 0; }
};

inline Vector batch_mean_rows(const Matrix& probs) {
  return probs.colwise().mean().transpose();
}

// Distribution-corrected weak-branch predictions: softmax of the weak row
// scaled by the expectation ratio. These rows act as soft ground truth.
inline Matrix consistency_targets(const Matrix& weak_probs, const Vector& global_mean) {
  check_row_stochastic(weak_probs, "consistency weak branch");
  ExpectationRatio er(global_mean, batch_mean_rows(weak_probs));
  Matrix scaled = weak_probs.array().rowwise() * er.ratio.transpose().array();
  return softmax_rows(scaled);
}

// Soft cross-entropy of the strong branch against normalized weak targets.
// Gradients flow only through the strong branch.
inline double consistency_loss(const Matrix& weak_probs, const Matrix& strong_probs,
                               const Vector& global_mean) {
  if (weak_probs.rows() != strong_probs.rows() || weak_probs.cols() != strong_probs.cols())
    throw ValidationError("consistency_loss: branch shape mismatch");
  check_row_stochastic(strong_probs, "consistency strong branch");
  Matrix targets = consistency_targets(weak_probs, global_mean);
  double loss = 0.0;
  for (Eigen::Index b = 0; b < targets.rows(); ++b)
    for (Eigen::Index k = 0; k < targets.cols(); ++k)
      if (targets(b, k) != 0.0) loss -= targets(b, k) * std::log(strong_probs(b, k));
  return loss / static_cast<double>(targets.rows());
}

inline std::pair<double, Matrix> consistency_grad(const Matrix& weak_probs,
                                                  const Matrix& strong_logits,
                                                  const Vector& global_mean) {
  Matrix targets = consistency_targets(weak_probs, global_mean);
  return soft_cross_entropy_grad(strong_logits, targets);
}

inline double total_loss(double nm, double pl, double cons, const LossWeights& w) {
  w.validate();
  if (!std::isfinite(nm) || !std::isfinite(pl) || !std::isfinite(cons))
    throw NumericError("total_loss: component loss is not finite");
  return w.lambda_nm * nm + w.lambda_pl * pl + w.lambda_cons * cons;
}

// Convex combination of two images and their soft labels.
inline std::pair<Image, Vector> mixup_pair(const Image& xi, const Vector& yi, const Image& xj,
                                           const Vector& yj, double lam) {
  if (!(lam >= 0.0 && lam <= 1.0)) throw ValidationError("mixup_pair: lambda must be in [0,1]");
  if (!xi.same_shape(xj)) throw ValidationError("mixup_pair: image shape mismatch");
  if (yi.size() != yj.size()) throw ValidationError("mixup_pair: label dimension mismatch");
  check_row_stochastic(yi.transpose(), "mixup label i");
  check_row_stochastic(yj.transpose(), "mixup label j");
  Image mixed(xi.c, xi.h, xi.w);
  for (std::size_t p = 0; p < xi.px.size(); ++p)
    mixed.px[p] = lam * xi.px[p] + (1.0 - lam) * xj.px[p];
  Vector label = lam * yi + (1.0 - lam) * yj;
  return {std::move(mixed), std::move(label)};
}

// MixUp knowledge distillation: weighted cross-entropy against the two
// teacher labels of a mixed sample. Equals the cross-entropy against the
// mixed label by linearity in the target.
inline double mkd_loss(const Matrix& student_logits, const Matrix& yi, const Matrix& yj,
                       double lam) {
  if (!(lam >= 0.0 && lam <= 1.0)) throw ValidationError("mkd_loss: lambda must be in [0,1]");
  check_row_stochastic(yi, "mkd label i");
  check_row_stochastic(yj, "mkd label j");
  return lam * soft_cross_entropy(student_logits, yi) +
         (1.0 - lam) * soft_cross_entropy(student_logits, yj);
}

inline std::pair<double, Matrix> mkd_grad(const Matrix& student_logits, const Matrix& yi,
                                          const Matrix& yj, double lam) {
  double loss = mkd_loss(student_logits, yi, yj, lam);
  Matrix mixed = lam * yi + (1.0 - lam) * yj;
  Matrix dZ = (softmax_rows(student_logits) - mixed) / static_cast<double>(student_logits.rows());
  return {loss, dZ};
}

// Reference information-maximization baseline: mean per-sample entropy minus
// entropy of the mean prediction. Selectable instead of nm for comparisons.
inline std::pair<double, Matrix> im_loss_grad(const Matrix& logits) {
  if (logits.rows() == 0) throw ValidationError("im_loss: empty batch");
  Matrix p = softmax_rows(logits);
  Matrix logp = log_softmax_rows(logits);
  const double b = static_cast<double>(logits.rows());
  double ent = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index k = 0; k < p.cols(); ++k) ent -= p(i, k) * logp(i, k);
  ent /= b;
  Vector m = batch_mean_rows(p);
  double div = 0.0;
  for (Eigen::Index k = 0; k < m.size(); ++k)
    if (m(k) > 0.0) div -= m(k) * std::log(m(k));
  double loss = ent - div;
  // dL/dp_{ik} = (log m_k - log p_{ik}) / B, then through softmax.
  Matrix dP(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i)
    for (Eigen::Index k = 0; k < p.cols(); ++k)
      dP(i, k) = (std::log(std::max(m(k), 1e-300)) - logp(i, k)) / b;
  Matrix dZ(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    double dot = dP.row(i).dot(p.row(i));
    dZ.row(i) = p.row(i).cwiseProduct(dP.row(i) - Eigen::RowVectorXd::Constant(p.cols(), dot));
  }
  return {loss, dZ};
}

}  // namespace sfda
