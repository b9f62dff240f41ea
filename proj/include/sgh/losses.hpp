#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "sgh/common.hpp"
#include "sgh/netcore.hpp"

namespace sgh {

struct LossWithGrad {
  double value = 0.0;
  Matrix grad;
};

struct PairLossWithGrad {
  double value = 0.0;
  Matrix grad_anchor;     // w.r.t. g
  Matrix grad_augmented;  // w.r.t. g~
};

namespace detail {

/// Row-wise log-softmax, numerically stabilized.
inline Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

}  // namespace detail

/// Similarity-pairing loss. Row i of S holds g_i . g~_j for every j; the
/// target row is the label-agreement vector l1-normalized, so the self pair
/// and every same-identity pair share the probability mass. The value is the
/// mean over i of the soft-target cross entropy -sum_j Y_ij log softmax(S_i)_j.
/// No temperature is applied.
inline PairLossWithGrad sp_loss(const Matrix& g, const Matrix& g_aug, std::span<const int> labels) {
  const auto n = g.rows();
  if (n == 0) throw ValidationError("sp_loss needs a non-empty batch");
  if (g_aug.rows() != n || g_aug.cols() != g.cols() || static_cast<Eigen::Index>(labels.size()) != n) {
    throw ValidationError("sp_loss: g, g~ and labels must have matching batch sizes and widths");
  }
  const Matrix s = g * g_aug.transpose();
  Matrix target = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) target(i, j) = labels[i] == labels[j] ? 1.0 : 0.0;
    target.row(i) /= target.row(i).sum();
  }
  const Matrix logp = detail::log_softmax_rows(s);
  PairLossWithGrad out;
  out.value = -(target.array() * logp.array()).sum() / static_cast<double>(n);
  const Matrix ds = (logp.array().exp() - target.array()).matrix() / static_cast<double>(n);
  out.grad_anchor = ds * g_aug;
  out.grad_augmented = ds.transpose() * g;
  return out;
}

/// Mean squared activation over every supplied row and dimension.
inline LossWithGrad reg_loss(const Matrix& g_all) {
  if (g_all.size() == 0) throw ValidationError("reg_loss needs a non-empty input");
  const double count = static_cast<double>(g_all.size());
  return {g_all.squaredNorm() / count, 2.0 * g_all / count};
}

enum class QuantizationKind { kSquaredAbsolute, kDoubleSquared, kDoubleAbsolute };

inline QuantizationKind parse_quantization_kind(const std::string& s) {
  if (s == "squared_absolute" || s == "combined") return QuantizationKind::kSquaredAbsolute;
  if (s == "double_squared") return QuantizationKind::kDoubleSquared;
  if (s == "double_absolute") return QuantizationKind::kDoubleAbsolute;
  throw ValidationError("unknown quantization loss kind '" + s + "'");
}

/// Per-value quantization penalty: |1 - q^2|, (1 - q^2)^2 or |1 - |q||.
inline double quantization_penalty(double q, QuantizationKind kind) {
  switch (kind) {
    case QuantizationKind::kSquaredAbsolute: return std::abs(1.0 - q * q);
    case QuantizationKind::kDoubleSquared: return (1.0 - q * q) * (1.0 - q * q);
    case QuantizationKind::kDoubleAbsolute: return std::abs(1.0 - std::abs(q));
  }
  return 0.0;
}

/// Mean |1 - q^2| over all entries, evaluated on the pre-tanh code. The
/// subgradient at |q| = 1 is taken as 0.
inline LossWithGrad squared_quantization_loss(const Matrix& q) {
  if (q.size() == 0) throw ValidationError("squared_quantization_loss needs a non-empty input");
  const double count = static_cast<double>(q.size());
  LossWithGrad out;
  out.grad = Matrix(q.rows(), q.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    for (Eigen::Index j = 0; j < q.cols(); ++j) {
      const double r = 1.0 - q(i, j) * q(i, j);
      total += std::abs(r);
      const double sign = r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
      out.grad(i, j) = -2.0 * q(i, j) * sign / count;
    }
  }
  out.value = total / count;
  return out;
}

/// Mean penalty of one of the comparison curves (value only).
inline double alt_quantization_loss(const Matrix& q, QuantizationKind kind) {
  if (q.size() == 0) throw ValidationError("quantization loss needs a non-empty input");
  double total = 0.0;
  for (Eigen::Index i = 0; i < q.size(); ++i) total += quantization_penalty(q.data()[i], kind);
  return total / static_cast<double>(q.size());
}

inline double alt_quantization_loss(const Matrix& q, const std::string& kind) {
  return alt_quantization_loss(q, parse_quantization_kind(kind));
}

/// Mean softmax cross entropy of logits against integer labels.
inline LossWithGrad classification_loss(const Matrix& logits, std::span<const int> labels) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.rows()) {
    throw ValidationError("classification_loss: " + std::to_string(labels.size()) + " labels for " +
                          std::to_string(logits.rows()) + " rows");
  }
  if (logits.rows() == 0) throw ValidationError("classification_loss needs a non-empty batch");
  const double rows = static_cast<double>(logits.rows());
  const Matrix logp = detail::log_softmax_rows(logits);
  LossWithGrad out;
  out.grad = logp.array().exp().matrix();
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= logits.cols()) {
      throw ValidationError("classification_loss: label " + std::to_string(y) + " outside [0, " +
                            std::to_string(logits.cols()) + ")");
    }
    total -= logp(i, y);
    out.grad(i, y) -= 1.0;
  }
  out.grad /= rows;
  out.value = total / rows;
  return out;
}

struct LossWeights {
  double lambda1 = 0.0002;  // L_reg
  double lambda2 = 0.05;    // L_sQ
  bool operator==(const LossWeights&) const = default;
};

struct LossComponents {
  double sp = 0.0;
  double reg = 0.0;
  double sq = 0.0;
  double cls = 0.0;
};

inline double total_loss(const LossComponents& c, const LossWeights& w) {
  return c.sp + w.lambda1 * c.reg + w.lambda2 * c.sq + c.cls;
}

}  // namespace sgh
