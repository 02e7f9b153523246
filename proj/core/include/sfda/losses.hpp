#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "sfda/errors.hpp"
#include "sfda/ops.hpp"

namespace sfda {

struct LossConfig {
  double smoothing = 0.1;  // label-smoothing factor of the source CE
  double alpha_sl = 0.3;   // weight of the self-labeling loss
  double beta_kd = 1.0;    // weight of the knowledge-distillation loss

  void validate() const {
    if (smoothing < 0.0 || smoothing >= 1.0) {
      throw ConfigError("loss: smoothing must be in [0, 1)");
    }
    if (alpha_sl < 0.0 || beta_kd < 0.0) {
      throw ConfigError("loss: alpha_sl and beta_kd must be nonnegative");
    }
  }
};

namespace detail {

/// mean_i ( -sum_k targets[i,k] * log_softmax(logits)[i,k] )
/// Shared by the smoothed source CE, the self-labeling CE and the KD loss,
/// so a one-hot soft target reproduces the hard-label loss bit for bit.
template <class S>
Tensor<S> soft_target_cross_entropy(const Tensor<S>& logits,
                                    const Tensor<S>& targets) {
  Tensor<S> lsm = log_softmax(logits, 1);
  return scale(sum_all(mul(targets, lsm)),
               -1.0 / static_cast<double>(logits.dim(0)));
}

template <class S>
Tensor<S> one_hot_rows(const Tensor<S>& logits, const std::vector<int>& labels,
                       const char* op, double on = 1.0, double off = 0.0) {
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (labels.size() != b) {
    throw ContractError(std::string(op) + ": " + std::to_string(labels.size()) +
                        " labels for batch of " + std::to_string(b));
  }
  Tensor<S> t = Tensor<S>::full({b, k}, static_cast<S>(off));
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw ContractError(std::string(op) + ": label " +
                          std::to_string(labels[i]) + " out of range [0, " +
                          std::to_string(k) + ")");
    }
    t.data()[i * k + static_cast<std::size_t>(labels[i])] = static_cast<S>(on);
  }
  return t;
}

template <class S>
void require_logits(const Tensor<S>& logits, const char* op) {
  if (logits.rank() != 2 || logits.dim(0) == 0) {
    throw ShapeError(std::string(op) + ": expected nonempty [B,K] logits, got " +
                     shape_str(logits.shape()));
  }
}

}  // namespace detail

/// Label-smoothing cross-entropy: targets (1-smoothing) on the true class
/// plus smoothing/K everywhere.
template <class S>
Tensor<S> ce_smooth(const Tensor<S>& logits, const std::vector<int>& labels,
                    double smoothing) {
  detail::require_logits(logits, "ce_smooth");
  if (smoothing < 0.0 || smoothing >= 1.0) {
    throw ConfigError("ce_smooth: smoothing must be in [0, 1)");
  }
  const double k = static_cast<double>(logits.dim(1));
  Tensor<S> targets = detail::one_hot_rows<S>(
      logits, labels, "ce_smooth", (1.0 - smoothing) + smoothing / k,
      smoothing / k);
  return detail::soft_target_cross_entropy(logits, targets);
}

/// Information-maximization loss: mean per-sample prediction entropy plus
/// sum_k pbar_k log pbar_k, where pbar is the batch-mean softmax. Uniform
/// predictions give exactly 0; a confident, class-balanced batch approaches
/// -log K.
template <class S>
Tensor<S> im_loss(const Tensor<S>& logits) {
  detail::require_logits(logits, "im_loss");
  Tensor<S> probs = softmax(logits, 1);
  Tensor<S> lsm = log_softmax(logits, 1);
  // -E_i sum_k p log p, computed as p * log_softmax so saturated rows stay
  // finite and contribute ~0
  Tensor<S> entropy = scale(sum_all(mul(probs, lsm)),
                            -1.0 / static_cast<double>(logits.dim(0)));
  Tensor<S> marginal = mean_axis(probs, 0);
  Tensor<S> diversity = sum_all(xlogx(marginal));
  return add(entropy, diversity);
}

/// Self-labeling loss: plain cross-entropy against hard pseudo-labels.
template <class S>
Tensor<S> sl_loss(const Tensor<S>& student_logits,
                  const std::vector<int>& hard_labels) {
  detail::require_logits(student_logits, "sl_loss");
  Tensor<S> targets =
      detail::one_hot_rows<S>(student_logits, hard_labels, "sl_loss");
  return detail::soft_target_cross_entropy(student_logits, targets);
}

/// Knowledge-distillation loss: cross-entropy of the student's log-softmax
/// under the teacher's soft pseudo-labels. Each soft row must sum to 1.
template <class S>
Tensor<S> kd_loss(const Tensor<S>& student_logits,
                  const Tensor<S>& soft_labels) {
  detail::require_logits(student_logits, "kd_loss");
  if (soft_labels.shape() != student_logits.shape()) {
    throw ShapeError("kd_loss: soft labels " + shape_str(soft_labels.shape()) +
                     " vs logits " + shape_str(student_logits.shape()));
  }
  const std::size_t b = soft_labels.dim(0), k = soft_labels.dim(1);
  for (std::size_t i = 0; i < b; ++i) {
    S row(0);
    for (std::size_t j = 0; j < k; ++j) row += soft_labels.data()[i * k + j];
    if (std::abs(static_cast<double>(row) - 1.0) > 1e-6) {
      throw ContractError("kd_loss: soft label row " + std::to_string(i) +
                          " sums to " + std::to_string(static_cast<double>(row)));
    }
  }
  return detail::soft_target_cross_entropy(student_logits, soft_labels);
}

/// L_target = L_im + alpha_sl * L_sl + beta_kd * L_kd
template <class S>
Tensor<S> total_target_loss(const Tensor<S>& im, const Tensor<S>& sl,
                            const Tensor<S>& kd, const LossConfig& cfg) {
  cfg.validate();
  return add(im, add(scale(sl, cfg.alpha_sl), scale(kd, cfg.beta_kd)));
}

}  // namespace sfda
