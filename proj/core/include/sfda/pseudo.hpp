#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "sfda/errors.hpp"
#include "sfda/tensor.hpp"

namespace sfda {

/// K class centroids in bottleneck-feature space. round 0 centroids are
/// softmax-weighted means, round 1 centroids are hard-assignment means.
/// A class that receives no mass keeps its previous row and is flagged.
template <class S>
struct Centroids {
  Tensor<S> mu;                     // K x d
  std::vector<std::size_t> counts;  // per-class assignment counts (round 1)
  int round = 0;
  std::vector<char> empty_classes;  // 1 when the class had no mass

  std::size_t num_classes() const { return mu.dim(0); }
  std::size_t feature_dim() const { return mu.dim(1); }
};

template <class S>
struct PseudoLabelSet {
  std::vector<int> hard;  // N
  Tensor<S> soft;         // N x K, rows sum to 1
  double tau = 0.1;
};

namespace detail {

template <class S>
double norm2(const S* v, std::size_t d) {
  double acc = 0;
  for (std::size_t i = 0; i < d; ++i) {
    acc += static_cast<double>(v[i]) * static_cast<double>(v[i]);
  }
  return std::sqrt(acc);
}

/// Cosine similarity; the caller guarantees nonzero norms.
template <class S>
double cosine(const S* a, double na, const S* b, double nb, std::size_t d) {
  double dot = 0;
  for (std::size_t i = 0; i < d; ++i) {
    dot += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return dot / (na * nb);
}

template <class S>
void require_features(const Tensor<S>& features, const char* op) {
  if (features.rank() != 2 || features.dim(0) == 0) {
    throw ShapeError(std::string(op) + ": expected nonempty [N,d] features, got " +
                     shape_str(features.shape()));
  }
}

}  // namespace detail

/// Round-0 centroids: mu_k = sum_i probs[i,k] * f_i / sum_i probs[i,k].
/// A class whose total weight falls below 1e-12 is flagged empty and keeps
/// a zero row.
template <class S>
Centroids<S> initial_centroids(const Tensor<S>& features,
                               const Tensor<S>& probs) {
  detail::require_features(features, "initial_centroids");
  if (probs.rank() != 2 || probs.dim(0) != features.dim(0)) {
    throw ShapeError("initial_centroids: probs " + shape_str(probs.shape()) +
                     " vs features " + shape_str(features.shape()));
  }
  const std::size_t n = features.dim(0), d = features.dim(1), k = probs.dim(1);
  Centroids<S> c;
  c.mu = Tensor<S>::zeros({k, d});
  c.counts.assign(k, 0);
  c.round = 0;
  c.empty_classes.assign(k, 0);
  for (std::size_t cls = 0; cls < k; ++cls) {
    double total = 0;
    std::vector<double> acc(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double w = static_cast<double>(probs.data()[i * k + cls]);
      total += w;
      const S* f = features.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) acc[j] += w * static_cast<double>(f[j]);
    }
    if (total < 1e-12) {
      c.empty_classes[cls] = 1;
      continue;
    }
    S* row = c.mu.data() + cls * d;
    for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<S>(acc[j] / total);
  }
  return c;
}

/// Nearest-centroid labels under cosine distance 1 - cos(f, mu_k); ties go
/// to the smallest class index. Zero-row (never-populated) centroids do not
/// participate.
template <class S>
std::vector<int> assign_nearest(const Tensor<S>& features,
                                const Centroids<S>& centroids) {
  detail::require_features(features, "assign_nearest");
  if (centroids.mu.dim(1) != features.dim(1)) {
    throw ShapeError("assign_nearest: centroid dim " +
                     shape_str(centroids.mu.shape()) + " vs features " +
                     shape_str(features.shape()));
  }
  const std::size_t n = features.dim(0), d = features.dim(1);
  const std::size_t k = centroids.num_classes();
  std::vector<double> cnorm(k, 0.0);
  bool any = false;
  for (std::size_t cls = 0; cls < k; ++cls) {
    cnorm[cls] = detail::norm2(centroids.mu.data() + cls * d, d);
    if (!std::isfinite(cnorm[cls])) {
      throw ContractError("assign_nearest: centroid " + std::to_string(cls) +
                          " is not finite");
    }
    any = any || cnorm[cls] > 0.0;
  }
  if (!any) throw ContractError("assign_nearest: all centroids are empty");

  std::vector<int> labels(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const S* f = features.data() + i * d;
    const double fn = detail::norm2(f, d);
    if (fn == 0.0) {
      throw ContractError("assign_nearest: zero-norm feature vector at row " +
                          std::to_string(i));
    }
    double best = 0;
    int best_k = -1;
    for (std::size_t cls = 0; cls < k; ++cls) {
      if (cnorm[cls] == 0.0) continue;
      const double dist =
          1.0 - detail::cosine(f, fn, centroids.mu.data() + cls * d,
                               cnorm[cls], d);
      if (best_k < 0 || dist < best) {
        best = dist;
        best_k = static_cast<int>(cls);
      }
    }
    labels[i] = best_k;
  }
  return labels;
}

/// One refinement round: mu_k becomes the plain mean of the features whose
/// hard label is k (an empty class keeps its round-0 row), then labels are
/// reassigned by nearest centroid. Exactly one round is executed.
template <class S>
std::pair<Centroids<S>, std::vector<int>> refine_once(
    const Tensor<S>& features, const Centroids<S>& round0,
    const std::vector<int>& labels) {
  detail::require_features(features, "refine_once");
  const std::size_t n = features.dim(0), d = features.dim(1);
  const std::size_t k = round0.num_classes();
  if (labels.size() != n) {
    throw ContractError("refine_once: " + std::to_string(labels.size()) +
                        " labels for " + std::to_string(n) + " samples");
  }
  Centroids<S> c;
  c.mu = round0.mu.clone();
  c.counts.assign(k, 0);
  c.round = 1;
  c.empty_classes.assign(k, 0);

  std::vector<std::vector<double>> acc(k, std::vector<double>(d, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = labels[i];
    if (cls < 0 || static_cast<std::size_t>(cls) >= k) {
      throw ContractError("refine_once: label " + std::to_string(cls) +
                          " out of range [0, " + std::to_string(k) + ")");
    }
    c.counts[static_cast<std::size_t>(cls)]++;
    const S* f = features.data() + i * d;
    auto& a = acc[static_cast<std::size_t>(cls)];
    for (std::size_t j = 0; j < d; ++j) a[j] += static_cast<double>(f[j]);
  }
  for (std::size_t cls = 0; cls < k; ++cls) {
    if (c.counts[cls] == 0) {
      c.empty_classes[cls] = 1;  // keep the round-0 row
      continue;
    }
    S* row = c.mu.data() + cls * d;
    for (std::size_t j = 0; j < d; ++j) {
      row[j] = static_cast<S>(acc[cls][j] / static_cast<double>(c.counts[cls]));
    }
  }
  std::vector<int> refined = assign_nearest(features, c);
  return {std::move(c), std::move(refined)};
}

/// Temperature softmax over cosine similarities to the round-1 centroids:
/// soft[i,k] = exp(cos(f_i, mu_k)/tau) / sum_j exp(cos(f_i, mu_j)/tau).
/// A zero-row centroid enters with similarity -1 (farthest possible).
template <class S>
Tensor<S> soft_labels(const Tensor<S>& features, const Centroids<S>& centroids,
                      double tau) {
  detail::require_features(features, "soft_labels");
  if (!(tau > 0.0)) {
    throw ConfigError("soft_labels: temperature must be positive, got " +
                      std::to_string(tau));
  }
  if (centroids.mu.dim(1) != features.dim(1)) {
    throw ShapeError("soft_labels: centroid dim " +
                     shape_str(centroids.mu.shape()) + " vs features " +
                     shape_str(features.shape()));
  }
  const std::size_t n = features.dim(0), d = features.dim(1);
  const std::size_t k = centroids.num_classes();
  std::vector<double> cnorm(k, 0.0);
  for (std::size_t cls = 0; cls < k; ++cls) {
    cnorm[cls] = detail::norm2(centroids.mu.data() + cls * d, d);
  }
  Tensor<S> soft = Tensor<S>::zeros({n, k});
  std::vector<double> sims(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const S* f = features.data() + i * d;
    const double fn = detail::norm2(f, d);
    if (fn == 0.0) {
      throw ContractError("soft_labels: zero-norm feature vector at row " +
                          std::to_string(i));
    }
    double mx = -1e300;
    for (std::size_t cls = 0; cls < k; ++cls) {
      sims[cls] = cnorm[cls] == 0.0
                      ? -1.0
                      : detail::cosine(f, fn, centroids.mu.data() + cls * d,
                                       cnorm[cls], d);
      mx = std::max(mx, sims[cls] / tau);
    }
    double z = 0;
    for (std::size_t cls = 0; cls < k; ++cls) {
      sims[cls] = std::exp(sims[cls] / tau - mx);
      z += sims[cls];
    }
    for (std::size_t cls = 0; cls < k; ++cls) {
      soft.data()[i * k + cls] = static_cast<S>(sims[cls] / z);
    }
  }
  return soft;
}

/// Full pipeline: weighted centroids -> nearest-centroid labels -> one
/// refinement -> temperature soft labels from the round-1 centroids.
template <class S>
PseudoLabelSet<S> compute_pseudo_labels(const Tensor<S>& features,
                                        const Tensor<S>& probs, double tau) {
  Centroids<S> c0 = initial_centroids(features, probs);
  std::vector<int> hard = assign_nearest(features, c0);
  auto [c1, refined] = refine_once(features, c0, hard);
  PseudoLabelSet<S> out;
  out.hard = std::move(refined);
  out.soft = soft_labels(features, c1, tau);
  out.tau = tau;
  return out;
}

/// CSV dump for inspection: sample_id, hard, soft_0..soft_{K-1}.
template <class S>
void dump_pseudo_labels_csv(const std::string& path,
                            const PseudoLabelSet<S>& labels) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  const std::size_t n = labels.hard.size();
  const std::size_t k = labels.soft.dim(1);
  out << "sample_id,hard";
  for (std::size_t j = 0; j < k; ++j) out << ",soft_" << j;
  out << "\n";
  char buf[64];
  for (std::size_t i = 0; i < n; ++i) {
    out << i << ',' << labels.hard[i];
    for (std::size_t j = 0; j < k; ++j) {
      const auto res =
          std::to_chars(buf, buf + sizeof(buf),
                        static_cast<double>(labels.soft.data()[i * k + j]));
      out << ',';
      out.write(buf, res.ptr - buf);
    }
    out << "\n";
  }
}

}  // namespace sfda
