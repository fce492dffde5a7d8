#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "gds/common.hpp"
#include "gds/stats.hpp"

namespace gds {

struct LossConfig {
  double lambda_h = 0.5;
  double lambda_sigma = 1.0;
  double kappa = 3.0;

  void validate() const {
    require(std::isfinite(lambda_h) && lambda_h >= 0.0, "lambda_h must be finite and >= 0");
    require(std::isfinite(lambda_sigma) && lambda_sigma >= 0.0,
            "lambda_sigma must be finite and >= 0");
    require(std::isfinite(kappa) && kappa > 0.0, "kappa must be finite and > 0");
  }
};

struct LossOutput {
  double value = 0.0;
  Matrix grad_embeddings;  // same shape as the embeddings the loss consumed
};

// A batch that lacks positive or negative pairs cannot drive the GDS-H term.
class degenerate_batch_error : public std::runtime_error {
 public:
  degenerate_batch_error() : std::runtime_error("degenerate batch: no positive or no negative pairs") {}
};

inline double softplus(double x) {
  // ln(1 + e^x) without overflow for large |x|.
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline constexpr double kUnitNormTolerance = 1e-6;

namespace detail {

inline double half_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double t = a[k] - b[k];
    s += t * t;
  }
  return 0.5 * std::sqrt(s);
}

// grad += upstream * d(d(x_i, x_j))/dx for both endpoints; zero at d == 0.
inline void add_distance_grad(Matrix& grad, const Matrix& x, Eigen::Index i, Eigen::Index j,
                              double d, double upstream) {
  if (d <= 0.0 || upstream == 0.0) return;
  const double scale = upstream / (4.0 * d);
  for (Eigen::Index k = 0; k < x.cols(); ++k) {
    const double t = scale * (x(i, k) - x(j, k));
    grad(i, k) += t;
    grad(j, k) -= t;
  }
}

inline bool is_unit(std::span<const double> v, double tol = kUnitNormTolerance) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::abs(std::sqrt(s) - 1.0) <= tol;
}

}  // namespace detail

// d = 1/2 * ||x1 - x2|| on unit vectors; lies in [0, 1].
inline double pair_distance(std::span<const double> x1, std::span<const double> x2) {
  require(x1.size() == x2.size(), "pair_distance: dimension mismatch");
  require(detail::is_unit(x1) && detail::is_unit(x2), "pair_distance: inputs must be unit-norm");
  return std::min(1.0, detail::half_distance(x1, x2));
}

// Value and partials of a loss over the post-update global statistics.
struct StatsLossTerms {
  double value = 0.0;
  double d_mean_pos = 0.0;
  double d_var_pos = 0.0;
  double d_mean_neg = 0.0;
  double d_var_neg = 0.0;
};

inline StatsLossTerms gds_terms(const GaussianStats& pos, const GaussianStats& neg,
                                const LossConfig& cfg) {
  const double gap = pos.mean() - neg.mean();
  const double s = sigmoid(gap);
  return {softplus(gap) + cfg.lambda_sigma * (pos.variance() + neg.variance()), s,
          cfg.lambda_sigma, -s, cfg.lambda_sigma};
}

inline StatsLossTerms hard_mining_terms(const GaussianStats& pos, const GaussianStats& neg,
                                        const LossConfig& cfg) {
  const double sp = pos.stddev();
  const double sn = neg.stddev();
  const double margin = (pos.mean() + cfg.kappa * sp) - (neg.mean() - cfg.kappa * sn);
  const double s = sigmoid(margin);
  // d sigma / d var is unbounded at var = 0; only hand-built stats reach it
  // (updates clamp to the floor), so report a zero partial there.
  return {softplus(margin), s, sp > 0.0 ? s * cfg.kappa / (2.0 * sp) : 0.0, -s,
          sn > 0.0 ? s * cfg.kappa / (2.0 * sn) : 0.0};
}

inline double gds_loss(const GaussianStats& pos, const GaussianStats& neg, const LossConfig& cfg) {
  return gds_terms(pos, neg, cfg).value;
}

inline double hard_mining_loss(const GaussianStats& pos, const GaussianStats& neg,
                               const LossConfig& cfg) {
  return hard_mining_terms(pos, neg, cfg).value;
}

struct GdsHResult {
  LossOutput output;
  GaussianStats pos;  // post-update, to be stored by the caller
  GaussianStats neg;
  double gds_value = 0.0;
  double hard_value = 0.0;
};

namespace detail {

inline GdsHResult gds_h_unchecked(const Matrix& x, std::span<const IndexPair> pos_pairs,
                                  std::span<const IndexPair> neg_pairs, const GaussianStats& pos,
                                  const GaussianStats& neg, const LossConfig& cfg) {
  if (pos_pairs.empty() || neg_pairs.empty()) throw degenerate_batch_error();

  auto distances = [&](std::span<const IndexPair> pairs) {
    std::vector<double> d(pairs.size());
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      d[p] = half_distance(row_span(x, static_cast<Eigen::Index>(pairs[p].first)),
                           row_span(x, static_cast<Eigen::Index>(pairs[p].second)));
    }
    return d;
  };
  const std::vector<double> dp = distances(pos_pairs);
  const std::vector<double> dn = distances(neg_pairs);

  const BatchMoments mp = batch_moments(dp, pos.mean());
  const BatchMoments mn = batch_moments(dn, neg.mean());
  const GaussianStats pos_new = momentum_update(pos, mp);
  const GaussianStats neg_new = momentum_update(neg, mn);

  const StatsLossTerms g = gds_terms(pos_new, neg_new, cfg);
  const StatsLossTerms h = hard_mining_terms(pos_new, neg_new, cfg);

  GdsHResult r{{g.value + cfg.lambda_h * h.value, Matrix::Zero(x.rows(), x.cols())},
               pos_new, neg_new, g.value, h.value};

  // Pre-update stats are constants; only the (1 - beta) local part carries gradient.
  // A clamped variance has zero derivative.
  auto backprop = [&](std::span<const IndexPair> pairs, const std::vector<double>& d,
                      const GaussianStats& prior, const BatchMoments& m, double d_mean,
                      double d_var) {
    const double w = 1.0 - prior.momentum();
    if (blended_variance(prior, m) < kVarianceFloor) d_var = 0.0;
    const auto n = static_cast<double>(pairs.size());
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      const double up = w * (d_mean / n + d_var * 2.0 * (d[p] - prior.mean()) / n);
      add_distance_grad(r.output.grad_embeddings, x, static_cast<Eigen::Index>(pairs[p].first),
                        static_cast<Eigen::Index>(pairs[p].second), d[p], up);
    }
  };
  backprop(pos_pairs, dp, pos, mp, g.d_mean_pos + cfg.lambda_h * h.d_mean_pos,
           g.d_var_pos + cfg.lambda_h * h.d_var_pos);
  backprop(neg_pairs, dn, neg, mn, g.d_mean_neg + cfg.lambda_h * h.d_mean_neg,
           g.d_var_neg + cfg.lambda_h * h.d_var_neg);
  return r;
}

inline void check_pairs(std::span<const IndexPair> pairs, Eigen::Index rows) {
  for (const auto& p : pairs) {
    require(p.first < static_cast<std::size_t>(rows) && p.second < static_cast<std::size_t>(rows) &&
                p.first != p.second,
            "pair index out of range or self-pair");
  }
}

}  // namespace detail

// L = L_GDS + lambda_h * L_H on the statistics after absorbing this batch.
// Returns the exact gradient w.r.t. the (unit-norm) embeddings and the
// updated statistics.
inline GdsHResult gds_h_loss(const Matrix& embeddings, std::span<const IndexPair> pos_pairs,
                             std::span<const IndexPair> neg_pairs, const GaussianStats& pos,
                             const GaussianStats& neg, const LossConfig& cfg) {
  cfg.validate();
  detail::check_pairs(pos_pairs, embeddings.rows());
  detail::check_pairs(neg_pairs, embeddings.rows());
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    require(detail::is_unit(row_span(embeddings, i)), "gds_h_loss: embeddings must be unit-norm");
  }
  return detail::gds_h_unchecked(embeddings, pos_pairs, neg_pairs, pos, neg, cfg);
}

namespace detail {

inline LossOutput triplet_unchecked(const Matrix& x, std::span<const int> labels) {
  const Eigen::Index n = x.rows();
  LossOutput out{0.0, Matrix::Zero(n, x.cols())};
  struct Anchor {
    Eigen::Index a, p, q;
    double dp, dq;
  };
  std::vector<Anchor> anchors;
  for (Eigen::Index a = 0; a < n; ++a) {
    Eigen::Index hp = -1;
    Eigen::Index hn = -1;
    double dp = -1.0;
    double dn = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == a) continue;
      const double d = half_distance(row_span(x, a), row_span(x, j));
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)]) {
        if (d > dp) {
          dp = d;
          hp = j;
        }
      } else if (d < dn) {
        dn = d;
        hn = j;
      }
    }
    if (hp >= 0 && hn >= 0) anchors.push_back({a, hp, hn, dp, dn});
  }
  require(!anchors.empty(), "triplet_batch_hard: no anchor has a positive");
  const auto count = static_cast<double>(anchors.size());
  for (const auto& t : anchors) {
    out.value += softplus(t.dp - t.dq);
    const double s = sigmoid(t.dp - t.dq) / count;
    add_distance_grad(out.grad_embeddings, x, t.a, t.p, t.dp, s);
    add_distance_grad(out.grad_embeddings, x, t.a, t.q, t.dq, -s);
  }
  out.value /= count;
  return out;
}

}  // namespace detail

// Soft-margin batch-hard triplet loss: mean over anchors of
// softplus(hardest positive distance - hardest negative distance).
// Ties go to the lowest sample index.
inline LossOutput triplet_batch_hard(const Matrix& embeddings, std::span<const int> labels) {
  require(labels.size() == static_cast<std::size_t>(embeddings.rows()),
          "triplet_batch_hard: label count mismatch");
  bool two_ids = false;
  for (int l : labels) two_ids = two_ids || l != labels.front();
  require(two_ids, "triplet_batch_hard: batch needs at least two identities");
  return detail::triplet_unchecked(embeddings, labels);
}

// Softmax cross-entropy of one logit vector; grad = softmax - one_hot.
inline std::pair<double, Vector> cross_entropy(std::span<const double> logits, int label) {
  require(label >= 0 && static_cast<std::size_t>(label) < logits.size(),
          "cross_entropy: label out of range");
  double mx = -std::numeric_limits<double>::infinity();
  for (double z : logits) mx = std::max(mx, z);
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  const double lse = mx + std::log(sum);
  Vector grad(static_cast<Eigen::Index>(logits.size()));
  for (std::size_t c = 0; c < logits.size(); ++c) {
    grad(static_cast<Eigen::Index>(c)) = std::exp(logits[c] - lse);
  }
  grad(label) -= 1.0;
  return {lse - logits[static_cast<std::size_t>(label)], grad};
}

// Mean cross-entropy over rows of a logit matrix.
inline LossOutput cross_entropy_batch(const Matrix& logits, std::span<const int> labels) {
  require(labels.size() == static_cast<std::size_t>(logits.rows()),
          "cross_entropy: label count mismatch");
  LossOutput out{0.0, Matrix(logits.rows(), logits.cols())};
  const auto n = static_cast<double>(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    auto [v, g] = cross_entropy(row_span(logits, i), labels[static_cast<std::size_t>(i)]);
    out.value += v / n;
    out.grad_embeddings.row(i) = g.transpose() / n;
  }
  return out;
}

// Row-wise L2 normalization and its backward pass (I - x x^T) / ||f||.
struct Normalized {
  Matrix x;
  Vector norms;
};

inline Normalized l2_normalize_rows(const Matrix& f) {
  Normalized r{f, f.rowwise().norm()};
  for (Eigen::Index i = 0; i < f.rows(); ++i) {
    if (!(r.norms(i) > 0.0)) throw runtime_failure("l2_normalize_rows: zero-norm row");
    r.x.row(i) /= r.norms(i);
  }
  return r;
}

inline Matrix l2_normalize_backward(const Normalized& n, const Matrix& grad_x) {
  Matrix g(grad_x.rows(), grad_x.cols());
  for (Eigen::Index i = 0; i < grad_x.rows(); ++i) {
    const double proj = n.x.row(i).dot(grad_x.row(i));
    g.row(i) = (grad_x.row(i) - proj * n.x.row(i)) / n.norms(i);
  }
  return g;
}

}  // namespace gds
