#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <limits>
#include <map>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "gds/common.hpp"
#include "gds/losses.hpp"

namespace gds {

inline constexpr int kNoise = -1;

struct ClusterAssignment {
  std::vector<int> labels;  // kNoise or 0..cluster_count-1
  int cluster_count = 0;
};

class no_usable_clusters_error : public std::runtime_error {
 public:
  no_usable_clusters_error() : std::runtime_error("no usable clusters") {}
};

// Pairwise pair_distance between rows.
inline Matrix pairwise_distances(const Matrix& points) {
  const Eigen::Index n = points.rows();
  Matrix d(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      d(i, j) = d(j, i) = detail::half_distance(row_span(points, i), row_span(points, j));
    }
  }
  return d;
}

// Relabel clusters 0.. in order of their smallest member index.
inline ClusterAssignment canonical_relabel(const ClusterAssignment& a) {
  std::map<int, int> remap;
  ClusterAssignment out{a.labels, 0};
  for (int& l : out.labels) {
    if (l == kNoise) continue;
    auto [it, inserted] = remap.try_emplace(l, static_cast<int>(remap.size()));
    l = it->second;
  }
  out.cluster_count = static_cast<int>(remap.size());
  return out;
}

// Canonical DBSCAN over a precomputed distance matrix. A point is core when
// its eps-neighbourhood (itself included) holds >= min_pts points. Clusters
// are grown breadth-first in index order; a border point joins the first
// cluster that reaches it.
inline ClusterAssignment dbscan_distances(const Matrix& dist, double eps, int min_pts) {
  require(eps > 0.0, "dbscan: eps must be > 0");
  require(min_pts >= 1, "dbscan: min_pts must be >= 1");
  constexpr int kUnvisited = -2;
  const auto n = static_cast<std::size_t>(dist.rows());
  ClusterAssignment out{std::vector<int>(n, kUnvisited), 0};

  auto region = [&](std::size_t i) {
    std::vector<std::size_t> nb;
    for (std::size_t j = 0; j < n; ++j) {
      if (dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) <= eps) nb.push_back(j);
    }
    return nb;
  };

  for (std::size_t i = 0; i < n; ++i) {
    if (out.labels[i] != kUnvisited) continue;
    auto nb = region(i);
    if (nb.size() < static_cast<std::size_t>(min_pts)) {
      out.labels[i] = kNoise;
      continue;
    }
    const int c = out.cluster_count++;
    out.labels[i] = c;
    std::deque<std::size_t> frontier(nb.begin(), nb.end());
    while (!frontier.empty()) {
      const std::size_t j = frontier.front();
      frontier.pop_front();
      if (out.labels[j] == kNoise) out.labels[j] = c;
      if (out.labels[j] != kUnvisited) continue;
      out.labels[j] = c;
      auto nj = region(j);
      if (nj.size() >= static_cast<std::size_t>(min_pts)) {
        frontier.insert(frontier.end(), nj.begin(), nj.end());
      }
    }
  }
  return out;
}

inline ClusterAssignment dbscan(const Matrix& points, double eps, int min_pts) {
  if (points.rows() == 0) return {};
  return dbscan_distances(pairwise_distances(points), eps, min_pts);
}

// eps as the given quantile (fraction in (0,1)) of all pairwise distances.
inline double eps_from_quantile(const Matrix& dist, double quantile) {
  require(quantile > 0.0 && quantile < 1.0, "eps quantile must lie in (0,1)");
  std::vector<double> all;
  const Eigen::Index n = dist.rows();
  require(n >= 2, "eps_from_quantile needs >= 2 points");
  all.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) all.push_back(dist(i, j));
  }
  const auto pos = static_cast<std::size_t>(quantile * static_cast<double>(all.size() - 1));
  std::nth_element(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(pos), all.end());
  return std::max(all[pos], std::numeric_limits<double>::min());
}

// eps as the mean of the smallest `fraction` of all pairwise distances.
inline double eps_from_smallest_mean(const Matrix& dist, double fraction) {
  require(fraction > 0.0 && fraction < 1.0, "eps fraction must lie in (0,1)");
  std::vector<double> all;
  const Eigen::Index n = dist.rows();
  require(n >= 2, "eps_from_smallest_mean needs >= 2 points");
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) all.push_back(dist(i, j));
  }
  const auto count = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(fraction * static_cast<double>(all.size()))));
  std::nth_element(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(count - 1), all.end());
  double s = 0.0;
  for (std::size_t i = 0; i < count; ++i) s += all[i];
  return std::max(s / static_cast<double>(count), std::numeric_limits<double>::min());
}

struct KMeansResult {
  ClusterAssignment assignment;
  Matrix centroids;
  std::vector<double> inertia_history;  // sum of squared distances, per assignment step
};

// Lloyd's algorithm with k-means++ seeding. Empty clusters keep their
// previous centroid; the returned labels are compacted to 0..count-1.
inline KMeansResult kmeans(const Matrix& points, int k, int max_iters, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(points.rows());
  require(k >= 1, "kmeans: k must be >= 1");
  require(static_cast<std::size_t>(k) <= n, "kmeans: k exceeds point count");
  require(max_iters >= 1, "kmeans: max_iters must be >= 1");
  Rng rng(seed);

  auto sq = [&](Eigen::Index i, const Matrix& c, Eigen::Index j) {
    return (points.row(i) - c.row(j)).squaredNorm();
  };

  KMeansResult r;
  r.centroids.resize(k, points.cols());
  std::vector<bool> chosen(n, false);
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  std::size_t pick = first(rng);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  for (int c = 0; c < k; ++c) {
    if (c > 0) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += chosen[i] ? 0.0 : d2[i];
      if (total > 0.0) {
        std::uniform_real_distribution<double> u(0.0, total);
        double target = u(rng);
        pick = n;
        for (std::size_t i = 0; i < n; ++i) {
          if (chosen[i] || d2[i] <= 0.0) continue;
          pick = i;
          target -= d2[i];
          if (target < 0.0) break;
        }
      } else {
        pick = static_cast<std::size_t>(std::find(chosen.begin(), chosen.end(), false) - chosen.begin());
      }
    }
    chosen[pick] = true;
    r.centroids.row(c) = points.row(static_cast<Eigen::Index>(pick));
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq(static_cast<Eigen::Index>(i), r.centroids, c));
  }

  std::vector<int> labels(n, -1);
  for (int it = 0; it < max_iters; ++it) {
    bool changed = false;
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = sq(static_cast<Eigen::Index>(i), r.centroids, c);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      changed = changed || labels[i] != best;
      labels[i] = best;
      inertia += bd;
    }
    r.inertia_history.push_back(inertia);
    if (!changed) break;
    Matrix sums = Matrix::Zero(k, points.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(labels[i]) += points.row(static_cast<Eigen::Index>(i));
      ++counts[static_cast<std::size_t>(labels[i])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        r.centroids.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
      }
    }
  }
  r.assignment = canonical_relabel({labels, k});
  return r;
}

struct PseudoLabeledSubset {
  std::vector<std::size_t> indices;  // dataset rows kept for training
  std::vector<int> labels;           // contiguous pseudo identities
};

// Drops noise and clusters smaller than min_cluster_size.
inline PseudoLabeledSubset pseudo_label_filter(const ClusterAssignment& a,
                                               std::span<const std::size_t> dataset_indices,
                                               int min_cluster_size) {
  require(a.labels.size() == dataset_indices.size(), "pseudo_label_filter: size mismatch");
  std::map<int, int> sizes;
  for (int l : a.labels) {
    if (l != kNoise) ++sizes[l];
  }
  std::map<int, int> remap;
  for (const auto& [l, s] : sizes) {
    if (s >= min_cluster_size) remap.emplace(l, static_cast<int>(remap.size()));
  }
  PseudoLabeledSubset out;
  for (std::size_t i = 0; i < a.labels.size(); ++i) {
    auto it = remap.find(a.labels[i]);
    if (it == remap.end()) continue;
    out.indices.push_back(dataset_indices[i]);
    out.labels.push_back(it->second);
  }
  if (out.indices.empty()) throw no_usable_clusters_error();
  return out;
}

inline void write_assignment_csv(const ClusterAssignment& a, std::ostream& os) {
  os << "sample_index,pseudo_label\n";
  for (std::size_t i = 0; i < a.labels.size(); ++i) os << i << ',' << a.labels[i] << '\n';
}

}  // namespace gds
