#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gds/common.hpp"
#include "gds/losses.hpp"

namespace gds {

inline Matrix distance_matrix(const Matrix& queries, const Matrix& gallery) {
  require(queries.cols() == gallery.cols(), "distance_matrix: dimension mismatch");
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    require(detail::is_unit(row_span(queries, i)), "distance_matrix: queries must be unit-norm");
  }
  for (Eigen::Index j = 0; j < gallery.rows(); ++j) {
    require(detail::is_unit(row_span(gallery, j)), "distance_matrix: gallery must be unit-norm");
  }
  Matrix d(queries.rows(), gallery.rows());
  for (Eigen::Index i = 0; i < queries.rows(); ++i) {
    for (Eigen::Index j = 0; j < gallery.rows(); ++j) {
      d(i, j) = std::min(1.0, detail::half_distance(row_span(queries, i), row_span(gallery, j)));
    }
  }
  return d;
}

struct RetrievalMetrics {
  double map = 0.0;
  std::vector<double> cmc;  // cmc[r] = fraction of queries with a match in the top r+1
  std::size_t queries_evaluated = 0;
  std::size_t queries_skipped = 0;  // no positive in the gallery
};

// Ranks the gallery by ascending distance (ties by gallery index). With
// exclude_self, gallery item i is removed from query i's list.
inline RetrievalMetrics cmc_map(const Matrix& dist, std::span<const int> query_labels,
                                std::span<const int> gallery_labels, bool exclude_self) {
  require(query_labels.size() == static_cast<std::size_t>(dist.rows()) &&
              gallery_labels.size() == static_cast<std::size_t>(dist.cols()),
          "cmc_map: labels do not match matrix");
  require(!exclude_self || dist.rows() == dist.cols(), "cmc_map: exclude_self needs a square matrix");
  const auto ng = static_cast<std::size_t>(dist.cols());
  const std::size_t ranks = exclude_self && ng > 0 ? ng - 1 : ng;
  RetrievalMetrics m;
  m.cmc.assign(ranks, 0.0);
  std::vector<std::size_t> order;
  double ap_sum = 0.0;
  for (Eigen::Index q = 0; q < dist.rows(); ++q) {
    order.clear();
    for (std::size_t g = 0; g < ng; ++g) {
      if (!(exclude_self && g == static_cast<std::size_t>(q))) order.push_back(g);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return dist(q, static_cast<Eigen::Index>(a)) < dist(q, static_cast<Eigen::Index>(b));
    });
    const int ql = query_labels[static_cast<std::size_t>(q)];
    double hits = 0.0;
    double precision_sum = 0.0;
    std::size_t first_hit = order.size();
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (gallery_labels[order[r]] != ql) continue;
      hits += 1.0;
      precision_sum += hits / static_cast<double>(r + 1);
      first_hit = std::min(first_hit, r);
    }
    if (hits == 0.0) {
      ++m.queries_skipped;
      continue;
    }
    ++m.queries_evaluated;
    ap_sum += precision_sum / hits;
    for (std::size_t r = first_hit; r < ranks; ++r) m.cmc[r] += 1.0;
  }
  if (m.queries_evaluated > 0) {
    const auto n = static_cast<double>(m.queries_evaluated);
    m.map = ap_sum / n;
    for (double& c : m.cmc) c /= n;
  }
  return m;
}

struct CurvePoint {
  double x = 0.0;
  double y = 0.0;
};

struct RocPr {
  std::vector<CurvePoint> roc;  // (false-positive rate, true-positive rate)
  std::vector<CurvePoint> pr;   // (recall, precision); thresholds predicting nothing omitted
  std::vector<double> thresholds;
  double auc = 0.0;
};

// A pair is predicted "same" iff d < theta. theta sweeps every distinct
// distance and +inf, so the curve runs from (0,0) to (1,1).
inline RocPr roc_pr(std::span<const double> distances, const std::vector<bool>& is_positive) {
  require(distances.size() == is_positive.size(), "roc_pr: size mismatch");
  std::vector<std::size_t> order(distances.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return distances[a] < distances[b]; });
  const auto total_pos = static_cast<double>(std::count(is_positive.begin(), is_positive.end(), true));
  const double total_neg = static_cast<double>(distances.size()) - total_pos;
  require(total_pos > 0 && total_neg > 0, "roc_pr: need both positive and negative pairs");

  RocPr out;
  double tp = 0.0;
  double fp = 0.0;
  auto emit = [&](double theta) {
    out.thresholds.push_back(theta);
    out.roc.push_back({fp / total_neg, tp / total_pos});
    if (tp + fp > 0) out.pr.push_back({tp / total_pos, tp / (tp + fp)});
  };
  std::size_t i = 0;
  while (i < order.size()) {
    const double theta = distances[order[i]];
    emit(theta);
    while (i < order.size() && distances[order[i]] == theta) {
      (is_positive[order[i]] ? tp : fp) += 1.0;
      ++i;
    }
  }
  emit(std::numeric_limits<double>::infinity());
  for (std::size_t k = 1; k < out.roc.size(); ++k) {
    out.auc += (out.roc[k].x - out.roc[k - 1].x) * (out.roc[k].y + out.roc[k - 1].y) / 2.0;
  }
  return out;
}

struct Histograms {
  std::vector<std::uint64_t> pos;
  std::vector<std::uint64_t> neg;
  bool negatives_subsampled = false;
  std::uint64_t subsample_seed = 0;
};

inline std::size_t histogram_bin(double d, std::size_t bins) {
  const auto b = static_cast<std::size_t>(std::max(0.0, d) * static_cast<double>(bins));
  return std::min(b, bins - 1);
}

// Fixed-width bins over [0,1] of all positive pair distances, and of all
// negatives or (match_positive_count) a seeded subsample of equal size.
inline Histograms distance_histograms(const Matrix& embeddings, std::span<const int> labels,
                                      std::size_t bins, bool match_positive_count = false,
                                      std::uint64_t seed = 0) {
  require(embeddings.rows() >= 2, "distance_histograms: need >= 2 samples");
  require(bins >= 1, "distance_histograms: bins must be >= 1");
  require(labels.size() == static_cast<std::size_t>(embeddings.rows()),
          "distance_histograms: label count mismatch");
  Histograms h{std::vector<std::uint64_t>(bins, 0), std::vector<std::uint64_t>(bins, 0),
               match_positive_count, seed};
  std::vector<double> neg;
  std::size_t pos_count = 0;
  for (Eigen::Index i = 0; i < embeddings.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < embeddings.rows(); ++j) {
      const double d = detail::half_distance(row_span(embeddings, i), row_span(embeddings, j));
      if (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) {
        ++h.pos[histogram_bin(d, bins)];
        ++pos_count;
      } else {
        neg.push_back(d);
      }
    }
  }
  if (match_positive_count && pos_count < neg.size()) {
    Rng rng(seed);
    for (std::size_t i = 0; i < pos_count; ++i) {
      std::uniform_int_distribution<std::size_t> u(i, neg.size() - 1);
      std::swap(neg[i], neg[u(rng)]);
    }
    neg.resize(pos_count);
  }
  for (double d : neg) ++h.neg[histogram_bin(d, bins)];
  return h;
}

struct Separation {
  double mean_gap = 0.0;       // mean(neg) - mean(pos)
  double gap_in_sigmas = 0.0;  // mean_gap / (sd(pos) + sd(neg))
  double empirical_overlap = 0.0;
};

// q-quantile by nearest lower rank of a sorted list.
inline double lower_quantile(const std::vector<double>& sorted, double q) {
  return sorted[static_cast<std::size_t>(q * static_cast<double>(sorted.size() - 1))];
}

inline constexpr double kOverlapTail = 0.001;

// empirical_overlap: fraction of all distances that fall past the 0.1% tail
// boundary of the opposite population (positives at or above the negatives'
// 0.1% quantile, negatives at or below the positives' 99.9% quantile).
inline Separation separation_metrics(std::span<const double> pos, std::span<const double> neg) {
  require(!pos.empty() && !neg.empty(), "separation_metrics: empty population");
  auto moments = [](std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, std::sqrt(s / static_cast<double>(v.size()))};
  };
  const auto [mp, sp] = moments(pos);
  const auto [mn, sn] = moments(neg);
  Separation s;
  s.mean_gap = mn - mp;
  s.gap_in_sigmas = sp + sn > 0.0 ? s.mean_gap / (sp + sn)
                                  : (s.mean_gap > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
  std::vector<double> sp_sorted(pos.begin(), pos.end());
  std::vector<double> sn_sorted(neg.begin(), neg.end());
  std::sort(sp_sorted.begin(), sp_sorted.end());
  std::sort(sn_sorted.begin(), sn_sorted.end());
  const double neg_low = lower_quantile(sn_sorted, kOverlapTail);
  const double pos_high = lower_quantile(sp_sorted, 1.0 - kOverlapTail);
  double crossing = 0.0;
  for (double d : pos) crossing += d >= neg_low ? 1.0 : 0.0;
  for (double d : neg) crossing += d <= pos_high ? 1.0 : 0.0;
  s.empirical_overlap = crossing / static_cast<double>(pos.size() + neg.size());
  return s;
}

struct PairDistances {
  std::vector<double> pos;
  std::vector<double> neg;
};

inline PairDistances split_pair_distances(const Matrix& dist, std::span<const int> labels) {
  PairDistances p;
  for (Eigen::Index i = 0; i < dist.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < dist.cols(); ++j) {
      (labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)] ? p.pos : p.neg)
          .push_back(dist(i, j));
    }
  }
  return p;
}

struct EvalReport {
  RetrievalMetrics retrieval;
  RocPr curves;
  Histograms histograms;
  Separation separation;

  double map() const { return retrieval.map; }
  double rank1() const { return retrieval.cmc.empty() ? 0.0 : retrieval.cmc.front(); }
};

struct EvalOptions {
  std::size_t bins = 100;
  bool match_negative_count = false;
  std::uint64_t subsample_seed = 0;
};

// Every sample queries all other samples of the same set.
inline EvalReport evaluate_embeddings(const Matrix& embeddings, std::span<const int> labels,
                                      const EvalOptions& opt = {}) {
  EvalReport r;
  const Matrix dist = distance_matrix(embeddings, embeddings);
  r.retrieval = cmc_map(dist, labels, labels, true);
  const PairDistances pd = split_pair_distances(dist, labels);
  std::vector<double> all(pd.pos);
  all.insert(all.end(), pd.neg.begin(), pd.neg.end());
  std::vector<bool> truth(pd.pos.size(), true);
  truth.resize(all.size(), false);
  r.curves = roc_pr(all, truth);
  r.histograms = distance_histograms(embeddings, labels, opt.bins, opt.match_negative_count,
                                     opt.subsample_seed);
  r.separation = separation_metrics(pd.pos, pd.neg);
  return r;
}

inline nlohmann::json to_json(const Separation& s) {
  return {{"mean_gap", s.mean_gap},
          {"gap_in_sigmas", s.gap_in_sigmas},
          {"empirical_overlap", s.empirical_overlap}};
}

// Curves and histograms go to CSV; the JSON carries the scalar metrics,
// the CMC curve and the histogram counts.
inline nlohmann::json to_json(const EvalReport& r) {
  return {{"map", r.retrieval.map},
          {"rank1", r.rank1()},
          {"cmc", r.retrieval.cmc},
          {"queries_evaluated", r.retrieval.queries_evaluated},
          {"queries_skipped", r.retrieval.queries_skipped},
          {"roc_auc", r.curves.auc},
          {"pos_histogram", r.histograms.pos},
          {"neg_histogram", r.histograms.neg},
          {"negatives_subsampled", r.histograms.negatives_subsampled},
          {"separation", to_json(r.separation)}};
}

inline void write_curve_csv(std::span<const CurvePoint> pts, const char* xname, const char* yname,
                            std::ostream& os) {
  os << xname << ',' << yname << '\n';
  for (const auto& p : pts) os << p.x << ',' << p.y << '\n';
}

inline void write_histogram_csv(const Histograms& h, std::ostream& os) {
  os << "bin_low,bin_high,pos_count,neg_count\n";
  const auto bins = h.pos.size();
  for (std::size_t b = 0; b < bins; ++b) {
    os << static_cast<double>(b) / static_cast<double>(bins) << ','
       << static_cast<double>(b + 1) / static_cast<double>(bins) << ',' << h.pos[b] << ','
       << h.neg[b] << '\n';
  }
}

}  // namespace gds
