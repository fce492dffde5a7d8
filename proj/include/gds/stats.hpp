#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "gds/common.hpp"

namespace gds {

inline constexpr double kVarianceFloor = 1e-12;
inline constexpr double kDefaultInitMean = 0.5;
inline constexpr double kDefaultInitVariance = 1.0 / 6.0;

// Thrown by batch_moments when a batch contributes no pairs of a kind.
class empty_batch_error : public std::runtime_error {
 public:
  empty_batch_error() : std::runtime_error("no pairs in batch") {}
};

// Global (dataset-wise) Gaussian model of one pair-distance population,
// maintained by exponential momentum over batches.
class GaussianStats {
 public:
  GaussianStats() = default;
  GaussianStats(double mean, double variance, double momentum, std::size_t count_seen = 0)
      : mean_(mean), variance_(variance), momentum_(momentum),
        count_seen_(count_seen) {
    require(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0,1)");
    require(std::isfinite(mean) && std::isfinite(variance) && variance >= 0.0,
            "stats mean/variance must be finite, variance >= 0");
  }

  static GaussianStats initial(double momentum) {
    return {kDefaultInitMean, kDefaultInitVariance, momentum};
  }

  double mean() const { return mean_; }
  double variance() const { return variance_; }
  double stddev() const { return std::sqrt(variance_); }
  double momentum() const { return momentum_; }
  std::size_t count_seen() const { return count_seen_; }

  friend bool operator==(const GaussianStats&, const GaussianStats&) = default;

 private:
  double mean_ = kDefaultInitMean;
  double variance_ = kDefaultInitVariance;
  double momentum_ = 0.99;
  std::size_t count_seen_ = 0;
};

struct BatchMoments {
  double local_mean = 0.0;
  // Centered on the global mean, not on local_mean.
  double local_variance = 0.0;
  std::size_t pair_count = 0;
};

inline BatchMoments batch_moments(std::span<const double> distances, double global_mean) {
  if (distances.empty()) throw empty_batch_error();
  double sum = 0.0;
  double sq = 0.0;
  for (double d : distances) {
    // slack for unit vectors that are unit only to ~1e-6
    require(d >= 0.0 && d <= 1.0 + 1e-6, "batch_moments: distances must lie in [0,1]");
    sum += d;
    const double c = d - global_mean;
    sq += c * c;
  }
  const auto n = static_cast<double>(distances.size());
  return {sum / n, sq / n, distances.size()};
}

// Unclamped momentum blend of the variance; exposed so gradient code can tell
// whether the floor is active.
inline double blended_variance(const GaussianStats& stats, const BatchMoments& m) {
  const double b = stats.momentum();
  return b * stats.variance() + (1.0 - b) * m.local_variance;
}

inline GaussianStats momentum_update(const GaussianStats& stats, const BatchMoments& m) {
  require(m.pair_count >= 1 && m.local_variance >= 0.0, "invalid batch moments");
  const double b = stats.momentum();
  const double mean = b * stats.mean() + (1.0 - b) * m.local_mean;
  const double var = std::max(blended_variance(stats, m), kVarianceFloor);
  return {mean, var, b, stats.count_seen() + 1};
}

struct PooledMoments {
  double mean = 0.0;
  double variance = 0.0;
};

// Exact two-pass mean and population variance of the concatenation a ++ b.
inline PooledMoments pooled_oracle(std::span<const double> a, std::span<const double> b) {
  require(!a.empty() && !b.empty(), "pooled_oracle needs two non-empty sets");
  double sum = 0.0;
  for (double x : a) sum += x;
  for (double x : b) sum += x;
  const auto n = static_cast<double>(a.size() + b.size());
  const double mean = sum / n;
  double sq = 0.0;
  for (double x : a) sq += (x - mean) * (x - mean);
  for (double x : b) sq += (x - mean) * (x - mean);
  return {mean, sq / n};
}

// Pos/neg pair snapshot written per epoch: {"pos":{"mean","var"},"neg":{...},"beta","step"}.
struct StatsSnapshot {
  GaussianStats pos;
  GaussianStats neg;
  std::size_t step = 0;
};

inline nlohmann::json to_json(const StatsSnapshot& s) {
  return {{"pos", {{"mean", s.pos.mean()}, {"var", s.pos.variance()}}},
          {"neg", {{"mean", s.neg.mean()}, {"var", s.neg.variance()}}},
          {"beta", s.pos.momentum()},
          {"step", s.step}};
}

inline StatsSnapshot snapshot_from_json(const nlohmann::json& j) {
  const double beta = j.at("beta").get<double>();
  const auto step = j.at("step").get<std::size_t>();
  return {GaussianStats(j.at("pos").at("mean").get<double>(), j.at("pos").at("var").get<double>(),
                        beta, step),
          GaussianStats(j.at("neg").at("mean").get<double>(), j.at("neg").at("var").get<double>(),
                        beta, step),
          step};
}

}  // namespace gds
