#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "gds/common.hpp"
#include "gds/data.hpp"
#include "gds/embedder.hpp"
#include "gds/losses.hpp"
#include "gds/stats.hpp"

namespace gds {

inline constexpr int kConfigSchemaVersion = 1;

enum class LossMode { triplet, triplet_gds, triplet_gds_h };
enum class ClusterMethod { dbscan, kmeans };

inline std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::triplet: return "triplet";
    case LossMode::triplet_gds: return "gds";
    case LossMode::triplet_gds_h: return "gds-h";
  }
  return "?";
}

inline LossMode loss_mode_from_string(const std::string& s) {
  if (s == "triplet") return LossMode::triplet;
  if (s == "gds" || s == "triplet+gds") return LossMode::triplet_gds;
  if (s == "gds-h" || s == "triplet+gds-h") return LossMode::triplet_gds_h;
  throw validation_error("unknown loss '" + s + "' (triplet | gds | gds-h)");
}

inline std::string to_string(ClusterMethod m) { return m == ClusterMethod::dbscan ? "dbscan" : "kmeans"; }

inline ClusterMethod cluster_method_from_string(const std::string& s) {
  if (s == "dbscan") return ClusterMethod::dbscan;
  if (s == "kmeans") return ClusterMethod::kmeans;
  throw validation_error("unknown clustering '" + s + "' (dbscan | kmeans)");
}

struct BenchmarkConfig {
  int source_identities = 64;
  int target_identities = 64;
  int samples_per_identity = 20;
  int dim = 32;
  double spread = 0.6;
  DomainShift shift{true, true, 0.5, 2.0, 0.0, 0.3, true};
  double target_train_fraction = 0.7;
};

enum class EpsRule { quantile, mean_smallest };

inline std::string to_string(EpsRule r) { return r == EpsRule::quantile ? "quantile" : "mean_smallest"; }

inline EpsRule eps_rule_from_string(const std::string& s) {
  if (s == "quantile") return EpsRule::quantile;
  if (s == "mean_smallest") return EpsRule::mean_smallest;
  throw validation_error("unknown eps rule '" + s + "' (quantile | mean_smallest)");
}

struct ClusteringConfig {
  ClusterMethod method = ClusterMethod::dbscan;
  EpsRule eps_rule = EpsRule::mean_smallest;
  double eps_quantile = 0.016;
  int min_pts = 4;
  int kmeans_k = 45;
  int kmeans_iters = 100;
};

struct TrainConfig {
  std::uint64_t seed = 1;
  int p = 32;
  int k = 4;
  std::vector<int> hidden = {64, 64};
  int embed_dim = 16;

  int stage1_epochs = 40;
  double stage1_lr = 3e-4;

  int rounds = 10;
  int epochs_per_round = 10;
  double stage3_lr = 6e-5;
  LossMode loss = LossMode::triplet_gds_h;
  double gds_weight = 1.0;
  int warmup_batches = 5;
  bool reset_stats_each_round = false;

  double beta = 0.99;
  LossConfig loss_cfg;
  double init_mean = kDefaultInitMean;
  double init_variance = kDefaultInitVariance;

  ClusteringConfig clustering;
  BenchmarkConfig benchmark;

  std::size_t histogram_bins = 100;
  bool match_negative_count = false;

  void validate() const {
    require(p >= 2 && k >= 2, "P and K must be >= 2");
    require(embed_dim >= 1, "embed_dim must be >= 1");
    for (int h : hidden) require(h >= 1, "hidden widths must be >= 1");
    require(stage1_epochs >= 1 && rounds >= 1 && epochs_per_round >= 1, "epoch/round counts must be >= 1");
    require(stage1_lr > 0.0 && stage3_lr > 0.0, "learning rates must be > 0");
    require(beta >= 0.0 && beta < 1.0, "beta must lie in [0,1)");
    require(gds_weight >= 0.0 && warmup_batches >= 0, "gds_weight and warmup_batches must be >= 0");
    require(init_mean >= 0.0 && init_mean <= 1.0 && init_variance >= 0.0, "bad stats initialization");
    loss_cfg.validate();
    require(clustering.eps_quantile > 0.0 && clustering.eps_quantile < 1.0, "eps_quantile must lie in (0,1)");
    require(clustering.min_pts >= 1 && clustering.kmeans_k >= 1 && clustering.kmeans_iters >= 1,
            "clustering counts must be >= 1");
    const auto& b = benchmark;
    require(b.source_identities >= p, "source must have >= P identities");
    require(b.samples_per_identity >= k, "samples_per_identity must be >= K");
    require(b.dim >= 1 && b.spread >= 0.0, "benchmark dim/spread invalid");
    require(b.target_train_fraction > 0.0 && b.target_train_fraction < 1.0,
            "target_train_fraction must lie in (0,1)");
    require(histogram_bins >= 1, "histogram_bins must be >= 1");
  }
};

namespace detail {

// Calls f(section, key, field&) for every configurable field; drives JSON
// reading, writing and "section.key=value" overrides from one table.
template <typename F>
void visit_fields(TrainConfig& c, F&& f) {
  f("", "seed", c.seed);
  f("batch", "P", c.p);
  f("batch", "K", c.k);
  f("model", "hidden", c.hidden);
  f("model", "embed_dim", c.embed_dim);
  f("stage1", "epochs", c.stage1_epochs);
  f("stage1", "lr", c.stage1_lr);
  f("stage3", "rounds", c.rounds);
  f("stage3", "epochs_per_round", c.epochs_per_round);
  f("stage3", "lr", c.stage3_lr);
  f("stage3", "loss", c.loss);
  f("stage3", "gds_weight", c.gds_weight);
  f("stage3", "warmup_batches", c.warmup_batches);
  f("stage3", "reset_stats_each_round", c.reset_stats_each_round);
  f("gds", "beta", c.beta);
  f("gds", "lambda_h", c.loss_cfg.lambda_h);
  f("gds", "lambda_sigma", c.loss_cfg.lambda_sigma);
  f("gds", "kappa", c.loss_cfg.kappa);
  f("gds", "init_mean", c.init_mean);
  f("gds", "init_var", c.init_variance);
  f("clustering", "method", c.clustering.method);
  f("clustering", "eps_rule", c.clustering.eps_rule);
  f("clustering", "eps_quantile", c.clustering.eps_quantile);
  f("clustering", "min_pts", c.clustering.min_pts);
  f("clustering", "kmeans_k", c.clustering.kmeans_k);
  f("clustering", "kmeans_iters", c.clustering.kmeans_iters);
  f("benchmark", "source_identities", c.benchmark.source_identities);
  f("benchmark", "target_identities", c.benchmark.target_identities);
  f("benchmark", "samples_per_identity", c.benchmark.samples_per_identity);
  f("benchmark", "dim", c.benchmark.dim);
  f("benchmark", "spread", c.benchmark.spread);
  f("benchmark", "shift_enabled", c.benchmark.shift.enabled);
  f("benchmark", "shift_rotate", c.benchmark.shift.rotate);
  f("benchmark", "shift_scale_min", c.benchmark.shift.scale_min);
  f("benchmark", "shift_scale_max", c.benchmark.shift.scale_max);
  f("benchmark", "shift_offset_scale", c.benchmark.shift.offset_scale);
  f("benchmark", "shift_noise_factor", c.benchmark.shift.noise_factor);
  f("benchmark", "shift_map_deviations", c.benchmark.shift.map_deviations);
  f("benchmark", "target_train_fraction", c.benchmark.target_train_fraction);
  f("eval", "histogram_bins", c.histogram_bins);
  f("eval", "match_negative_count", c.match_negative_count);
}

template <typename T>
nlohmann::json field_to_json(const T& v) {
  if constexpr (std::is_same_v<T, LossMode> || std::is_same_v<T, ClusterMethod> ||
                std::is_same_v<T, EpsRule>) {
    return to_string(v);
  } else {
    return v;
  }
}

template <typename T>
void field_from_json(const nlohmann::json& j, T& v, const std::string& name) {
  try {
    if constexpr (std::is_same_v<T, LossMode>) {
      v = loss_mode_from_string(j.get<std::string>());
    } else if constexpr (std::is_same_v<T, ClusterMethod>) {
      v = cluster_method_from_string(j.get<std::string>());
    } else if constexpr (std::is_same_v<T, EpsRule>) {
      v = eps_rule_from_string(j.get<std::string>());
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!j.is_boolean()) throw validation_error("expected boolean");
      v = j.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!j.is_number_integer()) throw validation_error("expected integer");
      v = j.get<T>();
    } else {
      v = j.get<T>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw validation_error("config field '" + name + "': " + e.what());
  } catch (const validation_error& e) {
    throw validation_error("config field '" + name + "': " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json to_json(const TrainConfig& cfg) {
  TrainConfig c = cfg;
  nlohmann::json j{{"schema_version", kConfigSchemaVersion}};
  detail::visit_fields(c, [&](const std::string& sec, const std::string& key, auto& v) {
    if (sec.empty()) {
      j[key] = detail::field_to_json(v);
    } else {
      j[sec][key] = detail::field_to_json(v);
    }
  });
  return j;
}

// Fields present in `j` override `base`; unknown keys are rejected.
inline TrainConfig config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  require(j.is_object(), "config must be a JSON object");
  require(j.contains("schema_version") && j["schema_version"] == kConfigSchemaVersion,
          "config schema_version must be " + std::to_string(kConfigSchemaVersion));
  std::set<std::string> known{"schema_version"};
  detail::visit_fields(base, [&](const std::string& sec, const std::string& key, auto& v) {
    known.insert(sec.empty() ? key : sec + "." + key);
    const nlohmann::json* node = &j;
    if (!sec.empty()) {
      if (!j.contains(sec)) return;
      node = &j[sec];
    }
    if (node->contains(key)) detail::field_from_json((*node)[key], v, sec.empty() ? key : sec + "." + key);
  });
  for (const auto& [k, v] : j.items()) {
    if (v.is_object()) {
      for (const auto& [k2, v2] : v.items()) {
        require(known.count(k + "." + k2) > 0, "unknown config key '" + k + "." + k2 + "'");
      }
    } else {
      require(known.count(k) > 0, "unknown config key '" + k + "'");
    }
  }
  base.validate();
  return base;
}

// "section.key=value" with value parsed as JSON (bare words as strings).
inline void apply_override(TrainConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos, "override must look like section.key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  bool found = false;
  detail::visit_fields(cfg, [&](const std::string& sec, const std::string& key, auto& v) {
    if ((sec.empty() ? key : sec + "." + key) == path) {
      detail::field_from_json(value, v, path);
      found = true;
    }
  });
  require(found, "unknown config key '" + path + "'");
}

}  // namespace gds
