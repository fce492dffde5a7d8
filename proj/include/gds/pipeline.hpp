#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gds/clustering.hpp"
#include "gds/common.hpp"
#include "gds/config.hpp"
#include "gds/data.hpp"
#include "gds/embedder.hpp"
#include "gds/eval.hpp"
#include "gds/losses.hpp"
#include "gds/stats.hpp"

namespace gds {

// Synthetic benchmark drawn from one root seed: labelled source domain, a
// held-out probe set from the source distribution, and the shifted target
// domain split identity-disjointly into adaptation-train and test.
struct Benchmark {
  LabeledDataset source;
  LabeledDataset source_probe;
  LabeledDataset target_train;
  LabeledDataset target_test;
};

inline Benchmark make_benchmark(const BenchmarkConfig& b, std::uint64_t root_seed) {
  DomainConfig src{b.source_identities, b.samples_per_identity, b.dim, b.spread, {}, Domain::source,
                   derive_seed(root_seed, "data/source")};
  DomainConfig tgt{b.target_identities, b.samples_per_identity, b.dim, b.spread, b.shift,
                   Domain::target, derive_seed(root_seed, "data/target")};
  Benchmark bm;
  bm.source = generate_domain(src);
  auto split = split_by_identity(generate_domain(tgt), b.target_train_fraction);
  bm.target_train = std::move(split.train);
  bm.target_test = std::move(split.test);
  DomainConfig probe = src;
  probe.identity_count = bm.target_test.identity_count;
  probe.seed = derive_seed(root_seed, "data/source_probe");
  bm.source_probe = generate_domain(probe);
  return bm;
}

struct EpochRecord {
  int stage = 1;  // 1 = pretrain, 3 = adaptation
  int round = 0;
  int epoch = 0;
  std::size_t batches = 0;
  double classification = 0.0;
  double triplet = 0.0;
  double gds = 0.0;
  double hard = 0.0;
  double total = 0.0;
};

struct RoundRecord {
  int round = 0;
  double eps = 0.0;
  int clusters = 0;
  std::size_t noise = 0;
  std::size_t kept = 0;
  int pk_p = 0;  // identities per batch actually used
  bool fallback = false;  // previous round's labels reused
  std::optional<EvalReport> eval;
};

struct RunLog {
  std::vector<EpochRecord> epochs;
  std::vector<StatsSnapshot> stats;  // one per adaptation epoch
  std::vector<RoundRecord> rounds;
  std::vector<std::string> notes;
};

// Optional side outputs of a run (checkpoints, cluster dumps, per-round eval).
struct RunDirectory {
  std::filesystem::path root;

  void prepare() const {
    for (const char* sub : {"checkpoints", "logs", "clusters", "eval"}) {
      std::filesystem::create_directories(root / sub);
    }
  }
  std::filesystem::path checkpoint(int round) const {
    return root / "checkpoints" / ("round_" + std::to_string(round) + ".bin");
  }
  std::filesystem::path clusters(int round) const {
    return root / "clusters" / ("round_" + std::to_string(round) + ".csv");
  }
  std::filesystem::path eval(int round) const {
    return root / "eval" / ("round_" + std::to_string(round) + ".json");
  }
};

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw runtime_failure("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

inline Matrix embed(const MlpParams& params, const Matrix& features) {
  return forward(params, features).embeddings;
}

inline EvalReport evaluate(const MlpParams& params, const LabeledDataset& ds, const TrainConfig& cfg) {
  return evaluate_embeddings(embed(params, ds.features), ds.identities,
                             {cfg.histogram_bins, cfg.match_negative_count,
                              derive_seed(cfg.seed, "eval/subsample")});
}

inline std::size_t batches_per_epoch(std::size_t samples, int p, int k) {
  const auto b = static_cast<std::size_t>(p * k);
  return std::max<std::size_t>(1, (samples + b - 1) / b);
}

inline void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw runtime_failure(std::string("non-finite ") + what + " loss");
}

struct PretrainResult {
  MlpParams params;  // classifier head already dropped
  RunLog log;
};

// Stage 1: classification + batch-hard triplet on labelled source data.
inline PretrainResult pretrain_source(const TrainConfig& cfg, const LabeledDataset& source) {
  cfg.validate();
  Rng init_rng = make_rng(cfg.seed, "init");
  Rng sampler = make_rng(cfg.seed, "sampler/stage1");
  MlpShape shape{static_cast<int>(source.features.cols()), cfg.hidden, cfg.embed_dim,
                 source.identity_count, Activation::tanh};
  PretrainResult r{init_mlp(shape, init_rng), {}};
  const AdamConfig adam{cfg.stage1_lr};
  const std::size_t nb = batches_per_epoch(source.size(), cfg.p, cfg.k);

  for (int e = 0; e < cfg.stage1_epochs; ++e) {
    EpochRecord rec{1, 0, e, nb};
    for (std::size_t b = 0; b < nb; ++b) {
      const PkBatch batch = pk_sample(source.identities, cfg.p, cfg.k, sampler);
      const Matrix x = gather_rows(source.features, batch.indices);
      const auto fw = forward(r.params, x);
      const Matrix logits = classifier_logits(r.params, fw.embeddings);
      const LossOutput ce = cross_entropy_batch(logits, batch.labels);
      const LossOutput tri = triplet_batch_hard(fw.embeddings, batch.labels);
      check_finite(ce.value + tri.value, "stage-1");
      const ClassifierGrads head = classifier_backward(r.params, fw.embeddings, ce.grad_embeddings);
      auto bw = backward(r.params, fw.trace, tri.grad_embeddings + head.grad_embeddings);
      bw.param_grads.classifier = head.head;
      adam_step(r.params, std::move(bw.param_grads), adam);
      rec.classification += ce.value / static_cast<double>(nb);
      rec.triplet += tri.value / static_cast<double>(nb);
    }
    rec.total = rec.classification + rec.triplet;
    r.log.epochs.push_back(rec);
  }
  drop_classifier(r.params);
  return r;
}

struct AdaptResult {
  MlpParams params;
  RunLog log;
  GaussianStats pos;
  GaussianStats neg;
};

inline constexpr int kMaxClusteringFailures = 3;

// Stages 2-3: alternate clustering of target embeddings and fine-tuning on
// the resulting pseudo labels. Global statistics persist across batches,
// epochs and rounds unless reset_stats_each_round is set; they are tracked
// in every loss mode but only receive gradient in the GDS modes.
inline AdaptResult adapt_target(const TrainConfig& cfg, MlpParams params,
                                const LabeledDataset& target_train,
                                const LabeledDataset* target_test = nullptr,
                                const RunDirectory* dir = nullptr) {
  cfg.validate();
  Rng sampler = make_rng(cfg.seed, "sampler/stage3");
  const std::uint64_t cluster_seed = derive_seed(cfg.seed, "clustering");
  const AdamConfig adam{cfg.stage3_lr};
  const bool use_gds = cfg.loss != LossMode::triplet;
  LossConfig lcfg = cfg.loss_cfg;
  if (cfg.loss == LossMode::triplet_gds) lcfg.lambda_h = 0.0;

  AdaptResult r{std::move(params), {}, {}, {}};
  const GaussianStats init(cfg.init_mean, cfg.init_variance, cfg.beta);
  r.pos = init;
  r.neg = init;
  r.log.notes.push_back("stats warm-up: first " + std::to_string(cfg.warmup_batches) +
                        " batches update statistics without GDS gradient");

  std::vector<std::size_t> all_rows(target_train.size());
  for (std::size_t i = 0; i < all_rows.size(); ++i) all_rows[i] = i;

  std::optional<PseudoLabeledSubset> labels;
  int failures = 0;
  std::size_t batch_counter = 0;

  for (int round = 1; round <= cfg.rounds; ++round) {
    if (cfg.reset_stats_each_round) {
      r.pos = init;
      r.neg = init;
    }
    RoundRecord rr{round};
    const Matrix emb = embed(r.params, target_train.features);
    ClusterAssignment assignment;
    if (cfg.clustering.method == ClusterMethod::dbscan) {
      const Matrix dist = pairwise_distances(emb);
      rr.eps = cfg.clustering.eps_rule == EpsRule::quantile
                   ? eps_from_quantile(dist, cfg.clustering.eps_quantile)
                   : eps_from_smallest_mean(dist, cfg.clustering.eps_quantile);
      assignment = dbscan_distances(dist, rr.eps, cfg.clustering.min_pts);
    } else {
      const int k = std::min<int>(cfg.clustering.kmeans_k, static_cast<int>(emb.rows()));
      assignment = kmeans(emb, k, cfg.clustering.kmeans_iters, cluster_seed + static_cast<std::uint64_t>(round))
                       .assignment;
    }
    rr.noise = static_cast<std::size_t>(std::count(assignment.labels.begin(), assignment.labels.end(), kNoise));
    if (dir) {
      std::ofstream os(dir->clusters(round));
      write_assignment_csv(assignment, os);
    }

    std::optional<PseudoLabeledSubset> fresh;
    try {
      fresh = pseudo_label_filter(assignment, all_rows, cfg.k);
    } catch (const no_usable_clusters_error&) {
    }
    int usable = 0;
    if (fresh) usable = 1 + *std::max_element(fresh->labels.begin(), fresh->labels.end());
    if (usable >= 2) {
      labels = std::move(fresh);
      failures = 0;
    } else {
      rr.fallback = true;
      if (++failures >= kMaxClusteringFailures) {
        throw runtime_failure("no usable clusters for " + std::to_string(failures) + " consecutive rounds");
      }
    }
    if (labels) {
      rr.clusters = 1 + *std::max_element(labels->labels.begin(), labels->labels.end());
      rr.kept = labels->indices.size();
      rr.pk_p = std::min(cfg.p, rr.clusters);
    }

    const Matrix features = labels ? gather_rows(target_train.features, labels->indices) : Matrix();
    for (int e = 0; e < cfg.epochs_per_round && labels; ++e) {
      const std::size_t nb = batches_per_epoch(labels->indices.size(), rr.pk_p, cfg.k);
      EpochRecord rec{3, round, e, nb};
      for (std::size_t b = 0; b < nb; ++b) {
        const PkBatch batch = pk_sample(labels->labels, rr.pk_p, cfg.k, sampler);
        const auto fw = forward(r.params, gather_rows(features, batch.indices));
        LossOutput tri = triplet_batch_hard(fw.embeddings, batch.labels);
        Matrix grad = std::move(tri.grad_embeddings);
        double total = tri.value;

        const PairLists pairs = enumerate_pairs(batch);
        const GdsHResult g = gds_h_loss(fw.embeddings, pairs.positive, pairs.negative, r.pos, r.neg, lcfg);
        r.pos = g.pos;
        r.neg = g.neg;
        if (use_gds) {
          const double gds_total = g.gds_value + lcfg.lambda_h * g.hard_value;
          total += cfg.gds_weight * gds_total;
          if (batch_counter >= static_cast<std::size_t>(cfg.warmup_batches)) {
            grad += cfg.gds_weight * g.output.grad_embeddings;
          }
        }
        ++batch_counter;
        check_finite(total, "stage-3");
        auto bw = backward(r.params, fw.trace, grad);
        adam_step(r.params, std::move(bw.param_grads), adam);

        const double inv = 1.0 / static_cast<double>(nb);
        rec.triplet += tri.value * inv;
        rec.gds += g.gds_value * inv;
        rec.hard += g.hard_value * inv;
        rec.total += total * inv;
      }
      r.log.epochs.push_back(rec);
      r.log.stats.push_back({r.pos, r.neg, r.pos.count_seen()});
    }

    if (target_test) {
      rr.eval = evaluate(r.params, *target_test, cfg);
      if (dir) write_json(dir->eval(round), to_json(*rr.eval));
    }
    if (dir) save_checkpoint(r.params, dir->checkpoint(round));
    r.log.rounds.push_back(std::move(rr));
  }
  return r;
}

struct ExperimentResult {
  EvalReport source_probe;    // pretrained model, held-out source identities
  EvalReport direct_transfer; // pretrained model, target test
  EvalReport final_eval;      // adapted model, target test
  RunLog pretrain_log;
  AdaptResult adapt;
};

inline void write_epochs_csv(const RunLog& pre, const RunLog& ad, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw runtime_failure("cannot write " + path.string());
  os << "stage,round,epoch,batches,classification,triplet,gds,hard,total\n";
  for (const RunLog* log : {&pre, &ad}) {
    for (const auto& e : log->epochs) {
      os << e.stage << ',' << e.round << ',' << e.epoch << ',' << e.batches << ','
         << format_double(e.classification) << ',' << format_double(e.triplet) << ','
         << format_double(e.gds) << ',' << format_double(e.hard) << ',' << format_double(e.total)
         << '\n';
    }
  }
}

inline nlohmann::json stats_log_json(const RunLog& log) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : log.stats) arr.push_back(to_json(s));
  return arr;
}

// Full three-stage run on the synthetic benchmark; writes the run directory
// layout when `dir` is given. An existing pretrained model may be supplied
// to skip stage 1 (it must come from the same seed and stage-1 config).
inline ExperimentResult run_experiment(const TrainConfig& cfg, const RunDirectory* dir = nullptr,
                                       const PretrainResult* pretrained = nullptr) {
  cfg.validate();
  const Benchmark bm = make_benchmark(cfg.benchmark, cfg.seed);
  if (dir) {
    dir->prepare();
    write_json(dir->root / "config.json", to_json(cfg));
  }
  const PretrainResult pre = pretrained ? *pretrained : pretrain_source(cfg, bm.source);
  ExperimentResult r;
  r.pretrain_log = pre.log;
  r.source_probe = evaluate(pre.params, bm.source_probe, cfg);
  r.direct_transfer = evaluate(pre.params, bm.target_test, cfg);
  if (dir) {
    save_checkpoint(pre.params, dir->checkpoint(0));
    write_json(dir->eval(0), to_json(r.direct_transfer));
  }
  r.adapt = adapt_target(cfg, pre.params, bm.target_train, &bm.target_test, dir);
  r.final_eval = r.adapt.log.rounds.back().eval.value();
  if (dir) {
    write_epochs_csv(r.pretrain_log, r.adapt.log, dir->root / "logs" / "epochs.csv");
    write_json(dir->root / "logs" / "stats.json", stats_log_json(r.adapt.log));
    nlohmann::json summary{{"source_probe_map", r.source_probe.map()},
                           {"direct_transfer_map", r.direct_transfer.map()},
                           {"direct_transfer_rank1", r.direct_transfer.rank1()},
                           {"final_map", r.final_eval.map()},
                           {"final_rank1", r.final_eval.rank1()},
                           {"final_separation", to_json(r.final_eval.separation)},
                           {"notes", r.adapt.log.notes}};
    nlohmann::json rounds = nlohmann::json::array();
    for (const auto& rr : r.adapt.log.rounds) {
      rounds.push_back({{"round", rr.round}, {"eps", rr.eps}, {"clusters", rr.clusters},
                        {"noise", rr.noise}, {"kept", rr.kept}, {"P", rr.pk_p},
                        {"fallback", rr.fallback}, {"map", rr.eval ? rr.eval->map() : 0.0}});
    }
    summary["rounds"] = rounds;
    write_json(dir->root / "logs" / "summary.json", summary);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Ablation sweeps: one full run per (value, seed), everything else shared.

struct SweepRow {
  std::string parameter;
  std::string value;
  std::uint64_t seed = 0;
  double direct_map = 0.0;
  double final_map = 0.0;
  double final_rank1 = 0.0;
  double gap_in_sigmas = 0.0;
  double empirical_overlap = 0.0;
};

inline TrainConfig with_parameter(TrainConfig cfg, const std::string& parameter, const std::string& value) {
  if (parameter == "beta") {
    cfg.beta = parse_double(value);
  } else if (parameter == "kappa") {
    cfg.loss_cfg.kappa = parse_double(value);
  } else if (parameter == "lambda_h") {
    cfg.loss_cfg.lambda_h = parse_double(value);
  } else if (parameter == "lambda_sigma") {
    cfg.loss_cfg.lambda_sigma = parse_double(value);
  } else if (parameter == "clustering") {
    cfg.clustering.method = cluster_method_from_string(value);
  } else if (parameter == "loss") {
    cfg.loss = loss_mode_from_string(value);
  } else {
    throw validation_error("unknown sweep parameter '" + parameter +
                           "' (beta | kappa | lambda_h | lambda_sigma | clustering | loss)");
  }
  cfg.validate();
  return cfg;
}

inline std::vector<SweepRow> ablation_sweep(const TrainConfig& base, const std::string& parameter,
                                            const std::vector<std::string>& values,
                                            const std::vector<std::uint64_t>& seeds) {
  require(!values.empty() && !seeds.empty(), "sweep needs values and seeds");
  std::vector<TrainConfig> configs;
  for (const auto& v : values) configs.push_back(with_parameter(base, parameter, v));
  std::vector<SweepRow> rows;
  for (std::uint64_t seed : seeds) {
    TrainConfig seeded = base;
    seeded.seed = seed;
    // Stage 1 does not depend on any sweepable parameter; share it.
    const PretrainResult pre = pretrain_source(seeded, make_benchmark(seeded.benchmark, seed).source);
    for (std::size_t i = 0; i < values.size(); ++i) {
      TrainConfig c = configs[i];
      c.seed = seed;
      const ExperimentResult r = run_experiment(c, nullptr, &pre);
      rows.push_back({parameter, values[i], seed, r.direct_transfer.map(), r.final_eval.map(),
                      r.final_eval.rank1(), r.final_eval.separation.gap_in_sigmas,
                      r.final_eval.separation.empirical_overlap});
    }
  }
  return rows;
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& os) {
  os << "parameter,value,seed,direct_map,final_map,final_rank1,gap_in_sigmas,empirical_overlap\n";
  for (const auto& r : rows) {
    os << r.parameter << ',' << r.value << ',' << r.seed << ',' << format_double(r.direct_map) << ','
       << format_double(r.final_map) << ',' << format_double(r.final_rank1) << ','
       << format_double(r.gap_in_sigmas) << ',' << format_double(r.empirical_overlap) << '\n';
  }
}

}  // namespace gds
