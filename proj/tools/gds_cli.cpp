// gds_cli: gradient checks, data generation, training, evaluation, sweeps.
//
// Exit codes: 0 ok, 1 validation/usage error, 2 runtime or training failure.
// Relative run directories resolve against $GDS_RUN_ROOT when it is set.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gds/config.hpp"
#include "gds/gradcheck.hpp"
#include "gds/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::string run_dir;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

fs::path resolve_run_dir(const std::string& dir) {
  fs::path p(dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv("GDS_RUN_ROOT"); root && *root) p = fs::path(root) / p;
  }
  return p;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw gds::validation_error("cannot read " + path.string());
  auto j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw gds::validation_error(path.string() + ": invalid JSON");
  return j;
}

// defaults < config file < --set < dedicated flags
gds::TrainConfig resolve(const Common& c, const std::vector<std::string>& flag_overrides) {
  gds::TrainConfig cfg;
  if (!c.config_path.empty()) cfg = gds::config_from_json(read_json(c.config_path));
  for (const auto& o : c.overrides) gds::apply_override(cfg, o);
  for (const auto& o : flag_overrides) gds::apply_override(cfg, o);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* app, Common& c, bool with_run_dir) {
  app->add_option("-c,--config", c.config_path, "JSON config (schema_version 1)");
  app->add_option("--set", c.overrides, "override section.key=value (repeatable)");
  app->add_option("--seed", c.seed, "root seed");
  if (with_run_dir) app->add_option("-o,--run-dir", c.run_dir, "run directory")->required();
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int cmd_gradcheck(const gds::GradcheckOptions& opt) {
  bool ok = true;
  for (const auto& s : gds::run_gradchecks(opt)) {
    std::cout << s.name << ": max_rel_error=" << s.max_rel_error;
    if (!s.passed) std::cout << "  FAIL (instance " << s.worst_instance << ", entry " << s.worst_entry << ")";
    std::cout << '\n';
    ok = ok && s.passed;
  }
  return ok ? 0 : 2;
}

int cmd_gen_data(const gds::TrainConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  const auto bm = gds::make_benchmark(cfg.benchmark, cfg.seed);
  gds::write_dataset_csv(bm.source, out / "source.csv");
  gds::write_dataset_csv(bm.source_probe, out / "source_probe.csv");
  gds::write_dataset_csv(bm.target_train, out / "target_train.csv");
  gds::write_dataset_csv(bm.target_test, out / "target_test.csv");
  gds::write_json(out / "config.json", gds::to_json(cfg));
  std::cout << "wrote " << bm.source.size() << " source, " << bm.target_train.size() << " target-train, "
            << bm.target_test.size() << " target-test samples to " << out.string() << '\n';
  return 0;
}

int cmd_train(const gds::TrainConfig& cfg, const fs::path& out) {
  const gds::RunDirectory dir{out};
  const auto r = gds::run_experiment(cfg, &dir);
  std::cout << "source-probe mAP " << r.source_probe.map() << "\n"
            << "direct-transfer mAP " << r.direct_transfer.map() << "  rank-1 " << r.direct_transfer.rank1()
            << "\n"
            << "final mAP " << r.final_eval.map() << "  rank-1 " << r.final_eval.rank1() << "\n"
            << "gap_in_sigmas " << r.final_eval.separation.gap_in_sigmas << "  overlap "
            << r.final_eval.separation.empirical_overlap << '\n';
  return 0;
}

int cmd_eval(const gds::TrainConfig& cfg, const fs::path& checkpoint, const std::string& data_csv,
             const fs::path& out) {
  const auto params = gds::load_checkpoint(checkpoint);
  gds::LabeledDataset ds;
  if (data_csv.empty()) {
    ds = gds::make_benchmark(cfg.benchmark, cfg.seed).target_test;
  } else {
    ds = gds::read_dataset_csv(fs::path(data_csv));
  }
  const auto rep = gds::evaluate(params, ds, cfg);
  const auto j = gds::to_json(rep);
  if (out.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    gds::write_json(out, j);
  }
  std::cerr << "mAP " << rep.map() << "  rank-1 " << rep.rank1() << '\n';
  return 0;
}

int cmd_export(const gds::TrainConfig& cfg, const fs::path& checkpoint, const std::string& data_csv,
               const fs::path& out) {
  const auto params = gds::load_checkpoint(checkpoint);
  const auto ds = data_csv.empty() ? gds::make_benchmark(cfg.benchmark, cfg.seed).target_test
                                   : gds::read_dataset_csv(fs::path(data_csv));
  const auto rep = gds::evaluate(params, ds, cfg);
  fs::create_directories(out);
  {
    std::ofstream os(out / "roc.csv");
    gds::write_curve_csv(rep.curves.roc, "fpr", "tpr", os);
  }
  {
    std::ofstream os(out / "pr.csv");
    gds::write_curve_csv(rep.curves.pr, "recall", "precision", os);
  }
  {
    std::ofstream os(out / "histogram.csv");
    gds::write_histogram_csv(rep.histograms, os);
  }
  {
    std::ofstream os(out / "embeddings.csv");
    gds::LabeledDataset emb = ds;
    emb.features = gds::embed(params, ds.features);
    gds::write_dataset_csv(emb, os);
  }
  gds::write_json(out / "eval.json", gds::to_json(rep));
  std::cout << "exported to " << out.string() << '\n';
  return 0;
}

int cmd_ablate(const gds::TrainConfig& cfg, const std::string& param, const std::string& values,
               const std::string& seeds, const fs::path& out) {
  std::vector<std::uint64_t> seed_list;
  for (const auto& s : split_csv(seeds)) {
    try {
      seed_list.push_back(std::stoull(s));
    } catch (const std::exception&) {
      throw gds::validation_error("bad seed '" + s + "'");
    }
  }
  if (seed_list.empty()) seed_list.push_back(cfg.seed);
  const auto vals = split_csv(values);
  // validate every value before any compute
  for (const auto& v : vals) (void)gds::with_parameter(cfg, param, v);
  const auto rows = gds::ablation_sweep(cfg, param, vals, seed_list);
  if (out.empty()) {
    gds::write_sweep_csv(rows, std::cout);
  } else {
    fs::create_directories(out.parent_path().empty() ? fs::path(".") : out.parent_path());
    std::ofstream os(out);
    if (!os) throw gds::runtime_failure("cannot write " + out.string());
    gds::write_sweep_csv(rows, os);
    std::cout << "wrote " << rows.size() << " rows to " << out.string() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GDS / GDS-H metric-learning laboratory"};
  app.require_subcommand(1);

  gds::GradcheckOptions gc;
  auto* g = app.add_subcommand("gradcheck", "finite-difference checks of every analytic gradient");
  g->add_option("--seed", gc.seed, "instance seed");
  g->add_option("--instances", gc.instances, "random instances per suite")->check(CLI::PositiveNumber);
  g->add_option("--tolerance", gc.tolerance, "max relative error");
  g->add_flag("--inject-sign-error", gc.inject_sign_error, "negative control: flip GDS-H gradient sign");

  Common gen_c;
  auto* gen = app.add_subcommand("gen-data", "write the synthetic benchmark as CSV");
  add_common(gen, gen_c, true);

  Common train_c;
  std::string loss, clustering;
  std::optional<int> rounds, epochs, stage1_epochs;
  std::optional<double> beta;
  auto* train = app.add_subcommand("train", "pretrain on source, then adapt on target");
  add_common(train, train_c, true);
  train->add_option("--loss", loss, "triplet | gds | gds-h");
  train->add_option("--rounds", rounds, "clustering rounds");
  train->add_option("--epochs", epochs, "epochs per round");
  train->add_option("--stage1-epochs", stage1_epochs, "source pretraining epochs");
  train->add_option("--beta", beta, "momentum of the global statistics");
  train->add_option("--clustering", clustering, "dbscan | kmeans");

  Common eval_c;
  std::string eval_ckpt, eval_data, eval_out;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint (default: benchmark target-test)");
  add_common(ev, eval_c, false);
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint .bin")->required();
  ev->add_option("--data", eval_data, "dataset CSV from gen-data");
  ev->add_option("--out", eval_out, "write report JSON here instead of stdout");

  Common ab_c;
  std::string ab_param, ab_values, ab_seeds, ab_out;
  auto* ab = app.add_subcommand("ablate", "sweep one parameter; one CSV row per (value, seed)");
  add_common(ab, ab_c, false);
  ab->add_option("--param", ab_param, "beta | kappa | lambda_h | lambda_sigma | clustering | loss")->required();
  ab->add_option("--values", ab_values, "comma-separated values")->required();
  ab->add_option("--seeds", ab_seeds, "comma-separated seeds (default: config seed)");
  ab->add_option("--out", ab_out, "CSV path (default stdout)");

  Common ex_c;
  std::string ex_ckpt, ex_data;
  auto* ex = app.add_subcommand("export", "ROC/PR/histogram/embedding CSVs for plotting");
  add_common(ex, ex_c, true);
  ex->add_option("--checkpoint", ex_ckpt, "checkpoint .bin")->required();
  ex->add_option("--data", ex_data, "dataset CSV from gen-data");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*g) return cmd_gradcheck(gc);
    if (*gen) return cmd_gen_data(resolve(gen_c, {}), resolve_run_dir(gen_c.run_dir));
    if (*train) {
      std::vector<std::string> flags;
      if (!loss.empty()) flags.push_back("stage3.loss=" + loss);
      if (!clustering.empty()) flags.push_back("clustering.method=" + clustering);
      if (rounds) flags.push_back("stage3.rounds=" + std::to_string(*rounds));
      if (epochs) flags.push_back("stage3.epochs_per_round=" + std::to_string(*epochs));
      if (stage1_epochs) flags.push_back("stage1.epochs=" + std::to_string(*stage1_epochs));
      if (beta) flags.push_back("gds.beta=" + gds::format_double(*beta));
      return cmd_train(resolve(train_c, flags), resolve_run_dir(train_c.run_dir));
    }
    if (*ev) return cmd_eval(resolve(eval_c, {}), eval_ckpt, eval_data, eval_out);
    if (*ab) {
      return cmd_ablate(resolve(ab_c, {}), ab_param, ab_values, ab_seeds,
                        ab_out.empty() ? fs::path() : resolve_run_dir(ab_out));
    }
    if (*ex) return cmd_export(resolve(ex_c, {}), ex_ckpt, ex_data, resolve_run_dir(ex_c.run_dir));
  } catch (const gds::validation_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
