// mixopt: optimize domain mixture weights for heterogeneous imitation-learning
// datasets, then re-weight or subset them for downstream policy training.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mixopt/dataset.hpp"
#include "mixopt/dro.hpp"
#include "mixopt/pipeline.hpp"
#include "mixopt/preprocess.hpp"
#include "mixopt/reference_trainer.hpp"
#include "mixopt/report.hpp"
#include "mixopt/subset.hpp"
#include "mixopt/weights.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;

struct SharedPreprocessArgs {
  std::string scheme = "gaussian";
  int bins = 256;
  double clip = 5.0;
  double val_fraction = 0.05;
};

void add_preprocess_flags(CLI::App* cmd, SharedPreprocessArgs* args) {
  cmd->add_option("--scheme", args->scheme, "Normalization scheme: gaussian|bounds")
      ->check(CLI::IsMember({"gaussian", "bounds"}));
  cmd->add_option("--bins", args->bins, "Bins per action dimension");
  cmd->add_option("--clip", args->clip, "Clip range in normalized units");
  cmd->add_option("--val-fraction", args->val_fraction, "Held-out validation fraction");
}

/// Splits, fits per-domain stats on the training half, and bins everything.
struct PreparedDataset {
  mixopt::PreprocessArtifact artifact;
  std::vector<std::string> names;
  std::vector<std::int64_t> full_sizes;
  std::vector<mixopt::PreparedDomain> train;
  std::vector<mixopt::PreparedDomain> val;
};

PreparedDataset prepare_from_disk(const fs::path& data_dir, const mixopt::PreprocessSettings& s) {
  auto [manifest, domains] = mixopt::load_manifest(data_dir);
  PreparedDataset out;
  out.artifact.settings = s;
  out.artifact.hash = mixopt::preprocess_hash(s, domains);
  const auto disc = mixopt::fit_discretizer(s.bins, s.clip);
  for (const auto& d : domains) {
    auto [tr, va] = mixopt::split_train_val(d, mixopt::SplitSpec{s.val_fraction, s.split_seed});
    auto stats = mixopt::fit_normalizer(tr, s.scheme);
    out.names.push_back(d.name);
    out.full_sizes.push_back(static_cast<std::int64_t>(d.size()));
    out.train.push_back(mixopt::prepare_domain(tr, stats, disc));
    out.val.push_back(mixopt::prepare_domain(va, stats, disc));
    out.artifact.domain_names.push_back(d.name);
    out.artifact.domain_stats.push_back(std::move(stats));
  }
  return out;
}

/// Re-applies a stored preprocessing artifact to a dataset. The stored hash
/// must match what the dataset + settings produce now.
PreparedDataset prepare_with_artifact(const fs::path& data_dir,
                                      const mixopt::PreprocessArtifact& artifact) {
  auto [manifest, domains] = mixopt::load_manifest(data_dir);
  const std::string expect = mixopt::preprocess_hash(artifact.settings, domains);
  if (expect != artifact.hash) {
    throw mixopt::validation_error(
        "preprocessing hash mismatch: stats were fitted under a different "
        "configuration or dataset (expected " + expect + ", artifact has " + artifact.hash + ")");
  }
  PreparedDataset out;
  out.artifact = artifact;
  const auto disc = mixopt::fit_discretizer(artifact.settings.bins, artifact.settings.clip);
  for (std::size_t i = 0; i < domains.size(); ++i) {
    if (domains[i].name != artifact.domain_names[i]) {
      throw mixopt::validation_error("domain order differs from the stats artifact");
    }
    auto [tr, va] = mixopt::split_train_val(
        domains[i],
        mixopt::SplitSpec{artifact.settings.val_fraction, artifact.settings.split_seed});
    out.names.push_back(domains[i].name);
    out.full_sizes.push_back(static_cast<std::int64_t>(domains[i].size()));
    out.train.push_back(mixopt::prepare_domain(tr, artifact.domain_stats[i], disc));
    out.val.push_back(mixopt::prepare_domain(va, artifact.domain_stats[i], disc));
  }
  return out;
}

int cmd_gen(const std::string& kind, std::uint64_t seed, const fs::path& out,
            const std::vector<std::size_t>& sizes) {
  const auto domains = mixopt::generate_synthetic_suite(
      mixopt::suite_kind_from_string(kind), seed, sizes);
  mixopt::save_dataset(out, domains);
  std::cout << "wrote " << domains.size() << " domains to " << out.string() << "\n";
  for (const auto& d : domains) {
    std::cout << "  " << d.name << ": " << d.trajectories.size() << " trajectories, " << d.size()
              << " pairs\n";
  }
  return kExitOk;
}

int cmd_train_ref(const fs::path& data, const fs::path& out, mixopt::TrainConfig cfg,
                  const SharedPreprocessArgs& pre) {
  mixopt::PreprocessSettings s;
  s.scheme = mixopt::norm_scheme_from_string(pre.scheme);
  s.bins = pre.bins;
  s.clip = pre.clip;
  s.val_fraction = pre.val_fraction;
  s.split_seed = mixopt::mix_seed(cfg.seed, mixopt::str_tag("split"));
  auto prepared = prepare_from_disk(data, s);
  fs::create_directories(out);
  mixopt::save_preprocess(out / "norm_stats.json", prepared.artifact);

  const auto run = mixopt::train_reference(prepared.train, prepared.val, cfg, out,
                                           prepared.artifact.hash);
  mixopt::save_records_csv(out / "records.csv", run);
  const auto sel = mixopt::select_checkpoint(run.records, cfg.overfit_delta);
  if (sel.first_record_violates) {
    std::cerr << "warning: the first checkpoint already exceeds the overfit gap; "
                 "selecting it anyway\n";
  }
  std::cout << "selected checkpoint: step " << sel.step << " ("
            << (out / ("ckpt_" + std::to_string(sel.step) + ".json")).string() << ")\n";
  return kExitOk;
}

int cmd_dro(const fs::path& data, const fs::path& ref, const fs::path& out,
            mixopt::DROConfig cfg, const std::optional<fs::path>& stats_path,
            std::optional<int> bins_override, const std::optional<std::string>& scheme_override) {
  const auto ckpt = mixopt::load_checkpoint(ref);
  const fs::path stats_file = stats_path.value_or(ref.parent_path() / "norm_stats.json");
  auto artifact = mixopt::load_preprocess(stats_file);
  if (artifact.hash != ckpt.preprocess_hash) {
    throw mixopt::validation_error("preprocessing hash mismatch: checkpoint " + ref.string() +
                                   " was trained under " + ckpt.preprocess_hash +
                                   ", stats file has " + artifact.hash);
  }
  if (bins_override && *bins_override != artifact.settings.bins) {
    throw mixopt::validation_error(
        "requested --bins " + std::to_string(*bins_override) +
        " but the reference was trained with " + std::to_string(artifact.settings.bins) +
        " bins; preprocessing must match across stages");
  }
  if (scheme_override &&
      mixopt::norm_scheme_from_string(*scheme_override) != artifact.settings.scheme) {
    throw mixopt::validation_error("requested --scheme " + *scheme_override +
                                   " but the reference was trained with " +
                                   mixopt::to_string(artifact.settings.scheme));
  }
  auto prepared = prepare_with_artifact(data, artifact);

  fs::create_directories(out);
  std::ofstream trace_csv(out / "alpha_trace.csv");
  trace_csv << "step,domain,alpha,excess_loss\n";
  auto observer = [&](std::int64_t step, const std::vector<double>& alpha,
                      const std::vector<double>& excess) {
    for (std::size_t i = 0; i < prepared.names.size(); ++i) {
      trace_csv << step << ',' << prepared.names[i] << ',' << mixopt::format_double(alpha[i])
                << ',' << mixopt::format_double(excess[i]) << '\n';
    }
  };
  mixopt::DROResult result;
  try {
    result = mixopt::run_dro(prepared.train, ckpt.policy, cfg, observer);
  } catch (...) {
    trace_csv.flush();
    throw;
  }
  mixopt::save_weights(out / "weights.json", result.averaged, prepared.names);
  std::cout << "averaged weights written to " << (out / "weights.json").string() << "\n";
  for (std::size_t i = 0; i < prepared.names.size(); ++i) {
    std::cout << "  " << prepared.names[i] << ": " << result.averaged.alpha[i] << "\n";
  }
  return kExitOk;
}

int cmd_subset(const fs::path& data, const fs::path& weights_path, double fraction,
               std::uint64_t seed, const fs::path& out) {
  auto [manifest, domains] = mixopt::load_manifest(data);
  std::vector<std::string> names;
  std::vector<std::int64_t> sizes;
  for (const auto& d : domains) {
    names.push_back(d.name);
    sizes.push_back(static_cast<std::int64_t>(d.size()));
  }
  const auto weights = mixopt::load_weights(weights_path, names, mixopt::Provenance::dro_averaged);
  auto plan = mixopt::compute_retention(sizes, weights, fraction);
  plan.names = names;
  const auto materialized = mixopt::materialize_subset(domains, plan, seed);
  mixopt::save_dataset(out, materialized);
  mixopt::save_retention_plan(out / "retention_plan.json", plan);
  std::cout << "subset written to " << out.string() << " (target " << plan.target << " pairs)\n";
  for (std::size_t i = 0; i < names.size(); ++i) {
    std::cout << "  " << names[i] << ": " << plan.retained[i] << "/" << plan.sizes[i]
              << (plan.capped[i] ? " (capped)" : "") << "\n";
  }
  return kExitOk;
}

int cmd_report(const std::vector<fs::path>& weight_files, const std::vector<std::string>& names,
               const fs::path& out, const std::optional<fs::path>& data) {
  if (weight_files.size() != names.size() || weight_files.empty()) {
    throw mixopt::validation_error("--weights and --names must list the same number of entries");
  }
  std::vector<std::string> domain_names;
  if (data) {
    auto [manifest, domains] = mixopt::load_manifest(*data);
    for (const auto& d : domains) domain_names.push_back(d.name);
  } else {
    std::ifstream in(weight_files[0]);
    if (!in) throw mixopt::validation_error("cannot read " + weight_files[0].string());
    nlohmann::json first;
    in >> first;
    for (auto it = first.begin(); it != first.end(); ++it) domain_names.push_back(it.key());
  }
  std::vector<mixopt::MixtureWeights> rows;
  for (std::size_t i = 0; i < weight_files.size(); ++i) {
    const auto prov = names[i] == "uniform" ? mixopt::Provenance::uniform
                                            : (names[i] == "human" ? mixopt::Provenance::human
                                                                   : mixopt::Provenance::dro_averaged);
    rows.push_back(mixopt::load_weights(weight_files[i], domain_names, prov));
  }
  const auto table = mixopt::render_weight_table(rows, names, domain_names);
  fs::create_directories(out);
  {
    std::ofstream txt(out / "weights_table.txt");
    txt << mixopt::weight_table_text(table);
    std::ofstream csv(out / "weights_table.csv");
    csv << mixopt::weight_table_csv(table);
  }
  std::cout << mixopt::weight_table_text(table);
  return kExitOk;
}

int cmd_run(const fs::path& config_path, std::optional<std::int64_t> dro_steps) {
  std::ifstream in(config_path);
  if (!in) throw mixopt::validation_error("config not found: " + config_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw mixopt::validation_error("malformed config: " + std::string(e.what()));
  }
  auto cfg = mixopt::pipeline_config_from_json(j, config_path.parent_path());
  if (dro_steps) cfg.dro_steps_override = *dro_steps;
  const auto result = mixopt::run_pipeline(cfg);
  std::cout << "selected reference step: " << result.selected_ref_step << "\n";
  std::cout << "robust optimization steps: " << result.dro_steps << "\n";
  std::cout << "weights: " << result.weights_path.string() << "\n";
  for (std::size_t i = 0; i < result.domain_names.size(); ++i) {
    std::cout << "  " << result.domain_names[i] << ": " << result.averaged.alpha[i] << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain mixture weight optimization for imitation-learning datasets"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset suite");
  std::string gen_kind;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  std::vector<std::size_t> gen_sizes;
  gen->add_option("--kind", gen_kind, "noise_pair|operator_tiers|multimodal")->required();
  gen->add_option("--seed", gen_seed, "Generator seed")->required();
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--sizes", gen_sizes,
                  "State-action pairs per domain (single value broadcasts)");

  // train-ref
  auto* tr = app.add_subcommand("train-ref", "Train the reference policy on the uniform mixture");
  std::string tr_data, tr_out;
  mixopt::TrainConfig tr_cfg;
  SharedPreprocessArgs tr_pre;
  tr->add_option("--data", tr_data, "Dataset directory")->required();
  tr->add_option("--out", tr_out, "Output directory")->required();
  tr->add_option("--steps", tr_cfg.total_steps, "Total optimizer steps");
  tr->add_option("--eval-interval", tr_cfg.eval_interval, "Steps between evaluations");
  tr->add_option("--batch", tr_cfg.batch_size, "Batch size");
  tr->add_option("--lr", tr_cfg.lr, "Peak learning rate (cosine-decayed to 0)");
  tr->add_option("--delta", tr_cfg.overfit_delta, "Overfit gap threshold in nats");
  tr->add_option("--seed", tr_cfg.seed, "Training seed");
  tr->add_option("--eval-subset", tr_cfg.eval_subset, "Evaluation subset size per domain");
  tr->add_option("--hidden", tr_cfg.hidden, "Hidden layer sizes");
  add_preprocess_flags(tr, &tr_pre);

  // dro
  auto* dro = app.add_subcommand("dro", "Optimize mixture weights against a reference policy");
  std::string dro_data, dro_ref, dro_out;
  std::string dro_stats;
  mixopt::DROConfig dro_cfg;
  int dro_bins = -1;
  std::string dro_scheme;
  dro->add_option("--data", dro_data, "Dataset directory")->required();
  dro->add_option("--ref", dro_ref, "Reference checkpoint (ckpt_*.json)")->required();
  dro->add_option("--out", dro_out, "Output directory")->required();
  dro->add_option("--eta", dro_cfg.eta, "Weight update step size");
  dro->add_option("--smoothing", dro_cfg.smoothing, "Uniform smoothing coefficient");
  dro->add_option("--steps", dro_cfg.total_steps, "Total optimizer steps");
  dro->add_option("--seed", dro_cfg.seed, "Seed");
  dro->add_option("--m", dro_cfg.per_domain_batch, "Examples per domain per step");
  dro->add_option("--lr", dro_cfg.lr, "Peak learning rate");
  dro->add_flag("--no-clip-excess,!--clip-excess", dro_cfg.clip_excess_at_zero,
                "Clip excess losses below zero")
      ->default_val(true);
  dro->add_option("--stats", dro_stats, "norm_stats.json path (default: next to --ref)");
  dro->add_option("--bins", dro_bins, "Must match the reference's bin count");
  dro->add_option("--scheme", dro_scheme, "Must match the reference's scheme");

  // subset
  auto* sub = app.add_subcommand("subset", "Materialize a weighted subset of a dataset");
  std::string sub_data, sub_weights, sub_out;
  double sub_fraction = 0.25;
  std::uint64_t sub_seed = 0;
  sub->add_option("--data", sub_data, "Dataset directory")->required();
  sub->add_option("--weights", sub_weights, "weights.json")->required();
  sub->add_option("--fraction", sub_fraction, "Target fraction of state-action pairs")->required();
  sub->add_option("--seed", sub_seed, "Trajectory selection seed");
  sub->add_option("--out", sub_out, "Output directory")->required();

  // report
  auto* rep = app.add_subcommand("report", "Render weight tables from weights.json files");
  std::vector<std::string> rep_weights, rep_names;
  std::string rep_out, rep_data;
  rep->add_option("--weights", rep_weights, "weights.json files")->required();
  rep->add_option("--names", rep_names, "Method name per weights file")->required();
  rep->add_option("--out", rep_out, "Output directory")->required();
  rep->add_option("--data", rep_data, "Dataset directory (fixes domain order)");

  // run
  auto* run = app.add_subcommand("run", "Run the full pipeline from a JSON config");
  std::string run_config;
  std::int64_t run_dro_steps = -1;
  run->add_option("--config", run_config, "pipeline.json")->required();
  run->add_option("--dro-steps", run_dro_steps,
                  "Override the robust-optimization step budget");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (gen->parsed()) {
      return cmd_gen(gen_kind, gen_seed, gen_out,
                     gen_sizes.empty() ? std::vector<std::size_t>{4000} : gen_sizes);
    }
    if (tr->parsed()) return cmd_train_ref(tr_data, tr_out, tr_cfg, tr_pre);
    if (dro->parsed()) {
      return cmd_dro(dro_data, dro_ref, dro_out, dro_cfg,
                     dro_stats.empty() ? std::nullopt : std::optional<fs::path>(dro_stats),
                     dro_bins < 0 ? std::nullopt : std::optional<int>(dro_bins),
                     dro_scheme.empty() ? std::nullopt : std::optional<std::string>(dro_scheme));
    }
    if (sub->parsed()) return cmd_subset(sub_data, sub_weights, sub_fraction, sub_seed, sub_out);
    if (rep->parsed()) {
      std::vector<fs::path> files(rep_weights.begin(), rep_weights.end());
      return cmd_report(files, rep_names, rep_out,
                        rep_data.empty() ? std::nullopt : std::optional<fs::path>(rep_data));
    }
    if (run->parsed()) {
      return cmd_run(run_config,
                     run_dro_steps < 0 ? std::nullopt : std::optional<std::int64_t>(run_dro_steps));
    }
  } catch (const mixopt::validation_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const mixopt::numerical_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitOk;
}
