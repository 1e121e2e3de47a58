#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixopt/common.hpp"
#include "mixopt/dataset.hpp"
#include "mixopt/dro.hpp"
#include "mixopt/preprocess.hpp"
#include "mixopt/reference_trainer.hpp"
#include "mixopt/report.hpp"
#include "mixopt/subset.hpp"
#include "mixopt/weights.hpp"

namespace mixopt {

/// One config drives all stages so that normalization and binning are
/// guaranteed identical between reference training and the robust
/// optimization; the excess-loss comparison is meaningless otherwise.
struct PipelineConfig {
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;
  std::uint64_t seed = 0;
  NormScheme scheme = NormScheme::gaussian;
  int bins = 256;
  double clip = 5.0;
  double val_fraction = 0.05;
  TrainConfig train;
  DROConfig dro;
  std::optional<std::int64_t> dro_steps_override;  // default: selected reference step
  std::optional<double> subset_fraction;
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return nlohmann::json{{"total_steps", c.total_steps}, {"eval_interval", c.eval_interval},
                        {"batch_size", c.batch_size},   {"lr", c.lr},
                        {"seed", c.seed},               {"delta", c.overfit_delta},
                        {"eval_subset", c.eval_subset}, {"hidden", c.hidden}};
}

inline nlohmann::json dro_config_to_json(const DROConfig& c) {
  return nlohmann::json{{"eta", c.eta},
                        {"smoothing", c.smoothing},
                        {"clip_excess_at_zero", c.clip_excess_at_zero},
                        {"per_domain_batch", c.per_domain_batch},
                        {"total_steps", c.total_steps},
                        {"lr", c.lr},
                        {"seed", c.seed}};
}

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j,
                                                const std::filesystem::path& base_dir = {}) {
  PipelineConfig c;
  c.data_dir = base_dir / j.at("data").get<std::string>();
  c.out_dir = base_dir / j.at("out").get<std::string>();
  c.seed = j.value("seed", std::uint64_t{0});
  c.scheme = norm_scheme_from_string(j.value("scheme", std::string("gaussian")));
  c.bins = j.value("bins", 256);
  c.clip = j.value("clip", 5.0);
  c.val_fraction = j.value("val_fraction", 0.05);
  if (j.contains("train")) {
    const auto& t = j.at("train");
    c.train.total_steps = t.value("total_steps", c.train.total_steps);
    c.train.eval_interval = t.value("eval_interval", c.train.eval_interval);
    c.train.batch_size = t.value("batch_size", c.train.batch_size);
    c.train.lr = t.value("lr", c.train.lr);
    c.train.overfit_delta = t.value("delta", c.train.overfit_delta);
    c.train.eval_subset = t.value("eval_subset", c.train.eval_subset);
    c.train.hidden = t.value("hidden", c.train.hidden);
  }
  if (j.contains("dro")) {
    const auto& d = j.at("dro");
    c.dro.eta = d.value("eta", c.dro.eta);
    c.dro.smoothing = d.value("smoothing", c.dro.smoothing);
    c.dro.clip_excess_at_zero = d.value("clip_excess_at_zero", c.dro.clip_excess_at_zero);
    c.dro.per_domain_batch = d.value("per_domain_batch", c.dro.per_domain_batch);
    c.dro.lr = d.value("lr", c.dro.lr);
  }
  if (j.contains("dro_steps") && !j.at("dro_steps").is_null()) {
    c.dro_steps_override = j.at("dro_steps").get<std::int64_t>();
  }
  if (j.contains("subset_fraction") && !j.at("subset_fraction").is_null()) {
    c.subset_fraction = j.at("subset_fraction").get<double>();
  }
  return c;
}

struct PipelineResult {
  std::string preprocess_hash;
  std::int64_t selected_ref_step = 0;
  std::int64_t dro_steps = 0;
  std::vector<std::string> domain_names;
  MixtureWeights uniform;
  MixtureWeights averaged;
  std::optional<RetentionPlan> retention;
  std::filesystem::path weights_path;
};

namespace detail {

inline std::string stage_hash(const nlohmann::json& j) { return to_hex(fnv1a64(j.dump())); }

inline nlohmann::json load_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw validation_error("cannot read " + p.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw validation_error("malformed JSON in " + p.string() + ": " + e.what());
  }
  return j;
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream out(p);
  if (!out) throw validation_error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

/// Hard check: an artifact produced under a different preprocessing setup
/// must never be combined with the current one.
inline void require_hash(const std::string& artifact, const std::string& expected,
                         const std::string& found) {
  if (expected != found) {
    throw validation_error("preprocessing hash mismatch in " + artifact + ": expected " +
                           expected + ", found " + found +
                           " (stage artifacts come from a different configuration)");
  }
}

}  // namespace detail

inline PipelineResult run_pipeline(const PipelineConfig& cfg) {
  validate(cfg.train);
  if (cfg.subset_fraction && !(*cfg.subset_fraction > 0.0 && *cfg.subset_fraction <= 1.0)) {
    throw validation_error("subset_fraction must be in (0, 1]");
  }
  std::filesystem::create_directories(cfg.out_dir);

  auto [manifest, domains] = load_manifest(cfg.data_dir);
  if (domains.empty()) throw validation_error("dataset has no domains");

  PreprocessSettings settings;
  settings.scheme = cfg.scheme;
  settings.bins = cfg.bins;
  settings.clip = cfg.clip;
  settings.val_fraction = cfg.val_fraction;
  settings.split_seed = mix_seed(cfg.seed, str_tag("split"));
  const std::string hash = preprocess_hash(settings, domains);

  // --- Stage 1: per-domain normalization + binning -------------------------
  std::vector<Domain> train_split, val_split;
  for (const auto& d : domains) {
    auto [tr, va] = split_train_val(d, SplitSpec{settings.val_fraction, settings.split_seed});
    train_split.push_back(std::move(tr));
    val_split.push_back(std::move(va));
  }

  PreprocessArtifact pp;
  const auto stats_path = cfg.out_dir / "norm_stats.json";
  if (std::filesystem::exists(stats_path)) {
    pp = load_preprocess(stats_path);
    detail::require_hash("norm_stats.json", hash, pp.hash);
  } else {
    pp.settings = settings;
    pp.hash = hash;
    for (std::size_t i = 0; i < domains.size(); ++i) {
      pp.domain_names.push_back(domains[i].name);
      pp.domain_stats.push_back(fit_normalizer(train_split[i], settings.scheme));
    }
    save_preprocess(stats_path, pp);
  }

  const Discretizer disc = fit_discretizer(settings.bins, settings.clip);
  std::vector<PreparedDomain> prep_train, prep_val;
  for (std::size_t i = 0; i < domains.size(); ++i) {
    prep_train.push_back(prepare_domain(train_split[i], pp.domain_stats[i], disc));
    prep_val.push_back(prepare_domain(val_split[i], pp.domain_stats[i], disc));
  }

  // --- Stage 2: reference training + checkpoint selection ------------------
  TrainConfig train_cfg = cfg.train;
  train_cfg.seed = mix_seed(cfg.seed, str_tag("train_ref"));
  const std::string train_hash = detail::stage_hash(
      nlohmann::json{{"preprocess", hash}, {"train", train_config_to_json(train_cfg)}});

  const auto ref_dir = cfg.out_dir / "ref";
  const auto records_path = ref_dir / "records.json";
  ReferenceRun run;
  bool have_records = false;
  if (std::filesystem::exists(records_path)) {
    const auto j = detail::load_json(records_path);
    detail::require_hash("ref/records.json", hash, j.value("preprocess_hash", ""));
    if (j.value("train_hash", "") == train_hash) {
      run.domain_names = j.at("domain_names").get<std::vector<std::string>>();
      for (const auto& jr : j.at("records")) {
        CheckpointRecord rec;
        rec.step = jr.at("step").get<std::int64_t>();
        rec.train_loss = jr.at("train_loss").get<std::vector<double>>();
        rec.val_loss = jr.at("val_loss").get<std::vector<double>>();
        rec.checkpoint_path = jr.at("checkpoint").get<std::string>();
        run.records.push_back(std::move(rec));
      }
      have_records = true;
    }
  }
  if (!have_records) {
    run = train_reference(prep_train, prep_val, train_cfg, ref_dir, hash);
    nlohmann::json j;
    j["version"] = 1;
    j["preprocess_hash"] = hash;
    j["train_hash"] = train_hash;
    j["domain_names"] = run.domain_names;
    auto recs = nlohmann::json::array();
    for (const auto& rec : run.records) {
      recs.push_back({{"step", rec.step},
                      {"train_loss", rec.train_loss},
                      {"val_loss", rec.val_loss},
                      {"checkpoint", rec.checkpoint_path}});
    }
    j["records"] = recs;
    detail::write_json(records_path, j);
    save_records_csv(ref_dir / "records.csv", run);
  }

  const CheckpointSelection selection = select_checkpoint(run.records, train_cfg.overfit_delta);

  // --- Stage 3: robust optimization over the excess loss -------------------
  DROConfig dro_cfg = cfg.dro;
  dro_cfg.seed = mix_seed(cfg.seed, str_tag("dro"));
  dro_cfg.total_steps = cfg.dro_steps_override.value_or(selection.step);
  const std::string dro_hash = detail::stage_hash(nlohmann::json{
      {"preprocess", hash}, {"train", train_hash}, {"dro", dro_config_to_json(dro_cfg)},
      {"ref_step", selection.step}});

  const auto dro_dir = cfg.out_dir / "dro";
  const auto weights_path = dro_dir / "weights.json";
  const auto dro_meta_path = dro_dir / "dro_meta.json";

  PipelineResult result;
  result.preprocess_hash = hash;
  result.selected_ref_step = selection.step;
  result.dro_steps = dro_cfg.total_steps;
  for (const auto& d : domains) result.domain_names.push_back(d.name);
  result.uniform = uniform_weights(domains);
  result.weights_path = weights_path;

  DROTrace trace;
  bool have_dro = false;
  if (std::filesystem::exists(weights_path) && std::filesystem::exists(dro_meta_path)) {
    const auto meta = detail::load_json(dro_meta_path);
    detail::require_hash("dro/dro_meta.json", hash, meta.value("preprocess_hash", ""));
    if (meta.value("dro_hash", "") == dro_hash) {
      result.averaged = load_weights(weights_path, result.domain_names, Provenance::dro_averaged);
      have_dro = true;
    }
  }
  if (!have_dro) {
    std::filesystem::create_directories(dro_dir);
    const Checkpoint ref_ckpt =
        load_checkpoint(ref_dir / ("ckpt_" + std::to_string(selection.step) + ".json"));
    detail::require_hash("reference checkpoint", hash, ref_ckpt.preprocess_hash);

    std::ofstream trace_csv(dro_dir / "alpha_trace.csv");
    if (!trace_csv) throw validation_error("cannot write alpha_trace.csv");
    trace_csv << "step,domain,alpha,excess_loss\n";
    auto observer = [&](std::int64_t step, const std::vector<double>& alpha,
                        const std::vector<double>& excess) {
      for (std::size_t i = 0; i < result.domain_names.size(); ++i) {
        trace_csv << step << ',' << result.domain_names[i] << ',' << format_double(alpha[i])
                  << ',' << format_double(excess[i]) << '\n';
      }
    };
    DROResult dro_result;
    try {
      dro_result = run_dro(prep_train, ref_ckpt.policy, dro_cfg, observer);
    } catch (...) {
      trace_csv.flush();  // keep the partial trace for diagnosis
      throw;
    }
    trace = std::move(dro_result.trace);
    result.averaged = dro_result.averaged;
    save_weights(weights_path, result.averaged, result.domain_names);
    detail::write_json(dro_meta_path,
                       nlohmann::json{{"version", 1},
                                      {"preprocess_hash", hash},
                                      {"dro_hash", dro_hash},
                                      {"ref_step", selection.step},
                                      {"steps", dro_cfg.total_steps}});
  }

  // --- Stage 4: optional subsetting ----------------------------------------
  if (cfg.subset_fraction) {
    const auto subset_dir = cfg.out_dir / "subset";
    const auto plan_path = subset_dir / "retention_plan.json";
    const std::string subset_hash = detail::stage_hash(nlohmann::json{
        {"dro", dro_hash}, {"fraction", *cfg.subset_fraction}, {"seed", cfg.seed}});
    bool have_subset = false;
    if (std::filesystem::exists(plan_path)) {
      const auto j = detail::load_json(plan_path);
      detail::require_hash("subset/retention_plan.json", hash, j.value("preprocess_hash", ""));
      have_subset = j.value("subset_hash", "") == subset_hash;
    }
    std::vector<std::int64_t> sizes;
    for (const auto& d : domains) sizes.push_back(static_cast<std::int64_t>(d.size()));
    RetentionPlan plan = compute_retention(sizes, result.averaged, *cfg.subset_fraction);
    plan.names = result.domain_names;
    if (!have_subset) {
      std::filesystem::create_directories(subset_dir);
      const auto materialized =
          materialize_subset(domains, plan, mix_seed(cfg.seed, str_tag("subset")));
      save_dataset(subset_dir / "data", materialized);
      auto j = retention_plan_to_json(plan, hash);
      j["subset_hash"] = subset_hash;
      detail::write_json(plan_path, j);
    }
    result.retention = plan;
  }

  // --- Reports --------------------------------------------------------------
  const auto report_dir = cfg.out_dir / "report";
  std::filesystem::create_directories(report_dir);
  const WeightReport table = render_weight_table({result.uniform, result.averaged},
                                                 {"uniform", "dro_averaged"}, result.domain_names);
  {
    std::ofstream out(report_dir / "weights_table.txt");
    out << weight_table_text(table);
    std::ofstream csv(report_dir / "weights_table.csv");
    csv << weight_table_csv(table);
  }
  if (trace.steps() > 0) {
    export_trace(trace, run.records, run.domain_names, report_dir);
  }

  nlohmann::json run_json;
  run_json["version"] = 1;
  run_json["preprocess_hash"] = hash;
  run_json["data"] = cfg.data_dir.string();
  run_json["scheme"] = to_string(settings.scheme);
  run_json["bins"] = settings.bins;
  run_json["clip"] = settings.clip;
  run_json["val_fraction"] = settings.val_fraction;
  run_json["seed"] = cfg.seed;
  run_json["train"] = train_config_to_json(train_cfg);
  run_json["dro"] = dro_config_to_json(dro_cfg);
  run_json["selected_ref_step"] = selection.step;
  run_json["ref_first_record_overfit"] = selection.first_record_violates;
  run_json["dro_steps"] = dro_cfg.total_steps;
  if (cfg.subset_fraction) run_json["subset_fraction"] = *cfg.subset_fraction;
  detail::write_json(cfg.out_dir / "run.json", run_json);

  return result;
}

}  // namespace mixopt
