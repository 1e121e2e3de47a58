#include <catch2/catch_amalgamated.hpp>

#include "mixopt/pipeline.hpp"
#include "test_util.hpp"

using namespace mixopt;

namespace {

PipelineConfig tiny_config(const std::filesystem::path& data, const std::filesystem::path& out) {
  PipelineConfig cfg;
  cfg.data_dir = data;
  cfg.out_dir = out;
  cfg.seed = 77;
  cfg.scheme = NormScheme::gaussian;
  cfg.bins = 16;
  cfg.clip = 5.0;
  cfg.val_fraction = 0.2;
  cfg.train.total_steps = 120;
  cfg.train.eval_interval = 60;
  cfg.train.batch_size = 64;
  cfg.train.lr = 2e-3;
  cfg.train.hidden = {16};
  cfg.train.eval_subset = 128;
  cfg.dro.per_domain_batch = 8;
  cfg.dro.lr = 2e-3;
  cfg.subset_fraction = 0.5;
  return cfg;
}

}  // namespace

TEST_CASE("the pipeline runs end to end and stamps its artifacts", "[pipeline]") {
  testutil::TempDir data("pipe_data");
  testutil::TempDir out("pipe_out");
  save_dataset(data.path, generate_synthetic_suite(SuiteKind::noise_pair, 13, {500, 500}));

  const auto cfg = tiny_config(data.path, out.path);
  const auto result = run_pipeline(cfg);

  CHECK(result.domain_names == std::vector<std::string>{"scripted", "noise"});
  CHECK(result.selected_ref_step > 0);
  CHECK(result.dro_steps == result.selected_ref_step);
  validate_simplex(result.averaged.alpha, 1e-9);
  REQUIRE(result.retention.has_value());
  CHECK(result.retention->target == 500);

  CHECK(std::filesystem::exists(out.path / "norm_stats.json"));
  CHECK(std::filesystem::exists(out.path / "ref" / "records.csv"));
  CHECK(std::filesystem::exists(out.path / "dro" / "weights.json"));
  CHECK(std::filesystem::exists(out.path / "dro" / "alpha_trace.csv"));
  CHECK(std::filesystem::exists(out.path / "subset" / "retention_plan.json"));
  CHECK(std::filesystem::exists(out.path / "subset" / "data" / "manifest.json"));
  CHECK(std::filesystem::exists(out.path / "report" / "weights_table.txt"));
  CHECK(std::filesystem::exists(out.path / "run.json"));

  // Every stage artifact carries the preprocessing hash.
  const std::string hash = result.preprocess_hash;
  CHECK(testutil::read_file(out.path / "norm_stats.json").find(hash) != std::string::npos);
  CHECK(testutil::read_file(out.path / "ref" / "records.json").find(hash) != std::string::npos);
  CHECK(testutil::read_file(out.path / "dro" / "dro_meta.json").find(hash) != std::string::npos);
  CHECK(testutil::read_file(out.path / "subset" / "retention_plan.json").find(hash) !=
        std::string::npos);
  CHECK(testutil::read_file(out.path / "run.json").find(hash) != std::string::npos);

  // The stats in the artifact were fitted per domain, in manifest order.
  const auto pp = load_preprocess(out.path / "norm_stats.json");
  REQUIRE(pp.domain_names == result.domain_names);
  for (std::size_t i = 0; i < pp.domain_stats.size(); ++i) {
    CHECK(pp.domain_stats[i].domain_id == static_cast<int>(i));
  }

  // The subset dataset reloads cleanly with the retained counts.
  auto [mf, subset_domains] = load_manifest(out.path / "subset" / "data");
  std::int64_t total = 0;
  for (const auto& d : subset_domains) total += static_cast<std::int64_t>(d.size());
  CHECK(total == 500);
}

TEST_CASE("two fresh runs produce byte-identical outputs", "[pipeline]") {
  testutil::TempDir data("pipe_det_data");
  testutil::TempDir out1("pipe_det1");
  testutil::TempDir out2("pipe_det2");
  save_dataset(data.path, generate_synthetic_suite(SuiteKind::noise_pair, 29, {400, 400}));

  run_pipeline(tiny_config(data.path, out1.path));
  run_pipeline(tiny_config(data.path, out2.path));

  CHECK(testutil::read_file(out1.path / "dro" / "weights.json") ==
        testutil::read_file(out2.path / "dro" / "weights.json"));
  CHECK(testutil::read_file(out1.path / "subset" / "retention_plan.json") ==
        testutil::read_file(out2.path / "subset" / "retention_plan.json"));
  CHECK(testutil::read_file(out1.path / "run.json") == testutil::read_file(out2.path / "run.json"));
}

TEST_CASE("a run interrupted after reference training resumes identically", "[pipeline]") {
  testutil::TempDir data("pipe_res_data");
  testutil::TempDir out("pipe_res_out");
  testutil::TempDir fresh("pipe_res_fresh");
  save_dataset(data.path, generate_synthetic_suite(SuiteKind::noise_pair, 31, {400, 400}));

  const auto cfg = tiny_config(data.path, out.path);
  run_pipeline(cfg);
  const std::string weights = testutil::read_file(out.path / "dro" / "weights.json");
  const std::string plan = testutil::read_file(out.path / "subset" / "retention_plan.json");

  // Simulate a crash right after reference training: later stages vanish.
  std::filesystem::remove_all(out.path / "dro");
  std::filesystem::remove_all(out.path / "subset");
  std::filesystem::remove_all(out.path / "report");
  std::filesystem::remove(out.path / "run.json");
  run_pipeline(cfg);

  CHECK(testutil::read_file(out.path / "dro" / "weights.json") == weights);
  CHECK(testutil::read_file(out.path / "subset" / "retention_plan.json") == plan);

  // And the resumed output matches a never-interrupted run elsewhere.
  auto cfg_fresh = cfg;
  cfg_fresh.out_dir = fresh.path;
  run_pipeline(cfg_fresh);
  CHECK(testutil::read_file(fresh.path / "dro" / "weights.json") == weights);
}

TEST_CASE("stage artifacts from another configuration are refused", "[pipeline]") {
  testutil::TempDir data("pipe_hash_data");
  testutil::TempDir out("pipe_hash_out");
  save_dataset(data.path, generate_synthetic_suite(SuiteKind::noise_pair, 37, {400, 400}));

  auto cfg = tiny_config(data.path, out.path);
  run_pipeline(cfg);

  auto changed = cfg;
  changed.bins = 32;  // different discretization: stale artifacts must not be reused
  CHECK_THROWS_WITH(run_pipeline(changed), Catch::Matchers::ContainsSubstring("hash"));
}

TEST_CASE("pipeline config parses from JSON with defaults", "[pipeline]") {
  const auto j = nlohmann::json::parse(R"({
    "data": "ds", "out": "run", "seed": 5,
    "scheme": "bounds", "bins": 64,
    "train": {"total_steps": 500, "eval_interval": 100, "hidden": [32, 32]},
    "dro": {"eta": 0.2},
    "subset_fraction": 0.25
  })");
  const auto cfg = pipeline_config_from_json(j, "/base");
  CHECK(cfg.data_dir == std::filesystem::path("/base/ds"));
  CHECK(cfg.scheme == NormScheme::bounds);
  CHECK(cfg.bins == 64);
  CHECK(cfg.clip == 5.0);
  CHECK(cfg.train.total_steps == 500);
  CHECK(cfg.train.hidden == std::vector<std::size_t>{32, 32});
  CHECK(cfg.train.batch_size == 256);
  CHECK(cfg.dro.eta == 0.2);
  CHECK(cfg.dro.smoothing == 1e-3);
  REQUIRE(cfg.subset_fraction.has_value());
  CHECK(*cfg.subset_fraction == 0.25);
  CHECK_FALSE(cfg.dro_steps_override.has_value());
}
