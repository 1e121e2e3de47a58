#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "mixopt/dataset.hpp"
#include "mixopt/subset.hpp"
#include "test_util.hpp"

using namespace mixopt;

namespace {

MixtureWeights weights_of(std::vector<double> alpha) {
  MixtureWeights w;
  w.alpha = std::move(alpha);
  w.provenance = Provenance::dro_averaged;
  return w;
}

std::vector<double> random_simplex(Rng& rng, std::size_t k) {
  std::vector<double> a(k);
  double s = 0.0;
  for (auto& v : a) {
    v = -std::log(rng.uniform() + 1e-12);
    s += v;
  }
  for (auto& v : a) v /= s;
  return renormalized(a);
}

}  // namespace

TEST_CASE("retention reproduces the worked three-domain example", "[subset]") {
  const auto plan = compute_retention({100, 50, 850}, weights_of({0.3, 0.05, 0.65}), 0.25);
  CHECK(plan.target == 250);
  CHECK(plan.desired[0] == Catch::Approx(75.0));
  CHECK(plan.desired[1] == Catch::Approx(12.5));
  CHECK(plan.desired[2] == Catch::Approx(162.5));
  CHECK(plan.retained == std::vector<std::int64_t>{75, 12, 163});
  CHECK_FALSE(plan.capped[0]);
  CHECK_FALSE(plan.capped[1]);
  CHECK_FALSE(plan.capped[2]);
}

TEST_CASE("retention reproduces the capped two-domain example", "[subset]") {
  const auto plan = compute_retention({20, 980}, weights_of({0.2, 0.8}), 0.25);
  CHECK(plan.target == 250);
  CHECK(plan.retained == std::vector<std::int64_t>{20, 230});
  CHECK(plan.capped[0]);
  CHECK_FALSE(plan.capped[1]);
}

TEST_CASE("size-proportional weights retain a proportional slice", "[subset]") {
  const std::vector<std::int64_t> sizes = {120, 480, 400};
  std::vector<double> alpha;
  for (auto s : sizes) alpha.push_back(static_cast<double>(s) / 1000.0);
  for (double f : {0.1, 0.25, 0.5, 0.9}) {
    const auto plan = compute_retention(sizes, weights_of(alpha), f);
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      CHECK(std::abs(static_cast<double>(plan.retained[i]) - f * static_cast<double>(sizes[i])) <=
            1.0);
    }
  }
}

TEST_CASE("retention sums to the target and respects capacities", "[subset]") {
  Rng rng(606);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t k = 1 + rng.index(8);
    std::vector<std::int64_t> sizes(k);
    for (auto& s : sizes) s = 1 + static_cast<std::int64_t>(rng.index(2000));
    const auto alpha = random_simplex(rng, k);
    const double fraction = rng.uniform(0.01, 1.0);
    const auto plan = compute_retention(sizes, weights_of(alpha), fraction);
    std::int64_t total = 0;
    for (std::size_t i = 0; i < k; ++i) {
      REQUIRE(plan.retained[i] >= 0);
      REQUIRE(plan.retained[i] <= sizes[i]);
      total += plan.retained[i];
    }
    REQUIRE(total == plan.target);
  }
}

TEST_CASE("raising a domain's weight never lowers its retention", "[subset]") {
  Rng rng(17);
  for (int rep = 0; rep < 300; ++rep) {
    const std::size_t k = 2 + rng.index(6);
    std::vector<std::int64_t> sizes(k);
    for (auto& s : sizes) s = 5 + static_cast<std::int64_t>(rng.index(1500));
    auto alpha = random_simplex(rng, k);
    const double fraction = rng.uniform(0.05, 0.95);
    const std::size_t target_dom = rng.index(k);

    const auto before = compute_retention(sizes, weights_of(alpha), fraction);

    const double bump = rng.uniform(0.01, 0.5) * (1.0 - alpha[target_dom]);
    std::vector<double> raised(alpha);
    const double scale = (1.0 - alpha[target_dom] - bump) / (1.0 - alpha[target_dom]);
    for (std::size_t i = 0; i < k; ++i) raised[i] *= scale;
    raised[target_dom] = alpha[target_dom] + bump;
    const auto after = compute_retention(sizes, weights_of(renormalized(raised)), fraction);

    REQUIRE(after.retained[target_dom] >= before.retained[target_dom]);
  }
}

TEST_CASE("oracle agrees on the capped example and degenerate cases", "[subset]") {
  SECTION("capped two-domain instance is deterministic for the oracle") {
    const auto est = retention_oracle({20, 980}, {0.2, 0.8}, 0.25, 1000, 5);
    CHECK(std::abs(est.mean[0] - 20.0) <= 0.5);
    CHECK(std::abs(est.mean[1] - 230.0) <= 0.5);
  }
  SECTION("no capping matches the desired counts within sampling error") {
    const std::vector<std::int64_t> sizes = {400, 600};
    const std::vector<double> alpha = {0.35, 0.65};
    const auto est = retention_oracle(sizes, alpha, 0.5, 2000, 6);
    CHECK(std::abs(est.mean[0] - 0.35 * 500.0) <= 1.0);
    CHECK(std::abs(est.mean[1] - 0.65 * 500.0) <= 1.0);
  }
  SECTION("single domain returns the target exactly") {
    const auto est = retention_oracle({777}, {1.0}, 0.5, 50, 7);
    CHECK(est.mean[0] == Catch::Approx(389.0).margin(1e-12));
    CHECK(est.stddev[0] == 0.0);
  }
}

TEST_CASE("deterministic allocation tracks the stochastic oracle", "[subset]") {
  Rng rng(4040);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t k = 2 + rng.index(5);
    std::vector<std::int64_t> sizes(k);
    for (auto& s : sizes) s = 20 + static_cast<std::int64_t>(rng.index(1200));
    const auto alpha = random_simplex(rng, k);
    const double fraction = rng.uniform(0.1, 0.9);

    const auto plan = compute_retention(sizes, weights_of(alpha), fraction);
    const int trials = 400;
    const auto est = retention_oracle(sizes, alpha, fraction, trials, rng.next_u64());
    for (std::size_t i = 0; i < k; ++i) {
      const double se = est.stddev[i] / std::sqrt(static_cast<double>(trials));
      // One point of slack: the deterministic side is integer-valued.
      const double tol = 3.0 * se + 1.0;
      REQUIRE(std::abs(static_cast<double>(plan.retained[i]) - est.mean[i]) <= tol);
    }
  }
}

TEST_CASE("materialization hits exact counts and is reproducible", "[subset]") {
  const auto domains = generate_synthetic_suite(SuiteKind::noise_pair, 30, {700, 700});
  std::vector<std::int64_t> sizes = {700, 700};

  SECTION("full retention reproduces the dataset") {
    auto plan = compute_retention(sizes, weights_of({0.5, 0.5}), 1.0);
    const auto out = materialize_subset(domains, plan, 3);
    REQUIRE(out.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
      REQUIRE(out[i].trajectories.size() == domains[i].trajectories.size());
      for (std::size_t t = 0; t < out[i].trajectories.size(); ++t) {
        CHECK(out[i].trajectories[t].states == domains[i].trajectories[t].states);
        CHECK(out[i].trajectories[t].actions == domains[i].trajectories[t].actions);
      }
    }
  }

  SECTION("counts are exact after truncation") {
    auto plan = compute_retention(sizes, weights_of({0.8, 0.2}), 0.3);
    const auto out = materialize_subset(domains, plan, 3);
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(static_cast<std::int64_t>(out[i].size()) == plan.retained[i]);
    }
  }

  SECTION("same seed gives byte-identical datasets on disk") {
    testutil::TempDir d1("sub1");
    testutil::TempDir d2("sub2");
    auto plan = compute_retention(sizes, weights_of({0.7, 0.3}), 0.4);
    save_dataset(d1.path, materialize_subset(domains, plan, 99));
    save_dataset(d2.path, materialize_subset(domains, plan, 99));
    CHECK(testutil::read_file(d1.path / "manifest.json") ==
          testutil::read_file(d2.path / "manifest.json"));
    CHECK(testutil::read_file(d1.path / "scripted.jsonl") ==
          testutil::read_file(d2.path / "scripted.jsonl"));
    CHECK(testutil::read_file(d1.path / "noise.jsonl") ==
          testutil::read_file(d2.path / "noise.jsonl"));

    auto plan2 = compute_retention(sizes, weights_of({0.7, 0.3}), 0.4);
    save_dataset(d2.path, materialize_subset(domains, plan2, 100));
    CHECK(testutil::read_file(d1.path / "scripted.jsonl") !=
          testutil::read_file(d2.path / "scripted.jsonl"));
  }
}

TEST_CASE("subset validation errors", "[subset]") {
  CHECK_THROWS_AS(compute_retention({100}, weights_of({1.0}), 1.5), validation_error);
  CHECK_THROWS_AS(compute_retention({100, 50}, weights_of({0.9, 0.2}), 0.5), validation_error);
  CHECK_THROWS_AS(compute_retention({}, weights_of({}), 0.5), validation_error);

  const auto domains = generate_synthetic_suite(SuiteKind::multimodal, 1, {100, 100});
  auto plan = compute_retention({100, 100}, weights_of({0.5, 0.5}), 0.5);
  plan.sizes[0] = 99;  // stale plan
  CHECK_THROWS_AS(materialize_subset(domains, plan, 1), validation_error);
}

TEST_CASE("retention plan serializes with its provenance hash", "[subset]") {
  testutil::TempDir dir("plan_io");
  auto plan = compute_retention({20, 980}, weights_of({0.2, 0.8}), 0.25);
  plan.names = {"small", "big"};
  save_retention_plan(dir.path / "retention_plan.json", plan, "beefcafe01234567");
  const auto text = testutil::read_file(dir.path / "retention_plan.json");
  CHECK(text.find("beefcafe01234567") != std::string::npos);
  CHECK(text.find("\"retained\": 230") != std::string::npos);
  CHECK(text.find("\"capped\": true") != std::string::npos);
}
