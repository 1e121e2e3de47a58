#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "mixopt/policy.hpp"
#include "test_util.hpp"

using namespace mixopt;

namespace {

/// Direct softmax NLL, written independently of the library's log-sum-exp
/// route: plain exp/sum per head.
double direct_softmax_nll(const std::vector<double>& logits, const std::vector<std::uint16_t>& bins,
                          std::size_t d_a, std::size_t B) {
  double total = 0.0;
  for (std::size_t d = 0; d < d_a; ++d) {
    double denom = 0.0;
    for (std::size_t i = 0; i < B; ++i) denom += std::exp(logits[d * B + i]);
    total += -std::log(std::exp(logits[d * B + bins[d]]) / denom);
  }
  return total;
}

struct TinyBatch {
  std::vector<std::vector<double>> states;
  std::vector<std::vector<std::uint16_t>> bins;
  std::vector<BatchExample> examples;
  std::vector<double> weights;

  static TinyBatch make(const PolicyParams& p, std::size_t n, std::uint64_t seed,
                        bool random_weights = false) {
    TinyBatch b;
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(p.d_s);
      for (auto& v : s) v = rng.normal();
      std::vector<std::uint16_t> a(p.d_a);
      for (auto& v : a) v = static_cast<std::uint16_t>(rng.index(p.bins));
      b.states.push_back(std::move(s));
      b.bins.push_back(std::move(a));
      b.weights.push_back(random_weights ? rng.uniform(0.1, 2.0) : 1.0);
    }
    for (std::size_t i = 0; i < n; ++i) {
      b.examples.push_back({b.states[i].data(), b.bins[i].data()});
    }
    return b;
  }
};

/// Weighted mean loss as a plain function of the parameters, for finite
/// differencing.
double batch_loss(const PolicyParams& p, const TinyBatch& b) {
  PolicyWorkspace ws;
  ws.resize(p);
  double wsum = 0.0, loss = 0.0;
  for (std::size_t i = 0; i < b.examples.size(); ++i) wsum += b.weights[i];
  for (std::size_t i = 0; i < b.examples.size(); ++i) {
    loss += (b.weights[i] / wsum) * nll(p, b.examples[i].state, b.examples[i].bins, ws);
  }
  return loss;
}

}  // namespace

TEST_CASE("policy init is deterministic with the stated shapes", "[policy]") {
  const auto a = init_policy(10, 7, 256, {256, 256}, 42);
  const auto b = init_policy(10, 7, 256, {256, 256}, 42);
  REQUIRE(a.layers.size() == 3);
  CHECK(a.logit_width() == 1792);
  CHECK(a.layers.back().out == 1792);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    CHECK(a.layers[l].w == b.layers[l].w);
    CHECK(a.layers[l].b == b.layers[l].b);
    for (double bias : a.layers[l].b) CHECK(bias == 0.0);
  }
  const auto c = init_policy(10, 7, 256, {256, 256}, 43);
  CHECK(a.layers[0].w != c.layers[0].w);
}

TEST_CASE("initial heads are near-uniform", "[policy]") {
  const auto p = init_policy(10, 7, 256, {256, 256}, 7);
  PolicyWorkspace ws;
  ws.resize(p);
  Rng rng(11);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> s(p.d_s);
    for (auto& v : s) v = rng.normal();
    forward(p, s.data(), ws);
    const auto& logits = ws.post.back();
    for (std::size_t d = 0; d < p.d_a; ++d) {
      const double lse = log_sum_exp(logits.data() + d * p.bins, p.bins);
      double max_prob = 0.0;
      for (std::size_t i = 0; i < p.bins; ++i) {
        max_prob = std::max(max_prob, std::exp(logits[d * p.bins + i] - lse));
      }
      CHECK(max_prob < 0.1);
    }
  }
}

TEST_CASE("nll at uniform logits equals d_a ln B", "[policy]") {
  const std::size_t d_a = 7, B = 256;
  std::vector<double> logits(d_a * B, 0.0);
  std::vector<std::uint16_t> bins(d_a, 100);
  const double v = nll_from_logits(logits.data(), bins.data(), d_a, B);
  CHECK(v == Catch::Approx(7.0 * std::log(256.0)).margin(1e-12));
  CHECK(v == Catch::Approx(38.8162).margin(1e-4));
}

TEST_CASE("confident correct logits give near-zero loss", "[policy]") {
  const std::size_t d_a = 7, B = 256;
  std::vector<double> logits(d_a * B, 0.0);
  std::vector<std::uint16_t> bins(d_a);
  for (std::size_t d = 0; d < d_a; ++d) {
    bins[d] = static_cast<std::uint16_t>(3 * d + 1);
    logits[d * B + bins[d]] = 50.0;
  }
  CHECK(nll_from_logits(logits.data(), bins.data(), d_a, B) < 1e-6);
}

TEST_CASE("nll matches a direct softmax oracle", "[policy]") {
  const std::vector<double> logits = {1.0, 2.0, 3.0, 0.0, 0.0, 5.0};
  const std::vector<std::uint16_t> bins = {2, 2};
  const double got = nll_from_logits(logits.data(), bins.data(), 2, 3);
  const double want = direct_softmax_nll(logits, bins, 2, 3);
  CHECK(std::abs(got - want) <= 1e-12);
  CHECK(got >= 0.0);
}

TEST_CASE("analytic gradient matches central finite differences", "[policy]") {
  PolicyParams p = init_policy(3, 2, 4, {8}, 1234);
  const TinyBatch batch = TinyBatch::make(p, 16, 99, true);

  PolicyWorkspace ws;
  ws.resize(p);
  Gradient grad;
  const double loss = grad_nll(p, batch.examples, batch.weights, grad, ws);
  CHECK(loss == Catch::Approx(batch_loss(p, batch)).margin(1e-12));

  const double h = 1e-4;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto check_tensor = [&](std::vector<double>& theta, const std::vector<double>& g) {
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double saved = theta[i];
        theta[i] = saved + h;
        const double up = batch_loss(p, batch);
        theta[i] = saved - h;
        const double down = batch_loss(p, batch);
        theta[i] = saved;
        const double fd = (up - down) / (2.0 * h);
        const double rel = std::abs(g[i] - fd) / std::max(std::abs(fd), 1e-6);
        REQUIRE(rel <= 1e-4);
      }
    };
    check_tensor(p.layers[l].w, grad.layers[l].w);
    check_tensor(p.layers[l].b, grad.layers[l].b);
  }
}

TEST_CASE("gradient weighting behaves like a normalized mean", "[policy]") {
  PolicyParams p = init_policy(4, 2, 8, {12}, 5);
  const TinyBatch batch = TinyBatch::make(p, 10, 17);

  PolicyWorkspace ws;
  ws.resize(p);
  Gradient g_ones, g_double, g_mean;
  std::vector<double> doubled(batch.weights);
  for (auto& w : doubled) w *= 2.0;

  const double l1 = grad_nll(p, batch.examples, batch.weights, g_ones, ws);
  const double l2 = grad_nll(p, batch.examples, doubled, g_double, ws);
  CHECK(l1 == Catch::Approx(l2).margin(1e-12));
  for (std::size_t l = 0; l < g_ones.layers.size(); ++l) {
    for (std::size_t i = 0; i < g_ones.layers[l].w.size(); ++i) {
      CHECK(std::abs(g_ones.layers[l].w[i] - g_double.layers[l].w[i]) <= 1e-15);
    }
  }


  std::vector<double> zeros(batch.weights.size(), 0.0);
  CHECK_THROWS_AS(grad_nll(p, batch.examples, zeros, g_mean, ws), validation_error);
}

TEST_CASE("adam leaves parameters alone on a zero gradient", "[policy]") {
  PolicyParams p = init_policy(3, 2, 4, {6}, 77);
  const PolicyParams before = p;
  AdamState adam = init_adam(p, 1e-3, 100);
  Gradient zero;
  zero.resize(p);
  zero.zero();
  adam_step(p, adam, zero);
  CHECK(adam.step == 1);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    CHECK(p.layers[l].w == before.layers[l].w);
    CHECK(p.layers[l].b == before.layers[l].b);
  }
}

TEST_CASE("cosine schedule halves the rate at midpoint", "[policy]") {
  CHECK(cosine_lr(2e-4, 0, 1000) == 2e-4);
  CHECK(cosine_lr(2e-4, 500, 1000) == Catch::Approx(1e-4).margin(1e-18));
  CHECK(cosine_lr(2e-4, 1000, 1000) == Catch::Approx(0.0).margin(1e-18));
}

TEST_CASE("a fixed batch can be overfit", "[policy]") {
  PolicyParams p = init_policy(4, 2, 8, {24}, 3);
  const TinyBatch batch = TinyBatch::make(p, 32, 8);
  AdamState adam = init_adam(p, 3e-3, 500);
  PolicyWorkspace ws;
  ws.resize(p);
  Gradient grad;

  const double initial = batch_loss(p, batch);
  for (int step = 0; step < 500; ++step) {
    grad_nll(p, batch.examples, batch.weights, grad, ws);
    adam_step(p, adam, grad);
  }
  const double final_loss = batch_loss(p, batch);
  CHECK(final_loss <= 0.5 * initial);
}

TEST_CASE("non-finite gradients halt the optimizer", "[policy]") {
  PolicyParams p = init_policy(3, 2, 4, {6}, 1);
  AdamState adam = init_adam(p, 1e-3, 10);
  Gradient bad;
  bad.resize(p);
  bad.layers[0].w[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(adam_step(p, adam, bad), numerical_error);
}

TEST_CASE("checkpoints reload bit-exactly", "[policy]") {
  testutil::TempDir dir("ckpt");
  PolicyParams p = init_policy(5, 3, 16, {32, 16}, 2024);
  AdamState adam = init_adam(p, 2e-4, 1000);

  // Take a few steps so moments are non-trivial.
  const TinyBatch batch = TinyBatch::make(p, 8, 4);
  PolicyWorkspace ws;
  ws.resize(p);
  Gradient grad;
  for (int i = 0; i < 3; ++i) {
    grad_nll(p, batch.examples, batch.weights, grad, ws);
    adam_step(p, adam, grad);
  }

  const auto path = dir.path / "ckpt_3.json";
  save_checkpoint(path, Checkpoint{3, p, adam, "cafe0123"});
  const Checkpoint back = load_checkpoint(path);
  CHECK(back.step == 3);
  CHECK(back.preprocess_hash == "cafe0123");
  REQUIRE(back.policy.layers.size() == p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    CHECK(back.policy.layers[l].w == p.layers[l].w);
    CHECK(back.policy.layers[l].b == p.layers[l].b);
    CHECK(back.adam.m[l].w == adam.m[l].w);
    CHECK(back.adam.v[l].w == adam.v[l].w);
  }
  CHECK(back.adam.step == adam.step);

  // Saving the reloaded checkpoint reproduces the file byte for byte.
  const auto path2 = dir.path / "ckpt_again.json";
  save_checkpoint(path2, back);
  CHECK(testutil::read_file(path) == testutil::read_file(path2));
}

TEST_CASE("out-of-range bins are rejected", "[policy]") {
  const std::size_t d_a = 2, B = 4;
  std::vector<double> logits(d_a * B, 0.0);
  std::vector<std::uint16_t> bins = {1, 4};
  CHECK_THROWS_AS(nll_from_logits(logits.data(), bins.data(), d_a, B), validation_error);
}
