#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "mixopt/common.hpp"
#include "mixopt/policy.hpp"
#include "mixopt/preprocess.hpp"
#include "mixopt/weights.hpp"

namespace mixopt {

struct DROConfig {
  double eta = 0.1;                 // step size of the multiplicative update
  double smoothing = 1e-3;          // c: mix of uniform pulled into every update
  bool clip_excess_at_zero = true;
  std::int64_t per_domain_batch = 32;  // m examples from every domain, every step
  std::int64_t total_steps = 2000;
  double lr = 2e-4;
  std::uint64_t seed = 0;
};

inline void validate(const DROConfig& c) {
  if (!(c.eta > 0.0)) throw validation_error("eta must be positive");
  if (!(c.smoothing >= 0.0 && c.smoothing < 1.0)) throw validation_error("smoothing must be in [0,1)");
  if (c.per_domain_batch < 1) throw validation_error("per-domain batch must be >= 1");
  if (c.total_steps < 1) throw validation_error("total_steps must be >= 1");
  if (!(c.lr > 0.0)) throw validation_error("learning rate must be positive");
}

/// Per-domain mean of nll_theta - nll_ref over a stratified batch (one inner
/// vector per domain). Optionally clipped below at zero.
inline std::vector<double> excess_losses(const PolicyParams& theta, const PolicyParams& ref,
                                         const std::vector<std::vector<BatchExample>>& batch,
                                         bool clip_at_zero, PolicyWorkspace& ws_theta,
                                         PolicyWorkspace& ws_ref) {
  if (!theta.same_shape(ref)) {
    // Hidden sizes may differ between the two policies; heads must agree.
    if (theta.d_s != ref.d_s || theta.d_a != ref.d_a || theta.bins != ref.bins) {
      throw validation_error("policies disagree on state/action/bin dimensions");
    }
  }
  std::vector<double> lambda;
  lambda.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].empty()) {
      throw validation_error("stratified batch missing examples for domain " + std::to_string(i));
    }
    KahanSum sum;
    for (const auto& ex : batch[i]) {
      const double l_theta = nll(theta, ex.state, ex.bins, ws_theta);
      const double l_ref = nll(ref, ex.state, ex.bins, ws_ref);
      sum.add(l_theta - l_ref);
    }
    double v = sum.value() / static_cast<double>(batch[i].size());
    if (clip_at_zero && v < 0.0) v = 0.0;
    lambda.push_back(v);
  }
  return lambda;
}

/// Exponentiated gradient ascent step on the simplex, with uniform smoothing:
///   a~_i = alpha_i * exp(eta * lambda_i)   (max-shifted before exp)
///   a^   = a~ / sum(a~)
///   out  = (1-c) * a^ + c/k
inline std::vector<double> update_alpha(const std::vector<double>& alpha,
                                        const std::vector<double>& lambda, double eta, double c) {
  if (alpha.size() != lambda.size() || alpha.empty()) {
    throw validation_error("alpha/lambda length mismatch");
  }
  if (!all_finite(lambda)) throw numerical_error("non-finite excess loss");
  const std::size_t k = alpha.size();
  double max_score = -std::numeric_limits<double>::infinity();
  for (double l : lambda) max_score = std::max(max_score, eta * l);

  std::vector<double> out(k);
  double s = 0.0;  // plain left-to-right sum, so a no-op update is exact
  for (std::size_t i = 0; i < k; ++i) {
    out[i] = alpha[i] * std::exp(eta * lambda[i] - max_score);
    s += out[i];
  }
  if (!(s > 0.0)) throw numerical_error("alpha update collapsed to zero");
  const double uniform = c / static_cast<double>(k);
  for (std::size_t i = 0; i < k; ++i) {
    out[i] = (1.0 - c) * (out[i] / s) + uniform;
  }
  return out;
}

struct DROTrace {
  std::vector<std::string> domain_names;
  std::vector<std::vector<double>> alpha;   // post-update weights, one row per step
  std::vector<std::vector<double>> excess;  // lambda estimates, one row per step
  std::vector<double> mean_alpha;           // running arithmetic mean of alpha rows

  std::size_t steps() const { return alpha.size(); }
};

/// Arithmetic mean of the per-step weights, renormalized against float drift.
inline MixtureWeights average_alpha(const DROTrace& trace) {
  if (trace.alpha.empty()) throw validation_error("empty trace");
  const std::size_t k = trace.alpha[0].size();
  std::vector<KahanSum> sums(k);
  for (const auto& row : trace.alpha) {
    for (std::size_t i = 0; i < k; ++i) sums[i].add(row[i]);
  }
  std::vector<double> mean(k);
  for (std::size_t i = 0; i < k; ++i) {
    mean[i] = sums[i].value() / static_cast<double>(trace.alpha.size());
  }
  MixtureWeights w;
  w.alpha = renormalized(std::move(mean));
  w.provenance = Provenance::dro_averaged;
  return w;
}

struct DROResult {
  DROTrace trace;
  MixtureWeights averaged;
  PolicyParams policy;  // final adversary policy, mostly for inspection
};

using DROStepObserver =
    std::function<void(std::int64_t step, const std::vector<double>& alpha,
                       const std::vector<double>& excess)>;

/// The min-max loop: every step draws m examples from each domain, estimates
/// per-domain excess loss against the frozen reference, moves alpha by the
/// multiplicative update, then takes one Adam step on the alpha-weighted NLL.
/// The adversary policy starts fresh, not from the reference weights.
inline DROResult run_dro(const std::vector<PreparedDomain>& train, const PolicyParams& ref,
                         const DROConfig& cfg, const DROStepObserver& on_step = nullptr) {
  validate(cfg);
  if (train.empty()) throw validation_error("no domains");
  const std::size_t k = train.size();
  const std::size_t d_s = train[0].state_dim;
  const std::size_t d_a = train[0].action_dim;
  const std::size_t bins = train[0].n_bins;
  for (const auto& d : train) {
    if (d.state_dim != d_s || d.action_dim != d_a || d.n_bins != bins || d.n == 0) {
      throw validation_error("inconsistent prepared domains");
    }
  }
  if (ref.d_s != d_s || ref.d_a != d_a || ref.bins != bins) {
    throw validation_error("reference policy does not match the prepared data");
  }

  PolicyParams theta =
      init_policy(d_s, d_a, bins, ref.hidden, mix_seed(cfg.seed, str_tag("dro_policy")));
  AdamState adam = init_adam(theta, cfg.lr, cfg.total_steps);
  PolicyWorkspace ws_theta, ws_ref;
  ws_theta.resize(theta);
  ws_ref.resize(ref);
  Gradient grad;

  Rng batch_rng(mix_seed(cfg.seed, str_tag("dro_batch")));
  const std::size_t m = static_cast<std::size_t>(cfg.per_domain_batch);

  std::vector<double> alpha(k, 1.0 / static_cast<double>(k));
  DROTrace trace;
  for (const auto& d : train) trace.domain_names.push_back(d.name);
  std::vector<KahanSum> mean_accum(k);

  std::vector<std::vector<BatchExample>> batch(k, std::vector<BatchExample>(m));
  std::vector<BatchExample> flat(k * m);
  std::vector<double> flat_weights(k * m);

  for (std::int64_t step = 1; step <= cfg.total_steps; ++step) {
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t idx = batch_rng.index(train[i].n);
        batch[i][j].state = train[i].state(idx);
        batch[i][j].bins = train[i].action_bins(idx);
      }
    }

    const std::vector<double> lambda =
        excess_losses(theta, ref, batch, cfg.clip_excess_at_zero, ws_theta, ws_ref);
    if (!all_finite(lambda)) {
      throw numerical_error("non-finite excess loss at step " + std::to_string(step));
    }
    alpha = update_alpha(alpha, lambda, cfg.eta, cfg.smoothing);

    // Theta descends the alpha-weighted mixture loss.
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        flat[i * m + j] = batch[i][j];
        flat_weights[i * m + j] = alpha[i] / static_cast<double>(m);
      }
    }
    const double loss = grad_nll(theta, flat, flat_weights, grad, ws_theta);
    if (!std::isfinite(loss)) {
      throw numerical_error("non-finite weighted loss at step " + std::to_string(step));
    }
    adam_step(theta, adam, grad);

    trace.alpha.push_back(alpha);
    trace.excess.push_back(lambda);
    for (std::size_t i = 0; i < k; ++i) mean_accum[i].add(alpha[i]);
    std::vector<double> running(k);
    for (std::size_t i = 0; i < k; ++i) {
      running[i] = mean_accum[i].value() / static_cast<double>(step);
    }
    trace.mean_alpha = std::move(running);
    if (on_step) on_step(step, alpha, lambda);
  }

  DROResult result;
  result.trace = std::move(trace);
  result.averaged = average_alpha(result.trace);
  result.policy = std::move(theta);
  return result;
}

/// alpha_trace.csv: one row per (step, domain).
inline void save_alpha_trace_csv(const std::filesystem::path& path, const DROTrace& trace) {
  std::ofstream out(path);
  if (!out) throw validation_error("cannot write " + path.string());
  out << "step,domain,alpha,excess_loss\n";
  for (std::size_t s = 0; s < trace.steps(); ++s) {
    for (std::size_t i = 0; i < trace.domain_names.size(); ++i) {
      out << (s + 1) << ',' << trace.domain_names[i] << ',' << format_double(trace.alpha[s][i])
          << ',' << format_double(trace.excess[s][i]) << '\n';
    }
  }
}

}  // namespace mixopt
