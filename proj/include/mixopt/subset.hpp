#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "mixopt/common.hpp"
#include "mixopt/dataset.hpp"
#include "mixopt/weights.hpp"

namespace mixopt {

struct RetentionPlan {
  double fraction = 0.0;
  std::int64_t target = 0;  // T, in state-action pairs
  std::vector<std::string> names;
  std::vector<std::int64_t> sizes;
  std::vector<double> desired;  // alpha_i * T, before capping
  std::vector<std::int64_t> retained;
  std::vector<bool> capped;  // desired exceeded the domain size
};

namespace detail {

/// Rounds `values` to integers summing to `target` without exceeding `caps`.
/// Floors first, then hands out the remaining units by largest fractional
/// part; ties go to the larger value, then the lower index.
inline std::vector<std::int64_t> largest_remainder_round(const std::vector<double>& values,
                                                         const std::vector<std::int64_t>& caps,
                                                         std::int64_t target) {
  const std::size_t k = values.size();
  std::vector<std::int64_t> out(k);
  std::vector<double> remainder(k);
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < k; ++i) {
    double v = std::min(values[i], static_cast<double>(caps[i]));
    v = std::max(v, 0.0);
    out[i] = static_cast<std::int64_t>(std::floor(v));
    remainder[i] = v - static_cast<double>(out[i]);
    assigned += out[i];
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (remainder[a] != remainder[b]) return remainder[a] > remainder[b];
    if (values[a] != values[b]) return values[a] > values[b];
    return a < b;
  });
  std::int64_t need = target - assigned;
  while (need > 0) {
    bool progressed = false;
    for (std::size_t i : order) {
      if (need == 0) break;
      if (out[i] < caps[i]) {
        ++out[i];
        --need;
        progressed = true;
      }
    }
    if (!progressed) break;  // every domain at capacity
  }
  while (need < 0) {
    bool progressed = false;
    for (auto it = order.rbegin(); it != order.rend() && need < 0; ++it) {
      if (out[*it] > 0) {
        --out[*it];
        ++need;
        progressed = true;
      }
    }
    if (!progressed) break;
  }
  return out;
}

}  // namespace detail

/// Turns mixture weights plus a target fraction into per-domain retention
/// counts: each domain is entitled to alpha_i * T capped at its size; the
/// shortfall is spread over the remaining unselected mass proportionally,
/// iterating when a domain fills up.
inline RetentionPlan compute_retention(const std::vector<std::int64_t>& sizes,
                                       const MixtureWeights& weights, double fraction) {
  if (sizes.empty() || sizes.size() != weights.alpha.size()) {
    throw validation_error("sizes/weights length mismatch");
  }
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw validation_error("fraction must be in (0, 1]");
  }
  validate_simplex(weights.alpha, 1e-9);
  std::int64_t total = 0;
  for (std::int64_t s : sizes) {
    if (s <= 0) throw validation_error("domain sizes must be positive");
    total += s;
  }
  RetentionPlan plan;
  plan.fraction = fraction;
  plan.sizes = sizes;
  plan.target = std::llround(fraction * static_cast<double>(total));
  if (plan.target > total) throw validation_error("target exceeds dataset size");
  const std::size_t k = sizes.size();
  const double t = static_cast<double>(plan.target);

  std::vector<double> entitled(k);
  plan.desired.resize(k);
  plan.capped.resize(k);
  double entitled_sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    plan.desired[i] = weights.alpha[i] * t;
    plan.capped[i] = plan.desired[i] > static_cast<double>(sizes[i]);
    entitled[i] = std::min(plan.desired[i], static_cast<double>(sizes[i]));
    entitled_sum += entitled[i];
  }
  const std::int64_t first_target =
      std::min(plan.target, static_cast<std::int64_t>(std::llround(entitled_sum)));
  plan.retained = detail::largest_remainder_round(entitled, sizes, first_target);

  // Top-up: spread the shortfall over unselected mass until T is reached.
  while (true) {
    std::int64_t kept = std::accumulate(plan.retained.begin(), plan.retained.end(), std::int64_t{0});
    std::int64_t shortfall = plan.target - kept;
    if (shortfall <= 0) break;
    std::int64_t free_mass = 0;
    for (std::size_t i = 0; i < k; ++i) free_mass += sizes[i] - plan.retained[i];
    if (free_mass <= shortfall) {
      for (std::size_t i = 0; i < k; ++i) plan.retained[i] = sizes[i];
      continue;
    }
    std::vector<double> add(k, 0.0);
    std::vector<std::int64_t> room(k);
    for (std::size_t i = 0; i < k; ++i) {
      room[i] = sizes[i] - plan.retained[i];
      add[i] = static_cast<double>(shortfall) * static_cast<double>(room[i]) /
               static_cast<double>(free_mass);
    }
    const auto delta = detail::largest_remainder_round(add, room, shortfall);
    for (std::size_t i = 0; i < k; ++i) plan.retained[i] += delta[i];
  }

  std::int64_t kept = std::accumulate(plan.retained.begin(), plan.retained.end(), std::int64_t{0});
  if (kept != plan.target) {
    throw numerical_error("retention allocation failed to reach the target");
  }
  return plan;
}

/// Monte-Carlo reference for compute_retention: per trial, take the capped
/// entitlement from every domain (fractional parts resolved by coin flip),
/// then draw the remaining points uniformly without replacement from all
/// unselected data. Independent of the deterministic allocation above.
struct OracleEstimate {
  std::vector<double> mean;    // mean retained per domain
  std::vector<double> stddev;  // per-trial standard deviation
  int trials = 0;
};

inline OracleEstimate retention_oracle(const std::vector<std::int64_t>& sizes,
                                       const std::vector<double>& alpha, double fraction,
                                       int trials, std::uint64_t seed = 12345) {
  if (trials <= 0) throw validation_error("trials must be positive");
  const std::size_t k = sizes.size();
  std::int64_t total = 0;
  for (std::int64_t s : sizes) total += s;
  const std::int64_t target = std::llround(fraction * static_cast<double>(total));

  Rng rng(seed);
  std::vector<double> sum(k, 0.0), sumsq(k, 0.0);
  std::vector<std::int64_t> taken(k);
  std::vector<std::size_t> rounded_up;

  for (int trial = 0; trial < trials; ++trial) {
    std::int64_t kept = 0;
    rounded_up.clear();
    for (std::size_t i = 0; i < k; ++i) {
      const double e =
          std::min(alpha[i] * static_cast<double>(target), static_cast<double>(sizes[i]));
      taken[i] = static_cast<std::int64_t>(std::floor(e));
      const double frac = e - static_cast<double>(taken[i]);
      if (frac > 0.0 && taken[i] < sizes[i] && rng.uniform() < frac) {
        ++taken[i];
        rounded_up.push_back(i);
      }
      kept += taken[i];
    }
    // The coin flips can overshoot T; cancel random round-ups until they fit.
    while (kept > target && !rounded_up.empty()) {
      const std::size_t pick = rng.index(rounded_up.size());
      --taken[rounded_up[pick]];
      rounded_up.erase(rounded_up.begin() + static_cast<std::ptrdiff_t>(pick));
      --kept;
    }
    std::int64_t pool = 0;
    for (std::size_t i = 0; i < k; ++i) pool += sizes[i] - taken[i];
    for (std::int64_t s = target - kept; s > 0; --s) {
      std::int64_t r = static_cast<std::int64_t>(rng.index(static_cast<std::size_t>(pool)));
      for (std::size_t i = 0; i < k; ++i) {
        const std::int64_t avail = sizes[i] - taken[i];
        if (r < avail) {
          ++taken[i];
          --pool;
          break;
        }
        r -= avail;
      }
    }
    for (std::size_t i = 0; i < k; ++i) {
      sum[i] += static_cast<double>(taken[i]);
      sumsq[i] += static_cast<double>(taken[i]) * static_cast<double>(taken[i]);
    }
  }

  OracleEstimate est;
  est.trials = trials;
  est.mean.resize(k);
  est.stddev.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    est.mean[i] = sum[i] / trials;
    const double var = std::max(0.0, sumsq[i] / trials - est.mean[i] * est.mean[i]);
    est.stddev[i] = std::sqrt(var);
  }
  return est;
}

/// Materializes the plan: per domain, a seeded shuffle decides which whole
/// trajectories are kept; the last one taken is truncated so the retained
/// state-action count is met exactly. Kept trajectories are emitted in their
/// original order.
inline std::vector<Domain> materialize_subset(const std::vector<Domain>& domains,
                                              const RetentionPlan& plan, std::uint64_t seed) {
  if (domains.size() != plan.retained.size()) {
    throw validation_error("plan does not match the dataset");
  }
  for (std::size_t i = 0; i < domains.size(); ++i) {
    if (static_cast<std::int64_t>(domains[i].size()) != plan.sizes[i]) {
      throw validation_error("plan sizes do not match domain '" + domains[i].name + "'");
    }
    if (!plan.names.empty() && plan.names[i] != domains[i].name) {
      throw validation_error("plan names do not match domain '" + domains[i].name + "'");
    }
  }
  std::vector<Domain> out;
  for (std::size_t i = 0; i < domains.size(); ++i) {
    const Domain& src = domains[i];
    Domain dst;
    dst.id = src.id;
    dst.name = src.name;
    dst.state_dim = src.state_dim;
    dst.action_dim = src.action_dim;

    std::vector<std::size_t> order(src.trajectories.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(seed, str_tag("subset_" + src.name)));
    rng.shuffle(order);

    std::vector<std::pair<std::size_t, std::size_t>> keep;  // (trajectory index, kept length)
    std::int64_t remaining = plan.retained[i];
    for (std::size_t t : order) {
      if (remaining <= 0) break;
      const std::size_t len = src.trajectories[t].length();
      const std::size_t take = std::min<std::size_t>(len, static_cast<std::size_t>(remaining));
      keep.emplace_back(t, take);
      remaining -= static_cast<std::int64_t>(take);
    }
    std::sort(keep.begin(), keep.end());
    for (const auto& [t, take] : keep) {
      const Trajectory& full = src.trajectories[t];
      if (take == full.length()) {
        dst.trajectories.push_back(full);
      } else {
        Trajectory cut;
        cut.states.assign(full.states.begin(), full.states.begin() + static_cast<std::ptrdiff_t>(take));
        cut.actions.assign(full.actions.begin(),
                           full.actions.begin() + static_cast<std::ptrdiff_t>(take));
        dst.trajectories.push_back(std::move(cut));
      }
    }
    out.push_back(std::move(dst));
  }
  return out;
}

inline nlohmann::json retention_plan_to_json(const RetentionPlan& plan,
                                             const std::string& preprocess_hash = "") {
  nlohmann::json j;
  j["version"] = 1;
  j["fraction"] = plan.fraction;
  j["target"] = plan.target;
  if (!preprocess_hash.empty()) j["preprocess_hash"] = preprocess_hash;
  auto doms = nlohmann::json::array();
  for (std::size_t i = 0; i < plan.retained.size(); ++i) {
    nlohmann::json d;
    if (i < plan.names.size()) d["name"] = plan.names[i];
    d["size"] = plan.sizes[i];
    d["desired"] = plan.desired[i];
    d["retained"] = plan.retained[i];
    d["capped"] = static_cast<bool>(plan.capped[i]);
    doms.push_back(d);
  }
  j["domains"] = doms;
  return j;
}

inline void save_retention_plan(const std::filesystem::path& path, const RetentionPlan& plan,
                                const std::string& preprocess_hash = "") {
  std::ofstream out(path);
  if (!out) throw validation_error("cannot write " + path.string());
  out << retention_plan_to_json(plan, preprocess_hash).dump(2) << '\n';
}

}  // namespace mixopt
